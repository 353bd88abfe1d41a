"""Small hand-differentiated numeric kernel.

Every primitive works along the last axis and accepts any number of leading
batch axes. Backward functions return gradients; nothing here keeps a graph.
All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from ._io import atomic_write_text

LAPR_LENGTH = 145
CONV_KERNEL = 49
CONV_PADDING = 24
POOL_KERNEL = 7
POOL_STRIDE = 6
LN_EPS = 1e-5


class EmptyAttentionSet(ValueError):
    """A softmax row had every entry masked out."""


@dataclass(eq=False)
class ParamTensor:
    name: str
    values: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.adam_m = np.zeros_like(self.values)
        self.adam_v = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- convolution


def _conv_index(n: int, k: int, padding: int) -> tuple[np.ndarray, np.ndarray]:
    n_out = n + 2 * padding - k + 1
    m = np.arange(n)[:, None]
    i = np.arange(n_out)[None, :]
    j = m - i + padding
    return j, (j >= 0) & (j < k)


def conv_matrix(kernel: np.ndarray, n: int, padding: int = CONV_PADDING) -> np.ndarray:
    """Dense (n, n_out) matrix M with ``x @ M`` equal to the padded cross-correlation."""
    kernel = np.asarray(kernel, dtype=np.float64)
    j, ok = _conv_index(n, kernel.size, padding)
    return np.where(ok, kernel[np.where(ok, j, 0)], 0.0)


def conv1d_forward(x: np.ndarray, kernel: np.ndarray, padding: int = CONV_PADDING) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 1 or x.shape[-1] + 2 * padding < kernel.size:
        raise ValueError(f"kernel of size {kernel.size} does not fit input of length {x.shape[-1]}")
    return x @ conv_matrix(kernel, x.shape[-1], padding)


def conv1d_kernel_grad(x, dout, kernel_size: int = CONV_KERNEL, padding: int = CONV_PADDING) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    dM = x.reshape(-1, n).T @ dout.reshape(-1, dout.shape[-1])
    j, ok = _conv_index(n, kernel_size, padding)
    return np.bincount(j[ok], weights=dM[ok], minlength=kernel_size)


def conv1d_backward(x, kernel, dout, padding: int = CONV_PADDING):
    """Returns (dx, dkernel)."""
    kernel = np.asarray(kernel, dtype=np.float64)
    M = conv_matrix(kernel, np.shape(x)[-1], padding)
    return dout @ M.T, conv1d_kernel_grad(x, dout, kernel.size, padding)


# ------------------------------------------------------------- normalization


def layernorm_forward(x, gain, bias, eps: float = LN_EPS):
    """Returns (out, cache)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError("layer norm needs at least two features")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layernorm_backward(dout, cache):
    """Returns (dx, dgain, dbias)."""
    xhat, inv, gain = cache
    lead = tuple(range(dout.ndim - 1))
    dgain = np.sum(dout * xhat, axis=lead)
    dbias = np.sum(dout, axis=lead)
    dxhat = dout * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


# ------------------------------------------------------------------- pooling


def pool_matrix(n: int = LAPR_LENGTH, kernel: int = POOL_KERNEL, stride: int = POOL_STRIDE) -> np.ndarray:
    n_out = (n - kernel) // stride + 1
    P = np.zeros((n, n_out))
    for o in range(n_out):
        P[o * stride : o * stride + kernel, o] = 1.0 / kernel
    return P


_POOL = pool_matrix()


def avgpool_forward(x: np.ndarray) -> np.ndarray:
    """Mean over windows of 7 with stride 6: 145 -> 24."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != LAPR_LENGTH:
        raise ValueError(f"average pooling expects length {LAPR_LENGTH}, got {x.shape[-1]}")
    return x @ _POOL


def avgpool_backward(dout: np.ndarray) -> np.ndarray:
    return dout @ _POOL.T


# ---------------------------------------------------------- dense & friends


def affine_forward(x, W, b):
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W)
    if x.shape[-1] != W.shape[-1]:
        raise ValueError(f"affine map expects {W.shape[-1]} inputs, got {x.shape[-1]}")
    return x @ W.T + b


def affine_backward(x, W, dout):
    """Returns (dx, dW, db). For a vector-valued W (scalar output) dout has no trailing axis."""
    x = np.asarray(x, dtype=np.float64)
    if W.ndim == 1:
        dx = dout[..., None] * W
        dW = dout.reshape(-1) @ x.reshape(-1, x.shape[-1])
        db = np.sum(dout)
        return dx, dW, db
    dx = dout @ W
    dW = dout.reshape(-1, dout.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    db = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    return dx, dW, db


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, dout):
    return np.where(x > 0, dout, 0.0)


def masked_softmax(logits, mask):
    """Softmax over entries where ``mask`` is true; masked entries get exactly 0."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if np.any(~mask.any(axis=-1)):
        raise EmptyAttentionSet("empty attention set")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax_backward(p, dp):
    """Gradient with respect to the logits; masked entries (p == 0) get 0."""
    return p * (dp - np.sum(p * dp, axis=-1, keepdims=True))


def mae(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    return float(np.mean(np.abs(pred - np.asarray(target, dtype=np.float64))))


def mae_backward(pred, target):
    """Subgradient of the mean absolute error; 0 at exact ties."""
    pred = np.asarray(pred, dtype=np.float64)
    return np.sign(pred - np.asarray(target, dtype=np.float64)) / pred.size


# ------------------------------------------------------------------ training


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0

    def step(self, params: Iterable[ParamTensor]):
        self.step_count += 1
        adam_step(params, self.lr, self.beta1, self.beta2, self.eps, self.step_count)


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, step_count=1):
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    c1 = 1.0 - beta1**step_count
    c2 = 1.0 - beta2**step_count
    for p in params:
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * p.grad
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * p.grad * p.grad
        if lr != 0.0:
            p.values -= lr * (p.adam_m / c1) / (np.sqrt(p.adam_v / c2) + eps)
        p.zero_grad()


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: Iterable[ParamTensor],
    h: float = 1e-5,
    max_coords: int | None = 200,
    seed: int = 0,
    atol: float = 1e-6,
    kink_fn: Callable[[], object] | None = None,
    stats: dict | None = None,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``loss_fn`` evaluates the loss at the current parameter values and writes
    analytic gradients into each ``ParamTensor.grad``. The gap is
    ``|g - fd| / max(atol, |g| + |fd|)``, so structurally zero gradients are
    not judged on round-off. When ``kink_fn`` is given it is called after each
    perturbed evaluation and must return a fingerprint of every piecewise
    branch taken (relu signs and the like); coordinates whose +h and -h
    fingerprints differ straddle a kink and are skipped. ``stats`` receives
    the numbers of checked and skipped coordinates.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss_fn()
    analytic = [p.grad.copy() for p in params]
    coords = [(k, i) for k, p in enumerate(params) for i in range(p.values.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = 0.0
    checked = skipped = 0
    for k, i in coords:
        flat = params[k].values.reshape(-1)
        old = flat[i]
        flat[i] = old + h
        up = loss_fn()
        fp_up = kink_fn() if kink_fn is not None else None
        flat[i] = old - h
        down = loss_fn()
        fp_down = kink_fn() if kink_fn is not None else None
        flat[i] = old
        if kink_fn is not None and fp_up != fp_down:
            skipped += 1
            continue
        checked += 1
        fd = (up - down) / (2 * h)
        ga = analytic[k].reshape(-1)[i]
        worst = max(worst, abs(ga - fd) / max(atol, abs(ga) + abs(fd)))
    for p, g in zip(params, analytic):
        p.grad[...] = g
    if stats is not None:
        stats.update(checked=checked, skipped=skipped)
    return worst


# ---------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = "stepattn-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, ParamTensor] | Iterable[ParamTensor], meta: Mapping[str, object] | None = None):
    """Write parameters as a flat text file.

    Layout::

        stepattn-checkpoint 1
        meta <key> <value>              (zero or more)
        tensor <name> <ndim> <d0> ...   (one per tensor, sorted by name)
        <row-major values, repr floats separated by spaces>

    Floats are written with ``repr`` so reading them back is exact.
    """
    if isinstance(params, Mapping):
        params = list(params.values())
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for key, val in sorted((meta or {}).items()):
        lines.append(f"meta {key} {val}")
    for p in sorted(params, key=lambda p: p.name):
        dims = " ".join(str(d) for d in p.values.shape)
        lines.append(f"tensor {p.name} {p.values.ndim} {dims}".rstrip())
        lines.append(" ".join(repr(float(v)) for v in p.values.reshape(-1)))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split() != [CHECKPOINT_MAGIC, str(CHECKPOINT_VERSION)]:
        raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        if parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
            i += 1
        elif parts[0] == "tensor":
            name, ndim = parts[1], int(parts[2])
            shape = tuple(int(d) for d in parts[3 : 3 + ndim])
            vals = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
            if vals.size != int(np.prod(shape)):
                raise ValueError(f"{path}: tensor {name} has {vals.size} values for shape {shape}")
            tensors[name] = vals.reshape(shape)
            i += 2
        else:
            raise ValueError(f"{path}: unexpected line {i + 1}")
    return tensors, meta
