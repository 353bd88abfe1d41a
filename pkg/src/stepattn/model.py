"""Multi-timescale sparse self-attention imputer.

For a target block t the model attends over the (at most) 206 observed
blocks of its context window::

    a[t, t'] = softmax over t' of ( q_t . k_t' + theta[I(t, t')] )   (masked)
    s_t      = sum over t' of a[t, t'] * v_t'

q, k and v come from three separate LAPR encoders (conv -> layernorm ->
relu -> average pool) whose 24-dim outputs are concatenated with calendar
one-hots (and, for keys and values, the block's own normalized step rate and
heart rate) and then projected linearly. ``s_t`` is a normalized step rate;
it is denormalized, clipped and multiplied by wear time to give steps.

Targets inside one LAPR context are hidden jointly: a context built for a
set of targets treats every one of them as missing. During training a
batch's targets are therefore split into per-participant chunks no larger
than a small fraction of the participant's visible blocks, so the extra
hiding stays marginal while the LAPR encodings are shared across targets.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nn
from ._io import atomic_open
from .baselines.fills import FillSpec, fill_rates, target_wear
from .core import InsufficientDataError, NormStats, ParticipantSeries, as_index_mask, clip_rate, compute_norm_stats
from .lapr import LaprContext
from .window import CELL_ROWS, CELL_COLS, DAY_OFFSETS, HOUR_OFFSETS, N_CELLS, N_COLS, N_ROWS, window_indices

log = logging.getLogger(__name__)

EMBED_DIM = 24
N_DOW = 7
N_HOD = 24
QUERY_DIM = EMBED_DIM + N_DOW + N_HOD  # 55
KV_DIM = QUERY_DIM + 2  # 57
ROLES = ("query", "key", "value")
D_K_GRID = (4, 8, 16)
LR_GRID = (0.1, 0.01, 0.001)


class NoObservedContext(ValueError):
    """The target's context window holds no observed block."""


def _one_hot(idx, n: int) -> np.ndarray:
    return np.eye(n)[np.asarray(idx, dtype=np.int64)]


class _Encoder:
    def __init__(self, kernel: nn.ParamTensor, gain: nn.ParamTensor, bias: nn.ParamTensor):
        self.kernel, self.gain, self.bias = kernel, gain, bias

    def forward(self, X: np.ndarray):
        Y = X @ nn.conv_matrix(self.kernel.values, nn.LAPR_LENGTH)
        Z, ln_cache = nn.layernorm_forward(Y, self.gain.values, self.bias.values)
        E = nn.avgpool_forward(nn.relu_forward(Z))
        return E, (X, Z, ln_cache)

    def backward(self, cache, dE: np.ndarray, grads: dict):
        X, Z, ln_cache = cache
        dZ = nn.relu_backward(Z, nn.avgpool_backward(dE))
        dY, dg, db = nn.layernorm_backward(dZ, ln_cache)
        grads[self.kernel.name] += nn.conv1d_kernel_grad(X, dY)
        grads[self.gain.name] += dg
        grads[self.bias.name] += db


class AttentionModel:
    """Learnable parameters of the sparse attention imputer."""

    def __init__(self, d_k: int = 8, seed: int = 0):
        if d_k < 1:
            raise ValueError("d_k must be positive")
        self.d_k = d_k
        self.seed = seed
        rng = np.random.default_rng(seed)
        init: dict[str, np.ndarray] = {}
        for r in "qkv":
            init[f"encoder_{r}.kernel"] = nn.glorot_uniform(rng, nn.CONV_KERNEL, nn.CONV_KERNEL, nn.CONV_KERNEL)
            init[f"encoder_{r}.ln_gain"] = np.ones(nn.LAPR_LENGTH)
            init[f"encoder_{r}.ln_bias"] = np.zeros(nn.LAPR_LENGTH)
        init["proj_q.weight"] = nn.glorot_uniform(rng, (d_k, QUERY_DIM), QUERY_DIM, d_k)
        init["proj_q.bias"] = np.zeros(d_k)
        init["proj_k.weight"] = nn.glorot_uniform(rng, (d_k, KV_DIM), KV_DIM, d_k)
        init["proj_k.bias"] = np.zeros(d_k)
        init["proj_v.weight"] = nn.glorot_uniform(rng, KV_DIM, KV_DIM, 1)
        init["proj_v.bias"] = np.zeros(1)
        init["theta"] = np.zeros(N_CELLS)
        self.params = {k: nn.ParamTensor(k, v) for k, v in init.items()}
        self.encoders = {
            r: _Encoder(*(self.params[f"encoder_{r}.{n}"] for n in ("kernel", "ln_gain", "ln_bias"))) for r in "qkv"
        }

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].values

    def parameters(self) -> list[nn.ParamTensor]:
        return list(self.params.values())

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(p.values) for k, p in self.params.items()}

    def add_grads(self, grads: Mapping[str, np.ndarray]):
        for k, g in grads.items():
            self.params[k].grad += g

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]):
        for k, p in self.params.items():
            if state[k].shape != p.values.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.values.shape}")
            p.values[...] = state[k]

    def save(self, path):
        nn.save_checkpoint(path, self.params, {"model": "sparse-attention", "d_k": self.d_k, "seed": self.seed})

    @classmethod
    def load(cls, path) -> "AttentionModel":
        tensors, meta = nn.load_checkpoint(path)
        m = cls(d_k=int(meta["d_k"]), seed=int(meta.get("seed", 0)))
        m.load_state(tensors)
        return m


# ------------------------------------------------------------------ features


def query_features(embed: np.ndarray, dow, hod) -> np.ndarray:
    return np.concatenate([embed, _one_hot(dow, N_DOW), _one_hot(hod, N_HOD)], axis=-1)


def kv_features(embed: np.ndarray, dow, hod, rate_z, hr_z) -> np.ndarray:
    return np.concatenate(
        [embed, _one_hot(dow, N_DOW), _one_hot(hod, N_HOD), np.asarray(rate_z, float)[..., None], np.asarray(hr_z, float)[..., None]],
        axis=-1,
    )


def assemble_features(
    series: ParticipantSeries,
    t: int,
    role: str,
    lapr_embed: np.ndarray,
    stats: NormStats,
    holdout=None,
) -> np.ndarray:
    """Input vector for one block in the given role.

    Queries carry no step or heart rate (the target's are unknown). Keys and
    values do; a missing heart rate contributes the participant mean (0 after
    normalization).
    """
    lapr_embed = np.asarray(lapr_embed, dtype=np.float64)
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    if lapr_embed.shape != (EMBED_DIM,):
        raise ValueError(f"LAPR embedding must have {EMBED_DIM} entries")
    dow, hod = series.calendar(t)
    if role == "query":
        return query_features(lapr_embed, dow, hod)
    hidden = as_index_mask(holdout, series.T)
    if not series.observed[t] or hidden[t]:
        raise ValueError(f"block {t} has no observed features to use as a {role}")
    rate = stats.normalize_rate(series.steps[t] / series.wear_minutes[t])
    hr = series.heart_rate[t]
    hr_z = 0.0 if np.isnan(hr) else stats.normalize_hr(hr)
    return kv_features(lapr_embed, dow, hod, rate, hr_z)


# -------------------------------------------------------------- batched core


@dataclass
class _Group:
    """Targets of one participant that share a LAPR context."""

    ctx: LaprContext
    targets: np.ndarray
    mask: np.ndarray  # (n, 206) attendable cells
    rows: np.ndarray  # unique context blocks
    rowmap: np.ndarray  # (n, 206) -> position in rows

    @classmethod
    def build(cls, ctx: LaprContext, targets) -> "_Group":
        targets = np.asarray(targets, dtype=np.int64)
        idx, valid = window_indices(targets, ctx.T)
        mask = valid & ctx.visible[idx]
        rows, inv = np.unique(idx[mask], return_inverse=True)
        rowmap = np.zeros(idx.shape, dtype=np.int64)
        rowmap[mask] = inv
        return cls(ctx, targets, mask, rows, rowmap)


def _forward(model: AttentionModel, g: _Group):
    P = model.params
    ctx = g.ctx
    series = ctx.series
    Eq, cache_q = model.encoders["q"].forward(ctx.rows(g.targets))
    Fq = query_features(Eq, *series.calendar(g.targets))
    q = Fq @ P["proj_q.weight"].values.T + P["proj_q.bias"].values

    cache_k = cache_v = Fk = Fv = None
    if g.rows.size:
        Xr = ctx.rows(g.rows)
        Ek, cache_k = model.encoders["k"].forward(Xr)
        Ev, cache_v = model.encoders["v"].forward(Xr)
        dow_r, hod_r = series.calendar(g.rows)
        Fk = kv_features(Ek, dow_r, hod_r, ctx.rate_z[g.rows], ctx.hr_z[g.rows])
        Fv = kv_features(Ev, dow_r, hod_r, ctx.rate_z[g.rows], ctx.hr_z[g.rows])
        k = Fk @ P["proj_k.weight"].values.T + P["proj_k.bias"].values
        v = Fv @ P["proj_v.weight"].values + P["proj_v.bias"].values[0]

    if g.rows.size == 0:
        # no target has context; index a dummy row so shapes stay valid
        k = np.zeros((1, model.d_k))
        v = np.zeros(1)
    kg = k[g.rowmap]  # (n, 206, d_k)
    vg = v[g.rowmap]  # (n, 206)
    logits = np.matmul(kg, q[:, :, None])[:, :, 0] + P["theta"].values
    has = g.mask.any(axis=1)
    a = np.zeros(g.mask.shape)
    if has.any():
        a[has] = nn.masked_softmax(logits[has], g.mask[has])
    s = np.where(has, np.sum(a * vg, axis=1), np.nan)
    cache = (cache_q, cache_k, cache_v, Fq, Fk, Fv, q, kg, vg, a)
    return s, a, has, cache


def _backward(model: AttentionModel, g: _Group, cache, ds: np.ndarray) -> dict[str, np.ndarray]:
    P = model.params
    grads = model.zero_grads()
    cache_q, cache_k, cache_v, Fq, Fk, Fv, q, kg, vg, a = cache
    R = g.rows.size
    ds = np.where(np.isnan(ds), 0.0, ds)
    if R == 0:
        return grads
    m = g.mask
    rm = g.rowmap[m]

    dvg = ds[:, None] * a
    dv = np.bincount(rm, weights=dvg[m], minlength=R)
    dlogits = nn.masked_softmax_backward(a, ds[:, None] * vg)
    grads["theta"] += dlogits.sum(axis=0)
    dq = np.matmul(dlogits[:, None, :], kg)[:, 0, :]
    dkg = dlogits[:, :, None] * q[:, None, :]
    dk = np.stack([np.bincount(rm, weights=dkg[..., j][m], minlength=R) for j in range(model.d_k)], axis=1)

    Wq = P["proj_q.weight"].values
    grads["proj_q.weight"] += dq.T @ Fq
    grads["proj_q.bias"] += dq.sum(axis=0)
    model.encoders["q"].backward(cache_q, (dq @ Wq)[:, :EMBED_DIM], grads)

    Wk = P["proj_k.weight"].values
    grads["proj_k.weight"] += dk.T @ Fk
    grads["proj_k.bias"] += dk.sum(axis=0)
    model.encoders["k"].backward(cache_k, (dk @ Wk)[:, :EMBED_DIM], grads)

    wv = P["proj_v.weight"].values
    grads["proj_v.weight"] += dv @ Fv
    grads["proj_v.bias"] += dv.sum()
    model.encoders["v"].backward(cache_v, dv[:, None] * wv[None, :EMBED_DIM], grads)
    return grads


def _fallback_rates(series: ParticipantSeries, hidden: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return fill_rates(series, FillSpec("median", "dw_hd"), hidden)[targets]


def _group_loss(model: AttentionModel, g: _Group, stats: NormStats, scale: float, need_grad: bool):
    """Sum of absolute step-count errors over the group, and gradients of ``scale * sum``."""
    series = g.ctx.series
    s, a, has, cache = _forward(model, g)
    wear = series.wear_minutes[g.targets].astype(np.float64)
    truth = series.steps[g.targets].astype(np.float64)
    rate = stats.denormalize_rate(s)
    if not has.all():
        rate = np.where(has, rate, 0.0)
        rate[~has] = _fallback_rates(series, g.ctx.hidden, g.targets[~has])
    s_max = stats.max_train_step_rate
    pred = wear * clip_rate(rate, s_max)
    err = pred - truth
    loss = float(np.abs(err).sum())
    if not need_grad:
        return loss, pred, None
    inside = has & (rate > 0.0) & (rate < 1.5 * s_max)
    ds = np.where(inside, np.sign(err) * wear * stats.step_rate_std * scale, 0.0)
    return loss, pred, _backward(model, g, cache, ds)


# ------------------------------------------------------------ single target


def attention_forward(model: AttentionModel, series: ParticipantSeries, t: int, holdout, stats: NormStats):
    """Normalized rate prediction and the 206 attention weights for target ``t``.

    ``t`` and every held-out block are hidden from all LAPRs and keys/values.
    Raises :class:`NoObservedContext` when no context block is observed.
    """
    if not 0 <= t < series.T:
        raise IndexError(f"t={t} outside the series")
    hidden = as_index_mask(holdout, series.T)
    hidden[t] = True
    g = _Group.build(LaprContext(series, stats, hidden), [t])
    if not g.mask[0].any():
        raise NoObservedContext(f"no observed block in the context window of t={t}")
    s, a, _, _ = _forward(model, g)
    return float(s[0]), a[0]


def predict_step_count(model: AttentionModel, series: ParticipantSeries, t: int, holdout, stats: NormStats, wear_minutes=None) -> float:
    """Step count for ``t``; falls back to the DW+HD median fill without context."""
    return float(predict_targets(model, series, [t], holdout, stats, None if wear_minutes is None else [wear_minutes])[0])


def predict_targets(
    model: AttentionModel,
    series: ParticipantSeries,
    targets,
    holdout,
    stats: NormStats,
    wear_minutes=None,
    chunk: int = 2048,
    return_weights: bool = False,
):
    """Step counts for many targets of one participant.

    Targets are hidden jointly with the holdout set, which is exact whenever
    the targets are held out or originally missing (the evaluation setting).
    Wear time defaults to the block's own, or 60 for never-observed blocks.
    """
    targets = np.asarray(targets, dtype=np.int64)
    hidden = as_index_mask(holdout, series.T)
    hidden[targets] = True
    ctx = LaprContext(series, stats, hidden)
    wear = target_wear(series, targets, wear_minutes)
    out = np.empty(targets.size)
    weights = np.zeros((targets.size, N_CELLS)) if return_weights else None
    for i in range(0, targets.size, chunk):
        sl = slice(i, i + chunk)
        g = _Group.build(ctx, targets[sl])
        s, a, has, _ = _forward(model, g)
        rate = stats.denormalize_rate(s)
        if not has.all():
            rate = np.where(has, rate, 0.0)
            rate[~has] = _fallback_rates(series, hidden, g.targets[~has])
        out[sl] = wear[sl] * clip_rate(rate, stats.max_train_step_rate)
        if return_weights:
            weights[sl] = a
    return (out, weights) if return_weights else out


def ensemble_predict(models: Sequence[AttentionModel], series, targets, holdout, stats, wear_minutes=None) -> np.ndarray:
    """Mean of the step-count predictions of several models."""
    preds = [predict_targets(m, series, targets, holdout, stats, wear_minutes) for m in models]
    return np.mean(preds, axis=0)


# ----------------------------------------------------------------- training


@dataclass
class TrainConfig:
    lr: float = 0.01
    d_k: int = 8
    batch_size: int = 20000
    epochs: int = 30
    seed: int = 0
    mask_fraction: float = 0.05
    max_train_instances: int | None = None
    max_val_instances: int | None = None
    monitor_instances: int = 2000
    patience: int | None = None
    jobs: int = 1


@dataclass
class TrainLog:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_micro_mae: float = float("inf")

    def write_csv(self, path):
        with atomic_open(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "train_mae", "val_micro_mae"])
            for e in self.epochs:
                w.writerow([e["epoch"], repr(e["train_loss"]), repr(e["train_mae"]), repr(e["val_micro_mae"])])


@dataclass
class _Prepared:
    series: ParticipantSeries
    stats: NormStats
    holdout: np.ndarray
    train: np.ndarray
    val: np.ndarray
    cap: int


def prepare_participants(cohort: Sequence[ParticipantSeries], split, mask_fraction: float = 0.05) -> list[_Prepared]:
    out = []
    for s in cohort:
        holdout = split.holdout(s.participant_id)
        try:
            stats = compute_norm_stats(s, exclude=holdout)
        except InsufficientDataError:
            log.warning("%s: skipped, too little observed data", s.participant_id)
            continue
        n_vis = int((s.observed & ~holdout).sum())
        cap = max(1, int(mask_fraction * n_vis))
        out.append(_Prepared(s, stats, holdout, split.indices(s.participant_id, "train"), split.indices(s.participant_id, "validation"), cap))
    return out


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with cf.ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _chunk_jobs(preps: Sequence[_Prepared], pairs: np.ndarray) -> list[tuple[int, np.ndarray]]:
    """Group (participant, target) pairs into jointly-hidden chunks, in a fixed order."""
    jobs = []
    order = np.argsort(pairs[:, 0], kind="stable")
    p_sorted = pairs[order]
    bounds = np.flatnonzero(np.diff(p_sorted[:, 0])) + 1
    for grp in np.split(p_sorted, bounds):
        if grp.size == 0:
            continue
        pi = int(grp[0, 0])
        cap = preps[pi].cap
        for i in range(0, grp.shape[0], cap):
            jobs.append((pi, np.sort(grp[i : i + cap, 1])))
    return jobs


def _run_chunks(model, preps, pairs, scale, need_grad, jobs, hide_targets=True):
    def work(job):
        pi, targets = job
        p = preps[pi]
        hidden = p.holdout.copy()
        if hide_targets:
            hidden[targets] = True
        g = _Group.build(LaprContext(p.series, p.stats, hidden), targets)
        return _group_loss(model, g, p.stats, scale, need_grad)

    return _map(work, _chunk_jobs(preps, pairs), jobs)


def batch_loss(model: AttentionModel, preps, pairs: np.ndarray, need_grad: bool = True, jobs: int = 1) -> float:
    """Mean absolute step error over ``pairs``; when ``need_grad``, gradients go to ``param.grad``."""
    n = pairs.shape[0]
    results = _run_chunks(model, preps, pairs, 1.0 / n, need_grad, jobs)
    total = 0.0
    for loss, _, grads in results:
        total += loss
        if grads is not None:
            model.add_grads(grads)
    return total / n


def _pairs(preps, attr: str) -> np.ndarray:
    parts = [np.stack([np.full(getattr(p, attr).size, i), getattr(p, attr)], axis=1) for i, p in enumerate(preps)]
    return np.concatenate(parts) if parts else np.zeros((0, 2), dtype=np.int64)


def evaluate_pairs(model, preps, pairs, jobs: int = 1, hide_targets: bool = True) -> float:
    """Micro MAE (steps) over the given pairs."""
    if pairs.shape[0] == 0:
        return float("nan")
    res = _run_chunks(model, preps, pairs, 1.0, False, jobs, hide_targets)
    return sum(r[0] for r in res) / pairs.shape[0]


def _subsample(pairs: np.ndarray, k: int | None, rng: np.random.Generator) -> np.ndarray:
    if k is None or pairs.shape[0] <= k:
        return pairs
    return pairs[np.sort(rng.choice(pairs.shape[0], size=k, replace=False))]


def fit(cohort: Sequence[ParticipantSeries], split, config: TrainConfig | None = None, model: AttentionModel | None = None):
    """Train with Adam on mean absolute step-count error; keep the best-validation weights.

    Returns ``(model, TrainLog)``. Epoch 0 in the log is the untrained model.
    """
    config = config or TrainConfig()
    model = model or AttentionModel(d_k=config.d_k, seed=config.seed)
    preps = prepare_participants(cohort, split, config.mask_fraction)
    train_pairs = _pairs(preps, "train")
    if train_pairs.shape[0] == 0:
        raise ValueError("empty training set")
    rng0 = np.random.default_rng(np.random.SeedSequence((config.seed, 0xC0FFEE)))
    val_pairs = _subsample(_pairs(preps, "val"), config.max_val_instances, rng0)
    monitor = _subsample(train_pairs, config.monitor_instances, rng0)

    opt = nn.Adam(config.lr)
    tlog = TrainLog(asdict(config))

    def record(epoch: int, train_loss: float):
        val = evaluate_pairs(model, preps, val_pairs, config.jobs, hide_targets=False)
        tr = evaluate_pairs(model, preps, monitor, config.jobs)
        tlog.epochs.append({"epoch": epoch, "train_loss": train_loss, "train_mae": tr, "val_micro_mae": val})
        log.info("epoch %d train_loss %.3f train_mae %.3f val_micro_mae %.3f", epoch, train_loss, tr, val)
        return val

    best_val = record(0, float("nan"))
    best_state = model.state()
    tlog.best_epoch, tlog.best_val_micro_mae = 0, best_val
    stale = 0
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, epoch)))
        pairs = train_pairs[rng.permutation(train_pairs.shape[0])]
        if config.max_train_instances is not None:
            pairs = pairs[: config.max_train_instances]
        total, n = 0.0, 0
        for i in range(0, pairs.shape[0], config.batch_size):
            batch = pairs[i : i + config.batch_size]
            total += batch_loss(model, preps, batch, True, config.jobs) * batch.shape[0]
            n += batch.shape[0]
            opt.step(model.parameters())
        val = record(epoch, total / n)
        if val < best_val or np.isnan(best_val):
            best_val, best_state, stale = val, model.state(), 0
            tlog.best_epoch, tlog.best_val_micro_mae = epoch, val
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break
    model.load_state(best_state)
    return model, tlog


def select_hyperparameters(cohort, splits, lrs=LR_GRID, d_ks=D_K_GRID, base: TrainConfig | None = None):
    """Grid search over learning rate x d_k by mean best validation Micro MAE across splits."""
    base = base or TrainConfig()
    scores = {}
    for lr in lrs:
        for d_k in d_ks:
            cfg = TrainConfig(**{**asdict(base), "lr": lr, "d_k": d_k})
            vals = [fit(cohort, sp, cfg)[1].best_val_micro_mae for sp in splits]
            scores[(lr, d_k)] = float(np.mean(vals))
    best = min(scores, key=lambda k: (scores[k], k))
    return best, scores


# --------------------------------------------------------- attention export


def weights_to_grid(weights: np.ndarray) -> np.ndarray:
    """Place 206 relative-index weights into the (9, 23) grid, centre = 0."""
    grid = np.zeros((N_ROWS, N_COLS))
    grid[CELL_ROWS, CELL_COLS] = weights
    return grid


def export_attention_maps(
    model: AttentionModel,
    cohort: Sequence[ParticipantSeries],
    targets: Mapping[str, Sequence[int]],
    holdouts: Mapping[str, object] | None = None,
    stats: Mapping[str, NormStats] | None = None,
):
    """Mean attention grids over the targets: overall and per target day of week.

    Returns ``(overall, by_dow, counts)``; targets without context are skipped.
    """
    total = np.zeros((N_ROWS, N_COLS))
    by_dow = np.zeros((7, N_ROWS, N_COLS))
    counts = np.zeros(7, dtype=np.int64)
    for s in cohort:
        tg = np.asarray(targets.get(s.participant_id, []), dtype=np.int64)
        if tg.size == 0:
            continue
        hold = None if holdouts is None else holdouts.get(s.participant_id)
        st = stats[s.participant_id] if stats is not None else compute_norm_stats(s, exclude=hold)
        _, w = predict_targets(model, s, tg, hold, st, return_weights=True)
        ok = w.sum(axis=1) > 0
        dow, _ = s.calendar(tg)
        for d in range(7):
            sel = ok & (dow == d)
            if sel.any():
                by_dow[d] += weights_to_grid(w[sel].sum(axis=0))
                counts[d] += int(sel.sum())
    n = counts.sum()
    if n:
        total = by_dow.sum(axis=0) / n
    with np.errstate(invalid="ignore"):
        by_dow = np.where(counts[:, None, None] > 0, by_dow / np.maximum(counts, 1)[:, None, None], 0.0)
    return total, by_dow, counts


def write_attention_grid_csv(grid: np.ndarray, path):
    """9 rows (hour offsets) x 23 columns (day offsets)."""
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour_offset"] + [str(int(d)) for d in DAY_OFFSETS])
        for r, h in enumerate(HOUR_OFFSETS):
            w.writerow([str(int(h))] + [repr(float(x)) for x in grid[r]])
