"""Losses, masked vertex modeling, Adam, Procrustes metrics, and the train loop.

The reference training mode is single-worker and bit-deterministic: shuffling,
mask sampling, and dropout each draw from their own generator (children of
train.seed), so toggling one knob cannot shift the other streams.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tensor
from .config import GraphormerConfig
from .mesh import InputError, MeshSample
from .model import GraphormerModel, ModelOutput

LOG_COLUMNS = (
    "epoch",
    "lr",
    "loss_total",
    "loss_vf",
    "loss_vc",
    "loss_j3",
    "loss_j2",
    "mpjpe",
    "pa_mpjpe",
    "mpve",
    "wall_seconds",
)


@dataclass
class LossWeights:
    """Nonnegative term weights; all default to 1."""

    w_vertex_fine: float = 1.0
    w_vertex_coarse: float = 1.0
    w_joint3d: float = 1.0
    w_joint2d: float = 1.0

    def validate(self) -> "LossWeights":
        ws = (self.w_vertex_fine, self.w_vertex_coarse, self.w_joint3d, self.w_joint2d)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise InputError("loss weights must be nonnegative with at least one positive")
        return self

    @classmethod
    def from_config(cls, config: GraphormerConfig) -> "LossWeights":
        t = config.train
        return cls(t.w_vertex_fine, t.w_vertex_coarse, t.w_joint3d, t.w_joint2d).validate()


@dataclass
class MaskPlan:
    """Query-token indices (joints + vertices only) whose inputs are zeroed."""

    indices: np.ndarray


def sample_mask_plan(n_queries: int, ratio_max: float, rng: np.random.Generator) -> MaskPlan:
    """ratio ~ U[0, ratio_max]; floor(ratio * Q) distinct query indices, uniform."""
    if not 0.0 <= ratio_max <= 1.0:
        raise InputError(f"ratio_max must be in [0, 1], got {ratio_max}")
    ratio = rng.uniform(0.0, ratio_max)
    k = int(ratio * n_queries)
    if k == 0:
        return MaskPlan(indices=np.empty(0, dtype=np.int64))
    idx = rng.choice(n_queries, size=k, replace=False)
    return MaskPlan(indices=np.sort(idx.astype(np.int64)))


def compute_losses(
    out: ModelOutput, gt: MeshSample, weights: LossWeights
) -> tuple[Tensor, dict]:
    """Weighted L1 terms over fine vertices, per-encoder coarse meshes, 3D and 2D joints."""
    dtype = out.fine_vertices.data.dtype
    term_vf = ad.l1_distance(out.fine_vertices, Tensor(gt.gt_fine_vertices, dtype=dtype))
    coarse_target = Tensor(gt.gt_coarse_vertices, dtype=dtype)
    term_vc = ad.l1_distance(out.intermediate_coarse[0], coarse_target)
    for inter in out.intermediate_coarse[1:]:
        term_vc = ad.add(term_vc, ad.l1_distance(inter, coarse_target))
    term_j3 = ad.l1_distance(out.joints3d, Tensor(gt.gt_joints3d, dtype=dtype))
    term_j2 = ad.l1_distance(out.joints2d, Tensor(gt.gt_joints2d, dtype=dtype))
    total = ad.add(
        ad.add(ad.scale(term_vf, weights.w_vertex_fine), ad.scale(term_vc, weights.w_vertex_coarse)),
        ad.add(ad.scale(term_j3, weights.w_joint3d), ad.scale(term_j2, weights.w_joint2d)),
    )
    parts = {
        "loss_vf": weights.w_vertex_fine * float(term_vf.data),
        "loss_vc": weights.w_vertex_coarse * float(term_vc.data),
        "loss_j3": weights.w_joint3d * float(term_j3.data),
        "loss_j2": weights.w_joint2d * float(term_j2.data),
    }
    parts["loss_total"] = float(total.data)
    return total, parts


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter first/second moments, keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params, state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update, in place; missing grads count as zero."""
    if lr < 0:
        raise InputError(f"lr must be nonnegative, got {lr}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, t in named_params:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        t.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def lr_schedule(epoch: int, base_lr: float, drop_epoch: int, factor: float) -> float:
    """Step schedule: base_lr until drop_epoch, then base_lr / factor."""
    if epoch < 0:
        raise InputError(f"epoch must be >= 0, got {epoch}")
    return base_lr if epoch < drop_epoch else base_lr / factor


def clip_gradients(named_params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    sq = 0.0
    for _, t in named_params:
        if t.grad is not None:
            sq += float(np.sum(t.grad * t.grad))
    norm = np.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, t in named_params:
            if t.grad is not None:
                t.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# Procrustes alignment and pose metrics
# ---------------------------------------------------------------------------


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, bool]:
    """Optimal similarity alignment (scale, proper rotation, translation) of pred onto gt.

    Returns (aligned, degenerate). Degenerate targets (fewer than 2 independent
    directions) fall through to a translation-only alignment with the flag set.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise InputError(f"procrustes_align expects matching k x 3 arrays, got {pred.shape} and {gt.shape}")
    if pred.shape[0] < 3:
        raise InputError(f"procrustes_align needs k >= 3 points, got {pred.shape[0]}")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    p = pred - mu_p
    g = gt - mu_g
    sv = np.linalg.svd(g, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1.0):
        return pred - mu_p + mu_g, True
    denom = float(np.sum(p * p))
    if denom <= 0.0:
        return pred - mu_p + mu_g, True
    h = p.T @ g
    u, s, vt = np.linalg.svd(h)
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    if sign == 0:
        sign = 1.0
    d = np.array([1.0, 1.0, sign])
    rot = vt.T @ np.diag(d) @ u.T
    scale = float(np.sum(s * d)) / denom
    return scale * p @ rot.T + mu_g, False


def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean error per point, in template length units."""
    return float(np.mean(np.linalg.norm(np.asarray(pred) - np.asarray(gt), axis=-1)))


def metrics(out, gt: MeshSample) -> dict:
    """MPJPE, PA-MPJPE, MPVE in template units (multiply by 1000 to report)."""
    joints_pred = out.joints3d.data if isinstance(out.joints3d, Tensor) else out.joints3d
    verts_pred = (
        out.fine_vertices.data if isinstance(out.fine_vertices, Tensor) else out.fine_vertices
    )
    aligned, _ = procrustes_align(joints_pred, gt.gt_joints3d)
    return {
        "mpjpe": mpjpe(joints_pred, gt.gt_joints3d),
        "pa_mpjpe": mpjpe(aligned, gt.gt_joints3d),
        "mpve": mpjpe(verts_pred, gt.gt_fine_vertices),
    }


def evaluate(model: GraphormerModel, samples) -> dict:
    """Deterministic evaluation: mean metrics over samples, reported x1000."""
    if not samples:
        raise InputError("cannot evaluate on an empty dataset")
    acc = {"mpjpe": 0.0, "pa_mpjpe": 0.0, "mpve": 0.0}
    for key, sample in enumerate(samples):
        out = model.forward(sample.silhouette, training=False, sample_key=key)
        m = metrics(out, sample)
        for k in acc:
            acc[k] += m[k]
    return {k: 1000.0 * v / len(samples) for k, v in acc.items()}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: GraphormerModel
    adam: AdamState
    log_rows: list
    checkpoint_path: str | None
    rng_states: dict


def _format_cell(value) -> str:
    return str(value) if isinstance(value, int) else repr(float(value))


def render_log_row(row: dict) -> str:
    return ",".join(_format_cell(row[c]) for c in LOG_COLUMNS)


def log_header(deterministic: bool) -> str:
    mode = "deterministic" if deterministic else "non-reproducible (wall time logged)"
    return (
        f"# metric units: template-units x1000 (mm-equivalent); mode: {mode}\n"
        + ",".join(LOG_COLUMNS)
    )


def train_loop(
    config: GraphormerConfig,
    train_samples,
    eval_samples,
    out_dir=None,
    template=None,
    model: GraphormerModel | None = None,
    verbose: bool = False,
) -> TrainResult:
    """Seeded epochs of shuffled minibatches with masked vertex modeling.

    Evaluates the held-out split each epoch, appends one CSV row, checkpoints
    every train.checkpoint_every epochs and at the end. Aborts on NaN loss,
    keeping a reference to the last good checkpoint in the exception.
    """
    import os

    from . import storage

    if not train_samples:
        raise InputError("train_loop requires a non-empty dataset")
    cfg = config.validate()
    t = cfg.train
    if model is None:
        model = GraphormerModel(cfg, template=template)
    weights = LossWeights.from_config(cfg)
    named = model.named_parameters()
    adam = AdamState()
    seed_seq = np.random.SeedSequence(t.seed)
    shuffle_ss, mask_ss, dropout_ss = seed_seq.spawn(3)
    rng_shuffle = np.random.default_rng(shuffle_ss)
    rng_mask = np.random.default_rng(mask_ss)
    rng_dropout = np.random.default_rng(dropout_ss)
    n_queries = cfg.n_joints + cfg.n_coarse

    log_rows: list[dict] = []
    csv_path = None
    last_checkpoint = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "metrics.csv")
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(log_header(deterministic=not t.log_wall_time) + "\n")

    def rng_states() -> dict:
        return {
            "shuffle": rng_shuffle.bit_generator.state,
            "mask": rng_mask.bit_generator.state,
            "dropout": rng_dropout.bit_generator.state,
        }

    def save(path):
        storage.save_checkpoint(
            path, cfg, model.params, adam, rng_states(), epoch=epoch_done, step=adam.step
        )
        return path

    epoch_done = 0
    for epoch in range(t.epochs):
        start = time.perf_counter()
        lr = lr_schedule(epoch, t.lr, t.lr_drop_epoch, t.lr_drop_factor)
        order = rng_shuffle.permutation(len(train_samples))
        sum_parts = {k: 0.0 for k in ("loss_total", "loss_vf", "loss_vc", "loss_j3", "loss_j2")}
        for b0 in range(0, len(order), t.batch_size):
            batch = order[b0 : b0 + t.batch_size]
            if t.mvm_enabled:
                plan = sample_mask_plan(n_queries, t.mvm_ratio_max, rng_mask)
            else:
                plan = MaskPlan(indices=np.empty(0, dtype=np.int64))
            inv_batch = 1.0 / len(batch)
            for idx in batch:
                sample = train_samples[idx]
                with ad.GradTape() as tape:
                    out = model.forward(
                        sample.silhouette,
                        training=True,
                        mask_indices=plan.indices,
                        rng=rng_dropout,
                        sample_key=int(idx),
                    )
                    total, parts = compute_losses(out, sample, weights)
                    scaled = ad.scale(total, inv_batch)
                tape.backward(scaled)
                for k in sum_parts:
                    sum_parts[k] += parts[k]
            if not np.isfinite(sum_parts["loss_total"]):
                raise NumericsError(
                    f"NaN loss at epoch {epoch}; last good checkpoint: {last_checkpoint}"
                )
            if t.grad_clip > 0:
                clip_gradients(named, t.grad_clip)
            adam_step(named, adam, lr)
            ad.zero_grads(t_ for _, t_ in named)
        epoch_done = epoch + 1
        eval_metrics = evaluate(model, eval_samples)
        n = len(train_samples)
        row = {"epoch": epoch, "lr": lr}
        row.update({k: v / n for k, v in sum_parts.items()})
        row.update(eval_metrics)
        elapsed = time.perf_counter() - start
        row["wall_seconds"] = elapsed if t.log_wall_time else 0.0
        log_rows.append(row)
        if verbose:
            print(
                f"epoch {epoch}: loss {row['loss_total']:.6f} "
                f"pa_mpjpe {row['pa_mpjpe']:.3f} ({elapsed:.1f}s)"
            )
        if csv_path is not None:
            with open(csv_path, "a", encoding="utf-8", newline="") as fh:
                fh.write(render_log_row(row) + "\n")
        if out_dir is not None and t.checkpoint_every > 0 and epoch_done % t.checkpoint_every == 0:
            last_checkpoint = save(
                os.path.join(out_dir, f"checkpoint_epoch{epoch_done:04d}.bin")
            )

    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = save(os.path.join(out_dir, "checkpoint.bin"))
    return TrainResult(
        model=model,
        adam=adam,
        log_rows=log_rows,
        checkpoint_path=checkpoint_path,
        rng_states=rng_states(),
    )
