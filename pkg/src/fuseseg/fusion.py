"""Losses, optimizer, the two teacher training loops, and the fuse-model
weight-update protocol.

Per fuse iteration: (1) the fusing coefficient alpha is computed from the
previous iteration's fuse-model accuracy P and loss L as
alpha = (P + 1) / ((1 / L) + N), clamped to [0.01, 1.0]; (2) the fuse weights
are rebuilt as W' = alpha * W + (1 - alpha) * (W1 + W2) (sum mode, the
default) or with (W1 + W2) / 2 (mean mode); (3) the fuse model takes one
supervised gradient step on a batch that is half T1 / half T2 crops at
identical patch positions. In joint mode the teachers advance one step each
every ``teacher_step_every`` fuse iterations; in sequential mode they are
frozen checkpoints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import metrics as M
from . import nn
from . import tensor as T
from .nn import NamedWeights, is_running_stat
from .tensor import Tape, Tensor

ALPHA_FLOOR = 0.01
ALPHA_CEIL = 1.0

CSV_HEADER = [
    "epoch",
    "iter",
    "model",
    "loss",
    "accuracy",
    "alpha_raw",
    "alpha",
    "dice_csf",
    "dice_gm",
    "dice_wm",
    "seed",
]


# ---------------------------------------------------------------------------
# Losses and metrics
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean per-voxel cross-entropy of logits [..., C] against integer labels,
    computed through log-softmax."""
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise T.ShapeError(
            f"label shape {labels.shape} does not match logits leading shape {logits.shape[:-1]}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64)
    num_classes = logits.shape[-1]
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        coord = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(
            f"label {int(labels[coord])} at voxel {coord} is outside [0, {num_classes})"
        )
    picked = T.take_along_last(T.log_softmax(logits, axis=-1), labels)
    return T.mul(T.mean(picked), -1.0)


def voxel_accuracy(logits, labels) -> float:
    """Fraction of voxels where argmax(logits) equals the label."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    if labels.shape != arr.shape[:-1]:
        raise T.ShapeError(
            f"label shape {labels.shape} does not match logits leading shape {arr.shape[:-1]}"
        )
    return float(np.mean(np.argmax(arr, axis=-1) == labels))


def compute_alpha(p, loss, batch_size, lo=ALPHA_FLOOR, hi=ALPHA_CEIL):
    """Fusing coefficient from accuracy P, loss L, and batch size N.

    Returns (raw, clamped): raw = (P + 1) / ((1 / L) + N), clamped to [lo, hi].
    """
    if loss <= 0:
        raise ValueError(f"loss must be positive, got {loss}")
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    raw = (p + 1.0) / ((1.0 / loss) + batch_size)
    return raw, min(hi, max(lo, raw))


# ---------------------------------------------------------------------------
# Weight fusion
# ---------------------------------------------------------------------------


def fuse_weights(w, w1, w2, alpha, mode="sum") -> NamedWeights:
    """Blend the fuse model's weights with the teachers'.

    sum mode:  W' = alpha * W + (1 - alpha) * (W1 + W2)
    mean mode: W' = alpha * W + (1 - alpha) * (W1 + W2) / 2

    Batch-norm running statistics are not part of the weighted sum above (the
    teacher SUM of two variances is not a variance); they blend as
    alpha * own + (1 - alpha) * teacher elementwise mean, so early iterations
    inherit the teachers' statistics and a standalone model (alpha = 1) keeps
    its own.
    """
    if mode not in ("sum", "mean"):
        raise ValueError(f"fusion mode must be 'sum' or 'mean', got {mode!r}")
    w.check_compatible(w1)
    w.check_compatible(w2)
    out = NamedWeights()
    for name, t in w.items():
        a, b = w1[name].data, w2[name].data
        if is_running_stat(name):
            fused = alpha * t.data + (1.0 - alpha) * 0.5 * (a + b)
        else:
            pair = a + b if mode == "sum" else 0.5 * (a + b)
            fused = alpha * t.data + (1.0 - alpha) * pair
        out[name] = Tensor(fused.astype(t.data.dtype), requires_grad=t.requires_grad)
    return out


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 10.0  # global-norm ceiling; 0 disables clipping
    # per-name learning-rate multipliers (substring match). Attention query/key
    # projections get a small one: adaptive updates are scale-free, so at the
    # base rate the dot-product scores grow from O(0.1) to O(10) within ~100
    # steps and the attention softmax saturates into a brittle near-argmax.
    lr_scales: dict = field(default_factory=lambda: {".attn.q.": 0.1, ".attn.k.": 0.1})
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_grad_norm(weights: NamedWeights, max_norm: float) -> float:
    """Scale all gradients down so their global L2 norm is at most max_norm;
    returns the pre-clip norm."""
    total = 0.0
    for _, p in weights.trainable():
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for _, p in weights.trainable():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def lr_schedule(base_lr, epoch, epochs):
    """Piecewise learning rate: geometric decay to 0.3x over the first third
    of the run, hold, then 0.1x for the final sixth. At a constant base rate
    these small-batch runs bottom out mid-run and then diverge; the hold phase
    is where most of the validation gain accrues."""
    f = epoch / max(1, epochs)
    if f < 1.0 / 3.0:
        return base_lr * 0.3 ** (3.0 * f)
    if f < 5.0 / 6.0:
        return base_lr * 0.3
    return base_lr * 0.1


def optimizer_step(weights: NamedWeights, optim: AdamState) -> NamedWeights:
    """One adaptive-moment update in place; missing gradients count as zero."""
    optim.step += 1
    bc1 = 1.0 - optim.beta1 ** optim.step
    bc2 = 1.0 - optim.beta2 ** optim.step
    for name, p in weights.trainable():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = optim.m.get(name)
        v = optim.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = optim.beta1 * m + (1.0 - optim.beta1) * g
        v = optim.beta2 * v + (1.0 - optim.beta2) * (g * g)
        optim.m[name] = m
        optim.v[name] = v
        lr = optim.lr
        for key, scale in optim.lr_scales.items():
            if key in name:
                lr *= scale
        p.data[...] = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + optim.eps)
    return weights


# ---------------------------------------------------------------------------
# Training state / logging
# ---------------------------------------------------------------------------


@dataclass
class FusionState:
    alpha: float
    alpha_raw: float
    p: float
    loss: float
    batch_size: int
    iteration: int
    epoch: int


def _fmt(x):
    if x is None:
        return ""
    return repr(float(x))


def make_row(epoch, iteration, model, loss, accuracy, alpha_raw, alpha, dice3, seed):
    return {
        "epoch": epoch,
        "iter": iteration,
        "model": model,
        "loss": _fmt(loss),
        "accuracy": _fmt(accuracy),
        "alpha_raw": _fmt(alpha_raw),
        "alpha": _fmt(alpha),
        "dice_csf": _fmt(dice3[0]),
        "dice_gm": _fmt(dice3[1]),
        "dice_wm": _fmt(dice3[2]),
        "seed": seed,
    }


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_HEADER)
        writer.writeheader()
        writer.writerows(rows)


class _DiceAccum:
    """Aggregates per-class overlap counts across training batches."""

    def __init__(self, class_ids=(1, 2, 3)):
        self.class_ids = class_ids
        self.inter = {c: 0 for c in class_ids}
        self.ref = {c: 0 for c in class_ids}
        self.auto = {c: 0 for c in class_ids}

    def update(self, pred, labels):
        for c in self.class_ids:
            rp = labels == c
            ap = pred == c
            self.inter[c] += int(np.count_nonzero(rp & ap))
            self.ref[c] += int(np.count_nonzero(rp))
            self.auto[c] += int(np.count_nonzero(ap))

    def dice(self):
        out = []
        for c in self.class_ids:
            denom = self.ref[c] + self.auto[c]
            out.append(1.0 if denom == 0 else 2.0 * self.inter[c] / denom)
        return out


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _train_step(config, weights, optim, batch, rng):
    """One supervised step; returns (loss, accuracy, predictions)."""
    weights.zero_grads()
    with Tape() as tape:
        logits = nn.forward(config, weights, Tensor(batch.inputs), mode="train", rng=rng)
        loss = cross_entropy(logits, batch.labels)
        T.backward(loss)
    tape.clear()  # release the op records (and the arrays their closures hold)
    acc = voxel_accuracy(logits, batch.labels)
    pred = np.argmax(logits.data, axis=-1)
    if optim.grad_clip:
        clip_grad_norm(weights, optim.grad_clip)
    optimizer_step(weights, optim)
    return loss.item(), acc, pred


def _draw_batch(subjects, modality, patch_size, batch, rng):
    subj = subjects[int(rng.integers(0, len(subjects)))]
    vol = subj.t1 if modality == "t1" else subj.t2
    return D.sample_batch(vol, subj.labels, patch_size, batch, rng, modality)


def train_teacher(
    config,
    weights,
    subjects,
    modality,
    *,
    epochs,
    patches_per_epoch,
    patch_size=32,
    batch=8,
    lr=1e-3,
    rng,
    seed=0,
    optim=None,
):
    """Standard supervised loop on one modality; returns (weights, log rows)."""
    if not subjects:
        raise ValueError("empty dataset")
    if modality not in ("t1", "t2"):
        raise ValueError(f"modality must be 't1' or 't2', got {modality!r}")
    if optim is None:
        optim = AdamState(lr=lr)
    base_lr = optim.lr
    iters = max(1, patches_per_epoch // batch)
    rows = []
    total_iter = 0
    model_name = "tm1" if modality == "t1" else "tm2"
    for epoch in range(epochs):
        optim.lr = lr_schedule(base_lr, epoch, epochs)
        losses, accs = [], []
        dice_acc = _DiceAccum()
        for _ in range(iters):
            b = _draw_batch(subjects, modality, patch_size, batch, rng)
            loss, acc, pred = _train_step(config, weights, optim, b, rng)
            losses.append(loss)
            accs.append(acc)
            dice_acc.update(pred, b.labels)
            total_iter += 1
        rows.append(
            make_row(
                epoch,
                total_iter,
                model_name,
                float(np.mean(losses)),
                float(np.mean(accs)),
                None,
                None,
                dice_acc.dice(),
                seed,
            )
        )
    return weights, rows


def resolve_alpha(alpha_mode, iteration, total_iters, prev_p, prev_loss, batch):
    """Alpha per iteration: dynamic ('eq5'), fixed ('constant', v), or the
    monotone ramp ('schedule'): min(1, 0.01 + t/T)."""
    if isinstance(alpha_mode, tuple) and alpha_mode[0] == "constant":
        v = float(alpha_mode[1])
        return v, v
    if alpha_mode == "schedule":
        v = min(1.0, ALPHA_FLOOR + iteration / max(1, total_iters))
        return v, v
    if alpha_mode == "eq5":
        if prev_loss is None:
            return ALPHA_FLOOR, ALPHA_FLOOR
        return compute_alpha(prev_p, prev_loss, batch)
    raise ValueError(f"unknown alpha mode {alpha_mode!r}")


def refresh_batchnorm_stats(config, weights, subjects, patch_size, batch, rng, passes=10):
    """Settle running statistics after the final fusion by running train-mode
    forwards without gradients (the fused conv weights change activation scale,
    so copied teacher statistics would mis-normalize at eval)."""
    with T.no_grad():
        for i in range(passes):
            modality = "t1" if i % 2 == 0 else "t2"
            b = _draw_batch(subjects, modality, patch_size, batch, rng)
            nn.forward(config, weights, Tensor(b.inputs), mode="train", rng=rng)


def train_fuse(
    config,
    fuse_w,
    tm1_w,
    tm2_w,
    subjects,
    *,
    epochs,
    patches_per_epoch,
    patch_size=32,
    batch=8,
    lr=1e-3,
    alpha_mode="eq5",
    fusion_mode="sum",
    joint=True,
    rng,
    seed=0,
    bn_refresh_passes=10,
    alpha_ramp_iters=None,
    teacher_step_every=1,
):
    """The fuse-model training protocol; returns (fuse weights, states, log rows).

    With ``joint=True`` the teachers advance one optimizer step each before
    every fuse iteration; otherwise they are treated as frozen checkpoints.
    """
    if not subjects:
        raise ValueError("empty dataset")
    fuse_w.check_compatible(tm1_w)
    fuse_w.check_compatible(tm2_w)
    fuse_optim = AdamState(lr=lr)
    tm1_optim = AdamState(lr=lr)
    tm2_optim = AdamState(lr=lr)
    iters = max(1, patches_per_epoch // batch)
    total_iters = epochs * iters
    # horizon of the schedule-mode ramp: after this many iterations alpha
    # saturates at 1 and the fuse model consolidates on its own (defaults to
    # the whole run, i.e. the ramp only saturates at the very end)
    ramp = alpha_ramp_iters if alpha_ramp_iters is not None else total_iters
    prev_p, prev_loss = None, None
    states: list[FusionState] = []
    rows = []
    t = 0
    for epoch in range(epochs):
        for o in (fuse_optim, tm1_optim, tm2_optim):
            o.lr = lr_schedule(lr, epoch, epochs)
        t_losses = {"tm1": [], "tm2": []}
        t_accs = {"tm1": [], "tm2": []}
        for _ in range(iters):
            if joint and t % teacher_step_every == 0:
                # one patch-location stream per iteration: both teachers see
                # the same spatial content in their own modality, which keeps
                # their weight trajectories aligned enough to be fusable
                subj = subjects[int(rng.integers(0, len(subjects)))]
                b1, b2 = D.sample_batch_pair(subj, patch_size, batch, rng)
                l1, a1, _ = _train_step(config, tm1_w, tm1_optim, b1, rng)
                l2, a2, _ = _train_step(config, tm2_w, tm2_optim, b2, rng)
                t_losses["tm1"].append(l1)
                t_accs["tm1"].append(a1)
                t_losses["tm2"].append(l2)
                t_accs["tm2"].append(a2)

            raw, alpha = resolve_alpha(alpha_mode, t, ramp, prev_p, prev_loss, batch)
            fuse_w = fuse_weights(fuse_w, tm1_w, tm2_w, alpha, fusion_mode)

            # the fuse model trains on both modalities at once: each batch is
            # half T1 / half T2 crops taken at identical patch positions
            subj = subjects[int(rng.integers(0, len(subjects)))]
            half = max(1, batch // 2)
            b1, b2 = D.sample_batch_pair(subj, patch_size, half, rng)
            b = D.TrainBatch(
                np.concatenate([b1.inputs, b2.inputs]),
                np.concatenate([b1.labels, b2.labels]),
                "both",
            )
            loss, acc, pred = _train_step(config, fuse_w, fuse_optim, b, rng)

            dice_acc = _DiceAccum()
            dice_acc.update(pred, b.labels)
            states.append(FusionState(alpha, raw, acc, loss, batch, t, epoch))
            rows.append(make_row(epoch, t, "fuse", loss, acc, raw, alpha, dice_acc.dice(), seed))
            prev_p, prev_loss = acc, loss
            t += 1
        if joint and t_losses["tm1"]:
            for name in ("tm1", "tm2"):
                rows.append(
                    make_row(
                        epoch, t, name,
                        float(np.mean(t_losses[name])), float(np.mean(t_accs[name])),
                        None, None, (None, None, None), seed,
                    )
                )
    if bn_refresh_passes:
        refresh_batchnorm_stats(config, fuse_w, subjects, patch_size, batch, rng, bn_refresh_passes)
    return fuse_w, states, rows


# ---------------------------------------------------------------------------
# Evaluation helpers and the alpha ablation harness
# ---------------------------------------------------------------------------


def evaluate_subject(config, weights, subject, patch_size=32, step=32, modalities=("t1", "t2")):
    """Stitched full-volume Dice per class. With several modalities the model
    segments the subject once from all of them: stitched class probabilities
    are averaged across modality passes before the argmax (the modality pair
    disambiguates intensities that coincide across modalities)."""
    probs = None
    for modality in modalities:
        vol = subject.t1 if modality == "t1" else subject.t2
        p = D.stitch_probabilities(config, weights, vol, patch_size=patch_size, step=step)
        probs = p if probs is None else probs + p
    pred = np.argmax(probs, axis=-1).astype(np.uint8)
    return [M.dice(subject.labels, pred, c) for c in (1, 2, 3)]


def ablation_alpha(
    config,
    subjects,
    alphas,
    *,
    epochs,
    patches_per_epoch,
    patch_size=32,
    batch=8,
    lr=1e-3,
    fusion_mode="sum",
    seed=0,
    eval_step=None,
    teacher_patches_per_epoch=None,
):
    """One fuse run per alpha setting (the constants plus the dynamic rule)
    against a shared pair of pretrained teachers, all under a fixed seed;
    returns rows of per-class Dice on the held-out subject, dynamic rule last.

    The teachers are trained once and frozen, so the rows differ only in how
    strongly each fusion pulls the fuse model toward the teachers' weights.
    ``teacher_patches_per_epoch`` (default: same as the fuse stage) lets the
    teachers train on a larger budget, matching the setting where fully
    trained teachers anchor a much younger fuse model."""
    if len(subjects) < 2:
        raise ValueError("ablation needs at least 2 subjects (train + holdout)")
    train_subjects, holdout = subjects[:-1], subjects[-1]
    if eval_step is None:
        eval_step = patch_size
    if teacher_patches_per_epoch is None:
        teacher_patches_per_epoch = patches_per_epoch
    init = nn.build_model(config, np.random.default_rng(seed))
    tm1_w, tm2_w = init.copy(), init.copy()
    for modality, w in (("t1", tm1_w), ("t2", tm2_w)):
        train_teacher(
            config, w, train_subjects, modality,
            epochs=epochs, patches_per_epoch=teacher_patches_per_epoch,
            patch_size=patch_size, batch=batch, lr=lr,
            rng=np.random.default_rng(seed + 1), seed=seed,
        )
    settings = [("constant", a) for a in alphas] + ["eq5"]
    results = []
    for setting in settings:
        rng = np.random.default_rng(seed + 2)
        fuse_w, _, _ = train_fuse(
            config,
            init.copy(),
            tm1_w,
            tm2_w,
            train_subjects,
            epochs=epochs,
            patches_per_epoch=patches_per_epoch,
            patch_size=patch_size,
            batch=batch,
            lr=lr,
            alpha_mode=setting,
            fusion_mode=fusion_mode,
            joint=False,
            rng=rng,
            seed=seed,
        )
        d = evaluate_subject(config, fuse_w, holdout, patch_size=patch_size, step=eval_step)
        label = "eq5" if setting == "eq5" else f"{setting[1]:.1f}"
        results.append(
            {
                "alpha": label,
                "dice_csf": d[0],
                "dice_gm": d[1],
                "dice_wm": d[2],
                "dice_mean": float(np.mean(d)),
            }
        )
    return results


def write_ablation_csv(path, results):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["alpha", "dice_csf", "dice_gm", "dice_wm", "dice_mean"])
        writer.writeheader()
        for row in results:
            writer.writerow(
                {
                    "alpha": row["alpha"],
                    "dice_csf": repr(row["dice_csf"]),
                    "dice_gm": repr(row["dice_gm"]),
                    "dice_wm": repr(row["dice_wm"]),
                    "dice_mean": repr(row["dice_mean"]),
                }
            )
