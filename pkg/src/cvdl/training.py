"""Dual-view supervised fine-tuning loop with the combined defense objective.

Each step builds a perturbed view per sample, forwards both views, assembles
the weighted loss, backpropagates by hand, and applies one optimizer update.
The whole trajectory is a pure function of (dataset, config).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from . import losses as L
from .attacks import PoisonedDataset
from .augmentation import ViewPair, perturb_view
from .datagen import IGNORE_LABEL, PAD, Dataset, Sample
from .rng import AUGMENT, GRADCHECK, SHUFFLE, substream

OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    lam1: float = 1.0
    lam2: float = 2.0
    lam3: float = 0.1
    h0: float | None = None  # None -> 0.5 * ln(vocab size)
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    precision: str = "f64"
    defense: bool = True
    feat_dim: int = 32

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in ("f64", "f32"):
            raise ValueError("precision must be f64 or f32")
        if min(self.lam1, self.lam2, self.lam3) < 0:
            raise ValueError("regularizer weights must be >= 0")

    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def resolve_h0(self, vocab_size: int) -> float:
        return 0.5 * math.log(vocab_size) if self.h0 is None else float(self.h0)


@dataclass
class TrainState:
    params: M.ModelParams
    moments: dict[str, tuple[np.ndarray, np.ndarray]] | None
    step: int = 0
    history: list[L.LossBreakdown] = field(default_factory=list)


def init_state(config: TrainConfig, dims: M.ModelDims) -> TrainState:
    params = M.init_params(config.seed, dims, dtype=config.dtype())
    moments = None
    if config.optimizer == "adam":
        moments = {
            k: (np.zeros_like(v), np.zeros_like(v)) for k, v in params.values.items()
        }
    return TrainState(params=params, moments=moments)


def make_view_pairs(batch: list[Sample], config: TrainConfig, global_step: int) -> list[ViewPair]:
    """One perturbed view per sample, each from its own (seed, step, index) stream."""
    return [
        perturb_view(s, substream(config.seed, AUGMENT, global_step, i))
        for i, s in enumerate(batch)
    ]


def collate(originals: list[Sample], dtype):
    """Pad a batch to common supervised length; returns images, tokens, labels."""
    instr = originals[0].instruction
    for s in originals:
        if s.instruction != instr:
            raise ValueError("batch mixes instructions")
    t_sup = max(len(s.target) - 1 for s in originals)
    b = len(originals)
    tokens = np.full((b, len(instr) + t_sup), PAD, dtype=np.int64)
    labels = np.full((b, t_sup), IGNORE_LABEL, dtype=np.int64)
    images = np.stack([s.image for s in originals]).astype(dtype)
    for i, s in enumerate(originals):
        dec_in = s.instruction + s.target[:-1]
        tokens[i, : len(dec_in)] = dec_in
        labels[i, : len(s.labels)] = s.labels
    return images, tokens, labels


def _check_finite(breakdown: L.LossBreakdown) -> None:
    for name, value in breakdown.as_dict().items():
        if name.startswith("l") and not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss term {name} = {value}")


def defense_forward(params: M.ModelParams, pairs: list[ViewPair], config: TrainConfig):
    """Forward both views; returns the masked batch plus backprop caches."""
    dtype = params.dtype
    originals = [p.original for p in pairs]
    images, tokens, labels = collate(originals, dtype)
    images_pert = np.stack([p.perturbed.image for p in pairs]).astype(dtype)
    n_sup = labels.shape[1]
    logits, cache = M.forward_batch(images, tokens, n_sup, params)
    logits_p, cache_p = M.forward_batch(images_pert, tokens, n_sup, params)
    batch = L.MaskedBatch(
        logits=logits,
        logits_pert=logits_p,
        dists=M.softmax(logits),
        dists_pert=M.softmax(logits_p),
        labels=labels,
        feats=cache["enc"]["feat"],
        feats_pert=cache_p["enc"]["feat"],
    )
    return batch, cache, cache_p


def defense_loss_value(params, pairs, config: TrainConfig, h0: float) -> L.LossBreakdown:
    batch, _, _ = defense_forward(params, pairs, config)
    return L.defense_breakdown(batch, config.lam1, config.lam2, config.lam3, h0)


def compute_defense_loss(params: M.ModelParams, pairs: list[ViewPair], config: TrainConfig):
    """Loss breakdown and analytic parameter gradients of the full objective."""
    h0 = config.resolve_h0(params.dims.vocab_size)
    batch, cache, cache_p = defense_forward(params, pairs, config)
    breakdown = L.defense_breakdown(batch, config.lam1, config.lam2, config.lam3, h0)

    dlogits = L.task_loss_grad(batch.logits, batch.labels)
    dp, dq = L.cv_dis_loss_grad(batch.dists, batch.dists_pert, batch.labels)
    dp = config.lam2 * dp + config.lam3 * L.ent_loss_grad(batch.dists, batch.labels, h0)
    dlogits = dlogits + L.probs_grad_to_logits(batch.dists, dp)
    dlogits_p = L.probs_grad_to_logits(batch.dists_pert, config.lam2 * dq)
    dfeat, dfeat_p = L.patch_loss_grad(batch.feats, batch.feats_pert)

    grads = M.backward_batch(cache, params, dlogits, dfeat_extra=config.lam1 * dfeat)
    grads_p = M.backward_batch(cache_p, params, dlogits_p, dfeat_extra=config.lam1 * dfeat_p)
    for k in grads:
        grads[k] += grads_p[k]
    return breakdown, grads


def task_only_loss(params: M.ModelParams, batch: list[Sample], config: TrainConfig):
    """Plain SFT loss and gradients for the original view alone."""
    images, tokens, labels = collate(batch, params.dtype)
    logits, cache = M.forward_batch(images, tokens, labels.shape[1], params)
    l_task = L.task_loss(logits, labels)
    breakdown = L.total_loss(l_task, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, h0=0.0)
    grads = M.backward_batch(cache, params, L.task_loss_grad(logits, labels))
    return breakdown, grads


def apply_update(state: TrainState, grads, config: TrainConfig) -> None:
    if config.optimizer == "sgd":
        for k, v in state.params.values.items():
            v -= config.lr * grads[k]
        return
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    for k, v in state.params.values.items():
        m, s = state.moments[k]
        m *= b1
        m += (1 - b1) * grads[k]
        s *= b2
        s += (1 - b2) * grads[k] * grads[k]
        m_hat = m / (1 - b1**t)
        s_hat = s / (1 - b2**t)
        v -= config.lr * m_hat / (np.sqrt(s_hat) + config.adam_eps)


def train_step(
    batch: list[Sample],
    state: TrainState,
    config: TrainConfig,
    global_step: int | None = None,
) -> TrainState:
    """One optimizer step on a batch; appends the loss breakdown to history."""
    if not batch:
        raise ValueError("empty batch")
    gstep = state.step if global_step is None else global_step
    if config.defense:
        pairs = make_view_pairs(batch, config, gstep)
        breakdown, grads = compute_defense_loss(state.params, pairs, config)
    else:
        breakdown, grads = task_only_loss(state.params, batch, config)
    _check_finite(breakdown)
    apply_update(state, grads, config)
    state.step += 1
    state.history.append(breakdown)
    return state


def train(
    dataset: Dataset | PoisonedDataset,
    config: TrainConfig,
    checkpoint_path=None,
    runlog_path=None,
) -> TrainState:
    """epochs x ceil(n/B) steps with seeded shuffling; optional artifacts."""
    config.validate()
    ds = dataset.dataset if isinstance(dataset, PoisonedDataset) else dataset
    if not ds.samples:
        raise ValueError("empty dataset")
    h, w, c = ds.samples[0].image.shape
    dims = M.ModelDims(
        vocab_size=ds.vocab.size,
        feat_dim=config.feat_dim,
        image_size=h,
        channels=c,
    )
    state = init_state(config, dims)
    n = len(ds.samples)
    bsz = config.batch_size
    log_f = open(runlog_path, "w") if runlog_path else None
    try:
        for epoch in range(config.epochs):
            order = substream(config.seed, SHUFFLE, epoch).permutation(n)
            for start in range(0, n, bsz):
                batch = [ds.samples[i] for i in order[start : start + bsz]]
                t0 = time.perf_counter()
                train_step(batch, state, config)
                if log_f is not None:
                    rec = {"step": state.step, **state.history[-1].as_dict()}
                    rec["wall_time"] = time.perf_counter() - t0
                    log_f.write(json.dumps(rec) + "\n")
    finally:
        if log_f is not None:
            log_f.close()
    if checkpoint_path is not None:
        M.save_params(state.params, checkpoint_path)
    return state


def gradient_check(
    state: TrainState,
    batch: list[Sample],
    config: TrainConfig,
    eps: float = 1e-5,
    n_coords: int = 200,
) -> float:
    """Max relative error, analytic vs central differences, across all groups."""
    if config.precision != "f64":
        raise ValueError("gradient check requires 64-bit precision")
    if config.defense:
        pairs = make_view_pairs(batch, config, 0)
    else:
        pairs = [ViewPair(s, s, None, "none") for s in batch]
    h0 = config.resolve_h0(state.params.dims.vocab_size)

    if config.defense:
        _, grads = compute_defense_loss(state.params, pairs, config)

        def loss_fn(p):
            return defense_loss_value(p, pairs, config, h0).l_def

    else:
        _, grads = task_only_loss(state.params, batch, config)

        def loss_fn(p):
            images, tokens, labels = collate(batch, p.dtype)
            logits, _ = M.forward_batch(images, tokens, labels.shape[1], p)
            return L.task_loss(logits, labels)

    rng = substream(config.seed, GRADCHECK)
    names = sorted(state.params.values)
    per_group = max(2, math.ceil(n_coords / len(names)))
    work = state.params.copy()
    max_rel = 0.0
    for name in names:
        flat = work.values[name].reshape(-1)
        idx = rng.choice(flat.size, size=min(per_group, flat.size), replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            up = loss_fn(work)
            flat[i] = keep - eps
            down = loss_fn(work)
            flat[i] = keep
            fd = (up - down) / (2 * eps)
            an = grads[name].reshape(-1)[i]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel
