"""Training loops: supervised classification, siamese pre-training, fine-tuning.

All loops are plain mini-batch SGD with momentum and coupled weight decay,
shuffled by a per-epoch stream derived from (seed, epoch), so two runs with
the same config are bitwise identical.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import seeding
from . import tensor as T
from .augment import AugmentationPolicy, aug1_pair, aug2, aug3_pair
from .dataio import Dataset
from .model import EncoderConfig, ModelState, SimSiamConfig


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0016612
    batch_size: int = 256
    epochs_supervised: int = 300
    epochs_pretrain: int = 600
    epochs_finetune: int = 300
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    finetune_mode: str = "full"  # "full" | "linear_probe"
    dn_scale: float = 10000.0
    collapse_warmup_epochs: int = 300
    collapse_threshold_factor: float = 0.25

    def __post_init__(self):
        if self.finetune_mode not in ("full", "linear_probe"):
            raise ValueError(f"unknown finetune_mode {self.finetune_mode!r}")
        if min(self.lr, self.batch_size, self.dn_scale) <= 0:
            raise ValueError("lr, batch_size and dn_scale must be positive")


@dataclass
class TrainTrace:
    """Per-epoch record of a run; wall-clock stays out of serialized reports."""

    losses: list[float] = field(default_factory=list)
    collapse: list[float] | None = None
    seconds: list[float] = field(default_factory=list)
    collapse_warning: bool = False

    def to_csv(self) -> str:
        lines = ["epoch,loss,collapse_metric"]
        for i, loss in enumerate(self.losses):
            c = "" if self.collapse is None else repr(self.collapse[i])
            lines.append(f"{i},{loss!r},{c}")
        return "\n".join(lines) + "\n"


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _supervised_epochs(
    state: ModelState,
    X: np.ndarray,
    y0: np.ndarray,
    params: dict,
    cfg: TrainConfig,
    epochs: int,
    trace: TrainTrace,
) -> None:
    n = len(X)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = seeding.stream(cfg.seed, "shuffle", epoch).permutation(n)
        total = 0.0
        for idx in _batches(n, cfg.batch_size, order):
            loss = T.cross_entropy(M.classify(state, X[idx]), y0[idx])
            grads = T.gradients(loss, params)
            T.sgd_step(params, state.momentum, grads, cfg.lr, cfg.momentum, cfg.weight_decay)
            total += loss.item() * len(idx)
        trace.losses.append(total / n)
        trace.seconds.append(time.perf_counter() - t0)


def train_supervised(
    train: Dataset,
    cfg: TrainConfig,
    encoder: EncoderConfig | None = None,
    simsiam: SimSiamConfig | None = None,
) -> tuple[ModelState, TrainTrace]:
    """Train encoder + linear head from scratch with cross-entropy."""
    y = train.labels_array()  # raises on unlabeled samples
    encoder = encoder or EncoderConfig(n_bands=train.n_bands, n_steps=train.n_steps)
    state = M.init_model(encoder, simsiam or SimSiamConfig(), n_classes=6, seed=cfg.seed)
    X = train.time_major() / cfg.dn_scale
    params = {**M.encoder_params(state), **M.classifier_params(state)}
    trace = TrainTrace()
    _supervised_epochs(state, X, y - 1, params, cfg, cfg.epochs_supervised, trace)
    return state, trace


def _make_pairs(
    pool: Dataset,
    indices: np.ndarray,
    policy: AugmentationPolicy,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    x1s, x2s = [], []
    for i in indices:
        sample = pool.samples[i]
        if policy.kind == "aug2":
            x1, x2 = sample.reflectance, aug2(sample.reflectance, rng, policy)
        elif policy.kind == "aug1":
            x1, x2 = aug1_pair(pool, sample.label, rng)
        else:
            x1, x2 = aug3_pair(pool, sample.label, rng, policy)
        x1s.append(x1.T)
        x2s.append(x2.T)
    return np.stack(x1s), np.stack(x2s)


def pretrain(
    pool: Dataset,
    policy: AugmentationPolicy,
    cfg: TrainConfig,
    encoder: EncoderConfig | None = None,
    simsiam: SimSiamConfig | None = None,
    objective: str = "simsiam",
) -> tuple[ModelState, TrainTrace]:
    """Siamese pre-training over positive pairs drawn by the given policy.

    Records the collapse metric of each epoch's projections and raises the
    warning flag if, past the warm-up epoch, it falls below
    collapse_threshold_factor / sqrt(head_out).
    """
    if objective not in ("simsiam", "direct_cosine"):
        raise ValueError(f"unknown objective {objective!r}")
    if policy.kind in ("aug1", "aug3") and any(s.label is None for s in pool.samples):
        raise ValueError(f"{policy.kind} needs a fully labeled pool")
    encoder = encoder or EncoderConfig(n_bands=pool.n_bands, n_steps=pool.n_steps)
    simsiam = simsiam or SimSiamConfig()
    state = M.init_model(encoder, simsiam, seed=cfg.seed)
    if objective == "simsiam":
        forward = M.simsiam_forward
        params = {**M.encoder_params(state), **M.head_params(state)}
    else:
        forward = M.direct_cosine_forward
        params = {**M.encoder_params(state), **M.projector_params(state)}
    aug_rng = seeding.stream(cfg.seed, "augment")
    n = len(pool)
    floor = cfg.collapse_threshold_factor / math.sqrt(simsiam.head_out)
    trace = TrainTrace(collapse=[])
    for epoch in range(cfg.epochs_pretrain):
        t0 = time.perf_counter()
        order = seeding.stream(cfg.seed, "shuffle", epoch).permutation(n)
        total = 0.0
        z_parts = []
        for idx in _batches(n, cfg.batch_size, order):
            x1, x2 = _make_pairs(pool, idx, policy, aug_rng)
            loss, z1, _ = forward(state, x1 / cfg.dn_scale, x2 / cfg.dn_scale)
            grads = T.gradients(loss, params)
            T.sgd_step(params, state.momentum, grads, cfg.lr, cfg.momentum, cfg.weight_decay)
            total += loss.item() * len(idx)
            z_parts.append(z1)
        trace.losses.append(total / n)
        metric = M.collapse_metric(np.concatenate(z_parts))
        trace.collapse.append(metric)
        if epoch + 1 > cfg.collapse_warmup_epochs and metric < floor:
            trace.collapse_warning = True
        trace.seconds.append(time.perf_counter() - t0)
    return state, trace


def finetune(
    backbone: ModelState,
    labeled: Dataset,
    cfg: TrainConfig,
) -> tuple[ModelState, TrainTrace]:
    """Attach a fresh linear head to a copy of `backbone` and train it.

    linear_probe updates only the head; full updates encoder and head.  The
    input state is never modified.
    """
    y = labeled.labels_array()
    state = M.clone_state(backbone)
    M.attach_classifier(state, n_classes=6, seed=cfg.seed)
    if cfg.finetune_mode == "linear_probe":
        params = M.classifier_params(state)
    else:
        params = {**M.encoder_params(state), **M.classifier_params(state)}
    X = labeled.time_major() / cfg.dn_scale
    trace = TrainTrace()
    _supervised_epochs(state, X, y - 1, params, cfg, cfg.epochs_finetune, trace)
    return state, trace
