"""Adam training loop with weak, semi, and full supervision modes.

Three strategies over the same objective: ``joint`` mixes all videos in
every batch, ``fully_annotated_only`` restricts training to the flagged
subset, and ``pretrain_finetune`` spends half the budget on all videos
without the localization loss and the rest fine-tuning on the flagged
subset with the full objective.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import network
from .data import VideoSample, crop_clip
from .errors import NumericalError, ValidationError
from .network import NetworkParams, zeros_like_params
from .objectives import TRAIN_LOCALIZATION, LossBreakdown, LossConfig, total_loss

SUPERVISION_MODES = ("weak", "semi", "full")
STRATEGIES = ("joint", "fully_annotated_only", "pretrain_finetune")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 10
    max_clip_len: int = 320
    iterations: int = 2000
    seed: int = 0
    hidden_dim: int = 2048
    dropout: float = 0.7
    loss: LossConfig = field(default_factory=LossConfig)
    gating: str = "sigmoid"
    supervision: str = "weak"
    semi_k: int = 0  # flagged videos per class when supervision == "semi"
    strategy: str = "joint"
    train_localization: str = "predicted"

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValidationError("beta1/beta2 must lie in (0, 1)")
        if not self.adam_eps > 0:
            raise ValidationError("adam_eps must be > 0")
        if self.batch_size < 1 or self.max_clip_len < 1 or self.iterations < 0:
            raise ValidationError("batch_size/max_clip_len must be >= 1 and iterations >= 0")
        if self.hidden_dim < 1:
            raise ValidationError("hidden_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.gating not in network.GATING_KINDS:
            raise ValidationError(f"gating must be one of {network.GATING_KINDS}, got {self.gating!r}")
        if self.supervision not in SUPERVISION_MODES:
            raise ValidationError(f"supervision must be one of {SUPERVISION_MODES}, got {self.supervision!r}")
        if self.semi_k < 0:
            raise ValidationError(f"semi_k must be >= 0, got {self.semi_k}")
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.train_localization not in TRAIN_LOCALIZATION:
            raise ValidationError(
                f"train_localization must be one of {TRAIN_LOCALIZATION}, got {self.train_localization!r}"
            )
        self.loss.validate()


@dataclass
class TrainState:
    params: NetworkParams
    m: NetworkParams
    v: NetworkParams
    step: int
    rng: np.random.Generator


def init_state(config: TrainConfig, feature_dim: int, num_classes: int) -> TrainState:
    rng = np.random.default_rng(config.seed)
    params = network.init_params(rng, feature_dim, config.hidden_dim, num_classes)
    return TrainState(params=params, m=zeros_like_params(params), v=zeros_like_params(params), step=0, rng=rng)


def select_semi_subset(samples: list[VideoSample], k: int) -> list[VideoSample]:
    """Recompute fully_annotated flags: first k annotated videos per class.

    Order is manifest order.  A class with fewer than k annotated
    candidates keeps all of them and triggers a warning.
    """
    if k < 0:
        raise ValidationError(f"semi-supervision k must be >= 0, got {k}")
    flagged: set[str] = set()
    if k > 0:
        classes = sorted({c for s in samples for c in s.labels})
        for c in classes:
            candidates = [s.id for s in samples if c in s.labels and s.segments is not None]
            if len(candidates) < k:
                warnings.warn(
                    f"class {c}: only {len(candidates)} annotated videos available, need {k}; flagging all"
                )
            flagged.update(candidates[:k])
    return [replace(s, fully_annotated=s.id in flagged) for s in samples]


def apply_supervision(samples: list[VideoSample], config: TrainConfig) -> list[VideoSample]:
    if config.supervision == "weak":
        return select_semi_subset(samples, 0)
    if config.supervision == "semi":
        return select_semi_subset(samples, config.semi_k)
    return [replace(s, fully_annotated=s.segments is not None) for s in samples]


def _adam_update(state: TrainState, grads: NetworkParams, config: TrainConfig) -> None:
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    scale_m = 1.0 - b1**t
    scale_v = 1.0 - b2**t
    for name, g in grads.as_dict().items():
        m = getattr(state.m, name)
        v = getattr(state.v, name)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / scale_m
        v_hat = v / scale_v
        getattr(state.params, name)[...] -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)


def train_step(state: TrainState, batch: list[VideoSample], config: TrainConfig) -> LossBreakdown:
    """One gradient step on an already-sampled batch; mutates state."""
    clips = [crop_clip(s, config.max_clip_len, state.rng) for s in batch]
    masks = None
    if config.dropout > 0:
        masks = [
            (state.rng.uniform(size=(c.num_snippets, config.hidden_dim)) >= config.dropout).astype(np.float64)
            for c in clips
        ]
    breakdown, grads = total_loss(
        state.params,
        clips,
        config.loss,
        gating=config.gating,
        train_localization=config.train_localization,
        dropout_masks=masks,
        drop_rate=config.dropout,
    )
    if not np.isfinite(breakdown.total):
        ids = [c.id for c in clips]
        raise NumericalError(f"non-finite loss {breakdown.total!r} at step {state.step + 1}; batch ids {ids}")
    _adam_update(state, grads, config)
    return breakdown


def _sample_batch(pool: list[VideoSample], size: int, rng: np.random.Generator) -> list[VideoSample]:
    idx = rng.integers(0, len(pool), size=size)
    return [pool[int(i)] for i in idx]


def run_training(
    samples: list[VideoSample],
    num_classes: int,
    config: TrainConfig,
) -> tuple[TrainState, list[dict]]:
    """Full training run; returns the final state and per-step loss records."""
    config.validate()
    if not samples:
        raise ValidationError("run_training: empty dataset")
    for s in samples:
        s.validate(num_classes)
    samples = apply_supervision(samples, config)
    feature_dim = samples[0].feature_dim
    state = init_state(config, feature_dim, num_classes)
    metrics: list[dict] = []

    def run_phase(pool: list[VideoSample], iterations: int, loss_config: LossConfig, phase: str) -> None:
        if not pool:
            raise ValidationError(f"{config.strategy}: no videos available for the {phase} phase")
        phase_config = replace(config, loss=loss_config)
        for _ in range(iterations):
            batch = _sample_batch(pool, config.batch_size, state.rng)
            breakdown = train_step(state, batch, phase_config)
            record = {"step": state.step, **breakdown.as_dict()}
            if phase:
                record["phase"] = phase
            metrics.append(record)

    flagged = [s for s in samples if s.fully_annotated]
    if config.strategy in ("fully_annotated_only", "pretrain_finetune") and not flagged:
        raise ValidationError(f"{config.strategy}: no fully annotated videos under supervision {config.supervision!r}")
    if config.strategy == "joint":
        run_phase(samples, config.iterations, config.loss, "")
    elif config.strategy == "fully_annotated_only":
        run_phase(flagged, config.iterations, config.loss, "")
    else:  # pretrain_finetune
        half = config.iterations // 2
        run_phase(samples, half, replace(config.loss, loc_weight=0.0), "pretrain")
        run_phase(flagged, config.iterations - half, config.loss, "finetune")
    return state, metrics
