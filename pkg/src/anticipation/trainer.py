"""Four-phase training: warmup, ordinary, finetune, finetune with validation.

Only the warmup phase updates the encoder and sees the three frames inside
the anticipation gap.  The two finetune phases lower the learning rate and
weight the cross-entropy terms by inverse label frequency.  Every phase
resumes from the parameters the previous one ended with and runs its own
FlatCosine schedule.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .datagen import AnticipationDataset, label_frequencies
from .errors import ConfigError, ContractError, DataError, NumericError
from .evalkit import ScoreSet, mt5r
from .model import OBSERVED_FRAMES, TASKS, TOTAL_FRAMES, AnticipationModel
from .tensor import Parameter, Tensor

logger = logging.getLogger(__name__)

PHASES = ("warmup", "ordinary", "finetune", "finetune_joint_val")
FLAT_FRACTION = 0.75
METRICS_HEADER = "phase,epoch,lr,loss,val_mt5r_verb,val_mt5r_noun,val_mt5r_action"


@dataclass(frozen=True)
class PhaseSpec:
    name: str
    epochs: int
    lr_start: float
    lr_end: float
    backbone_trainable: bool
    action_frames_visible: bool
    class_weights_active: bool
    include_validation_in_train: bool

    @property
    def n_frames(self) -> int:
        return TOTAL_FRAMES if self.action_frames_visible else OBSERVED_FRAMES


def default_pipeline() -> list[PhaseSpec]:
    return [
        PhaseSpec("warmup", 50, 1e-4, 1e-6, True, True, False, False),
        PhaseSpec("ordinary", 50, 1e-4, 1e-6, False, False, False, False),
        PhaseSpec("finetune", 20, 1e-5, 1e-7, False, False, True, False),
        PhaseSpec("finetune_joint_val", 20, 1e-5, 1e-7, False, False, True, True),
    ]


def scaled_pipeline(epochs: dict[str, int] | None = None, lr_scale: float = 1.0,
                    phases: list[PhaseSpec] | None = None) -> list[PhaseSpec]:
    """Default phases with overridden epoch counts and all rates multiplied by ``lr_scale``."""
    epochs = epochs or {}
    out = []
    for spec in phases or default_pipeline():
        out.append(replace(spec, epochs=int(epochs.get(spec.name, spec.epochs)),
                           lr_start=spec.lr_start * lr_scale, lr_end=spec.lr_end * lr_scale))
    return out


def select_phases(pipeline: list[PhaseSpec], names: list[str] | None) -> list[PhaseSpec]:
    """Contiguous run of phases; must follow pipeline order."""
    if not names:
        return list(pipeline)
    order = [p.name for p in pipeline]
    for n in names:
        if n not in order:
            raise ConfigError(f"unknown phase {n!r}; expected one of {order}")
    idx = [order.index(n) for n in names]
    if idx != list(range(idx[0], idx[0] + len(idx))):
        raise ConfigError(f"phases {names} are not a contiguous run of {order}")
    return [pipeline[i] for i in idx]


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

def flatcosine_lr(epoch: float, spec: PhaseSpec) -> float:
    """Hold ``lr_start`` for 75% of the phase, then cosine-anneal to ``lr_end``.

    Defined on ``[0, E]``; the right end is the annealing limit.
    """
    E = spec.epochs
    if not 0 <= epoch <= E:
        raise ContractError(f"epoch {epoch} outside [0, {E}]")
    switch = FLAT_FRACTION * E
    if epoch < switch:
        return spec.lr_start
    progress = (epoch - switch) / (E - switch)
    return spec.lr_end + (spec.lr_start - spec.lr_end) * (1 + math.cos(math.pi * progress)) / 2


def flat_epochs(spec: PhaseSpec) -> int:
    return min(spec.epochs, math.ceil(FLAT_FRACTION * spec.epochs))


def epoch_lr(epoch: int, spec: PhaseSpec) -> float:
    """Rate used for the whole of integer epoch ``epoch`` (0-based).

    The first ``ceil(0.75 E)`` epochs run at ``lr_start``; the remaining
    epochs follow the cosine so that the last epoch runs exactly at ``lr_end``.
    """
    E = spec.epochs
    if not 0 <= epoch < E:
        raise ContractError(f"epoch {epoch} outside [0, {E})")
    flat = flat_epochs(spec)
    if epoch < flat:
        return spec.lr_start
    progress = (epoch - flat + 1) / (E - flat)
    return spec.lr_end + (spec.lr_start - spec.lr_end) * (1 + math.cos(math.pi * progress)) / 2


# ---------------------------------------------------------------------------
# class weighting and loss
# ---------------------------------------------------------------------------

@dataclass
class ClassWeights:
    verb: np.ndarray
    noun: np.ndarray
    action: np.ndarray
    gamma: float

    def __getitem__(self, task: str) -> np.ndarray:
        return getattr(self, task)


def class_weights_from_freq(freqs, gamma: float) -> np.ndarray:
    """(1/count)^gamma rescaled to mean 1; classes with no samples keep weight 1."""
    if not 0 <= gamma <= 1:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    freqs = np.asarray(freqs, dtype=np.float64)
    if np.any(freqs < 0):
        raise DataError("label counts must be non-negative")
    weights = np.ones_like(freqs)
    seen = freqs > 0
    if not seen.all():
        warnings.warn(f"classes {np.flatnonzero(~seen).tolist()} have no training samples; weight left at 1",
                      stacklevel=2)
    if seen.any():
        raw = (1.0 / freqs[seen]) ** gamma
        weights[seen] = raw / raw.mean()
    return weights


def class_weights_for(dataset: AnticipationDataset, gamma: float, split: str = "train") -> ClassWeights:
    counts = label_frequencies(dataset.manifest, split)
    return ClassWeights(*(class_weights_from_freq(counts[t], gamma) for t in TASKS), gamma=gamma)


def weighted_cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Batch mean of w[y] * -log softmax(logits)[y]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    B, C = logits.shape
    if labels.shape != (B,):
        raise DataError(f"{labels.shape[0] if labels.ndim else 0} labels for a batch of {B}")
    if B and (labels.min() < 0 or labels.max() >= C):
        raise DataError(f"labels outside [0, {C})")
    logp = T.log_softmax(logits, axis=-1)
    onehot = np.zeros((B, C), dtype=logits.dtype)
    onehot[np.arange(B), labels] = 1.0
    if weights is not None:
        onehot *= np.asarray(weights, dtype=logits.dtype)[labels][:, None]
    return -(logp * onehot).sum() * (1.0 / B)


def step_loss(model: AnticipationModel, out, labels: dict[str, np.ndarray],
              weights: ClassWeights | None = None) -> Tensor:
    loss = None
    for task in TASKS:
        term = weighted_cross_entropy(out.final[task], labels[task], None if weights is None else weights[task])
        loss = term if loss is None else loss + term
    if out.token_logits is not None:
        for task in ("verb", "noun"):
            loss = loss + weighted_cross_entropy(out.token_logits[task], labels[task],
                                                 None if weights is None else weights[task])
    return loss


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class MomentumSGD:
    """Heavy-ball momentum with weight decay applied directly to the parameters."""

    def __init__(self, params: list[Parameter], momentum: float = 0.9, weight_decay: float = 1e-3):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {id(p): np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for p in self.params:
            if not p.requires_grad:
                continue
            if self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data
            if p.grad is None:
                continue
            v = self._velocity[id(p)]
            v *= self.momentum
            v += p.grad
            p.data -= lr * v


@dataclass
class OptimConfig:
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 16
    gamma: float = 0.5
    seed: int = 0
    grad_clip: float = 5.0


def _clip_gradients(params: list[Parameter], max_norm: float) -> None:
    if max_norm <= 0:
        return
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if not math.isfinite(total):
        raise NumericError("non-finite gradient norm")
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale


# ---------------------------------------------------------------------------
# phase runner
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    phase: str
    epoch: int
    lr: float
    loss: float
    val_mt5r: dict[str, float]

    def line(self) -> str:
        vals = ",".join(repr(self.val_mt5r[t]) for t in TASKS)
        return f"{self.phase},{self.epoch},{self.lr!r},{self.loss!r},{vals}"


@dataclass
class PhaseResult:
    spec: PhaseSpec
    metrics: list[EpochMetrics] = field(default_factory=list)

    def lines(self) -> list[str]:
        return [m.line() for m in self.metrics]


def check_compatible(model: AnticipationModel, dataset: AnticipationDataset, modality: str | None = None) -> None:
    m = dataset.manifest
    cfg = model.config
    if (cfg.n_verbs, cfg.n_nouns, cfg.n_actions) != (m.n_verbs, m.n_nouns, m.n_actions):
        raise ConfigError(f"model heads {(cfg.n_verbs, cfg.n_nouns, cfg.n_actions)} do not match dataset "
                          f"{(m.n_verbs, m.n_nouns, m.n_actions)}")
    if modality is not None and modality != cfg.modality:
        raise ConfigError(f"model was built for {cfg.modality!r}, not {modality!r}")


def _features(model: AnticipationModel, clips: np.ndarray) -> list[Tensor]:
    return model.encode_clip(clips)


def encode_split(model: AnticipationModel, dataset: AnticipationDataset, split: str,
                 chunk: int = 64) -> np.ndarray:
    """Frozen-encoder features of the observed frames, [n, 11, ...]."""
    n = len(dataset.split(split))
    parts = []
    with T.no_grad():
        for start in range(0, n, chunk):
            idx = np.arange(start, min(n, start + chunk))
            clips = dataset.clips(split, idx, model.config.modality, OBSERVED_FRAMES)
            feats = model.encode_clip(clips)
            parts.append(np.stack([f.data for f in feats], axis=1))
    return np.concatenate(parts, axis=0)


def predict_split(model: AnticipationModel, dataset: AnticipationDataset, split: str, model_id: str,
                  batch_size: int = 64, features: np.ndarray | None = None) -> ScoreSet:
    """Scores from the last observed frame for every sample of ``split``."""
    data = dataset.split(split)
    n = len(data)
    scores = {t: [] for t in TASKS}
    with T.no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(n, start + batch_size))
            if features is not None:
                feats = [Tensor(features[idx, t]) for t in range(features.shape[1])]
            else:
                feats = model.encode_clip(dataset.clips(split, idx, model.config.modality, OBSERVED_FRAMES))
            out = model.rollout_features(feats)
            for t in TASKS:
                scores[t].append(T.softmax(out.final[t], axis=-1).data)
    return ScoreSet(model_id, model.config.modality, list(data.ids),
                    {t: np.concatenate(v, axis=0) for t, v in scores.items()})


def evaluate(model, dataset, split, features=None, k: int = 5) -> dict[str, float]:
    ss = predict_split(model, dataset, split, "eval", features=features)
    labels = dataset.labels(split)
    return {t: mt5r(ss.scores[t], labels[t], k) for t in TASKS}


def _training_pool(dataset: AnticipationDataset, spec: PhaseSpec) -> list[tuple[str, np.ndarray]]:
    pool = [("train", np.arange(len(dataset.split("train"))))]
    if spec.include_validation_in_train:
        pool.append(("val", np.arange(len(dataset.split("val")))))
    return pool


def run_phase(model: AnticipationModel, dataset: AnticipationDataset, spec: PhaseSpec,
              optim: OptimConfig | None = None, log=None) -> PhaseResult:
    """Train ``model`` in place for one phase; returns per-epoch metrics.

    ``log`` is an optional callable receiving each metrics line as it is produced.
    """
    optim = optim or OptimConfig()
    check_compatible(model, dataset)
    if spec.epochs < 1:
        raise ConfigError(f"phase {spec.name} needs at least one epoch")
    model.freeze_encoder(not spec.backbone_trainable)
    optimizer = MomentumSGD(model.trainable_parameters(), optim.momentum, optim.weight_decay)
    weights = class_weights_for(dataset, optim.gamma) if spec.class_weights_active else None
    n_frames = spec.n_frames
    modality = model.config.modality

    cache = None
    if model.encoder_frozen and model.encoder is not None:
        cache = {split: encode_split(model, dataset, split) for split, _ in _training_pool(dataset, spec)}
    val_cache = None
    if model.encoder_frozen and model.encoder is not None:
        val_cache = cache["val"] if cache and "val" in cache else encode_split(model, dataset, "val")

    pool = _training_pool(dataset, spec)
    entries = [(split, i) for split, idx in pool for i in idx]
    result = PhaseResult(spec)
    phase_index = PHASES.index(spec.name) if spec.name in PHASES else len(PHASES)
    for epoch in range(spec.epochs):
        lr = epoch_lr(epoch, spec)
        rng = np.random.default_rng([optim.seed, phase_index, epoch])
        order = rng.permutation(len(entries))
        total, batches = 0.0, 0
        for start in range(0, len(order), optim.batch_size):
            chosen = [entries[j] for j in order[start:start + optim.batch_size]]
            by_split: dict[str, list[int]] = {}
            for split, i in chosen:
                by_split.setdefault(split, []).append(i)
            feats_parts, labels = [], {t: [] for t in TASKS}
            for split, idx in by_split.items():
                idx = np.asarray(idx)
                if cache is not None:
                    feats_parts.append(cache[split][idx])
                else:
                    feats_parts.append(dataset.clips(split, idx, modality, n_frames))
                lab = dataset.labels(split)
                for t in TASKS:
                    labels[t].append(lab[t][idx])
            batch = np.concatenate(feats_parts, axis=0)
            labels = {t: np.concatenate(v) for t, v in labels.items()}
            if batch.shape[1] > OBSERVED_FRAMES and not spec.action_frames_visible:
                raise ContractError(f"{spec.name} batch holds {batch.shape[1]} frames")

            if cache is not None:
                out = model.rollout_features([Tensor(batch[:, t]) for t in range(batch.shape[1])])
            else:
                out = model.rollout(batch, allow_withheld=spec.action_frames_visible)
            loss = step_loss(model, out, labels, weights)
            if not loss.is_finite():
                raise NumericError(f"{spec.name} epoch {epoch}: loss became {loss.item()!r}")
            optimizer.zero_grad()
            loss.backward()
            _clip_gradients(optimizer.params, optim.grad_clip)
            optimizer.step(lr)
            total += loss.item()
            batches += 1

        val = evaluate(model, dataset, "val", features=val_cache)
        m = EpochMetrics(spec.name, epoch, lr, total / max(batches, 1), val)
        result.metrics.append(m)
        logger.info(m.line())
        if log is not None:
            log(m.line())
    return result


def run_pipeline(model: AnticipationModel, dataset: AnticipationDataset, phases: list[PhaseSpec],
                 optim: OptimConfig | None = None, log=None, after_phase=None) -> list[PhaseResult]:
    results = []
    for spec in phases:
        results.append(run_phase(model, dataset, spec, optim, log))
        if after_phase is not None:
            after_phase(spec, model)
    return results
