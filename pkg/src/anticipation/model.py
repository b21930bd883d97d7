"""Anticipation networks: frame encoder, recurrent cell and three task heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .horst import HorstCell, HorstCell1D, StateQueue
from .mpnnel import MpnnelCell, readout
from .nn import Conv2d, Linear, Module
from .serialization import load_named, save_named
from .tensor import Tensor

TASKS = ("verb", "noun", "action")
OBSERVED_FRAMES = 11
TOTAL_FRAMES = 14
FRAME_SIZE = 16
OBJ_DIM = 20


@dataclass(frozen=True)
class Modality:
    name: str
    channels: int | None
    spatial: bool = True

    def frame_shape(self, size: int = FRAME_SIZE) -> tuple[int, ...]:
        return (self.channels, size, size) if self.spatial else (OBJ_DIM,)


MODALITIES = {
    "rgb": Modality("rgb", 3),
    "flow": Modality("flow", 2),
    "flow_snippets": Modality("flow_snippets", 10),
    "obj": Modality("obj", None, spatial=False),
    "masked_rgb": Modality("masked_rgb", 3),
}

CELL_KINDS = ("horst", "mpnnel", "mpnnel_tb", "mpnnel_ctp")
_EDGE_KIND = {"mpnnel": "implicit", "mpnnel_tb": "template_bank", "mpnnel_ctp": "class_token"}


@dataclass
class ModelConfig:
    modality: str = "rgb"
    cell: str = "horst"
    n_verbs: int = 6
    n_nouns: int = 8
    n_actions: int = 12
    order: int = 4
    filter_size: int = 7
    dim: int = 64
    heads: int = 4
    templates: int = 8
    feature_channels: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.cell not in CELL_KINDS:
            raise ConfigError(f"unknown cell kind {self.cell!r}; expected one of {CELL_KINDS}")
        for name in ("n_verbs", "n_nouns", "n_actions", "dim", "heads", "templates", "feature_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


class Encoder(Module):
    """Two stride-2 convolutions with ReLU: [C,16,16] -> [C_f,4,4]."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_channels, out_channels // 2, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(out_channels // 2, out_channels, 3, rng, stride=2, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.conv2(T.relu(self.conv1(x))))


class Heads(Module):
    def __init__(self, dim: int, sizes: dict[str, int], rng: np.random.Generator):
        self.verb = Linear(dim, sizes["verb"], rng)
        self.noun = Linear(dim, sizes["noun"], rng)
        self.action = Linear(dim, sizes["action"], rng)

    def __call__(self, pooled: Tensor) -> dict[str, Tensor]:
        return {task: getattr(self, task)(pooled) for task in TASKS}


@dataclass
class RolloutOutput:
    steps: list[dict[str, Tensor]]
    token_logits: dict[str, Tensor] | None = None
    hidden: list[Tensor] = field(default_factory=list, repr=False)

    @property
    def final(self) -> dict[str, Tensor]:
        return self.steps[-1]

    def __len__(self) -> int:
        return len(self.steps)


class AnticipationModel(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        modality = MODALITIES[config.modality]
        self.modality = modality
        sizes = {"verb": config.n_verbs, "noun": config.n_nouns, "action": config.n_actions}

        if modality.spatial:
            self.encoder = Encoder(modality.channels, config.feature_channels, rng)
            fmap = FRAME_SIZE // 4
            if config.cell == "horst":
                self.cell = HorstCell(config.feature_channels, rng, config.order, config.filter_size, (fmap, fmap))
                head_dim = config.feature_channels
            else:
                self.cell = MpnnelCell(config.feature_channels, config.dim, fmap * fmap, rng, heads=config.heads,
                                       edge_kind=_EDGE_KIND[config.cell], n_templates=config.templates,
                                       n_verbs=config.n_verbs, n_nouns=config.n_nouns)
                head_dim = config.dim
        else:
            self.encoder = None
            if config.cell == "horst":
                self.cell = HorstCell1D(OBJ_DIM, rng, config.order)
                head_dim = OBJ_DIM
            else:
                self.cell = MpnnelCell(OBJ_DIM, config.dim, OBJ_DIM, rng, heads=config.heads,
                                       edge_kind=_EDGE_KIND[config.cell], n_templates=config.templates,
                                       n_verbs=config.n_verbs, n_nouns=config.n_nouns, object_mode=True)
                head_dim = config.dim
        self.heads = Heads(head_dim, sizes, rng)
        self.encoder_frozen = False

    # -- parameter groups -------------------------------------------------
    def encoder_parameters(self):
        return self.encoder.parameters() if self.encoder is not None else []

    def freeze_encoder(self, frozen: bool = True) -> None:
        self.encoder_frozen = frozen
        if self.encoder is not None:
            self.encoder.set_trainable(not frozen)

    @property
    def is_horst(self) -> bool:
        return self.config.cell == "horst"

    # -- forward ------------------------------------------------------------
    def encode_frame(self, frame) -> Tensor:
        """Encode one frame ([C,H,W] / [B,C,H,W], or an object vector)."""
        frame = frame if isinstance(frame, Tensor) else Tensor(frame)
        want = self.modality.frame_shape()
        if tuple(frame.shape[-len(want):]) != want:
            raise ConfigError(f"{self.modality.name} frame must end in shape {want}, got {frame.shape}")
        if self.encoder is None:
            return frame
        if self.encoder_frozen:
            with T.no_grad():
                return self.encoder(frame)
        return self.encoder(frame)

    def encode_clip(self, clip) -> list[Tensor]:
        """[T,...] or [B,T,...] array (or list of frames) -> list of T features."""
        if isinstance(clip, (list, tuple)):
            return [self.encode_frame(f) for f in clip]
        arr = clip.data if isinstance(clip, Tensor) else np.asarray(clip)
        frame_rank = len(self.modality.frame_shape())
        time_axis = arr.ndim - frame_rank - 1
        if time_axis not in (0, 1):
            raise ConfigError(f"clip shape {arr.shape} does not fit modality {self.modality.name}")
        T_len = arr.shape[time_axis]
        if time_axis == 1 and self.encoder is not None:
            # all frames through the encoder in one call
            B = arr.shape[0]
            flat = arr.reshape((B * T_len,) + arr.shape[2:])
            feats = self.encode_frame(flat)
            feats = feats.reshape((B, T_len) + feats.shape[1:])
            return [feats[:, t] for t in range(T_len)]
        return [self.encode_frame(np.take(arr, t, axis=time_axis)) for t in range(T_len)]

    def rollout_features(self, features: list[Tensor], keep_hidden: bool = False) -> RolloutOutput:
        if not features:
            raise ContractError("rollout needs at least one observed frame")
        steps = []
        hidden = []
        token_logits = None
        if self.is_horst:
            queue: StateQueue = self.cell.new_queue()
            for x in features:
                h, queue = self.cell.step(x, queue)
                pooled = T.global_avg_pool(h) if self.modality.spatial else h
                steps.append(self.heads(pooled))
                if keep_hidden:
                    hidden.append(h)
        else:
            state = None
            for x in features:
                out = self.cell.step(x, state)
                state = out.vertices
                steps.append(readout(state, self.heads))
                token_logits = out.token_logits
                if keep_hidden:
                    hidden.append(state)
        return RolloutOutput(steps, token_logits, hidden)

    def rollout(self, clip, allow_withheld: bool = False, keep_hidden: bool = False) -> RolloutOutput:
        features = self.encode_clip(clip)
        if not features:
            raise ContractError("rollout needs at least one observed frame")
        if len(features) > OBSERVED_FRAMES and not allow_withheld:
            raise ContractError(f"clip has {len(features)} frames; only {OBSERVED_FRAMES} are observable "
                                "outside the warmup phase")
        return self.rollout_features(features, keep_hidden)

    def predict(self, clip) -> dict[str, np.ndarray]:
        """Softmax scores per task from the last observed step."""
        with T.no_grad():
            out = self.rollout(clip)
            return {task: T.softmax(out.final[task], axis=-1).data for task in TASKS}

    __call__ = rollout


def rollout(clip, model: AnticipationModel) -> RolloutOutput:
    return model.rollout(clip)


def predict(clip, model: AnticipationModel) -> dict[str, np.ndarray]:
    return model.predict(clip)


def save_checkpoint(model: AnticipationModel, directory, extra: dict | None = None) -> None:
    meta = {"format": "anticipation-checkpoint-1", "model": asdict(model.config),
            "encoder_frozen": model.encoder_frozen}
    if extra:
        meta.update(extra)
    save_named(directory, model.state_dict(), meta)


def load_checkpoint(directory) -> tuple[AnticipationModel, dict]:
    manifest, tensors = load_named(directory)
    if "model" not in manifest:
        raise ConfigError(f"{directory} is not a model checkpoint")
    model = AnticipationModel(ModelConfig(**manifest["model"]))
    model.load_state_dict(tensors)
    model.freeze_encoder(manifest.get("encoder_frozen", False))
    return model, manifest
