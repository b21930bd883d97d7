"""Synthetic multi-modal anticipation clips.

Every sample has 14 frames sampled at 4 FPS, from 3.5 s to 0.25 s before the
action starts.  The first 11 frames carry a weak, growing cue for the
upcoming verb and noun; the last 3 frames (inside the 1 s anticipation gap)
show the action itself and may only be read while warming up.

Action labels follow a Zipf-like frequency profile so that class weighting
has something to correct.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import FRAME_SIZE, OBJ_DIM, OBSERVED_FRAMES, TOTAL_FRAMES
from .serialization import load_tns, save_tns

SPLITS = ("train", "val", "test")
STORED_MODALITIES = ("rgb", "flow", "obj", "masked_rgb")
MODALITY_SHAPES = {
    "rgb": (3, FRAME_SIZE, FRAME_SIZE),
    "flow": (2, FRAME_SIZE, FRAME_SIZE),
    "flow_snippets": (10, FRAME_SIZE, FRAME_SIZE),
    "obj": (OBJ_DIM,),
    "masked_rgb": (3, FRAME_SIZE, FRAME_SIZE),
}
DEFAULT_SIZES = {"train": 1200, "val": 300, "test": 300}
SNIPPET_LENGTH = 5


@dataclass
class DatasetManifest:
    n_verbs: int
    n_nouns: int
    n_actions: int
    action_table: list[tuple[int, int]]
    counts: dict[str, dict[str, list[int]]]
    seed: int
    sizes: dict[str, int]
    zipf: float
    signal: float = 0.17
    noise: float = 1.0
    shapes: dict[str, list[int]] = field(default_factory=lambda: {k: list(v) for k, v in MODALITY_SHAPES.items()})

    def to_json(self) -> str:
        payload = {
            "V": self.n_verbs, "N": self.n_nouns, "A": self.n_actions,
            "action_table": [list(p) for p in self.action_table],
            "counts": self.counts, "seed": self.seed, "sizes": self.sizes,
            "zipf": self.zipf, "signal": self.signal, "noise": self.noise, "shapes": self.shapes,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        raw = json.loads(text)
        return cls(raw["V"], raw["N"], raw["A"], [tuple(p) for p in raw["action_table"]], raw["counts"],
                   raw["seed"], raw["sizes"], raw["zipf"], raw.get("signal", SIGNAL), raw.get("noise", NOISE),
                   raw["shapes"])


@dataclass
class AnticipationSample:
    id: str
    split: str
    verb: int
    noun: int
    action: int
    frames: dict[str, np.ndarray]
    _reads: "ReadCounter | None" = field(default=None, repr=False, compare=False)

    def read(self, modality: str, n_frames: int) -> np.ndarray:
        if self._reads is not None:
            self._reads.note(n_frames)
        if modality == "flow_snippets":
            return np.stack(stack_flow_snippets(list(self.frames["flow"][:n_frames])))
        return self.frames[modality][:n_frames]


class ReadCounter:
    """Counts frame reads that reach into the withheld anticipation gap."""

    def __init__(self):
        self.withheld_reads = 0
        self.total_reads = 0

    def note(self, n_frames: int, clips: int = 1) -> None:
        self.total_reads += clips
        if n_frames > OBSERVED_FRAMES:
            self.withheld_reads += clips * (n_frames - OBSERVED_FRAMES)

    def reset(self) -> None:
        self.withheld_reads = 0
        self.total_reads = 0


@dataclass
class SplitData:
    ids: list[str]
    verb: np.ndarray
    noun: np.ndarray
    action: np.ndarray
    frames: dict[str, np.ndarray]       # modality -> [n, 14, ...]

    def __len__(self) -> int:
        return len(self.ids)


class AnticipationDataset:
    def __init__(self, manifest: DatasetManifest, splits: dict[str, SplitData]):
        self.manifest = manifest
        self.splits = splits
        self.reads = ReadCounter()

    def split(self, name: str) -> SplitData:
        if name not in self.splits:
            raise ConfigError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return self.splits[name]

    def labels(self, split: str) -> dict[str, np.ndarray]:
        s = self.split(split)
        return {"verb": s.verb, "noun": s.noun, "action": s.action}

    def sample(self, split: str, index: int) -> AnticipationSample:
        s = self.split(split)
        return AnticipationSample(s.ids[index], split, int(s.verb[index]), int(s.noun[index]),
                                  int(s.action[index]), {m: a[index] for m, a in s.frames.items()}, self.reads)

    def clips(self, split: str, indices, modality: str, n_frames: int) -> np.ndarray:
        """Batch of clip prefixes [B, n_frames, ...]; every read goes through the counter."""
        s = self.split(split)
        indices = np.asarray(indices)
        self.reads.note(n_frames, len(indices))
        if modality == "flow_snippets":
            flow = s.frames["flow"][indices, :n_frames]
            return stack_flow_snippets_array(flow)
        if modality not in s.frames:
            raise ConfigError(f"modality {modality!r} not loaded")
        return s.frames[modality][indices, :n_frames]


# ---------------------------------------------------------------------------
# windowing and snippets
# ---------------------------------------------------------------------------

def window(sample: AnticipationSample, phase: str) -> dict[str, np.ndarray]:
    """Frames a phase may see: all 14 while warming up, the first 11 otherwise."""
    n = TOTAL_FRAMES if phase == "warmup" else OBSERVED_FRAMES
    return {m: sample.read(m, n) for m in list(sample.frames) + (["flow_snippets"] if "flow" in sample.frames else [])}


def stack_flow_snippets(frames: list[np.ndarray]) -> list[np.ndarray]:
    """Stack each flow frame with its 4 predecessors (first frame repeated at the start)."""
    if not frames:
        raise DataError("snippet stacking needs at least one frame")
    out = []
    for t in range(len(frames)):
        picks = [frames[max(0, j)] for j in range(t - SNIPPET_LENGTH + 1, t + 1)]
        out.append(np.concatenate(picks, axis=0))
    return out


def stack_flow_snippets_array(flow: np.ndarray) -> np.ndarray:
    """Vectorised stacking over [..., T, 2, H, W]."""
    T_len = flow.shape[-4]
    idx = np.arange(T_len)[:, None] + np.arange(-SNIPPET_LENGTH + 1, 1)[None, :]
    idx = np.clip(idx, 0, None)                               # [T, 5]
    gathered = np.take(flow, idx, axis=-4)                    # [..., T, 5, 2, H, W]
    return gathered.reshape(gathered.shape[:-4] + (SNIPPET_LENGTH * flow.shape[-3],) + flow.shape[-2:])


# ---------------------------------------------------------------------------
# label statistics
# ---------------------------------------------------------------------------

def label_frequencies(manifest: DatasetManifest, split: str) -> dict[str, np.ndarray]:
    if split not in manifest.counts:
        raise ConfigError(f"unknown split {split!r}")
    counts = {task: np.asarray(manifest.counts[split][task], dtype=np.int64) for task in ("verb", "noun", "action")}
    verbs = np.zeros(manifest.n_verbs, dtype=np.int64)
    nouns = np.zeros(manifest.n_nouns, dtype=np.int64)
    for a, (v, n) in enumerate(manifest.action_table):
        verbs[v] += counts["action"][a]
        nouns[n] += counts["action"][a]
    if not (np.array_equal(verbs, counts["verb"]) and np.array_equal(nouns, counts["noun"])):
        raise DataError(f"verb/noun counts of split {split!r} disagree with the action table")
    return counts


def _count_labels(n_classes: int, labels: np.ndarray) -> list[int]:
    return np.bincount(labels, minlength=n_classes).astype(int).tolist()


def allocate_counts(size: int, probs: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``size`` proportional to ``probs``, at least one per class."""
    k = len(probs)
    if size < k:
        raise ConfigError(f"split size {size} is smaller than the number of actions {k}")
    probs = np.asarray(probs, dtype=np.float64) / np.sum(probs)
    spare = size - k
    ideal = spare * probs
    counts = np.floor(ideal).astype(np.int64)
    remainder = spare - counts.sum()
    order = np.lexsort((np.arange(k), -(ideal - counts)))
    counts[order[:remainder]] += 1
    return counts + 1


def zipf_probs(n: int, exponent: float) -> np.ndarray:
    p = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return p / p.sum()


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _smooth_field(rng: np.random.Generator, count: int, channels: int, coarse: int = 4) -> np.ndarray:
    """Blocky random fields: a coarse grid upsampled to the frame size."""
    grid = rng.normal(0.0, 1.0, (count, channels, coarse, coarse))
    rep = FRAME_SIZE // coarse
    return np.repeat(np.repeat(grid, rep, axis=-2), rep, axis=-1)


@dataclass
class _Patterns:
    verb_rgb: np.ndarray
    noun_rgb: np.ndarray
    action_rgb: np.ndarray
    verb_flow: np.ndarray
    noun_flow: np.ndarray
    action_flow: np.ndarray
    noun_objects: np.ndarray


def _make_patterns(rng: np.random.Generator, V: int, N: int, A: int) -> _Patterns:
    return _Patterns(
        verb_rgb=_smooth_field(rng, V, 3),
        noun_rgb=_smooth_field(rng, N, 3),
        action_rgb=_smooth_field(rng, A, 3),
        verb_flow=_smooth_field(rng, V, 2),
        noun_flow=_smooth_field(rng, N, 2),
        action_flow=_smooth_field(rng, A, 2),
        noun_objects=np.stack([rng.choice(OBJ_DIM, 3, replace=False) for _ in range(N)]),
    )


SIGNAL = 0.17
NOISE = 1.0


def _action_table(rng: np.random.Generator, V: int, N: int, A: int) -> list[tuple[int, int]]:
    """A distinct (verb, noun) pairs; every verb and noun is used when A allows it."""
    verbs, nouns = rng.permutation(V), rng.permutation(N)
    chosen = set()
    for i in range(min(A, max(V, N))):
        chosen.add((int(verbs[i % V]), int(nouns[i % N])))
    rest = [p for p in range(V * N) if (p // N, p % N) not in chosen]
    for p in rng.choice(rest, A - len(chosen), replace=False) if A > len(chosen) else []:
        chosen.add((int(p // N), int(p % N)))
    return sorted(chosen)


def _render_split(rng: np.random.Generator, pat: _Patterns, verb, noun, action,
                  signal: float = SIGNAL, noise: float = NOISE) -> dict[str, np.ndarray]:
    n = len(action)
    ramp = np.linspace(0.3, 1.0, OBSERVED_FRAMES)
    amp = np.concatenate([ramp, np.full(TOTAL_FRAMES - OBSERVED_FRAMES, 1.5)])[None, :, None, None, None]
    cue_rgb = (pat.verb_rgb[verb] + pat.noun_rgb[noun])[:, None]
    cue_flow = (pat.verb_flow[verb] + pat.noun_flow[noun])[:, None]
    in_gap = np.zeros((1, TOTAL_FRAMES, 1, 1, 1))
    in_gap[:, OBSERVED_FRAMES:] = 1.0

    rgb = signal * amp * (cue_rgb + in_gap * pat.action_rgb[action][:, None])
    rgb = rgb + noise * rng.normal(0.0, 1.0, rgb.shape)
    rgb = np.clip(rgb, -1.0, 1.0)

    flow = signal * amp * (cue_flow + in_gap * pat.action_flow[action][:, None])
    flow = np.clip(flow + noise * rng.normal(0.0, 1.0, flow.shape), -1.0, 1.0)

    alpha = np.full((n, OBJ_DIM), 0.3)
    alpha[np.arange(n)[:, None], pat.noun_objects[noun]] = 3.0
    obj = np.stack([rng.dirichlet(alpha[i], TOTAL_FRAMES) for i in range(n)])

    # one box per frame keeps roughly the central half of the image
    mask = np.zeros((n, TOTAL_FRAMES, 1, FRAME_SIZE, FRAME_SIZE))
    top = rng.integers(0, FRAME_SIZE // 2, (n, TOTAL_FRAMES))
    left = rng.integers(0, FRAME_SIZE // 2, (n, TOTAL_FRAMES))
    rows = np.arange(FRAME_SIZE)
    inside_r = (rows[None, None, :] >= top[..., None]) & (rows[None, None, :] < top[..., None] + FRAME_SIZE // 2 + 2)
    inside_c = (rows[None, None, :] >= left[..., None]) & (rows[None, None, :] < left[..., None] + FRAME_SIZE // 2 + 2)
    mask[:, :, 0] = inside_r[..., :, None] & inside_c[..., None, :]
    masked = rgb * mask

    return {
        "rgb": rgb.astype(np.float32),
        "flow": flow.astype(np.float32),
        "obj": obj.astype(np.float32),
        "masked_rgb": masked.astype(np.float32),
    }


def generate(seed: int = 42, sizes: dict[str, int] | None = None, n_verbs: int = 6, n_nouns: int = 8,
             n_actions: int = 12, zipf: float = 1.0, out_dir=None,
             action_probs=None, signal: float = SIGNAL, noise: float = NOISE) -> AnticipationDataset:
    """Build the dataset in memory and, when ``out_dir`` is given, write it there.

    ``action_probs`` overrides the Zipf profile (one entry per action).
    """
    sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
    if n_actions > n_verbs * n_nouns:
        raise ConfigError(f"A={n_actions} exceeds V*N={n_verbs * n_nouns}")
    if min(n_verbs, n_nouns, n_actions) < 1:
        raise ConfigError("V, N and A must be positive")
    for split, size in sizes.items():
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        if size < n_actions:
            raise ConfigError(f"split {split!r} has {size} samples, fewer than A={n_actions}")

    rng = np.random.default_rng(seed)
    table = _action_table(rng, n_verbs, n_nouns, n_actions)
    # rank actions in a shuffled order so frequency is unrelated to table position
    probs = zipf_probs(n_actions, zipf)[rng.permutation(n_actions)] if action_probs is None \
        else np.asarray(action_probs, dtype=np.float64)
    if len(probs) != n_actions or np.any(probs < 0) or probs.sum() <= 0:
        raise ConfigError("action_probs must hold one non-negative weight per action")
    patterns = _make_patterns(rng, n_verbs, n_nouns, n_actions)
    verb_of = np.array([v for v, _ in table])
    noun_of = np.array([n for _, n in table])

    splits = {}
    counts = {}
    for split in SPLITS:
        if split not in sizes:
            continue
        split_rng = np.random.default_rng([seed, SPLITS.index(split)])
        action = np.repeat(np.arange(n_actions), allocate_counts(sizes[split], probs))
        action = split_rng.permutation(action)
        verb, noun = verb_of[action], noun_of[action]
        frames = _render_split(split_rng, patterns, verb, noun, action, signal, noise)
        ids = [f"{split}_{i:05d}" for i in range(len(action))]
        splits[split] = SplitData(ids, verb, noun, action, frames)
        counts[split] = {"verb": _count_labels(n_verbs, verb), "noun": _count_labels(n_nouns, noun),
                         "action": _count_labels(n_actions, action)}

    manifest = DatasetManifest(n_verbs, n_nouns, n_actions, table, counts, seed, sizes, zipf, signal, noise)
    dataset = AnticipationDataset(manifest, splits)
    if out_dir is not None:
        write_dataset(dataset, out_dir)
    return dataset


# ---------------------------------------------------------------------------
# disk layout: manifest.json + <split>/<id>.<modality>.tns
# ---------------------------------------------------------------------------

def write_dataset(dataset: AnticipationDataset, out_dir) -> None:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for split, data in dataset.splits.items():
        folder = root / split
        folder.mkdir(exist_ok=True)
        labels = np.stack([data.verb, data.noun, data.action], axis=1).tolist()
        (folder / "labels.json").write_text(json.dumps({"ids": data.ids, "labels": labels}))
        for i, sid in enumerate(data.ids):
            for modality in STORED_MODALITIES:
                save_tns(folder / f"{sid}.{modality}.tns", data.frames[modality][i])
    (root / "manifest.json").write_text(dataset.manifest.to_json())


def load_dataset(path, modalities=None, splits=None) -> AnticipationDataset:
    """Read a dataset written by :func:`write_dataset`.

    Only the requested stored modalities are loaded; ``flow_snippets`` is
    derived from ``flow`` on access.
    """
    root = Path(path)
    if not (root / "manifest.json").exists():
        raise DataError(f"no dataset manifest at {root}")
    manifest = DatasetManifest.from_json((root / "manifest.json").read_text())
    wanted = set(STORED_MODALITIES if modalities is None else modalities)
    if "flow_snippets" in wanted:
        wanted.discard("flow_snippets")
        wanted.add("flow")
    unknown = wanted - set(STORED_MODALITIES)
    if unknown:
        raise ConfigError(f"unknown modalities {sorted(unknown)}")
    out = {}
    for split in (splits or manifest.sizes):
        meta = json.loads((root / split / "labels.json").read_text())
        labels = np.asarray(meta["labels"], dtype=np.int64).reshape(-1, 3)
        frames = {}
        for modality in sorted(wanted):
            arrays = [load_tns(root / split / f"{sid}.{modality}.tns") for sid in meta["ids"]]
            frames[modality] = np.stack(arrays) if arrays else np.zeros((0, TOTAL_FRAMES) + MODALITY_SHAPES[modality],
                                                                         dtype=np.float32)
        out[split] = SplitData(meta["ids"], labels[:, 0], labels[:, 1], labels[:, 2], frames)
    for split, data in out.items():
        for a, v, n in zip(data.action, data.verb, data.noun):
            if tuple(manifest.action_table[a]) != (v, n):
                raise DataError(f"split {split}: action {a} does not map to verb {v}, noun {n}")
    return AnticipationDataset(manifest, out)

