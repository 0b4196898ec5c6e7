"""KIT Motion-Language corpus ingestion, preprocessing, splitting and caching.

Expected corpus layout (one group of files per recording, ids are the
zero-padded numeric prefixes of the release)::

    00001_positions.npy      global joint positions, (T, 21, 3) or (T, 63), mm
    00001_positions.csv      same, as text (one frame per row), alternative to .npy
    00001_annotations.json   JSON list of sentences, as shipped in the release
    00001_meta.json          optional, {"fps": 100.0, ...}
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .skeleton import (
    MotionSequence,
    Skeleton,
    from_global,
    kit_skeleton,
    subsample_positions,
)

log = logging.getLogger(__name__)

PREPROCESS_VERSION = 1
SOURCE_FPS = 100.0
TARGET_FPS = 12.5
_ID_RE = re.compile(r"^(\d+)_(positions\.(?:npy|csv)|annotations\.json|meta\.json)$")


class IngestError(RuntimeError):
    def __init__(self, items: dict[str, str]):
        self.items = dict(items)
        lines = "\n".join(f"  {k}: {v}" for k, v in sorted(self.items.items()))
        super().__init__(f"{len(self.items)} corpus item(s) failed:\n{lines}")


@dataclass
class AnnotationRecord:
    motion_id: str
    sentence: str
    annotation_index: int

    def __post_init__(self):
        self.sentence = normalize_sentence(self.sentence)
        if not self.sentence:
            raise ValueError(f"empty annotation for motion {self.motion_id}")


@dataclass
class CorpusEntry:
    motion_id: str
    positions: np.ndarray  # (T, J, 3) global, mm
    fps: float
    annotations: list[AnnotationRecord]


@dataclass
class Corpus:
    entries: list[CorpusEntry] = field(default_factory=list)
    flagged: dict[str, str] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def annotation_count(self) -> int:
        return sum(len(e.annotations) for e in self.entries)


@dataclass
class Sample:
    motion: MotionSequence
    sentence: str
    motion_id: str
    annotation_index: int


@dataclass
class SplitConfig:
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    by: str = "motion"  # or "annotation"

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must be three values summing to 1, got {self.ratios}")
        if self.by not in ("motion", "annotation"):
            raise ValueError(f"unknown split unit {self.by!r}")


def normalize_sentence(text: str) -> str:
    # The embedding model is cased: no lowercasing, punctuation kept.
    return text.strip()


def _read_positions(path: Path, n_joints: int) -> np.ndarray:
    if path.suffix == ".npy":
        arr = np.load(path, allow_pickle=False)
    else:
        rows = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    rows.append([float(v) for v in line.split(",")])
                except ValueError:
                    if rows:
                        raise
                    continue  # header
        arr = np.asarray(rows, dtype=np.float64)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == n_joints * 3:
        arr = arr.reshape(arr.shape[0], n_joints, 3)
    if arr.ndim != 3 or arr.shape[1:] != (n_joints, 3):
        raise ValueError(f"bad position array shape {arr.shape}")
    if arr.shape[0] == 0 or not np.all(np.isfinite(arr)):
        raise ValueError("empty or non-finite positions")
    return arr


def load_corpus(
    root: str | Path,
    skeleton: Skeleton | None = None,
    permissive: bool = False,
    default_fps: float = SOURCE_FPS,
) -> Corpus:
    skeleton = skeleton or kit_skeleton()
    root = Path(root)
    files: dict[str, dict[str, Path]] = {}
    for p in sorted(root.iterdir()) if root.is_dir() else []:
        m = _ID_RE.match(p.name)
        if m:
            kind = m.group(2).split(".")[0]
            files.setdefault(m.group(1), {})[kind] = p

    corpus = Corpus()
    if not files:
        log.warning("no corpus files found under %s", root)
        return corpus

    for mid in sorted(files):
        group = files[mid]
        try:
            if "positions" not in group:
                raise ValueError("annotation file without motion file")
            fps = default_fps
            if "meta" in group:
                fps = float(json.loads(group["meta"].read_text()).get("fps", default_fps))
            positions = _read_positions(group["positions"], skeleton.joint_count)
            sentences = []
            if "annotations" in group:
                sentences = json.loads(group["annotations"].read_text())
                if not isinstance(sentences, list) or not all(isinstance(s, str) for s in sentences):
                    raise ValueError("annotations must be a JSON list of strings")
            records = [
                AnnotationRecord(mid, s, i) for i, s in enumerate(sentences) if normalize_sentence(s)
            ]
        except Exception as exc:  # noqa: BLE001 - itemized below
            corpus.errors[mid] = f"{type(exc).__name__}: {exc}"
            continue
        if not records:
            corpus.flagged[mid] = "no annotations"
            log.warning("motion %s has no annotations", mid)
        corpus.entries.append(CorpusEntry(mid, positions, fps, records))

    if corpus.errors and not permissive:
        raise IngestError(corpus.errors)
    for mid, why in corpus.errors.items():
        log.warning("skipped motion %s: %s", mid, why)
    return corpus


def preprocess_motion(
    positions: np.ndarray, fps: float, skeleton: Skeleton, target_fps: float = TARGET_FPS
) -> MotionSequence:
    sub = subsample_positions(positions, fps, target_fps)
    return from_global(sub, skeleton, fps=target_fps)


def make_samples(
    corpus: Corpus, skeleton: Skeleton | None = None, target_fps: float = TARGET_FPS
) -> list[Sample]:
    skeleton = skeleton or kit_skeleton()
    samples = []
    for entry in corpus:
        if not entry.annotations:
            continue
        motion = preprocess_motion(entry.positions, entry.fps, skeleton, target_fps)
        if len(motion) < 2:
            log.info("dropping motion %s: %d frame(s) after subsampling", entry.motion_id, len(motion))
            continue
        for rec in entry.annotations:
            samples.append(Sample(motion, rec.sentence, entry.motion_id, rec.annotation_index))
    return samples


def _split_sizes(n: int, ratios) -> tuple[int, int, int]:
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def split(samples: list[Sample], config: SplitConfig) -> tuple[list[Sample], list[Sample], list[Sample]]:
    rng = np.random.default_rng(config.seed)
    if config.by == "motion":
        keys = sorted({s.motion_id for s in samples})
        key_of = lambda s: s.motion_id  # noqa: E731
    else:
        keys = sorted({(s.motion_id, s.annotation_index) for s in samples})
        key_of = lambda s: (s.motion_id, s.annotation_index)  # noqa: E731
    order = rng.permutation(len(keys))
    n_train, n_val, _ = _split_sizes(len(keys), config.ratios)
    bucket = {}
    for rank, i in enumerate(order):
        bucket[keys[i]] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
    out: tuple[list, list, list] = ([], [], [])
    for s in samples:
        out[bucket[key_of(s)]].append(s)
    return out


def split_assignment(splits) -> dict[str, list[str]]:
    names = ("train", "val", "test")
    return {n: sorted({s.motion_id for s in part}) for n, part in zip(names, splits)}


# --- normalization ------------------------------------------------------------------


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, channels: np.ndarray) -> np.ndarray:
        return (channels - self.mean) / self.std

    def invert(self, channels: np.ndarray) -> np.ndarray:
        return channels * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_normalization(train: list[Sample], eps: float = 1e-6) -> NormalizationStats:
    """Per-channel mean/std over every frame of the distinct training motions."""
    if not train:
        raise ValueError("cannot fit normalization on an empty training split")
    seen, chunks = set(), []
    for s in train:
        if s.motion_id in seen:
            continue
        seen.add(s.motion_id)
        chunks.append(s.motion.to_channels())
    data = np.concatenate(chunks, axis=0)
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    small = std < eps
    if small.any():
        log.warning("%d channel(s) with (near) zero variance; std clamped to %g", int(small.sum()), eps)
        std = np.where(small, eps, std)
    return NormalizationStats(mean, std)


# --- cache --------------------------------------------------------------------------


def corpus_checksum(root: str | Path) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(root).iterdir()):
        if _ID_RE.match(p.name):
            h.update(p.name.encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def write_split(path: str | Path, samples: list[Sample]) -> None:
    chans = [s.motion.to_channels() for s in samples]
    offsets = np.cumsum([0] + [c.shape[0] for c in chans])
    np.savez(
        path,
        channels=np.concatenate(chans, axis=0) if chans else np.zeros((0, 66)),
        offsets=offsets,
        fps=np.array([s.motion.fps for s in samples], dtype=np.float64),
        motion_ids=np.array([s.motion_id for s in samples], dtype=str),
        sentences=np.array([s.sentence for s in samples], dtype=str),
        annotation_index=np.array([s.annotation_index for s in samples], dtype=np.int64),
    )


def read_split(path: str | Path, n_joints: int = 21) -> list[Sample]:
    with np.load(path, allow_pickle=False) as z:
        chans, offsets = z["channels"], z["offsets"]
        out = []
        for i in range(len(offsets) - 1):
            motion = MotionSequence.from_channels(chans[offsets[i] : offsets[i + 1]], float(z["fps"][i]), n_joints)
            out.append(Sample(motion, str(z["sentences"][i]), str(z["motion_ids"][i]), int(z["annotation_index"][i])))
    return out


@dataclass
class PreparedData:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    stats: NormalizationStats
    manifest: dict


def build_manifest(root, skeleton: Skeleton, split_cfg: SplitConfig, target_fps: float) -> dict:
    return {
        "preprocess_version": PREPROCESS_VERSION,
        "corpus_checksum": corpus_checksum(root),
        "skeleton": skeleton.name,
        "skeleton_checksum": skeleton.checksum(),
        "target_fps": target_fps,
        "split": {"ratios": list(split_cfg.ratios), "seed": split_cfg.seed, "by": split_cfg.by},
    }


def _manifest_key(m: dict) -> dict:
    keys = ("preprocess_version", "corpus_checksum", "skeleton_checksum", "target_fps", "split")
    return {k: m.get(k) for k in keys}


def cache_is_current(cache_dir: str | Path, manifest: dict) -> bool:
    path = Path(cache_dir) / "manifest.json"
    if not path.exists():
        return False
    old = json.loads(path.read_text())
    if _manifest_key(old) != _manifest_key(manifest):
        return False
    return all((Path(cache_dir) / f"{n}.npz").exists() for n in ("train", "val", "test"))


def preprocess_corpus(
    root: str | Path,
    cache_dir: str | Path,
    split_cfg: SplitConfig | None = None,
    skeleton: Skeleton | None = None,
    permissive: bool = False,
    target_fps: float = TARGET_FPS,
    force: bool = False,
) -> tuple[dict, bool]:
    """Run the full ingest pipeline into cache_dir. Returns (manifest, rewritten)."""
    skeleton = skeleton or kit_skeleton()
    split_cfg = split_cfg or SplitConfig()
    cache_dir = Path(cache_dir)
    manifest = build_manifest(root, skeleton, split_cfg, target_fps)
    if not force and cache_is_current(cache_dir, manifest):
        return json.loads((cache_dir / "manifest.json").read_text()), False

    corpus = load_corpus(root, skeleton, permissive=permissive)
    samples = make_samples(corpus, skeleton, target_fps)
    if not samples:
        raise ValueError(f"no usable samples under {root}")
    parts = split(samples, split_cfg)
    stats = fit_normalization(parts[0])
    cache_dir.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), parts):
        write_split(cache_dir / f"{name}.npz", part)
    manifest.update(
        motions=len(corpus),
        annotations=corpus.annotation_count,
        samples={n: len(p) for n, p in zip(("train", "val", "test"), parts)},
        flagged=corpus.flagged,
        skipped=corpus.errors,
        assignment=split_assignment(parts),
        normalization=stats.to_dict(),
    )
    tmp = cache_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    tmp.replace(cache_dir / "manifest.json")
    return manifest, True


def load_prepared(cache_dir: str | Path) -> PreparedData:
    cache_dir = Path(cache_dir)
    manifest = json.loads((cache_dir / "manifest.json").read_text())
    if manifest.get("preprocess_version") != PREPROCESS_VERSION:
        raise ValueError("cache was written by a different preprocessing version; rerun preprocess")
    parts = [read_split(cache_dir / f"{n}.npz") for n in ("train", "val", "test")]
    return PreparedData(*parts, NormalizationStats.from_dict(manifest["normalization"]), manifest)
