"""Feature-file ingestion, mini-batching, and a synthetic paired-data
generator with known classes for desk-scale verification.

Labels ride along for evaluation only; the training entry point accepts a
label-stripped view so no training code path can reach them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

FEATURE_MAGIC = b"AVFEAT01"


class DataError(Exception):
    pass


class TrainView(NamedTuple):
    """What the trainer is allowed to see: paired features, nothing else."""
    audio: np.ndarray
    visual: np.ndarray


@dataclass
class FeatureSet:
    audio: np.ndarray            # n x d_a, float64 in memory
    visual: np.ndarray           # n x d_v
    labels: np.ndarray | None    # n int class ids, evaluation only
    split: str = "train"

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float64)
        self.visual = np.asarray(self.visual, dtype=np.float64)
        if self.audio.shape[0] != self.visual.shape[0]:
            raise DataError(f"sample counts differ: {self.audio.shape[0]} vs {self.visual.shape[0]}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.audio.shape[0],):
                raise DataError(f"label count {self.labels.shape} vs n={self.audio.shape[0]}")

    @property
    def n(self):
        return self.audio.shape[0]

    def unlabeled(self):
        return TrainView(audio=self.audio, visual=self.visual)


# ---------------------------------------------------------------------------
# binary container + CSV
# ---------------------------------------------------------------------------

def save_features(path, fs):
    """Binary container: magic, u32 n/d_a/d_v, u8 has-labels, row-major
    little-endian float32 audio then visual blocks, optional u32 labels."""
    path = str(path)
    if path.endswith(".csv"):
        _save_csv(path, fs)
        return
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIIB", fs.n, fs.audio.shape[1], fs.visual.shape[1],
                             1 if fs.labels is not None else 0))
        fh.write(np.ascontiguousarray(fs.audio, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(fs.visual, dtype="<f4").tobytes())
        if fs.labels is not None:
            fh.write(np.ascontiguousarray(fs.labels, dtype="<u4").tobytes())


def load_features(path, split="train"):
    path = str(path)
    if path.endswith(".csv"):
        return _load_csv(path, split)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:8]!r}")
    if len(blob) < 21:
        raise DataError(f"{path}: truncated header ({len(blob)} bytes)")
    n, d_a, d_v, has_labels = struct.unpack_from("<IIIB", blob, 8)
    off = 21
    expected = off + 4 * n * (d_a + d_v) + (4 * n if has_labels else 0)
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(blob)}")
    audio = np.frombuffer(blob, dtype="<f4", count=n * d_a, offset=off).reshape(n, d_a)
    off += 4 * n * d_a
    visual = np.frombuffer(blob, dtype="<f4", count=n * d_v, offset=off).reshape(n, d_v)
    off += 4 * n * d_v
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off).astype(np.int64)
    for name, block in (("audio", audio), ("visual", visual)):
        if not np.all(np.isfinite(block)):
            bad = int(np.flatnonzero(~np.isfinite(block).reshape(-1))[0])
            raise DataError(f"{path}: non-finite {name} value at flat offset {bad}")
    return FeatureSet(audio=audio.astype(np.float64), visual=visual.astype(np.float64),
                      labels=labels, split=split)


def _save_csv(path, fs):
    d_a, d_v = fs.audio.shape[1], fs.visual.shape[1]
    header = [f"a{i}" for i in range(d_a)] + [f"v{i}" for i in range(d_v)]
    if fs.labels is not None:
        header.append("label")
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(fs.n):
            row = [repr(float(v)) for v in fs.audio[i]] + [repr(float(v)) for v in fs.visual[i]]
            if fs.labels is not None:
                row.append(str(int(fs.labels[i])))
            fh.write(",".join(row) + "\n")


def _load_csv(path, split):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        d_a = sum(1 for c in header if c.startswith("a"))
        d_v = sum(1 for c in header if c.startswith("v"))
        has_labels = header[-1] == "label"
        if d_a == 0 or d_v == 0:
            raise DataError(f"{path}: header lacks a*/v* feature columns")
        rows = []
        for ln, line in enumerate(fh, start=2):
            parts = line.strip().split(",")
            if len(parts) != len(header):
                raise DataError(f"{path}:{ln}: expected {len(header)} fields, got {len(parts)}")
            rows.append([float(v) for v in parts])
    data = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: non-finite payload")
    labels = data[:, -1].astype(np.int64) if has_labels else None
    return FeatureSet(audio=data[:, :d_a], visual=data[:, d_a:d_a + d_v], labels=labels, split=split)


# ---------------------------------------------------------------------------
# synthetic paired data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    classes: int = 8
    per_class: int = 250          # training samples per class; test adds 25% overall
    d_audio: int = 12
    d_visual: int = 24
    latent_dim: int = 8
    mean_scale: float = 1.0
    noise_scale: float = 0.8
    warp: bool = True             # elementwise cubic warp on the visual view
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("SynthConfig: need at least 2 classes")
        if self.mean_scale <= 0 or self.noise_scale < 0:
            raise ValueError("SynthConfig: scales must be positive")


def generate_synthetic(config):
    """Paired features whose class structure lives in a shared latent space.

    Per class a latent center is drawn and pushed through fixed random linear
    maps into each modality, so audio/visual class structure is genuinely
    correlated; samples add isotropic per-modality noise. The optional cubic
    warp distorts the visual view so a purely linear alignment is suboptimal.
    Deterministic per seed. The split keeps an exact 80/20 train/test ratio,
    stratified by class (test counts may differ by one across classes)."""
    rng = np.random.default_rng(config.seed)
    c, ld = config.classes, config.latent_dim
    centers = rng.normal(0.0, config.mean_scale, (c, ld))
    map_a = rng.normal(0.0, 1.0, (ld, config.d_audio)) / np.sqrt(ld)
    map_v = rng.normal(0.0, 1.0, (ld, config.d_visual)) / np.sqrt(ld)

    n_test_total = round(config.classes * config.per_class * 0.25)
    base, extra = divmod(n_test_total, c)
    test_counts = [base + (1 if j < extra else 0) for j in range(c)]

    def draw(count, cls):
        mu_a = centers[cls] @ map_a
        mu_v = centers[cls] @ map_v
        xa = mu_a + rng.normal(0.0, config.noise_scale, (count, config.d_audio))
        xv = mu_v + rng.normal(0.0, config.noise_scale, (count, config.d_visual))
        if config.warp:
            xv = xv ** 3
        return xa, xv

    def build(counts, split):
        parts_a, parts_v, parts_y = [], [], []
        for cls, count in enumerate(counts):
            xa, xv = draw(count, cls)
            parts_a.append(xa)
            parts_v.append(xv)
            parts_y.append(np.full(count, cls, dtype=np.int64))
        return FeatureSet(audio=np.vstack(parts_a), visual=np.vstack(parts_v),
                          labels=np.concatenate(parts_y), split=split)

    train = build([config.per_class] * c, "train")
    test = build(test_counts, "test")
    return train, test


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batches(n, batch_size, seed, drop_last=True):
    """Epoch-seeded shuffle cut into batches; incomplete tail dropped by
    default (batch statistics and covariance estimates need full batches)."""
    if batch_size < 2:
        raise ValueError("batches: batch_size must be >= 2")
    order = np.random.default_rng(seed).permutation(n)
    out = []
    for start in range(0, n, batch_size):
        chunk = order[start:start + batch_size]
        if drop_last and chunk.size < batch_size:
            break
        out.append(chunk)
    return out
