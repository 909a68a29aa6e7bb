"""Synthetic labelled datasets with known per-class generators.

Each class ``y`` draws ``x = g(M @ (anchor_y + scale_y * eps))`` with
``eps ~ N(0, I)``, a mixing matrix ``M`` shared by all classes and an
elementwise nonlinearity ``g``.  The generator parameters are kept alongside
the data so tests can compare learned statistics against ground truth.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .rng import SeededRNG

NONLINEARITIES = {
    "identity": lambda a: a,
    "tanh": np.tanh,
    "cubic": lambda a: a ** 3,
}

DATASET_FORMAT_VERSION = 1


@dataclass
class SyntheticSpec:
    n_classes: int = 12
    dim: int = 16
    n_per_class: int = 256
    nonlinearity: str = "tanh"
    anchor_scale: float = 2.0
    scale_low: float = 0.15
    scale_high: float = 0.35
    # anchors lie in a `class_manifold_dim`-dimensional subspace of the input
    # space, so unseen classes sit among seen ones; 0 means unrestricted
    class_manifold_dim: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 4:
            raise ConfigError(f"n_classes must be >= 4, got {self.n_classes}")
        if self.n_per_class < 8:
            raise ConfigError(f"n_per_class must be >= 8, got {self.n_per_class}")
        if self.dim < 1:
            raise ConfigError("dim must be positive")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}; choose from {sorted(NONLINEARITIES)}")
        if not 0 <= self.scale_low <= self.scale_high:
            raise ConfigError("need 0 <= scale_low <= scale_high")
        if self.class_manifold_dim < 0 or self.class_manifold_dim > self.dim:
            raise ConfigError("class_manifold_dim must lie in [0, dim]")


@dataclass
class GroundTruth:
    anchors: np.ndarray  # (C, d)
    scales: np.ndarray  # (C, d)
    mixing: np.ndarray  # (d, d)
    nonlinearity: str

    def transform(self, pre: np.ndarray) -> np.ndarray:
        return NONLINEARITIES[self.nonlinearity](pre @ self.mixing.T)


@dataclass
class Dataset:
    x: np.ndarray  # (N, d)
    y: np.ndarray  # (N,) int
    truth: GroundTruth | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.y))

    def indices_of(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.y == c)

    def subset(self, classes) -> "Dataset":
        mask = np.isin(self.y, list(classes))
        return Dataset(self.x[mask], self.y[mask], self.truth)

    def by_class(self) -> dict[int, np.ndarray]:
        return {c: self.x[self.y == c] for c in self.classes}


def generate_dataset(spec: SyntheticSpec, rng: SeededRNG | None = None) -> Dataset:
    spec.validate()
    rng = rng or SeededRNG(spec.seed)
    C, d = spec.n_classes, spec.dim
    if spec.class_manifold_dim:
        basis = np.linalg.qr(rng.normal_array((d, spec.class_manifold_dim)))[0]
        codes = rng.normal_array((C, spec.class_manifold_dim))
        anchors = spec.anchor_scale * codes @ basis.T
    else:
        anchors = spec.anchor_scale * rng.normal_array((C, d))
    if len({tuple(a) for a in anchors}) != C:
        raise ConfigError("class anchors are not pairwise distinct")
    scales = spec.scale_low + (spec.scale_high - spec.scale_low) * rng.uniform((C, d))
    mixing = np.linalg.qr(rng.normal_array((d, d)))[0]
    truth = GroundTruth(anchors, scales, mixing, spec.nonlinearity)

    n = spec.n_per_class
    y = np.repeat(np.arange(C), n)
    eps = rng.normal_array((C * n, d))
    pre = anchors[y] + scales[y] * eps
    return Dataset(truth.transform(pre), y, truth)


def dataset_from_truth(truth: GroundTruth, n_per_class: int, rng: SeededRNG) -> Dataset:
    """Fresh draws from known generators, e.g. for Monte-Carlo checks."""
    C, d = truth.anchors.shape
    y = np.repeat(np.arange(C), n_per_class)
    pre = truth.anchors[y] + truth.scales[y] * rng.normal_array((len(y), d))
    return Dataset(truth.transform(pre), y, truth)


# ---------------------------------------------------------------------------
# splits and episodes


@dataclass(frozen=True)
class SplitSpec:
    seen: tuple[int, ...]
    unseen: tuple[int, ...]

    def validate(self, classes=None) -> None:
        if set(self.seen) & set(self.unseen):
            raise ConfigError("seen and unseen classes overlap")
        if len(self.seen) < 2 or len(self.unseen) < 1:
            raise ConfigError("need at least 2 seen and 1 unseen class")
        if classes is not None and set(self.seen) | set(self.unseen) != set(classes):
            raise ConfigError("split does not cover every class exactly once")


def split(classes, seen_fraction: float = 5 / 6, seen_ids=None, unseen_ids=None,
          rng: SeededRNG | None = None) -> SplitSpec:
    """Partition classes into seen/unseen.

    Explicit ids take precedence; otherwise ``round(C * (1 - seen_fraction))``
    classes chosen by ``rng`` become unseen.
    """
    classes = sorted(int(c) for c in classes)
    if seen_ids is not None or unseen_ids is not None:
        seen = tuple(sorted(seen_ids)) if seen_ids is not None else tuple(c for c in classes if c not in set(unseen_ids))
        unseen = tuple(sorted(unseen_ids)) if unseen_ids is not None else tuple(c for c in classes if c not in set(seen))
        out = SplitSpec(seen, unseen)
        out.validate(classes)
        return out
    n_unseen = int(round(len(classes) * (1.0 - seen_fraction)))
    if n_unseen < 1 or len(classes) - n_unseen < 2:
        raise ConfigError(f"seen_fraction={seen_fraction} leaves an empty side for {len(classes)} classes")
    rng = rng or SeededRNG(0)
    order = rng.permutation(len(classes))
    unseen = tuple(sorted(classes[i] for i in order[:n_unseen]))
    seen = tuple(c for c in classes if c not in unseen)
    out = SplitSpec(seen, unseen)
    out.validate(classes)
    return out


@dataclass(frozen=True)
class Episode:
    class_id: int
    support: tuple[int, ...]  # dataset row indices
    query: tuple[int, ...]
    seed: int


def sample_episode(dataset: Dataset, split_spec: SplitSpec, c: int, k: int, seed: int) -> Episode:
    if c not in split_spec.unseen:
        raise ConfigError(f"class {c} is not an unseen class")
    rows = dataset.indices_of(c)
    if k < 1 or k >= len(rows):
        raise ConfigError(f"K={k} must satisfy 1 <= K < n_y={len(rows)}")
    perm = SeededRNG(seed).permutation(len(rows))
    support = tuple(sorted(int(i) for i in rows[perm[:k]]))
    query = tuple(sorted(int(i) for i in rows[perm[k:]]))
    return Episode(int(c), support, query, int(seed))


# ---------------------------------------------------------------------------
# binary table export


def save_dataset(dataset: Dataset, path) -> None:
    """Write a plain-text header followed by little-endian float64 rows.

    Each row holds the ``dim`` features followed by the integer label stored
    as a float.
    """
    rows, dim = dataset.x.shape
    header = (
        f"format_version {DATASET_FORMAT_VERSION}\n"
        f"rows {rows}\n"
        f"dim {dim}\n"
        f"label_column {dim}\n"
        "byteorder little\n"
        "end\n"
    )
    table = np.concatenate([dataset.x, dataset.y[:, None].astype(np.float64)], axis=1)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(table.astype("<f8").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    marker = b"end\n"
    pos = raw.find(marker)
    if pos < 0:
        raise ConfigError(f"{path}: missing header terminator")
    fields = {}
    for line in io.StringIO(raw[:pos].decode("ascii")):
        key, _, value = line.strip().partition(" ")
        fields[key] = value
    if int(fields.get("format_version", -1)) != DATASET_FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported dataset format version {fields.get('format_version')}")
    rows, dim = int(fields["rows"]), int(fields["dim"])
    table = np.frombuffer(raw[pos + len(marker):], dtype="<f8").reshape(rows, dim + 1)
    return Dataset(table[:, :dim].astype(np.float64), table[:, dim].astype(np.int64))
