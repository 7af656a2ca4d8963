"""Feature data model, the json+f32 on-disk format, and target splitting.

A feature set lives in two files next to each other::

    <name>.json   metadata (version, dim, grid, samples, domain_tag)
    <name>.f32    raw little-endian float32, ordered (sample, row, col, channel)

Memory banks and adapters reuse the same convention with an extra ``kind``
field in the metadata.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, LabelError, ShapeError, SizeError, ValidationError

FORMAT_VERSION = 1
PAYLOAD_SUFFIX = ".f32"


@dataclass(frozen=True, eq=False)
class Sample:
    sample_id: str
    grid: np.ndarray  # (H_g, W_g, D) float32
    image_label: int | None = None
    patch_labels: np.ndarray | None = None  # (H_g, W_g) uint8

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float32)
        if grid.ndim != 3:
            raise ShapeError(f"sample {self.sample_id!r}: grid must be H x W x D, got shape {grid.shape}")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        if self.image_label is not None:
            if self.image_label not in (0, 1):
                raise LabelError(f"sample {self.sample_id!r}: image_label must be 0 or 1")
            object.__setattr__(self, "image_label", int(self.image_label))
        if self.patch_labels is not None:
            pl = np.asarray(self.patch_labels)
            if pl.shape != grid.shape[:2]:
                raise ShapeError(
                    f"sample {self.sample_id!r}: patch_labels shape {pl.shape} != grid {grid.shape[:2]}"
                )
            if not np.isin(pl, (0, 1)).all():
                raise LabelError(f"sample {self.sample_id!r}: patch_labels must be 0/1")
            pl = pl.astype(np.uint8)
            pl.setflags(write=False)
            object.__setattr__(self, "patch_labels", pl)
            if self.image_label == 0 and pl.any():
                raise LabelError(f"sample {self.sample_id!r}: normal image with anomalous patches")
            if pl.any() and self.image_label is None:
                object.__setattr__(self, "image_label", 1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[:2]

    @property
    def n_patches(self) -> int:
        return self.grid.shape[0] * self.grid.shape[1]

    def with_grid(self, grid) -> "Sample":
        """Same sample and labels, new features (labels are metadata and carry over)."""
        return Sample(self.sample_id, grid, self.image_label, self.patch_labels)


@dataclass(frozen=True, eq=False)
class FeatureSet:
    samples: tuple
    dim: int
    grid_shape: tuple = (1, 1)
    domain_tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "grid_shape", tuple(int(v) for v in self.grid_shape))
        if self.dim < 1:
            raise ShapeError("dim must be positive")
        seen = set()
        for s in self.samples:
            if s.grid.shape != (*self.grid_shape, self.dim):
                raise ShapeError(
                    f"sample {s.sample_id!r} has shape {s.grid.shape}, "
                    f"expected {(*self.grid_shape, self.dim)}"
                )
            if not np.isfinite(s.grid).all():
                raise ValidationError(f"sample {s.sample_id!r} contains non-finite values")
            if s.sample_id in seen:
                raise ShapeError(f"duplicate sample id {s.sample_id!r}")
            seen.add(s.sample_id)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    @property
    def image_labels(self):
        return [s.image_label for s in self.samples]

    def subset(self, ids, domain_tag=None) -> "FeatureSet":
        """Samples with the given ids, kept in this set's order."""
        wanted = set(ids)
        return FeatureSet(
            [s for s in self.samples if s.sample_id in wanted],
            self.dim,
            self.grid_shape,
            self.domain_tag if domain_tag is None else domain_tag,
        )

    def replace(self, samples, domain_tag=None) -> "FeatureSet":
        return FeatureSet(samples, self.dim, self.grid_shape,
                          self.domain_tag if domain_tag is None else domain_tag)


def sets_equal(a: FeatureSet, b: FeatureSet) -> bool:
    """Bit-exact equality of two feature sets, labels and tags included."""
    if (a.dim, a.grid_shape, a.domain_tag, len(a)) != (b.dim, b.grid_shape, b.domain_tag, len(b)):
        return False
    for x, y in zip(a.samples, b.samples):
        if x.sample_id != y.sample_id or x.image_label != y.image_label:
            return False
        if x.grid.tobytes() != y.grid.tobytes():
            return False
        if (x.patch_labels is None) != (y.patch_labels is None):
            return False
        if x.patch_labels is not None and not np.array_equal(x.patch_labels, y.patch_labels):
            return False
    return True


# ---------------------------------------------------------------------------
# raw meta + payload I/O, shared with banks and adapters

def payload_path(meta_path) -> Path:
    return Path(meta_path).with_suffix(PAYLOAD_SUFFIX)


def write_payload(meta_path, meta: dict, values: np.ndarray, dtype="<f4") -> None:
    meta_path = Path(meta_path)
    values = np.ascontiguousarray(values, dtype=dtype)
    meta = dict(meta)
    if dtype != "<f4":
        meta["dtype"] = np.dtype(dtype).str
    with open(payload_path(meta_path), "wb") as fh:
        fh.write(values.tobytes())
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_meta(meta_path) -> dict:
    meta_path = Path(meta_path)
    text = meta_path.read_text()
    try:
        meta = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: invalid JSON: {exc.msg}", offset=exc.pos) from None
    if not isinstance(meta, dict):
        raise FormatError(f"{meta_path}: metadata must be a JSON object", offset=0)
    if meta.get("version") != FORMAT_VERSION:
        raise FormatError(f"{meta_path}: unsupported version {meta.get('version')!r}", offset=0)
    return meta


def read_payload(meta_path, expected_count: int, dtype="<f4") -> np.ndarray:
    path = payload_path(meta_path)
    if not path.exists():
        raise FormatError(f"{path}: payload file missing", offset=0)
    raw = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    usable = len(raw) - len(raw) % itemsize
    if usable != len(raw):
        raise FormatError(f"{path}: payload length {len(raw)} is not a multiple of {itemsize}",
                          offset=usable)
    values = np.frombuffer(raw, dtype=dtype)
    if values.size != expected_count:
        raise ShapeError(
            f"{path}: payload holds {values.size} values, metadata declares {expected_count}"
        )
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError(f"{path}: non-finite value in payload", offset=int(bad[0]) * itemsize)
    return values


# ---------------------------------------------------------------------------
# feature sets

def load_feature_set(meta_path) -> FeatureSet:
    meta = read_meta(meta_path)
    try:
        dim = int(meta["dim"])
        h, w = (int(v) for v in meta["grid"])
        entries = list(meta["samples"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{meta_path}: malformed metadata ({exc})", offset=0) from None
    per_sample = h * w * dim
    values = read_payload(meta_path, len(entries) * per_sample, meta.get("dtype", "<f4"))
    values = values.astype(np.float32, copy=False).reshape(len(entries), h, w, dim)
    samples = []
    for k, entry in enumerate(entries):
        labels = entry.get("patch_labels")
        if labels is not None:
            if len(labels) != h * w:
                raise ShapeError(f"sample {entry['id']!r}: {len(labels)} patch labels for {h}x{w} grid")
            labels = np.asarray(labels, dtype=np.uint8).reshape(h, w)
        samples.append(Sample(str(entry["id"]), values[k].copy(), entry.get("image_label"), labels))
    return FeatureSet(samples, dim, (h, w), meta.get("domain_tag", ""))


def save_feature_set(fs: FeatureSet, meta_path) -> None:
    for s in fs.samples:
        if not np.isfinite(s.grid).all():
            raise ValidationError(f"sample {s.sample_id!r} contains non-finite values")
    entries = []
    for s in fs.samples:
        entry = {"id": s.sample_id}
        if s.image_label is not None:
            entry["image_label"] = s.image_label
        if s.patch_labels is not None:
            entry["patch_labels"] = [int(v) for v in s.patch_labels.ravel()]
        entries.append(entry)
    meta = {
        "version": FORMAT_VERSION,
        "dim": fs.dim,
        "grid": list(fs.grid_shape),
        "samples": entries,
        "domain_tag": fs.domain_tag,
    }
    if fs.samples:
        values = np.stack([s.grid for s in fs.samples])
    else:
        values = np.zeros(0, dtype=np.float32)
    write_payload(meta_path, meta, values)


# ---------------------------------------------------------------------------
# splitting and flattening

@dataclass(frozen=True)
class SplitResult:
    train: FeatureSet
    test: FeatureSet
    seed: int


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_target(fs: FeatureSet, train_fraction: float, seed: int) -> SplitResult:
    """Deterministic stratified split into adaptation and evaluation parts.

    Ids are sorted, split into anomalous (image_label == 1) and other strata,
    and each stratum is permuted with ``numpy.random.default_rng(seed)``
    (PCG64): the anomalous stratum is drawn first, then the rest. The first
    k ids of each permuted stratum go to train.
    """
    n = len(fs)
    if n < 2:
        raise SizeError(f"cannot split a set of {n} samples")
    if not 0.0 < train_fraction < 1.0:
        raise SizeError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = min(max(round_half_up(train_fraction * n), 1), n - 1)

    anomalous = sorted(s.sample_id for s in fs.samples if s.image_label == 1)
    normal = sorted(s.sample_id for s in fs.samples if s.image_label != 1)
    n_anom = len(anomalous)
    k_anom = round_half_up(train_fraction * n_anom)
    if n_anom >= 2:
        k_anom = min(max(k_anom, 1), n_anom - 1)
    # both strata must fit
    k_anom = min(k_anom, n_train, n_anom)
    k_anom = max(k_anom, n_train - len(normal))
    k_norm = n_train - k_anom

    rng = np.random.default_rng(seed)
    anomalous = [anomalous[i] for i in rng.permutation(n_anom)]
    normal = [normal[i] for i in rng.permutation(len(normal))]
    train_ids = set(anomalous[:k_anom]) | set(normal[:k_norm])
    test_ids = [i for i in fs.ids if i not in train_ids]
    return SplitResult(
        train=fs.subset(train_ids),
        test=fs.subset(test_ids),
        seed=seed,
    )


@dataclass(frozen=True, eq=False)
class PatchIndex:
    """Maps a row of a flattened patch matrix back to (sample, grid cell)."""
    sample_ids: tuple
    sample: np.ndarray
    row: np.ndarray
    col: np.ndarray
    labels: np.ndarray | None = field(default=None)  # per-row patch label, if every sample has them

    def __len__(self):
        return len(self.sample)

    def __getitem__(self, k):
        return self.sample_ids[self.sample[k]], (int(self.row[k]), int(self.col[k]))


def flatten_patches(fs: FeatureSet) -> tuple[np.ndarray, PatchIndex]:
    h, w = fs.grid_shape
    n_p = h * w
    if len(fs) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return np.zeros((0, fs.dim), dtype=np.float32), PatchIndex((), empty, empty, empty)
    matrix = np.concatenate([s.grid.reshape(n_p, fs.dim) for s in fs.samples])
    rows, cols = np.divmod(np.arange(n_p), w)
    labels = None
    if all(s.patch_labels is not None for s in fs.samples):
        labels = np.concatenate([s.patch_labels.ravel() for s in fs.samples])
    index = PatchIndex(
        sample_ids=tuple(fs.ids),
        sample=np.repeat(np.arange(len(fs)), n_p),
        row=np.tile(rows, len(fs)),
        col=np.tile(cols, len(fs)),
        labels=labels,
    )
    return matrix, index
