"""Coreset memory bank and nearest-prototype anomaly scoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import FormatError, ShapeError, SizeError
from .feature_store import (FORMAT_VERSION, FeatureSet, Sample, flatten_patches, read_meta,
                            read_payload, round_half_up, write_payload)


@dataclass(frozen=True, eq=False)
class MemoryBank:
    prototypes: np.ndarray  # (N_M, D)
    source_indices: np.ndarray
    coreset_fraction: float = 1.0

    def __post_init__(self):
        protos = np.asarray(self.prototypes)
        if protos.ndim != 2 or protos.shape[0] < 1:
            raise ShapeError(f"memory bank needs an N_M x D matrix with N_M >= 1, got {protos.shape}")
        protos = protos.copy()
        protos.setflags(write=False)
        idx = np.asarray(self.source_indices, dtype=np.int64).copy()
        idx.setflags(write=False)
        if idx.shape != (protos.shape[0],):
            raise ShapeError("source_indices must have one entry per prototype")
        object.__setattr__(self, "prototypes", protos)
        object.__setattr__(self, "source_indices", idx)

    @property
    def size(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


def resolve_target_size(fraction: float, n_source: int) -> int:
    """Coreset size for a fraction of the source patches: half-up rounding, at least 1."""
    if not 0.0 < fraction <= 1.0:
        raise SizeError(f"coreset fraction must lie in (0, 1], got {fraction}")
    if n_source < 1:
        raise SizeError("no source patches to build a coreset from")
    return max(1, round_half_up(fraction * n_source))


def _distances_to(points: np.ndarray, x: np.ndarray) -> np.ndarray:
    diff = points - x
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def greedy_coreset_indices(points, target_size: int, start: int) -> np.ndarray:
    """Farthest-point traversal from ``start``; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    selected = np.empty(target_size, dtype=np.int64)
    selected[0] = start
    mins = _distances_to(points, points[start])
    mins[start] = -1.0
    for k in range(1, target_size):
        nxt = int(np.argmax(mins))
        selected[k] = nxt
        mins = np.minimum(mins, _distances_to(points, points[nxt]))
        mins[selected[: k + 1]] = -1.0
    return selected


def build_coreset(source_patches, target_size: int, seed: int = 0, start: int | None = None,
                  coreset_fraction: float | None = None) -> MemoryBank:
    """Greedy k-center coreset of the source patches.

    The start index is drawn uniformly with ``numpy.random.default_rng(seed)``
    unless given explicitly. The result covers every source patch within
    twice the optimal k-center radius.
    """
    source = np.asarray(source_patches)
    if source.ndim != 2 or source.shape[0] < 1:
        raise SizeError(f"need at least one source patch, got shape {source.shape}")
    n = source.shape[0]
    if not 1 <= target_size <= n:
        raise SizeError(f"target_size {target_size} outside [1, {n}]")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    idx = greedy_coreset_indices(source, target_size, start)
    frac = target_size / n if coreset_fraction is None else coreset_fraction
    return MemoryBank(source[idx], idx, frac)


def coverage_radius(points, prototypes) -> float:
    """max over points of the distance to the closest prototype."""
    d = cdist(np.asarray(points, dtype=np.float64), np.asarray(prototypes, dtype=np.float64))
    return float(d.min(axis=1).max())


def nearest_distances(bank: MemoryBank, patches) -> tuple[np.ndarray, np.ndarray]:
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[1] != bank.dim:
        raise ShapeError(f"patches of shape {patches.shape} do not match bank dim {bank.dim}")
    if patches.shape[0] == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    d = cdist(patches, bank.prototypes.astype(np.float64))
    idx = d.argmin(axis=1)
    return d[np.arange(len(idx)), idx], idx


def nearest_distance(bank: MemoryBank, patch) -> tuple[float, int]:
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (bank.dim,):
        raise ShapeError(f"patch of shape {patch.shape} does not match bank dim {bank.dim}")
    d, idx = nearest_distances(bank, patch[None, :])
    return float(d[0]), int(idx[0])


def score_sample(bank: MemoryBank, sample: Sample, adapter=None) -> tuple[float, np.ndarray]:
    h, w, dim = sample.grid.shape
    if dim != bank.dim:
        raise ShapeError(f"sample {sample.sample_id!r} has dim {dim}, bank has {bank.dim}")
    patches = sample.grid.reshape(h * w, dim).astype(np.float64)
    if adapter is not None:
        patches = adapter.apply(patches)
    d, _ = nearest_distances(bank, patches)
    return float(d.max()), d.reshape(h, w)


def score_set(bank: MemoryBank, fs: FeatureSet, adapter=None) -> list[tuple[float, np.ndarray]]:
    return [score_sample(bank, s, adapter) for s in fs.samples]


def save_bank(bank: MemoryBank, meta_path) -> None:
    meta = {
        "version": FORMAT_VERSION,
        "kind": "memory_bank",
        "dim": bank.dim,
        "n_prototypes": bank.size,
        "source_indices": [int(i) for i in bank.source_indices],
        "coreset_fraction": bank.coreset_fraction,
    }
    write_payload(meta_path, meta, bank.prototypes)


def load_bank(meta_path) -> MemoryBank:
    meta = read_meta(meta_path)
    if meta.get("kind") != "memory_bank":
        raise FormatError(f"{meta_path}: not a memory bank (kind={meta.get('kind')!r})", offset=0)
    dim, n = int(meta["dim"]), int(meta["n_prototypes"])
    values = read_payload(meta_path, n * dim, meta.get("dtype", "<f4"))
    return MemoryBank(values.reshape(n, dim), meta["source_indices"], float(meta["coreset_fraction"]))


def bank_from_feature_set(source: FeatureSet, fraction: float, seed: int) -> MemoryBank:
    patches, _ = flatten_patches(source)
    size = resolve_target_size(fraction, patches.shape[0])
    return build_coreset(patches, size, seed, coreset_fraction=fraction)
