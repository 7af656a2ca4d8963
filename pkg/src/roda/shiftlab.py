"""Synthetic feature worlds with injected anomalies and graded distribution shifts.

Normal patch features come from a K-component Gaussian mixture. Anomalous
target samples carry one contiguous rectangle of patches displaced by
``anomaly_offset`` along a random unit direction. Shifts are feature-space
analogues of common image corruptions, graded by severity 0..5:

    additive-gaussian   noise, std 0.1 * s * channel std       (gaussian noise)
    channel-gain        gains uniform in [1 - 0.15 s, 1 + 0.15 s] (contrast)
    channel-offset      +-0.1 * s * channel std per channel      (brightness)
    grid-smoothing      s passes of a 4-neighbourhood mean       (defocus blur)

Random draws do not depend on severity, so for one seed the severities
form a single path of growing strength.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .feature_store import FeatureSet, Sample, round_half_up

SHIFT_KINDS = ("additive-gaussian", "channel-gain", "channel-offset", "grid-smoothing")
NOISE_STEP = 0.1
GAIN_STEP = 0.15
OFFSET_STEP = 0.1


@dataclass(frozen=True)
class WorldSpec:
    dim: int = 8
    grid: tuple = (4, 4)
    n_clusters: int = 4
    cluster_spread: float = 0.3
    center_scale: float = 1.0
    base_level: float = 1.0
    n_source: int = 100
    n_target: int = 60
    anomaly_rate: float = 0.5
    anomaly_offset: float = 1.5
    anomaly_extent: float = 0.5
    anomaly_coherence: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(v) for v in self.grid))
        if self.dim < 1 or len(self.grid) != 2 or min(self.grid) < 1:
            raise ConfigError("world.dim and world.grid entries must be positive")
        if self.n_clusters < 1 or self.n_source < 1 or self.n_target < 0:
            raise ConfigError("world.n_clusters and world.n_source must be >= 1, n_target >= 0")
        if not 0.0 <= self.anomaly_rate <= 1.0:
            raise ConfigError("world.anomaly_rate must lie in [0, 1]")
        if min(self.cluster_spread, self.center_scale, self.anomaly_offset) < 0:
            raise ConfigError("world magnitudes must be >= 0")
        if not 0.0 < self.anomaly_extent <= 1.0 or not 0.0 <= self.anomaly_coherence <= 1.0:
            raise ConfigError("world.anomaly_extent must lie in (0, 1], anomaly_coherence in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


@dataclass(frozen=True)
class ShiftSpec:
    kind: str = "channel-gain"
    severity: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ConfigError(f"shift.kind must be one of {SHIFT_KINDS}, got {self.kind!r}")
        if self.severity not in range(6):
            raise ConfigError(f"shift.severity must be an integer in 0..5, got {self.severity!r}")

    @property
    def tag(self) -> str:
        return f"{self.kind}-s{self.severity}"

    def to_dict(self) -> dict:
        return asdict(self)


def _normal_grid(rng, centers, spread, base, h, w):
    k, dim = centers.shape
    comp = rng.integers(k, size=h * w)
    feats = base + centers[comp] + spread * rng.standard_normal((h * w, dim))
    return feats.reshape(h, w, dim)


def _anomaly_region(rng, h, w, extent):
    rh = int(rng.integers(1, max(1, int(np.ceil(extent * h))) + 1))
    rw = int(rng.integers(1, max(1, int(np.ceil(extent * w))) + 1))
    r0 = int(rng.integers(0, h - rh + 1))
    c0 = int(rng.integers(0, w - rw + 1))
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[r0:r0 + rh, c0:c0 + rw] = 1
    return mask


def generate_world(spec: WorldSpec = WorldSpec()) -> tuple[FeatureSet, FeatureSet]:
    """Source (all normal) and clean target sets drawn from one seeded world."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.grid
    centers = spec.center_scale * rng.standard_normal((spec.n_clusters, spec.dim))
    shared = rng.standard_normal(spec.dim)
    shared /= np.linalg.norm(shared)

    source = []
    for k in range(spec.n_source):
        grid = _normal_grid(rng, centers, spec.cluster_spread, spec.base_level, h, w)
        source.append(Sample(f"s{k:04d}", grid, 0, np.zeros((h, w), dtype=np.uint8)))

    n_anom = round_half_up(spec.anomaly_rate * spec.n_target)
    anomalous = set(rng.permutation(spec.n_target)[:n_anom].tolist())
    target = []
    for k in range(spec.n_target):
        grid = _normal_grid(rng, centers, spec.cluster_spread, spec.base_level, h, w)
        mask = np.zeros((h, w), dtype=np.uint8)
        if k in anomalous:
            mask = _anomaly_region(rng, h, w, spec.anomaly_extent)
            direction = rng.standard_normal(spec.dim)
            direction /= np.linalg.norm(direction)
            direction = spec.anomaly_coherence * shared + (1.0 - spec.anomaly_coherence) * direction
            direction /= np.linalg.norm(direction)
            grid[mask.astype(bool)] += spec.anomaly_offset * direction
        target.append(Sample(f"t{k:04d}", grid, int(k in anomalous), mask))

    return (FeatureSet(source, spec.dim, (h, w), "source"),
            FeatureSet(target, spec.dim, (h, w), "target-clean"))


def _channel_std(fs: FeatureSet) -> np.ndarray:
    if len(fs) == 0:
        return np.zeros(fs.dim)
    stacked = np.concatenate([s.grid.reshape(-1, fs.dim) for s in fs.samples]).astype(np.float64)
    return stacked.std(axis=0)


def _smooth(grid: np.ndarray, passes: int) -> np.ndarray:
    g = grid.astype(np.float64)
    h, w, _ = g.shape
    counts = np.ones((h, w, 1))
    counts[1:] += 1
    counts[:-1] += 1
    counts[:, 1:] += 1
    counts[:, :-1] += 1
    for _ in range(passes):
        total = g.copy()
        total[1:] += g[:-1]
        total[:-1] += g[1:]
        total[:, 1:] += g[:, :-1]
        total[:, :-1] += g[:, 1:]
        g = total / counts
    return g


def apply_shift(fs: FeatureSet, shift: ShiftSpec) -> FeatureSet:
    """Shift every sample's features; labels and ids are carried over untouched."""
    tag = f"{fs.domain_tag or 'set'}-{shift.tag}"
    s = shift.severity
    if s == 0:
        return fs.replace(fs.samples, domain_tag=tag)
    rng = np.random.default_rng(shift.seed)
    std = _channel_std(fs)
    out = []
    if shift.kind == "additive-gaussian":
        for sample in fs.samples:
            noise = rng.standard_normal(sample.grid.shape)
            out.append(sample.with_grid(sample.grid + NOISE_STEP * s * std * noise))
    elif shift.kind == "channel-gain":
        u = rng.uniform(-1.0, 1.0, size=fs.dim)
        gains = 1.0 + GAIN_STEP * s * u
        out = [sample.with_grid(sample.grid * gains) for sample in fs.samples]
    elif shift.kind == "channel-offset":
        signs = rng.choice([-1.0, 1.0], size=fs.dim)
        offsets = OFFSET_STEP * s * std * signs
        out = [sample.with_grid(sample.grid + offsets) for sample in fs.samples]
    else:
        out = [sample.with_grid(_smooth(sample.grid, s)) for sample in fs.samples]
    return fs.replace(out, domain_tag=tag)
