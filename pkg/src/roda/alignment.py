"""Feature-space adaptation: affine adapter, alignment losses and the update loop.

The adapter is a per-channel ``scale * z + shift`` applied to extracted patch
features; it stands in for the batchnorm affine parameters of an encoder.
Every loss here is differentiated with the transport plan / assignment held
fixed, which is re-solved at each step.

``epsilon`` arguments in this module are relative: the Sinkhorn regularizer
used for a cost matrix C is ``epsilon * mean(C)``.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import transport
from .errors import ConfigError, FormatError, NumericError, ShapeError, SizeError
from .feature_store import (FORMAT_VERSION, FeatureSet, Sample, read_meta, read_payload,
                            write_payload)
from .memory_bank import MemoryBank

METHODS = ("robust-ot", "continuous-ot", "hungarian", "moment-match", "gaussian-kl")
POLICIES = ("none", "copy", "jitter")
ZERO_NORM = 1e-12
KL_RIDGE = 1e-4


@dataclass(frozen=True, eq=False)
class AffineAdapter:
    scale: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        scale = np.array(self.scale, dtype=np.float64)
        shift = np.array(self.shift, dtype=np.float64)
        if scale.ndim != 1 or scale.shape != shift.shape:
            raise ShapeError(f"scale {scale.shape} and shift {shift.shape} must be matching vectors")
        if not (np.isfinite(scale).all() and np.isfinite(shift).all()):
            raise NumericError("adapter parameters must be finite")
        scale.setflags(write=False)
        shift.setflags(write=False)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "shift", shift)

    @classmethod
    def identity(cls, dim: int) -> "AffineAdapter":
        return cls(np.ones(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.scale.shape[0]

    def apply(self, patches) -> np.ndarray:
        return apply_adapter(self, patches)

    def step(self, grad_scale, grad_shift, lr: float) -> "AffineAdapter":
        return AffineAdapter(self.scale - lr * grad_scale, self.shift - lr * grad_shift)


def apply_adapter(adapter: AffineAdapter, patches) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[1] != adapter.dim:
        raise ShapeError(f"patches of shape {patches.shape} do not match adapter dim {adapter.dim}")
    return patches * adapter.scale + adapter.shift


def save_adapter(adapter: AffineAdapter, meta_path, provenance: dict | None = None) -> None:
    """Write scale then shift as float64; ``provenance`` is stored verbatim in the metadata."""
    meta = {"version": FORMAT_VERSION, "kind": "adapter", "dim": adapter.dim}
    if provenance:
        meta["provenance"] = provenance
    write_payload(meta_path, meta, np.concatenate([adapter.scale, adapter.shift]), dtype="<f8")


def load_adapter(meta_path) -> AffineAdapter:
    meta = read_meta(meta_path)
    if meta.get("kind") != "adapter":
        raise FormatError(f"{meta_path}: not an adapter (kind={meta.get('kind')!r})", offset=0)
    dim = int(meta["dim"])
    values = read_payload(meta_path, 2 * dim, meta.get("dtype", "<f4")).astype(np.float64)
    return AffineAdapter(values[:dim], values[dim:])


@dataclass(frozen=True)
class AdaptConfig:
    learning_rate: float = 0.01
    epochs: int = 10
    batch_size: int = 8
    epsilon: float = 0.05
    augmentation: str = "jitter"
    views: int = 4
    jitter_scale: float = 0.05
    seed: int = 0
    max_iter: int = 1000
    tol: float = 1e-6

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("adapt.learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("adapt.epochs and adapt.batch_size must be >= 1")
        if not self.epsilon > 0:
            raise ConfigError("adapt.epsilon must be > 0")
        if self.augmentation not in POLICIES:
            raise ConfigError(f"adapt.augmentation must be one of {POLICIES}, got {self.augmentation!r}")
        if self.views < 1:
            raise ConfigError("adapt.views must be >= 1")
        if self.augmentation == "copy" and self.views < 2:
            raise ConfigError("adapt.augmentation 'copy' needs views >= 2")
        if self.jitter_scale < 0:
            raise ConfigError("adapt.jitter_scale must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    residual: float | None
    pairs: int
    anomalous_pairs: int | None
    grad_norm: float


@dataclass
class AdaptTrace:
    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    @property
    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.steps])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(s), sort_keys=True) + "\n" for s in self.steps)


# ---------------------------------------------------------------------------
# augmentation

def _view_rng(seed: int, sample_id: str, view: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode()), view])


def augment_batch(batch, policy: str = "none", views: int = 1, jitter_scale: float = 0.0,
                  seed: int = 0) -> list:
    """Multiply a minibatch into views.

    ``copy`` repeats each sample ``views`` times. ``jitter`` adds isotropic
    Gaussian noise to every view, per channel scaled by ``jitter_scale`` times
    the channel's std over the batch; the noise depends only on
    (seed, sample_id, view).
    """
    batch = list(batch)
    if views < 1:
        raise ConfigError("views must be >= 1")
    if policy == "none" or not batch:
        return batch
    if policy not in POLICIES:
        raise ConfigError(f"unknown augmentation policy {policy!r}")
    std = None
    if policy == "jitter":
        dim = batch[0].grid.shape[-1]
        stacked = np.concatenate([s.grid.reshape(-1, dim) for s in batch]).astype(np.float64)
        std = stacked.std(axis=0) * jitter_scale
    out = []
    for s in batch:
        for v in range(views):
            grid = s.grid
            if std is not None:
                noise = _view_rng(seed, s.sample_id, v).standard_normal(grid.shape)
                grid = (grid.astype(np.float64) + noise * std).astype(np.float32)
            out.append(Sample(f"{s.sample_id}#v{v}", grid, s.image_label, s.patch_labels))
    return out


# ---------------------------------------------------------------------------
# losses and gradients

class RobustLoss(NamedTuple):
    loss: float
    pairs: transport.DiscreteAssignment
    cost: transport.CostMatrix
    plan: transport.TransportPlan


def robust_sinkhorn_loss(adapter, patches, bank: MemoryBank, epsilon: float = 0.05,
                         max_iter: int = 1000, tol: float = 1e-6) -> RobustLoss:
    """Discretized Sinkhorn loss: sum of costs over the row/column argmax pairs."""
    C = transport.cost_matrix(patches, bank, adapter)
    plan = transport.sinkhorn(C, transport.default_epsilon(C, epsilon), max_iter, tol)
    pairs = transport.discretize(plan)
    return RobustLoss(transport.assignment_cost(pairs, C), pairs, C, plan)


def _pair_units(adapter, patches, prototypes, rows, cols):
    v = apply_adapter(adapter, patches[rows]) - prototypes[cols]
    norm = np.sqrt(np.einsum("ij,ij->i", v, v))
    unit = np.zeros_like(v)
    ok = norm >= ZERO_NORM
    unit[ok] = v[ok] / norm[ok, None]
    return unit


def loss_gradient(adapter, patches, bank: MemoryBank, pairs) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of sum over pairs of ||scale*z_i + shift - m_j|| with pairs fixed.

    Pairs at zero distance contribute nothing (a valid subgradient).
    """
    patches = np.asarray(patches, dtype=np.float64)
    p = pairs.pairs if isinstance(pairs, transport.DiscreteAssignment) else np.asarray(pairs).reshape(-1, 2)
    if len(p) == 0:
        return np.zeros(adapter.dim), np.zeros(adapter.dim)
    unit = _pair_units(adapter, patches, bank.prototypes.astype(np.float64), p[:, 0], p[:, 1])
    return (unit * patches[p[:, 0]]).sum(axis=0), unit.sum(axis=0)


def plan_gradient(adapter, patches, bank: MemoryBank, gamma) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of sum_ij gamma_ij ||scale*z_i + shift - m_j|| with gamma fixed."""
    patches = np.asarray(patches, dtype=np.float64)
    gamma = np.asarray(gamma.gamma if isinstance(gamma, transport.TransportPlan) else gamma)
    x = apply_adapter(adapter, patches)
    v = x[:, None, :] - bank.prototypes.astype(np.float64)[None, :, :]
    norm = np.sqrt((v * v).sum(axis=-1))
    w = np.where(norm >= ZERO_NORM, gamma / np.maximum(norm, ZERO_NORM), 0.0)
    per_row = np.einsum("ij,ijd->id", w, v)
    return (per_row * patches).sum(axis=0), per_row.sum(axis=0)


def _moments(x):
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False))


def moment_matching_loss(adapter, patches, bank: MemoryBank):
    """||mu_s - mu_t||^2 + ||Sigma_s - Sigma_t||_F^2 and its gradient.

    Returns ``(loss, (grad_scale, grad_shift))``.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape[0] < 2:
        raise SizeError("moment matching needs at least 2 patches")
    mu_s, cov_s = _moments(bank.prototypes)
    mu_z, cov_z = _moments(patches)
    s, t = adapter.scale, adapter.shift
    mu_t = s * mu_z + t
    cov_t = cov_z * np.outer(s, s)
    dmu = mu_t - mu_s
    dcov = cov_t - cov_s
    loss = float(dmu @ dmu + (dcov * dcov).sum())
    grad_shift = 2.0 * dmu
    grad_scale = 2.0 * dmu * mu_z + 4.0 * (dcov * cov_z) @ s
    return loss, (grad_scale, grad_shift)


def _ridge(cov):
    return KL_RIDGE * float(np.mean(np.diag(cov)))


def gaussian_kl(mu_t, cov_t, mu_s, cov_s) -> float:
    """KL(N(mu_t, cov_t) || N(mu_s, cov_s)) in closed form."""
    d = mu_s - mu_t
    inv_s = np.linalg.inv(cov_s)
    _, logdet_s = np.linalg.slogdet(cov_s)
    _, logdet_t = np.linalg.slogdet(cov_t)
    k = len(mu_t)
    return float(0.5 * (np.trace(inv_s @ cov_t) + d @ inv_s @ d - k + logdet_s - logdet_t))


def gaussian_kl_loss(adapter, patches, bank: MemoryBank):
    """KL between single Gaussians fitted to the adapted batch and the bank.

    Both covariances get a ridge of 1e-4 times their mean diagonal. Returns
    ``(loss, (grad_scale, grad_shift))``.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape[0] < 2:
        raise SizeError("gaussian-kl needs at least 2 patches")
    dim = adapter.dim
    mu_s, cov_s = _moments(bank.prototypes)
    cov_s = cov_s + _ridge(cov_s) * np.eye(dim)
    mu_z, cov_z = _moments(patches)
    s, t = adapter.scale, adapter.shift
    mu_t = s * mu_z + t
    cov_t = cov_z * np.outer(s, s)
    cov_t = cov_t + _ridge(cov_t) * np.eye(dim)
    loss = gaussian_kl(mu_t, cov_t, mu_s, cov_s)

    inv_s = np.linalg.inv(cov_s)
    inv_t = np.linalg.inv(cov_t)
    g_cov = 0.5 * (inv_s - inv_t)
    g_mu = inv_s @ (mu_t - mu_s)
    dridge = KL_RIDGE * 2.0 * s * np.diag(cov_z) / dim
    grad_scale = 2.0 * (g_cov * cov_z) @ s + np.trace(g_cov) * dridge + g_mu * mu_z
    return loss, (grad_scale, g_mu)


# ---------------------------------------------------------------------------
# the adaptation loop

def _batch_patches(samples):
    dim = samples[0].grid.shape[-1]
    patches = np.concatenate([s.grid.reshape(-1, dim) for s in samples]).astype(np.float64)
    labels = None
    if all(s.patch_labels is not None for s in samples):
        labels = np.concatenate([s.patch_labels.ravel() for s in samples])
    return patches, labels


def method_step(method: str, adapter, patches, bank: MemoryBank, config: AdaptConfig):
    """One loss evaluation: returns (loss, grad_scale, grad_shift, residual, pairs).

    Assignment-based gradients are divided by the number of pairs, so the
    learning rate acts per pair and matches the unit-mass continuous plan.
    """
    if method == "robust-ot":
        res = robust_sinkhorn_loss(adapter, patches, bank, config.epsilon, config.max_iter, config.tol)
        gs, gt = loss_gradient(adapter, patches, bank, res.pairs)
        n = max(len(res.pairs), 1)
        return res.loss, gs / n, gt / n, res.plan.marginal_residual, res.pairs
    if method == "continuous-ot":
        C = transport.cost_matrix(patches, bank, adapter)
        plan = transport.sinkhorn(C, transport.default_epsilon(C, config.epsilon), config.max_iter, config.tol)
        gs, gt = plan_gradient(adapter, patches, bank, plan)
        return transport.plan_cost(plan, C), gs, gt, plan.marginal_residual, transport.discretize(plan)
    if method == "hungarian":
        C = transport.cost_matrix(patches, bank, adapter)
        pairs, loss = transport.hungarian_assignment(C)
        gs, gt = loss_gradient(adapter, patches, bank, pairs)
        n = max(len(pairs), 1)
        return loss, gs / n, gt / n, None, pairs
    if method == "moment-match":
        loss, (gs, gt) = moment_matching_loss(adapter, patches, bank)
        return loss, gs, gt, None, None
    if method == "gaussian-kl":
        loss, (gs, gt) = gaussian_kl_loss(adapter, patches, bank)
        return loss, gs, gt, None, None
    raise ConfigError(f"unknown adaptation method {method!r}; expected one of {METHODS}")


def adapt(bank: MemoryBank, train: FeatureSet, config: AdaptConfig = AdaptConfig(),
          method: str = "robust-ot", adapter: AffineAdapter | None = None):
    """Fit an affine adapter on target training samples.

    Each epoch visits a seeded permutation of the samples in minibatches of
    ``config.batch_size``; every minibatch is augmented, flattened to
    patches, scored with the method's loss, and followed by one plain
    gradient step. Returns ``(adapter, trace)``.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown adaptation method {method!r}; expected one of {METHODS}")
    if len(train) == 0:
        raise SizeError("adaptation needs at least one target training sample")
    if train.dim != bank.dim:
        raise ShapeError(f"target dim {train.dim} != bank dim {bank.dim}")
    adapter = AffineAdapter.identity(bank.dim) if adapter is None else adapter
    rng = np.random.default_rng(config.seed)
    samples = list(train.samples)
    trace = AdaptTrace()
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(samples), config.batch_size):
            batch = [samples[k] for k in order[start:start + config.batch_size]]
            views = augment_batch(batch, config.augmentation, config.views, config.jitter_scale, config.seed)
            patches, labels = _batch_patches(views)
            # overflow is caught by the finiteness check below, not warned about
            with np.errstate(over="ignore", invalid="ignore"):
                loss, gs, gt, residual, pairs = method_step(method, adapter, patches, bank, config)
                grad_norm = float(np.sqrt(gs @ gs + gt @ gt))
            if not (np.isfinite(loss) and np.isfinite(grad_norm)):
                raise NumericError(f"non-finite loss or gradient at step {step} ({method}): "
                                   f"loss={loss}, grad_norm={grad_norm}")
            n_pairs = 0 if pairs is None else len(pairs)
            anomalous = None
            if labels is not None and pairs is not None:
                anomalous = int(labels[pairs.rows].sum())
            trace.steps.append(StepRecord(step, float(loss), residual, n_pairs, anomalous, grad_norm))
            adapter = adapter.step(gs, gt, config.learning_rate)
            step += 1
    return adapter, trace
