"""Cost matrices, entropic and exact optimal transport, and plan discretization.

Orientation is fixed throughout: row i = target patch, column j = memory
prototype. Row marginals are 1/N_tp, column marginals 1/N_M.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist

from .errors import NumericError, ShapeError, SizeError

EXACT_OT_MAX_ENTRIES = 10_000


@dataclass(frozen=True, eq=False)
class CostMatrix:
    values: np.ndarray  # (N_tp, N_M)
    patch_index: object = None
    prototype_indices: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"cost matrix must be 2-D, got shape {v.shape}")
        if not np.isfinite(v).all() or (v < 0).any():
            raise NumericError("cost matrix entries must be finite and non-negative")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class TransportPlan:
    gamma: np.ndarray
    epsilon: float
    iterations_used: int = 0
    marginal_residual: float = 0.0
    converged: bool = True


@dataclass(frozen=True, eq=False)
class DiscreteAssignment:
    pairs: np.ndarray  # (K, 2) int, rows sorted lexicographically
    shape: tuple

    def __len__(self):
        return len(self.pairs)

    def as_set(self) -> set:
        return {(int(i), int(j)) for i, j in self.pairs}

    @property
    def rows(self):
        return self.pairs[:, 0]

    @property
    def cols(self):
        return self.pairs[:, 1]


def _as_cost(C) -> CostMatrix:
    return C if isinstance(C, CostMatrix) else CostMatrix(C)


def cost_matrix(target_patches, bank, adapter=None, patch_index=None) -> CostMatrix:
    patches = np.asarray(target_patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[1] != bank.dim:
        raise ShapeError(f"patches of shape {patches.shape} do not match bank dim {bank.dim}")
    if adapter is not None:
        patches = adapter.apply(patches)
    values = cdist(patches, bank.prototypes.astype(np.float64))
    return CostMatrix(values, patch_index, bank.source_indices)


def _logsumexp(x, axis):
    m = x.max(axis=axis, keepdims=True)
    out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _sinkhorn_loop(neg_c, epsilon, f, g, max_iter, tol):
    """Alternating log-domain updates; potentials f, g are in cost units."""
    n, m = neg_c.shape
    log_a, log_b = -np.log(n), -np.log(m)
    a = 1.0 / n
    k = neg_c / epsilon
    residual = np.inf
    it = 0
    while True:
        # row reduction serves both the residual check and the f update
        lse_row = _logsumexp(k + g[None, :] / epsilon, axis=1)
        if it > 0:
            residual = float(np.abs(np.exp(f / epsilon + lse_row) - a).max())
            if residual <= tol or it >= max_iter:
                break
        f = epsilon * (log_a - lse_row)
        g = epsilon * (log_b - _logsumexp(k + f[:, None] / epsilon, axis=0))
        it += 1
        if not (np.isfinite(f).all() and np.isfinite(g).all()):
            raise NumericError(f"non-finite Sinkhorn potentials at iteration {it}")
    return f, g, it, residual


def _newton_polish(neg_c, epsilon, f, max_steps, tol):
    """Newton iterations on the row potential with g eliminated in closed form.

    With g(f) normalizing the columns exactly, the row sums r(f) have
    Jacobian (diag(r) - P diag(1/b) P^T) / epsilon. Each step solves that
    system in the least-squares sense (it is singular along the all-ones
    direction) and backtracks until the row residual shrinks.
    """
    n, m = neg_c.shape
    a, b = 1.0 / n, 1.0 / m
    k = neg_c / epsilon

    def state(f):
        g = epsilon * (np.log(b) - _logsumexp(k + f[:, None] / epsilon, axis=0))
        P = np.exp(k + (f[:, None] + g[None, :]) / epsilon)
        r = P.sum(axis=1)
        return g, P, r, float(np.abs(r - a).max())

    g, P, r, res = state(f)
    steps = 0
    while res > tol and steps < max_steps:
        J = (np.diag(r) - (P / b) @ P.T) / epsilon
        delta = np.linalg.lstsq(J, a - r, rcond=None)[0]
        t = 1.0
        while True:
            cand = state(f + t * delta)
            if cand[3] < res or t < 1e-6:
                break
            t *= 0.5
        if not cand[3] < res:
            break
        f = f + t * delta
        g, P, r, res = cand
        steps += 1
    return f, g, steps, res


def sinkhorn(C, epsilon: float, max_iter: int = 1000, tol: float = 1e-6,
             anneal: bool = True, stage_iter: int = 20, newton_steps: int = 30) -> TransportPlan:
    """Entropic OT with uniform marginals via log-domain Sinkhorn iterations.

    Dual potentials are updated alternately with log-sum-exp reductions, so
    no kernel entry underflows. After each column update the column marginals
    are exact; iteration stops once the max-norm row-marginal violation is at
    most ``tol`` or ``max_iter`` iterations were spent at the target epsilon.

    With ``anneal`` the potentials are warm-started by a short run (at most
    ``stage_iter`` iterations each) at epsilon = max(C), max(C)/2, ... down to
    the target. If plain iterations stop short of ``tol`` (their linear rate
    can be very close to 1 for small epsilon), up to ``newton_steps`` Newton
    steps on the potential of the shorter side finish the job.

    ``marginal_residual`` on the returned plan is the max-norm violation over
    both marginals; ``iterations_used`` counts scaling iterations plus Newton
    steps.
    """
    C = _as_cost(C).values
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    n, m = C.shape
    if n == 0 or m == 0:
        raise SizeError(f"empty cost matrix {C.shape}")
    neg_c = -C
    f = np.zeros(n)
    g = np.zeros(m)
    spent = 0
    if anneal:
        eps_k = float(C.max())
        while eps_k > 2 * epsilon:
            f, g, it, _ = _sinkhorn_loop(neg_c, eps_k, f, g, stage_iter, tol)
            spent += it
            eps_k /= 2
    f, g, it, residual = _sinkhorn_loop(neg_c, epsilon, f, g, max_iter, tol)
    spent += it
    if residual > tol and newton_steps > 0:
        if n <= m:
            f, g, steps, _ = _newton_polish(neg_c, epsilon, f, newton_steps, tol)
        else:
            g, f, steps, _ = _newton_polish(neg_c.T, epsilon, g, newton_steps, tol)
        spent += steps
    gamma = np.exp((neg_c + f[:, None] + g[None, :]) / epsilon)
    if not np.isfinite(gamma).all():
        raise NumericError("non-finite transport plan")
    residual = marginal_residual(gamma)
    return TransportPlan(gamma, float(epsilon), spent, residual, residual <= 10 * tol)


def default_epsilon(C, scale: float = 0.05) -> float:
    """Regularization as a multiple of the mean cost (guarded for all-zero costs)."""
    mean = float(_as_cost(C).values.mean())
    return scale * mean if mean > 0 else scale


def marginal_residual(gamma) -> float:
    gamma = np.asarray(gamma)
    n, m = gamma.shape
    return float(max(np.abs(gamma.sum(axis=1) - 1.0 / n).max(),
                     np.abs(gamma.sum(axis=0) - 1.0 / m).max()))


def exact_ot(C) -> tuple[np.ndarray, float]:
    """Uniform-marginal transport LP solved exactly (HiGHS). Test oracle only."""
    C = _as_cost(C).values
    n, m = C.shape
    if n * m > EXACT_OT_MAX_ENTRIES:
        raise SizeError(f"exact_ot is capped at {EXACT_OT_MAX_ENTRIES} entries, got {n}x{m}")
    rows = np.kron(np.eye(n), np.ones((1, m)))
    cols = np.kron(np.ones((1, n)), np.eye(m))
    res = linprog(
        C.ravel(),
        A_eq=np.vstack([rows, cols]),
        b_eq=np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)]),
        bounds=(0, None),
        method="highs",
    )
    if res.status != 0:
        raise NumericError(f"LP solver failed: {res.message}")
    gamma = np.clip(res.x.reshape(n, m), 0.0, None)
    return gamma, float(res.fun)


def hungarian_assignment(C) -> tuple[DiscreteAssignment, float]:
    """Minimum-cost one-to-one matching; the smaller side is fully matched.

    Equivalent to padding the short side with zero-cost dummies and dropping
    them afterwards.
    """
    C = _as_cost(C).values
    r, c = linear_sum_assignment(C)
    pairs = np.stack([r, c], axis=1).astype(np.int64) if len(r) else np.zeros((0, 2), np.int64)
    return DiscreteAssignment(pairs, C.shape), float(C[r, c].sum())


def discretize(plan) -> DiscreteAssignment:
    """Keep every row's argmax and every column's argmax (lowest index on ties)."""
    gamma = plan.gamma if isinstance(plan, TransportPlan) else np.asarray(plan)
    n, m = gamma.shape
    row_pairs = np.stack([np.arange(n), gamma.argmax(axis=1)], axis=1)
    col_pairs = np.stack([gamma.argmax(axis=0), np.arange(m)], axis=1)
    pairs = np.unique(np.concatenate([row_pairs, col_pairs]).astype(np.int64), axis=0)
    return DiscreteAssignment(pairs, (n, m))


def assignment_cost(pairs: DiscreteAssignment, C) -> float:
    C = _as_cost(C).values
    p = pairs.pairs if isinstance(pairs, DiscreteAssignment) else np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(p) == 0:
        return 0.0
    n, m = C.shape
    if (p[:, 0] < 0).any() or (p[:, 0] >= n).any() or (p[:, 1] < 0).any() or (p[:, 1] >= m).any():
        raise IndexError(f"assignment pair outside a {n}x{m} cost matrix")
    return float(C[p[:, 0], p[:, 1]].sum())


def plan_cost(plan, C) -> float:
    gamma = plan.gamma if isinstance(plan, TransportPlan) else np.asarray(plan)
    C = _as_cost(C).values
    if gamma.shape != C.shape:
        raise ShapeError(f"plan {gamma.shape} and cost {C.shape} differ in shape")
    return float((gamma * C).sum())
