"""Cross-domain alignment of Gaussian components via entropic optimal transport.

The coupling problem uses uniform marginals (1/m per source component,
1/n per target component) with pairwise squared Wasserstein-2 costs, and
is solved by Sinkhorn scaling in the log domain, which survives the cost
magnitudes that arise at high embedding dimension.  A converged plan,
row-normalized, carries per-user component weights from source to target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericalError
from .gmm import GaussianComponent, GmmModel
from .preference import PreferenceWeights

# Roundoff in the eigendecomposition can push a true zero slightly negative;
# anything below this is treated as a real numerical failure.
W2_NEGATIVE_FLOOR = -1e-8


@dataclass(frozen=True)
class CostMatrix:
    values: np.ndarray  # (m, n), source components x target components

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise ValueError("cost matrix must be a non-empty 2-D array")
        if not np.all(np.isfinite(v)):
            raise ValueError("cost matrix entries must be finite")
        if np.any(v < 0):
            raise ValueError("cost matrix entries must be nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class TransportPlan:
    values: np.ndarray  # (m, n) coupling, rows sum to 1/m, columns to 1/n
    epsilon: float
    iterations: int
    marginal_error: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise ValueError("transport plan must be a non-empty 2-D array")
        if np.any(v < 0):
            raise ValueError("transport plan entries must be nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def matrix_sqrt_spd(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, negative eigenvalues clamped."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.allclose(m, m.T, atol=1e-9, rtol=0.0):
        raise ValueError("matrix must be symmetric within 1e-9")
    eigvals, eigvecs = np.linalg.eigh(m)
    root = (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T
    return 0.5 * (root + root.T)


def w2_gaussian(g1: GaussianComponent, g2: GaussianComponent) -> float:
    """Squared Wasserstein-2 distance between two Gaussians.

    ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S2^{1/2} S1 S2^{1/2})^{1/2}).
    """
    if g1.dim != g2.dim:
        raise ValueError(f"dimension mismatch: {g1.dim} vs {g2.dim}")
    mean_term = float(np.sum((g1.mean - g2.mean) ** 2))
    s2_half = matrix_sqrt_spd(g2.covariance)
    inner = s2_half @ g1.covariance @ s2_half
    cross = matrix_sqrt_spd(0.5 * (inner + inner.T))
    value = mean_term + float(
        np.trace(g1.covariance) + np.trace(g2.covariance) - 2.0 * np.trace(cross)
    )
    if value < 0.0:
        if value < W2_NEGATIVE_FLOOR:
            raise NumericalError(f"Wasserstein-2 computation produced {value}")
        value = 0.0
    return value


def cost_matrix(gmm_s: GmmModel, gmm_t: GmmModel) -> CostMatrix:
    """Pairwise squared W2 costs between source and target components."""
    if gmm_s.dim != gmm_t.dim:
        raise ValueError(f"domain dims differ: {gmm_s.dim} vs {gmm_t.dim}")
    values = np.array(
        [[w2_gaussian(cs, ct) for ct in gmm_t.components] for cs in gmm_s.components]
    )
    return CostMatrix(values)


def default_epsilon(cost: CostMatrix) -> float:
    """Regularization default: 5% of the largest cost (floor for all-zero costs)."""
    top = float(cost.values.max())
    return 0.05 * top if top > 0 else 1e-3


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    peak = a.max(axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - peak), axis=axis)) + np.squeeze(peak, axis=axis)
    return out


def sinkhorn(
    cost: CostMatrix, epsilon: float, max_iter: int = 10_000, tol: float = 1e-9
) -> TransportPlan:
    """Entropic OT with uniform marginals, solved by log-domain Sinkhorn.

    Iterates dual potential updates until the summed worst-case row and
    column marginal violations drop below `tol`.  Stopping at `max_iter`
    with violations still above 100*tol raises NumericalError.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    c = cost.values
    m, n = c.shape
    log_a = np.full(m, -np.log(m))
    log_b = np.full(n, -np.log(n))
    neg_c = -c / epsilon
    f = np.zeros(m)  # dual potentials divided by epsilon
    g = np.zeros(n)

    def plan_and_error(f, g) -> tuple[np.ndarray, float]:
        plan = np.exp(f[:, None] + g[None, :] + neg_c)
        row_err = float(np.max(np.abs(plan.sum(axis=1) - 1.0 / m)))
        col_err = float(np.max(np.abs(plan.sum(axis=0) - 1.0 / n)))
        return plan, row_err + col_err

    iterations = 0
    for iterations in range(1, max_iter + 1):
        f = log_a - _logsumexp(g[None, :] + neg_c, axis=1)
        g = log_b - _logsumexp(f[:, None] + neg_c, axis=0)
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            raise NumericalError(
                "Sinkhorn potentials left the finite range; "
                "epsilon is too small for this cost scale, increase it"
            )
        plan, err = plan_and_error(f, g)
        if err < tol:
            return TransportPlan(plan, epsilon, iterations, err)

    plan, err = plan_and_error(f, g)
    if err > 100.0 * tol:
        raise NumericalError(
            f"Sinkhorn did not converge: marginal violation {err:.3e} after "
            f"{max_iter} iterations (tol {tol:.1e}, epsilon {epsilon:.3e}, shape {m}x{n})"
        )
    return TransportPlan(plan, epsilon, iterations, err)


def transfer_weights(w_s: PreferenceWeights, plan: TransportPlan) -> PreferenceWeights:
    """Carry source-component weights to target components through the plan.

    Uses the row-normalized plan, i.e. the source-weight/target-component
    product rescaled by m (rows of a converged plan sum to 1/m), so the
    output is again a simplex vector.
    """
    m, _ = plan.shape
    if len(w_s) != m:
        raise ValueError(f"weight length {len(w_s)} != plan rows {m}")
    row_sums = plan.values.sum(axis=1, keepdims=True)
    if np.any(row_sums <= 0):
        raise ValueError("transport plan has an empty row; cannot normalize")
    w_t = w_s.values @ (plan.values / row_sums)
    total = float(w_t.sum())
    if abs(total - 1.0) > 1e-12:  # roundoff guard; exact inputs pass through untouched
        w_t = w_t / total
    return PreferenceWeights(w_t)


# --------------------------------------------------------------------------
# JSON serialization
# --------------------------------------------------------------------------


def plan_to_json(plan: TransportPlan) -> dict:
    m, n = plan.shape
    return {
        "rows": m,
        "cols": n,
        "epsilon": plan.epsilon,
        "iterations": plan.iterations,
        "marginal_error": plan.marginal_error,
        "values": plan.values.tolist(),
    }


def plan_from_json(doc: dict) -> TransportPlan:
    values = np.array(doc["values"], dtype=np.float64).reshape(doc["rows"], doc["cols"])
    return TransportPlan(values, doc["epsilon"], doc["iterations"], doc["marginal_error"])


def cost_to_json(cost: CostMatrix) -> dict:
    m, n = cost.shape
    return {"rows": m, "cols": n, "values": cost.values.tolist()}


def cost_from_json(doc: dict) -> CostMatrix:
    return CostMatrix(np.array(doc["values"], dtype=np.float64).reshape(doc["rows"], doc["cols"]))


def save_plan(plan: TransportPlan, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(plan_to_json(plan), fh)
        fh.write("\n")


def load_plan(path: str | Path) -> TransportPlan:
    with open(path, encoding="utf-8") as fh:
        return plan_from_json(json.load(fh))
