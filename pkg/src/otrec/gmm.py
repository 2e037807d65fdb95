"""Full-covariance Gaussian mixtures fitted by EM on item embeddings.

Each domain gets one mixture whose components are shared by all of that
domain's users; downstream, per-user simplex weights re-mix the components,
so the EM mixing weights matter only for likelihoods and BIC.  Densities
and Mahalanobis distances go through a cached Cholesky factor; covariance
matrices are regularized after every M-step to stay SPD.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import logsumexp

from .errors import NumericalError

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianComponent:
    """Gaussian with full SPD covariance plus cached Cholesky factor."""

    mean: np.ndarray
    covariance: np.ndarray
    chol: np.ndarray = field(init=False)  # lower-triangular L with L L^T = covariance
    log_det: float = field(init=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        d = mean.shape[0]
        if mean.ndim != 1 or cov.shape != (d, d):
            raise ValueError(f"shape mismatch: mean {mean.shape}, covariance {cov.shape}")
        if not np.allclose(cov, cov.T, atol=1e-9, rtol=0.0):
            raise ValueError("covariance must be symmetric within 1e-9")
        try:
            chol = cholesky(cov, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"covariance not positive definite: {exc}") from None
        mean.setflags(write=False)
        cov.setflags(write=False)
        chol.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "log_det", float(2.0 * np.sum(np.log(np.diag(chol)))))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class GmmModel:
    components: tuple[GaussianComponent, ...]
    mixing_weights: np.ndarray
    fit_log_likelihood: float  # total (summed over points) at convergence
    seed: int | None = None
    n_iter: int = 0
    mean_ll_trace: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.components:
            raise ValueError("mixture needs at least one component")
        w = np.asarray(self.mixing_weights, dtype=np.float64)
        if w.shape != (len(self.components),):
            raise ValueError("one mixing weight per component required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixing weights must be a probability simplex (sum 1 +- 1e-9)")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise ValueError("all components must share one dimension")
        w.setflags(write=False)
        self.mixing_weights = w

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim


@dataclass
class GmmConfig:
    max_iter: int = 300
    tol: float = 1e-5  # stop when mean log-likelihood improves by less
    n_init: int = 4
    reg_scale: float = 1e-6  # times mean diagonal, added to every covariance


def _maha_batch(component: GaussianComponent, points: np.ndarray) -> np.ndarray:
    """Squared Mahalanobis distances for an (n, d) batch via Cholesky solve."""
    diff = points - component.mean
    y = solve_triangular(component.chol, diff.T, lower=True, check_finite=False)
    return np.sum(y**2, axis=0)


def mahalanobis_sq(component: GaussianComponent, x: np.ndarray) -> float:
    """(x - mu)^T Sigma^-1 (x - mu), never through an explicit inverse."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (component.dim,):
        raise ValueError(f"point shape {x.shape} != ({component.dim},)")
    return float(_maha_batch(component, x[None, :])[0])


def component_log_density(component: GaussianComponent, x: np.ndarray) -> float:
    """log N(x; mu, Sigma) = -0.5 (d ln 2pi + ln|Sigma| + Mahalanobis^2)."""
    maha = mahalanobis_sq(component, x)
    return -0.5 * (component.dim * LOG_2PI + component.log_det + maha)


def _log_density_matrix(model: GmmModel, points: np.ndarray) -> np.ndarray:
    """(n, K) matrix of per-component log densities."""
    cols = []
    for comp in model.components:
        maha = _maha_batch(comp, points)
        cols.append(-0.5 * (comp.dim * LOG_2PI + comp.log_det + maha))
    return np.stack(cols, axis=1)


def _as_points(points, dim: int | None = None) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("points must be a non-empty (n, d) array")
    if dim is not None and pts.shape[1] != dim:
        raise ValueError(f"points have dim {pts.shape[1]}, model has dim {dim}")
    return pts


def e_step(model: GmmModel, points) -> tuple[np.ndarray, float]:
    """Responsibilities (row-stochastic, (n, K)) and the dataset mean log-likelihood."""
    pts = _as_points(points, model.dim)
    log_dens = _log_density_matrix(model, pts)
    with np.errstate(divide="ignore"):  # zero weights contribute -inf, i.e. exclusion
        log_w = np.log(model.mixing_weights)
    weighted = log_dens + log_w
    norm = logsumexp(weighted, axis=1)
    resp = np.exp(weighted - norm[:, None])
    return resp, float(np.mean(norm))


def log_likelihood(model: GmmModel, points) -> float:
    """Total log-likelihood sum_x log sum_k pi_k N(x; mu_k, Sigma_k), via log-sum-exp."""
    pts = _as_points(points, model.dim)
    log_dens = _log_density_matrix(model, pts)
    with np.errstate(divide="ignore"):
        log_w = np.log(model.mixing_weights)
    return float(np.sum(logsumexp(log_dens + log_w, axis=1)))


def _regularize(cov: np.ndarray, reg_scale: float) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    mean_diag = float(np.mean(np.diag(cov)))
    if mean_diag <= 0.0 or not np.isfinite(mean_diag):
        raise NumericalError("degenerate covariance: zero or non-finite diagonal")
    return cov + (reg_scale * mean_diag) * np.eye(cov.shape[0])


def _kmeans_pp_centers(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    for _ in range(k - 1):
        d2 = np.min(
            [np.sum((points - c) ** 2, axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0.0:
            centers.append(points[rng.integers(n)])
        else:
            centers.append(points[rng.choice(n, p=d2 / total)])
    return np.array(centers)


def _init_model(points: np.ndarray, k: int, rng: np.random.Generator, reg_scale: float) -> GmmModel:
    n, d = points.shape
    centers = _kmeans_pp_centers(points, k, rng)
    dist = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    labels = np.argmin(dist, axis=1)
    overall_cov = np.cov(points, rowvar=False, bias=True).reshape(d, d)

    comps, weights = [], []
    for j in range(k):
        members = points[labels == j]
        if members.shape[0] == 0:
            mean, cov, count = centers[j], overall_cov, 1
        else:
            mean = members.mean(axis=0)
            count = members.shape[0]
            cov = overall_cov
            if count >= 2:
                member_cov = np.cov(members, rowvar=False, bias=True).reshape(d, d)
                if np.mean(np.diag(member_cov)) > 0:
                    cov = member_cov
        comps.append(GaussianComponent(mean, _regularize(cov, reg_scale)))
        weights.append(count)
    w = np.asarray(weights, dtype=np.float64)
    return GmmModel(tuple(comps), w / w.sum(), fit_log_likelihood=-np.inf)


def _m_step(points: np.ndarray, resp: np.ndarray, reg_scale: float) -> GmmModel:
    n, d = points.shape
    nk = resp.sum(axis=0) + 10.0 * np.finfo(np.float64).eps
    weights = nk / nk.sum()
    means = (resp.T @ points) / nk[:, None]
    comps = []
    for j in range(resp.shape[1]):
        diff = points - means[j]
        cov = (resp[:, j] * diff.T) @ diff / nk[j]
        comps.append(GaussianComponent(means[j], _regularize(cov, reg_scale)))
    return GmmModel(tuple(comps), weights, fit_log_likelihood=-np.inf)


def _fit_single(points: np.ndarray, k: int, seed: int, config: GmmConfig) -> GmmModel:
    rng = np.random.default_rng(seed)
    model = _init_model(points, k, rng, config.reg_scale)
    trace: list[float] = []
    prev = -np.inf
    n_iter = 0
    for n_iter in range(1, config.max_iter + 1):
        resp, mean_ll = e_step(model, points)
        model = _m_step(points, resp, config.reg_scale)
        trace.append(mean_ll)
        if mean_ll - prev < config.tol and np.isfinite(prev):
            break
        prev = mean_ll
    total = log_likelihood(model, points)
    return GmmModel(
        model.components,
        model.mixing_weights,
        fit_log_likelihood=total,
        seed=seed,
        n_iter=n_iter,
        mean_ll_trace=tuple(trace),
    )


def fit_gmm_em(points, k: int, seed: int, config: GmmConfig | None = None) -> GmmModel:
    """Fit a K-component full-covariance GMM by EM from k-means++ starts.

    Runs `config.n_init` seed-isolated restarts and keeps the best final
    likelihood.  Deterministic for a fixed seed.
    """
    config = config or GmmConfig()
    pts = _as_points(points)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > pts.shape[0]:
        raise ValueError(f"k={k} exceeds number of points ({pts.shape[0]})")
    restart_seeds = np.random.default_rng(seed).integers(0, 2**63 - 1, size=config.n_init)
    best = None
    for s in restart_seeds:
        candidate = _fit_single(pts, k, int(s), config)
        if best is None or candidate.fit_log_likelihood > best.fit_log_likelihood:
            best = candidate
    assert best is not None
    return GmmModel(
        best.components,
        best.mixing_weights,
        best.fit_log_likelihood,
        seed=seed,
        n_iter=best.n_iter,
        mean_ll_trace=best.mean_ll_trace,
    )


def n_parameters(k: int, d: int) -> int:
    """Free parameters of a K-component full-covariance GMM in d dimensions."""
    return (k - 1) + k * d + k * (d * (d + 1)) // 2


def bic(model: GmmModel, points) -> float:
    """Bayesian Information Criterion: -2 logL + p ln(n), lower is better."""
    pts = _as_points(points, model.dim)
    p = n_parameters(model.k, model.dim)
    return -2.0 * log_likelihood(model, pts) + p * np.log(pts.shape[0])


def select_k_bic(
    points, candidate_ks: Sequence[int], seed: int, config: GmmConfig | None = None
) -> tuple[int, GmmModel]:
    """Fit every candidate component count and return the BIC minimizer."""
    if not candidate_ks:
        raise ValueError("candidate_ks must be non-empty")
    pts = _as_points(points)
    best_k, best_model, best_bic = None, None, np.inf
    for k in candidate_ks:
        model = fit_gmm_em(pts, k, seed, config)
        score = bic(model, pts)
        if score < best_bic:
            best_k, best_model, best_bic = k, model, score
    assert best_model is not None and best_k is not None
    return best_k, best_model


# --------------------------------------------------------------------------
# JSON serialization
# --------------------------------------------------------------------------


def model_to_json(model: GmmModel) -> dict:
    return {
        "dim": model.dim,
        "k": model.k,
        "weights": model.mixing_weights.tolist(),
        "means": [c.mean.tolist() for c in model.components],
        "covariances": [c.covariance.tolist() for c in model.components],
        "metadata": {
            "seed": model.seed,
            "n_iter": model.n_iter,
            "fit_log_likelihood": model.fit_log_likelihood,
            "mean_ll_trace": list(model.mean_ll_trace),
        },
    }


def model_from_json(doc: dict) -> GmmModel:
    comps = tuple(
        GaussianComponent(np.array(m, dtype=np.float64), np.array(c, dtype=np.float64))
        for m, c in zip(doc["means"], doc["covariances"])
    )
    meta = doc.get("metadata", {})
    return GmmModel(
        comps,
        np.array(doc["weights"], dtype=np.float64),
        fit_log_likelihood=meta.get("fit_log_likelihood", float("nan")),
        seed=meta.get("seed"),
        n_iter=meta.get("n_iter", 0),
        mean_ll_trace=tuple(meta.get("mean_ll_trace", ())),
    )


def save_model(model: GmmModel, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_json(model), fh)
        fh.write("\n")


def load_model(path: str | Path) -> GmmModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_json(json.load(fh))
