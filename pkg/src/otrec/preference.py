"""Per-domain supervised stage: user weights over shared Gaussian components
and rating prediction from weighted component evidence.

The w-learner maps a user's reduced embedding to simplex weights (softmax
head); the r-predictor maps the user-weighted vector of component densities
to a rating.  Gaussian parameters stay frozen; only the two MLPs train,
jointly, under MSE rating loss.  Raw densities in high dimension underflow,
so each item's per-component log densities are shifted by their maximum
before exponentiation, preserving relative evidence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import neural_core as nc
from .data_model import DomainDataset, InteractionRecord, RATING_MAX, RATING_MIN
from .errors import NumericalError
from .gmm import GmmModel, _log_density_matrix


@dataclass(frozen=True)
class PreferenceWeights:
    """Nonnegative weights over a domain's Gaussian components, summing to 1."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("weights must be a vector")
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError("weights must lie on the probability simplex (sum 1 +- 1e-9)")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class DomainModel:
    gmm: GmmModel
    w_learner: nc.MlpParams
    r_predictor: nc.MlpParams
    rating_bounds: tuple[float, float] = (RATING_MIN, RATING_MAX)

    def __post_init__(self):
        if self.w_learner.out_dim != self.gmm.k:
            raise ValueError("w_learner must output one weight per Gaussian component")
        if self.r_predictor.in_dim != self.gmm.k:
            raise ValueError("r_predictor must consume one feature per Gaussian component")
        if self.w_learner.in_dim != self.gmm.dim:
            raise ValueError("w_learner input dim must match the mixture dimension")
        if self.r_predictor.out_dim != 1:
            raise ValueError("r_predictor must output a single rating")


def build_domain_model(gmm: GmmModel, rng: np.random.Generator) -> DomainModel:
    """Fresh untrained MLPs for one domain: d -> d -> K softmax, K -> K -> 1 linear."""
    d, k = gmm.dim, gmm.k
    w_learner = nc.init_mlp([d, d, k], ["relu", "softmax"], rng)
    r_predictor = nc.init_mlp([k, k, 1], ["relu", "linear"], rng)
    return DomainModel(gmm, w_learner, r_predictor)


def user_weights(model: DomainModel, z_u: np.ndarray) -> PreferenceWeights:
    """Softmax output of the w-learner for one user embedding."""
    return PreferenceWeights(nc.mlp_forward(model.w_learner, z_u))


def density_features(gmm: GmmModel, item_codes: np.ndarray) -> np.ndarray:
    """Per-item component evidence: exp(log density - row max), shape (n, K).

    The shift by each item's max log density keeps values in (0, 1] and the
    per-item argmax intact even at dimensions where raw densities underflow.
    """
    pts = np.asarray(item_codes, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    log_dens = _log_density_matrix_checked(gmm, pts)
    feats = np.exp(log_dens - log_dens.max(axis=1, keepdims=True))
    return feats[0] if single else feats


def _log_density_matrix_checked(gmm: GmmModel, pts: np.ndarray) -> np.ndarray:
    if pts.shape[1] != gmm.dim:
        raise ValueError(f"item dim {pts.shape[1]} != mixture dim {gmm.dim}")
    return _log_density_matrix(gmm, pts)


def feature_vector(w: PreferenceWeights, gmm: GmmModel, z_v: np.ndarray) -> np.ndarray:
    """r-predictor input: user weights times max-shifted component densities."""
    if len(w) != gmm.k:
        raise ValueError(f"weight length {len(w)} != component count {gmm.k}")
    return w.values * density_features(gmm, z_v)


def _clamp(x: np.ndarray, bounds: tuple[float, float]) -> np.ndarray:
    return np.clip(x, bounds[0], bounds[1])


def predict_rating(model: DomainModel, w: PreferenceWeights, z_v: np.ndarray) -> float:
    """Predicted rating, clamped to the domain's rating bounds."""
    out = nc.mlp_forward(model.r_predictor, feature_vector(w, model.gmm, z_v))
    return float(_clamp(out, model.rating_bounds)[0])


def predict_ratings_batch(
    model: DomainModel, weights: np.ndarray, item_features: np.ndarray
) -> np.ndarray:
    """Clamped predictions for rows of (weights, precomputed density features)."""
    feats = weights * item_features
    out = nc.mlp_forward(model.r_predictor, feats)[:, 0]
    return _clamp(out, model.rating_bounds)


def rating_loss_and_grads(
    w_learner: nc.MlpParams,
    r_predictor: nc.MlpParams,
    user_codes: np.ndarray,
    item_features: np.ndarray,
    ratings: np.ndarray,
) -> tuple[float, nc.MlpGrads, nc.MlpGrads]:
    """Mean squared rating error on a batch and its gradients for both MLPs.

    `item_features` are the precomputed density features (constant w.r.t.
    parameters since the Gaussians are frozen).  Predictions are unclamped
    here; clamping is an inference-time concern.
    """
    w_mat = nc.mlp_forward(w_learner, user_codes)
    feats = w_mat * item_features
    pred = nc.mlp_forward(r_predictor, feats)[:, 0]
    err = pred - ratings
    loss = float(np.mean(err**2))
    out_grad = (2.0 * err / err.shape[0])[:, None]
    r_grads, feat_grad = nc.mlp_backward(r_predictor, feats, out_grad)
    w_grads, _ = nc.mlp_backward(w_learner, user_codes, feat_grad * item_features)
    return loss, w_grads, r_grads


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    patience: int = 10
    restarts: int = 3  # seed-isolated runs; best validation checkpoint wins


@dataclass
class DomainTrainingHistory:
    epoch_losses: list[float] = field(default_factory=list)
    valid_rmses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_rmse: float = float("inf")
    restart_scores: list[float] = field(default_factory=list)


def train_domain(
    dataset: DomainDataset,
    gmm: GmmModel,
    train: Sequence[InteractionRecord],
    valid: Sequence[InteractionRecord],
    config: TrainConfig,
    seed: int,
) -> tuple[DomainModel, DomainTrainingHistory]:
    """Jointly train the w-learner and r-predictor on one domain's ratings.

    Runs `config.restarts` seed-isolated training runs (narrow relu layers
    occasionally start in a dead configuration) and returns the checkpoint
    with the best monitored RMSE across all of them.  Each run early-stops
    on validation RMSE (clamped predictions); with an empty validation list
    the epoch training loss is monitored instead.
    """
    if config.restarts < 1:
        raise ValueError("restarts must be >= 1")
    restart_seeds = np.random.default_rng(seed).integers(0, 2**63 - 1, size=config.restarts)
    runs = [
        _train_domain_once(dataset, gmm, train, valid, config, int(s))
        for s in restart_seeds
    ]
    scores = [history.best_valid_rmse for _, history in runs]
    # The transfer stage reads the weights as mixture weights, so among
    # validation-tied restarts prefer the one whose users sit closest to the
    # simplex vertices; degenerate magnitude-coded solutions can match the
    # natural one on in-domain RMSE but do not survive transport.
    threshold = min(scores) * 1.1 + 1e-6
    candidates = [i for i, s in enumerate(scores) if s <= threshold]
    user_mat = dataset.users.matrix()
    best_idx = min(
        candidates, key=lambda i: _mean_weight_entropy(runs[i][0], user_mat)
    )
    model, history = runs[best_idx]
    history.restart_scores = scores
    return model, history


def _mean_weight_entropy(model: DomainModel, user_mat: np.ndarray) -> float:
    if user_mat.shape[0] == 0:
        return 0.0
    w = nc.mlp_forward(model.w_learner, user_mat)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, w * np.log(w), 0.0)
    return float(-np.mean(terms.sum(axis=1)))


def _train_domain_once(
    dataset: DomainDataset,
    gmm: GmmModel,
    train: Sequence[InteractionRecord],
    valid: Sequence[InteractionRecord],
    config: TrainConfig,
    seed: int,
) -> tuple[DomainModel, DomainTrainingHistory]:
    if not train:
        raise ValueError("training interaction list is empty")
    dataset.validate()
    if dataset.users.dim != gmm.dim or dataset.items.dim != gmm.dim:
        raise ValueError("embedding tables and mixture must share one dimension")

    rng = np.random.default_rng(seed)
    model = build_domain_model(gmm, rng)
    w_learner, r_predictor = model.w_learner, model.r_predictor
    opt_w = nc.init_adam(w_learner, learning_rate=config.learning_rate)
    opt_r = nc.init_adam(r_predictor, learning_rate=config.learning_rate)

    user_mat = dataset.users.matrix()
    item_feats_all = density_features(gmm, dataset.items.matrix())
    u_index = {uid: i for i, uid in enumerate(dataset.users.ids)}
    v_index = {vid: i for i, vid in enumerate(dataset.items.ids)}

    def prepare(records: Sequence[InteractionRecord]):
        u = np.array([u_index[r.user_id] for r in records], dtype=np.intp)
        v = np.array([v_index[r.item_id] for r in records], dtype=np.intp)
        y = np.array([r.rating for r in records], dtype=np.float64)
        return u, v, y

    tr_u, tr_v, tr_y = prepare(train)
    if valid:
        va_u, va_v, va_y = prepare(valid)

    history = DomainTrainingHistory()
    best = (w_learner, r_predictor)
    stale = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            sel = order[start : start + config.batch_size]
            loss, w_grads, r_grads = rating_loss_and_grads(
                w_learner,
                r_predictor,
                user_mat[tr_u[sel]],
                item_feats_all[tr_v[sel]],
                tr_y[sel],
            )
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite rating loss at epoch {epoch}")
            epoch_loss += loss * len(sel)
            w_learner, opt_w = nc.adam_step(w_learner, w_grads, opt_w)
            r_predictor, opt_r = nc.adam_step(r_predictor, r_grads, opt_r)
        history.epoch_losses.append(epoch_loss / len(train))

        candidate = DomainModel(gmm, w_learner, r_predictor)
        if valid:
            w_mat = nc.mlp_forward(w_learner, user_mat[va_u])
            preds = predict_ratings_batch(candidate, w_mat, item_feats_all[va_v])
            monitor = float(np.sqrt(np.mean((preds - va_y) ** 2)))
        else:
            monitor = history.epoch_losses[-1]
        history.valid_rmses.append(monitor)
        if monitor < history.best_valid_rmse:
            history.best_valid_rmse = monitor
            history.best_epoch = epoch
            best = (w_learner, r_predictor)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return DomainModel(gmm, best[0], best[1]), history
