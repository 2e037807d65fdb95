"""Pipeline orchestration: configuration, staged commands, artifacts, metrics.

Each command reads a flat `key = value` config file, consumes the artifacts
of earlier stages from a fixed directory layout, and writes its own.  Every
command is deterministic given config + seed; per-stage RNG streams are
derived from the single seed with numpy SeedSequence so stages do not share
random state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autoencoder as ae
from . import data_model as dm
from . import gmm as gm
from . import neural_core as nc
from . import preference as pref
from . import transport as tp
from .errors import ConfigError, DataFormatError

DOMAINS = ("source", "target")

# Per-stage RNG streams, combined with the config seed via SeedSequence.
STREAM_SPLIT = 0
STREAM_AUTOENCODER = 1
STREAM_GMM = {"source": 2, "target": 3}
STREAM_TRAIN = {"source": 4, "target": 5}
STREAM_TRAIN_HOLDOUT = {"source": 6, "target": 7}


def derive_seed(seed: int, stream: int) -> int:
    """Deterministic per-stage sub-seed from the single pipeline seed."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, dtype=np.uint64)[0])


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

DATA_KEYS = (
    "data.source_users",
    "data.source_items",
    "data.target_users",
    "data.target_items",
    "data.source_interactions",
    "data.target_interactions",
)


@dataclass
class PipelineConfig:
    seed: int
    artifacts_dir: Path
    data: dict[str, Path] = field(default_factory=dict)
    autoencoder: ae.AutoencoderConfig = field(default_factory=ae.AutoencoderConfig)
    gmm_k: int | None = None
    gmm_k_candidates: list[int] | None = None
    gmm: gm.GmmConfig = field(default_factory=gm.GmmConfig)
    train: pref.TrainConfig = field(default_factory=pref.TrainConfig)
    train_holdout_fraction: float = 0.1  # source-domain early-stop carve-out
    sinkhorn_epsilon: float | None = None  # None = 5% of max cost
    sinkhorn_max_iter: int = 10_000
    sinkhorn_tol: float = 1e-9

    def data_path(self, key: str) -> Path:
        short = f"data.{key}" if not key.startswith("data.") else key
        if short not in self.data:
            raise ConfigError(f"missing config key {short}")
        path = self.data[short]
        if not path.exists():
            raise ConfigError(f"{short}: file not found: {path}")
        return path


def _parse_kv_lines(text: str, path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ConfigError(f"{path}:{lineno}: empty key or value")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _take_int(raw: Mapping[str, str], key: str, default: int) -> int:
    if key not in raw:
        return default
    try:
        return int(raw[key])
    except ValueError:
        raise ConfigError(f"{key}: expected integer, got {raw[key]!r}") from None


def _take_float(raw: Mapping[str, str], key: str, default: float) -> float:
    if key not in raw:
        return default
    try:
        return float(raw[key])
    except ValueError:
        raise ConfigError(f"{key}: expected number, got {raw[key]!r}") from None


def parse_config(path: str | Path, seed_override: int | None = None) -> PipelineConfig:
    """Parse the flat `key = value` config file; unknown keys are rejected."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = _parse_kv_lines(path.read_text(encoding="utf-8"), str(path))

    known = {"seed", "artifacts_dir", *DATA_KEYS}
    ae_keys = {
        f"autoencoder.{f}": f
        for f in (
            "input_dim",
            "hidden_dim",
            "code_dim",
            "epochs",
            "batch_size",
            "learning_rate",
            "holdout_fraction",
            "patience",
        )
    }
    known |= set(ae_keys)
    known |= {"gmm.k", "gmm.k_candidates", "gmm.max_iter", "gmm.tol", "gmm.n_init"}
    known |= {
        "train.epochs",
        "train.batch_size",
        "train.learning_rate",
        "train.patience",
        "train.restarts",
        "train.holdout_fraction",
    }
    known |= {"sinkhorn.epsilon", "sinkhorn.max_iter", "sinkhorn.tol"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    if seed_override is not None:
        seed = seed_override
    elif "seed" in raw:
        seed = _take_int(raw, "seed", 0)
    else:
        raise ConfigError("missing config key seed")
    if "artifacts_dir" not in raw:
        raise ConfigError("missing config key artifacts_dir")

    data = {k: Path(raw[k]) for k in DATA_KEYS if k in raw}

    ae_config = ae.AutoencoderConfig(
        input_dim=_take_int(raw, "autoencoder.input_dim", 768),
        hidden_dim=_take_int(raw, "autoencoder.hidden_dim", 768),
        code_dim=_take_int(raw, "autoencoder.code_dim", 128),
        epochs=_take_int(raw, "autoencoder.epochs", 200),
        batch_size=_take_int(raw, "autoencoder.batch_size", 256),
        learning_rate=_take_float(raw, "autoencoder.learning_rate", 1e-3),
        holdout_fraction=_take_float(raw, "autoencoder.holdout_fraction", 0.1),
        patience=_take_int(raw, "autoencoder.patience", 10),
    )

    gmm_k = _take_int(raw, "gmm.k", 0) or None
    candidates = None
    if "gmm.k_candidates" in raw:
        try:
            candidates = [int(x) for x in raw["gmm.k_candidates"].split(",")]
        except ValueError:
            raise ConfigError(
                f"gmm.k_candidates: expected comma-separated integers, got {raw['gmm.k_candidates']!r}"
            ) from None
    if gmm_k is not None and candidates is not None:
        raise ConfigError("set either gmm.k or gmm.k_candidates, not both")

    epsilon: float | None = None
    if "sinkhorn.epsilon" in raw and raw["sinkhorn.epsilon"] != "auto":
        epsilon = _take_float(raw, "sinkhorn.epsilon", 0.0)
        if epsilon <= 0:
            raise ConfigError(f"sinkhorn.epsilon must be positive or 'auto', got {epsilon}")

    return PipelineConfig(
        seed=seed,
        artifacts_dir=Path(raw["artifacts_dir"]),
        data=data,
        autoencoder=ae_config,
        gmm_k=gmm_k,
        gmm_k_candidates=candidates,
        gmm=gm.GmmConfig(
            max_iter=_take_int(raw, "gmm.max_iter", 300),
            tol=_take_float(raw, "gmm.tol", 1e-5),
            n_init=_take_int(raw, "gmm.n_init", 4),
        ),
        train=pref.TrainConfig(
            epochs=_take_int(raw, "train.epochs", 200),
            batch_size=_take_int(raw, "train.batch_size", 256),
            learning_rate=_take_float(raw, "train.learning_rate", 1e-3),
            patience=_take_int(raw, "train.patience", 10),
            restarts=_take_int(raw, "train.restarts", 3),
        ),
        train_holdout_fraction=_take_float(raw, "train.holdout_fraction", 0.1),
        sinkhorn_epsilon=epsilon,
        sinkhorn_max_iter=_take_int(raw, "sinkhorn.max_iter", 10_000),
        sinkhorn_tol=_take_float(raw, "sinkhorn.tol", 1e-9),
    )


# --------------------------------------------------------------------------
# Artifact layout
# --------------------------------------------------------------------------


def artifact_paths(artifacts_dir: Path) -> dict[str, Path]:
    d = Path(artifacts_dir)
    paths = {
        "split_dir": d / "split",
        "autoencoder": d / "autoencoder.json",
        "cost_matrix": d / "cost_matrix.json",
        "transport": d / "transport.json",
        "predictions": d / "predictions.csv",
        "evaluation": d / "evaluation.json",
    }
    for domain in DOMAINS:
        paths[f"encoded_{domain}_users"] = d / "encoded" / f"{domain}_users.dupe"
        paths[f"encoded_{domain}_items"] = d / "encoded" / f"{domain}_items.dupe"
        paths[f"gmm_{domain}"] = d / f"gmm_{domain}.json"
        paths[f"domain_{domain}"] = d / f"domain_{domain}.json"
        paths[f"w_learner_{domain}"] = d / f"w_learner_{domain}.json"
        paths[f"r_predictor_{domain}"] = d / f"r_predictor_{domain}.json"
    return paths


def _require_artifacts(paths: dict[str, Path], names: Sequence[str], command: str) -> None:
    missing = [str(paths[n]) for n in names if not paths[n].exists()]
    if missing:
        raise DataFormatError(
            f"{command}: missing upstream artifacts: {', '.join(missing)}; "
            "run the earlier pipeline stages first"
        )


def _write_json(doc: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_domain_dataset(config: PipelineConfig, domain: str) -> dm.DomainDataset:
    users = dm.load_embeddings(config.data_path(f"{domain}_users"))
    items = dm.load_embeddings(config.data_path(f"{domain}_items"))
    interactions = dm.load_interactions(config.data_path(f"{domain}_interactions"))
    dataset = dm.DomainDataset(users, items, interactions)
    dataset.validate()
    return dataset


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_split(config: PipelineConfig) -> Path:
    """Build and write the cross-domain train/valid/test split."""
    source = _load_domain_dataset(config, "source")
    target = _load_domain_dataset(config, "target")
    split = dm.make_cross_domain_split(source, target, derive_seed(config.seed, STREAM_SPLIT))
    out = artifact_paths(config.artifacts_dir)["split_dir"]
    dm.write_split(split, out)
    return out


def cmd_train_ae(config: PipelineConfig) -> Path:
    """Train the shared autoencoder on all four tables, then encode them."""
    tables = [
        dm.load_embeddings(config.data_path(key))
        for key in ("source_users", "source_items", "target_users", "target_items")
    ]
    params, history = ae.train_autoencoder(
        tables, config.autoencoder, derive_seed(config.seed, STREAM_AUTOENCODER)
    )
    final_loss = ae.reconstruction_loss(params, np.vstack([t.matrix() for t in tables if len(t)]))
    paths = artifact_paths(config.artifacts_dir)
    paths["autoencoder"].parent.mkdir(parents=True, exist_ok=True)
    ae.save_autoencoder(
        params,
        paths["autoencoder"],
        manifest={
            "input_dim": config.autoencoder.input_dim,
            "hidden_dim": config.autoencoder.hidden_dim,
            "code_dim": config.autoencoder.code_dim,
            "seed": config.seed,
            "epochs_run": len(history.epoch_losses),
            "best_epoch": history.best_epoch,
            "final_reconstruction_loss": final_loss,
        },
    )
    cmd_encode(config)
    return paths["autoencoder"]


def cmd_encode(config: PipelineConfig) -> list[Path]:
    """Encode all four raw tables with the stored autoencoder."""
    paths = artifact_paths(config.artifacts_dir)
    _require_artifacts(paths, ["autoencoder"], "encode")
    params, _ = ae.load_autoencoder(paths["autoencoder"])
    written = []
    for domain in DOMAINS:
        for kind in ("users", "items"):
            table = dm.load_embeddings(config.data_path(f"{domain}_{kind}"))
            encoded = ae.encode(params, table)
            out = paths[f"encoded_{domain}_{kind}"]
            out.parent.mkdir(parents=True, exist_ok=True)
            dm.save_embeddings(encoded, out)
            written.append(out)
    return written


def cmd_fit_gmm(config: PipelineConfig, domain: str) -> Path:
    """Fit the domain's Gaussian components on its encoded item embeddings."""
    if domain not in DOMAINS:
        raise ConfigError(f"domain must be one of {DOMAINS}, got {domain!r}")
    paths = artifact_paths(config.artifacts_dir)
    _require_artifacts(paths, [f"encoded_{domain}_items"], "fit-gmm")
    items = dm.load_embeddings(paths[f"encoded_{domain}_items"])
    points = items.matrix()
    seed = derive_seed(config.seed, STREAM_GMM[domain])
    if config.gmm_k_candidates:
        _, model = gm.select_k_bic(points, config.gmm_k_candidates, seed, config.gmm)
    elif config.gmm_k:
        model = gm.fit_gmm_em(points, config.gmm_k, seed, config.gmm)
    else:
        raise ConfigError("set gmm.k or gmm.k_candidates to fit a mixture")
    gm.save_model(model, paths[f"gmm_{domain}"])
    return paths[f"gmm_{domain}"]


def _split_for_training(
    config: PipelineConfig, domain: str, split: dm.CrossDomainSplit
) -> tuple[list[dm.InteractionRecord], list[dm.InteractionRecord]]:
    if domain == "target":
        return list(split.train_target), list(split.valid)
    # The split holds out no source interactions, so carve a seeded slice of
    # the source train set for early stopping.
    records = list(split.train_source)
    rng = np.random.default_rng(derive_seed(config.seed, STREAM_TRAIN_HOLDOUT[domain]))
    n_valid = int(np.floor(config.train_holdout_fraction * len(records)))
    order = rng.permutation(len(records))
    valid_idx = set(order[:n_valid].tolist())
    train = [r for i, r in enumerate(records) if i not in valid_idx]
    valid = [r for i, r in enumerate(records) if i in valid_idx]
    return train, valid


def cmd_train_domain(config: PipelineConfig, domain: str) -> Path:
    """Train the domain's w-learner and r-predictor on the split's train data."""
    if domain not in DOMAINS:
        raise ConfigError(f"domain must be one of {DOMAINS}, got {domain!r}")
    paths = artifact_paths(config.artifacts_dir)
    _require_artifacts(
        paths,
        [f"encoded_{domain}_users", f"encoded_{domain}_items", f"gmm_{domain}", "split_dir"],
        "train-domain",
    )
    users = dm.load_embeddings(paths[f"encoded_{domain}_users"])
    items = dm.load_embeddings(paths[f"encoded_{domain}_items"])
    model_gmm = gm.load_model(paths[f"gmm_{domain}"])
    split = dm.read_split(paths["split_dir"])
    train, valid = _split_for_training(config, domain, split)
    dataset = dm.DomainDataset(users, items, train + valid)
    model, history = pref.train_domain(
        dataset,
        model_gmm,
        train,
        valid,
        config.train,
        derive_seed(config.seed, STREAM_TRAIN[domain]),
    )
    nc.save_params(model.w_learner, paths[f"w_learner_{domain}"])
    nc.save_params(model.r_predictor, paths[f"r_predictor_{domain}"])
    _write_json(
        {
            "gmm": paths[f"gmm_{domain}"].name,
            "w_learner": paths[f"w_learner_{domain}"].name,
            "r_predictor": paths[f"r_predictor_{domain}"].name,
            "metadata": {
                "seed": config.seed,
                "epochs_run": len(history.epoch_losses),
                "best_epoch": history.best_epoch,
                "best_valid_rmse": history.best_valid_rmse,
                "train_size": len(train),
                "valid_size": len(valid),
            },
        },
        paths[f"domain_{domain}"],
    )
    return paths[f"domain_{domain}"]


def load_domain_model(config: PipelineConfig, domain: str) -> pref.DomainModel:
    paths = artifact_paths(config.artifacts_dir)
    _require_artifacts(
        paths,
        [f"domain_{domain}", f"gmm_{domain}", f"w_learner_{domain}", f"r_predictor_{domain}"],
        "load-domain",
    )
    return pref.DomainModel(
        gm.load_model(paths[f"gmm_{domain}"]),
        nc.load_params(paths[f"w_learner_{domain}"]),
        nc.load_params(paths[f"r_predictor_{domain}"]),
    )


def cmd_transport(config: PipelineConfig) -> Path:
    """Compute the component cost matrix and solve for the transport plan."""
    paths = artifact_paths(config.artifacts_dir)
    _require_artifacts(paths, ["gmm_source", "gmm_target"], "transport")
    gmm_s = gm.load_model(paths["gmm_source"])
    gmm_t = gm.load_model(paths["gmm_target"])
    cost = tp.cost_matrix(gmm_s, gmm_t)
    with open(paths["cost_matrix"], "w", encoding="utf-8") as fh:
        json.dump(tp.cost_to_json(cost), fh)
        fh.write("\n")
    epsilon = config.sinkhorn_epsilon or tp.default_epsilon(cost)
    plan = tp.sinkhorn(cost, epsilon, config.sinkhorn_max_iter, config.sinkhorn_tol)
    tp.save_plan(plan, paths["transport"])
    return paths["transport"]


def cmd_predict(config: PipelineConfig) -> Path:
    """Predict target-domain test ratings for source-domain users."""
    paths = artifact_paths(config.artifacts_dir)
    _require_artifacts(
        paths,
        [
            "split_dir",
            "encoded_source_users",
            "encoded_target_items",
            "transport",
            "domain_source",
            "domain_target",
        ],
        "predict",
    )
    split = dm.read_split(paths["split_dir"])
    source_users = dm.load_embeddings(paths["encoded_source_users"])
    target_items = dm.load_embeddings(paths["encoded_target_items"])
    source_model = load_domain_model(config, "source")
    target_model = load_domain_model(config, "target")
    plan = tp.load_plan(paths["transport"])

    transferred: dict[str, pref.PreferenceWeights] = {}
    for rec in split.test:
        if rec.user_id not in transferred:
            w_s = pref.user_weights(source_model, source_users.vector(rec.user_id))
            transferred[rec.user_id] = tp.transfer_weights(w_s, plan)

    item_codes = {rec.item_id: target_items.vector(rec.item_id) for rec in split.test}
    lines = ["user_id,item_id,rating,prediction"]
    for rec in split.test:
        pred = pref.predict_rating(target_model, transferred[rec.user_id], item_codes[rec.item_id])
        lines.append(f"{rec.user_id},{rec.item_id},{rec.rating!r},{pred:.6g}")
    paths["predictions"].parent.mkdir(parents=True, exist_ok=True)
    paths["predictions"].write_text("\n".join(lines) + "\n", encoding="utf-8")
    return paths["predictions"]


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    rmse: float
    mae: float
    count: int
    per_user: dict[str, dict[str, float]] | None = None

    def __post_init__(self):
        if self.rmse < 0 or self.mae < 0 or self.count < 1:
            raise ValueError("invalid evaluation report")
        if self.mae > self.rmse * (1.0 + 1e-12) + 1e-15:
            raise ValueError(f"MAE {self.mae} exceeds RMSE {self.rmse}")


def evaluate(
    predictions: Mapping[tuple[str, str], float],
    truth: Mapping[tuple[str, str], float],
    per_user: bool = False,
) -> EvalReport:
    """RMSE and MAE over exactly-matching (user, item) keys."""
    if not predictions:
        raise ValueError("no predictions to evaluate")
    if set(predictions) != set(truth):
        missing = sorted(set(truth) - set(predictions))[:3]
        extra = sorted(set(predictions) - set(truth))[:3]
        raise DataFormatError(
            f"prediction/truth key mismatch (missing {missing}, unexpected {extra})"
        )
    keys = list(predictions)
    errs = np.array([predictions[k] - truth[k] for k in keys])
    report = EvalReport(
        rmse=float(np.sqrt(np.mean(errs**2))),
        mae=float(np.mean(np.abs(errs))),
        count=len(keys),
    )
    if per_user:
        by_user: dict[str, list[float]] = {}
        for (user, _), err in zip(keys, errs):
            by_user.setdefault(user, []).append(float(err))
        report.per_user = {
            u: {
                "rmse": float(np.sqrt(np.mean(np.square(v)))),
                "mae": float(np.mean(np.abs(v))),
                "count": len(v),
            }
            for u, v in sorted(by_user.items())
        }
    return report


def load_predictions_csv(path: Path) -> tuple[dict[tuple[str, str], float], dict[tuple[str, str], float]]:
    """Read a predictions file into (predictions, embedded truth) keyed maps."""
    if not path.exists():
        raise DataFormatError(f"missing predictions file {path}")
    preds: dict[tuple[str, str], float] = {}
    truth: dict[tuple[str, str], float] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "user_id,item_id,rating,prediction":
            raise DataFormatError(f"{path}: unexpected header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 fields")
            key = (parts[0], parts[1])
            if key in preds:
                raise DataFormatError(f"{path}:{lineno}: duplicate (user, item) pair {key}")
            try:
                truth[key] = float(parts[2])
                preds[key] = float(parts[3])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad number") from None
    return preds, truth


def cmd_evaluate(config: PipelineConfig, per_user: bool = False) -> EvalReport:
    """Score the predictions file against the split's test ratings."""
    paths = artifact_paths(config.artifacts_dir)
    _require_artifacts(paths, ["predictions", "split_dir"], "evaluate")
    preds, embedded_truth = load_predictions_csv(paths["predictions"])
    split = dm.read_split(paths["split_dir"])
    truth: dict[tuple[str, str], float] = {}
    for rec in split.test:
        key = (rec.user_id, rec.item_id)
        if key in truth:
            raise DataFormatError(f"test split has duplicate (user, item) pair {key}")
        truth[key] = rec.rating
    for key, rating in embedded_truth.items():
        if key in truth and abs(truth[key] - rating) > 1e-9:
            raise DataFormatError(f"prediction file rating disagrees with split for {key}")
    report = evaluate(preds, truth, per_user=per_user)
    doc = {"rmse": report.rmse, "mae": report.mae, "count": report.count}
    if report.per_user is not None:
        doc["per_user"] = report.per_user
    _write_json(doc, paths["evaluation"])
    return report
