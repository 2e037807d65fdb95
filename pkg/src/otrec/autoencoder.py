"""Shared dimensionality reduction for high-dimensional review embeddings.

One autoencoder is trained on the pooled union of both domains' user and
item embeddings so that both domains land in a single low-dimensional
space.  Encoder: Dense(in -> hidden) + ReLU, Dense(hidden -> code) linear;
decoder mirrors it.  Loss is mean squared reconstruction error of whole
vectors, minimized by mini-batch Adam with early stopping on a held-out
reconstruction split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import neural_core as nc
from .data_model import EmbeddingTable
from .errors import NumericalError


@dataclass
class AutoencoderConfig:
    input_dim: int = 768
    hidden_dim: int = 768
    code_dim: int = 128
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    holdout_fraction: float = 0.1
    patience: int = 10


@dataclass(frozen=True)
class AutoencoderParams:
    encoder: nc.MlpParams
    decoder: nc.MlpParams

    def __post_init__(self):
        if self.encoder.out_dim != self.decoder.in_dim:
            raise ValueError("encoder output dim must equal decoder input dim")
        if self.encoder.in_dim != self.decoder.out_dim:
            raise ValueError("decoder must reconstruct the encoder's input dim")

    @property
    def input_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def code_dim(self) -> int:
        return self.encoder.out_dim


@dataclass
class TrainingHistory:
    epoch_losses: list[float] = field(default_factory=list)
    holdout_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0


def _pool_tables(tables: Sequence[EmbeddingTable], expected_dim: int) -> np.ndarray:
    if not tables:
        raise ValueError("no embedding tables given")
    mats = []
    for t in tables:
        if t.dim != expected_dim:
            raise ValueError(f"table dim {t.dim} != configured input dim {expected_dim}")
        if len(t):
            mats.append(t.matrix())
    if not mats:
        raise ValueError("pooled embedding union is empty")
    return np.vstack(mats)


def _reconstruct(params: AutoencoderParams, batch: np.ndarray) -> np.ndarray:
    return nc.mlp_forward(params.decoder, nc.mlp_forward(params.encoder, batch))


def reconstruction_loss(params: AutoencoderParams, batch) -> float:
    """Mean over the batch of squared reconstruction error ||e - decode(encode(e))||^2."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    recon = _reconstruct(params, batch)
    return float(np.mean(np.sum((batch - recon) ** 2, axis=1)))


def train_autoencoder(
    pooled: Sequence[EmbeddingTable],
    config: AutoencoderConfig,
    seed: int,
) -> tuple[AutoencoderParams, TrainingHistory]:
    """Fit the shared autoencoder on the pooled tables by mini-batch Adam.

    Returns the best-holdout parameters (falling back to final parameters
    when the pool is too small to hold anything out) and the per-epoch loss
    history.
    """
    data = _pool_tables(pooled, config.input_dim)
    rng = np.random.default_rng(seed)

    n = data.shape[0]
    n_holdout = int(np.floor(config.holdout_fraction * n)) if n >= 2 else 0
    perm = rng.permutation(n)
    holdout = data[perm[:n_holdout]]
    train = data[perm[n_holdout:]]

    encoder = nc.init_mlp(
        [config.input_dim, config.hidden_dim, config.code_dim], ["relu", "linear"], rng
    )
    decoder = nc.init_mlp(
        [config.code_dim, config.hidden_dim, config.input_dim], ["relu", "linear"], rng
    )
    opt_enc = nc.init_adam(encoder, learning_rate=config.learning_rate)
    opt_dec = nc.init_adam(decoder, learning_rate=config.learning_rate)

    history = TrainingHistory()
    best = AutoencoderParams(encoder, decoder)
    best_loss = np.inf
    stale = 0
    for epoch in range(config.epochs):
        order = rng.permutation(train.shape[0])
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = train[order[start : start + config.batch_size]]
            b = batch.shape[0]
            code = nc.mlp_forward(encoder, batch)
            recon = nc.mlp_forward(decoder, code)
            err = recon - batch
            loss = float(np.mean(np.sum(err**2, axis=1)))
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite reconstruction loss at epoch {epoch}")
            epoch_loss += loss * b
            dec_grads, code_grad = nc.mlp_backward(decoder, code, 2.0 * err / b)
            enc_grads, _ = nc.mlp_backward(encoder, batch, code_grad)
            decoder, opt_dec = nc.adam_step(decoder, dec_grads, opt_dec)
            encoder, opt_enc = nc.adam_step(encoder, enc_grads, opt_enc)
        history.epoch_losses.append(epoch_loss / train.shape[0])

        params = AutoencoderParams(encoder, decoder)
        monitor = reconstruction_loss(params, holdout if n_holdout else train)
        history.holdout_losses.append(monitor)
        if monitor < best_loss:
            best_loss = monitor
            best = params
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best, history


def encode(params: AutoencoderParams, table: EmbeddingTable) -> EmbeddingTable:
    """Map a table into the code space; ids and order are preserved."""
    if table.dim != params.input_dim:
        raise ValueError(f"table dim {table.dim} != autoencoder input dim {params.input_dim}")
    if len(table) == 0:
        return EmbeddingTable.empty(params.code_dim)
    codes = nc.mlp_forward(params.encoder, table.matrix())
    return EmbeddingTable(params.code_dim, list(table.ids), codes.astype(np.float32))


def save_autoencoder(
    params: AutoencoderParams, path: str | Path, manifest: dict | None = None
) -> None:
    doc = {
        "encoder": nc.params_to_json(params.encoder),
        "decoder": nc.params_to_json(params.decoder),
        "manifest": manifest or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_autoencoder(path: str | Path) -> tuple[AutoencoderParams, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    params = AutoencoderParams(
        nc.params_from_json(doc["encoder"]), nc.params_from_json(doc["decoder"])
    )
    return params, doc.get("manifest", {})
