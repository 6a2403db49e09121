"""Bilinear OD decoder and the magnitude-balanced multimodal loss."""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .intra import split_od

log = logging.getLogger(__name__)


def predict_od(u, weight) -> T.Tensor:
    """M_hat = (W U_O)(U_D)^T for embeddings ``u`` of shape (..., N, d)."""
    u, weight = T.as_tensor(u), T.as_tensor(weight)
    if u.shape[-1] % 2:
        raise ConfigError(f"embedding width {u.shape[-1]} cannot be split into origin/destination")
    if weight.shape != (u.shape[-2], u.shape[-2]):
        raise DimensionError(f"decoder map {weight.shape} does not match {u.shape[-2]} nodes")
    u_o, u_d = split_od(u)
    return T.matmul(T.matmul(weight, u_o), T.transpose(u_d))


def mode_loss(pred, target) -> T.Tensor:
    """Mean squared error over the trailing N x N entries (one value per batch element)."""
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mode_loss: prediction {pred.shape} vs target {target.shape}")
    err = T.square(T.sub(pred, target))
    if pred.ndim == 2:
        return T.mean(err)
    return T.mean(err, axis=(-2, -1))


def magnitude(target: np.ndarray) -> np.ndarray:
    """mu = mean OD entry of the target matrix (per batch element)."""
    target = np.asarray(target, dtype=np.float64)
    return target.mean(axis=(-2, -1))


def balanced_multimodal_loss(
    per_mode_losses: Sequence,
    ground_truths: Sequence[np.ndarray],
    eta: Sequence[float],
    zero_target: str = "skip",
    names: Sequence[str] | None = None,
) -> T.Tensor:
    """sum_m (eta_m / mu_m) L_m, averaged over the batch.

    Terms whose target has mu_m = 0 are dropped with a warning, or raise when
    ``zero_target == "error"``.
    """
    if not (len(per_mode_losses) == len(ground_truths) == len(eta)):
        raise DimensionError("one loss, one target and one eta per mode are required")
    total = None
    for m, (loss, truth, weight) in enumerate(zip(per_mode_losses, ground_truths, eta)):
        if weight <= 0:
            raise ConfigError(f"eta must be positive, got {weight}")
        loss = T.as_tensor(loss)
        mu = np.atleast_1d(magnitude(truth))
        live = mu > 0
        if not live.all():
            label = names[m] if names else str(m)
            if zero_target == "error":
                raise DataError(f"mode {label}: all-zero target, balancing factor undefined")
            log.warning("mode %s: skipping %d all-zero target(s) in the loss", label, int((~live).sum()))
        coef = np.where(live, weight / np.where(live, mu, 1.0), 0.0) / mu.size
        term = T.sum(T.hadamard(loss, coef))
        total = term if total is None else T.add(total, term)
    return total if total is not None else T.Tensor(0.0)
