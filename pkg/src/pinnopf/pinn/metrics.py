"""Test-set metrics for dispatch predictions, all in percent."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..grid import CanonicalQcqp
from .model import PinnModel, predict_g


@dataclass(frozen=True)
class EvalMetrics:
    mae_t: float
    v_g_avg: float
    v_opt_avg: float
    v_dist_avg: float
    mae_g: float
    v_g_max: float
    n: int

    def as_dict(self):
        return dict(self.__dict__)


def _capacity_norm(g_max, g_min):
    """Normaliser for the violation hinge: |G_max|, falling back to the range, then 1."""
    span = g_max - g_min
    return np.where(np.abs(g_max) > 0, np.abs(g_max), np.where(span > 0, span, 1.0))


def dispatch_metrics(G_hat, G, c, g_min, g_max) -> EvalMetrics:
    """Metrics for predicted versus optimal dispatch, rows are samples.

    ``mae_t`` divides each sample's absolute error by its total
    generation; ``v_g_avg`` averages the normalised bound violation over
    every generator entry; ``v_opt_avg`` is the signed relative cost gap.
    """
    G_hat = np.atleast_2d(np.asarray(G_hat, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if G.shape[0] == 0:
        raise ValueError("empty test slice")
    if G_hat.shape != G.shape:
        raise ValueError("prediction and label shapes differ")
    err = np.abs(G_hat - G)
    mae_t = 100.0 * np.mean(err.sum(1) / G.sum(1))
    norm = _capacity_norm(g_max, g_min)
    hinge = np.maximum.reduce([(G_hat - g_max) / norm, (g_min - G_hat) / norm, np.zeros_like(G)])
    v_opt = 100.0 * np.mean((G_hat - G) @ c / (G @ c))
    span = g_max - g_min
    ok = span > 0
    v_dist = 100.0 * np.mean(err[:, ok] / span[ok]) if ok.any() else 0.0
    raw = np.maximum(np.maximum(G_hat - g_max, g_min - G_hat), 0.0)
    return EvalMetrics(float(mae_t), float(100.0 * hinge.mean()), float(v_opt), float(v_dist),
                       float(err.mean()), float(raw.max()), int(G.shape[0]))


def evaluate(model: PinnModel, dataset, qcqp: CanonicalQcqp, role: str | None = None) -> EvalMetrics:
    """Metrics of the G head on the labelled rows of ``dataset`` (optionally one role)."""
    mask = ~np.isnan(dataset.G).any(axis=1)
    if role is not None:
        mask &= np.asarray(dataset.role) == role
    if not mask.any():
        raise ValueError("empty test slice")
    G_hat = predict_g(model, dataset.D[mask])
    case = qcqp.case
    return dispatch_metrics(G_hat, dataset.G[mask], qcqp.c, case.g_min, case.g_max)
