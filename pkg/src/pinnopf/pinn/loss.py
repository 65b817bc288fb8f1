"""Supervised and KKT-residual loss terms with hand-written reverse mode.

All physics terms are evaluated against the cost-normalised problem
(``c / s`` with ``s = dual_scale``), where the dual head output is used
directly. Stationarity, complementarity and dual feasibility are
homogeneous in ``(c, lambda, mu)`` and shrink by ``s``; the primal
residual does not involve the duals and is unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..grid import CanonicalQcqp
from .model import Head, LossWeights, PinnModel, head_forward

MODES = ("correct", "paper-literal")


@dataclass
class Batch:
    """Demand rows plus optional labels (NaN rows are unlabelled)."""

    D: np.ndarray
    G: np.ndarray | None = None
    v: np.ndarray | None = None
    lam: np.ndarray | None = None
    mu: np.ndarray | None = None

    @property
    def labeled(self) -> np.ndarray:
        if self.G is None:
            return np.zeros(len(self.D), dtype=bool)
        return ~np.isnan(self.G).any(axis=1)

    def __len__(self):
        return len(self.D)

    @classmethod
    def from_dataset(cls, ds, index=None):
        idx = slice(None) if index is None else index
        return cls(ds.D[idx], ds.G[idx], ds.v[idx], ds.lam[idx], ds.mu[idx])


@dataclass
class LossOptions:
    mode: str = "correct"
    prim_uses_label: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown residual mode {self.mode!r}")


@dataclass
class LossValue:
    total: float
    mae_g: float
    mae_v: float
    mae_l: float
    mae_eps: float
    stat: float
    comp: float
    dual: float
    prim: float

    def as_dict(self):
        return {k: float(v) for k, v in self.__dict__.items()}


def _mae(pred, target, rows):
    """Mean over labelled rows of the per-row mean absolute error, plus its gradient."""
    n = int(rows.sum())
    grad = np.zeros_like(pred)
    if n == 0:
        return 0.0, grad
    diff = pred[rows] - target[rows]
    k = pred.shape[1]
    grad[rows] = np.sign(diff) / (n * k)
    return np.abs(diff).sum() / (n * k), grad


def physics_residuals(qcqp: CanonicalQcqp, c_norm, G, v, lam, mu, D, mode="correct",
                      G_label=None, label_rows=None, want_grad=False):
    """Per-row ``(stat, comp, dual, prim)`` and, optionally, their summed gradient.

    Returns ``(terms, grads)`` where ``terms`` has shape ``(B, 4)`` and
    ``grads = (dG, dv, dlam, dmu)`` is the gradient of ``terms.sum()``.
    On ``label_rows`` the primal residual uses ``G_label`` instead of
    ``G``, and no gradient reaches ``G`` from those rows.
    """
    L, M = qcqp.L, qcqp.M
    Gp = G
    if label_rows is not None and label_rows.any():
        Gp = np.where(label_rows[:, None], np.nan_to_num(G_label), G)
    LV = np.einsum("lij,bj->bli", L, v)
    MV = np.einsum("mij,bj->bmi", M, v)
    quadL = np.einsum("bli,bi->bl", LV, v)
    quadM = np.einsum("bmi,bi->bm", MV, v)
    r1 = c_norm[None, :] - lam @ qcqp.a
    SV = np.einsum("bl,bli->bi", lam, LV) + np.einsum("bm,bmi->bi", mu, MV)
    r2 = 2.0 * SV
    g_ineq = quadM - D @ qcqp.d.T - qcqp.f[None, :]
    h = quadL - Gp @ qcqp.a.T - D @ qcqp.b.T
    comp_t = np.abs(mu * g_ineq)
    if mode == "correct":
        stat = np.abs(r1).sum(1) + np.abs(r2).sum(1)
        dual = np.maximum(-mu, 0.0).sum(1)
    else:
        S = np.einsum("bl,lij->bij", lam, L) + np.einsum("bm,mij->bij", mu, M)
        stat = np.abs(r1).sum(1) + np.abs(S).sum((1, 2))
        dual = np.maximum(mu, 0.0).sum(1)
    terms = np.stack([stat, comp_t.sum(1), dual, np.abs(h).sum(1)], axis=1)
    if not want_grad:
        return terms, None

    s1 = np.sign(r1)
    sh = np.sign(h)
    sc = np.sign(mu * g_ineq)
    dlam = -s1 @ qcqp.a.T
    dmu = sc * g_ineq
    # primal: d|h|/dv = sum_l s_l 2 L_l v
    dv = 2.0 * np.einsum("bl,bli->bi", sh, LV)
    # complementarity through g
    dv += 2.0 * np.einsum("bm,bmi->bi", sc * mu, MV)
    if mode == "correct":
        s2 = np.sign(r2)
        dlam += 2.0 * np.einsum("bi,bli->bl", s2, LV)
        dmu += 2.0 * np.einsum("bi,bmi->bm", s2, MV)
        Ls2 = np.einsum("lij,bj->bli", L, s2)
        Ms2 = np.einsum("mij,bj->bmi", M, s2)
        dv += 2.0 * (np.einsum("bl,bli->bi", lam, Ls2) + np.einsum("bm,bmi->bi", mu, Ms2))
        dmu -= (mu < 0)
    else:
        sS = np.sign(S)
        dlam += np.einsum("bij,lij->bl", sS, L)
        dmu += np.einsum("bij,mij->bm", sS, M)
        dmu += (mu > 0)
    dG = -sh @ qcqp.a
    if label_rows is not None:
        dG[label_rows] = 0.0
    return terms, (dG, dv, dlam, dmu)


def _head_backward(head: Head, pre, acts, gout):
    """Gradients of ``sum(gout * out)`` with respect to the head parameters."""
    n = len(head.weights)
    dW = [None] * n
    db = [None] * n
    g = gout
    for k in range(n - 1, -1, -1):
        dW[k] = g.T @ acts[k]
        db[k] = g.sum(0)
        if k > 0:
            g = (g @ head.weights[k]) * (pre[k - 1] > 0)
    return dW, db


def loss_and_grad(model: PinnModel, qcqp: CanonicalQcqp, batch: Batch,
                  weights: LossWeights | None = None, options: LossOptions | None = None,
                  want_grad: bool = True):
    """Weighted training loss on a batch and its parameter gradient.

    Supervised terms average over labelled rows; the residual term
    averages over every row. Terms with zero weight are skipped
    entirely, so a zero-weight term never touches the gradient.
    """
    w = weights or model.loss_weights
    opt = options or LossOptions()
    sc = model.scaling
    X = sc.scale_input(batch.D)
    rows = batch.labeled
    outs, caches = {}, {}
    for name, head in model.heads.items():
        y, pre, acts = head_forward(head, X)
        outs[name] = y
        caches[name] = (pre, acts)
    gout = {name: np.zeros_like(y) for name, y in outs.items()}

    G = sc.unscale_g(outs["G"])
    mae_g, gG = _mae(G, batch.G, rows) if rows.any() else (0.0, np.zeros_like(G))
    total = w.lambda_P * mae_g
    gout["G"] += w.lambda_P * gG * sc.g_span

    mae_v = mae_l = mae_eps = 0.0
    parts = np.zeros(4)
    need_v = w.lambda_V > 0 or w.lambda_eps > 0
    need_l = w.lambda_L > 0 or w.lambda_eps > 0
    if need_v and "V" not in outs or need_l and "L" not in outs:
        raise ValueError("loss weights require heads this model does not have")

    if w.lambda_V > 0:
        mae_v, gv = _mae(outs["V"], batch.v, rows) if rows.any() else (0.0, 0.0)
        total += w.lambda_V * mae_v
        gout["V"] += w.lambda_V * gv
    if w.lambda_L > 0:
        n_eq = qcqp.n_eq
        if rows.any():
            target = np.concatenate([batch.lam, batch.mu], axis=1) / sc.dual_scale
            mae_l, gl = _mae(outs["L"], target, rows)
            total += w.lambda_L * mae_l
            gout["L"] += w.lambda_L * gl
    if w.lambda_eps > 0:
        n_eq = qcqp.n_eq
        lam_n, mu_n = outs["L"][:, :n_eq], outs["L"][:, n_eq:]
        label_rows = rows if opt.prim_uses_label else None
        terms, grads = physics_residuals(qcqp, qcqp.c / sc.dual_scale, G, outs["V"], lam_n, mu_n,
                                         batch.D, opt.mode, batch.G, label_rows, want_grad)
        B = len(batch)
        parts = terms.mean(0)
        mae_eps = terms.sum(1).mean()
        total += w.lambda_eps * mae_eps
        if want_grad:
            dG, dv, dlam, dmu = grads
            k = w.lambda_eps / B
            gout["G"] += k * dG * sc.g_span
            gout["V"] += k * dv
            gout["L"] += k * np.concatenate([dlam, dmu], axis=1)

    # numpy scalars keep the working precision (extended-precision checks rely on it)
    value = LossValue(total, mae_g, mae_v, mae_l, mae_eps, *parts)
    if not want_grad:
        return value, None
    grads = {}
    for name, head in model.heads.items():
        pre, acts = caches[name]
        grads[name] = _head_backward(head, pre, acts, gout[name])
    return value, grads


def total_loss(model, qcqp, batch, weights=None, options=None) -> LossValue:
    value, _ = loss_and_grad(model, qcqp, batch, weights, options, want_grad=False)
    return value


def physics_loss(model, qcqp, D, options=None) -> np.ndarray:
    """Per-row residual sum ``stat + comp + dual + prim`` in physical units."""
    opt = options or LossOptions()
    sc = model.scaling
    X = sc.scale_input(np.atleast_2d(D))
    G = sc.unscale_g(head_forward(model.heads["G"], X)[0])
    v = head_forward(model.heads["V"], X)[0]
    duals = head_forward(model.heads["L"], X)[0] * sc.dual_scale
    n_eq = qcqp.n_eq
    terms, _ = physics_residuals(qcqp, qcqp.c, G, v, duals[:, :n_eq], duals[:, n_eq:],
                                 np.atleast_2d(D), opt.mode)
    return terms.sum(1)
