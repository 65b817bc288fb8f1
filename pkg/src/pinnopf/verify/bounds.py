"""Pre-activation bounds and the big-M mixed-integer encoding of a ReLU network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.stats import qmc

# HiGHS tolerances well below the 1e-6 certification tolerance
LP_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}
BOUND_PAD = 1e-7
INTERVAL_PAD = 1e-12


class BadBoundsError(RuntimeError):
    """A relaxation came back unbounded, which valid big-M bounds rule out."""


@dataclass
class LpResult:
    status: str           # "optimal", "infeasible", "unbounded", "error"
    x: np.ndarray | None
    value: float


def solve_lp(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=None, maximize=False) -> LpResult:
    """Thin wrapper over HiGHS; ``value`` is reported in the caller's sense."""
    c = np.asarray(c, dtype=float)
    res = linprog(-c if maximize else c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=bounds, method="highs", options=LP_OPTIONS)
    if res.status == 0:
        return LpResult("optimal", res.x, float(-res.fun if maximize else res.fun))
    if res.status == 2:
        return LpResult("infeasible", None, -np.inf if maximize else np.inf)
    if res.status == 3:
        return LpResult("unbounded", None, np.inf if maximize else -np.inf)
    return LpResult("error", None, np.nan)


Layers = list[tuple[np.ndarray, np.ndarray]]


def network_forward(layers: Layers, X):
    """Physical-unit forward pass; returns ``(outputs, pre_activations)``."""
    h = np.atleast_2d(np.asarray(X, dtype=float))
    pre = []
    for W, b in layers[:-1]:
        z = h @ W.T + b
        pre.append(z)
        h = np.maximum(z, 0.0)
    W, b = layers[-1]
    return h @ W.T + b, pre


@dataclass
class BigMBounds:
    """Per-neuron pre-activation bounds for every hidden layer."""

    zmin: list[np.ndarray]
    zmax: list[np.ndarray]

    def __post_init__(self):
        for lo, hi in zip(self.zmin, self.zmax):
            if np.any(lo > hi):
                raise ValueError("zmin exceeds zmax")

    @property
    def n_unstable(self) -> int:
        return int(sum(((lo < 0) & (hi > 0)).sum() for lo, hi in zip(self.zmin, self.zmax)))

    def contains(self, pre, tol=0.0) -> bool:
        return all(np.all(z >= lo - tol) and np.all(z <= hi + tol)
                   for z, lo, hi in zip(pre, self.zmin, self.zmax))


def interval_bounds(layers: Layers, lower, upper) -> BigMBounds:
    lo, hi = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    zmin, zmax = [], []
    for W, b in layers[:-1]:
        Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
        # pad outward so rounding in the forward pass cannot escape the bounds
        zl = Wp @ lo + Wn @ hi + b
        zu = Wp @ hi + Wn @ lo + b
        zl = zl - INTERVAL_PAD * (1.0 + np.abs(zl))
        zu = zu + INTERVAL_PAD * (1.0 + np.abs(zu))
        zmin.append(zl)
        zmax.append(zu)
        lo, hi = np.maximum(zl, 0.0), np.maximum(zu, 0.0)
    return BigMBounds(zmin, zmax)


class Encoding:
    """Big-M encoding of the hidden layers, variables ``[x, h_1..h_K, y]``.

    Stable neurons are encoded without a binary: always-active ones as
    ``h = z`` and always-inactive ones as ``h = 0``. Unstable neurons get
    ``h >= z``, ``h <= z - zmin (1 - y)``, ``h <= zmax y`` and ``h >= 0``.
    """

    def __init__(self, layers: Layers, bounds: BigMBounds, lower, upper, n_hidden_layers=None):
        K = len(layers) - 1 if n_hidden_layers is None else n_hidden_layers
        self.layers = layers
        self.K = K
        n0 = layers[0][0].shape[1]
        widths = [layers[k][0].shape[0] for k in range(K)]
        self.x_idx = np.arange(n0)
        self.h_idx = []
        off = n0
        for w in widths:
            self.h_idx.append(np.arange(off, off + w))
            off += w
        self.unstable = []   # (layer, neuron)
        for k in range(K):
            lo, hi = bounds.zmin[k], bounds.zmax[k]
            self.unstable += [(k, i) for i in range(widths[k]) if lo[i] < 0 < hi[i]]
        self.y_idx = np.arange(off, off + len(self.unstable))
        self.n_var = off + len(self.unstable)
        y_of = {ki: self.y_idx[j] for j, ki in enumerate(self.unstable)}

        ub_rows, ub_rhs, eq_rows, eq_rhs = [], [], [], []
        var_bounds = [(float(a), float(b)) for a, b in zip(lower, upper)]
        for k in range(K):
            W, b = layers[k]
            prev = self.x_idx if k == 0 else self.h_idx[k - 1]
            lo, hi = bounds.zmin[k], bounds.zmax[k]
            for i in range(widths[k]):
                hi_i = self.h_idx[k][i]
                if hi[i] <= 0:
                    var_bounds.append((0.0, 0.0))
                    continue
                var_bounds.append((0.0, float(hi[i])))
                if lo[i] >= 0:
                    row = np.zeros(self.n_var)
                    row[hi_i] = 1.0
                    row[prev] = -W[i]
                    eq_rows.append(row)
                    eq_rhs.append(b[i])
                    continue
                yi = y_of[(k, i)]
                r1 = np.zeros(self.n_var)       # z - h <= 0
                r1[prev] = W[i]
                r1[hi_i] = -1.0
                ub_rows.append(r1)
                ub_rhs.append(-b[i])
                r2 = np.zeros(self.n_var)       # h - z - zmin y <= -zmin
                r2[hi_i] = 1.0
                r2[prev] = -W[i]
                r2[yi] = -lo[i]
                ub_rows.append(r2)
                ub_rhs.append(b[i] - lo[i])
                r3 = np.zeros(self.n_var)       # h - zmax y <= 0
                r3[hi_i] = 1.0
                r3[yi] = -hi[i]
                ub_rows.append(r3)
                ub_rhs.append(0.0)
        var_bounds += [(0.0, 1.0)] * len(self.unstable)
        self.A_ub = np.array(ub_rows).reshape(-1, self.n_var)
        self.b_ub = np.array(ub_rhs, dtype=float)
        self.A_eq = np.array(eq_rows).reshape(-1, self.n_var)
        self.b_eq = np.array(eq_rhs, dtype=float)
        self.var_bounds = var_bounds

    def linear_of_output(self, w_last, b_last):
        """Objective coefficients for ``w_last . h_K + b_last`` (returns ``(c, const)``)."""
        c = np.zeros(self.n_var)
        prev = self.x_idx if self.K == 0 else self.h_idx[self.K - 1]
        c[prev] = w_last
        return c, float(b_last)

    def solve(self, c, const=0.0, y_lower=None, y_upper=None) -> LpResult:
        """Maximise ``c . x + const`` over the relaxation with optional fixings of ``y``."""
        bnds = list(self.var_bounds)
        if y_lower is not None:
            for j, (a, b) in enumerate(zip(y_lower, y_upper)):
                bnds[self.y_idx[j]] = (float(a), float(b))
        res = solve_lp(c, self.A_ub if len(self.b_ub) else None, self.b_ub if len(self.b_ub) else None,
                       self.A_eq if len(self.b_eq) else None, self.b_eq if len(self.b_eq) else None,
                       bnds, maximize=True)
        if res.status == "optimal":
            res.value += const
        return res


def propagate_bounds(layers: Layers, lower, upper, lp_tighten: bool = True) -> BigMBounds:
    """Interval bounds, then one pass of per-neuron LP tightening over the relaxation.

    Layer ``k`` is tightened against the encoding of layers ``< k`` using
    the already-tightened bounds. LP values are padded outward by a
    small relative margin so numerical error cannot cut off reachable
    pre-activations.
    """
    base = interval_bounds(layers, lower, upper)
    if not lp_tighten:
        return base
    zmin = [base.zmin[0].copy()]
    zmax = [base.zmax[0].copy()]
    K = len(layers) - 1
    for k in range(1, K):
        partial = BigMBounds(zmin, zmax)
        enc = Encoding(layers, partial, lower, upper, n_hidden_layers=k)
        W, b = layers[k]
        # interval bounds of layer k given the tightened earlier layers
        hlo, hhi = np.maximum(zmin[-1], 0.0), np.maximum(zmax[-1], 0.0)
        Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
        lo_k = Wp @ hlo + Wn @ hhi + b
        hi_k = Wp @ hhi + Wn @ hlo + b
        lo_k -= INTERVAL_PAD * (1.0 + np.abs(lo_k))
        hi_k += INTERVAL_PAD * (1.0 + np.abs(hi_k))
        for i in range(W.shape[0]):
            c, const = enc.linear_of_output(W[i], b[i])
            up = enc.solve(c, const)
            dn = enc.solve(-c, -const)
            if up.status == "unbounded" or dn.status == "unbounded":
                raise BadBoundsError(f"unbounded relaxation at layer {k} neuron {i}")
            if up.status == "optimal":
                hi_k[i] = min(hi_k[i], up.value + BOUND_PAD * (1.0 + abs(up.value)))
            if dn.status == "optimal":
                lo_k[i] = max(lo_k[i], -dn.value - BOUND_PAD * (1.0 + abs(dn.value)))
        zmin.append(np.minimum(lo_k, hi_k))
        zmax.append(hi_k)
    return BigMBounds(zmin, zmax)


def sample_bound_violation(layers: Layers, bounds: BigMBounds, lower, upper, n=100_000, seed=0,
                           chunk=20_000) -> float:
    """Largest amount by which sampled pre-activations escape the bounds (0 when valid)."""
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    sampler = qmc.LatinHypercube(d=len(lower), seed=np.random.default_rng(seed))
    U = sampler.random(n)
    worst = 0.0
    for s in range(0, n, chunk):
        X = lower + U[s:s + chunk] * (upper - lower)
        _, pre = network_forward(layers, X)
        for z, lo, hi in zip(pre, bounds.zmin, bounds.zmax):
            worst = max(worst, float(np.max(lo - z)), float(np.max(z - hi)))
    return max(worst, 0.0)
