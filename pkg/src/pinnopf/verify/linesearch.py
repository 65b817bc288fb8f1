"""Multi-start search for worst-case line-current violations of the dispatch head.

The exact problem is a non-convex mixed-integer QCQP; this search only
produces lower bounds, each backed by a power-flow witness.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from ..grid import NetworkCase
from ..opf import solve_pf_newton
from .bounds import network_forward

LOWER_BOUND = "lower-bound"
PF_TOL = 1e-9


@dataclass
class BranchWorst:
    index: int
    from_bus: int
    to_bus: int
    ell_max: float
    ell_hat: float
    v_l_pu: float
    v_l_mva: float
    witness_D: list
    witness_vmag: float

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class LineFlowReport:
    branches: list[BranchWorst]
    v_l_pu: float
    v_l_mva: float
    worst_branch: int
    restarts: int
    pool_size: int
    n_pf: int
    n_failed: int
    max_iterations: int
    status: str = LOWER_BOUND
    validated: bool = False
    box: dict = field(default_factory=dict)

    def to_dict(self):
        d = dict(self.__dict__)
        d["branches"] = [b.to_dict() for b in self.branches]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def _mva(case, ell_hat, ell_max):
    return case.base_mva * (np.sqrt(np.maximum(ell_hat, 0.0)) - np.sqrt(ell_max))


class _Evaluator:
    """Maps unit-cube points ``u = (D, vmag)`` to per-branch ``ell - ell_max``."""

    def __init__(self, layers, case, lower, upper):
        self.layers = layers
        self.case = case
        s = case.buses[case.slack]
        self.lo = np.concatenate([lower, [s.v_min]])
        self.hi = np.concatenate([upper, [s.v_max]])
        self.ell_max = np.array([br.current_limit for br in case.branches])
        self.n_pf = 0
        self.n_failed = 0
        self.max_it = 0

    def point(self, u):
        z = self.lo + np.asarray(u) * (self.hi - self.lo)
        return z[:-1], float(z[-1])

    def margins(self, u):
        D, vm = self.point(u)
        G = network_forward(self.layers, D[None, :])[0][0]
        pf = solve_pf_newton(self.case, G, D, vm, tol=PF_TOL, restarts=0)
        self.n_pf += 1
        self.max_it = max(self.max_it, pf.iterations)
        if not pf.converged:
            self.n_failed += 1
            return None
        return pf.ell - self.ell_max


def search_line_violation(model_or_layers, case: NetworkCase, box, restarts: int = 8,
                          pool_size: int = 256, seed: int = 0, extra_starts=None,
                          min_step: float = 2.0 ** -12, max_sweeps: int = 50) -> LineFlowReport:
    """Best-found ``max(ell_hat - ell_max)`` per branch over demand box and slack voltage.

    A fixed LHS pool of ``pool_size`` points over ``(D, slack_vmag)`` is
    screened, then the ``restarts`` best pool points are refined by
    coordinate ascent on the largest branch margin. Every power flow
    starts flat, so each witness is reproducible by a fresh solve. The
    pool does not depend on ``restarts`` and refined starts are taken in
    rank order, so more restarts never report less.
    """
    layers = model_or_layers.g_head_affine() if hasattr(model_or_layers, "g_head_affine") else model_or_layers
    lower, upper = np.asarray(box.lower, dtype=float), np.asarray(box.upper, dtype=float)
    ev = _Evaluator(layers, case, lower, upper)
    d = len(lower) + 1
    nbr = case.n_branch
    best = np.full(nbr, -np.inf)
    best_u = [None] * nbr

    def record(u, m):
        better = m > best
        if np.any(better):
            for j in np.flatnonzero(better):
                best[j] = m[j]
                best_u[j] = np.array(u, dtype=float)

    def score(u):
        m = ev.margins(u)
        if m is None:
            return -np.inf
        record(u, m)
        return float(m.max())

    pool = qmc.LatinHypercube(d=d, seed=np.random.default_rng(seed)).random(pool_size)
    if extra_starts is not None and len(extra_starts):
        span = ev.hi - ev.lo
        extra = (np.atleast_2d(extra_starts) - ev.lo) / np.where(span > 0, span, 1.0)
        pool = np.vstack([np.clip(extra, 0.0, 1.0), pool])
    scores = np.array([score(u) for u in pool])
    order = np.argsort(-scores, kind="stable")

    for r in order[:restarts]:
        if not np.isfinite(scores[r]):
            continue
        u, f = pool[r].copy(), scores[r]
        step = 0.5
        while step >= min_step:
            for _ in range(max_sweeps):
                improved = False
                for i in range(d):
                    for direction in (1.0, -1.0):
                        cand = u.copy()
                        cand[i] = min(1.0, max(0.0, cand[i] + direction * step))
                        if cand[i] == u[i]:
                            continue
                        fc = score(cand)
                        if fc > f:
                            u, f, improved = cand, fc, True
                            break
                if not improved:
                    break
            step *= 0.5

    out = []
    for j, br in enumerate(case.branches):
        if best_u[j] is None:
            D, vm = np.full(len(lower), np.nan), np.nan
            ell_hat = np.nan
        else:
            D, vm = ev.point(best_u[j])
            ell_hat = best[j] + ev.ell_max[j]
        out.append(BranchWorst(j, br.from_bus, br.to_bus, float(ev.ell_max[j]), float(ell_hat),
                               float(best[j]), float(_mva(case, ell_hat, ev.ell_max[j])),
                               np.asarray(D).tolist(), float(vm)))
    k = int(np.nanargmax(best)) if np.any(np.isfinite(best)) else 0
    v_pu = max(0.0, float(best[k]))
    v_mva = max(0.0, out[k].v_l_mva)
    return LineFlowReport(out, v_pu, v_mva, k, restarts, pool_size, ev.n_pf, ev.n_failed, ev.max_it,
                          box={"lower": lower.tolist(), "upper": upper.tolist(),
                               "delta": getattr(box, "delta", None)})


def validate_line_report(model_or_layers, case: NetworkCase, report: LineFlowReport, tol: float = 1e-8):
    """Re-solve every witness from scratch; returns the worst ``(mismatch, ell error)``."""
    layers = model_or_layers.g_head_affine() if hasattr(model_or_layers, "g_head_affine") else model_or_layers
    worst_mis = worst_ell = 0.0
    for b in report.branches:
        if not np.isfinite(b.ell_hat):
            continue
        D = np.array(b.witness_D)
        G = network_forward(layers, D[None, :])[0][0]
        pf = solve_pf_newton(case, G, D, b.witness_vmag, tol=PF_TOL, restarts=0)
        worst_mis = max(worst_mis, pf.mismatch if pf.converged else np.inf)
        worst_ell = max(worst_ell, abs(pf.ell[b.index] - b.ell_hat))
    report.validated = bool(worst_mis < tol and worst_ell < tol)
    return worst_mis, worst_ell
