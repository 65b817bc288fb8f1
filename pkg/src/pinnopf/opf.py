"""AC-OPF interior-point solver, KKT residuals and Newton power flow."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .grid import CanonicalQcqp, NetworkCase, build_injection_forms, build_voltage_and_line_forms

log = logging.getLogger(__name__)

OPTIMAL, INFEASIBLE, MAX_ITER = "optimal", "infeasible", "max-iter"
CORRECT, PAPER_LITERAL = "correct", "paper-literal"


@dataclass(frozen=True)
class OpfSolution:
    G: np.ndarray
    v: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    objective: float
    status: str
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


@dataclass(frozen=True)
class KktResiduals:
    eps_stat: float
    eps_comp: float
    eps_dual: float
    eps_prim: float

    @property
    def total(self) -> float:
        return self.eps_stat + self.eps_comp + self.eps_dual + self.eps_prim

    def max(self) -> float:
        return max(self.eps_stat, self.eps_comp, self.eps_dual, self.eps_prim)


@dataclass(frozen=True)
class PfResult:
    v_pf: np.ndarray
    ell: np.ndarray
    slack_injection: tuple[float, float]
    converged: bool
    iterations: int
    mismatch: float


@dataclass(frozen=True)
class IpmOptions:
    tol: float = 1e-8
    max_iter: int = 150
    step_fraction: float = 0.995
    barrier_reduction: float = 0.2


# --------------------------------------------------------------------------
# KKT residuals and Lagrangian

def dual_matrix(qcqp: CanonicalQcqp, lam, mu) -> np.ndarray:
    """``sum lam_l L_l + sum mu_m M_m``."""
    return np.tensordot(lam, qcqp.L, 1) + np.tensordot(mu, qcqp.M, 1)


def kkt_residuals(qcqp: CanonicalQcqp, G, v, lam, mu, D, mode: str = CORRECT) -> KktResiduals:
    """KKT discrepancies of a candidate primal-dual point.

    ``mode="correct"`` measures stationarity as
    ``|c - sum lam a|_1 + |2 (sum lam L + sum mu M) v|_1`` and dual
    feasibility as ``sum max(-mu, 0)``. ``mode="paper-literal"`` takes the
    entrywise L1 norm of the dual matrix itself and ``sum max(mu, 0)``.
    """
    G, v, lam, mu, D = (np.asarray(x, dtype=float) for x in (G, v, lam, mu, D))
    S = dual_matrix(qcqp, lam, mu)
    stat_g = np.abs(qcqp.c - lam @ qcqp.a).sum()
    g_ineq = qcqp.ineq_values(v, D)
    comp = np.abs(mu * g_ineq).sum()
    prim = np.abs(qcqp.eq_values(G, v, D)).sum()
    if mode == CORRECT:
        stat = stat_g + np.abs(2.0 * S @ v).sum()
        dual = np.maximum(-mu, 0.0).sum()
    elif mode == PAPER_LITERAL:
        stat = stat_g + np.abs(S).sum()
        dual = np.maximum(mu, 0.0).sum()
    else:
        raise ValueError(f"unknown residual mode {mode!r}")
    return KktResiduals(float(stat), float(comp), float(dual), float(prim))


def lagrangian_eval(qcqp: CanonicalQcqp, G, v, lam, mu, D) -> float:
    return float(qcqp.c @ G + lam @ qcqp.eq_values(G, v, D) + mu @ qcqp.ineq_values(v, D))


def lagrangian_gradient(qcqp: CanonicalQcqp, G, v, lam, mu) -> np.ndarray:
    """Gradient of the Lagrangian with respect to ``x = (G, v)``."""
    S = dual_matrix(qcqp, lam, mu)
    return np.concatenate([qcqp.c - lam @ qcqp.a, 2.0 * S @ v])


# --------------------------------------------------------------------------
# interior point

def _capacity_infeasible(qcqp: CanonicalQcqp, D) -> bool:
    case = qcqp.case
    nd = case.n_load
    return float(np.sum(D[:nd])) > sum(g.p_max for g in case.generators) + 1e-12


RETRY_FRACTIONS = (0.95, 0.9)


def solve_acopf(qcqp: CanonicalQcqp, D, options: IpmOptions | None = None, x0=None) -> OpfSolution:
    """Solve one AC-OPF instance to a KKT point.

    Primal-dual log-barrier method with a Mehrotra predictor-corrector
    step. The slack-angle row is enforced as the linear constraint
    ``vi_slack = 0`` internally; its reported multiplier is zero, which
    is exact because every other form is invariant to a global phase
    rotation. A failed run is repeated with shorter steps to the
    boundary before the instance is declared infeasible.
    """
    opts = options or IpmOptions()
    D = np.asarray(D, dtype=float)
    if _capacity_infeasible(qcqp, D):
        return _failed(qcqp, D, INFEASIBLE, 0)
    sol = _ipm(qcqp, D, opts, x0)
    total = sol.iterations
    for frac in RETRY_FRACTIONS:
        if sol.ok or frac >= opts.step_fraction:
            break
        retry = _ipm(qcqp, D, replace(opts, step_fraction=frac), x0)
        total += retry.iterations
        if retry.ok or sol.status == MAX_ITER:
            sol = retry
    return replace(sol, iterations=total)


def _ipm(qcqp: CanonicalQcqp, D, opts: IpmOptions, x0) -> OpfSolution:
    case = qcqp.case
    ng2, nv = qcqp.n_g, qcqp.n_v
    n = ng2 + nv
    n_eq, n_in = qcqp.n_eq, qcqp.n_ineq
    s_row = qcqp.slack_row
    s_col = ng2 + case.n_bus + case.slack

    cscale = float(np.max(np.abs(qcqp.c))) or 1.0
    c = qcqp.c / cscale
    Lq = qcqp.L[:s_row]
    a = qcqp.a[:s_row]
    bD = qcqp.b[:s_row] @ D
    Mq = qcqp.M
    rhs_in = qcqp.d @ D + qcqp.f

    if x0 is None:
        x = np.zeros(n)
        x[:ng2] = 0.5 * (case.g_min + case.g_max)
        x[ng2:ng2 + case.n_bus] = 1.0
    else:
        x = np.array(x0, dtype=float)

    def evaluate(x):
        G, v = x[:ng2], x[ng2:]
        Lv = Lq @ v                       # (neq-1, nv)
        Mv = Mq @ v                       # (nin, nv)
        h = np.empty(n_eq)
        h[:s_row] = Lv @ v - a @ G - bD
        h[s_row] = x[s_col]
        g = Mv @ v - rhs_in
        Jh = np.zeros((n_eq, n))
        Jh[:s_row, :ng2] = -a
        Jh[:s_row, ng2:] = 2.0 * Lv
        Jh[s_row, s_col] = 1.0
        Jg = np.zeros((n_in, n))
        Jg[:, ng2:] = 2.0 * Mv
        return h, g, Jh, Jg

    h, g, Jh, Jg = evaluate(x)
    z = np.maximum(-g, 1.0)
    mu = 1.0 / z
    lam = np.zeros(n_eq)
    grad_f = np.concatenate([c, np.zeros(nv)])

    status, it = MAX_ITER, 0
    best = None
    for it in range(1, opts.max_iter + 1):
        Lx = grad_f + Jh.T @ lam + Jg.T @ mu
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(Lx))):
            break
        # residual measured on the true constraint values, in cost units
        resid = cscale * (np.abs(Lx).sum() + np.abs(mu * g).sum()) \
            + np.abs(h).sum() + np.maximum(g, 0.0).sum()
        if best is None or resid < best[0]:
            best = (resid, x.copy(), lam.copy(), mu.copy(), it)
        if resid < opts.tol:
            status = OPTIMAL
            break
        if resid > 1e6 * best[0] or np.max(np.abs(x)) > 1e6:
            break

        Hvv = 2.0 * (np.tensordot(lam[:s_row], Lq, 1) + np.tensordot(mu, Mq, 1))
        W = np.zeros((n, n))
        W[ng2:, ng2:] = Hvv
        zinv = 1.0 / z
        W += Jg.T @ ((mu * zinv)[:, None] * Jg)
        K = np.zeros((n + n_eq, n + n_eq))
        K[:n, :n] = W
        K[:n, n:] = Jh.T
        K[n:, :n] = Jh

        def solve(target):
            N = Lx + Jg.T @ (zinv * (mu * g + target))
            rhs = -np.concatenate([N, h])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            dx, dlam = sol[:n], sol[n:]
            dz = -g - z - Jg @ dx
            dmu = -mu + zinv * (target - mu * dz)
            return dx, dlam, dz, dmu

        # predictor
        dx, dlam, dz, dmu = solve(np.zeros(n_in))
        ap = _max_step(z, dz, 1.0)
        ad = _max_step(mu, dmu, 1.0)
        mu_now = float(z @ mu) / n_in
        mu_aff = float((z + ap * dz) @ (mu + ad * dmu)) / n_in
        sigma = min(1.0, max(mu_aff / mu_now, 0.0) ** 3) if mu_now > 0 else 0.0
        # corrector
        target = sigma * mu_now - dz * dmu
        dx, dlam, dz, dmu = solve(target)
        ap = _max_step(z, dz, opts.step_fraction)
        ad = _max_step(mu, dmu, opts.step_fraction)
        x = x + ap * dx
        z = z + ap * dz
        lam = lam + ad * dlam
        mu = mu + ad * dmu
        h, g, Jh, Jg = evaluate(x)

    resid, x, lam, mu, best_it = best
    G, v = x[:ng2].copy(), x[ng2:].copy()
    lam_out = lam * cscale
    lam_out[s_row] = 0.0
    mu_out = mu * cscale
    sol = OpfSolution(G, v, lam_out, mu_out, float(qcqp.c @ G), status, it)
    if status != OPTIMAL:
        h_best = qcqp.eq_values(G, v, D)
        feas = max(np.max(np.abs(h_best[:s_row])), np.max(qcqp.ineq_values(v, D), initial=0.0))
        if feas > 1e-5:
            return OpfSolution(G, v, lam_out, mu_out, float(qcqp.c @ G), INFEASIBLE, it)
    sol = _polish(qcqp, D, sol)
    v = sol.v.copy()
    v[qcqp.case.n_bus + qcqp.case.slack] = 0.0   # angle reference, exact by definition
    sol = replace(sol, v=v)
    if sol.status != OPTIMAL and kkt_residuals(qcqp, sol.G, sol.v, sol.lam, sol.mu, D).total < opts.tol:
        sol = OpfSolution(sol.G, sol.v, sol.lam, sol.mu, sol.objective, OPTIMAL, sol.iterations)
    return sol


def _max_step(w, dw, frac):
    neg = dw < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, frac * np.min(-w[neg] / dw[neg])))


def _failed(qcqp, D, status, it):
    nv = qcqp.n_v
    v = np.zeros(nv)
    v[: qcqp.case.n_bus] = 1.0
    return OpfSolution(np.full(qcqp.n_g, np.nan), v, np.zeros(qcqp.n_eq),
                       np.zeros(qcqp.n_ineq), float("nan"), status, it)


def _polish(qcqp: CanonicalQcqp, D, sol: OpfSolution) -> OpfSolution:
    """Active-set Newton refinement of an interior-point KKT point.

    Constraints whose multiplier dominates their slack are held as
    equalities, the rest get zero multipliers, and the square KKT
    system is solved by Newton's method. The refined point is kept only
    when it has lower residuals and remains primal and dual feasible.
    """
    case = qcqp.case
    ng2 = qcqp.n_g
    s_row = qcqp.slack_row
    s_col = ng2 + case.n_bus + case.slack
    g = qcqp.ineq_values(sol.v, D)
    active = np.flatnonzero(sol.mu > -g)
    n = ng2 + qcqp.n_v
    n_eq = qcqp.n_eq
    na = active.size
    Lq = qcqp.L[:s_row]
    Ma = qcqp.M[active]
    rhs_a = (qcqp.d @ D + qcqp.f)[active]
    bD = qcqp.b[:s_row] @ D

    x = np.concatenate([sol.G, sol.v])
    lam = sol.lam.copy()
    mua = sol.mu[active].copy()

    def residual(x, lam, mua):
        G, v = x[:ng2], x[ng2:]
        S = np.tensordot(lam[:s_row], Lq, 1) + np.tensordot(mua, Ma, 1)
        r_x = np.concatenate([qcqp.c - lam[:s_row] @ qcqp.a[:s_row], 2.0 * S @ v])
        r_x[s_col] += lam[s_row]
        h = np.empty(n_eq)
        h[:s_row] = np.einsum("i,lij,j->l", v, Lq, v) - qcqp.a[:s_row] @ G - bD
        h[s_row] = x[s_col]
        ga = np.einsum("i,mij,j->m", v, Ma, v) - rhs_a
        return np.concatenate([r_x, h, ga]), S

    before = kkt_residuals(qcqp, sol.G, sol.v, sol.lam, sol.mu, D).total
    lam_w = lam.copy()
    for _ in range(8):
        r, S = residual(x, lam_w, mua)
        if np.max(np.abs(r)) < 1e-13 * max(1.0, np.max(np.abs(qcqp.c))):
            break
        v = x[ng2:]
        J = np.zeros((n + n_eq + na, n + n_eq + na))
        J[ng2:n, ng2:n] = 2.0 * S
        Jh = np.zeros((n_eq, n))
        Jh[:s_row, :ng2] = -qcqp.a[:s_row]
        Jh[:s_row, ng2:] = 2.0 * (Lq @ v)
        Jh[s_row, s_col] = 1.0
        Jga = np.zeros((na, n))
        Jga[:, ng2:] = 2.0 * (Ma @ v)
        J[:n, n:n + n_eq] = Jh.T
        J[:n, n + n_eq:] = Jga.T
        J[n:n + n_eq, :n] = Jh
        J[n + n_eq:, :n] = Jga
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        x = x + step[:n]
        lam_w = lam_w + step[n:n + n_eq]
        mua = mua + step[n + n_eq:]
        if not np.all(np.isfinite(x)):
            return sol

    mu = np.zeros(qcqp.n_ineq)
    mu[active] = mua
    lam_out = lam_w.copy()
    lam_out[s_row] = 0.0
    G, v = x[:ng2], x[ng2:]
    if np.any(mu < 0) or np.any(qcqp.ineq_values(v, D) > 1e-10):
        return sol
    after = kkt_residuals(qcqp, G, v, lam_out, mu, D).total
    if not after < before:
        return sol
    return OpfSolution(G.copy(), v.copy(), lam_out, mu, float(qcqp.c @ G), sol.status, sol.iterations)


# --------------------------------------------------------------------------
# Newton power flow

@lru_cache(maxsize=16)
def _pf_forms(case: NetworkCase):
    Mp, Mq = build_injection_forms(case)
    _, Mi, _ = build_voltage_and_line_forms(case)
    return Mp, Mq, Mi


def net_injection(case: NetworkCase, G, D) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus net injections ``(p, q)`` for dispatch ``G`` and demand ``D``."""
    nb, ng, nd = case.n_bus, case.n_gen, case.n_load
    idx = case.bus_index
    p = np.zeros(nb)
    q = np.zeros(nb)
    for j, gen in enumerate(case.generators):
        p[idx[gen.bus]] += G[j]
        q[idx[gen.bus]] += G[ng + j]
    for j, ld in enumerate(case.loads):
        p[idx[ld.bus]] -= D[j]
        q[idx[ld.bus]] -= D[nd + j]
    return p, q


def pf_mismatch(case: NetworkCase, v, G, D) -> np.ndarray:
    """Injection mismatch at every non-slack bus (P rows then Q rows)."""
    Mp, Mq, _ = _pf_forms(case)
    p, q = net_injection(case, G, D)
    keep = np.arange(case.n_bus) != case.slack
    dp = (Mp @ v) @ v - p
    dq = (Mq @ v) @ v - q
    return np.concatenate([dp[keep], dq[keep]])


def solve_pf_newton(case: NetworkCase, G_hat, D, slack_vmag: float, tol: float = 1e-8,
                    max_iter: int = 50, restarts: int = 3, seed: int = 0, v0=None) -> PfResult:
    """Rectangular Newton power flow with fixed injections at every non-slack bus.

    The slack bus is held at ``(slack_vmag, 0)`` and absorbs the active and
    reactive mismatch. A flat start is tried first, then ``restarts``
    random starts.
    """
    G_hat = np.asarray(G_hat, dtype=float)
    D = np.asarray(D, dtype=float)
    if not (np.all(np.isfinite(G_hat)) and np.all(np.isfinite(D))):
        raise ValueError("dispatch and demand must be finite")
    Mp, Mq, Mi = _pf_forms(case)
    nb, s = case.n_bus, case.slack
    p, q = net_injection(case, G_hat, D)
    keep = np.flatnonzero(np.arange(nb) != s)
    unknown = np.concatenate([keep, nb + keep])
    Mpk, Mqk = Mp[keep], Mq[keep]
    target = np.concatenate([p[keep], q[keep]])

    rng = np.random.default_rng(seed)
    starts = []
    if v0 is not None:
        starts.append(np.asarray(v0, dtype=float).copy())
    flat = np.zeros(2 * nb)
    flat[:nb] = slack_vmag
    starts.append(flat)
    for _ in range(restarts):
        rnd = np.zeros(2 * nb)
        rnd[:nb] = rng.uniform(0.85, 1.15, nb)
        rnd[nb:] = rng.uniform(-0.3, 0.3, nb)
        starts.append(rnd)

    total_it = 0
    best = None
    for start in starts:
        v = start.copy()
        v[s], v[nb + s] = slack_vmag, 0.0
        converged = False
        mis = np.inf
        for it in range(1, max_iter + 1):
            total_it += 1
            Pv, Qv = Mpk @ v, Mqk @ v
            F = np.concatenate([Pv @ v, Qv @ v]) - target
            mis = float(np.max(np.abs(F))) if F.size else 0.0
            if not np.isfinite(mis):
                break
            if mis < tol:
                converged = True
                break
            J = 2.0 * np.concatenate([Pv, Qv])[:, unknown]
            try:
                dv = np.linalg.solve(J, -F)
            except np.linalg.LinAlgError:
                break
            v[unknown] += dv
        if best is None or (np.isfinite(mis) and mis < best[1]):
            best = (v.copy(), mis, it)
        if converged:
            break

    v, mis, it = best
    p_s = float(v @ Mp[s] @ v)
    q_s = float(v @ Mq[s] @ v)
    ell = np.einsum("i,bij,j->b", v, Mi, v)
    return PfResult(v, ell, (p_s, q_s), bool(mis < tol), total_it, float(mis))
