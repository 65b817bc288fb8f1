import numpy as np
import pytest

from _oracles import two_bus_opf_oracle, two_bus_pf
from pinnopf.data import DemandBox, lhs_sample
from pinnopf.grid import assemble_canonical, load_case, parse_case_text
from pinnopf.opf import (INFEASIBLE, PAPER_LITERAL, kkt_residuals, lagrangian_eval, lagrangian_gradient,
                         solve_acopf, solve_pf_newton)

# two-bus variant where the receiving-end voltage limit makes heavy demands infeasible
TIGHT = """
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0 0 0.95 1.05;
  2 1 90 40 0.95 1.05;
];
mpc.gen = [
  1 250 0 150 -150;
];
mpc.branch = [
  1 2 0.02 0.2 0.04 92;
];
mpc.gencost = [
  30 0;
];
"""


@pytest.fixture(scope="module")
def two():
    case = load_case("case2")
    return case, assemble_canonical(case)


@pytest.fixture(scope="module")
def c14():
    case = load_case("case14")
    return case, assemble_canonical(case)


@pytest.mark.parametrize("text", [None, TIGHT])
def test_two_bus_matches_grid_oracle(text):
    case = load_case("case2") if text is None else parse_case_text(text)
    q = assemble_canonical(case)
    n_ok = 0
    for D in lhs_sample(DemandBox.from_case(case), 8, seed=3):
        sol = solve_acopf(q, D)
        pg, _ = two_bus_opf_oracle(case, D)
        # both agree on feasibility, and on the dispatch when feasible
        assert sol.ok == np.isfinite(pg)
        if sol.ok:
            n_ok += 1
            assert abs(sol.G[0] - pg) < 1e-4
            assert sol.objective == pytest.approx(q.c @ sol.G, rel=1e-14)
    assert n_ok >= 4


def test_kkt_at_optimum_case14(c14):
    case, q = c14
    for D in lhs_sample(DemandBox.from_case(case), 5, seed=11):
        sol = solve_acopf(q, D)
        assert sol.ok
        r = kkt_residuals(q, sol.G, sol.v, sol.lam, sol.mu, D)
        assert r.max() < 1e-6
        assert np.all(sol.mu >= -1e-9)
        assert sol.v[case.n_bus + case.slack] == 0.0
        # stationarity of the Lagrangian and complementary slackness
        assert np.max(np.abs(lagrangian_gradient(q, sol.G, sol.v, sol.lam, sol.mu))) < 1e-6
        assert lagrangian_eval(q, sol.G, sol.v, sol.lam, sol.mu, D) == pytest.approx(sol.objective, abs=1e-8)


def test_light_load_nonbinding_voltage_duals(c14):
    case, q = c14
    D = 0.6 * case.d_max
    sol = solve_acopf(q, D)
    assert sol.ok
    g = q.ineq_values(sol.v, D)
    volt = np.array([c.kind == "voltage" for c in q.ineq_ids])
    slack = volt & (g < -1e-4)
    assert slack.any()
    assert np.all(np.abs(sol.mu[slack]) < 1e-6)


def test_over_capacity_infeasible(two):
    case, q = two
    D = 10.0 * case.d_max
    assert solve_acopf(q, D).status == INFEASIBLE


def test_kkt_definitions(two):
    case, q = two
    D = 0.8 * case.d_max
    sol = solve_acopf(q, D)
    zero_l, zero_m = np.zeros(q.n_eq), np.zeros(q.n_ineq)
    r = kkt_residuals(q, sol.G, sol.v, zero_l, zero_m, D)
    assert r.eps_comp == 0.0 and r.eps_dual == 0.0
    assert r.eps_stat == pytest.approx(np.abs(q.c).sum())
    mu = sol.mu.copy()
    mu[0] = -0.1
    base = kkt_residuals(q, sol.G, sol.v, sol.lam, np.maximum(mu, 0.0), D).eps_dual
    assert kkt_residuals(q, sol.G, sol.v, sol.lam, mu, D).eps_dual == pytest.approx(base + 0.1, abs=1e-15)
    lit = kkt_residuals(q, sol.G, sol.v, sol.lam, sol.mu, D, mode=PAPER_LITERAL)
    assert lit.eps_dual == pytest.approx(np.maximum(sol.mu, 0).sum())
    assert lit.eps_prim == pytest.approx(r.eps_prim)
    assert lagrangian_eval(q, sol.G, sol.v, zero_l, zero_m, D) == pytest.approx(q.c @ sol.G)


def test_lagrangian_termwise(c14):
    case, q = c14
    rng = np.random.default_rng(5)
    G, v = rng.normal(size=q.n_g), rng.normal(size=q.n_v)
    lam, mu, D = rng.normal(size=q.n_eq), rng.normal(size=q.n_ineq), rng.normal(size=q.n_d)
    total = sum(q.c[j] * G[j] for j in range(q.n_g))
    for l in range(q.n_eq):
        total += lam[l] * (v @ q.L[l] @ v - q.a[l] @ G - q.b[l] @ D)
    for m in range(q.n_ineq):
        total += mu[m] * (v @ q.M[m] @ v - q.d[m] @ D - q.f[m])
    assert lagrangian_eval(q, G, v, lam, mu, D) == pytest.approx(total, abs=1e-12 * max(1.0, abs(total)))


def test_solver_deterministic(c14):
    case, q = c14
    D = lhs_sample(DemandBox.from_case(case), 1, seed=2)[0]
    a, b = solve_acopf(q, D), solve_acopf(q, D)
    for k in ("G", "v", "lam", "mu"):
        assert np.array_equal(getattr(a, k), getattr(b, k))


def test_pf_zero_injection_flat():
    case = parse_case_text(TIGHT.replace("0.04 92", "0 92"))
    pf = solve_pf_newton(case, np.zeros(2), np.zeros(2), 1.0)
    assert pf.converged and pf.iterations == 1
    assert np.allclose(pf.v_pf, [1, 1, 0, 0]) and np.all(pf.ell == 0)


def test_pf_reproduces_opf_voltage(c14):
    case, q = c14
    for D in lhs_sample(DemandBox.from_case(case), 3, seed=8):
        sol = solve_acopf(q, D)
        vm = np.hypot(sol.v[case.slack], sol.v[case.n_bus + case.slack])
        pf = solve_pf_newton(case, sol.G, D, vm)
        assert pf.converged and pf.mismatch < 1e-8
        assert np.max(np.abs(pf.v_pf - sol.v)) < 1e-6


def test_pf_two_bus_oracle(two):
    case, _ = two
    rng = np.random.default_rng(4)
    for _ in range(10):
        D = rng.uniform(0.6, 1.0, 2) * case.d_max
        vm = rng.uniform(0.95, 1.05)
        G = np.array([rng.uniform(0, 2), rng.uniform(-1, 1)])    # slack dispatch is absorbed anyway
        pf = solve_pf_newton(case, G, D, vm)
        V2, S1, ell = two_bus_pf(case, vm, -D[0], -D[1])
        assert pf.converged
        assert pf.ell[0] == pytest.approx(ell, abs=1e-8)
        assert pf.slack_injection[0] == pytest.approx(S1.real, abs=1e-8)
        assert complex(pf.v_pf[1], pf.v_pf[3]) == pytest.approx(V2, abs=1e-8)
