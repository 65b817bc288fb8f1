import numpy as np
import pytest

from pinnopf.data import DemandBox, label_samples, lhs_sample, split_dataset
from pinnopf.grid import assemble_canonical, load_case
from pinnopf.opf import kkt_residuals, solve_acopf
from pinnopf.pinn import (Batch, Head, LossWeights, TrainConfig, dispatch_metrics, evaluate,
                          finite_difference_check, forward, head_forward, init_model, jitter, load_model,
                          loss_and_grad, physics_loss, physics_residuals, predict_g, save_model, total_loss,
                          train)
from pinnopf.verify import network_forward


@pytest.fixture(scope="module")
def two():
    case = load_case("case2")
    return case, assemble_canonical(case), DemandBox.from_case(case)


@pytest.fixture(scope="module")
def two_data(two):
    case, q, box = two
    rep = label_samples(q, lhs_sample(box, 60, seed=3))
    return split_dataset(rep, "case2", box, seed=3)


def test_zero_weights_forward(two):
    case, q, box = two
    m = init_model(q, box, seed=0)
    for h in m.heads.values():
        for w, b in zip(h.weights, h.biases):
            w[:] = 0.0
            b[:] = 0.0
    p = forward(m, box.upper, n_eq=q.n_eq)
    assert np.array_equal(p.G, case.g_min)
    assert np.all(p.v == 0) and np.all(p.lam == 0) and np.all(p.mu == 0)


def test_relu_identity():
    head = Head([np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)])
    x = np.array([[0.3, 0.7], [1.0, 0.0]])
    assert np.array_equal(head_forward(head, x)[0], x)


def test_manual_forward():
    W1 = np.array([[1.0, -2.0], [0.5, 0.25], [-1.0, 1.5]])
    b1 = np.array([0.1, -0.2, 0.3])
    W2 = np.array([[2.0, -1.0, 0.5], [0.0, 1.0, -3.0]])
    b2 = np.array([0.05, -0.4])
    head = Head([W1, W2], [b1, b2])
    x = np.array([0.4, 0.9])
    hidden = [max(0.0, sum(W1[i, j] * x[j] for j in range(2)) + b1[i]) for i in range(3)]
    want = [sum(W2[o, i] * hidden[i] for i in range(3)) + b2[o] for o in range(2)]
    assert np.max(np.abs(head_forward(head, x[None])[0][0] - want)) < 1e-14


def test_scaling_transparent(two):
    case, q, box = two
    m = init_model(q, box, seed=5)
    D = lhs_sample(box, 20, seed=1)
    assert np.allclose(network_forward(m.g_head_affine(), D)[0], predict_g(m, D), atol=1e-12)
    assert np.allclose(forward(m, D, n_eq=q.n_eq).G, predict_g(m, D))


def test_widths_and_layers():
    case = load_case("case14")
    q = assemble_canonical(case)
    m = init_model(q, DemandBox.from_case(case), seed=0)
    assert {k: h.hidden_widths for k, h in m.heads.items()} == {"G": [5] * 3, "V": [10] * 3, "L": [20] * 3}
    assert m.heads["L"].weights[-1].shape[0] == q.n_eq + q.n_ineq
    assert set(init_model(q, DemandBox.from_case(case), standard=True).heads) == {"G"}


def test_physics_residual_matches_kkt(two):
    case, q, box = two
    D = lhs_sample(box, 4, seed=9)
    sols = [solve_acopf(q, d) for d in D]
    G = np.array([s.G for s in sols])
    v = np.array([s.v for s in sols])
    lam = np.array([s.lam for s in sols])
    mu = np.array([s.mu for s in sols])
    terms, _ = physics_residuals(q, q.c, G, v, lam, mu, D)
    for i, s in enumerate(sols):
        r = kkt_residuals(q, s.G, s.v, s.lam, s.mu, D[i])
        assert np.allclose(terms[i], [r.eps_stat, r.eps_comp, r.eps_dual, r.eps_prim], rtol=1e-12, atol=1e-9)
    assert terms.sum(1).max() < 1e-6
    # random perturbations also agree with the reference definitions
    rng = np.random.default_rng(0)
    G2, v2 = G + rng.normal(0, 0.1, G.shape), v + rng.normal(0, 0.1, v.shape)
    lam2, mu2 = lam + rng.normal(0, 1, lam.shape), mu + rng.normal(0, 1, mu.shape)
    terms, _ = physics_residuals(q, q.c, G2, v2, lam2, mu2, D)
    for i in range(len(D)):
        r = kkt_residuals(q, G2[i], v2[i], lam2[i], mu2[i], D[i])
        assert np.allclose(terms[i], [r.eps_stat, r.eps_comp, r.eps_dual, r.eps_prim], rtol=1e-10)


def test_perfect_labels_zero_residual_loss(two, two_data):
    case, q, box = two
    ds = two_data.subset("train")
    s = 1.0 / np.max(np.abs(q.c))
    terms, _ = physics_residuals(q, q.c * s, ds.G, ds.v, ds.lam * s, ds.mu * s, ds.D)
    assert terms.sum(1).mean() < 1e-6


def test_loss_structure(two, two_data):
    case, q, box = two
    m = init_model(q, box, seed=1)
    ds = two_data
    col = np.flatnonzero(ds.role == "collocation")[:2]
    lab = np.flatnonzero(ds.role == "train")[:2]
    only_col = Batch.from_dataset(ds, col)
    v = total_loss(m, q, only_col)
    assert v.mae_g == v.mae_v == v.mae_l == 0.0
    assert v.total == pytest.approx(m.loss_weights.lambda_eps * v.mae_eps)

    mixed = Batch.from_dataset(ds, np.r_[lab, col])
    full = total_loss(m, q, mixed)
    lab_only = total_loss(m, q, Batch.from_dataset(ds, lab))
    # supervised terms only see the labelled half; the residual sees all four rows
    assert full.mae_g == pytest.approx(lab_only.mae_g, rel=1e-14)
    s = m.scaling.dual_scale
    p = forward(m, mixed.D, n_eq=q.n_eq)
    terms, _ = physics_residuals(q, q.c / s, p.G, p.v, p.lam / s, p.mu / s, mixed.D)
    assert full.mae_eps == pytest.approx(terms.sum(1).mean(), rel=1e-12)
    # the primal term does not depend on the cost scale
    assert np.allclose(physics_loss(m, q, mixed.D) - terms[:, 3],
                       s * (terms[:, 0] + terms[:, 1] + terms[:, 2]), rtol=1e-10)
    w = m.loss_weights
    assert full.total == pytest.approx(w.lambda_P * full.mae_g + w.lambda_V * full.mae_v
                                       + w.lambda_L * full.mae_l + w.lambda_eps * full.mae_eps, rel=1e-14)
    doubled = total_loss(m, q, mixed, LossWeights(w.lambda_P, w.lambda_V, w.lambda_L, 2 * w.lambda_eps))
    assert doubled.total - full.total == pytest.approx(w.lambda_eps * full.mae_eps, rel=1e-12)


def test_dead_neuron_zero_gradient(two, two_data):
    case, q, box = two
    m = init_model(q, box, seed=2)
    m.heads["G"].biases[0][0] = -1e6
    _, grads = loss_and_grad(m, q, Batch.from_dataset(two_data))
    dW, db = grads["G"]
    assert np.all(dW[0][0] == 0) and db[0][0] == 0
    assert np.all(dW[1][:, 0] == 0)


@pytest.mark.parametrize("mode", ["correct", "paper-literal"])
def test_gradcheck(two, two_data, mode):
    from pinnopf.pinn import LossOptions
    case, q, box = two
    m = jitter(init_model(q, box, seed=3), seed=3)
    batch = Batch.from_dataset(two_data, np.arange(12))
    chk = finite_difference_check(m, q, batch, n_params=200, seed=1, options=LossOptions(mode))
    ok = ~chk.kink
    assert ok.sum() >= 180
    assert chk.rel_error[ok].max() < 1e-5


def test_degenerate_pinn_equals_standard(two, two_data):
    case, q, box = two
    cfg = TrainConfig(epochs=20, n_batches=4, seed=7)
    nn = init_model(q, box, seed=4, standard=True)
    pinn = init_model(q, box, seed=4, loss_weights=LossWeights(1.0, 0.0, 0.0, 0.0))
    a, _ = train(nn, q, two_data, cfg)
    b, _ = train(pinn, q, two_data, cfg)
    for x, y in zip(a.heads["G"].weights + a.heads["G"].biases, b.heads["G"].weights + b.heads["G"].biases):
        assert np.array_equal(x, y)


def test_zero_lr_unchanged(two, two_data):
    case, q, box = two
    m = init_model(q, box, seed=4)
    out, hist = train(m, q, two_data, TrainConfig(epochs=3, n_batches=2, lr=0.0))
    for (_, _, _, x), (_, _, _, y) in zip(m.parameters(), out.parameters()):
        assert np.array_equal(x, y)
    assert len(hist) == 3


def test_training_reduces_error(two, two_data):
    case, q, box = two
    nn = init_model(q, box, seed=0, standard=True)
    before = evaluate(nn, two_data, q, "test").mae_g
    out, hist = train(nn, q, two_data, TrainConfig(epochs=200, n_batches=4))
    assert evaluate(out, two_data, q, "test").mae_g < 0.5 * before
    assert hist.column("mae_g")[-1] < hist.column("mae_g")[0]


def test_pinn_residual_decreases(two, two_data):
    case, q, box = two
    m = init_model(q, box, seed=0)
    out, hist = train(m, q, two_data, TrainConfig(epochs=100, n_batches=4))
    eps = hist.column("mae_eps")
    assert eps[-10:].mean() < eps[:10].mean()
    assert evaluate(out, two_data, q, "test").mae_t < evaluate(m, two_data, q, "test").mae_t


def test_metrics_perfect_and_boundary():
    g_min, g_max = np.array([0.0, -1.0]), np.array([2.0, 1.0])
    c = np.array([10.0, 0.0])
    G = np.array([[1.0, 0.5], [1.5, -0.5]])
    m = dispatch_metrics(G, G, c, g_min, g_max)
    assert m.mae_t == m.v_g_avg == m.v_opt_avg == m.v_dist_avg == 0.0
    edge = np.array([[2.0, 1.0], [0.0, -1.0]])
    assert dispatch_metrics(edge, G, c, g_min, g_max).v_g_avg == 0.0
    over = np.array([[2.2, 1.0], [0.0, -1.0]])    # 0.2 above a 2.0 limit, one of four entries
    assert dispatch_metrics(over, G, c, g_min, g_max).v_g_avg == pytest.approx(100 * 0.1 / 4)


def test_metrics_manual_slice():
    g_min, g_max = np.array([0.0, 0.0]), np.array([1.0, 2.0])
    c = np.array([1.0, 3.0])
    G = np.array([[0.5, 1.0], [0.2, 0.4], [1.0, 2.0]])
    H = np.array([[0.6, 0.9], [0.2, 0.5], [1.2, 1.8]])
    m = dispatch_metrics(H, G, c, g_min, g_max)
    mae_t = np.mean([0.2 / 1.5, 0.1 / 0.6, 0.4 / 3.0]) * 100
    v_opt = np.mean([(0.1 - 0.3) / 3.5, 0.3 / 1.4, (0.2 - 0.6) / 7.0]) * 100
    v_g = (0.2 / 1.0) / 6 * 100
    v_dist = np.mean([0.1, 0.05, 0.0, 0.05, 0.2, 0.1]) * 100
    assert m.mae_t == pytest.approx(mae_t)
    assert m.v_opt_avg == pytest.approx(v_opt)
    assert m.v_g_avg == pytest.approx(v_g)
    assert m.v_dist_avg == pytest.approx(v_dist)
    assert m.n == 3
    with pytest.raises(ValueError):
        dispatch_metrics(H[:0], G[:0], c, g_min, g_max)


def test_model_round_trip(tmp_path, two, two_data):
    case, q, box = two
    m, hist = train(init_model(q, box, seed=1), q, two_data, TrainConfig(epochs=2, n_batches=2))
    back = load_model(save_model(m, tmp_path / "m.json"))
    assert back.fingerprint() == m.fingerprint()
    D = lhs_sample(box, 5, seed=0)
    assert np.array_equal(predict_g(back, D), predict_g(m, D))
    hist.save(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0].split(",")[:3] == ["epoch", "lr", "total"] and len(lines) == 3
