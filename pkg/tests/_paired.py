"""Paired NN versus PINN experiment on case14 shared by the acceptance checks.

Loss weights are selected once on a separate selection seed, by
validation MAE_T (average objective) and by certified v_g (worst-case
objective). Each evaluation seed then trains the standard network and
both selected PINNs from the same initial G head and batch order.
"""
import time
from dataclasses import dataclass, field

import numpy as np

from pinnopf.data import DemandBox, label_samples, lhs_sample, split_dataset
from pinnopf.grid import assemble_canonical, load_case
from pinnopf.pinn import LossWeights, TrainConfig, evaluate, init_model, train
from pinnopf.verify import certify_gen_violation

N_TRAIN = N_COLLOCATION = N_TEST = 300
N_VALIDATION = 200
EVAL_SEEDS = (0, 1, 2, 3, 4)
SELECTION_SEED = 100
EPOCHS = 1000
N_BATCHES = 10
GRID = [LossWeights(p, 1.0, 0.1, e) for p in (1.0, 10.0) for e in (0.01, 0.1)]


@dataclass
class PairedResult:
    weights_avg: LossWeights
    weights_wc: LossWeights
    selection: list
    rows: list = field(default_factory=list)      # (seed, nn_mae, pinn_mae, nn_vg, pinn_wc_vg)
    models: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    seconds: float = 0.0


def build_data(case, q):
    box = DemandBox.from_case(case)
    rep = label_samples(q, lhs_sample(box, N_TRAIN + N_COLLOCATION + N_TEST, seed=2024))
    fr = {"collocation": 1 / 3, "train": 1 / 3, "test": 1 / 3}
    ds = split_dataset(rep, case.name, box, seed=2024, fractions=fr)
    vrep = label_samples(q, lhs_sample(box, N_VALIDATION, seed=2025))
    val = split_dataset(vrep, case.name, box, seed=2025, fractions={"collocation": 0.0, "train": 0.0, "test": 1.0})
    return box, ds, val


def _fit(q, box, ds, seed, weights):
    standard = weights is None
    w = LossWeights.standard() if standard else weights
    m = init_model(q, box, seed=seed, standard=standard, loss_weights=w)
    cfg = TrainConfig(epochs=EPOCHS, n_batches=N_BATCHES, seed=seed, weights=w)
    return train(m, q, ds, cfg)[0]


def run_paired(log=print) -> PairedResult:
    t0 = time.monotonic()
    case = load_case("case14")
    q = assemble_canonical(case)
    box, ds, val = build_data(case, q)
    counts = ds.counts()
    assert counts == {"collocation": N_COLLOCATION, "train": N_TRAIN, "test": N_TEST}, counts

    selection = []
    for w in GRID:
        m = _fit(q, box, ds, SELECTION_SEED, w)
        mae = evaluate(m, val, q).mae_t
        vg = certify_gen_violation(m, case, box).v_g_mw
        selection.append((w, mae, vg))
        log(f"  select {w.as_dict()} val MAE_T {mae:.3f}% v_g {vg:.3f} MW")
    w_avg = min(selection, key=lambda s: s[1])[0]
    w_wc = min(selection, key=lambda s: s[2])[0]
    res = PairedResult(w_avg, w_wc, selection)

    for s in EVAL_SEEDS:
        nn = _fit(q, box, ds, s, None)
        pa = _fit(q, box, ds, s, w_avg)
        pw = pa if w_wc == w_avg else _fit(q, box, ds, s, w_wc)
        res.models[s] = {"nn": nn, "pinn_avg": pa, "pinn_wc": pw}
        r_nn = certify_gen_violation(nn, case, box)
        r_pw = certify_gen_violation(pw, case, box)
        res.reports[s] = {"nn": r_nn, "pinn_wc": r_pw}
        row = (s, evaluate(nn, ds, q, "test").mae_t, evaluate(pa, ds, q, "test").mae_t, r_nn.v_g_mw, r_pw.v_g_mw)
        res.rows.append(row)
        log("  seed %d  MAE_T nn %.3f%% pinn %.3f%%  v_g nn %.4f MW pinn %.4f MW" % row)
    res.seconds = time.monotonic() - t0
    return res


if __name__ == "__main__":
    r = run_paired()
    print("avg weights", r.weights_avg, "wc weights", r.weights_wc, "%.0fs" % r.seconds)
