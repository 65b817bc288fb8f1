"""Ground-truth worst case by enumerating ReLU activation patterns in input space."""
from __future__ import annotations

import numpy as np

from .bounds import Layers, network_forward, solve_lp

MAX_ORACLE_NEURONS = 20


def enumerate_patterns_oracle(layers: Layers, lower, upper, c_out, const=0.0,
                              max_neurons: int = MAX_ORACLE_NEURONS):
    """Maximise ``c_out . f(x) + const`` over the box by visiting every activation region.

    Neurons are assigned in ``(layer, index)`` order. On a fixed pattern
    every pre-activation is affine in ``x``, so each partial pattern is a
    polytope ``{x in box : A x <= b}``; empty ones are cut off with a
    feasibility LP and each full pattern contributes one LP maximum.
    Returns ``(value, x_star, n_regions)``.
    """
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    hidden = layers[:-1]
    n_neurons = sum(W.shape[0] for W, _ in hidden)
    if n_neurons > max_neurons:
        raise ValueError(f"oracle limited to {max_neurons} hidden neurons, got {n_neurons}")
    n0 = len(lower)
    box = list(zip(lower, upper))
    order = [(k, i) for k, (W, _) in enumerate(hidden) for i in range(W.shape[0])]
    best = [-np.inf, None, 0]

    def feasible(A, b):
        if not A:
            return True
        r = solve_lp(np.zeros(n0), np.array(A), np.array(b), bounds=box)
        return r.status == "optimal"

    def leaf(P, q, A, b):
        # output = c_out . (Wout h_K + bout) with h_K = P x + q
        Wo, bo = layers[-1]
        g = (c_out @ Wo) @ P
        g0 = float(c_out @ (Wo @ q + bo) + const)
        r = solve_lp(g, np.array(A) if A else None, np.array(b) if A else None, bounds=box, maximize=True)
        if r.status != "optimal":
            return
        best[2] += 1
        val = r.value + g0
        if val > best[0]:
            best[0], best[1] = val, r.x

    def visit(pos, P, q, Zp, Zq, layer_mask, A, b):
        # P, q: affine map of the previous layer's output; Zp, Zq: current layer pre-activation map
        if pos == len(order):
            leaf(*_close_layer(Zp, Zq, layer_mask), A, b)
            return
        k, i = order[pos]
        if i == 0 and pos > 0:
            P, q = _close_layer(Zp, Zq, layer_mask)
            W, bb = hidden[k]
            Zp, Zq = W @ P, W @ q + bb
            layer_mask = []
        for active in (True, False):
            row, rhs = (-Zp[i], Zq[i]) if active else (Zp[i], -Zq[i])
            A2, b2 = A + [row], b + [rhs]
            if feasible(A2, b2):
                visit(pos + 1, P, q, Zp, Zq, layer_mask + [active], A2, b2)

    W0, b0 = hidden[0]
    visit(0, np.eye(n0), np.zeros(n0), W0, b0.copy(), [], [], [])
    if best[1] is None:
        raise RuntimeError("no feasible activation region")
    return best[0], best[1], best[2]


def _close_layer(Zp, Zq, mask):
    m = np.array(mask, dtype=float)
    return Zp * m[:, None], Zq * m


def oracle_gen_objective(layers: Layers, lower, upper, index: int, side: str, limit: float):
    """Oracle for one generator-limit objective, in the same sign convention as the certifier."""
    n_out = layers[-1][0].shape[0]
    c = np.zeros(n_out)
    sign = 1.0 if side == "upper" else -1.0
    c[index] = sign
    value, x, n = enumerate_patterns_oracle(layers, lower, upper, c, -sign * limit)
    # re-evaluate through the plain forward pass for the attained value
    G, _ = network_forward(layers, x[None, :])
    return float(sign * (G[0, index] - limit)), x, n, value
