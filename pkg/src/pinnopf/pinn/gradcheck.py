"""Central finite-difference check of the analytic loss gradient."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .loss import loss_and_grad


@dataclass
class GradCheck:
    params: list[tuple]
    analytic: np.ndarray
    numeric: np.ndarray
    floor: float
    kink: np.ndarray

    @property
    def rel_error(self) -> np.ndarray:
        """``|a - n| / max(|a|, |n|)``; pairs both under ``floor`` use the floor as scale."""
        scale = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), self.floor)
        return np.abs(self.analytic - self.numeric) / scale

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if len(self.params) else 0.0


def _extended(model):
    m = model.copy()
    for h in m.heads.values():
        h.weights = [w.astype(np.longdouble) for w in h.weights]
        h.biases = [b.astype(np.longdouble) for b in h.biases]
    return m


def finite_difference_check(model, qcqp, batch, n_params=200, seed=0, h=1e-5, weights=None,
                            options=None, floor=1e-10, extended=True) -> GradCheck:
    """Compare analytic gradients with central differences on random parameters.

    The check is only meaningful at points where the loss is
    differentiable; ``kink`` flags samples whose one-sided slopes
    disagree (see ``jitter``). The loss is evaluated in extended precision for the difference
    quotient when ``extended`` is set (the analytic side stays in
    float64), which pushes rounding noise below the comparison
    tolerance. ``floor`` is the absolute scale used for gradients
    that are zero up to that noise.
    """
    _, grads = loss_and_grad(model, qcqp, batch, weights, options)
    probe = _extended(model) if extended else model.copy()
    plist = [(n, k, kind, arr) for n, k, kind, arr in probe.parameters()]
    sizes = np.array([a.size for *_, a in plist], dtype=float)
    rng = np.random.default_rng(seed)
    chosen, ana, num, kinks = [], [], [], []
    hh = probe.heads["G"].weights[0].dtype.type(h)
    for _ in range(n_params):
        j = rng.choice(len(plist), p=sizes / sizes.sum())
        name, k, kind, arr = plist[j]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + hh
        fp = loss_and_grad(probe, qcqp, batch, weights, options, want_grad=False)[0].total
        arr[idx] = old - hh
        fm = loss_and_grad(probe, qcqp, batch, weights, options, want_grad=False)[0].total
        arr[idx] = old
        f0 = loss_and_grad(probe, qcqp, batch, weights, options, want_grad=False)[0].total
        fwd, bwd = (fp - f0) / hh, (f0 - fm) / hh
        # one-sided slopes that disagree beyond O(h) curvature mean a kink at this point
        kinks.append(bool(abs(fwd - bwd) > 1e-3 * max(abs(fwd), abs(bwd), 1.0)))
        num.append(float((fp - fm) / (2 * hh)))
        ana.append(float(grads[name][0 if kind == "weight" else 1][k][idx]))
        chosen.append((name, k, kind, idx))
    return GradCheck(chosen, np.array(ana), np.array(num), floor, np.array(kinks, dtype=bool))


def jitter(model, scale=0.1, seed=0):
    """Copy of ``model`` with every bias perturbed, moving it off exact ties.

    Zero or flat-voltage biases with dead hidden layers produce outputs
    that hit constraint boundaries exactly, where the absolute-value
    residuals have kinks and no gradient exists.
    """
    m = model.copy()
    rng = np.random.default_rng(seed)
    for h in m.heads.values():
        for b in h.biases:
            b += rng.normal(0.0, scale, b.shape)
    return m
