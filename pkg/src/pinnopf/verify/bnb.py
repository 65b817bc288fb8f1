"""Exact worst-case generation-limit violation of the dispatch head by branch and bound."""
from __future__ import annotations

import hashlib
import heapq
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from ..grid import NetworkCase
from .bounds import BadBoundsError, BigMBounds, Encoding, Layers, network_forward, propagate_bounds

PROVEN, BOUND_ONLY, TIMEOUT = "proven", "bound-only", "timeout"
GAP_TOL = 1e-6
INT_TOL = 1e-9


@dataclass(frozen=True)
class Objective:
    """``sign * G_j + offset``: ``upper`` gives ``G_j - Gmax_j``, ``lower`` gives ``Gmin_j - G_j``."""

    index: int
    side: str
    limit: float

    @property
    def sign(self) -> float:
        return 1.0 if self.side == "upper" else -1.0

    def value(self, G):
        return self.sign * (np.asarray(G)[..., self.index] - self.limit)


@dataclass
class ViolationCertificate:
    constraint: dict
    bound_pu: float
    bound_physical: float
    witness_D: list
    witness_G: list
    gap: float
    status: str
    nodes: int
    seconds: float | None = None

    @property
    def proven(self) -> bool:
        return self.status == PROVEN

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class GenReport:
    certificates: list[ViolationCertificate]
    v_g_pu: float
    v_g_mw: float
    v_g_percent: float
    status: str
    box: dict = field(default_factory=dict)
    model_hash: str = ""
    case_id: str = ""

    @property
    def worst(self) -> ViolationCertificate:
        return max(self.certificates, key=lambda c: c.bound_pu)

    def to_dict(self):
        return {"model_hash": self.model_hash, "case_id": self.case_id, "box": self.box,
                "v_g_pu": self.v_g_pu, "v_g_mw": self.v_g_mw, "v_g_percent": self.v_g_percent,
                "status": self.status, "certificates": [c.to_dict() for c in self.certificates]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def gen_objectives(case: NetworkCase) -> list[tuple[dict, Objective]]:
    """The 4 N_g linear objectives in the order P-upper, P-lower, Q-upper, Q-lower."""
    ng = case.n_gen
    gmin, gmax = case.g_min, case.g_max
    out = []
    for kind, off in (("P", 0), ("Q", ng)):
        for side in ("upper", "lower"):
            for j in range(ng):
                lim = gmax[off + j] if side == "upper" else gmin[off + j]
                cid = {"kind": "gen-" + kind, "generator": int(case.generators[j].bus), "index": off + j,
                       "side": side}
                out.append((cid, Objective(off + j, side, float(lim))))
    return out


def _seed_points(lower, upper, n_seed, seed):
    pts = [0.5 * (lower + upper)]
    if n_seed > 0:
        u = qmc.LatinHypercube(d=len(lower), seed=np.random.default_rng(seed)).random(n_seed)
        pts.extend(lower + u * (upper - lower))
    return np.array(pts)


@dataclass
class BnbResult:
    value: float
    witness: np.ndarray
    gap: float
    status: str
    nodes: int


def maximize_output(layers: Layers, bounds: BigMBounds, lower, upper, objective: Objective,
                    max_nodes: int = 200_000, time_limit: float | None = None, incumbents=None,
                    n_seed: int = 32, seed: int = 0, encoding: Encoding | None = None) -> BnbResult:
    """Best-bound branch and bound on the big-M encoding for one linear objective.

    Every LP solution is pushed through the network to update the
    incumbent, so the returned value is always attained by ``witness``.
    Branching picks the unfixed binary with the largest
    ``min(y, 1 - y) * (zmax - zmin)``, ties broken by ``(layer, index)``.
    """
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    enc = encoding or Encoding(layers, bounds, lower, upper)
    W, b = layers[-1]
    c, const = enc.linear_of_output(objective.sign * W[objective.index],
                                    objective.sign * (b[objective.index] - objective.limit))
    spread = np.array([bounds.zmax[k][i] - bounds.zmin[k][i] for k, i in enc.unstable])

    def evaluate(X):
        G, _ = network_forward(layers, X)
        return objective.value(G)

    pts = _seed_points(lower, upper, n_seed, seed)
    if incumbents is not None and len(incumbents):
        pts = np.vstack([pts, np.clip(np.atleast_2d(incumbents), lower, upper)])
    vals = evaluate(pts)
    best_i = int(np.argmax(vals))
    best, witness = float(vals[best_i]), pts[best_i].copy()

    nu = len(enc.unstable)
    start = time.monotonic()
    heap = [(-np.inf, 0, np.zeros(nu), np.ones(nu))]
    counter = 1
    nodes = 0
    excess = 0.0
    status = PROVEN
    while heap:
        neg_ub, _, ylo, yhi = heap[0]
        if -neg_ub <= best:
            break
        if nodes >= max_nodes:
            status = BOUND_ONLY
            break
        if time_limit is not None and time.monotonic() - start > time_limit:
            status = TIMEOUT
            break
        heapq.heappop(heap)
        nodes += 1
        res = enc.solve(c, const, ylo, yhi)
        if res.status == "infeasible":
            continue
        if res.status == "unbounded":
            raise BadBoundsError("unbounded relaxation in branch and bound")
        if res.status != "optimal":
            raise RuntimeError("LP solver failure in branch and bound")
        ub = res.value
        x = res.x[enc.x_idx]
        v = float(evaluate(x[None, :])[0])
        if v > best:
            best, witness = v, x.copy()
        if ub <= best:
            continue
        y = res.x[enc.y_idx]
        frac = np.where(ylo == yhi, 0.0, np.minimum(y, 1.0 - y))
        score = frac * spread
        if nu == 0 or score.max() <= INT_TOL:
            # integral relaxation optimum: the node is solved exactly
            excess = max(excess, ub - best)
            continue
        j = int(np.argmax(score))
        for val in (0.0, 1.0):
            lo2, hi2 = ylo.copy(), yhi.copy()
            lo2[j] = hi2[j] = val
            heapq.heappush(heap, (-ub, counter, lo2, hi2))
            counter += 1
    open_ub = max((-h[0] for h in heap), default=-np.inf)
    gap = max(0.0, excess, open_ub - best)
    if status == PROVEN and gap > GAP_TOL:
        status = BOUND_ONLY
    return BnbResult(best, witness, gap, status, nodes)


def model_hash(layers: Layers) -> str:
    h = hashlib.sha256()
    for W, b in layers:
        h.update(np.ascontiguousarray(W).tobytes())
        h.update(np.ascontiguousarray(b).tobytes())
    return h.hexdigest()[:16]


def certify_gen_violation(model_or_layers, case: NetworkCase, box, bounds: BigMBounds | None = None,
                          threads: int = 1, max_nodes: int = 200_000, time_limit: float | None = None,
                          incumbents=None, lp_tighten: bool = True, record_time: bool = False,
                          seed: int = 0) -> GenReport:
    """Certify all ``4 N_g`` generator-limit objectives of the dispatch head over ``box``.

    ``model_or_layers`` is a trained model (its G head is used with the
    scalings composed in) or a list of physical-unit affine layers.
    ``incumbents`` are extra starting points, e.g. witnesses from a
    smaller box. Certificates are independent of ``threads``.
    """
    layers = model_or_layers.g_head_affine() if hasattr(model_or_layers, "g_head_affine") else model_or_layers
    lower, upper = np.asarray(box.lower, dtype=float), np.asarray(box.upper, dtype=float)
    if bounds is None:
        bounds = propagate_bounds(layers, lower, upper, lp_tighten=lp_tighten)
    enc = Encoding(layers, bounds, lower, upper)
    objs = gen_objectives(case)

    def run(item):
        cid, obj = item
        t0 = time.monotonic()
        r = maximize_output(layers, bounds, lower, upper, obj, max_nodes, time_limit, incumbents,
                            seed=seed, encoding=enc)
        G = network_forward(layers, r.witness[None, :])[0][0]
        secs = time.monotonic() - t0 if record_time else None
        return ViolationCertificate(cid, r.value, r.value * case.base_mva, r.witness.tolist(), G.tolist(),
                                    r.gap, r.status, r.nodes, secs)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            certs = list(ex.map(run, objs))
    else:
        certs = [run(o) for o in objs]
    v = max(0.0, max(c.bound_pu for c in certs))
    status = PROVEN
    for c in certs:
        if c.status != PROVEN:
            status = c.status if status == PROVEN else status
    mw = v * case.base_mva
    return GenReport(certs, v, mw, 100.0 * mw / case.max_loading_mw(), status,
                     {"lower": lower.tolist(), "upper": upper.tolist(),
                      "delta": getattr(box, "delta", None)},
                     model_hash(layers), case.name)
