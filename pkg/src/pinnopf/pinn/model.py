"""Three-head ReLU network mapping demand to dispatch, voltages and duals."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..grid import CanonicalQcqp

MODEL_FORMAT = "pinnopf-model"
MODEL_VERSION = 1
HEADS = ("G", "V", "L")

# Hidden widths per head; the 14-bus network gets the narrow set.
_DEFAULT_WIDTHS = {14: {"G": 5, "V": 10, "L": 20}}
_LARGE_WIDTHS = {"G": 20, "V": 30, "L": 50}
_SMALL_WIDTHS = {"G": 5, "V": 10, "L": 20}


def default_widths(n_bus: int) -> dict[str, int]:
    if n_bus in _DEFAULT_WIDTHS:
        return dict(_DEFAULT_WIDTHS[n_bus])
    return dict(_SMALL_WIDTHS if n_bus < 14 else _LARGE_WIDTHS)


@dataclass(frozen=True)
class LossWeights:
    lambda_P: float = 1.0
    lambda_V: float = 1.0
    lambda_L: float = 0.1
    lambda_eps: float = 0.1

    def __post_init__(self):
        if min(self.lambda_P, self.lambda_V, self.lambda_L, self.lambda_eps) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def standard(cls, lambda_P: float = 1.0):
        return cls(lambda_P, 0.0, 0.0, 0.0)

    @property
    def is_standard(self) -> bool:
        return self.lambda_V == self.lambda_L == self.lambda_eps == 0.0

    def as_dict(self):
        return {"lambda_P": self.lambda_P, "lambda_V": self.lambda_V,
                "lambda_L": self.lambda_L, "lambda_eps": self.lambda_eps}


@dataclass
class Head:
    """Affine layers ``z = W h + b``; ReLU between hidden layers, linear output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def hidden_widths(self) -> list[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    @property
    def n_hidden(self) -> int:
        return sum(self.hidden_widths)

    def copy(self) -> "Head":
        return Head([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class Scaling:
    """Affine maps between physical units and network space.

    Inputs map ``[input_lower, input_upper] -> [0, 1]``. The G head
    outputs ``(G - g_lower) / g_span``; the L head outputs duals divided
    by ``dual_scale``; the V head is unscaled.
    """

    input_lower: np.ndarray
    input_upper: np.ndarray
    g_lower: np.ndarray
    g_upper: np.ndarray
    dual_scale: float = 1.0

    @property
    def input_span(self) -> np.ndarray:
        span = self.input_upper - self.input_lower
        return np.where(span > 0, span, 1.0)

    @property
    def g_span(self) -> np.ndarray:
        span = self.g_upper - self.g_lower
        return np.where(span > 0, span, 1.0)

    def scale_input(self, D):
        return (np.asarray(D) - self.input_lower) / self.input_span

    def unscale_input(self, x):
        return self.input_lower + np.asarray(x) * self.input_span

    def unscale_g(self, y):
        return self.g_lower + y * self.g_span


@dataclass
class PinnModel:
    case_id: str
    heads: dict[str, Head]
    scaling: Scaling
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    provenance: dict = field(default_factory=dict)

    @property
    def n_in(self) -> int:
        return self.heads["G"].weights[0].shape[1]

    @property
    def is_standard(self) -> bool:
        return set(self.heads) == {"G"}

    def copy(self) -> "PinnModel":
        return replace(self, heads={k: h.copy() for k, h in self.heads.items()},
                       provenance=dict(self.provenance))

    def parameters(self):
        """Yield ``(head, layer, kind, array)`` in a fixed order."""
        for name in HEADS:
            if name not in self.heads:
                continue
            h = self.heads[name]
            for k, (w, b) in enumerate(zip(h.weights, h.biases)):
                yield name, k, "weight", w
                yield name, k, "bias", b

    def n_parameters(self) -> int:
        return sum(p.size for *_, p in self.parameters())

    def g_head_affine(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """G-head layers with both scalings composed in (physical D -> physical G)."""
        h = self.heads["G"]
        sc = self.scaling
        layers = [(w.copy(), b.copy()) for w, b in zip(h.weights, h.biases)]
        W0, b0 = layers[0]
        inv = 1.0 / sc.input_span
        layers[0] = (W0 * inv[None, :], b0 - W0 @ (sc.input_lower * inv))
        Wn, bn = layers[-1]
        layers[-1] = (Wn * sc.g_span[:, None], sc.g_lower + bn * sc.g_span)
        return layers

    def fingerprint(self) -> str:
        return hashlib.sha256(model_to_json(self).encode()).hexdigest()[:16]


def _init_head(rng, sizes: list[int]) -> Head:
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Head(weights, biases)


def init_model(qcqp: CanonicalQcqp, box, widths: dict[str, int] | None = None, n_layers: int = 3,
               seed: int = 0, loss_weights: LossWeights | None = None, standard: bool = False,
               case_id: str | None = None) -> PinnModel:
    """Fresh model with He-uniform weights; each head draws from its own stream.

    ``standard=True`` builds the G head only.
    """
    case = qcqp.case
    widths = dict(default_widths(case.n_bus), **(widths or {}))
    if n_layers < 1:
        raise ValueError("need at least one hidden layer")
    outs = {"G": qcqp.n_g, "V": qcqp.n_v, "L": qcqp.n_eq + qcqp.n_ineq}
    n_in = qcqp.n_d
    heads = {}
    for i, name in enumerate(HEADS):
        if standard and name != "G":
            continue
        rng = np.random.default_rng([seed, i])
        sizes = [n_in] + [int(widths[name])] * n_layers + [outs[name]]
        heads[name] = _init_head(rng, sizes)
    if "V" in heads:
        heads["V"].biases[-1][: case.n_bus] = 1.0
    scaling = Scaling(np.array(box.lower, dtype=float), np.array(box.upper, dtype=float),
                      case.g_min, case.g_max, float(np.max(np.abs(qcqp.c))) or 1.0)
    if standard:
        lw = LossWeights.standard((loss_weights or LossWeights()).lambda_P)
    else:
        lw = loss_weights or LossWeights()
    return PinnModel(case_id or case.name, heads, scaling, lw, int(seed))


def head_forward(head: Head, x):
    """Return ``(output, pre_activations, activations)`` for a batch ``x``."""
    acts = [x]
    pre = []
    h = x
    for w, b in zip(head.weights[:-1], head.biases[:-1]):
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    out = h @ head.weights[-1].T + head.biases[-1]
    return out, pre, acts


@dataclass
class Prediction:
    G: np.ndarray
    v: np.ndarray | None
    lam: np.ndarray | None
    mu: np.ndarray | None
    pre_activations: dict[str, list[np.ndarray]]


def forward(model: PinnModel, D, n_eq: int | None = None) -> Prediction:
    """Evaluate every head on demand ``D`` (one vector or a batch), physical units out."""
    D = np.asarray(D, dtype=float)
    single = D.ndim == 1
    X = model.scaling.scale_input(np.atleast_2d(D))
    out = {}
    pre = {}
    for name, head in model.heads.items():
        out[name], pre[name], _ = head_forward(head, X)
    G = model.scaling.unscale_g(out["G"])
    v = out.get("V")
    lam = mu = None
    if "L" in out:
        if n_eq is None:
            raise ValueError("n_eq is required to split the dual head")
        duals = out["L"] * model.scaling.dual_scale
        lam, mu = duals[:, :n_eq], duals[:, n_eq:]
    if single:
        G = G[0]
        v = None if v is None else v[0]
        lam = None if lam is None else lam[0]
        mu = None if mu is None else mu[0]
        pre = {k: [z[0] for z in zs] for k, zs in pre.items()}
    return Prediction(G, v, lam, mu, pre)


def predict_g(model: PinnModel, D) -> np.ndarray:
    X = model.scaling.scale_input(np.atleast_2d(np.asarray(D, dtype=float)))
    y, _, _ = head_forward(model.heads["G"], X)
    G = model.scaling.unscale_g(y)
    return G[0] if np.ndim(D) == 1 else G


# --------------------------------------------------------------------------
# persistence

def model_to_dict(model: PinnModel) -> dict:
    heads = {}
    for name, h in model.heads.items():
        heads[name] = {"layers": [{"weight": w.tolist(), "bias": b.tolist()}
                                  for w, b in zip(h.weights, h.biases)]}
    sc = model.scaling
    g = model.heads["G"]
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "case_id": model.case_id,
        "K": len(g.weights) - 1,
        "sizes": {name: h.hidden_widths[0] if h.hidden_widths else 0 for name, h in model.heads.items()},
        "heads": heads,
        "scaling": {"input_lower": sc.input_lower.tolist(), "input_upper": sc.input_upper.tolist(),
                    "g_lower": sc.g_lower.tolist(), "g_upper": sc.g_upper.tolist(),
                    "dual_scale": sc.dual_scale},
        "loss_weights": model.loss_weights.as_dict(),
        "seed": model.seed,
        "provenance": model.provenance,
    }


def model_to_json(model: PinnModel) -> str:
    return json.dumps(model_to_dict(model), sort_keys=True, indent=1) + "\n"


def model_from_dict(d: dict) -> PinnModel:
    if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
        raise ValueError("not a supported model document")
    heads = {}
    for name, h in d["heads"].items():
        heads[name] = Head([np.array(l["weight"], dtype=float).reshape(len(l["bias"]), -1)
                            for l in h["layers"]],
                           [np.array(l["bias"], dtype=float) for l in h["layers"]])
    s = d["scaling"]
    scaling = Scaling(np.array(s["input_lower"]), np.array(s["input_upper"]),
                      np.array(s["g_lower"]), np.array(s["g_upper"]), float(s["dual_scale"]))
    return PinnModel(d["case_id"], heads, scaling, LossWeights(**d["loss_weights"]),
                     int(d["seed"]), dict(d.get("provenance", {})))


def save_model(model: PinnModel, path) -> Path:
    path = Path(path)
    path.write_text(model_to_json(model))
    return path


def load_model(path) -> PinnModel:
    return model_from_dict(json.loads(Path(path).read_text()))
