"""Portable algebraic export of the verification problems in CPLEX LP format.

``gen-milp`` writes the big-M ReLU encoding of the dispatch head with a
generator-limit objective. ``line-miqcqp`` adds the power-flow
equations as quadratic constraints using the bracketed quadratic block
of the LP format (``[ a x ^ 2 + b x * y ]``, no halving inside
constraints), the slack bus voltage magnitude as a bounded variable
and free slack injections.

Variable names: ``x<i>`` demand inputs, ``zp<k>_<i>`` pre-activations,
``z<k>_<i>`` activations, ``y<k>_<i>`` binaries, ``g<j>`` outputs,
``vr<n>``/``vi<n>`` bus voltages, ``ps``/``qs`` slack injections,
``ell<b>`` squared branch current, ``viol`` the maximised violation,
``t`` and ``s<j>`` the optional max-of-max selection.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..grid import NetworkCase, build_injection_forms, build_voltage_and_line_forms
from ..opf import net_injection
from .bnb import gen_objectives
from .bounds import BigMBounds, Layers, network_forward, propagate_bounds

GEN_MILP, LINE_MIQCQP = "gen-milp", "line-miqcqp"
_SECTIONS = ("maximize", "minimize", "subject to", "bounds", "binaries", "generals", "end")


@dataclass
class Constraint:
    name: str
    linear: dict[str, float]
    quad: dict[tuple[str, str], float]
    sense: str
    rhs: float


@dataclass
class LpModel:
    sense: str = "maximize"
    objective: dict[str, float] = field(default_factory=dict)
    constraints: list[Constraint] = field(default_factory=list)
    bounds: dict[str, tuple[float, float]] = field(default_factory=dict)
    binaries: list[str] = field(default_factory=list)
    comments: list[str] = field(default_factory=list)

    @property
    def variables(self) -> list[str]:
        seen = dict.fromkeys(self.objective)
        for c in self.constraints:
            seen.update(dict.fromkeys(c.linear))
            for a, b in c.quad:
                seen.update(dict.fromkeys((a, b)))
        seen.update(dict.fromkeys(self.bounds))
        seen.update(dict.fromkeys(self.binaries))
        return list(seen)

    def add(self, name, linear, sense, rhs, quad=None):
        lin = {k: float(v) for k, v in linear.items() if v != 0.0}
        self.constraints.append(Constraint(name, lin, dict(quad or {}), sense, float(rhs)))

    def objective_value(self, x: dict) -> float:
        return float(sum(a * x[v] for v, a in self.objective.items()))

    def residuals(self, x: dict) -> dict[str, float]:
        """Violation amount of every constraint and bound at assignment ``x`` (0 when satisfied)."""
        out = {}
        for c in self.constraints:
            lhs = sum(a * x[v] for v, a in c.linear.items())
            lhs += sum(a * x[u] * x[v] for (u, v), a in c.quad.items())
            d = lhs - c.rhs
            out[c.name] = abs(d) if c.sense == "=" else max(d, 0.0) if c.sense == "<=" else max(-d, 0.0)
        for v, (lo, hi) in self.bounds.items():
            out["bound:" + v] = max(lo - x[v], x[v] - hi, 0.0)
        for v in self.binaries:
            out["binary:" + v] = min(abs(x[v]), abs(x[v] - 1.0))
        return out


# --------------------------------------------------------------------------
# writer

def _num(a: float) -> str:
    return repr(float(a))


def _expr(linear: dict, quad: dict | None = None) -> str:
    parts = []
    for v, a in linear.items():
        parts.append(f"{'-' if a < 0 else '+'} {_num(abs(a))} {v}")
    if quad:
        q = []
        for (u, v), a in quad.items():
            term = f"{u} ^ 2" if u == v else f"{u} * {v}"
            q.append(f"{'-' if a < 0 else '+'} {_num(abs(a))} {term}")
        parts.append("+ [ " + " ".join(q) + " ]")
    if not parts:
        raise ValueError("empty expression")
    text = " ".join(parts)
    return text[2:] if text.startswith("+ ") else text


def write_lp(model: LpModel) -> str:
    lines = ["\\ " + c for c in model.comments]
    lines.append("Maximize" if model.sense == "maximize" else "Minimize")
    lines.append(" obj: " + _expr(model.objective))
    lines.append("Subject To")
    for c in model.constraints:
        lines.append(f" {c.name}: {_expr(c.linear, c.quad)} {c.sense} {_num(c.rhs)}")
    lines.append("Bounds")
    for v, (lo, hi) in model.bounds.items():
        if np.isinf(lo) and np.isinf(hi):
            lines.append(f" {v} free")
        else:
            los = "-inf" if np.isinf(lo) else _num(lo)
            his = "+inf" if np.isinf(hi) else _num(hi)
            lines.append(f" {los} <= {v} <= {his}")
    if model.binaries:
        lines.append("Binaries")
        lines.extend(" " + v for v in model.binaries)
    lines.append("End")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# reader

_TOKEN = re.compile(r"\[|\]|\^|\*|/|<=|>=|=<|=>|[<>=]|[+-]"
                    r"|(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?|[A-Za-z_][\w.]*")


def _parse_expr(tokens):
    """Parse a token list into ``(linear, quad)``; coefficients default to 1."""
    linear, quad = {}, {}
    i, sign, inbr = 0, 1.0, False
    while i < len(tokens):
        t = tokens[i]
        if t == "[":
            inbr, i = True, i + 1
            continue
        if t == "]":
            inbr, i = False, i + 1
            if i < len(tokens) and tokens[i] == "/":
                raise ValueError("halved quadratic blocks are only allowed in objectives")
            continue
        if t in "+-":
            sign = -1.0 if t == "-" else 1.0
            i += 1
            continue
        coef = 1.0
        try:
            coef = float(t)
            i += 1
        except ValueError:
            pass
        var = tokens[i]
        i += 1
        if inbr and i < len(tokens) and tokens[i] == "^":
            key = (var, var)
            i += 2
            quad[key] = quad.get(key, 0.0) + sign * coef
        elif inbr and i < len(tokens) and tokens[i] == "*":
            key = (var, tokens[i + 1])
            i += 2
            quad[key] = quad.get(key, 0.0) + sign * coef
        else:
            linear[var] = linear.get(var, 0.0) + sign * coef
        sign = 1.0
    return linear, quad


def read_lp(text: str) -> LpModel:
    """Parse the subset of LP format produced by :func:`write_lp`."""
    model = LpModel()
    section = None
    for raw in text.splitlines():
        line = raw.strip()
        if line.startswith("\\"):
            model.comments.append(line[1:].strip())
            continue
        if not line:
            continue
        low = line.lower()
        if low in _SECTIONS or low in ("subject to", "st", "s.t."):
            section = low
            if low in ("maximize", "minimize"):
                model.sense = low
            if low == "end":
                break
            continue
        if section in ("maximize", "minimize"):
            _, body = line.split(":", 1)
            model.objective, _ = _parse_expr(_TOKEN.findall(body))
        elif section in ("subject to", "st", "s.t."):
            name, body = line.split(":", 1)
            toks = _TOKEN.findall(body)
            k = next(j for j, t in enumerate(toks) if t in ("<=", ">=", "=", "<", ">", "=<", "=>"))
            sense = {"<": "<=", "=<": "<=", ">": ">=", "=>": ">="}.get(toks[k], toks[k])
            lin, quad = _parse_expr(toks[:k])
            rhs = float("".join(toks[k + 1:]))
            model.constraints.append(Constraint(name.strip(), lin, quad, sense, rhs))
        elif section == "bounds":
            toks = line.split()
            if len(toks) == 2 and toks[1].lower() == "free":
                model.bounds[toks[0]] = (-np.inf, np.inf)
            else:
                lo, _, v, _, hi = toks
                model.bounds[v] = (float(lo), float(hi))
        elif section in ("binaries", "generals"):
            model.binaries.extend(line.split())
    return model


# --------------------------------------------------------------------------
# problem builders

def _add_network(model: LpModel, layers: Layers, bounds: BigMBounds, lower, upper):
    for i, (lo, hi) in enumerate(zip(lower, upper)):
        model.bounds[f"x{i}"] = (float(lo), float(hi))
    prev = [f"x{i}" for i in range(len(lower))]
    for k, (W, b) in enumerate(layers[:-1]):
        cur = []
        for i in range(W.shape[0]):
            zp, z, y = f"zp{k}_{i}", f"z{k}_{i}", f"y{k}_{i}"
            lo, hi = bounds.zmin[k][i], bounds.zmax[k][i]
            lin = {zp: 1.0}
            for v, w in zip(prev, W[i]):
                lin[v] = lin.get(v, 0.0) - w
            model.add(f"aff{k}_{i}", lin, "=", b[i])
            model.add(f"ra{k}_{i}", {z: 1.0, zp: -1.0, y: -lo}, "<=", -lo)
            model.add(f"rb{k}_{i}", {z: 1.0, zp: -1.0}, ">=", 0.0)
            model.add(f"rc{k}_{i}", {z: 1.0, y: -hi}, "<=", 0.0)
            model.bounds[zp] = (float(lo), float(hi))
            model.bounds[z] = (0.0, float(max(hi, 0.0)))
            model.binaries.append(y)
            cur.append(z)
        prev = cur
    W, b = layers[-1]
    for j in range(W.shape[0]):
        lin = {f"g{j}": 1.0}
        for v, w in zip(prev, W[j]):
            lin[v] = lin.get(v, 0.0) - w
        model.add(f"out{j}", lin, "=", b[j])
        model.bounds[f"g{j}"] = (-np.inf, np.inf)


def _output_range(layers, bounds):
    W, b = layers[-1]
    lo = np.maximum(bounds.zmin[-1], 0.0) if bounds.zmin else None
    hi = np.maximum(bounds.zmax[-1], 0.0) if bounds.zmax else None
    Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
    return Wp @ lo + Wn @ hi + b, Wp @ hi + Wn @ lo + b


def build_gen_milp(layers: Layers, case: NetworkCase, box, objective="max",
                   bounds: BigMBounds | None = None) -> LpModel:
    """Big-M MILP for one generator-limit objective ``(index, side)`` or the max over all."""
    lower, upper = np.asarray(box.lower, dtype=float), np.asarray(box.upper, dtype=float)
    bounds = bounds or propagate_bounds(layers, lower, upper)
    m = LpModel(comments=[f"gen-milp export for {case.name}", "maximise the generator-limit violation"])
    _add_network(m, layers, bounds, lower, upper)
    objs = gen_objectives(case)
    if objective != "max":
        index, side = objective
        _, obj = next(o for o in objs if o[1].index == index and o[1].side == side)
        m.add("vdef", {"viol": 1.0, f"g{index}": -obj.sign}, "=", -obj.sign * obj.limit)
        m.bounds["viol"] = (-np.inf, np.inf)
        m.objective = {"viol": 1.0}
        m.comments.append(f"objective: {side} limit of output {index}")
        return m
    glo, ghi = _output_range(layers, bounds)
    vlo = np.array([o.sign * ((glo if o.sign > 0 else ghi)[o.index] - o.limit) for _, o in objs])
    vhi = np.array([o.sign * ((ghi if o.sign > 0 else glo)[o.index] - o.limit) for _, o in objs])
    top = max(0.0, float(vhi.max()))
    sel = {}
    for j, (_, o) in enumerate(objs):
        v = f"viol{j}"
        m.add(f"vdef{j}", {v: 1.0, f"g{o.index}": -o.sign}, "=", -o.sign * o.limit)
        m.bounds[v] = (-np.inf, np.inf)
        big = top - vlo[j]
        m.add(f"sel{j}", {"t": 1.0, v: -1.0, f"s{j}": big}, "<=", big)
        m.binaries.append(f"s{j}")
        sel[f"s{j}"] = 1.0
    # the zero option of max(., 0)
    m.add("sel_zero", {"t": 1.0, "s_zero": top}, "<=", top)
    m.binaries.append("s_zero")
    sel["s_zero"] = 1.0
    m.add("choose", sel, "=", 1.0)
    m.bounds["t"] = (-np.inf, np.inf)
    m.objective = {"t": 1.0}
    m.comments.append("objective: max over all generator limits and zero (selection binaries s*)")
    return m


def _quad_terms(M, names, scale=1.0):
    """``v' M v`` as LP quadratic terms over the named variables (M symmetric)."""
    out = {}
    n = len(names)
    for i in range(n):
        if M[i, i] != 0.0:
            out[(names[i], names[i])] = scale * M[i, i]
        for j in range(i + 1, n):
            if M[i, j] != 0.0:
                out[(names[i], names[j])] = scale * 2.0 * M[i, j]
    return out


def build_line_miqcqp(layers: Layers, case: NetworkCase, box, branch: int,
                      bounds: BigMBounds | None = None) -> LpModel:
    """MIQCQP maximising ``ell_b - ell_max_b`` over demand, slack voltage and the PF equations."""
    lower, upper = np.asarray(box.lower, dtype=float), np.asarray(box.upper, dtype=float)
    bounds = bounds or propagate_bounds(layers, lower, upper)
    m = LpModel(comments=[f"line-miqcqp export for {case.name}, branch {branch}",
                          "quadratic constraint blocks are not halved"])
    _add_network(m, layers, bounds, lower, upper)
    nb, s = case.n_bus, case.slack
    names = [f"vr{n}" for n in range(nb)] + [f"vi{n}" for n in range(nb)]
    Mp, Mq = build_injection_forms(case)
    _, Mi, _ = build_voltage_and_line_forms(case)
    gen_at = {case.bus_index[g.bus]: j for j, g in enumerate(case.generators)}
    load_at = {case.bus_index[ld.bus]: j for j, ld in enumerate(case.loads)}
    nd, ng = case.n_load, case.n_gen
    for kind, forms, goff, doff, slack_var in (("p", Mp, 0, 0, "ps"), ("q", Mq, ng, nd, "qs")):
        for n in range(nb):
            lin = {}
            if n == s:
                lin[slack_var] = -1.0
            elif n in gen_at:
                lin[f"g{goff + gen_at[n]}"] = -1.0
            if n in load_at:
                lin[f"x{doff + load_at[n]}"] = 1.0
            m.add(f"pf{kind}{n}", lin, "=", 0.0, _quad_terms(forms[n], names))
    for v in names:
        m.bounds[v] = (-np.inf, np.inf)
    bus = case.buses[s]
    m.bounds[f"vr{s}"] = (bus.v_min, bus.v_max)
    m.bounds[f"vi{s}"] = (0.0, 0.0)
    m.bounds["ps"] = (-np.inf, np.inf)
    m.bounds["qs"] = (-np.inf, np.inf)
    m.add(f"line{branch}", {f"ell{branch}": 1.0}, "=", 0.0, _quad_terms(Mi[branch], names, -1.0))
    m.bounds[f"ell{branch}"] = (-np.inf, np.inf)
    lim = case.branches[branch].current_limit
    m.add("vdef", {"viol": 1.0, f"ell{branch}": -1.0}, "=", -lim)
    m.bounds["viol"] = (-np.inf, np.inf)
    m.objective = {"viol": 1.0}
    return m


def assignment(layers: Layers, case: NetworkCase, D, objective=None, v=None, branch=None) -> dict:
    """Variable values implied by demand ``D`` (and a PF voltage ``v`` for line models)."""
    D = np.asarray(D, dtype=float)
    G, pre = network_forward(layers, D[None, :])
    x = {f"x{i}": float(d) for i, d in enumerate(D)}
    for k, z in enumerate(pre):
        for i, zi in enumerate(z[0]):
            x[f"zp{k}_{i}"] = float(zi)
            x[f"z{k}_{i}"] = float(max(zi, 0.0))
            x[f"y{k}_{i}"] = 1.0 if zi > 0 else 0.0
    for j, g in enumerate(G[0]):
        x[f"g{j}"] = float(g)
    objs = gen_objectives(case)
    viols = [float(o.value(G[0])) for _, o in objs]
    for j, val in enumerate(viols):
        x[f"viol{j}"] = val
    if objective == "max":
        jbest = int(np.argmax(viols))
        x["t"] = max(0.0, viols[jbest])
        for j in range(len(objs)):
            x[f"s{j}"] = 1.0 if (j == jbest and viols[jbest] > 0) else 0.0
        x["s_zero"] = 0.0 if viols[jbest] > 0 else 1.0
    elif objective is not None:
        index, side = objective
        o = next(o for _, o in objs if o.index == index and o.side == side)
        x["viol"] = float(o.value(G[0]))
    if v is not None:
        nb = case.n_bus
        v = np.asarray(v, dtype=float)
        for n in range(nb):
            x[f"vr{n}"], x[f"vi{n}"] = float(v[n]), float(v[nb + n])
        Mp, Mq = build_injection_forms(case)
        s = case.slack
        # injection with zero dispatch is minus the demand at each bus
        p_load, q_load = net_injection(case, np.zeros(2 * case.n_gen), D)
        x["ps"] = float(v @ Mp[s] @ v - p_load[s])
        x["qs"] = float(v @ Mq[s] @ v - q_load[s])
        if branch is not None:
            _, Mi, _ = build_voltage_and_line_forms(case)
            ell = float(v @ Mi[branch] @ v)
            x[f"ell{branch}"] = ell
            x["viol"] = ell - case.branches[branch].current_limit
    return x


def export_verification_model(model_or_layers, case: NetworkCase, box, target: str, path,
                              objective="max", branch: int | None = None) -> LpModel:
    layers = model_or_layers.g_head_affine() if hasattr(model_or_layers, "g_head_affine") else model_or_layers
    if target == GEN_MILP:
        lp = build_gen_milp(layers, case, box, objective)
    elif target == LINE_MIQCQP:
        if branch is None:
            raise ValueError("line-miqcqp export needs a branch index")
        lp = build_line_miqcqp(layers, case, box, branch)
    else:
        raise ValueError(f"unknown export target {target!r}")
    Path(path).write_text(write_lp(lp))
    return lp
