"""Grid data model, case-file parsing and quadratic-form assembly.

All quantities inside :class:`NetworkCase` are stored in per-unit on the
system base; MW / MVAr / MVA only appear when parsing or reporting.

The voltage vector used throughout is rectangular and stacked as
``v = [vr_1..vr_Nb, vi_1..vi_Nb]``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from typing import NamedTuple

import numpy as np

SLACK, PV, PQ = "slack", "PV", "PQ"
_BUS_TYPES = {1: PQ, 2: PV, 3: SLACK}

# Squared-current bound used when a branch carries rateA = 0 (unrated).
UNRATED_LIMIT = 1.0e4


class CaseFormatError(ValueError):
    """Raised for malformed or physically inconsistent case files."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Bus:
    id: int
    type: str
    v_min: float
    v_max: float
    gs: float = 0.0
    bs: float = 0.0


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_p: float = 0.0
    cost_q: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float
    current_limit: float


@dataclass(frozen=True)
class Load:
    bus: int
    p_max: float
    q_max: float


@dataclass(frozen=True)
class NetworkCase:
    """Physical grid in per-unit.

    ``current_limit`` on each branch is the squared-current bound, and
    ``p_max``/``q_max`` on each load is the maximum loading.
    """

    base_mva: float
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[Branch, ...]
    loads: tuple[Load, ...]
    name: str = "case"

    def __post_init__(self):
        _validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_load(self) -> int:
        return len(self.loads)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def slack(self) -> int:
        """Internal index of the slack bus."""
        return next(i for i, b in enumerate(self.buses) if b.type == SLACK)

    @property
    def d_max(self) -> np.ndarray:
        """Maximum loading ``[Pd; Qd]`` in p.u., length ``2 N_d``."""
        return np.array([ld.p_max for ld in self.loads] + [ld.q_max for ld in self.loads])

    @property
    def g_min(self) -> np.ndarray:
        return np.array([g.p_min for g in self.generators] + [g.q_min for g in self.generators])

    @property
    def g_max(self) -> np.ndarray:
        return np.array([g.p_max for g in self.generators] + [g.q_max for g in self.generators])

    @property
    def cost(self) -> np.ndarray:
        """Linear cost per p.u. generation ($/h), length ``2 N_g``."""
        c = [g.cost_p for g in self.generators] + [g.cost_q for g in self.generators]
        return np.array(c) * self.base_mva

    def max_loading_mw(self) -> float:
        return float(sum(ld.p_max for ld in self.loads) * self.base_mva)

    def max_loading_mva(self) -> float:
        return float(sum(np.hypot(ld.p_max, ld.q_max) for ld in self.loads) * self.base_mva)


def _validate(case: NetworkCase) -> None:
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseFormatError("duplicate bus id")
    n_slack = sum(b.type == SLACK for b in case.buses)
    if n_slack == 0:
        raise CaseFormatError("no slack bus")
    if n_slack > 1:
        raise CaseFormatError("duplicate slack bus")
    known = set(ids)
    for b in case.buses:
        if not b.v_min < b.v_max:
            raise CaseFormatError(f"bus {b.id}: v_min must be below v_max")
    seen = set()
    for g in case.generators:
        if g.bus not in known:
            raise CaseFormatError(f"generator at unknown bus {g.bus}")
        if g.bus in seen:
            raise CaseFormatError(f"more than one generator at bus {g.bus}")
        seen.add(g.bus)
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise CaseFormatError(f"generator at bus {g.bus}: inverted limits")
    for br in case.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise CaseFormatError(f"dangling branch endpoint {end}")
        if br.r == 0 and br.x == 0:
            raise CaseFormatError(f"zero-impedance branch {br.from_bus}-{br.to_bus}")
    for ld in case.loads:
        if ld.bus not in known:
            raise CaseFormatError(f"load at unknown bus {ld.bus}")


# --------------------------------------------------------------------------
# parsing

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    return line.split("%", 1)[0].split("#", 1)[0]


def _read_sections(text: str) -> tuple[dict[str, object], dict[str, int]]:
    """Split an M-case text into ``{name: scalar or rows}`` plus start lines."""
    sections: dict[str, object] = {}
    lines: dict[str, int] = {}
    current = None
    rows: list[tuple[int, list[float]]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if current is not None:
            body = line
            closing = "]" in body
            if closing:
                body = body.split("]", 1)[0]
            for chunk in body.split(";"):
                chunk = chunk.strip()
                if chunk:
                    rows.append((lineno, _parse_numbers(chunk, lineno)))
            if closing:
                sections[current] = rows
                current, rows = None, []
            continue
        m = _ASSIGN.match(line)
        if m is None:
            if line.startswith("function"):
                continue
            raise CaseFormatError(f"cannot parse {line!r}", lineno)
        name, rhs = m.group(1), m.group(2).strip()
        lines[name] = lineno
        if rhs.startswith("["):
            current, rows = name, []
            body = rhs[1:]
            closing = "]" in body
            if closing:
                body = body.split("]", 1)[0]
            for chunk in body.split(";"):
                chunk = chunk.strip()
                if chunk:
                    rows.append((lineno, _parse_numbers(chunk, lineno)))
            if closing:
                sections[current] = rows
                current, rows = None, []
        else:
            rhs = rhs.rstrip(";").strip()
            if rhs.startswith("'") or rhs.startswith('"'):
                sections[name] = rhs.strip("'\"")
            else:
                sections[name] = _parse_numbers(rhs, lineno)[0]
    if current is not None:
        raise CaseFormatError(f"unterminated matrix {current!r}", lines.get(current))
    return sections, lines


def _parse_numbers(chunk: str, lineno: int) -> list[float]:
    try:
        return [float(tok) for tok in chunk.replace(",", " ").split()]
    except ValueError:
        raise CaseFormatError(f"non-numeric entry in {chunk!r}", lineno) from None


def _rows(sections, name, lines) -> list[tuple[int, list[float]]]:
    if name not in sections:
        raise CaseFormatError(f"missing required matrix {name!r}")
    rows = sections[name]
    if not isinstance(rows, list):
        raise CaseFormatError(f"{name!r} must be a matrix", lines.get(name))
    return rows


def parse_case_text(text: str, name: str = "case") -> NetworkCase:
    """Parse the compact (or full MATPOWER) case text into a :class:`NetworkCase`.

    Row widths decide the layout: compact rows carry only the columns
    listed in the bundled case headers, full MATPOWER rows are recognised
    by their width (13 bus columns, >= 10 gen columns, >= 11 branch
    columns) and reduced to the same data.
    """
    sections, lines = _read_sections(text)
    if "baseMVA" not in sections:
        raise CaseFormatError("missing required scalar 'baseMVA'")
    base = float(sections["baseMVA"])
    if base <= 0:
        raise CaseFormatError("baseMVA must be positive", lines.get("baseMVA"))

    buses, loads = [], []
    for lineno, row in _rows(sections, "bus", lines):
        if len(row) >= 13:  # full MATPOWER bus row
            bid, btype, pd, qd, gs, bs = row[0], row[1], row[2], row[3], row[4], row[5]
            vmax, vmin = row[11], row[12]
        elif len(row) in (6, 8):
            bid, btype, pd, qd, vmin, vmax = row[:6]
            gs, bs = (row[6], row[7]) if len(row) == 8 else (0.0, 0.0)
        else:
            raise CaseFormatError(f"bus row has {len(row)} columns", lineno)
        if int(btype) not in _BUS_TYPES:
            raise CaseFormatError(f"unsupported bus type {int(btype)}", lineno)
        buses.append(Bus(int(bid), _BUS_TYPES[int(btype)], vmin, vmax, gs / base, bs / base))
        if pd != 0 or qd != 0:
            loads.append(Load(int(bid), pd / base, qd / base))
    if sum(b.type == SLACK for b in buses) > 1:
        raise CaseFormatError("duplicate slack bus", lines.get("bus"))

    gens = []
    for lineno, row in _rows(sections, "gen", lines):
        if len(row) >= 10:  # full MATPOWER gen row
            if len(row) > 7 and row[7] <= 0:
                continue
            bus, pmax, pmin, qmax, qmin = row[0], row[8], row[9], row[3], row[4]
        elif len(row) == 5:
            bus, pmax, pmin, qmax, qmin = row
        else:
            raise CaseFormatError(f"gen row has {len(row)} columns", lineno)
        gens.append([int(bus), pmin / base, pmax / base, qmin / base, qmax / base])

    costs = []
    if "gencost" in sections:
        for lineno, row in _rows(sections, "gencost", lines):
            if len(row) >= 5 and row[0] == 2:  # MATPOWER polynomial row
                ncoef = int(row[3])
                coefs = row[4:4 + ncoef]
                if any(coefs[:-2]):
                    raise CaseFormatError("only linear generation costs are supported", lineno)
                costs.append((coefs[-2] if ncoef >= 2 else 0.0, 0.0))
            elif len(row) in (1, 2):
                costs.append((row[0], row[1] if len(row) == 2 else 0.0))
            else:
                raise CaseFormatError(f"gencost row has {len(row)} columns", lineno)
        if len(costs) == 2 * len(gens):  # MATPOWER appends reactive cost rows
            costs = [(p[0], q[0]) for p, q in zip(costs[: len(gens)], costs[len(gens):])]
        elif len(costs) != len(gens):
            raise CaseFormatError("gencost rows do not match gen rows", lines.get("gencost"))
    else:
        costs = [(0.0, 0.0)] * len(gens)
    generators = [Generator(g[0], g[1], g[2], g[3], g[4], c[0], c[1]) for g, c in zip(gens, costs)]

    branches = []
    for lineno, row in _rows(sections, "branch", lines):
        if len(row) >= 11:  # full MATPOWER branch row
            if row[10] <= 0:
                continue
            if row[8] not in (0.0, 1.0) or row[9] != 0.0:
                raise CaseFormatError("off-nominal taps and phase shifters are not supported", lineno)
            f, t, r, x, b, rate = row[0], row[1], row[2], row[3], row[4], row[5]
        elif len(row) == 6:
            f, t, r, x, b, rate = row
        else:
            raise CaseFormatError(f"branch row has {len(row)} columns", lineno)
        limit = (rate / base) ** 2 if rate > 0 else UNRATED_LIMIT
        branches.append(Branch(int(f), int(t), r, x, b, limit))

    buses.sort(key=lambda b: b.id)
    order = {b.id: i for i, b in enumerate(buses)}
    loads.sort(key=lambda ld: order[ld.bus])
    return NetworkCase(base, tuple(buses), tuple(generators), tuple(branches), tuple(loads),
                       name=str(sections.get("name", name)))


def load_case(name_or_path: str) -> NetworkCase:
    """Load a bundled case (``"case14"``) or a case file path."""
    if re.fullmatch(r"case\w+", name_or_path):
        res = resources.files("pinnopf.cases") / f"{name_or_path}.m"
        if res.is_file():
            return parse_case_text(res.read_text(), name=name_or_path)
    with open(name_or_path) as fh:
        text = fh.read()
    stem = re.sub(r"\.\w+$", "", name_or_path.replace("\\", "/").rsplit("/", 1)[-1])
    return parse_case_text(text, name=stem)


def case_to_text(case: NetworkCase) -> str:
    """Serialize a case in the compact format, full float precision."""
    base = case.base_mva
    load_at = {ld.bus: ld for ld in case.loads}
    code = {v: k for k, v in _BUS_TYPES.items()}
    out = [f"function mpc = {case.name}", f"mpc.baseMVA = {base!r};", "", "mpc.bus = ["]
    for b in case.buses:
        ld = load_at.get(b.id)
        pd, qd = (ld.p_max * base, ld.q_max * base) if ld else (0.0, 0.0)
        out.append(f"\t{b.id}\t{code[b.type]}\t{pd!r}\t{qd!r}\t{b.v_min!r}\t{b.v_max!r}"
                   f"\t{b.gs * base!r}\t{b.bs * base!r};")
    out += ["];", "", "mpc.gen = ["]
    for g in case.generators:
        out.append(f"\t{g.bus}\t{g.p_max * base!r}\t{g.p_min * base!r}\t{g.q_max * base!r}"
                   f"\t{g.q_min * base!r};")
    out += ["];", "", "mpc.branch = ["]
    for br in case.branches:
        rate = np.sqrt(br.current_limit) * base if br.current_limit != UNRATED_LIMIT else 0.0
        out.append(f"\t{br.from_bus}\t{br.to_bus}\t{br.r!r}\t{br.x!r}\t{br.b!r}\t{float(rate)!r};")
    out += ["];", "", "mpc.gencost = ["]
    for g in case.generators:
        out.append(f"\t{g.cost_p!r}\t{g.cost_q!r};")
    out += ["];", ""]
    return "\n".join(out)


# --------------------------------------------------------------------------
# admittance and quadratic forms

def series_admittance(br: Branch) -> complex:
    return 1.0 / complex(br.r, br.x)


def build_admittance(case: NetworkCase) -> tuple[np.ndarray, np.ndarray]:
    """Bus conductance and susceptance matrices ``(G, B)`` from the pi-model."""
    n = case.n_bus
    idx = case.bus_index
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        y = series_admittance(br)
        sh = 0.5j * br.b
        Y[f, f] += y + sh
        Y[t, t] += y + sh
        Y[f, t] -= y
        Y[t, f] -= y
    for i, b in enumerate(case.buses):
        Y[i, i] += complex(b.gs, b.bs)
    return Y.real.copy(), Y.imag.copy()


class QuadraticForm(NamedTuple):
    matrix: np.ndarray
    kind: str

    def __call__(self, v):
        return float(v @ self.matrix @ v)


def _sym(A):
    return 0.5 * (A + A.T)


def build_injection_forms(case: NetworkCase, admittance=None):
    """Return ``(Mp, Mq)``: stacked arrays of shape ``(N_b, 2N_b, 2N_b)``.

    ``v @ Mp[n] @ v`` is the active injection at bus ``n`` (same for Q).
    """
    G, B = admittance if admittance is not None else build_admittance(case)
    n = case.n_bus
    Mp = np.zeros((n, 2 * n, 2 * n))
    Mq = np.zeros((n, 2 * n, 2 * n))
    for k in range(n):
        A = np.zeros((2 * n, 2 * n))
        # p_k = vr_k (G vr - B vi)_k + vi_k (B vr + G vi)_k
        A[k, :n], A[k, n:] = G[k], -B[k]
        A[n + k, :n], A[n + k, n:] = B[k], G[k]
        Mp[k] = _sym(A)
        # q_k = vi_k (G vr - B vi)_k - vr_k (B vr + G vi)_k
        A = np.zeros((2 * n, 2 * n))
        A[n + k, :n], A[n + k, n:] = G[k], -B[k]
        A[k, :n], A[k, n:] = -B[k], -G[k]
        Mq[k] = _sym(A)
    return Mp, Mq


def build_voltage_and_line_forms(case: NetworkCase):
    """Return ``(Mv, Mi, Ms)``: voltage-magnitude, line-current and slack forms."""
    n = case.n_bus
    idx = case.bus_index
    Mv = np.zeros((n, 2 * n, 2 * n))
    for k in range(n):
        Mv[k, k, k] = Mv[k, n + k, n + k] = 1.0
    Mi = np.zeros((case.n_branch, 2 * n, 2 * n))
    for j, br in enumerate(case.branches):
        f, t = idx[br.from_bus], idx[br.to_bus]
        e = np.zeros(2 * n)
        e[f], e[t] = 1.0, -1.0
        e2 = np.roll(e, n)
        Mi[j] = abs(series_admittance(br)) ** 2 * (np.outer(e, e) + np.outer(e2, e2))
    Ms = np.zeros((2 * n, 2 * n))
    s = n + case.slack
    Ms[s, s] = 1.0
    return Mv, Mi, Ms


class ConstraintId(NamedTuple):
    kind: str       # "P", "Q", "slack", "gen-P", "gen-Q", "voltage", "line"
    element: int    # bus, generator or branch index (internal ordering)
    side: str       # "eq", "upper" or "lower"


@dataclass(frozen=True, eq=False)
class CanonicalQcqp:
    """Canonical QCQP data.

    ``v' L[l] v = a[l] @ G + b[l] @ D``  (equalities, duals ``lambda``)
    ``v' M[m] v <= d[m] @ D + f[m]``     (inequalities, duals ``mu``)
    """

    case: NetworkCase
    L: np.ndarray
    a: np.ndarray
    b: np.ndarray
    M: np.ndarray
    d: np.ndarray
    f: np.ndarray
    c: np.ndarray
    eq_ids: tuple[ConstraintId, ...]
    ineq_ids: tuple[ConstraintId, ...]
    line_forms: np.ndarray = field(repr=False)

    @property
    def n_eq(self) -> int:
        return self.L.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.M.shape[0]

    @property
    def n_v(self) -> int:
        return self.L.shape[1]

    @property
    def n_g(self) -> int:
        return self.a.shape[1]

    @property
    def n_d(self) -> int:
        return self.b.shape[1]

    @property
    def slack_row(self) -> int:
        return self.n_eq - 1

    def eq_index(self, cid: ConstraintId) -> int:
        return self.eq_ids.index(cid)

    def ineq_index(self, cid: ConstraintId) -> int:
        return self.ineq_ids.index(cid)

    def eq_values(self, G, v, D):
        """Residuals ``v'L v - a G - b D`` for every equality row."""
        return np.einsum("i,lij,j->l", v, self.L, v) - self.a @ G - self.b @ D

    def ineq_values(self, v, D):
        """Values ``v'M v - d D - f`` (feasible when <= 0)."""
        return np.einsum("i,mij,j->m", v, self.M, v) - self.d @ D - self.f


def assemble_canonical(case: NetworkCase) -> CanonicalQcqp:
    """Build the canonical QCQP with the fixed row ordering.

    Equalities: P per bus, Q per bus, slack angle.
    Inequalities: gen-P upper, gen-P lower, gen-Q upper, gen-Q lower (one
    row per generator in each block), voltage upper, voltage lower (one
    per bus), line current (one per branch).
    """
    nb, ng, nd = case.n_bus, case.n_gen, case.n_load
    idx = case.bus_index
    Mp, Mq = build_injection_forms(case)
    Mv, Mi, Ms = build_voltage_and_line_forms(case)
    gen_at = {idx[g.bus]: j for j, g in enumerate(case.generators)}
    load_at = {idx[ld.bus]: j for j, ld in enumerate(case.loads)}

    n_eq = 2 * nb + 1
    L = np.concatenate([Mp, Mq, Ms[None]])
    a = np.zeros((n_eq, 2 * ng))
    b = np.zeros((n_eq, 2 * nd))
    eq_ids = []
    for part, off_g, off_d in (("P", 0, 0), ("Q", ng, nd)):
        base_row = 0 if part == "P" else nb
        for k in range(nb):
            if k in gen_at:
                a[base_row + k, off_g + gen_at[k]] = 1.0
            if k in load_at:
                b[base_row + k, off_d + load_at[k]] = -1.0
            eq_ids.append(ConstraintId(part, k, "eq"))
    eq_ids.append(ConstraintId("slack", case.slack, "eq"))

    forms, d_rows, f_vals, ineq_ids = [], [], [], []
    for part, Minj, off_d in (("gen-P", Mp, 0), ("gen-Q", Mq, nd)):
        for side, sign in (("upper", 1.0), ("lower", -1.0)):
            for j, g in enumerate(case.generators):
                k = idx[g.bus]
                drow = np.zeros(2 * nd)
                if k in load_at:
                    drow[off_d + load_at[k]] = -sign
                if part == "gen-P":
                    lim = g.p_max if sign > 0 else -g.p_min
                else:
                    lim = g.q_max if sign > 0 else -g.q_min
                forms.append(sign * Minj[k])
                d_rows.append(drow)
                f_vals.append(lim)
                ineq_ids.append(ConstraintId(part, j, side))
    for side, sign in (("upper", 1.0), ("lower", -1.0)):
        for k, bus in enumerate(case.buses):
            forms.append(sign * Mv[k])
            d_rows.append(np.zeros(2 * nd))
            f_vals.append(bus.v_max ** 2 if sign > 0 else -bus.v_min ** 2)
            ineq_ids.append(ConstraintId("voltage", k, side))
    for j, br in enumerate(case.branches):
        forms.append(Mi[j])
        d_rows.append(np.zeros(2 * nd))
        f_vals.append(br.current_limit)
        ineq_ids.append(ConstraintId("line", j, "upper"))

    M = np.stack(forms)
    return CanonicalQcqp(
        case=case, L=L, a=a, b=b, M=M,
        d=np.array(d_rows).reshape(len(forms), 2 * nd), f=np.array(f_vals),
        c=case.cost, eq_ids=tuple(eq_ids), ineq_ids=tuple(ineq_ids), line_forms=Mi,
    )
