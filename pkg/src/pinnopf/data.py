"""Demand sampling, OPF labelling, train/test/collocation splits and persistence."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .grid import CanonicalQcqp, NetworkCase
from .opf import IpmOptions, kkt_residuals, solve_acopf

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TRAIN, TEST, COLLOCATION = "train", "test", "collocation"
DEFAULT_FRACTIONS = {COLLOCATION: 0.5, TRAIN: 0.2, TEST: 0.3}


class DatasetError(ValueError):
    pass


class SchemaError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


@dataclass(frozen=True)
class DemandBox:
    """Axis-aligned demand box ``(0.6 + delta) D_max .. (1 - delta) D_max``.

    Entries of ``D_max`` that are negative (net reactive injection) flip
    the two ends so that ``lower <= upper`` always holds.
    """

    lower: np.ndarray
    upper: np.ndarray
    delta: float = 0.0

    @classmethod
    def from_case(cls, case: NetworkCase, delta: float = 0.0, low: float = 0.6, high: float = 1.0):
        if not 0.0 <= delta < 0.2:
            raise ValueError("delta must lie in [0, 0.2)")
        dmax = case.d_max
        a, b = (low + delta) * dmax, (high - delta) * dmax
        return cls(np.minimum(a, b), np.maximum(a, b), float(delta))

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, D, tol: float = 0.0) -> bool:
        D = np.asarray(D)
        return bool(np.all(D >= self.lower - tol) and np.all(D <= self.upper + tol))

    def to_dict(self):
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(), "delta": self.delta}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["lower"], dtype=float), np.array(d["upper"], dtype=float),
                   float(d.get("delta", 0.0)))


def lhs_sample(box: DemandBox, n: int, seed) -> np.ndarray:
    """Plain Latin hypercube sample of ``n`` demand vectors inside ``box``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    unit = qmc.LatinHypercube(d=box.dim, scramble=True, optimization=None,
                              seed=np.random.default_rng(seed)).random(n)
    out = box.lower + unit * (box.upper - box.lower)
    return np.clip(out, box.lower, box.upper)


@dataclass(frozen=True)
class Dataset:
    """Demand samples with optional OPF labels; one row per record.

    Label arrays hold NaN on collocation rows.
    """

    case_id: str
    seed: int
    box: DemandBox
    D: np.ndarray
    role: np.ndarray
    G: np.ndarray
    v: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    obj: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.D.shape[0]

    def mask(self, role: str) -> np.ndarray:
        return self.role == role

    def subset(self, *roles: str) -> "Dataset":
        keep = np.isin(self.role, roles)
        return Dataset(self.case_id, self.seed, self.box, self.D[keep], self.role[keep],
                       self.G[keep], self.v[keep], self.lam[keep], self.mu[keep], self.obj[keep],
                       dict(self.meta))

    def counts(self) -> dict[str, int]:
        return {r: int(np.sum(self.role == r)) for r in (COLLOCATION, TRAIN, TEST)}

    @property
    def labeled(self) -> np.ndarray:
        return self.role != COLLOCATION


@dataclass(frozen=True)
class LabelReport:
    D: np.ndarray
    G: np.ndarray
    v: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    obj: np.ndarray
    feasible: np.ndarray
    status: tuple[str, ...]

    @property
    def n_infeasible(self) -> int:
        return int(np.sum(~self.feasible))


def label_samples(qcqp: CanonicalQcqp, samples, options: IpmOptions | None = None,
                  threads: int = 1) -> LabelReport:
    """Solve the AC-OPF for every sample; failures are flagged, not raised."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))

    def one(D):
        try:
            return solve_acopf(qcqp, D, options)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            log.warning("OPF failed for a sample: %s", exc)
            return None

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            sols = list(pool.map(one, samples))
    else:
        sols = [one(D) for D in samples]

    n = len(samples)
    G = np.full((n, qcqp.n_g), np.nan)
    v = np.full((n, qcqp.n_v), np.nan)
    lam = np.full((n, qcqp.n_eq), np.nan)
    mu = np.full((n, qcqp.n_ineq), np.nan)
    obj = np.full(n, np.nan)
    ok = np.zeros(n, dtype=bool)
    status = []
    for i, s in enumerate(sols):
        status.append("error" if s is None else s.status)
        if s is not None and s.ok:
            G[i], v[i], lam[i], mu[i], obj[i] = s.G, s.v, s.lam, s.mu, s.objective
            ok[i] = True
    if not ok.all():
        log.info("%d of %d samples infeasible or unsolved", int((~ok).sum()), n)
    return LabelReport(samples, G, v, lam, mu, obj, ok, tuple(status))


def _split_counts(n: int, fractions: dict[str, float]) -> dict[str, int]:
    roles = [COLLOCATION, TRAIN, TEST]
    fr = np.array([fractions.get(r, 0.0) for r in roles])
    raw = fr * n
    counts = np.floor(raw + 1e-9).astype(int)
    rest = n - counts.sum()
    for j in np.argsort(-(raw - counts), kind="stable")[:rest]:
        counts[j] += 1
    return dict(zip(roles, counts.tolist()))


def split_dataset(report: LabelReport, case_id: str, box: DemandBox, seed: int,
                  fractions: dict[str, float] | None = None) -> Dataset:
    """Assign roles to the feasible labelled samples and drop collocation labels."""
    fractions = dict(DEFAULT_FRACTIONS if fractions is None else fractions)
    if set(fractions) - {COLLOCATION, TRAIN, TEST}:
        raise ValueError(f"unknown roles in fractions: {sorted(fractions)}")
    if abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    keep = np.flatnonzero(report.feasible)
    counts = _split_counts(keep.size, fractions)
    perm = np.random.default_rng(seed).permutation(keep.size)
    role = np.empty(keep.size, dtype=object)
    start = 0
    for r in (COLLOCATION, TRAIN, TEST):
        role[perm[start:start + counts[r]]] = r
        start += counts[r]
    role = role.astype(str)

    G, v = report.G[keep].copy(), report.v[keep].copy()
    lam, mu, obj = report.lam[keep].copy(), report.mu[keep].copy(), report.obj[keep].copy()
    colloc = role == COLLOCATION
    for arr in (G, v, lam, mu):
        arr[colloc] = np.nan
    obj[colloc] = np.nan
    meta = {"n_sampled": int(len(report.D)), "n_infeasible": report.n_infeasible,
            "fractions": fractions}
    return Dataset(case_id, int(seed), box, report.D[keep].copy(), role, G, v, lam, mu, obj, meta)


def validate_labels(ds: Dataset, qcqp: CanonicalQcqp, tol: float = 1e-6) -> float:
    """Largest KKT residual over labelled rows; raises if any exceeds ``tol``."""
    worst = 0.0
    for i in np.flatnonzero(ds.labeled):
        r = kkt_residuals(qcqp, ds.G[i], ds.v[i], ds.lam[i], ds.mu[i], ds.D[i])
        worst = max(worst, r.max())
    if worst >= tol:
        raise DatasetError(f"labelled record fails KKT re-validation (residual {worst:.3g})")
    return worst


# --------------------------------------------------------------------------
# CSV persistence

def _header(nd, ng, nb, n_eq, n_in):
    cols = ["role"]
    cols += [f"Pd_{i}" for i in range(1, nd + 1)] + [f"Qd_{i}" for i in range(1, nd + 1)]
    cols += [f"Pg_{i}" for i in range(1, ng + 1)] + [f"Qg_{i}" for i in range(1, ng + 1)]
    cols += [f"vr_{i}" for i in range(1, nb + 1)] + [f"vi_{i}" for i in range(1, nb + 1)]
    cols += [f"lam_{i}" for i in range(1, n_eq + 1)] + [f"mu_{i}" for i in range(1, n_in + 1)]
    cols.append("obj")
    return cols


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_dataset(ds: Dataset, path, solver_options: IpmOptions | None = None) -> Path:
    path = Path(path)
    nd, ng, nb = ds.D.shape[1] // 2, ds.G.shape[1] // 2, ds.v.shape[1] // 2
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_header(nd, ng, nb, ds.lam.shape[1], ds.mu.shape[1]))
    for i in range(len(ds)):
        row = [ds.role[i]] + [repr(float(x)) for x in ds.D[i]]
        for arr in (ds.G[i], ds.v[i], ds.lam[i], ds.mu[i]):
            row += [_fmt(x) for x in arr]
        row.append(_fmt(ds.obj[i]))
        w.writerow(row)
    data = buf.getvalue().encode()
    path.write_bytes(data)
    opts = solver_options or IpmOptions()
    meta = {
        "schema_version": SCHEMA_VERSION,
        "case_id": ds.case_id,
        "seed": ds.seed,
        "box": ds.box.to_dict(),
        "dims": {"n_load": nd, "n_gen": ng, "n_bus": nb,
                 "n_eq": int(ds.lam.shape[1]), "n_ineq": int(ds.mu.shape[1])},
        "solver": {"ipm.tol": opts.tol, "ipm.max_iter": opts.max_iter},
        "counts": ds.counts(),
        "extra": ds.meta,
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    meta_file = _meta_path(path)
    if not meta_file.exists():
        raise SchemaError(f"missing metadata sidecar {meta_file.name}")
    meta = json.loads(meta_file.read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"schema version {meta.get('schema_version')} != {SCHEMA_VERSION}")
    data = path.read_bytes()
    if hashlib.sha256(data).hexdigest() != meta["sha256"]:
        raise ChecksumError(f"checksum mismatch for {path.name}")
    dims = meta["dims"]
    nd, ng, nb = dims["n_load"], dims["n_gen"], dims["n_bus"]
    n_eq, n_in = dims["n_eq"], dims["n_ineq"]
    header = _header(nd, ng, nb, n_eq, n_in)
    rows = list(csv.reader(io.StringIO(data.decode())))
    if not rows or rows[0] != header:
        raise SchemaError("header does not match the declared dimensions")
    body = rows[1:]
    for k, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise SchemaError(f"row {k} has {len(r)} columns, expected {len(header)}")
    role = np.array([r[0] for r in body], dtype=str)
    if body:
        vals = np.array([[float(x) if x != "" else np.nan for x in r[1:]] for r in body])
    else:
        vals = np.zeros((0, len(header) - 1))
    cuts = np.cumsum([2 * nd, 2 * ng, 2 * nb, n_eq, n_in])
    D, G, v, lam, mu, obj = np.split(vals, cuts, axis=1)
    return Dataset(meta["case_id"], int(meta["seed"]), DemandBox.from_dict(meta["box"]),
                   D, role, G, v, lam, mu, obj[:, 0], dict(meta.get("extra", {})))
