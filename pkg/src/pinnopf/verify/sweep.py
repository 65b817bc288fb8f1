"""Worst-case violations over a family of symmetrically reduced demand boxes."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from ..data import DemandBox
from ..grid import NetworkCase
from .bnb import certify_gen_violation
from .linesearch import search_line_violation


@dataclass
class SweepRow:
    model: str
    delta: float
    v_g_pu: float
    v_g_mw: float
    v_g_percent: float
    status: str
    nodes: int
    v_l_mva: float | None = None
    v_l_pu: float | None = None


SWEEP_COLUMNS = ("model", "delta", "v_g_pu", "v_g_mw", "v_g_percent", "status", "nodes", "v_l_pu", "v_l_mva")


def domain_reduction_sweep(models: dict, case: NetworkCase, deltas, line: dict | None = None,
                           threads: int = 1, max_nodes: int = 200_000) -> list[SweepRow]:
    """Certify every model on each reduced box ``(0.6 + d) Dmax <= D <= (1 - d) Dmax``.

    Boxes are processed from the smallest (largest ``d``) outward and the
    witnesses of each box seed the next one. Since the boxes are nested
    and reported values are attained by witnesses, the certified values
    are non-increasing in ``d`` even when a search stops at a node limit.
    ``line`` holds keyword arguments for the line search, or ``None`` to skip it.
    """
    deltas = [float(d) for d in deltas]
    rows = []
    for name, model in models.items():
        carried = None
        carried_line = None
        found = {}
        for d in sorted(set(deltas), reverse=True):
            box = DemandBox.from_case(case, d)
            rep = certify_gen_violation(model, case, box, threads=threads, max_nodes=max_nodes,
                                        incumbents=carried)
            wit = np.array([c.witness_D for c in rep.certificates])
            carried = wit if carried is None else np.vstack([carried, wit])
            row = SweepRow(name, d, rep.v_g_pu, rep.v_g_mw, rep.v_g_percent, rep.status,
                           sum(c.nodes for c in rep.certificates))
            if line is not None:
                lr = search_line_violation(model, case, box, extra_starts=carried_line, **line)
                pts = np.array([b.witness_D + [b.witness_vmag] for b in lr.branches
                                if np.isfinite(b.witness_vmag)])
                if len(pts):
                    carried_line = pts if carried_line is None else np.vstack([carried_line, pts])
                row.v_l_pu, row.v_l_mva = lr.v_l_pu, lr.v_l_mva
            found[d] = row
        rows.extend(found[d] for d in deltas)
    return rows


def sweep_to_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow(["" if getattr(r, k) is None else repr(getattr(r, k)) if isinstance(getattr(r, k), float)
                    else getattr(r, k) for k in SWEEP_COLUMNS])
    return buf.getvalue()
