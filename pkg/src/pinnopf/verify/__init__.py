"""Worst-case verification of the dispatch head: exact generator limits, line-flow search, export."""
from .bnb import (BOUND_ONLY, PROVEN, TIMEOUT, GenReport, Objective, ViolationCertificate,
                  certify_gen_violation, gen_objectives, maximize_output)
from .bounds import (BadBoundsError, BigMBounds, Encoding, interval_bounds, network_forward,
                     propagate_bounds, sample_bound_violation, solve_lp)
from .export import (GEN_MILP, LINE_MIQCQP, LpModel, assignment, build_gen_milp, build_line_miqcqp,
                     export_verification_model, read_lp, write_lp)
from .linesearch import LineFlowReport, search_line_violation, validate_line_report
from .oracle import enumerate_patterns_oracle, oracle_gen_objective
from .sweep import SweepRow, domain_reduction_sweep, sweep_to_csv

__all__ = [
    "BOUND_ONLY", "PROVEN", "TIMEOUT", "GEN_MILP", "LINE_MIQCQP", "BadBoundsError", "BigMBounds",
    "Encoding", "GenReport", "LineFlowReport", "LpModel", "Objective", "SweepRow",
    "ViolationCertificate", "assignment", "build_gen_milp", "build_line_miqcqp",
    "certify_gen_violation", "domain_reduction_sweep", "enumerate_patterns_oracle",
    "export_verification_model", "gen_objectives", "interval_bounds", "maximize_output",
    "network_forward", "oracle_gen_objective", "propagate_bounds", "read_lp",
    "sample_bound_violation", "search_line_violation", "solve_lp", "sweep_to_csv",
    "validate_line_report", "write_lp",
]
