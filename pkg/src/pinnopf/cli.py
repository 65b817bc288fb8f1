"""Command-line pipeline: data generation, training, evaluation, verification and sweeps.

Every subcommand reads one key-value config file::

    case = case14            # bundled name or path to a .m file
    seed = 7                 # mandatory
    out_dir = run14          # relative to the config file
    n_samples = 200
    epochs = 200
    weights = {"lambda_P": 1, "lambda_V": 1, "lambda_L": 0.1, "lambda_eps": 0.1}

Values are Python literals; bare words are read as strings. Lines
starting with ``#`` are comments. All randomness is derived from
``seed`` through the named substreams ``data``, ``init``, ``train`` and
``verify``.
"""
from __future__ import annotations

import argparse
import ast
import configparser
import csv
import io
import itertools
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .grid import CaseFormatError, assemble_canonical, load_case
from .pinn import (LossWeights, TrainConfig, TrainingDiverged, evaluate, init_model, load_model,
                   save_model, train)
from .verify import (BadBoundsError, PROVEN, certify_gen_violation, domain_reduction_sweep,
                     export_verification_model, search_line_violation, sweep_to_csv,
                     validate_line_report)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_UNPROVEN = 0, 2, 3, 4
STREAMS = ("data", "init", "train", "verify")
MODEL_KINDS = ("nn", "pinn")
EVAL_COLUMNS = ("model", "mae_t", "v_g_avg", "v_opt_avg", "v_dist_avg")
DEFAULT_DELTAS = (0.0, 0.05, 0.10, 0.15)
HYPER_VALUES = (0.01, 0.1, 1.0, 10.0)


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


def substream(seed: int, name: str) -> int:
    """Deterministic 32-bit seed for a named stage, derived from the run seed."""
    ss = np.random.SeedSequence([int(seed), STREAMS.index(name)])
    return int(ss.generate_state(1)[0])


# --------------------------------------------------------------------------
# configuration

@dataclass
class RunConfig:
    case: str
    seed: int
    out_dir: Path
    base: Path
    delta: float = 0.0
    n_samples: int = 200
    fractions: dict = field(default_factory=lambda: dict(data_mod.DEFAULT_FRACTIONS))
    dataset: Path | None = None
    models: tuple = MODEL_KINDS
    widths: dict | None = None
    n_layers: int = 3
    epochs: int = 1000
    n_batches: int = 200
    lr: float = 1e-3
    lr_decay: float = 1.0
    weights: dict = field(default_factory=lambda: LossWeights().as_dict())
    mode: str = "correct"
    prim_uses_label: bool = False
    seeds: tuple | None = None
    deltas: tuple = DEFAULT_DELTAS
    max_nodes: int = 200_000
    time_limit: float | None = None
    line_restarts: int = 8
    line_pool: int = 256
    hyper_objective: str = "mae"
    hyper_grid: dict | None = None
    hyper_epochs: int | None = None
    validation_fraction: float = 0.2
    export_target: str = "gen-milp"
    export_objective: object = "max"
    export_branch: int | None = None

    @property
    def dataset_path(self) -> Path:
        return self.dataset or self.out_dir / "dataset.csv"

    def model_names(self) -> list[str]:
        if self.seeds is None:
            return list(self.models)
        return [f"{m}-s{s}" for s in self.seeds for m in self.models]

    def weights_obj(self) -> LossWeights:
        return LossWeights(**self.weights)


_INT = {"seed", "n_samples", "n_layers", "epochs", "n_batches", "max_nodes", "line_restarts",
        "line_pool", "hyper_epochs", "export_branch"}
_FLOAT = {"delta", "lr", "lr_decay", "time_limit", "validation_fraction"}


def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config(text: str, base: Path = Path(".")) -> RunConfig:
    """Parse the key-value config format; raises ``ConfigError`` on any problem."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    raw = {k: _literal(v) for k, v in cp["run"].items()}
    known = set(RunConfig.__dataclass_fields__) - {"base"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key in ("case", "seed"):
        if key not in raw:
            raise ConfigError(f"missing mandatory key {key!r}")
    for k in list(raw):
        v = raw[k]
        if k in _INT and v is not None:
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{k} must be an integer")
        if k in _FLOAT and v is not None:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{k} must be a number")
            raw[k] = float(v)
    raw["case"] = str(raw["case"])
    raw["out_dir"] = base / str(raw.get("out_dir", "out"))
    if raw.get("dataset") is not None:
        raw["dataset"] = base / str(raw["dataset"])
    for k in ("models", "seeds", "deltas"):
        if k in raw and raw[k] is not None:
            v = raw[k]
            raw[k] = tuple(v) if isinstance(v, (list, tuple)) else (v,)
    cfg = RunConfig(base=base, **raw)
    _check(cfg)
    return cfg


def _check(cfg: RunConfig):
    bad = [m for m in cfg.models if m not in MODEL_KINDS]
    if bad:
        raise ConfigError(f"unknown model kinds {bad}; expected {MODEL_KINDS}")
    if cfg.epochs < 1 or cfg.n_batches < 1:
        raise ConfigError("epochs and n_batches must be at least 1")
    if cfg.n_samples < 1:
        raise ConfigError("n_samples must be at least 1")
    if not 0.0 <= cfg.delta < 0.2:
        raise ConfigError("delta must lie in [0, 0.2)")
    if cfg.mode not in ("correct", "paper-literal"):
        raise ConfigError(f"unknown residual mode {cfg.mode!r}")
    if cfg.hyper_objective not in ("mae", "worst-case"):
        raise ConfigError("hyper_objective must be 'mae' or 'worst-case'")
    if not isinstance(cfg.weights, dict):
        raise ConfigError("weights must be a dict literal")
    try:
        LossWeights(**cfg.weights)
    except TypeError as exc:
        raise ConfigError(f"bad weights: {exc}") from None
    if not isinstance(cfg.fractions, dict):
        raise ConfigError("fractions must be a dict literal")
    if abs(sum(cfg.fractions.values()) - 1.0) > 1e-9:
        raise ConfigError("split fractions must sum to 1")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(), path.parent)


def _case(cfg: RunConfig):
    p = cfg.base / cfg.case
    try:
        case = load_case(str(p) if p.is_file() else cfg.case)
    except (FileNotFoundError, KeyError, CaseFormatError) as exc:
        raise ConfigError(f"cannot load case {cfg.case!r}: {exc}") from None
    return case, assemble_canonical(case)


def _dataset(cfg: RunConfig):
    path = cfg.dataset_path
    if not path.is_file():
        raise ConfigError(f"dataset {path} not found; run gen-data first")
    return data_mod.load_dataset(path)


def _model_path(cfg, name):
    return cfg.out_dir / f"model_{name}.json"


def _load_models(cfg) -> dict:
    out = {}
    for name in cfg.model_names():
        p = _model_path(cfg, name)
        if not p.is_file():
            raise ConfigError(f"model {p} not found; run train first")
        out[name] = load_model(p)
    return out


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(f"wrote {path}")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


# --------------------------------------------------------------------------
# training helpers shared by train, sweep-hyper and the experiment scripts

def train_one(kind: str, qcqp, dataset, seed: int, cfg: RunConfig, weights: LossWeights | None = None,
              epochs: int | None = None, validation=None):
    """Train a standard network (``nn``) or a PINN from the named seed substreams."""
    standard = kind == "nn"
    w = LossWeights.standard() if standard else (weights or cfg.weights_obj())
    model = init_model(qcqp, dataset.box, widths=cfg.widths, n_layers=cfg.n_layers,
                       seed=substream(seed, "init"), loss_weights=w, standard=standard,
                       case_id=dataset.case_id)
    tc = TrainConfig(epochs=epochs or cfg.epochs, n_batches=cfg.n_batches, lr=cfg.lr,
                     lr_decay=cfg.lr_decay, seed=substream(seed, "train"), weights=w, mode=cfg.mode,
                     prim_uses_label=cfg.prim_uses_label)
    return train(model, qcqp, dataset, tc, validation=validation)


def holdout_split(dataset, fraction: float, seed: int):
    """Move a share of the labelled training rows into a validation set (never the test rows)."""
    role = np.asarray(dataset.role).astype(object)
    tr = np.flatnonzero(role == "train")
    n_val = int(round(fraction * tr.size))
    if n_val < 1 or n_val >= tr.size:
        raise ConfigError("validation_fraction leaves no training or no validation rows")
    pick = np.random.default_rng(substream(seed, "data")).permutation(tr)[:n_val]
    role[pick] = "validation"
    fit = replace(dataset, role=role.astype(str))
    return fit, fit.subset("validation")


def paired_summary(rows: dict) -> tuple[list, int, int]:
    """Per-seed ``PINN <= NN`` flags from ``{name: EvalMetrics}`` with ``kind-s<seed>`` names."""
    seeds = sorted({int(n.split("-s")[1]) for n in rows if "-s" in n})
    out = []
    for s in seeds:
        nn, pinn = rows.get(f"nn-s{s}"), rows.get(f"pinn-s{s}")
        if nn is None or pinn is None:
            continue
        out.append((s, nn.mae_t, pinn.mae_t, int(pinn.mae_t <= nn.mae_t)))
    return out, sum(r[3] for r in out), len(out)


# --------------------------------------------------------------------------
# subcommands

def cmd_gen_data(cfg: RunConfig, threads: int = 1) -> int:
    case, q = _case(cfg)
    box = data_mod.DemandBox.from_case(case, cfg.delta)
    D = data_mod.lhs_sample(box, cfg.n_samples, substream(cfg.seed, "data"))
    rep = data_mod.label_samples(q, D, threads=threads)
    ds = data_mod.split_dataset(rep, case.name, box, substream(cfg.seed, "data"), cfg.fractions)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    data_mod.save_dataset(ds, cfg.dataset_path)
    counts = ds.counts()
    print(f"wrote {cfg.dataset_path}")
    print(f"samples {cfg.n_samples} infeasible {rep.n_infeasible} "
          + " ".join(f"{k} {counts.get(k, 0)}" for k in ("collocation", "train", "test")))
    return EXIT_OK


def cmd_train(cfg: RunConfig, threads: int = 1) -> int:
    case, q = _case(cfg)
    ds = _dataset(cfg)
    seeds = cfg.seeds if cfg.seeds is not None else (cfg.seed,)
    for s in seeds:
        for kind in cfg.models:
            name = kind if cfg.seeds is None else f"{kind}-s{s}"
            try:
                model, hist = train_one(kind, q, ds, s, cfg)
            except TrainingDiverged as exc:
                ck = cfg.out_dir / f"model_{name}.diverged.json"
                save_model(exc.model, ck)
                raise NumericalFailure(f"training of {name} diverged at epoch {exc.epoch}; "
                                       f"last good checkpoint {ck}") from None
            save_model(model, _model_path(cfg, name))
            hist.save(cfg.out_dir / f"history_{name}.csv")
            print(f"wrote {_model_path(cfg, name)}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, threads: int = 1) -> int:
    case, q = _case(cfg)
    ds = _dataset(cfg)
    models = _load_models(cfg)
    res = {name: evaluate(m, ds, q, role="test") for name, m in models.items()}
    rows = [(n, r.mae_t, r.v_g_avg, r.v_opt_avg, r.v_dist_avg) for n, r in res.items()]
    _write(cfg.out_dir / "eval.csv", _csv(EVAL_COLUMNS, rows))
    for r in rows:
        print("%-12s MAE_T %.4f%%  v_g %.4f%%  v_opt %.4f%%  v_dist %.4f%%" % r)
    if cfg.seeds is not None:
        pairs, wins, n = paired_summary(res)
        _write(cfg.out_dir / "paired.csv",
               _csv(("seed", "nn_mae_t", "pinn_mae_t", "pinn_le_nn"), pairs)
               + f"# pinn_le_nn {wins} of {n}\n")
        print(f"PINN MAE_T <= NN MAE_T in {wins} of {n} seeds")
    return EXIT_OK


def _gen_rows(cfg, case, models, threads):
    box = data_mod.DemandBox.from_case(case, cfg.delta)
    rows, worst = [], EXIT_OK
    for name, m in models.items():
        rep = certify_gen_violation(m, case, box, threads=threads, max_nodes=cfg.max_nodes,
                                    time_limit=cfg.time_limit, seed=substream(cfg.seed, "verify"))
        _write(cfg.out_dir / f"verify_gen_{name}.json", rep.to_json())
        rows.append((name, rep.v_g_mw, rep.v_g_percent, rep.status))
        if rep.status != PROVEN:
            worst = EXIT_UNPROVEN
    return rows, worst


def _table_iv(cfg):
    """Merge whatever generator and line reports exist into one Table-IV-shaped CSV."""
    rows = []
    for name in cfg.model_names():
        g = cfg.out_dir / f"verify_gen_{name}.json"
        ln = cfg.out_dir / f"verify_line_{name}.json"
        gd = json.loads(g.read_text()) if g.is_file() else {}
        ld = json.loads(ln.read_text()) if ln.is_file() else {}
        rows.append((name, gd.get("v_g_mw", ""), gd.get("v_g_percent", ""), gd.get("status", ""),
                     ld.get("v_l_mva", ""), ld.get("status", "")))
    _write(cfg.out_dir / "worst_case.csv",
           _csv(("model", "v_g_mw", "v_g_percent_of_max_loading", "v_g_status", "v_l_mva", "v_l_status"),
                rows))


def cmd_verify_gen(cfg: RunConfig, threads: int = 1) -> int:
    case, _ = _case(cfg)
    rows, code = _gen_rows(cfg, case, _load_models(cfg), threads)
    for r in rows:
        print("%-12s v_g %.6f MW  %.6f %% of %.0f MW  %s" % (r[0], r[1], r[2], case.max_loading_mw(), r[3]))
    _table_iv(cfg)
    return code


def cmd_verify_line(cfg: RunConfig, threads: int = 1) -> int:
    case, _ = _case(cfg)
    box = data_mod.DemandBox.from_case(case, cfg.delta)
    for name, m in _load_models(cfg).items():
        rep = search_line_violation(m, case, box, restarts=cfg.line_restarts, pool_size=cfg.line_pool,
                                    seed=substream(cfg.seed, "verify"))
        mis, err = validate_line_report(m, case, rep)
        if not rep.validated:
            raise NumericalFailure(f"line witness for {name} failed re-validation "
                                   f"(mismatch {mis:.3g}, flow error {err:.3g})")
        _write(cfg.out_dir / f"verify_line_{name}.json", rep.to_json())
        print("%-12s v_l %.6f MVA (best found, branch %d)" % (name, rep.v_l_mva, rep.worst_branch))
    _table_iv(cfg)
    return EXIT_OK


def cmd_sweep_domain(cfg: RunConfig, threads: int = 1) -> int:
    case, _ = _case(cfg)
    models = _load_models(cfg)
    line = {"restarts": cfg.line_restarts, "pool_size": cfg.line_pool,
            "seed": substream(cfg.seed, "verify")} if cfg.line_restarts > 0 else None
    rows = domain_reduction_sweep(models, case, cfg.deltas, line=line, threads=threads,
                                  max_nodes=cfg.max_nodes)
    _write(cfg.out_dir / "sweep_domain.csv", sweep_to_csv(rows))
    for r in rows:
        print("%-12s delta %.2f  v_g %.6f MW  %s" % (r.model, r.delta, r.v_g_mw, r.status))
    return EXIT_OK if all(r.status == PROVEN for r in rows) else EXIT_UNPROVEN


def hyper_grid(cfg: RunConfig) -> list[LossWeights]:
    """Grid points, skipping ``lambda_eps = 0`` which would be the standard network."""
    g = cfg.hyper_grid or {}
    axes = [tuple(g.get(k, HYPER_VALUES)) for k in ("lambda_P", "lambda_V", "lambda_L", "lambda_eps")]
    return [LossWeights(*p) for p in itertools.product(*axes) if p[3] > 0]


def cmd_sweep_hyper(cfg: RunConfig, threads: int = 1) -> int:
    """Select PINN loss weights on a validation split of the training rows."""
    case, q = _case(cfg)
    ds = _dataset(cfg)
    fit, val = holdout_split(ds, cfg.validation_fraction, cfg.seed)
    box = ds.box
    rows, best = [], None
    code = EXIT_OK
    for w in hyper_grid(cfg):
        model, _ = train_one("pinn", q, fit, cfg.seed, cfg, weights=w, epochs=cfg.hyper_epochs)
        m = evaluate(model, val, q)
        vg, status = np.nan, ""
        if cfg.hyper_objective == "worst-case":
            rep = certify_gen_violation(model, case, box, threads=threads, max_nodes=cfg.max_nodes,
                                        time_limit=cfg.time_limit, seed=substream(cfg.seed, "verify"))
            vg, status = rep.v_g_mw, rep.status
            if rep.status != PROVEN:
                code = EXIT_UNPROVEN
        score = m.mae_t if cfg.hyper_objective == "mae" else vg
        rows.append([w.lambda_P, w.lambda_V, w.lambda_L, w.lambda_eps, m.mae_t, vg, status, 0])
        if best is None or score < best[0]:
            best = (score, len(rows) - 1, w, model)
    rows[best[1]][-1] = 1
    header = ("lambda_P", "lambda_V", "lambda_L", "lambda_eps", "val_mae_t", "v_g_mw", "v_g_status", "selected")
    _write(cfg.out_dir / "sweep_hyper.csv", _csv(header, rows))
    _write(cfg.out_dir / "hyper_selected.json",
           json.dumps({"objective": cfg.hyper_objective, "weights": best[2].as_dict(),
                       "score": best[0]}, sort_keys=True, indent=1) + "\n")
    save_model(best[3], cfg.out_dir / "model_pinn-selected.json")
    print(f"selected {best[2].as_dict()} ({cfg.hyper_objective} {best[0]:.6g})")
    return code


def cmd_export_model(cfg: RunConfig, threads: int = 1) -> int:
    case, _ = _case(cfg)
    box = data_mod.DemandBox.from_case(case, cfg.delta)
    obj = cfg.export_objective
    if isinstance(obj, (list, tuple)):
        obj = (int(obj[0]), str(obj[1]))
    for name, m in _load_models(cfg).items():
        suffix = "gen" if cfg.export_target == "gen-milp" else f"line{cfg.export_branch}"
        path = cfg.out_dir / f"verify_{name}_{suffix}.lp"
        try:
            export_verification_model(m, case, box, cfg.export_target, path, objective=obj,
                                      branch=cfg.export_branch)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify-gen": cmd_verify_gen,
    "verify-line": cmd_verify_line,
    "sweep-domain": cmd_sweep_domain,
    "sweep-hyper": cmd_sweep_hyper,
    "export-model": cmd_export_model,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pinnopf", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        s = sub.add_parser(name, help=(fn.__doc__ or name).split("\n")[0])
        s.add_argument("config", help="key-value config file")
        s.add_argument("--threads", type=int, default=1, help="cap on worker threads (default 1)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = load_config(args.config)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, BadBoundsError, np.linalg.LinAlgError, data_mod.DatasetError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
