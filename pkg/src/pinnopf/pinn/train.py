"""Mini-batch Adam training and per-epoch history."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..grid import CanonicalQcqp
from .loss import Batch, LossOptions, loss_and_grad
from .metrics import evaluate
from .model import LossWeights, PinnModel

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("total", "mae_g", "mae_v", "mae_l", "mae_eps", "stat", "comp", "dual", "prim")


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries the last good model."""

    def __init__(self, epoch, model, history):
        super().__init__(f"loss diverged in epoch {epoch}")
        self.epoch = epoch
        self.model = model
        self.history = history


@dataclass
class TrainConfig:
    epochs: int = 1000
    n_batches: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: float = 1.0
    seed: int = 0
    weights: LossWeights | None = None
    mode: str = "correct"
    prim_uses_label: bool = False
    keep_best: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.n_batches < 1:
            raise ValueError("epochs must be >= 0 and n_batches >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")

    def as_dict(self):
        d = asdict(self)
        d["weights"] = None if self.weights is None else self.weights.as_dict()
        return d


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def append(self, row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([r.get(name, np.nan) for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        cols = []
        for r in self.rows:
            cols.extend(k for k in r if k not in cols)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow(["" if r.get(k) is None else repr(r[k]) if isinstance(r.get(k), float) else r.get(k)
                        for k in cols])
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_csv())


class Adam:
    def __init__(self, model: PinnModel, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: ([np.zeros_like(w) for w in h.weights], [np.zeros_like(b) for b in h.biases])
                  for n, h in model.heads.items()}
        self.v = {n: ([np.zeros_like(w) for w in h.weights], [np.zeros_like(b) for b in h.biases])
                  for n, h in model.heads.items()}

    def step(self, model: PinnModel, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, (dW, db) in grads.items():
            head = model.heads[name]
            (mW, mb), (vW, vb) = self.m[name], self.v[name]
            for p, g, m, v in zip(head.weights + head.biases, dW + db, mW + mb, vW + vb):
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _finite(grads) -> bool:
    return all(np.isfinite(a).all() for dW, db in grads.values() for a in (*dW, *db))


def train(model: PinnModel, qcqp: CanonicalQcqp, dataset, config: TrainConfig | None = None,
          validation=None, callback=None):
    """Train a copy of ``model`` on the train and collocation rows of ``dataset``.

    Labelled and collocation rows are shuffled by separate streams and
    dealt into ``n_batches`` stratified batches, so the labelled part of
    each batch does not depend on the collocation set. Collocation rows
    are dropped when the residual weight is zero, since they then carry
    no loss. Returns ``(model, history)``.
    """
    cfg = config or TrainConfig()
    weights = cfg.weights or model.loss_weights
    opts = LossOptions(cfg.mode, cfg.prim_uses_label)
    model = model.copy()
    model.loss_weights = weights

    role = np.asarray(dataset.role)
    lab = np.flatnonzero(role == "train")
    col = np.flatnonzero(role == "collocation") if weights.lambda_eps > 0 else np.array([], dtype=int)
    if len(lab) == 0 and len(col) == 0:
        raise ValueError("dataset has no training or collocation rows")
    full = Batch.from_dataset(dataset)
    full.G = np.where((role == "train")[:, None], full.G, np.nan)
    rng_lab = np.random.default_rng([cfg.seed, 10])
    rng_col = np.random.default_rng([cfg.seed, 11])
    opt = Adam(model, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = History()
    good = model.copy()
    best = (np.inf, None)

    for epoch in range(1, cfg.epochs + 1):
        parts_l = np.array_split(rng_lab.permutation(lab), cfg.n_batches)
        parts_c = np.array_split(rng_col.permutation(col), cfg.n_batches)
        sums = np.zeros(len(LOSS_COLUMNS))
        n_rows = 0
        for pl, pc in zip(parts_l, parts_c):
            idx = np.concatenate([pl, pc])
            if len(idx) == 0:
                continue
            batch = Batch(full.D[idx], full.G[idx], full.v[idx], full.lam[idx], full.mu[idx])
            value, grads = loss_and_grad(model, qcqp, batch, weights, opts)
            if not np.isfinite(value.total) or not _finite(grads):
                raise TrainingDiverged(epoch, good, history)
            opt.step(model, grads)
            sums += len(idx) * np.array([getattr(value, k) for k in LOSS_COLUMNS], dtype=float)
            n_rows += len(idx)
        row = {"epoch": epoch, "lr": opt.lr}
        row.update({k: float(v) for k, v in zip(LOSS_COLUMNS, sums / max(n_rows, 1))})
        if validation is not None:
            m = evaluate(model, validation, qcqp)
            row.update({"val_" + k: v for k, v in m.as_dict().items()})
            if cfg.keep_best and m.mae_g < best[0]:
                best = (m.mae_g, model.copy())
        history.append(row)
        good = model.copy()
        if callback is not None:
            callback(epoch, row)
        opt.lr *= cfg.lr_decay
        if epoch % 50 == 0:
            log.info("epoch %d loss %.6g", epoch, row["total"])

    if cfg.keep_best and best[1] is not None:
        model = best[1]
    model.provenance = {
        "config": cfg.as_dict(),
        "n_train": int(len(lab)),
        "n_collocation": int(len(col)),
        "dataset_case": getattr(dataset, "case_id", None),
        "dataset_seed": getattr(dataset, "seed", None),
        "epochs_run": len(history),
    }
    return model, history
