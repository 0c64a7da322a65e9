"""Rank traces and the frozen-representation linear probe."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .linalg import DEFAULT_RANK_TOL, Spectrum, effective_rank, numerical_rank
from .rng import substream


@dataclass
class RankReport:
    """Spectrum snapshots keyed by (epoch, matrix id)."""

    snapshots: list[tuple[int, str, Spectrum]] = field(default_factory=list)

    def add(self, epoch: int, matrix_id: str, spectrum: Spectrum):
        for e, m, _ in reversed(self.snapshots):
            if m == matrix_id:
                if epoch <= e:
                    raise ValueError(f"epochs must increase for {matrix_id}: {epoch} after {e}")
                break
        self.snapshots.append((int(epoch), matrix_id, spectrum))

    def matrix_ids(self) -> list[str]:
        return list(dict.fromkeys(m for _, m, _ in self.snapshots))

    def series(self, matrix_id: str) -> tuple[np.ndarray, np.ndarray]:
        """(epochs, sigmas[epoch, index]) for one tracked matrix."""
        rows = [(e, s.sigmas) for e, m, s in self.snapshots if m == matrix_id]
        if not rows:
            raise KeyError(matrix_id)
        return np.array([e for e, _ in rows]), np.vstack([s for _, s in rows])

    def final(self, matrix_id: str) -> Spectrum:
        for _, m, s in reversed(self.snapshots):
            if m == matrix_id:
                return s
        raise KeyError(matrix_id)

    def write_trace(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "matrix_id", "sv_index", "sigma"])
            for e, m, s in self.snapshots:
                for i, v in enumerate(s.sigmas):
                    w.writerow([e, m, i, repr(float(v))])

    @classmethod
    def read_trace(cls, path) -> "RankReport":
        grouped: dict[tuple[int, str], list[tuple[int, float]]] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = {"epoch", "matrix_id", "sv_index", "sigma"} - set(reader.fieldnames or [])
            if missing:
                raise ValueError(f"{path}: missing trace columns {sorted(missing)}")
            for row in reader:
                key = (int(row["epoch"]), row["matrix_id"])
                grouped.setdefault(key, []).append((int(row["sv_index"]), float(row["sigma"])))
        report = cls()
        for (e, m), vals in grouped.items():
            vals.sort()
            report.snapshots.append((e, m, Spectrum(np.array([v for _, v in vals]))))
        return report


@dataclass(frozen=True)
class RankRow:
    epoch: int
    matrix_id: str
    numerical_rank: int
    effective_rank: float


def derive_ranks(report: RankReport, rel_tol: float = DEFAULT_RANK_TOL) -> list[RankRow]:
    if not report.snapshots:
        raise ValueError("empty rank report")
    rows = []
    for e, m, s in report.snapshots:
        erank = effective_rank(s) if s.sigmas.sum() > 0 else 0.0
        rows.append(RankRow(e, m, numerical_rank(s, rel_tol), erank))
    return rows


def write_ranks(rows: Sequence[RankRow], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "matrix_id", "numerical_rank", "effective_rank"])
        for r in rows:
            w.writerow([r.epoch, r.matrix_id, r.numerical_rank, repr(r.effective_rank)])


# -------------------------------------------------------------- linear probe

@dataclass
class ProbeConfig:
    l2_lambdas: tuple[float, ...] = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
    max_iters: int = 2000
    learning_rate: float = 0.1
    fractions: tuple[float, float, float] = (0.1, 0.1, 0.8)
    n_splits: int = 5
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def split_nodes(n: int, fractions=(0.1, 0.1, 0.8), seed: int = 0) -> dict[str, np.ndarray]:
    """Disjoint train/val/test boolean masks covering all ``n`` nodes."""
    if n < 10:
        raise ValueError("need at least 10 nodes to split")
    perm = substream(seed, "split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    masks = {}
    for name, idx in (("train", perm[:n_train]), ("val", perm[n_train:n_train + n_val]),
                      ("test", perm[n_train + n_val:])):
        m = np.zeros(n, dtype=bool)
        m[idx] = True
        masks[name] = m
    return masks


@dataclass
class LinearProbe:
    """Softmax classifier on standardized features."""

    weight: np.ndarray  # (D, C)
    bias: np.ndarray  # (C,)
    mean: np.ndarray
    std: np.ndarray
    l2_lambda: float

    def logits(self, h: np.ndarray) -> np.ndarray:
        return ((h - self.mean) / self.std) @ self.weight + self.bias

    def predict(self, h: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(h), axis=1)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def probe_objective(weight, bias, x, y_onehot, lam):
    """Mean cross-entropy plus (lam / 2) ||W||^2, and its gradients."""
    p = _softmax(x @ weight + bias)
    n = x.shape[0]
    loss = -np.sum(y_onehot * np.log(p + 1e-300)) / n + 0.5 * lam * np.sum(weight ** 2)
    diff = (p - y_onehot) / n
    return loss, x.T @ diff + lam * weight, diff.sum(axis=0)


def _train_softmax(x, y, n_classes, lam, cfg: ProbeConfig):
    onehot = np.eye(n_classes)[y]
    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    for _ in range(cfg.max_iters):
        _, gw, gb = probe_objective(w, b, x, onehot, lam)
        w -= cfg.learning_rate * gw
        b -= cfg.learning_rate * gb
    return w, b


def accuracy(pred, y) -> float:
    pred, y = np.asarray(pred), np.asarray(y)
    if pred.shape != y.shape:
        raise ValueError("prediction and label shapes differ")
    return float(np.mean(pred == y)) if y.size else 0.0


@dataclass
class ProbeFit:
    probe: LinearProbe
    val_accuracy: dict[float, float]
    probes: dict[float, LinearProbe]


def fit_linear_probe(h_train, y_train, cfg: ProbeConfig = ProbeConfig(),
                     h_val=None, y_val=None, n_classes: Optional[int] = None) -> ProbeFit:
    """Fit one probe per lambda on the train split; pick by validation accuracy.

    Ties go to the smaller lambda. Without a validation split the training
    accuracy is used for selection.
    """
    h_train = np.asarray(h_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    if np.unique(y_train).size < 2:
        raise ValueError("training split holds a single class")
    if h_val is None:
        h_val, y_val = h_train, y_train
    c = n_classes or int(max(y_train.max(), np.max(y_val)) + 1)
    mean = h_train.mean(axis=0)
    std = h_train.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    x = (h_train - mean) / std
    probes, val_acc = {}, {}
    for lam in sorted(cfg.l2_lambdas):
        w, b = _train_softmax(x, y_train, c, lam, cfg)
        probes[lam] = LinearProbe(w, b, mean, std, lam)
        val_acc[lam] = accuracy(probes[lam].predict(h_val), y_val)
    best = max(sorted(val_acc), key=lambda lam: (val_acc[lam], -lam))
    return ProbeFit(probes[best], val_acc, probes)


def evaluate_probe(probe: LinearProbe, h_test, y_test) -> float:
    return accuracy(probe.predict(np.asarray(h_test, dtype=np.float64)), y_test)


@dataclass
class ProbeSummary:
    rows: list[dict]  # split, lambda, val_acc, test_acc
    test_accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.test_accuracies))

    @property
    def std(self) -> float:
        a = self.test_accuracies
        return float(np.std(a, ddof=1)) if len(a) > 1 else 0.0

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["split", "lambda", "val_acc", "test_acc"])
            for r in self.rows:
                w.writerow([r["split"], repr(r["lambda"]), repr(r["val_acc"]), repr(r["test_acc"])])


def probe_over_splits(h, labels, cfg: ProbeConfig = ProbeConfig()) -> ProbeSummary:
    """Fresh random split per run; every lambda is logged, the selected one scored."""
    h = np.asarray(h, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    c = int(labels.max()) + 1
    rows, tests = [], []
    for split in range(cfg.n_splits):
        masks = split_nodes(len(labels), cfg.fractions, seed=cfg.seed * 1000 + split)
        fit = fit_linear_probe(h[masks["train"]], labels[masks["train"]], cfg,
                               h[masks["val"]], labels[masks["val"]], n_classes=c)
        for lam, p in fit.probes.items():
            rows.append({"split": split, "lambda": lam, "val_acc": fit.val_accuracy[lam],
                         "test_acc": evaluate_probe(p, h[masks["test"]], labels[masks["test"]])})
        tests.append(evaluate_probe(fit.probe, h[masks["test"]], labels[masks["test"]]))
    return ProbeSummary(rows, tests)
