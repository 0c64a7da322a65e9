"""Toy Gaussian data, graph bundles on disk, synthetic SBM graphs, augmentations.

Graph-bundle directory layout::

    meta.json     {"n_nodes", "feat_dim", "n_classes", "feature_encoding": "csv"|"bin"}
    edges.csv     "src,dst" per line (header optional)
    features.csv  N lines of D comma-separated floats   (feature_encoding = csv)
    features.bin  N*D little-endian float32, row-major  (feature_encoding = bin)
    labels.csv    one integer class id per line
    masks.csv     optional; N lines "train,val,test" of 0/1
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .rng import substream

log = logging.getLogger(__name__)


class BundleError(Exception):
    pass


class BundleFileMissing(BundleError, FileNotFoundError):
    pass


class BundleIndexError(BundleError, IndexError):
    pass


class BundleShapeError(BundleError, ValueError):
    pass


# ------------------------------------------------------------------ toy data

@dataclass
class ToyDataConfig:
    n_points: int = 1000
    dim: int = 16
    aug_amplitude: float = 0.1
    noisy_block_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.noisy_block_size > self.dim:
            raise ValueError("noisy block larger than the data dimension")
        if self.aug_amplitude < 0:
            raise ValueError("augmentation amplitude must be non-negative")


def gen_toy_dataset(cfg: ToyDataConfig) -> np.ndarray:
    """Gaussian sample whitened to zero mean and identity (1/N) covariance."""
    if cfg.n_points <= cfg.dim:
        raise ValueError("need more points than dimensions to whiten")
    for attempt in range(16):
        x = substream(cfg.seed, "toy-data", attempt).standard_normal((cfg.n_points, cfg.dim))
        x -= x.mean(axis=0)
        cov = x.T @ x / cfg.n_points
        evals, evecs = np.linalg.eigh(cov)
        if evals.min() <= 1e-8 * evals.max():
            continue
        x = x @ (evecs / np.sqrt(evals)) @ evecs.T
        return x - x.mean(axis=0)
    raise RuntimeError("could not draw a full-rank toy sample")


def augment_toy(x: np.ndarray, cfg: ToyDataConfig, view_seed) -> np.ndarray:
    """Add N(0, k) noise to the last ``noisy_block_size`` coordinates only.

    ``view_seed`` is an int or a tuple of stream labels under ``cfg.seed``.
    """
    if x.shape[1] != cfg.dim:
        raise ValueError(f"expected {cfg.dim} columns, got {x.shape[1]}")
    if cfg.aug_amplitude == 0:
        return x.copy()
    keys = view_seed if isinstance(view_seed, tuple) else (view_seed,)
    rng = substream(cfg.seed, "toy-view", *keys)
    out = x.copy()
    b = cfg.noisy_block_size
    out[:, cfg.dim - b:] += np.sqrt(cfg.aug_amplitude) * rng.standard_normal((x.shape[0], b))
    return out


# -------------------------------------------------------------------- graphs

@dataclass
class GraphBundle:
    n_nodes: int
    edges: np.ndarray  # (E, 2) int64, src < dst
    features: np.ndarray  # (N, D) float64
    labels: np.ndarray  # (N,) int64
    masks: Optional[dict[str, np.ndarray]] = None
    feature_encoding: str = "csv"

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= self.n_nodes):
            raise BundleIndexError(f"edge endpoint outside [0, {self.n_nodes})")
        if self.features.shape[0] != self.n_nodes:
            raise BundleShapeError(f"{self.features.shape[0]} feature rows for {self.n_nodes} nodes")
        if self.labels.size != self.n_nodes:
            raise BundleShapeError(f"{self.labels.size} labels for {self.n_nodes} nodes")
        if not np.all(np.isfinite(self.features)):
            raise BundleShapeError("features contain non-finite values")

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def canonical_edges(edges, n_nodes: Optional[int] = None) -> tuple[np.ndarray, int]:
    """Sort each pair, drop self-edges and duplicates; returns (edges, n_self_edges)."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if n_nodes is not None and e.size and (e.min() < 0 or e.max() >= n_nodes):
        bad = e[(e < 0).any(axis=1) | (e >= n_nodes).any(axis=1)][0]
        raise BundleIndexError(f"edge ({bad[0]}, {bad[1]}) outside [0, {n_nodes})")
    self_loops = e[:, 0] == e[:, 1]
    e = np.sort(e[~self_loops], axis=1)
    if e.size:
        e = np.unique(e, axis=0)
    return e, int(self_loops.sum())


def _read_lines(path: Path) -> list[str]:
    return [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]


def _require(path: Path) -> Path:
    if not path.is_file():
        raise BundleFileMissing(f"missing bundle file {path}")
    return path


def load_graph_bundle(path) -> GraphBundle:
    root = Path(path)
    meta = json.loads(_require(root / "meta.json").read_text(encoding="utf-8"))
    n = int(meta["n_nodes"])
    d = int(meta["feat_dim"])
    encoding = meta.get("feature_encoding", "csv")

    rows = _read_lines(_require(root / "edges.csv"))
    if rows and not rows[0].replace(",", "").replace("-", "").strip().isdigit():
        rows = rows[1:]  # header
    raw = np.array([[int(v) for v in r.split(",")] for r in rows], dtype=np.int64).reshape(-1, 2)
    edges, n_self = canonical_edges(raw, n)
    if n_self:
        log.warning("dropped %d self-edge(s) from %s", n_self, root)

    if encoding == "bin":
        blob = _require(root / "features.bin").read_bytes()
        flat = np.frombuffer(blob, dtype="<f4")
        if flat.size != n * d:
            raise BundleShapeError(f"features.bin holds {flat.size} floats, expected {n}x{d}")
        features = flat.reshape(n, d).astype(np.float64)
    elif encoding == "csv":
        lines = _read_lines(_require(root / "features.csv"))
        if len(lines) != n:
            raise BundleShapeError(f"features.csv has {len(lines)} rows, expected {n}")
        features = np.array([[float(v) for v in ln.split(",")] for ln in lines], dtype=np.float64)
        if features.shape != (n, d):
            raise BundleShapeError(f"features.csv has shape {features.shape}, expected ({n}, {d})")
    else:
        raise BundleShapeError(f"unknown feature_encoding {encoding!r}")

    lines = _read_lines(_require(root / "labels.csv"))
    if len(lines) != n:
        raise BundleShapeError(f"labels.csv has {len(lines)} rows, expected {n}")
    labels = np.array([int(v) for v in lines], dtype=np.int64)

    masks = None
    if (root / "masks.csv").is_file():
        lines = _read_lines(root / "masks.csv")
        if len(lines) != n:
            raise BundleShapeError(f"masks.csv has {len(lines)} rows, expected {n}")
        m = np.array([[int(v) for v in ln.split(",")] for ln in lines], dtype=bool)
        if m.shape != (n, 3):
            raise BundleShapeError("masks.csv needs three 0/1 columns")
        masks = {"train": m[:, 0], "val": m[:, 1], "test": m[:, 2]}

    g = GraphBundle(n, edges, features, labels, masks, encoding)
    if "n_classes" in meta and int(meta["n_classes"]) < g.n_classes:
        raise BundleShapeError(f"labels use {g.n_classes} classes, meta declares {meta['n_classes']}")
    return g


def save_graph_bundle(g: GraphBundle, path, feature_encoding: Optional[str] = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    encoding = feature_encoding or g.feature_encoding
    meta = {"n_nodes": g.n_nodes, "feat_dim": g.feat_dim, "n_classes": g.n_classes,
            "feature_encoding": encoding}
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    (root / "edges.csv").write_text("".join(f"{a},{b}\n" for a, b in g.edges), encoding="utf-8")
    if encoding == "bin":
        (root / "features.bin").write_bytes(np.ascontiguousarray(g.features, dtype="<f4").tobytes())
    else:
        (root / "features.csv").write_text(
            "".join(",".join(repr(float(v)) for v in row) + "\n" for row in g.features),
            encoding="utf-8")
    (root / "labels.csv").write_text("".join(f"{int(v)}\n" for v in g.labels), encoding="utf-8")
    if g.masks is not None:
        cols = [g.masks[k].astype(int) for k in ("train", "val", "test")]
        (root / "masks.csv").write_text(
            "".join(f"{a},{b},{c}\n" for a, b, c in zip(*cols)), encoding="utf-8")
    return root


def gen_synthetic_graph(n_nodes: int = 300, n_blocks: int = 4, p_in: float = 0.1,
                        p_out: float = 0.01, feat_dim: int = 32, seed: int = 0,
                        signal: float = 1.0, noise: float = 1.0) -> GraphBundle:
    """Stochastic block model with one-hot block features plus Gaussian noise.

    Nodes are split into contiguous, near-equal blocks; the block id is the
    label and the feature column of the same index carries ``signal``.
    """
    if not (0 <= p_out < p_in <= 1):
        raise ValueError("need 0 <= p_out < p_in <= 1")
    if feat_dim < n_blocks:
        raise ValueError("feat_dim must be at least n_blocks")
    labels = np.arange(n_nodes) * n_blocks // n_nodes
    rng = substream(seed, "sbm")
    iu, ju = np.triu_indices(n_nodes, k=1)
    same = labels[iu] == labels[ju]
    keep = rng.random(iu.size) < np.where(same, p_in, p_out)
    edges = np.column_stack([iu[keep], ju[keep]])
    features = noise * rng.standard_normal((n_nodes, feat_dim))
    features[np.arange(n_nodes), labels] += signal
    return GraphBundle(n_nodes, edges, features, labels)


@dataclass
class AugmentConfig:
    """Per-view distortion rates; ``multiplier`` scales all four."""

    p_f1: float = 0.2
    p_f2: float = 0.3
    p_e1: float = 0.4
    p_e2: float = 0.4
    multiplier: float = 1.0
    cap_at_one: bool = True

    def effective(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """((p_f1, p_e1), (p_f2, p_e2)) after scaling and clamping to [0, 1]."""
        def eff(p):
            v = p * self.multiplier
            if v > 1 and not self.cap_at_one:
                raise ValueError(f"scaled probability {v} exceeds 1 and cap_at_one is off")
            return float(min(max(v, 0.0), 1.0))
        return (eff(self.p_f1), eff(self.p_e1)), (eff(self.p_f2), eff(self.p_e2))


def augment_graph(g: GraphBundle, p_f: float, p_e: float, seed) -> GraphBundle:
    """Drop each edge with prob ``p_e``; zero a random subset of feature columns."""
    if not (0 <= p_f <= 1 and 0 <= p_e <= 1):
        raise ValueError("probabilities must lie in [0, 1]")
    keys = seed if isinstance(seed, tuple) else (seed,)
    rng = substream(keys[0], "graph-view", *keys[1:])
    keep = rng.random(len(g.edges)) >= p_e
    col_mask = rng.random(g.feat_dim) >= p_f
    return GraphBundle(g.n_nodes, g.edges[keep], g.features * col_mask[None, :],
                       g.labels, g.masks, g.feature_encoding)
