"""Optimizers and the Siamese / EMA training loops with spectrum tracing."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .data import AugmentConfig, GraphBundle, ToyDataConfig, augment_graph, augment_toy
from .evaluation import RankReport
from .linalg import Spectrum, covariance, svd
from .losses import (InfoNceConfig, VicregConfig, WERankConfig, byol_loss, infonce_loss,
                     vicreg_loss, werank)
from .models import (EmaPair, NetworkSpec, WeightStack, ema_update, gcn_forward, init_weights,
                     mlp_forward, normalize_adjacency)

TOY_SGD_LR = 0.05
TOY_SHORT_EPOCHS = 1000
TOY_LONG_EPOCHS = 10000
GRAPH_EPOCHS = 500


class TrainingDivergence(RuntimeError):
    pass


# --------------------------------------------------------------- optimizers

@dataclass
class OptimizerConfig:
    kind: str = "sgd"  # "sgd" | "adamw"
    learning_rate: float = TOY_SGD_LR
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        self.betas = tuple(self.betas)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], cfg: OptimizerConfig):
    """Plain gradient step p - lr * g (plus coupled L2 decay if configured)."""
    lr, wd = cfg.learning_rate, cfg.weight_decay
    if wd:
        return [p - lr * (g + wd * p) for p, g in zip(params, grads)]
    return [p - lr * g for p, g in zip(params, grads)]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adamw_step(state: AdamState, params, grads, cfg: OptimizerConfig):
    """Decoupled weight decay, then a bias-corrected Adam step."""
    b1, b2 = cfg.betas
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = p * (1 - cfg.learning_rate * cfg.weight_decay)
        new_p.append(p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


class Optimizer:
    def __init__(self, cfg: OptimizerConfig, params):
        self.cfg = cfg
        self.state = AdamState.zeros_like(params) if cfg.kind == "adamw" else None

    def step(self, params, grads):
        if self.cfg.kind == "sgd":
            return sgd_step(params, grads, self.cfg)
        params, self.state = adamw_step(self.state, params, grads, self.cfg)
        return params


# ------------------------------------------------------------------ configs

@dataclass
class TrainRunConfig:
    model: NetworkSpec
    loss: str = "vicreg"  # "vicreg" | "infonce" | "byol"
    vicreg: VicregConfig = field(default_factory=VicregConfig)
    infonce: InfoNceConfig = field(default_factory=InfoNceConfig)
    werank: Optional[WERankConfig] = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = TOY_LONG_EPOCHS
    trace_every: int = 100
    seed: int = 0
    aug_amplitude: float = 0.1
    ema_decay: float = 0.995
    predictor: Optional[NetworkSpec] = None

    def __post_init__(self):
        if self.loss not in ("vicreg", "infonce", "byol"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.trace_every < 1:
            raise ValueError("trace_every must be at least 1")
        if self.werank is not None and len(self.werank.alphas) != len(self.model.layers):
            raise ValueError("WERank coefficients do not match the number of layers")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunResult:
    stack: WeightStack
    report: RankReport
    losses: list[tuple[int, float, float, float]]
    meta: dict
    target: Optional[WeightStack] = None
    predictor: Optional[WeightStack] = None

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.report.write_trace(out / "trace.csv")
        with open(out / "loss.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "ssl", "werank", "total"])
            for e, s, r, t in self.losses:
                w.writerow([e, repr(s), repr(r), repr(t)])
        (out / "meta.json").write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
        return out


def _meta(cfg: TrainRunConfig, **extra) -> dict:
    meta = {"config": cfg.to_dict(),
            "views": "resampled every epoch",
            "flags": {
                "infonce_temperature_default": cfg.loss == "infonce" and cfg.infonce.temperature == 0.5,
                "toy_learning_rate_default": cfg.optimizer.kind == "sgd"
                and cfg.optimizer.learning_rate == TOY_SGD_LR,
                "rank_metric": "numerical (rel_tol 1e-6) and effective (entropy) both reported",
            }}
    meta.update(extra)
    return meta


def _cov_spectrum(z: np.ndarray, epoch: int = -1) -> Spectrum:
    if not np.all(np.isfinite(z)):
        raise TrainingDivergence(f"non-finite representation at epoch {epoch}")
    return Spectrum.from_values(covariance(z).eigvals)


def _check_finite(epoch: int, ssl: float, reg: float):
    if not (math.isfinite(ssl) and math.isfinite(reg)):
        raise TrainingDivergence(f"non-finite loss at epoch {epoch}: ssl={ssl}, werank={reg}")


def _ssl_loss(cfg: TrainRunConfig, z1, z2):
    if cfg.loss == "vicreg":
        return vicreg_loss(z1, z2, cfg.vicreg)
    if cfg.loss == "infonce":
        return infonce_loss(z1, z2, cfg.infonce)
    raise ValueError("Siamese training supports vicreg and infonce only")


def _check_params(epoch: int, params):
    if not all(np.all(np.isfinite(p)) for p in params):
        raise TrainingDivergence(f"non-finite parameters after the step at epoch {epoch}")


def _regularizer(cfg: TrainRunConfig, weights):
    return werank(weights, cfg.werank) if cfg.werank is not None else None


def _combine(ssl, reg):
    return ssl if reg is None else ssl + reg


def _trace_epoch(epoch: int, cfg: TrainRunConfig) -> bool:
    return epoch == 0 or epoch % cfg.trace_every == 0 or epoch == cfg.epochs


# ---------------------------------------------------------- Siamese training

def train_siamese(cfg: TrainRunConfig, data: np.ndarray) -> RunResult:
    """Shared-weight two-view training on toy data (VICReg or InfoNCE).

    Views are ``augment_toy`` draws keyed by (seed, epoch, view), so arms with
    the same seed see the same views.
    """
    if cfg.loss not in ("vicreg", "infonce"):
        raise ValueError("train_siamese needs loss 'vicreg' or 'infonce'")
    spec = cfg.model
    toy = ToyDataConfig(n_points=data.shape[0], dim=data.shape[1],
                        aug_amplitude=cfg.aug_amplitude, seed=cfg.seed,
                        noisy_block_size=min(8, data.shape[1]))
    stack = init_weights(spec, cfg.seed)
    opt = Optimizer(cfg.optimizer, stack.parameters())
    report, losses = RankReport(), []
    clean = ad.const(data)

    def trace(epoch):
        for i, w in enumerate(stack.weights):
            report.add(epoch, f"W{i + 1}", svd(w)[1])
        z = mlp_forward(stack.to_nodes(False), spec, clean)[-1].value
        report.add(epoch, "Z", _cov_spectrum(z, epoch))

    trace(0)
    for epoch in range(1, cfg.epochs + 1):
        x1 = augment_toy(data, toy, (epoch, 1))
        x2 = augment_toy(data, toy, (epoch, 2))
        nodes = stack.to_nodes()
        z1 = mlp_forward(nodes, spec, ad.const(x1))[-1]
        z2 = mlp_forward(nodes, spec, ad.const(x2))[-1]
        ssl = _ssl_loss(cfg, z1, z2)
        reg = _regularizer(cfg, nodes.weights)
        total = _combine(ssl, reg)
        reg_v = reg.item() if reg is not None else 0.0
        _check_finite(epoch, ssl.item(), reg_v)
        ad.backward(total)
        stack = stack.with_parameters(opt.step(stack.parameters(), nodes.grads()))
        _check_params(epoch, stack.parameters())
        losses.append((epoch, ssl.item(), reg_v, total.item()))
        if _trace_epoch(epoch, cfg):
            trace(epoch)
    meta = _meta(cfg, trainer="siamese", noise_block="last coordinates")
    return RunResult(stack, report, losses, meta)


def minimize_werank(w0: np.ndarray, cfg: WERankConfig, opt_cfg: OptimizerConfig,
                    steps: int, tol: Optional[float] = None):
    """Gradient descent on WERank alone for a single weight matrix.

    Stops early once every singular value is within ``tol`` of 1. Returns
    (weights, steps_taken, max |sigma - 1|).
    """
    w = np.array(w0, dtype=np.float64)
    opt = Optimizer(opt_cfg, [w])
    step = 0
    for step in range(1, steps + 1):
        node = ad.leaf(w)
        loss = werank([node], cfg)
        ad.backward(loss)
        (w,) = opt.step([w], [node.grad])
        if tol is not None and step % 100 == 0:
            if np.max(np.abs(svd(w)[1].sigmas - 1.0)) < tol:
                break
    return w, step, float(np.max(np.abs(svd(w)[1].sigmas - 1.0)))


# -------------------------------------------------------------- EMA training

class ViewProvider(Protocol):
    def views(self, epoch: int) -> tuple: ...

    def forward(self, stack: WeightStack, spec: NetworkSpec, view) -> list: ...

    def clean(self): ...


class ToyViews:
    def __init__(self, data: np.ndarray, aug_amplitude: float, seed: int):
        self.data = data
        self.toy = ToyDataConfig(n_points=data.shape[0], dim=data.shape[1],
                                 aug_amplitude=aug_amplitude, seed=seed,
                                 noisy_block_size=min(8, data.shape[1]))

    def views(self, epoch):
        return (augment_toy(self.data, self.toy, (epoch, 1)),
                augment_toy(self.data, self.toy, (epoch, 2)))

    def forward(self, stack, spec, view):
        return mlp_forward(stack, spec, ad.const(view))

    def clean(self):
        return self.data


class GraphViews:
    """Two edge-drop / feature-mask views of one graph per epoch."""

    def __init__(self, graph: GraphBundle, augment: AugmentConfig, seed: int):
        self.graph = graph
        self.augment = augment
        self.seed = seed
        self._clean = (normalize_adjacency(graph.edges, graph.n_nodes), graph.features)

    def views(self, epoch):
        (pf1, pe1), (pf2, pe2) = self.augment.effective()
        out = []
        for k, (pf, pe) in enumerate(((pf1, pe1), (pf2, pe2)), start=1):
            g = augment_graph(self.graph, pf, pe, (self.seed, epoch, k))
            out.append((normalize_adjacency(g.edges, g.n_nodes), g.features))
        return tuple(out)

    def forward(self, stack, spec, view):
        adj, x = view
        return gcn_forward(stack, spec, ad.const(adj), ad.const(x))

    def clean(self):
        return self._clean


def encode(provider: ViewProvider, stack: WeightStack, spec: NetworkSpec) -> np.ndarray:
    """Encoder output on the un-augmented input."""
    return provider.forward(stack.to_nodes(False), spec, provider.clean())[-1].value


def train_ema(cfg: TrainRunConfig, provider: ViewProvider) -> RunResult:
    """BYOL/BGRL loop: online encoder + predictor regress onto an EMA target.

    WERank is applied to the online encoder weights only; the predictor and
    the target copy are never regularized.
    """
    if cfg.loss != "byol":
        raise ValueError("train_ema needs loss 'byol'")
    spec, pspec = cfg.model, cfg.predictor
    online = init_weights(spec, cfg.seed, stream=0)
    pair = EmaPair.from_online(online, cfg.ema_decay)
    predictor = init_weights(pspec, cfg.seed, stream=1) if pspec is not None else None
    n_online = len(online.parameters())
    params = online.parameters() + (predictor.parameters() if predictor else [])
    opt = Optimizer(cfg.optimizer, params)
    report, losses = RankReport(), []

    def predict(pstack, h):
        return mlp_forward(pstack, pspec, h)[-1] if pstack is not None else h

    def trace(epoch):
        for i, w in enumerate(pair.online.weights):
            report.add(epoch, f"W{i + 1}", svd(w)[1])
        h = encode(provider, pair.online, spec)
        report.add(epoch, "H", _cov_spectrum(h, epoch))
        if predictor is not None:
            z = predict(predictor.to_nodes(False), ad.const(h)).value
            report.add(epoch, "Z", _cov_spectrum(z, epoch))

    trace(0)
    for epoch in range(1, cfg.epochs + 1):
        v1, v2 = provider.views(epoch)
        on = pair.online.to_nodes()
        pr = predictor.to_nodes() if predictor is not None else None
        tg = pair.target.to_nodes(requires_grad=False)
        p1 = predict(pr, provider.forward(on, spec, v1)[-1])
        p2 = predict(pr, provider.forward(on, spec, v2)[-1])
        t1 = ad.stop_gradient(provider.forward(tg, spec, v1)[-1])
        t2 = ad.stop_gradient(provider.forward(tg, spec, v2)[-1])
        ssl = byol_loss(p1, t2, p2, t1)
        reg = _regularizer(cfg, on.weights)
        total = _combine(ssl, reg)
        reg_v = reg.item() if reg is not None else 0.0
        _check_finite(epoch, ssl.item(), reg_v)
        ad.backward(total)
        grads = on.grads() + (pr.grads() if pr is not None else [])
        new = opt.step(pair.online.parameters() + (predictor.parameters() if predictor else []), grads)
        _check_params(epoch, new)
        pair.online = pair.online.with_parameters(new[:n_online])
        if predictor is not None:
            predictor = predictor.with_parameters(new[n_online:])
        ema_update(pair)
        losses.append((epoch, ssl.item(), reg_v, total.item()))
        if _trace_epoch(epoch, cfg):
            trace(epoch)
    meta = _meta(cfg, trainer="ema", predictor=pspec is not None,
                 norm_order="norm then activation")
    return RunResult(pair.online, report, losses, meta, target=pair.target, predictor=predictor)
