"""Training with input-gradient penalties.

The total objective on a batch of N samples is

    mean_n NLL_n + lam * mean_n P_n

where P_n is either ``||grad_x NLL_n||^2`` (double backpropagation) or
``||x_n||^2 ||grad Psi^i(x_n)||^2 - <x_n, grad Psi^i(x_n)>^2`` with i the
predicted class (the alignment penalty). Per-sample input gradients come
from one backward pass over the summed per-sample terms, since sample n's
term depends on x_n only; that pass is built with ``create_graph=True`` and
differentiated again for the parameter gradients.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .network import Network, argmax_lowest, build_network

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "TrainingDivergedError",
    "TrainConfig",
    "TrainHistory",
    "LossResult",
    "objective",
    "double_backprop_loss",
    "alignment_penalty_loss",
    "evaluate",
    "train",
    "lambda_sweep",
    "SweepEntry",
    "geometric_grid",
    "PENALTY_KINDS",
]

PENALTY_KINDS = ("grad-norm", "alignment", "none")


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.0
    penalty_kind: str = "grad-norm"
    epochs: int = 10
    batch_size: int = 100
    learning_rate: float = 0.01
    momentum: float = 0.9
    patience: int = 3
    plateau_threshold: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ConfigError(f"lambda must be a finite non-negative number, got {self.lam}")
        if self.penalty_kind not in PENALTY_KINDS:
            raise ConfigError(f"penalty_kind must be one of {PENALTY_KINDS}, got {self.penalty_kind!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    penalty: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)
    network: Network | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items() if k != "network"}


class LossResult(NamedTuple):
    loss: float
    gradients: list[np.ndarray]
    nll: float
    penalty: float


def _per_sample_sum(t: Tensor) -> Tensor:
    return ad.sum_axes(t, tuple(range(1, t.ndim)))


def objective(net: Network, batch, lam: float, kind: str = "grad-norm", *,
              train: bool = False, rng: np.random.Generator | None = None) -> LossResult:
    """Total batch objective and its parameter gradients.

    ``train`` enables dropout (masks drawn from ``rng``). With ``lam == 0``
    the penalty is only measured, never differentiated, so the gradients
    are exactly those of the plain NLL.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be non-negative, got {lam}")
    if kind not in PENALTY_KINDS:
        raise ConfigError(f"unknown penalty kind {kind!r}")
    X, y = batch
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    N = len(X)
    if N == 0:
        raise ValueError("empty batch")
    if y.min() < 0 or y.max() >= net.n_classes:
        raise ValueError(f"labels must lie in [0, {net.n_classes})")
    onehot = np.eye(net.n_classes)[y]
    params = [Tensor(p, requires_grad=True) for p in net.parameters()]
    xt = Tensor(X, requires_grad=True)
    differentiate_penalty = lam > 0 and kind != "none"
    with ad.enable_grad():
        Z = net.forward(xt, params, train=train, rng=rng)
        nll_sum = -ad.sum(ad.mask_mul(ad.log_softmax(Z), onehot))
        nll = nll_sum / N
        if kind == "alignment":
            pred = np.eye(net.n_classes)[argmax_lowest(Z.value)]
            (G,) = ad.gradients(ad.sum(ad.mask_mul(Z, pred)), [xt], create_graph=differentiate_penalty)
            xx = _per_sample_sum(Tensor(X * X)).value
            gg = _per_sample_sum(G * G)
            xg = _per_sample_sum(G * Tensor(X))
            pen = ad.sum(ad.mask_mul(gg, xx) - xg * xg) / N
        elif kind == "grad-norm":
            (G,) = ad.gradients(nll_sum, [xt], create_graph=differentiate_penalty)
            pen = ad.sum(G * G) / N
        else:
            pen = Tensor(0.0)
        total = nll + pen * lam if differentiate_penalty else nll
    grads = ad.gradients(total, params)
    return LossResult(float(total.value), [g.value for g in grads], float(nll.value), float(pen.value))


def double_backprop_loss(net: Network, batch, lam: float, **kw) -> tuple[float, list[np.ndarray]]:
    r = objective(net, batch, lam, "grad-norm", **kw)
    return r.loss, r.gradients


def alignment_penalty_loss(net: Network, batch, lam: float, **kw) -> tuple[float, list[np.ndarray]]:
    r = objective(net, batch, lam, "alignment", **kw)
    return r.loss, r.gradients


def evaluate(net: Network, X: np.ndarray, y: np.ndarray, chunk: int = 500) -> tuple[float, float]:
    """Eval-mode mean NLL and accuracy."""
    nll, correct = 0.0, 0
    for k in range(0, len(X), chunk):
        Z = net.logits_batch(X[k:k + chunk])
        m = Z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(Z - m).sum(axis=1))
        yk = y[k:k + chunk]
        nll += float((lse - Z[np.arange(len(yk)), yk]).sum())
        correct += int((argmax_lowest(Z) == yk).sum())
    n = max(len(X), 1)
    return nll / n, correct / n


def train(net: Network, dataset: Dataset, cfg: TrainConfig) -> tuple[Network, TrainHistory]:
    """Minibatch SGD with momentum; returns a trained copy in eval mode."""
    tr, va = dataset.train, dataset.validation
    if len(tr) == 0:
        raise ValueError("dataset has no training split")
    net = net.copy().train()
    order_rng = np.random.default_rng([cfg.seed, 0])
    drop_rng = np.random.default_rng([cfg.seed, 1])
    velocity = [np.zeros_like(p) for p in net.parameters()]
    lr = cfg.learning_rate
    best_val, stale = math.inf, 0
    hist = TrainHistory()
    kind = cfg.penalty_kind if cfg.lam > 0 else "none"
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(tr))
        losses, pens, sizes = [], [], []
        for k in range(0, len(order), cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            # divergence is detected below, so overflow warnings are noise
            with np.errstate(over="ignore", invalid="ignore"):
                r = objective(net, (tr.images[idx], tr.labels[idx]), cfg.lam, kind, train=True, rng=drop_rng)
            if not math.isfinite(r.loss) or not all(np.isfinite(g).all() for g in r.gradients):
                raise TrainingDivergedError(
                    f"non-finite objective at epoch {epoch}, batch {k // cfg.batch_size} "
                    f"(lambda={cfg.lam}, lr={lr}, nll={r.nll}, penalty={r.penalty})")
            params = net.parameters()
            for p, v, g in zip(params, velocity, r.gradients):
                v *= cfg.momentum
                v += g
                p -= lr * v
            losses.append(r.loss)
            pens.append(r.penalty)
            sizes.append(len(idx))
        net.eval()
        if len(va):
            val_loss, val_acc = evaluate(net, va.images, va.labels)
        else:
            val_loss, val_acc = float(np.average(losses, weights=sizes)), float("nan")
        net.train()
        hist.train_loss.append(float(np.average(losses, weights=sizes)))
        hist.penalty.append(float(np.average(pens, weights=sizes)))
        hist.val_loss.append(val_loss)
        hist.val_accuracy.append(val_acc)
        hist.learning_rate.append(lr)
        logger.info("epoch %d: loss %.5g penalty %.5g val_loss %.5g val_acc %.4f lr %.3g",
                    epoch, hist.train_loss[-1], hist.penalty[-1], val_loss, val_acc, lr)
        if val_loss < best_val * (1 - cfg.plateau_threshold):
            best_val, stale = val_loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                lr /= 10.0
                stale = 0
                logger.info("validation loss plateaued; learning rate now %.3g", lr)
    net.eval()
    net.meta.update({"lambda": cfg.lam, "penalty_kind": cfg.penalty_kind, "train_config": cfg.to_dict(),
                     "normalization": dataset.normalization})
    hist.network = net
    return net, hist


@dataclass
class SweepEntry:
    lam: float
    network: Network | None
    history: TrainHistory | None
    checkpoint: Path | None = None
    error: str | None = None


def geometric_grid(lo: float, hi: float, n: int) -> np.ndarray:
    """``n`` multiplicatively even values from ``lo`` to ``hi``."""
    if not (0 < lo <= hi) or n < 1:
        raise ValueError("geometric grid needs 0 < lo <= hi and n >= 1")
    return np.geomspace(lo, hi, n)


def lambda_sweep(base_cfg: TrainConfig, lambda_list: Sequence[float], dataset: Dataset,
                 spec="mnist-paper", out_dir: str | Path | None = None,
                 init_seed: int | None = None) -> list[SweepEntry]:
    """Train one model per lambda from the same initialization.

    Failures are recorded on the entry and the sweep moves on. With
    ``out_dir`` each model is saved as ``model_<k>.saln``.
    """
    lams = [float(v) for v in lambda_list]
    if not lams:
        raise ConfigError("lambda list is empty")
    if any(b < a for a, b in zip(lams, lams[1:])):
        raise ConfigError(f"lambda list must be ascending, got {lams}")
    seed = base_cfg.seed if init_seed is None else init_seed
    if isinstance(spec, Network):
        init = spec
    else:
        init = build_network(spec, seed=seed, input_shape=None if isinstance(spec, str) else dataset.input_shape)
    out: list[SweepEntry] = []
    if out_dir is not None:
        from .harness import save_checkpoint
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    for k, lam in enumerate(lams):
        cfg = TrainConfig(**{**base_cfg.to_dict(), "lam": lam})
        try:
            net, hist = train(init, dataset, cfg)
        except (TrainingDivergedError, FloatingPointError, ValueError) as exc:
            logger.error("lambda=%g failed: %s", lam, exc)
            out.append(SweepEntry(lam, None, None, error=str(exc)))
            continue
        entry = SweepEntry(lam, net, hist)
        if out_dir is not None:
            entry.checkpoint = Path(out_dir) / f"model_{k}.saln"
            save_checkpoint(net, entry.checkpoint)
        out.append(entry)
    return out
