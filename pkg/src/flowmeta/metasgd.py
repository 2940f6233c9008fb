"""Meta-SGD: learn an initialization theta and per-parameter step sizes alpha.

Per task the inner step is ``theta_i = theta - alpha * grad L_sup(theta)``.
The outer step moves (theta, alpha) against the gradient of the summed
validation losses L_val(theta_i). With g = grad L_sup(theta),
v = grad L_val(theta_i) and H the support-loss Hessian at theta:

    d/d alpha = -g * v
    d/d theta = v - H (alpha * v)      (exact)
    d/d theta = v                      (first order)

Task losses inside the learner are averaged over the set by default
(`reduction="mean"`) so that one learned alpha stays usable across
different shot counts; ``"sum"`` reproduces the literal summed loss.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import net
from .episodes import ClassSplit, Episode, LabeledDataset, sample_episode
from .errors import NumericalError, PreconditionError

log = logging.getLogger(__name__)

EXACT = "exact"
FIRST_ORDER = "first_order"
OUTER_MODES = (EXACT, FIRST_ORDER)


@dataclass(frozen=True)
class MetaParameters:
    theta: net.ParameterSet
    alpha: np.ndarray = field(repr=False)
    beta: float = 0.001
    reduction: str = net.MEAN

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=np.float64, copy=True).ravel()
        if alpha.size != self.theta.flat.size:
            raise PreconditionError(
                f"alpha has {alpha.size} entries, theta has {self.theta.flat.size}"
            )
        if not self.beta > 0:
            raise PreconditionError(f"beta must be positive, got {self.beta}")
        if self.reduction not in net.REDUCTIONS:
            raise PreconditionError(f"reduction must be one of {net.REDUCTIONS}")
        alpha.flags.writeable = False
        object.__setattr__(self, "alpha", alpha)

    @property
    def shape(self) -> net.NetworkShape:
        return self.theta.shape

    @property
    def K(self) -> int:
        return self.shape.output_dim - 2

    def __eq__(self, other):
        return (
            isinstance(other, MetaParameters)
            and self.theta == other.theta
            and np.array_equal(self.alpha, other.alpha)
            and self.beta == other.beta
            and self.reduction == other.reduction
        )

    __hash__ = None


@dataclass
class TrainConfig:
    seed: int = 0
    episodes: int = 10_000
    K: int = 5
    M: int = 10
    N: int | None = None  # None -> N = M
    inner_steps_train: int = 1
    adapt_steps: int = 10
    outer_mode: str = EXACT
    alpha_init: float = 0.01
    beta: float = 0.001
    loss_reduction: str = net.MEAN
    hidden: tuple = net.DEFAULT_HIDDEN
    patience: int = 500  # episodes; 0 disables early stopping
    holdout_every: int = 100
    holdout_episodes: int = 10

    def __post_init__(self):
        if self.N is None:
            self.N = self.M
        self.hidden = tuple(self.hidden)
        for name in ("K", "M", "N", "inner_steps_train", "adapt_steps", "holdout_every", "holdout_episodes"):
            if getattr(self, name) < 1:
                raise PreconditionError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.episodes < 0 or self.patience < 0:
            raise PreconditionError("episodes and patience must be >= 0")
        if self.outer_mode not in OUTER_MODES:
            raise PreconditionError(f"outer_mode must be one of {OUTER_MODES}, got {self.outer_mode!r}")
        if not self.beta > 0:
            raise PreconditionError(f"beta must be positive, got {self.beta}")
        if self.loss_reduction not in net.REDUCTIONS:
            raise PreconditionError(f"loss_reduction must be one of {net.REDUCTIONS}")
        if self.outer_mode == EXACT and self.inner_steps_train != 1:
            raise PreconditionError("exact outer mode supports inner_steps_train = 1 only")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def init_meta(shape: net.NetworkShape, seed, alpha_init=0.01, beta=0.001, reduction=net.MEAN) -> MetaParameters:
    theta = net.init_network(shape, seed)
    return MetaParameters(theta, np.full(shape.n_params, float(alpha_init)), beta, reduction)


def _step(flat, shape, alpha, X, y, reduction):
    return flat - alpha * net.flat_loss_and_grad(flat, shape, X, y, reduction)[1]


def inner_update(meta: MetaParameters, X, y) -> net.ParameterSet:
    """One step theta - alpha * grad L_sup(theta) on the support set (X, y)."""
    return net.ParameterSet(
        meta.shape, _step(meta.theta.flat, meta.shape, meta.alpha, X, y, meta.reduction)
    )


def task_val_loss(theta_i: net.ParameterSet, X, y, reduction=net.SUM) -> float:
    return net.batch_loss(theta_i, X, y, reduction)


def meta_objective(theta_flat, alpha, shape, episode: Episode, reduction=net.MEAN) -> float:
    """Sum over tasks of the validation loss after one inner step."""
    total = 0.0
    for t in episode.tasks:
        adapted = _step(theta_flat, shape, alpha, t.support_X, t.support_y, reduction)
        total += net.flat_loss(adapted, shape, t.val_X, t.val_y, reduction)
    return total


def meta_gradient(meta: MetaParameters, episode: Episode, mode=EXACT, inner_steps=1):
    """Return (grad_theta, grad_alpha, per-task validation losses)."""
    if mode not in OUTER_MODES:
        raise PreconditionError(f"unknown outer mode {mode!r}")
    if mode == EXACT and inner_steps != 1:
        raise PreconditionError("exact outer mode supports a single inner step only")
    shape, theta, alpha, red = meta.shape, meta.theta.flat, meta.alpha, meta.reduction
    g_theta = np.zeros_like(theta)
    g_alpha = np.zeros_like(theta)
    losses = []
    for t in episode.tasks:  # fixed task order keeps the sum reproducible
        adapted = theta
        g_sum = np.zeros_like(theta)
        for _ in range(inner_steps):
            g = net.flat_loss_and_grad(adapted, shape, t.support_X, t.support_y, red)[1]
            adapted = adapted - alpha * g
            g_sum += g
        val_loss, v = net.flat_loss_and_grad(adapted, shape, t.val_X, t.val_y, red)
        losses.append(val_loss)
        g_alpha -= g_sum * v
        if mode == EXACT:
            g_theta += v - net.flat_hvp(theta, shape, t.support_X, t.support_y, alpha * v, red)
        else:
            g_theta += v
    return g_theta, g_alpha, losses


def outer_update(meta: MetaParameters, episode: Episode, mode=EXACT, inner_steps=1) -> MetaParameters:
    g_theta, g_alpha, _ = meta_gradient(meta, episode, mode, inner_steps)
    return _apply(meta, g_theta, g_alpha)


def _apply(meta, g_theta, g_alpha):
    return MetaParameters(
        net.ParameterSet(meta.shape, meta.theta.flat - meta.beta * g_theta),
        meta.alpha - meta.beta * g_alpha,
        meta.beta,
        meta.reduction,
    )


@dataclass
class TrainResult:
    meta: MetaParameters
    log: list
    stopped_early: bool = False
    best_episode: int = 0


def _episode_seed(seed, stream, index):
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, stream, index]


def _holdout_loss(meta, episodes, cfg):
    losses = []
    for ep in episodes:
        for t in ep.tasks:
            adapted = meta.theta.flat
            for _ in range(cfg.inner_steps_train):
                adapted = _step(adapted, meta.shape, meta.alpha, t.support_X, t.support_y, meta.reduction)
            losses.append(net.flat_loss(adapted, meta.shape, t.val_X, t.val_y, meta.reduction))
    return float(np.mean(losses))


def meta_train(dataset: LabeledDataset, split: ClassSplit, cfg: TrainConfig, on_episode=None) -> TrainResult:
    """Run the episodic outer loop and return the (best held-out) meta-parameters.

    Every `holdout_every` episodes the mean validation loss over a fixed
    stream of held-out episodes is checked; training stops once it has
    not improved for `patience` episodes and the best snapshot is returned.
    """
    shape = net.NetworkShape(dataset.X.shape[1], cfg.hidden, cfg.K + 2)
    meta = init_meta(shape, cfg.seed, cfg.alpha_init, cfg.beta, cfg.loss_reduction)
    records = []
    if cfg.episodes == 0:
        return TrainResult(meta, records)

    holdout = [
        sample_episode(dataset, split, cfg.K, cfg.M, cfg.N, _episode_seed(cfg.seed, 1, i))
        for i in range(cfg.holdout_episodes)
    ] if cfg.patience else []
    best_loss, best_meta, best_ep = np.inf, meta, 0
    stopped = False
    for e in range(1, cfg.episodes + 1):
        t0 = time.perf_counter()
        episode = sample_episode(dataset, split, cfg.K, cfg.M, cfg.N, _episode_seed(cfg.seed, 0, e))
        # overflow is reported below as NumericalError rather than as warnings
        with np.errstate(over="ignore", invalid="ignore"):
            g_theta, g_alpha, losses = meta_gradient(meta, episode, cfg.outer_mode, cfg.inner_steps_train)
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss) or not np.all(np.isfinite(g_theta)) or not np.all(np.isfinite(g_alpha)):
            raise NumericalError(f"non-finite loss or gradient at episode {e}")
        meta = _apply(meta, g_theta, g_alpha)
        rec = {
            "episode": e,
            "mean_val_loss": mean_loss,
            "alpha_negative_frac": float(np.mean(meta.alpha < 0)),
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        }
        if holdout and e % cfg.holdout_every == 0:
            h = _holdout_loss(meta, holdout, cfg)
            rec["holdout_loss"] = h
            if h < best_loss:
                best_loss, best_meta, best_ep = h, meta, e
            elif e - best_ep >= cfg.patience:
                stopped = True
        records.append(rec)
        if on_episode is not None:
            on_episode(rec)
        if stopped:
            log.info("early stop at episode %d (best %d, holdout loss %.4f)", e, best_ep, best_loss)
            break
    if holdout and best_ep:
        # Episodes after the last check never met the held-out stream.
        final_h = _holdout_loss(meta, holdout, cfg) if e % cfg.holdout_every else rec["holdout_loss"]
        if final_h < best_loss:
            best_meta, best_ep = meta, e
        meta = best_meta
    else:
        best_ep = e
    return TrainResult(meta, records, stopped, best_ep)


def adapt(meta: MetaParameters, X, y, steps: int) -> net.ParameterSet:
    """Repeat the inner step `steps` times with alpha frozen; `meta` is untouched."""
    if steps < 1:
        raise PreconditionError(f"steps must be >= 1, got {steps}")
    flat = meta.theta.flat
    for _ in range(steps):
        flat = _step(flat, meta.shape, meta.alpha, X, y, meta.reduction)
    return net.ParameterSet(meta.shape, flat)


def predict(params: net.ParameterSet, X):
    """Argmax slot (ties -> lowest slot) and class probabilities."""
    probs = net.forward(params, X)
    return np.argmax(probs, axis=-1), probs


def save_meta(path, meta: MetaParameters, header: dict | None = None) -> None:
    h = dict(header or {})
    h.update(
        shape=meta.shape.to_dict(),
        beta=meta.beta,
        loss_reduction=meta.reduction,
        init_scheme=net.INIT_SCHEME,
        hvp_method=net.HVP_METHOD,
    )
    net.save_checkpoint(path, h, {"theta": meta.theta.flat, "alpha": meta.alpha})


def load_meta(path):
    """Return (MetaParameters, header)."""
    header, arrays = net.load_checkpoint(path)
    shape = net.NetworkShape.from_dict(header["shape"])
    alpha = arrays.get("alpha")
    if alpha is None:
        alpha = np.zeros(shape.n_params)
    meta = MetaParameters(
        net.ParameterSet(shape, arrays["theta"]),
        alpha,
        header.get("beta", 0.001),
        header.get("loss_reduction", net.MEAN),
    )
    return meta, header


def with_alpha(meta: MetaParameters, alpha) -> MetaParameters:
    return replace(meta, alpha=np.broadcast_to(np.asarray(alpha, dtype=np.float64), meta.alpha.shape))
