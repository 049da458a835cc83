"""White-box L-infinity attacks on input windows: FGSM, BIM, PGD.

All three share one sign-gradient step.  The perturbation is maintained in
delta space and projected onto the epsilon-ball by per-element clipping; a
step that would push an element outside the valid [0, 1] data range is
rejected for that element (it keeps its previous value), so FGSM deltas are
exactly -eps, 0, or +eps and the iterated attacks reduce to FGSM bit-exactly.
BIM and PGD keep, per sample, the iterate with the highest loss; PGD
additionally takes the best across random restarts.  Attacks are pure
functions of (model, params, x, y, config): parameters are never mutated and
PGD noise comes from per-sample Philox streams keyed by (seed, sample
index, restart).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import models
from .autodiff import Graph, backward
from .seeding import derive_seed, philox

ATTACK_KINDS = ("fgsm", "bim", "pgd")


class AttackError(RuntimeError):
    """Adversarial example generation failed (e.g. non-finite gradient)."""


@dataclass(frozen=True)
class AttackConfig:
    """Attack kind plus budget/step/iteration/restart policy.

    ``epsilon`` is the L-inf budget in normalized input units and ``alpha``
    the per-iteration step for bim/pgd; fgsm ignores alpha, iterations and
    restarts.  ``init_scale`` scales pgd's uniform random start as a fraction
    of epsilon.
    """

    kind: str
    epsilon: float = 0.1
    alpha: float = 0.1
    iterations: int = 10
    restarts: int = 0
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.kind != "fgsm":
            if not 0 <= self.alpha <= self.epsilon:
                raise ValueError(f"alpha must lie in [0, epsilon], got {self.alpha}")
            if self.iterations < 1:
                raise ValueError("iterations must be >= 1")
        if self.kind == "pgd":
            if self.restarts < 0:
                raise ValueError("restarts must be >= 0")
            if not 0 <= self.init_scale <= 1:
                raise ValueError("init_scale must lie in [0, 1]")


@dataclass
class AdversarialBatch:
    """Original inputs, the chosen perturbation, and their exact sum.

    ``loss_per_sample`` is the per-sample loss at ``perturbed``; for bim/pgd
    it is the recorded best over the tracked iterates (and restarts).
    """

    original: np.ndarray
    perturbed: np.ndarray
    delta: np.ndarray
    loss_per_sample: np.ndarray = field(repr=False, default=None)


def _prep(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"attack input must be (B, T, C), got shape {x.shape}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("attack input must lie in [0, 1] (normalized domain)")
    y = y.reshape(len(x), 1)
    return x, y


def _loss_and_grad(model, params, x, y):
    """Per-sample losses and the input gradient of the mean loss."""
    g = Graph()
    leaves = {k: g.leaf(v) for k, v in params.items()}
    xt = g.leaf(x)
    pred = model.predict_graph(g, leaves, xt)
    total = models.loss(pred, y, model.task)
    grad = backward(g, total)[xt.node_id]
    finite = np.isfinite(grad).reshape(len(x), -1).all(axis=1)
    if not finite.all():
        raise AttackError(f"non-finite input gradient for sample {int(np.argmin(finite))}")
    return models.per_sample_loss(pred.data, y, model.task), grad


def _loss_only(model, params, x, y):
    g = Graph()
    pred = model.predict_graph(g, {k: g.leaf(v) for k, v in params.items()}, g.leaf(x))
    return models.per_sample_loss(pred.data, y, model.task)


def _step(x0, d, grad, alpha, eps):
    """One projected sign step; per-element steps leaving [0, 1] are rejected."""
    d_try = np.clip(d + alpha * np.sign(grad), -eps, eps)
    cand = x0 + d_try
    return np.where((cand >= 0.0) & (cand <= 1.0), d_try, d)


def _keep_best(best_d, best_loss, d, ls):
    if best_d is None:
        return d.copy(), ls.copy()
    better = ls > best_loss
    best_d[better] = d[better]
    best_loss[better] = ls[better]
    return best_d, best_loss


def _iterate(model, params, x, y, d0, alpha, eps, iterations):
    """Sign-gradient ascent from x + d0, keeping each sample's best iterate.

    The starting point itself is not a candidate; iterates 1..n are.
    """
    d = d0
    best_d = None
    best_loss = None
    for k in range(iterations):
        ls, grad = _loss_and_grad(model, params, x + d, y)
        if k > 0:
            best_d, best_loss = _keep_best(best_d, best_loss, d, ls)
        d = _step(x, d, grad, alpha, eps)
    final_loss = _loss_only(model, params, x + d, y)
    return _keep_best(best_d, best_loss, d, final_loss)


def _batch(x, d, ls) -> AdversarialBatch:
    return AdversarialBatch(original=x, perturbed=x + d, delta=d, loss_per_sample=ls)


def fgsm(model, params, x, y, cfg: AttackConfig) -> AdversarialBatch:
    """Single sign step of size epsilon."""
    if cfg.kind != "fgsm":
        raise ValueError(f"fgsm called with kind={cfg.kind!r}")
    x, y = _prep(x, y)
    d, ls = _iterate(model, params, x, y, np.zeros_like(x),
                     alpha=cfg.epsilon, eps=cfg.epsilon, iterations=1)
    return _batch(x, d, ls)


def bim(model, params, x, y, cfg: AttackConfig) -> AdversarialBatch:
    """Iterated FGSM with step alpha, projected onto the epsilon-ball."""
    if cfg.kind != "bim":
        raise ValueError(f"bim called with kind={cfg.kind!r}")
    x, y = _prep(x, y)
    d, ls = _iterate(model, params, x, y, np.zeros_like(x),
                     alpha=cfg.alpha, eps=cfg.epsilon, iterations=cfg.iterations)
    return _batch(x, d, ls)


def _random_start(x, cfg: AttackConfig, restart: int) -> np.ndarray:
    scale = cfg.init_scale * cfg.epsilon
    if scale == 0.0:
        return np.zeros_like(x)
    d0 = np.empty_like(x)
    for i in range(len(x)):
        rng = philox(derive_seed(cfg.seed, i, restart))
        d0[i] = rng.uniform(-1.0, 1.0, x.shape[1:]) * scale
    cand = x + d0
    return np.where((cand >= 0.0) & (cand <= 1.0), d0, 0.0)


def pgd(model, params, x, y, cfg: AttackConfig) -> AdversarialBatch:
    """BIM from a random point in the epsilon-neighborhood, with restarts.

    Runs ``restarts + 1`` times and keeps, per sample, the highest-loss
    result across all runs and iterates.
    """
    if cfg.kind != "pgd":
        raise ValueError(f"pgd called with kind={cfg.kind!r}")
    x, y = _prep(x, y)
    best_d = None
    best_loss = None
    for r in range(cfg.restarts + 1):
        d0 = _random_start(x, cfg, r)
        d, ls = _iterate(model, params, x, y, d0,
                         alpha=cfg.alpha, eps=cfg.epsilon, iterations=cfg.iterations)
        best_d, best_loss = _keep_best(best_d, best_loss, d, ls)
    return _batch(x, best_d, best_loss)


_DISPATCH = {"fgsm": fgsm, "bim": bim, "pgd": pgd}


def generate(model, params, x, y, cfg: AttackConfig) -> AdversarialBatch:
    """Run the attack selected by ``cfg.kind``."""
    return _DISPATCH[cfg.kind](model, params, x, y, cfg)


def with_seed(cfg: AttackConfig, *parts) -> AttackConfig:
    """Copy of ``cfg`` whose seed is derived from its own seed plus context."""
    return replace(cfg, seed=derive_seed(cfg.seed, *parts))
