"""Clean training and min-max adversarial training.

Adversarial training regenerates adversarial counterparts of every batch
against the current parameters (inner maximization, 1 step for fgsm and 5
for bim/pgd by default) and takes one descent step on the mean loss over the
clean batch concatenated with its adversarial twin (outer minimization).
A ``static`` mode instead perturbs the whole training set once up front and
trains normally on the combined set.  Given identical configs the final
parameters are bit-identical: shuffling, init and attack noise all come from
Philox streams derived from the config seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace, asdict
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import attacks as atk
from . import models
from .attacks import AttackConfig
from .autodiff import Graph, backward
from .models import ModelSpec, ModelParams
from .seeding import derive_seed, philox

OPTIMIZERS = ("sgd", "adam")
ADV_MODES = ("minmax", "static")

# Inner maximization steps by attack kind, overridable via inner_steps.
DEFAULT_INNER_STEPS = {"fgsm": 1, "bim": 5, "pgd": 5}


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    seed: int = 0
    adv: AttackConfig | None = None
    inner_steps: int | None = None
    adv_mode: str = "minmax"
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.adv_mode not in ADV_MODES:
            raise ValueError(f"unknown adv_mode {self.adv_mode!r}")
        if self.inner_steps is not None and self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")

    @property
    def resolved_inner_steps(self) -> int:
        if self.inner_steps is not None:
            return self.inner_steps
        if self.adv is None:
            raise ValueError("inner_steps requested without an attack config")
        return DEFAULT_INNER_STEPS[self.adv.kind]


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0
    config: dict = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")


def _config_echo(cfg: TrainConfig) -> dict:
    return asdict(cfg)


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        return {k: params[k] - self.lr * grads[k] for k in params}


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params, grads):
        if self.m is None:
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t += 1
        out = {}
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            out[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out


def _make_optimizer(cfg: TrainConfig):
    return _Adam(cfg.learning_rate) if cfg.optimizer == "adam" else _Sgd(cfg.learning_rate)


def _descend(spec, params, X, y, optimizer):
    """One gradient step on the batch; returns (new params, batch loss)."""
    g = Graph()
    leaves = {k: g.leaf(v) for k, v in params.items()}
    pred = models.forward(spec, leaves, g, X)
    total = models.loss(pred, y, spec.task)
    value = float(total.data)
    grad_map = backward(g, total)
    grads = {k: grad_map[t.node_id] for k, t in leaves.items()}
    return optimizer.step(params, grads), value


def _check_task(spec: ModelSpec, dataset):
    if dataset.task != spec.task:
        raise ValueError(f"dataset task {dataset.task!r} does not match model task {spec.task!r}")


def _fit(spec, X, y, cfg, start_params, make_batch, on_epoch):
    params = dict(start_params) if start_params is not None else models.init_params(spec)
    optimizer = _make_optimizer(cfg)
    rng = philox(derive_seed(cfg.seed, "shuffle"))
    n = len(X)
    report = TrainReport(config=_config_echo(cfg))
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        loss_sum = 0.0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            Xb, yb = make_batch(params, X[idx], y[idx], epoch, b)
            params, value = _descend(spec, params, Xb, yb, optimizer)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"loss diverged to {value} at epoch {epoch} batch {b}")
            loss_sum += value * len(idx)
        report.epoch_losses.append(loss_sum / n)
        if on_epoch is not None:
            on_epoch(epoch, report.epoch_losses[-1])
    report.wall_time_s = time.perf_counter() - t0
    return params, report


def train(spec: ModelSpec, dataset, cfg: TrainConfig, start_params=None,
          on_epoch=None) -> tuple[ModelParams, TrainReport]:
    """Mini-batch gradient descent on the clean training set."""
    if cfg.adv is not None:
        raise ValueError("train() is for clean training; use adversarial_train()")
    _check_task(spec, dataset)
    return _fit(spec, dataset.X, dataset.y, cfg, start_params,
                lambda params, Xb, yb, e, b: (Xb, yb), on_epoch)


def adversarial_train(spec: ModelSpec, dataset, cfg: TrainConfig, start_params=None,
                      on_epoch=None) -> tuple[ModelParams, TrainReport]:
    """Min-max adversarial training (or static augmentation per adv_mode).

    The inner maximization attacks the parameters as they stand at the start
    of the step; the attack is pure, so those parameters are untouched until
    the outer descent step replaces them.
    """
    if cfg.adv is None:
        raise ValueError("adversarial_train() requires cfg.adv")
    _check_task(spec, dataset)
    net = models.Network(spec)
    inner = replace(cfg.adv, iterations=cfg.resolved_inner_steps) \
        if cfg.adv.kind != "fgsm" else cfg.adv

    if cfg.adv_mode == "static":
        base = dict(start_params) if start_params is not None else models.init_params(spec)
        batch = atk.generate(net, base, dataset.X, dataset.y.reshape(-1, 1),
                             atk.with_seed(inner, "static"))
        X = np.concatenate([dataset.X, batch.perturbed])
        y = np.concatenate([dataset.y, dataset.y])
        return _fit(spec, X, y, cfg, start_params,
                    lambda params, Xb, yb, e, b: (Xb, yb), on_epoch)

    def make_batch(params, Xb, yb, epoch, b):
        adv = atk.generate(net, params, Xb, yb, atk.with_seed(inner, epoch, b))
        return np.concatenate([Xb, adv.perturbed]), np.concatenate([yb, yb])

    return _fit(spec, dataset.X, dataset.y, cfg, start_params, make_batch, on_epoch)


@dataclass
class SuiteResult:
    """Per-(model, attack) adversarial training outcomes; failures isolated."""

    trained: dict = field(default_factory=dict)   # (model, attack kind) -> params
    reports: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)  # (model, attack kind) -> message


def run_defense_suite(dataset, specs: dict[str, ModelSpec],
                      attack_cfgs: list[AttackConfig], cfg: TrainConfig,
                      start_params: dict[str, ModelParams] | None = None,
                      jobs: int = 1, on_cell=None) -> SuiteResult:
    """Adversarially train every (model, attack) pair; cells fail independently.

    Each cell derives its own training and attack seeds from
    (cfg.seed, "defend", model name, attack kind), so results do not depend
    on scheduling order.
    """
    if not specs:
        raise ValueError("no models configured")
    if not attack_cfgs:
        raise ValueError("no attacks configured")
    result = SuiteResult()
    cells = [(name, acfg) for name in specs for acfg in attack_cfgs]

    def run_cell(name, acfg):
        spec = specs[name]
        cell_cfg = replace(cfg,
                           seed=derive_seed(cfg.seed, "defend", name, acfg.kind),
                           adv=atk.with_seed(acfg, "defend", name))
        start = start_params.get(name) if start_params else None
        return adversarial_train(spec, dataset, cell_cfg, start_params=start)

    def finish(key, outcome, error):
        if error is not None:
            result.failures[key] = error
        else:
            result.trained[key], result.reports[key] = outcome
        if on_cell is not None:
            on_cell(key, error)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {key: pool.submit(run_cell, *key) for key in cells}
        for key, fut in futures.items():
            exc = fut.exception()
            finish(key, None if exc else fut.result(),
                   f"{type(exc).__name__}: {exc}" if exc else None)
    else:
        for key in cells:
            try:
                outcome = run_cell(*key)
            except Exception as exc:
                finish(key, None, f"{type(exc).__name__}: {exc}")
            else:
                finish(key, outcome, None)
    return result
