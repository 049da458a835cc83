"""Metrics and the clean / attacked / defended evaluation matrix.

The report has one column per model and rows ``clean``, ``attacked:<kind>``
and ``defended:<kind>`` for every configured attack.  Attacked rows perturb
the test set against the base model; defended rows evaluate each attack's
adversarially trained model on perturbations crafted against that defended
model ("adaptive", the default) or against the base model ("transfer").
Reports are pure functions of checkpoints, test data and seeds, and their
CSV/JSON/Markdown renderings are byte-deterministic.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import attacks as atk
from .attacks import AttackConfig
from .data import WindowedDataset
from .models import ModelSpec, Network
from .seeding import derive_seed

EVAL_MODES = ("adaptive", "transfer")

CSV_FIELDS = ("dataset", "model", "row", "attack", "metric", "value", "n")


def rmse(pred, target) -> float:
    """Root mean squared error on the normalized scale."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if len(p) != len(t):
        raise ValueError(f"length mismatch: {len(p)} vs {len(t)}")
    if len(p) == 0:
        raise ValueError("rmse of empty vectors")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def accuracy(prob, label, threshold: float = 0.5) -> float:
    """Fraction of samples where (prob >= threshold) matches the 0/1 label.

    A probability exactly at the threshold predicts class 1.
    """
    p = np.asarray(prob, dtype=np.float64).ravel()
    y = np.asarray(label, dtype=np.float64).ravel()
    if len(p) != len(y):
        raise ValueError(f"length mismatch: {len(p)} vs {len(y)}")
    if len(p) == 0:
        raise ValueError("accuracy of empty vectors")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    return float(np.mean((p >= threshold).astype(np.float64) == y))


@dataclass
class Cell:
    value: float | None
    n: int


@dataclass
class EvalReport:
    dataset: str
    metric: str                       # "rmse" | "accuracy"
    models: list[str]
    attack_kinds: list[str]
    cells: dict = field(default_factory=dict)   # (row, model) -> Cell
    fingerprint: dict = field(default_factory=dict)

    @property
    def rows(self) -> list[str]:
        return (["clean"]
                + [f"attacked:{k}" for k in self.attack_kinds]
                + [f"defended:{k}" for k in self.attack_kinds])

    def value(self, row: str, model: str) -> float | None:
        cell = self.cells.get((row, model))
        return None if cell is None else cell.value

    @property
    def absent(self) -> list[tuple[str, str]]:
        return [(r, m) for r in self.rows for m in self.models
                if self.value(r, m) is None]

    # -- renderings ---------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for row in self.rows:
            kind, _, attack = row.partition(":")
            for m in self.models:
                cell = self.cells.get((row, m), Cell(None, 0))
                writer.writerow([self.dataset, m, kind, attack, self.metric,
                                 "" if cell.value is None else repr(cell.value),
                                 cell.n])
        return buf.getvalue()

    def to_markdown(self) -> str:
        def fmt(v):
            return "--" if v is None else f"{v:.2f}"

        head = f"# {self.dataset}: {self.metric} matrix\n\n"
        lines = ["| | " + " | ".join(self.models) + " |",
                 "|---" * (len(self.models) + 1) + "|"]
        for row in self.rows:
            cells = " | ".join(fmt(self.value(row, m)) for m in self.models)
            lines.append(f"| {row} | {cells} |")
        return head + "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {
            "dataset": self.dataset,
            "metric": self.metric,
            "models": self.models,
            "attacks": self.attack_kinds,
            "cells": {f"{row}/{m}": asdict(self.cells[(row, m)])
                      for row in self.rows for m in self.models
                      if (row, m) in self.cells},
            "fingerprint": self.fingerprint,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _metric_for(task: str) -> str:
    return "accuracy" if task == "classification" else "rmse"


def _score(task, preds, y, threshold) -> float:
    if task == "classification":
        return accuracy(preds, y, threshold)
    return rmse(preds, y)


def build_report(dataset_name: str, test_set: WindowedDataset,
                 specs: dict[str, ModelSpec], attack_cfgs: list[AttackConfig],
                 base_params: dict, defended_params: dict,
                 eval_mode: str = "adaptive", threshold: float = 0.5,
                 seed: int = 0) -> EvalReport:
    """Assemble the full matrix; missing checkpoints leave cells absent.

    ``base_params`` maps model name -> params (or None); ``defended_params``
    maps (model name, attack kind) -> params (or None).  Perturbed test sets
    are regenerated per cell with seeds derived from ``seed``.
    """
    if not specs:
        raise ValueError("no models configured")
    if not attack_cfgs:
        raise ValueError("no attacks configured")
    if eval_mode not in EVAL_MODES:
        raise ValueError(f"unknown eval mode {eval_mode!r}")
    task = test_set.task
    n = len(test_set)
    report = EvalReport(
        dataset=dataset_name,
        metric=_metric_for(task),
        models=list(specs),
        attack_kinds=[a.kind for a in attack_cfgs],
        fingerprint={
            "dataset": dataset_name,
            "eval_mode": eval_mode,
            "threshold": threshold,
            "report_seed": seed,
            "test_samples": n,
            "attacks": [asdict(a) for a in attack_cfgs],
            "models": {name: asdict(spec) for name, spec in specs.items()},
            "seed_scheme": "blake2b64(seed|'report'|model|kind) per attacked cell; "
                           "blake2b64(seed|'report-defended'|model|kind) per defended cell",
        },
    )

    for name, spec in specs.items():
        net = Network(spec)
        params = base_params.get(name)
        if params is not None:
            preds = net.predict(params, test_set.X)
            report.cells[("clean", name)] = Cell(_score(task, preds, test_set.y, threshold), n)
            for acfg in attack_cfgs:
                cfg = atk.with_seed(acfg, "report", name, acfg.kind)
                batch = atk.generate(net, params, test_set.X, test_set.y, cfg)
                preds = net.predict(params, batch.perturbed)
                report.cells[(f"attacked:{acfg.kind}", name)] = Cell(
                    _score(task, preds, test_set.y, threshold), n)
        for acfg in attack_cfgs:
            dparams = defended_params.get((name, acfg.kind))
            if dparams is None:
                continue
            target = dparams if eval_mode == "adaptive" else params
            if target is None:
                continue
            cfg = atk.with_seed(acfg, "report-defended", name, acfg.kind)
            batch = atk.generate(net, target, test_set.X, test_set.y, cfg)
            preds = net.predict(dparams, batch.perturbed)
            report.cells[(f"defended:{acfg.kind}", name)] = Cell(
                _score(task, preds, test_set.y, threshold), n)
    return report


def write_overlay_svg(path, actual, predicted, title: str = "actual vs predicted",
                      max_points: int = 400) -> None:
    """Minimal deterministic SVG overlay of two series (no plotting deps)."""
    a = np.asarray(actual, dtype=np.float64).ravel()[:max_points]
    p = np.asarray(predicted, dtype=np.float64).ravel()[:max_points]
    w, h, pad = 800.0, 300.0, 20.0
    lo = min(a.min(), p.min())
    hi = max(a.max(), p.max())
    span = (hi - lo) or 1.0
    step = (w - 2 * pad) / max(len(a) - 1, 1)

    def poly(series):
        pts = " ".join(f"{pad + i * step:.2f},{h - pad - (v - lo) / span * (h - 2 * pad):.2f}"
                       for i, v in enumerate(series))
        return pts

    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w:.0f} {h:.0f}">\n'
           f'<rect width="{w:.0f}" height="{h:.0f}" fill="white"/>\n'
           f'<text x="{pad}" y="14" font-size="12" font-family="sans-serif">{title}'
           f' (blue: actual, orange: predicted)</text>\n'
           f'<polyline fill="none" stroke="#1f77b4" stroke-width="1" points="{poly(a)}"/>\n'
           f'<polyline fill="none" stroke="#ff7f0e" stroke-width="1" points="{poly(p)}"/>\n'
           f'</svg>\n')
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(svg)
