"""Experiment grids: layer-wise drift, refinement matrix, robustness, reference ablation, epsilon sweep.

Each experiment returns an :class:`ExperimentReport`: a grid of accuracies in
[0, 1] whose cells also carry the flat ``(attack, placement, metric)`` key
used in the CSV output. Absent cells (a measurement tap shallower than the
defense placement) hold ``None`` and are written as ``-``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import attacks as A
from . import defense as D
from . import gallery as G
from . import model as M
from .errors import ConfigError

CSV_COLUMNS = ("experiment", "dataset", "attack", "placement", "metric", "value")
REPORT_FORMAT = "wctdefense.report/1"
EXPERIMENTS = ("drift_table", "refinement_matrix", "robustness_table", "reference_ablation", "epsilon_sweep")
ABSENT = "-"


@dataclass
class Cell:
    row: str
    column: str
    attack: str
    placement: str
    metric: str
    value: Optional[float]


@dataclass
class ExperimentReport:
    kind: str
    dataset: str
    model_hash: str
    rows: list
    columns: list
    cells: list
    attack_configs: list = field(default_factory=list)
    defense_configs: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for c in self.cells:
            if c.row not in self.rows or c.column not in self.columns:
                raise ConfigError(f"{self.kind}: cell ({c.row}, {c.column}) outside the declared grid")
            if (c.row, c.column) in seen:
                raise ConfigError(f"{self.kind}: duplicate cell ({c.row}, {c.column})")
            seen.add((c.row, c.column))
            if c.value is not None and "accuracy" in c.metric and not 0.0 <= c.value <= 1.0:
                raise ConfigError(f"{self.kind}: accuracy {c.value} outside [0, 1]")

    @property
    def grid(self) -> list:
        """Row-major values; ``None`` where a cell is absent or was not computed."""
        at = {(c.row, c.column): c.value for c in self.cells}
        return [[at.get((r, k)) for k in self.columns] for r in self.rows]

    def value(self, row: str, column: str) -> Optional[float]:
        for c in self.cells:
            if c.row == row and c.column == column:
                return c.value
        raise KeyError((row, column))

    def csv_rows(self) -> list:
        return [(self.kind, self.dataset, c.attack, c.placement, c.metric,
                 ABSENT if c.value is None else repr(float(c.value))) for c in self.cells]

    def to_dict(self) -> dict:
        return {"format": REPORT_FORMAT, "kind": self.kind, "dataset": self.dataset,
                "model_hash": self.model_hash, "rows": self.rows, "columns": self.columns,
                "grid": self.grid, "cells": [vars(c) for c in self.cells],
                "attack_configs": self.attack_configs, "defense_configs": self.defense_configs,
                "seeds": self.seeds, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(d["kind"], d["dataset"], d["model_hash"], d["rows"], d["columns"],
                   [Cell(**c) for c in d["cells"]], d["attack_configs"], d["defense_configs"],
                   d["seeds"], d["metadata"])


def write_csv(reports: Sequence[ExperimentReport], path) -> Path:
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerows(r.csv_rows())
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(report: ExperimentReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path) -> ExperimentReport:
    d = json.loads(Path(path).read_text())
    if d.get("format") != REPORT_FORMAT:
        raise ConfigError(f"{path}: unsupported report format {d.get('format')!r}")
    return ExperimentReport.from_dict(d)


# ------------------------------------------------------------------- helpers

def _acc(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    return float(np.mean(np.argmax(logits, axis=1) == labels)) if len(labels) else 0.0


def _tap_name(k: int) -> str:
    return "image" if k == 0 else f"tap{k}"


def placement_name(taps: Sequence[int], all_taps: Sequence[int]) -> str:
    taps = sorted(taps)
    if len(all_taps) > 1 and taps == sorted(all_taps):
        return "all"
    return "+".join(_tap_name(k) for k in taps)


def _nn_acc(gallery: G.Gallery, feats: np.ndarray, labels) -> float:
    return G.nn_accuracy_from_features(gallery, feats, labels)


def _check_galleries(model: M.Checkpoint, galleries: dict) -> None:
    for k in model.taps:
        if k not in galleries:
            raise ConfigError(f"no gallery for tap {k}")
        if galleries[k].layer != k:
            raise ConfigError(f"gallery for tap {k} was built at layer {galleries[k].layer}")


# --------------------------------------------------------------- experiments

def drift_table(model: M.Checkpoint, galleries: dict, clean: tuple, adv: A.AdversarialSet,
                dataset: str = "") -> ExperimentReport:
    """Nearest-neighbor accuracy of clean and adversarial inputs at every tap."""
    _check_galleries(model, galleries)
    taps = model.taps
    images, labels = clean
    cols = [_tap_name(k) for k in taps]
    cells = []
    for row, x in (("clean", images), ("adversarial", adv.images)):
        _, feats = M.forward_with_taps(model, x, taps) if len(x) else (None, {})
        for k in taps:
            f = np.asarray(feats[k]).reshape(len(x), -1)
            cells.append(Cell(row, _tap_name(k), adv.config.label if row == "adversarial" else "none",
                              "none", f"nn_accuracy_{_tap_name(k)}", _nn_acc(galleries[k], f, labels)))
    return ExperimentReport("drift_table", dataset, model.digest(), ["clean", "adversarial"], cols, cells,
                            [adv.config.to_dict()], [], {"gallery": galleries[taps[0]].seed},
                            {"n_eval": len(labels), "samples_per_class": galleries[taps[0]].samples_per_class})


def refinement_matrix(model: M.Checkpoint, galleries: dict, ref_gallery: G.Gallery, adv: A.AdversarialSet,
                      placements: Optional[Sequence[Sequence[int]]] = None,
                      defense: D.DefenseConfig = D.DefenseConfig(), dataset: str = "") -> ExperimentReport:
    """NN accuracy at each tap at-or-after the placement, plus whole-model accuracy.

    Row ``none`` is the undefended network (it equals the drift table's
    adversarial row). Measurement taps shallower than the shallowest
    placement tap are absent.
    """
    _check_galleries(model, galleries)
    taps = model.taps
    placements = [tuple(p) for p in (placements or [(k,) for k in taps] + ([tuple(taps)] if len(taps) > 1 else []))]
    for p in placements:
        if not set(p) <= set(taps):
            raise ConfigError(f"placement {p} uses taps outside {taps}")
    refs, _ = D.nn_references(model, ref_gallery, adv.images)
    rows = ["none"] + [placement_name(p, taps) for p in placements]
    cols = [_tap_name(k) for k in taps] + ["model"]
    cells = []
    for row, p in zip(rows, [()] + placements):
        logits, feats = D.defended_forward(model, adv.images, refs, p, defense.eigen, measure=taps)
        for k in taps:
            present = not p or k >= min(p)
            val = _nn_acc(galleries[k], feats[k], adv.labels) if present else None
            cells.append(Cell(row, _tap_name(k), adv.config.label, row, f"nn_accuracy_{_tap_name(k)}", val))
        cells.append(Cell(row, "model", adv.config.label, row, "accuracy", _acc(logits, adv.labels)))
    defs = [D.DefenseConfig(p, defense.ref_layer, defense.eps_eig, defense.samples_per_class).to_dict()
            for p in placements]
    return ExperimentReport("refinement_matrix", dataset, model.digest(), rows, cols, cells,
                            [adv.config.to_dict()], defs, {"gallery": ref_gallery.seed},
                            {"n_eval": len(adv), "ref_layer": ref_gallery.layer})


def robustness_table(model: M.Checkpoint, ref_gallery: G.Gallery, clean: tuple, adv_sets: Sequence[A.AdversarialSet],
                     placements: Optional[Sequence[Sequence[int]]] = None,
                     defense: D.DefenseConfig = D.DefenseConfig(), dataset: str = "") -> ExperimentReport:
    """Accuracy per attack: no attack, no defense, and each defense placement.

    The ``clean`` row holds defended clean accuracy per placement, and the
    ``clean_gap`` metric (vanilla minus defended clean accuracy) is reported
    for every placement.
    """
    taps = model.taps
    placements = [tuple(p) for p in (placements or [(k,) for k in taps] + ([tuple(taps)] if len(taps) > 1 else []))]
    pnames = [placement_name(p, taps) for p in placements]
    images, labels = clean
    vanilla_clean = M.accuracy(model, images, labels)
    rows = ["clean"] + [a.config.label for a in adv_sets]
    cols = ["no_attack", "no_defense"] + pnames
    cells = []
    for label, x, y in [("clean", images, labels)] + [(a.config.label, a.images, a.labels) for a in adv_sets]:
        attack = "none" if label == "clean" else label
        cells.append(Cell(label, "no_attack", attack, "none", "vanilla_clean_accuracy", vanilla_clean))
        cells.append(Cell(label, "no_defense", attack, "none", "accuracy", M.accuracy(model, x, y)))
        refs, _ = D.nn_references(model, ref_gallery, x)
        for p, name in zip(placements, pnames):
            logits, _ = D.defended_forward(model, x, refs, p, defense.eigen)
            cells.append(Cell(label, name, attack, name, "accuracy", _acc(logits, y)))
    clean_row = {c.column: c.value for c in cells if c.row == "clean"}
    gaps = {name: vanilla_clean - clean_row[name] for name in pnames}
    rows.append("clean_gap")
    cells += [Cell("clean_gap", name, "none", name, "clean_gap", gaps[name]) for name in pnames]
    defs = [D.DefenseConfig(p, defense.ref_layer, defense.eps_eig, defense.samples_per_class).to_dict()
            for p in placements]
    return ExperimentReport("robustness_table", dataset, model.digest(), rows, cols, cells,
                            [a.config.to_dict() for a in adv_sets], defs, {"gallery": ref_gallery.seed},
                            {"n_eval": len(labels), "clean_gap": gaps, "vanilla_clean_accuracy": vanilla_clean})


def reference_ablation(model: M.Checkpoint, adv: A.AdversarialSet, galleries: dict, image_gallery: G.Gallery,
                       sources: Optional[Sequence[str]] = None, defense: D.DefenseConfig = D.DefenseConfig(),
                       seed: int = 0, dataset: str = "") -> ExperimentReport:
    """Defended accuracy with WCT at the deepest tap for each way of picking the reference.

    Sources: ``image_nn`` (nearest neighbor in pixel space), ``tapK_nn``
    (nearest neighbor at tap K), ``correct_class`` (random gallery image of
    the true class) and ``ground_truth`` (the paired clean original). The
    last two read the label or the clean image and are flagged as oracles.
    """
    deepest = model.taps[-1]
    sources = list(sources or ["image_nn"] + [f"{_tap_name(k)}_nn" for k in model.taps]
                   + ["correct_class", "ground_truth"])
    cells, oracle = [], {}
    for src in sources:
        if src == "image_nn":
            refs, _ = D.nn_references(model, image_gallery, adv.images)
        elif src.endswith("_nn") and src.startswith("tap"):
            k = int(src[3:-3])
            if k not in galleries:
                raise ConfigError(f"no gallery for reference source {src}")
            refs, _ = D.nn_references(model, galleries[k], adv.images)
        elif src == "correct_class":
            refs, _ = D.class_references(image_gallery, adv.labels, seed)
        elif src == "ground_truth":
            refs = adv.originals
        else:
            raise ConfigError(f"unknown reference source {src!r}")
        oracle[src] = src in ("correct_class", "ground_truth")
        logits, _ = D.defended_forward(model, adv.images, refs, (deepest,), defense.eigen)
        cells.append(Cell(src, "accuracy", adv.config.label, _tap_name(deepest), f"accuracy_ref_{src}",
                          _acc(logits, adv.labels)))
    return ExperimentReport("reference_ablation", dataset, model.digest(), sources, ["accuracy"], cells,
                            [adv.config.to_dict()],
                            [D.DefenseConfig((deepest,), 0, defense.eps_eig, defense.samples_per_class).to_dict()],
                            {"gallery": image_gallery.seed, "correct_class": seed},
                            {"n_eval": len(adv), "oracle": oracle,
                             "note": "oracle sources read the true label or clean image and are not deployable"})


def epsilon_sweep(model: M.Checkpoint, ref_gallery: G.Gallery, clean: tuple, attack: A.AttackConfig,
                  eps_grid: Sequence[float], defense: D.DefenseConfig = D.DefenseConfig(),
                  dataset: str = "", adv_sets: Optional[dict] = None) -> ExperimentReport:
    """Undefended and defended accuracy per attack budget.

    ``adv_sets`` may supply frozen sets keyed by epsilon; missing budgets are
    attacked on the fly.
    """
    grid = [float(e) for e in eps_grid]
    if grid != sorted(grid) or len(set(grid)) != len(grid):
        raise ConfigError("epsilon grid must be strictly increasing")
    images, labels = clean
    adv_sets = dict(adv_sets or {})
    rows = [f"{e:g}" for e in grid]
    cols = ["no_defense", "defended"]
    cells, configs = [], []
    for e, row in zip(grid, rows):
        adv = adv_sets.get(e) or A.run_attack(model, images, labels, A.with_epsilon(attack, e))
        configs.append(adv.config.to_dict())
        refs, _ = D.nn_references(model, ref_gallery, adv.images)
        logits, _ = D.defended_forward(model, adv.images, refs, defense.taps, defense.eigen)
        cells.append(Cell(row, "no_defense", adv.config.label, "none", "accuracy",
                          M.accuracy(model, adv.images, adv.labels)))
        cells.append(Cell(row, "defended", adv.config.label, defense.placement, "accuracy",
                          _acc(logits, adv.labels)))
    return ExperimentReport("epsilon_sweep", dataset, model.digest(), rows, cols, cells, configs,
                            [defense.to_dict()], {"gallery": ref_gallery.seed, "attack": attack.seed},
                            {"n_eval": len(labels), "eps_grid": grid})
