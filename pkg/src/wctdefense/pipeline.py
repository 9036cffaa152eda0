"""Stage orchestration with config-hash-keyed artifact caching.

Stages: train (or load) the vanilla checkpoint, attack the evaluation split,
build the galleries, run the selected experiments, write reports. Each
artifact lives in the cache directory under a name carrying the hash of the
config slice that produced it, embeds that hash, and is verified on load.
Reruns with an unchanged config load every artifact instead of recomputing.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Optional

from . import attacks as A
from . import evaluation as E
from . import gallery as G
from . import model as M
from .config import PipelineConfig, digest
from .data import Dataset, SPLITS, find_split, load_split
from .errors import MissingArtifactError, StageError, WCTDefenseError

log = logging.getLogger(__name__)


@contextlib.contextmanager
def stage(name: str):
    """Tag failures with the stage name; unexpected exceptions become stage errors."""
    try:
        yield
    except WCTDefenseError as exc:
        if not getattr(exc, "stage", None):
            exc.stage = name
        raise
    except Exception as exc:  # noqa: BLE001 - anything else is a stage failure
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()[:16]


class Pipeline:
    """Lazily loads or produces every artifact a run needs.

    ``produce=False`` turns a missing artifact into an error naming the
    subcommand that makes it, which is how the standalone subcommands behave.
    """

    def __init__(self, cfg: PipelineConfig):
        cfg.check_paths()
        self.cfg = cfg
        self.cache = cfg.cache_path()
        self.cache.mkdir(parents=True, exist_ok=True)
        self.events: list = []  # (stage, artifact file, "hit" | "computed")
        self.timing: dict = {}
        self._train: Optional[Dataset] = None
        self._eval: Optional[Dataset] = None
        self._ckpt: Optional[M.Checkpoint] = None
        self._data_hash: Optional[str] = None

    # ------------------------------------------------------------------ data

    def data_hash(self) -> str:
        if self._data_hash is None:
            with stage("data"):
                files = {split: [_file_digest(p) for p in find_split(self.cfg.data_root, split)] for split in SPLITS}
            self._data_hash = digest({"dataset": self.cfg.dataset, "files": files})
        return self._data_hash

    @property
    def train_set(self) -> Dataset:
        if self._train is None:
            with stage("data"):
                ds = load_split(self.cfg.data_root, "train", self.cfg.dataset)
                self._train = ds.head(self.cfg.train_size) if self.cfg.train_size else ds
        return self._train

    @property
    def eval_set(self) -> Dataset:
        if self._eval is None:
            with stage("data"):
                self._eval = load_split(self.cfg.data_root, "test", self.cfg.dataset).head(self.cfg.eval_size)
        return self._eval

    # ---------------------------------------------------------------- hashes

    def train_hash(self) -> str:
        if self.cfg.checkpoint:
            return digest({"checkpoint": _file_digest(Path(self.cfg.checkpoint))})
        return digest({"data": self.data_hash(), "train_size": self.cfg.train_size,
                       "model": self.cfg.model_config().to_dict(), "hyper": self.cfg.train})

    def attack_hash(self, acfg: A.AttackConfig) -> str:
        return digest({"model": self.train_hash(), "eval_size": self.cfg.eval_size, "attack": acfg.to_dict()})

    def gallery_hash(self, layer: int) -> str:
        d = self.cfg.defense_config()
        return digest({"model": self.train_hash(), "layer": layer, "samples_per_class": d.samples_per_class,
                       "seed": self.cfg.seeds()["gallery"]})

    def _path(self, kind: str, h: str) -> Path:
        return self.cache / f"{kind}-{h}.npz"

    def _note(self, name: str, path: Path, what: str) -> None:
        self.events.append((name, path.name, what))
        log.info("stage %s: %s %s", name, "cache hit" if what == "hit" else "wrote", path)

    # ------------------------------------------------------------- artifacts

    def checkpoint(self, produce: bool = True, needed_by: str = "train") -> M.Checkpoint:
        if self._ckpt is not None:
            return self._ckpt
        if self.cfg.checkpoint:
            with stage("train"):
                self._ckpt = M.load_checkpoint(self.cfg.checkpoint)
            return self._ckpt
        h = self.train_hash()
        path = self._path("checkpoint", h)
        with stage("train"):
            if path.exists():
                self._ckpt = M.load_checkpoint(path, config_hash=h)
                self._note("train", path, "hit")
            elif not produce:
                raise MissingArtifactError(needed_by, "checkpoint", "train")
            else:
                t0 = time.perf_counter()
                ds = self.train_set
                ev = self.eval_set
                self._ckpt = M.train(self.cfg.model_config(), ds.images, ds.labels, self.cfg.train_config(),
                                     val=(ev.images, ev.labels))
                self.timing["train"] = time.perf_counter() - t0
                M.save_checkpoint(self._ckpt, path, config_hash=h)
                self._note("train", path, "computed")
        return self._ckpt

    def adversarial_set(self, acfg: A.AttackConfig, produce: bool = True, needed_by: str = "attack") -> A.AdversarialSet:
        h = self.attack_hash(acfg)
        path = self._path("advset", h)
        model = self.checkpoint(produce=produce, needed_by=needed_by)
        with stage("attack"):
            if path.exists():
                self._note("attack", path, "hit")
                return A.load_adversarial_set(path, config_hash=h)
            if not produce:
                raise MissingArtifactError(needed_by, f"adversarial set {acfg.label}", "attack")
            t0 = time.perf_counter()
            ev = self.eval_set
            adv = A.run_attack(model, ev.images, ev.labels, acfg)
            self.timing[f"attack/{acfg.label}"] = time.perf_counter() - t0
            A.save_adversarial_set(adv, path, config_hash=h, model_digest=model.digest())
            self._note("attack", path, "computed")
            return adv

    def galleries(self, layers, produce: bool = True, needed_by: str = "gallery") -> dict:
        layers = sorted(set(layers))
        model = self.checkpoint(produce=produce, needed_by=needed_by)
        out, missing = {}, []
        with stage("gallery"):
            for layer in layers:
                h = self.gallery_hash(layer)
                path = self._path(f"gallery{layer}", h)
                if path.exists():
                    out[layer] = G.load_gallery(path, config_hash=h)
                    self._note("gallery", path, "hit")
                else:
                    missing.append(layer)
            if missing and not produce:
                raise MissingArtifactError(needed_by, f"gallery at layer {missing[0]}", "gallery")
            if missing:
                t0 = time.perf_counter()
                d = self.cfg.defense_config()
                ds = self.train_set
                built = G.build_galleries(model, ds.images, ds.labels, missing, d.samples_per_class,
                                          self.cfg.seeds()["gallery"])
                self.timing["gallery"] = time.perf_counter() - t0
                for layer, g in built.items():
                    path = self._path(f"gallery{layer}", self.gallery_hash(layer))
                    G.save_gallery(g, path, config_hash=self.gallery_hash(layer))
                    self._note("gallery", path, "computed")
                    out[layer] = g
        return out

    # ---------------------------------------------------------------- stages

    def gallery_layers(self) -> list:
        return sorted({0, self.cfg.defense_config().ref_layer, *self.cfg.model_config().taps})

    def sweep_configs(self) -> list:
        base = self.cfg.sweep_config()
        return [A.with_epsilon(base, float(e)) for e in self.cfg.eps_grid]

    def attack_configs(self) -> list:
        out = list(self.cfg.attack_configs())
        if "epsilon_sweep" in self.cfg.experiments:
            out += [c for c in self.sweep_configs() if c not in out]
        return out

    def run_attacks(self, produce: bool = True) -> list:
        return [self.adversarial_set(c, produce) for c in self.attack_configs()]

    def experiments(self, produce: bool = True, needed_by: str = "report") -> list:
        """Run the selected experiments; returns the reports in canonical order."""
        cfg = self.cfg
        model = self.checkpoint(produce=produce, needed_by=needed_by)
        defense = cfg.defense_config()
        attacks = cfg.attack_configs()
        advs = {c: self.adversarial_set(c, produce, needed_by) for c in attacks}
        primary = advs[attacks[0]] if attacks else None
        gals = self.galleries(self.gallery_layers(), produce, needed_by)
        taps_g = {k: gals[k] for k in model.taps}
        ref_g = gals[defense.ref_layer]
        ev = self.eval_set
        clean = (ev.images, ev.labels)
        seeds = cfg.seeds()
        reports = []
        for name in [e for e in E.EXPERIMENTS if e in cfg.experiments]:
            t0 = time.perf_counter()
            with stage(name):
                if name == "drift_table":
                    r = E.drift_table(model, taps_g, clean, primary, cfg.dataset)
                elif name == "refinement_matrix":
                    r = E.refinement_matrix(model, taps_g, ref_g, primary, cfg.placement_list(), defense, cfg.dataset)
                elif name == "robustness_table":
                    r = E.robustness_table(model, ref_g, clean, list(advs.values()), cfg.placement_list(), defense,
                                           cfg.dataset)
                elif name == "reference_ablation":
                    r = E.reference_ablation(model, primary, taps_g, gals[0], cfg.ablation_sources, defense,
                                             seeds["ablation"], cfg.dataset)
                else:
                    sweep = {c.epsilon: self.adversarial_set(c, produce, needed_by) for c in self.sweep_configs()}
                    r = E.epsilon_sweep(model, ref_g, clean, cfg.sweep_config(), cfg.eps_grid, defense,
                                        cfg.dataset, sweep)
            r.seeds = {**r.seeds, "global": cfg.seed}
            r.metadata["pipeline_config"] = cfg.echo()
            self.timing[name] = time.perf_counter() - t0
            reports.append(r)
        return reports

    def write_reports(self, reports: list, figures: Optional[bool] = None) -> list:
        """CSV and JSON per experiment, a combined CSV, figures, and a timing sidecar."""
        out = Path(self.cfg.out)
        with stage("report"):
            out.mkdir(parents=True, exist_ok=True)
            written = []
            for r in reports:
                written.append(E.write_csv([r], out / f"{r.kind}.csv"))
                written.append(E.write_json(r, out / f"{r.kind}.json"))
            written.append(E.write_csv(reports, out / "report.csv"))
            if self.cfg.figures if figures is None else figures:
                from . import plotting
                written += [plotting.plot_report(r, out / f"{r.kind}.png") for r in reports]
            (out / "timing.json").write_text(json.dumps(self.timing, indent=2, sort_keys=True) + "\n")
        return written


def run_pipeline(cfg: PipelineConfig) -> tuple:
    """Run every stage end to end; returns ``(reports, written paths, pipeline)``."""
    p = Pipeline(cfg)
    p.checkpoint()
    p.run_attacks()
    p.galleries(p.gallery_layers())
    reports = p.experiments()
    return reports, p.write_reports(reports), p

