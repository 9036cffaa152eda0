"""WCT refinement of tapped activations, wired into the classifier.

The defended forward pass runs the input up to each placement tap (shallowest
first), replaces the activation by its whitened version colored with the
statistics of a clean reference image's activation at the same tap, and
continues from there. Reference activations come from an unrefined forward
pass of the reference image.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import gallery as G
from . import model as M
from .errors import ConfigError
from .wct import EigenConfig, wct_batch

REFERENCE_SOURCES = ("nn", "correct_class", "ground_truth", "self")


@dataclass(frozen=True)
class DefenseConfig:
    taps: tuple = (3,)           # placement K, applied shallowest first
    ref_layer: int = 0           # j: reference chosen as the nearest neighbor at this tap (0 = pixels)
    eps_eig: float = 1e-5
    samples_per_class: int = 200

    def __post_init__(self):
        taps = tuple(sorted(int(k) for k in self.taps))
        object.__setattr__(self, "taps", taps)
        if not taps:
            raise ConfigError("defense needs at least one tap")
        if len(set(taps)) != len(taps):
            raise ConfigError(f"duplicate defense taps {taps}")
        if self.ref_layer < 0 or self.ref_layer > taps[0]:
            raise ConfigError(f"reference layer j={self.ref_layer} must satisfy 0 <= j <= min(K)={taps[0]}")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        EigenConfig(eps_eig=self.eps_eig)

    @property
    def eigen(self) -> EigenConfig:
        return EigenConfig(eps_eig=self.eps_eig)

    @property
    def placement(self) -> str:
        return "+".join(f"tap{k}" for k in self.taps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["taps"] = list(self.taps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseConfig":
        return cls(**{**d, "taps": tuple(d["taps"])})

    def check_model(self, model: M.Checkpoint) -> None:
        for k in self.taps:
            if k not in model.taps:
                raise ConfigError(f"defense tap {k} is not a tap of the model (taps {model.taps})")
        if self.ref_layer and self.ref_layer not in model.taps:
            raise ConfigError(f"reference layer {self.ref_layer} is not a tap of the model")


def defended_forward(model: M.Checkpoint, images, references, taps: Sequence[int],
                     cfg: EigenConfig = EigenConfig(), measure: Sequence[int] = (),
                     batch_size: int = 250) -> tuple:
    """Logits with WCT applied at ``taps``, plus activations at ``measure`` taps.

    ``references[i]`` supplies the coloring statistics for ``images[i]``.
    Measured activations at a placement tap are the refined ones. With no
    taps this is the plain forward pass.
    """
    x = np.asarray(images, dtype=np.float64)
    r = np.asarray(references, dtype=np.float64)
    if x.shape != r.shape:
        raise ConfigError(f"images {x.shape} and references {r.shape} differ in shape")
    taps = sorted(set(taps))
    measure = sorted(set(measure))
    stops = sorted(set(taps) | set(measure))
    for k in stops:
        model.config.tap_layer(k)
    logits, feats = [], {k: [] for k in measure}
    for s in range(0, len(x), batch_size):
        xb = x[s:s + batch_size]
        ref_feats = M.forward_with_taps(model, r[s:s + batch_size], taps)[1] if taps else {}
        h, at = xb, 0
        for k in stops:
            h = M.forward_between(model, at, k, h)
            if k in ref_feats:
                h = wct_batch(h, ref_feats[k], cfg)
            if k in feats:
                feats[k].append(h.reshape(len(h), -1))
            at = k
        logits.append(M.forward_from(model, at, h))
    out = {k: np.concatenate(v) for k, v in feats.items()}
    if not logits:
        return np.zeros((0, model.config.n_classes)), out
    return np.concatenate(logits), out


def refine(model: M.Checkpoint, image, taps: Sequence[int], reference, cfg: EigenConfig = EigenConfig()) -> np.ndarray:
    """Logits of ``image`` with its activations at ``taps`` refined against ``reference``.

    Accepts one ``(C, H, W)`` image (returning one logit vector) or a batch.
    """
    if not taps:
        raise ConfigError("refine needs at least one tap")
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    r = np.asarray(reference, dtype=np.float64)
    logits, _ = defended_forward(model, x[None] if single else x, r[None] if single else r, taps, cfg)
    return logits[0] if single else logits


def nn_references(model: M.Checkpoint, gallery: G.Gallery, images) -> tuple:
    """Reference images chosen as the nearest gallery entry at the gallery's layer.

    Returns ``(reference images, gallery image ids)``.
    """
    feats = G.layer_features(model, images, gallery.layer)
    idx, ids, _, _ = G.nearest_neighbors(gallery, feats)
    return gallery.images[idx], ids


def class_references(gallery: G.Gallery, labels, seed: int) -> tuple:
    """A seeded random gallery image of each query's true class (oracle mode)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 0xC1A5])
    pick = np.empty(len(labels), dtype=np.int64)
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        pool = np.flatnonzero(gallery.labels == c)
        if pool.size == 0:
            raise ConfigError(f"gallery has no entries of class {c}")
        pick[rows] = rng.choice(pool, size=rows.size)
    return gallery.images[pick], gallery.ids[pick]


def defend(model: M.Checkpoint, images, defense: DefenseConfig, ref_gallery: Optional[G.Gallery],
           references=None, measure: Sequence[int] = ()) -> tuple:
    """Defended logits with references from ``ref_gallery`` (or given explicitly)."""
    defense.check_model(model)
    if references is None:
        if ref_gallery is None:
            raise ConfigError("defense needs a reference gallery or explicit references")
        if ref_gallery.layer != defense.ref_layer:
            raise ConfigError(f"reference gallery is at layer {ref_gallery.layer}, defense wants j={defense.ref_layer}")
        references, _ = nn_references(model, ref_gallery, images)
    return defended_forward(model, images, references, defense.taps, defense.eigen, measure)
