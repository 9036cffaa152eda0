"""Per-class reference store and exhaustive L2 nearest-neighbor search."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import model as M
from .errors import ConfigError, DimensionError, IngestionError, StageError

GALLERY_FORMAT = "wctdefense.gallery/1"


@dataclass
class Gallery:
    layer: int               # tap id, 0 for image space
    ids: np.ndarray          # (n,) training-set indices, ascending
    labels: np.ndarray       # (n,)
    features: np.ndarray     # (n, d) flattened phi_layer of each entry
    images: np.ndarray       # (n, C, H, W) raw entry images, for re-fetching references
    samples_per_class: int
    seed: int

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def sample_ids(labels: np.ndarray, samples_per_class: int, seed: int,
               n_classes: Optional[int] = None) -> np.ndarray:
    """Seeded per-class sample of training indices (all of a class if it is small)."""
    labels = np.asarray(labels)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    rng = np.random.default_rng([seed, 0x6A11])
    picked = []
    for c in range(n_classes):
        pool = np.flatnonzero(labels == c)
        if pool.size == 0:
            raise StageError("gallery", f"class {c} has no training samples")
        take = min(samples_per_class, pool.size)
        picked.append(rng.choice(pool, size=take, replace=False))
    return np.sort(np.concatenate(picked))


def layer_features(model: M.Checkpoint, images: np.ndarray, layer: int, batch_size: int = 500) -> np.ndarray:
    """Flattened phi_layer for a batch of images (raw pixels when ``layer == 0``)."""
    images = np.asarray(images, dtype=np.float64)
    if layer == 0:
        return images.reshape(len(images), -1).copy()
    out = [M.forward_with_taps(model, images[s:s + batch_size], (layer,))[1][layer]
           for s in range(0, len(images), batch_size)]
    return np.concatenate(out).reshape(len(images), -1) if out else np.zeros((0, 0))


def build_gallery(model: M.Checkpoint, images: np.ndarray, labels: np.ndarray, layer: int,
                  samples_per_class: int = 200, seed: int = 0) -> Gallery:
    """Gallery over a seeded per-class sample of the training split.

    Galleries built with the same seed and training set share entry ids at
    every layer.
    """
    if layer != 0 and layer not in model.taps:
        raise ConfigError(f"gallery layer {layer} is not a tap of the model (taps {model.taps})")
    ids = sample_ids(labels, samples_per_class, seed, model.config.n_classes)
    imgs = np.asarray(images[ids], dtype=np.float64)
    return Gallery(layer, ids, np.asarray(labels)[ids].astype(np.int64), layer_features(model, imgs, layer),
                   imgs, samples_per_class, seed)


def build_galleries(model: M.Checkpoint, images: np.ndarray, labels: np.ndarray, layers,
                    samples_per_class: int = 200, seed: int = 0, batch_size: int = 500) -> dict:
    """Galleries at several layers sharing one sample and one forward pass."""
    layers = sorted(set(layers))
    for layer in layers:
        if layer != 0 and layer not in model.taps:
            raise ConfigError(f"gallery layer {layer} is not a tap of the model (taps {model.taps})")
    ids = sample_ids(labels, samples_per_class, seed, model.config.n_classes)
    imgs = np.asarray(images[ids], dtype=np.float64)
    labs = np.asarray(labels)[ids].astype(np.int64)
    taps = [k for k in layers if k != 0]
    feats = {k: [] for k in taps}
    for s in range(0, len(imgs), batch_size):
        for k, f in M.forward_with_taps(model, imgs[s:s + batch_size], taps)[1].items():
            feats[k].append(f.reshape(len(f), -1))
    out = {}
    for layer in layers:
        f = imgs.reshape(len(imgs), -1).copy() if layer == 0 else np.concatenate(feats[layer])
        out[layer] = Gallery(layer, ids, labs, f, imgs, samples_per_class, seed)
    return out


def _sq_dists(g: Gallery, queries: np.ndarray) -> np.ndarray:
    gn = np.einsum("ij,ij->i", g.features, g.features)
    qn = np.einsum("ij,ij->i", queries, queries)
    return np.maximum(qn[:, None] - 2.0 * queries @ g.features.T + gn[None, :], 0.0)


def nearest_neighbors(g: Gallery, queries, chunk: int = 500) -> tuple:
    """Batched nearest neighbor: (entry index, image id, label, distance) arrays.

    Candidates are screened with the expanded-norm form, then distances within
    a rounding margin of the best are recomputed exactly; ties go to the
    lowest image id.
    """
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q[None]
    q = q.reshape(len(q), -1)
    if q.shape[1] != g.dim:
        raise DimensionError(f"query length {q.shape[1]} does not match gallery dimension {g.dim}")
    if len(g) == 0:
        raise ConfigError("gallery is empty")
    idx = np.empty(len(q), dtype=np.int64)
    dist = np.empty(len(q))
    gscale = np.einsum("ij,ij->i", g.features, g.features).max()
    for s in range(0, len(q), chunk):
        qs = q[s:s + chunk]
        d2 = _sq_dists(g, qs)
        margin = 1e-9 * (np.einsum("ij,ij->i", qs, qs) + gscale) + 1e-300
        best = d2.min(axis=1)
        for r in range(len(qs)):
            cand = np.flatnonzero(d2[r] <= best[r] + 4 * margin[r])
            exact = np.sqrt(((g.features[cand] - qs[r]) ** 2).sum(axis=1))
            m = exact.min()
            tied = cand[exact == m]
            pick = tied[np.argmin(g.ids[tied])]
            idx[s + r], dist[s + r] = pick, m
    return idx, g.ids[idx], g.labels[idx], dist


def nearest_neighbor(g: Gallery, query) -> tuple:
    """(image id, label, distance) of the closest gallery entry to one query."""
    _, ids, labels, dist = nearest_neighbors(g, np.asarray(query).reshape(1, -1))
    return int(ids[0]), int(labels[0]), float(dist[0])


def nn_accuracy_from_features(g: Gallery, feats: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    _, _, got, _ = nearest_neighbors(g, np.asarray(feats).reshape(len(labels), -1))
    return float(np.mean(got == labels))


def nn_accuracy(model: M.Checkpoint, g: Gallery, images, labels, layer: Optional[int] = None) -> float:
    """Fraction of images whose nearest gallery entry at ``g.layer`` has their label."""
    layer = g.layer if layer is None else layer
    if layer != g.layer:
        raise ConfigError(f"gallery was built at layer {g.layer}, not {layer}")
    return nn_accuracy_from_features(g, layer_features(model, images, layer), labels)


# --------------------------------------------------------------- persistence

def save_gallery(g: Gallery, path, config_hash: str = "") -> Path:
    path = Path(path)
    meta = {"format": GALLERY_FORMAT, "layer": g.layer, "samples_per_class": g.samples_per_class,
            "seed": g.seed, "config_hash": config_hash}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), ids=g.ids,
                 labels=g.labels, features=g.features, images=g.images)
    return path


def load_gallery(path, config_hash: Optional[str] = None) -> Gallery:
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != GALLERY_FORMAT:
            raise IngestionError(f"{path}: unsupported gallery format {meta.get('format')!r}")
        if config_hash is not None and meta["config_hash"] != config_hash:
            raise ConfigError(f"{path}: config hash {meta['config_hash']} does not match {config_hash}")
        return Gallery(meta["layer"], z["ids"], z["labels"], z["features"], z["images"],
                       meta["samples_per_class"], meta["seed"])
