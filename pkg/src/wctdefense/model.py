"""Tapped VGG-style classifier built on :mod:`wctdefense.autodiff`.

A tap is a named point right after a ``relu`` or ``maxpool2`` layer. The model
can report the activations at any set of taps and can resume a forward pass
from a (possibly modified) tap activation, which is what the feature-space
defense needs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, IngestionError, TrainingError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "wctdefense.checkpoint/1"
LAYER_KINDS = ("conv", "relu", "maxpool2", "flatten", "linear")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: Optional[int] = None  # out_channels for conv, out_features for linear
    kernel: int = 3
    padding: int = 1
    tap_id: Optional[int] = None


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple
    input_shape: tuple = (1, 28, 28)
    n_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(
            l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        validate_config(self)

    def to_dict(self) -> dict:
        return {"layers": [asdict(l) for l in self.layers], "input_shape": list(self.input_shape),
                "n_classes": self.n_classes, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(layers=tuple(LayerSpec(**l) for l in d["layers"]),
                   input_shape=tuple(d["input_shape"]), n_classes=d["n_classes"], seed=d["seed"])

    @property
    def taps(self) -> list[int]:
        return [l.tap_id for l in self.layers if l.tap_id is not None]

    def tap_layer(self, tap_id: int) -> int:
        for i, l in enumerate(self.layers):
            if l.tap_id == tap_id:
                return i
        raise ConfigError(f"unknown tap_id {tap_id}; model has taps {self.taps}")


def vgg_mini(seed: int = 0, input_shape=(1, 28, 28), n_classes: int = 10) -> ModelConfig:
    """conv32-relu-conv32-relu-pool-[1]-conv64-relu-pool-[2]-conv128-relu-pool-[3]-fc256-relu-fc."""
    L = LayerSpec
    layers = (
        L("conv", 32), L("relu"), L("conv", 32), L("relu"), L("maxpool2", tap_id=1),
        L("conv", 64), L("relu"), L("maxpool2", tap_id=2),
        L("conv", 128), L("relu"), L("maxpool2", tap_id=3),
        L("flatten"), L("linear", 256), L("relu"), L("linear", n_classes),
    )
    return ModelConfig(layers=layers, input_shape=tuple(input_shape), n_classes=n_classes, seed=seed)


def validate_config(cfg: ModelConfig) -> None:
    """Check tap placement and that every layer's shape chains into the next."""
    last_tap = None
    for i, l in enumerate(cfg.layers):
        if l.kind not in LAYER_KINDS:
            raise ConfigError(f"layer {i}: unknown kind {l.kind!r}")
        if l.tap_id is not None:
            if l.kind not in ("relu", "maxpool2"):
                raise ConfigError(f"layer {i}: taps must follow relu or maxpool2, not {l.kind}")
            if last_tap is not None and l.tap_id <= last_tap:
                raise ConfigError(f"layer {i}: tap ids must be unique and increase with depth")
            if l.tap_id < 1:
                raise ConfigError(f"layer {i}: tap id 0 is reserved for image space")
            last_tap = l.tap_id
    if not cfg.layers or cfg.layers[-1].kind != "linear" or cfg.layers[-1].out != cfg.n_classes:
        raise ConfigError(f"last layer must be linear({cfg.n_classes})")
    layer_shapes(cfg)


def layer_shapes(cfg: ModelConfig) -> list[tuple]:
    """Output shape (without batch axis) of every layer."""
    shape = tuple(cfg.input_shape)
    out = []
    for i, l in enumerate(cfg.layers):
        if l.kind == "conv":
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: conv needs a (C, H, W) input, got {shape}")
            c, h, w = shape
            shape = (l.out, h + 2 * l.padding - l.kernel + 1, w + 2 * l.padding - l.kernel + 1)
            if min(shape[1:]) < 1:
                raise ConfigError(f"layer {i}: conv output is empty")
        elif l.kind == "maxpool2":
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: maxpool2 needs a (C, H, W) input")
            c, h, w = shape
            shape = (c, (h + 1) // 2, (w + 1) // 2)
        elif l.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif l.kind == "linear":
            if len(shape) != 1:
                raise ConfigError(f"layer {i}: linear needs a flat input; add a flatten layer")
            shape = (l.out,)
        out.append(shape)
    return out


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.params:
                raise ConfigError(f"checkpoint lacks parameter {name}")
            if tuple(self.params[name].shape) != shape:
                raise ConfigError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    @property
    def taps(self) -> list[int]:
        return self.config.taps

    def tap_shape(self, tap_id: int) -> tuple:
        return layer_shapes(self.config)[self.config.tap_layer(tap_id)]

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()[:16]


def param_shapes(cfg: ModelConfig) -> dict:
    shapes = {}
    prev = tuple(cfg.input_shape)
    for i, (l, out) in enumerate(zip(cfg.layers, layer_shapes(cfg))):
        if l.kind == "conv":
            shapes[f"layer{i}.weight"] = (l.out, prev[0], l.kernel, l.kernel)
            shapes[f"layer{i}.bias"] = (l.out,)
        elif l.kind == "linear":
            shapes[f"layer{i}.weight"] = (prev[0], l.out)
            shapes[f"layer{i}.bias"] = (l.out,)
        prev = out
    return shapes


def init_params(cfg: ModelConfig, scheme: str = "he") -> dict:
    """He-normal weights and zero biases, or all zeros with ``scheme='zeros'``."""
    rng = np.random.default_rng([cfg.seed, 0x1417])
    params = {}
    for name, shape in param_shapes(cfg).items():
        if scheme == "zeros" or name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return params


# ------------------------------------------------------------------- forward

def _apply(cfg: ModelConfig, params: dict, i: int, x: ad.Tensor) -> ad.Tensor:
    l = cfg.layers[i]
    if l.kind == "conv":
        return ad.conv2d(x, params[f"layer{i}.weight"], params[f"layer{i}.bias"], l.padding)
    if l.kind == "relu":
        return ad.relu(x)
    if l.kind == "maxpool2":
        return ad.maxpool2(x)
    if l.kind == "flatten":
        return ad.flatten(x, batched=True)
    return ad.add(ad.matmul(x, params[f"layer{i}.weight"]), params[f"layer{i}.bias"])


def _as_tensors(params: dict, requires_grad: bool = False) -> dict:
    return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _batch(x, expected: tuple, what: str):
    x = x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)
    if x.shape == expected:
        return x[None], True
    if x.ndim == len(expected) + 1 and x.shape[1:] == expected:
        return x, False
    raise DimensionError(f"{what} has shape {x.shape}, expected {expected} or (N, *{expected})")


def run_layers(cfg: ModelConfig, params: dict, x: ad.Tensor, start: int, stop: int,
               collect: Optional[dict] = None) -> ad.Tensor:
    """Apply layers ``start..stop-1`` to a batched tensor.

    ``collect`` maps layer index -> list; the activation after that layer is
    appended (by reference) when the layer runs.
    """
    for i in range(start, stop):
        x = _apply(cfg, params, i, x)
        if collect is not None and i in collect:
            collect[i].append(x)
    return x


def forward_with_taps(model: Checkpoint, image, taps=()) -> tuple:
    """Logits plus detached copies of the activations at ``taps``.

    Accepts one image ``(C, H, W)`` or a batch; outputs follow the input's
    batching.
    """
    cfg = model.config
    idx = {k: cfg.tap_layer(k) for k in taps}
    x, single = _batch(image, cfg.input_shape, "image")
    collect = {i: [] for i in idx.values()}
    logits = run_layers(cfg, _as_tensors(model.params), ad.Tensor(x), 0, len(cfg.layers), collect).data
    feats = {k: collect[i][0].data.copy() for k, i in idx.items()}
    if single:
        return logits[0], {k: v[0] for k, v in feats.items()}
    return logits, feats


def forward_from(model: Checkpoint, k: int, features) -> np.ndarray:
    """Resume the forward pass right after tap ``k`` (``k=0`` is the image)."""
    cfg = model.config
    if k == 0:
        start, shape = 0, cfg.input_shape
    else:
        start = cfg.tap_layer(k) + 1
        shape = model.tap_shape(k)
    x, single = _batch(features, shape, f"features for tap {k}")
    logits = run_layers(cfg, _as_tensors(model.params), ad.Tensor(x), start, len(cfg.layers)).data
    return logits[0] if single else logits


def forward_between(model: Checkpoint, k_from: int, k_to: int, features) -> np.ndarray:
    """Carry activations at tap ``k_from`` (0 = image) forward to tap ``k_to``."""
    cfg = model.config
    start = 0 if k_from == 0 else cfg.tap_layer(k_from) + 1
    stop = cfg.tap_layer(k_to) + 1
    if stop <= start:
        raise ConfigError(f"tap {k_to} is not deeper than tap {k_from}")
    shape = cfg.input_shape if k_from == 0 else model.tap_shape(k_from)
    x, single = _batch(features, shape, f"features for tap {k_from}")
    out = run_layers(cfg, _as_tensors(model.params), ad.Tensor(x), start, stop).data
    return out[0] if single else out


def logits(model: Checkpoint, images, batch_size: int = 500) -> np.ndarray:
    x, single = _batch(images, model.config.input_shape, "images")
    out = np.concatenate([forward_with_taps(model, x[i:i + batch_size])[0]
                          for i in range(0, len(x), batch_size)]) if len(x) else np.zeros((0, model.config.n_classes))
    return out[0] if single else out


def predict(model: Checkpoint, image) -> np.ndarray:
    """Argmax class; ties resolve to the lowest index (numpy argmax semantics)."""
    return np.argmax(logits(model, image), axis=-1)


def accuracy(model: Checkpoint, images, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(predict(model, images).reshape(-1) == labels.reshape(-1)))


def loss_and_input_grad(model: Checkpoint, images: np.ndarray, labels: np.ndarray) -> tuple:
    """Per-batch mean cross-entropy and its gradient w.r.t. the input images.

    Parameters stay out of the gradient path. The returned gradient is scaled
    back to per-example loss gradients (multiplied by batch size).
    """
    x = ad.Tensor(images, requires_grad=True)
    with ad.Tape():
        z = run_layers(model.config, _as_tensors(model.params), x, 0, len(model.config.layers))
        loss = ad.softmax_xent(z, labels)
    ad.backward(loss)
    return loss.item(), x.grad * len(images), z.data


def logit_input_grad(model: Checkpoint, images: np.ndarray, weight_fn) -> tuple:
    """Logits and the gradient of ``sum_i <w_i, z_i>`` w.r.t. the input images.

    ``weight_fn`` maps the batch logits ``z`` to per-row weights ``w``; they
    are treated as constants, which is how margin losses pick their runner-up
    class.
    """
    x = ad.Tensor(images, requires_grad=True)
    with ad.Tape():
        z = run_layers(model.config, _as_tensors(model.params), x, 0, len(model.config.layers))
        objective = ad.sum(ad.mul(z, ad.Tensor(weight_fn(z.data))))
    ad.backward(objective)
    return z.data, x.grad


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    epochs: int = 10
    batch_size: int = 64
    momentum: float = 0.9


def train(config: ModelConfig, images: np.ndarray, labels: np.ndarray, hyper: TrainConfig = TrainConfig(),
          val: Optional[tuple] = None, init: str = "he") -> Checkpoint:
    """Mini-batch SGD with heavy-ball momentum; deterministic given ``config.seed``.

    ``val`` is an optional ``(images, labels)`` pair; its accuracy is stored in
    the checkpoint metadata as ``clean_accuracy``.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ConfigError("training set is empty")
    if not np.all(np.isfinite(images)) or images.min() < 0.0 or images.max() > 1.0:
        raise ConfigError("training images must be normalized to [0, 1]")
    params = init_params(config, init)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng([config.seed, 0x5EED])
    n = len(images)
    t0 = time.time()
    history = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for s in range(0, n, hyper.batch_size):
            idx = order[s:s + hyper.batch_size]
            tparams = _as_tensors(params, requires_grad=True)
            with ad.Tape():
                z = run_layers(config, tparams, ad.Tensor(images[idx]), 0, len(config.layers))
                loss = ad.softmax_xent(z, labels[idx])
            if not np.isfinite(loss.item()):
                raise TrainingError("loss became non-finite", epoch)
            ad.backward(loss)
            for k, p in params.items():
                v = velocity[k]
                v *= hyper.momentum
                v += tparams[k].grad
                p -= hyper.lr * v
            total += loss.item() * len(idx)
            seen += len(idx)
        history.append(total / seen)
        log.info("epoch %d/%d loss %.4f (%.0fs)", epoch + 1, hyper.epochs, history[-1], time.time() - t0)
    ckpt = Checkpoint(config, params, {"epochs": hyper.epochs, "train_hyper": asdict(hyper),
                                       "loss_history": history, "train_size": n,
                                       "train_seconds": time.time() - t0})
    if val is not None:
        ckpt.metadata["clean_accuracy"] = accuracy(ckpt, *val)
    return ckpt


# --------------------------------------------------------------- persistence

def save_checkpoint(ckpt: Checkpoint, path, config_hash: str = "") -> Path:
    """Write an ``.npz`` container: a JSON ``__meta__`` entry plus one array per parameter."""
    path = Path(path)
    meta = {"format": CHECKPOINT_FORMAT, "config": ckpt.config.to_dict(), "metadata": ckpt.metadata,
            "config_hash": config_hash, "digest": ckpt.digest()}
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path, config_hash: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise IngestionError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        if config_hash is not None and meta.get("config_hash") != config_hash:
            raise ConfigError(f"{path}: config hash {meta.get('config_hash')} does not match {config_hash}")
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    ckpt = Checkpoint(ModelConfig.from_dict(meta["config"]), params, meta["metadata"])
    if ckpt.digest() != meta["digest"]:
        raise IngestionError(f"{path}: parameter digest mismatch")
    return ckpt
