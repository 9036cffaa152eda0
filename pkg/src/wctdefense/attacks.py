"""Adversarial example generators run against the undefended (vanilla) model.

Every attack takes a batch ``(N, C, H, W)`` of images in [0, 1] and their
labels and only ever sees the vanilla checkpoint, so the defense is never on
the gradient path. L-infinity attacks project every iterate onto the
epsilon-ball and the [0, 1] box.

Iterative attacks accept a ``callback(step, x)`` that is called with each
iterate (step 0 is the starting point), which is how the per-iterate
constraints and the PGD/FGSM and MIM/BIM reductions are checked.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import model as M
from .errors import AttackError, ConfigError, IngestionError

log = logging.getLogger(__name__)

ATTACK_KINDS = ("FGSM", "BIM", "PGD", "MIM", "CW_L2", "SALT_PEPPER")
LINF_KINDS = ("FGSM", "BIM", "PGD", "MIM")
ADVSET_FORMAT = "wctdefense.advset/1"

Callback = Optional[Callable[[int, np.ndarray], None]]


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "FGSM"
    epsilon: float = 0.3
    step_size: Optional[float] = None  # alpha; None means epsilon / 10
    iterations: int = 40
    momentum: float = 1.0
    random_start: bool = True  # PGD only
    cw_constant: float = 1.0
    cw_steps: int = 200
    cw_lr: float = 0.01
    noise_density: float = 0.1
    seed: int = 0

    def __post_init__(self):
        kind = self.kind.upper().replace("-", "_")
        object.__setattr__(self, "kind", kind)
        if kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.iterations < 1 or self.cw_steps < 1:
            raise ConfigError("iterations and cw_steps must be >= 1")
        if not 0.0 <= self.noise_density <= 1.0:
            raise ConfigError("noise_density must lie in [0, 1]")
        if self.momentum < 0:
            raise ConfigError("momentum must be >= 0")
        if kind == "CW_L2" and not self.cw_constant > 0:
            raise ConfigError("cw_constant must be > 0")

    @property
    def alpha(self) -> float:
        return self.epsilon / 10.0 if self.step_size is None else self.step_size

    @property
    def label(self) -> str:
        """Short name used in reports, e.g. ``FGSM_0.3`` or ``CW_L2_c1``."""
        if self.kind == "CW_L2":
            return f"CW_L2_c{self.cw_constant:g}"
        if self.kind == "SALT_PEPPER":
            return f"SALT_PEPPER_{self.noise_density:g}"
        return f"{self.kind}_{self.epsilon:g}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


@dataclass
class AdversarialSet:
    """A frozen batch of adversarial examples with their provenance."""
    ids: np.ndarray          # (N,) indices into the evaluation split
    originals: np.ndarray    # (N, C, H, W) clean images
    images: np.ndarray       # (N, C, H, W) perturbed images
    labels: np.ndarray       # (N,) true labels
    predictions: np.ndarray  # (N,) vanilla-model predictions on ``images``
    config: AttackConfig
    flags: np.ndarray        # (N,) True where the gradient vanished and the image was left as is

    def __len__(self):
        return len(self.ids)

    def linf(self) -> np.ndarray:
        return np.abs(self.images - self.originals).reshape(len(self), -1).max(axis=1, initial=0.0)


# ------------------------------------------------------------------- helpers

def _check_batch(images, labels) -> tuple:
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 4 or len(x) != len(y):
        raise ConfigError(f"attacks need (N, C, H, W) images with N labels, got {x.shape} and {y.shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ConfigError("attack inputs must lie in [0, 1]")
    return x, y


def _grad(model: M.Checkpoint, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example cross-entropy gradient w.r.t. the input."""
    _, g, _ = M.loss_and_input_grad(model, x, y)
    return g


def project(x: np.ndarray, origin: np.ndarray, eps: float) -> np.ndarray:
    """Clip onto the L-infinity ball around ``origin`` intersected with [0, 1]."""
    return np.clip(np.clip(x, origin - eps, origin + eps), 0.0, 1.0)


def _zero_rows(g: np.ndarray) -> np.ndarray:
    return ~np.any(g.reshape(len(g), -1) != 0.0, axis=1)


def _warn_alpha(alpha: float, eps: float) -> None:
    if alpha > eps:
        log.warning("step size %.4g exceeds epsilon %.4g; projection will clip every step", alpha, eps)


# ------------------------------------------------------------------- attacks

def fgsm(model: M.Checkpoint, images, labels, eps: float) -> tuple:
    """One signed-gradient step of size ``eps``, clipped to [0, 1].

    Returns ``(adversarial images, zero-gradient flags)``; flagged images are
    returned unchanged.
    """
    x, y = _check_batch(images, labels)
    g = _grad(model, x, y)
    flags = _zero_rows(g)
    if flags.any():
        log.warning("FGSM: %d image(s) have an all-zero input gradient", int(flags.sum()))
    return np.clip(x + eps * np.sign(g), 0.0, 1.0), flags


def _iterate(model, x, y, eps, alpha, steps, start, momentum: Optional[float], callback: Callback) -> tuple:
    """Shared signed-step loop for BIM, PGD and MIM (``momentum=None`` means no momentum)."""
    _warn_alpha(alpha, eps)
    adv = start
    flags = np.zeros(len(x), dtype=bool)
    acc = np.zeros_like(x)
    if callback is not None:
        callback(0, adv)
    for t in range(1, steps + 1):
        g = _grad(model, adv, y)
        zero = _zero_rows(g)
        flags |= zero
        if momentum is None:
            direction = g
        else:
            l1 = np.abs(g).reshape(len(g), -1).sum(axis=1)
            # a vanished gradient leaves the accumulator to momentum alone
            norm = np.where(zero, 1.0, l1)[:, None, None, None]
            acc = momentum * acc + np.where(zero[:, None, None, None], 0.0, g / norm)
            direction = acc
        adv = project(adv + alpha * np.sign(direction), x, eps)
        if callback is not None:
            callback(t, adv)
    return adv, flags


def bim(model: M.Checkpoint, images, labels, eps: float, alpha: float, steps: int,
        callback: Callback = None) -> tuple:
    """Basic iterative method: ``steps`` projected sign steps of size ``alpha``."""
    x, y = _check_batch(images, labels)
    return _iterate(model, x, y, eps, alpha, steps, x.copy(), None, callback)


def pgd(model: M.Checkpoint, images, labels, eps: float, alpha: float, steps: int,
        random_start: bool = True, seed: int = 0, callback: Callback = None) -> tuple:
    """BIM from a uniform random start in the epsilon-ball (clipped to [0, 1])."""
    x, y = _check_batch(images, labels)
    start = x.copy()
    if random_start:
        rng = np.random.default_rng([seed, 0x9D6])
        start = np.clip(x + rng.uniform(-eps, eps, size=x.shape), 0.0, 1.0)
    return _iterate(model, x, y, eps, alpha, steps, start, None, callback)


def mim(model: M.Checkpoint, images, labels, eps: float, alpha: float, steps: int,
        momentum: float = 1.0, callback: Callback = None) -> tuple:
    """Momentum iterative method: sign steps along an L1-normalized gradient accumulator."""
    x, y = _check_batch(images, labels)
    if momentum < 0:
        raise ConfigError("momentum must be >= 0")
    return _iterate(model, x, y, eps, alpha, steps, x.copy(), momentum, callback)


def _margin_weights(z: np.ndarray, y: np.ndarray) -> tuple:
    """f = Z_y - max_{i != y} Z_i per row, plus d f / d z as weights."""
    rows = np.arange(len(z))
    other = z.copy()
    other[rows, y] = -np.inf
    runner = np.argmax(other, axis=1)
    f = z[rows, y] - z[rows, runner]
    w = np.zeros_like(z)
    w[rows, y] = 1.0
    w[rows, runner] -= 1.0
    return f, w


def cw_l2(model: M.Checkpoint, images, labels, c: float = 1.0, steps: int = 200, lr: float = 0.01,
          kappa: float = 0.0, callback: Callback = None) -> tuple:
    """Carlini-Wagner L2 with a fixed constant, optimized by Adam in tanh space.

    Minimizes ``||x' - x||^2 + c * max(Z_y - max_{i != y} Z_i, -kappa)`` with
    ``x' = (tanh(w) + 1) / 2``. Returns the lowest-distortion iterate that the
    vanilla model misclassifies, or the final iterate if none does.
    """
    x, y = _check_batch(images, labels)
    if not c > 0:
        raise ConfigError("cw constant must be > 0")
    # start exactly at x (up to tanh round-off); shrink slightly so arctanh stays finite
    w = np.arctanh(np.clip(2.0 * x - 1.0, -1.0 + 1e-12, 1.0 - 1e-12))
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    b1, b2, tiny = 0.9, 0.999, 1e-8
    best = np.full(len(x), np.inf)
    best_x = None
    adv = (np.tanh(w) + 1.0) / 2.0
    if callback is not None:
        callback(0, adv)
    for t in range(1, steps + 1):
        box = {}

        def weights(z):
            f, wts = _margin_weights(z, y)
            box["f"] = f
            active = f > -kappa
            return wts * (c * active)[:, None]

        z, gz = M.logit_input_grad(model, adv, weights)
        dist = ((adv - x) ** 2).reshape(len(x), -1).sum(axis=1)
        loss = dist + c * np.maximum(box["f"], -kappa)
        if not np.all(np.isfinite(loss)):
            raise AttackError("CW loss became non-finite", t)
        # record the iterate the logits were computed on
        success = np.argmax(z, axis=1) != y
        better = success & (dist < best)
        if best_x is None:
            best_x = adv.copy()
        best[better] = dist[better]
        best_x[better] = adv[better]
        g = (2.0 * (adv - x) + gz) * (1.0 - np.tanh(w) ** 2) / 2.0
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + tiny)
        adv = (np.tanh(w) + 1.0) / 2.0
        if callback is not None:
            callback(t, adv)
    z = M.logits(model, adv)
    dist = ((adv - x) ** 2).reshape(len(x), -1).sum(axis=1)
    better = (np.argmax(z, axis=1) != y) & (dist < best)
    best[better] = dist[better]
    best_x[better] = adv[better]
    out = np.where(np.isfinite(best)[:, None, None, None], best_x, adv)
    return np.clip(out, 0.0, 1.0), np.zeros(len(x), dtype=bool)


def salt_pepper(images, density: float, seed: int = 0) -> np.ndarray:
    """Set a ``density`` fraction of pixels to 0 or 1 with equal probability."""
    x = np.asarray(images, dtype=np.float64)
    if not 0.0 <= density <= 1.0:
        raise ConfigError("density must lie in [0, 1]")
    rng = np.random.default_rng([seed, 0x5A1])
    hit = rng.random(x.shape) < density
    salt = rng.random(x.shape) < 0.5
    return np.where(hit, salt.astype(np.float64), x)


# --------------------------------------------------------------------- driver

def run_attack(model: M.Checkpoint, images, labels, config: AttackConfig, ids=None,
               batch_size: int = 250, callback: Callback = None) -> AdversarialSet:
    """Apply ``config`` to a whole evaluation set, batch by batch.

    Random draws (PGD starts, salt-and-pepper masks) are made once for the
    whole set, so results do not depend on ``batch_size``.
    """
    x, y = _check_batch(images, labels)
    ids = np.arange(len(x)) if ids is None else np.asarray(ids, dtype=np.int64)
    k = config.kind
    if k == "SALT_PEPPER":
        adv = salt_pepper(x, config.noise_density, config.seed)
        flags = np.zeros(len(x), dtype=bool)
    else:
        start = None
        if k == "PGD" and config.random_start:
            rng = np.random.default_rng([config.seed, 0x9D6])
            start = np.clip(x + rng.uniform(-config.epsilon, config.epsilon, size=x.shape), 0.0, 1.0)
        parts, fl = [], []
        for s in range(0, len(x), batch_size):
            xb, yb = x[s:s + batch_size], y[s:s + batch_size]
            if k == "FGSM":
                a, f = fgsm(model, xb, yb, config.epsilon)
            elif k == "BIM":
                a, f = bim(model, xb, yb, config.epsilon, config.alpha, config.iterations, callback)
            elif k == "PGD":
                sb = xb.copy() if start is None else start[s:s + batch_size]
                a, f = _iterate(model, xb, yb, config.epsilon, config.alpha, config.iterations, sb, None, callback)
            elif k == "MIM":
                a, f = mim(model, xb, yb, config.epsilon, config.alpha, config.iterations, config.momentum, callback)
            else:
                a, f = cw_l2(model, xb, yb, config.cw_constant, config.cw_steps, config.cw_lr, callback=callback)
            parts.append(a)
            fl.append(f)
        adv = np.concatenate(parts) if parts else x.copy()
        flags = np.concatenate(fl) if fl else np.zeros(0, dtype=bool)
    preds = M.predict(model, adv) if len(adv) else np.zeros(0, dtype=np.int64)
    return AdversarialSet(ids, x.copy(), adv, y.copy(), np.asarray(preds, dtype=np.int64), config, flags)


def with_epsilon(config: AttackConfig, eps: float) -> AttackConfig:
    """Copy of ``config`` at a new budget (the default step size follows epsilon)."""
    return replace(config, epsilon=eps)


# ---------------------------------------------------------------- persistence

def save_adversarial_set(adv: AdversarialSet, path, config_hash: str = "", model_digest: str = "") -> Path:
    path = Path(path)
    meta = {"format": ADVSET_FORMAT, "config": adv.config.to_dict(), "config_hash": config_hash,
            "model_digest": model_digest}
    with open(path, "wb") as fh:
        np.savez_compressed(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), ids=adv.ids,
                            originals=adv.originals, images=adv.images, labels=adv.labels,
                            predictions=adv.predictions, flags=adv.flags)
    return path


def load_adversarial_set(path, config_hash: Optional[str] = None) -> AdversarialSet:
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != ADVSET_FORMAT:
            raise IngestionError(f"{path}: unsupported adversarial-set format {meta.get('format')!r}")
        if config_hash is not None and meta["config_hash"] != config_hash:
            raise ConfigError(f"{path}: config hash {meta['config_hash']} does not match {config_hash}")
        return AdversarialSet(z["ids"], z["originals"], z["images"], z["labels"], z["predictions"],
                              AttackConfig.from_dict(meta["config"]), z["flags"])
