"""Whitening-coloring transform over feature-map channels.

A feature map ``(C, H, W)`` is treated as ``H*W`` samples of a C-dimensional
vector. Whitening maps it to zero mean and identity channel covariance in
ZCA form (``Phi diag(lam^-1/2) Phi^T``, so the output stays in channel
coordinates); coloring imposes another map's channel mean and covariance.

Two routes compute the same transform:

* the per-map route (:func:`channel_stats`, :func:`whiten`, :func:`color`)
  eigendecomposes the C x C covariance;
* the batched route (:func:`wct_batch`) works on whichever of the C x C
  covariance or the ``H*W x H*W`` Gram matrix is smaller. Deep taps have
  many channels and few positions, so this is the one used for evaluation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import ContractError, DataError, DimensionError, NumericalError


@dataclass(frozen=True)
class EigenConfig:
    eps_eig: float = 1e-5  # floor applied to eigenvalues inside lam^-1/2 and lam^1/2
    max_sweeps: int = 100
    tol: float = 1e-12  # off-diagonal Frobenius norm, relative to ||M||_F

    def __post_init__(self):
        if not self.eps_eig > 0:
            raise ValueError("eps_eig must be positive")


@dataclass
class ChannelStats:
    mean: np.ndarray         # (C,)
    covariance: np.ndarray   # (C, C)
    eigenvalues: np.ndarray  # (C,), nonincreasing, >= 0
    eigenvectors: np.ndarray  # (C, C), orthonormal columns

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


# ------------------------------------------------------------ eigensolver

def sym_eig(m, cfg: EigenConfig = EigenConfig()) -> tuple:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    ``m`` may be a single ``(n, n)`` matrix or a stack ``(B, n, n)``. Each
    matrix is swept in row-cyclic order until its off-diagonal Frobenius norm
    is at most ``cfg.tol * ||M||_F``. Returns eigenvalues sorted nonincreasing
    and eigenvectors as columns, each column signed so its first nonzero
    component is positive.
    """
    a = np.array(m, dtype=np.float64)
    single = a.ndim == 2
    if single:
        a = a[None]
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise DimensionError(f"sym_eig needs square matrices, got shape {np.shape(m)}")
    if not np.all(np.isfinite(a)):
        raise DataError("sym_eig input has non-finite entries")
    scale = np.abs(a).max(axis=(1, 2), initial=0.0)
    asym = np.abs(a - a.transpose(0, 2, 1)).max(axis=(1, 2), initial=0.0)
    if np.any(asym > 1e-8 * np.maximum(scale, 1.0)):
        raise DimensionError(f"matrix is not symmetric (max asymmetry {asym.max():.3g})")
    a = np.ascontiguousarray(0.5 * (a + a.transpose(0, 2, 1)))
    b, n, _ = a.shape
    v = np.broadcast_to(np.eye(n), (b, n, n)).copy()
    thresh = cfg.tol * np.linalg.norm(a, axis=(1, 2))
    residual = _jacobi(a, v, thresh, cfg.max_sweeps)
    if np.any(residual > thresh):
        worst = float(residual.max())
        raise NumericalError(f"Jacobi did not converge in {cfg.max_sweeps} sweeps "
                             f"(off-diagonal norm {worst:.3g})", residual=worst)
    w = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(-w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    v *= _leading_sign(v)[:, None, :]
    return (w[0], v[0]) if single else (w, v)


@numba.njit(cache=True)
def _off_norm(a):
    n = a.shape[0]
    acc = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                acc += a[i, j] * a[i, j]
    return np.sqrt(acc)


@numba.njit(cache=True)
def _jacobi(a, v, thresh, max_sweeps):
    """In-place cyclic Jacobi on each matrix of the stack; returns final off-norms."""
    b, n, _ = a.shape
    residual = np.empty(b)
    for k in range(b):
        A = a[k]
        V = v[k]
        off = _off_norm(A)
        sweeps = 0
        while off > thresh[k] and sweeps < max_sweeps:
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = A[p, q]
                    if apq == 0.0:
                        continue
                    # t = tan(theta) is the smaller root of t^2 + 2 tau t - 1 = 0
                    tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                    t = 1.0 / (abs(tau) + math.hypot(tau, 1.0))
                    if tau < 0.0:
                        t = -t
                    c = 1.0 / math.sqrt(1.0 + t * t)
                    s = t * c
                    for i in range(n):
                        x, y = A[p, i], A[q, i]
                        A[p, i] = c * x - s * y
                        A[q, i] = s * x + c * y
                    for i in range(n):
                        x, y = A[i, p], A[i, q]
                        A[i, p] = c * x - s * y
                        A[i, q] = s * x + c * y
                    A[p, q] = 0.0
                    A[q, p] = 0.0
                    for i in range(n):
                        x, y = V[i, p], V[i, q]
                        V[i, p] = c * x - s * y
                        V[i, q] = s * x + c * y
            off = _off_norm(A)
            sweeps += 1
        residual[k] = off
    return residual


def _leading_sign(v: np.ndarray) -> np.ndarray:
    """+1/-1 per column making the first component with |x| > 1e-10 positive."""
    big = np.abs(v) > 1e-10
    first = np.argmax(big, axis=1)
    lead = np.take_along_axis(v, first[:, None, :], axis=1)[:, 0, :]
    return np.where(lead < 0, -1.0, 1.0)


# ------------------------------------------------------------- per-map route

def _as_map(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3:
        raise DimensionError(f"feature map must be (C, H, W), got shape {f.shape}")
    if f.shape[0] < 1 or f.shape[1] * f.shape[2] < 1:
        raise DimensionError(f"feature map {f.shape} is empty")
    if not np.all(np.isfinite(f)):
        raise DataError("feature map has non-finite activations")
    return f


def channel_stats(f, cfg: EigenConfig = EigenConfig()) -> ChannelStats:
    """Channel mean and population covariance over spatial positions."""
    f = _as_map(f)
    x = f.reshape(f.shape[0], -1)
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    cov = xc @ xc.T / x.shape[1]
    cov = 0.5 * (cov + cov.T)
    w, v = sym_eig(cov, cfg)
    return ChannelStats(mean, cov, np.maximum(w, 0.0), v)


def whiten(f, cfg: EigenConfig = EigenConfig()) -> tuple:
    """Zero-mean, identity-covariance version of ``f`` plus the stats used.

    Eigenvalues below ``cfg.eps_eig`` are floored before the inverse square
    root, so near-null directions are suppressed instead of amplified.
    """
    f = _as_map(f)
    stats = channel_stats(f, cfg)
    x = f.reshape(f.shape[0], -1) - stats.mean[:, None]
    phi = stats.eigenvectors
    scale = 1.0 / np.sqrt(np.maximum(stats.eigenvalues, cfg.eps_eig))
    white = phi @ (scale[:, None] * (phi.T @ x))
    return white.reshape(f.shape), stats


def color(white, target: ChannelStats, cfg: EigenConfig = EigenConfig()) -> np.ndarray:
    """Impose ``target``'s channel mean and covariance on a whitened map.

    Target eigenvalues are floored at ``cfg.eps_eig`` like in :func:`whiten`,
    so coloring with a map's own stats exactly undoes its whitening.
    """
    white = _as_map(white)
    c = white.shape[0]
    if target.channels != c:
        raise DimensionError(f"white map has {c} channels, target stats have {target.channels}")
    x = white.reshape(c, -1)
    drift = np.abs(x.mean(axis=1)).max()
    if drift > 1e-6:
        raise ContractError(f"coloring needs a centered input (max channel mean {drift:.3g})")
    phi = target.eigenvectors
    root = np.sqrt(np.maximum(target.eigenvalues, cfg.eps_eig))
    out = phi @ (root[:, None] * (phi.T @ x)) + target.mean[:, None]
    return out.reshape(white.shape)


def wct(f, reference, cfg: EigenConfig = EigenConfig()) -> np.ndarray:
    """Whiten ``f`` and color it with the channel statistics of ``reference``."""
    white, _ = whiten(f, cfg)
    return color(white, channel_stats(reference, cfg), cfg)


# -------------------------------------------------------------- batched route

def _psd_apply_inv_sqrt(xc: np.ndarray, cfg: EigenConfig) -> np.ndarray:
    """floor(Sigma)^-1/2 @ xc for each centered (C, N) sample matrix in the batch."""
    b, c, n = xc.shape
    if n >= c:
        w, v = sym_eig(_sym(xc @ xc.transpose(0, 2, 1) / n), cfg)
        f = 1.0 / np.sqrt(np.maximum(w, cfg.eps_eig))
        return v @ (f[:, :, None] * (v.transpose(0, 2, 1) @ xc))
    # f(X X^T / n) X == X f(X^T X / n): work with the smaller Gram matrix
    w, u = sym_eig(_sym(xc.transpose(0, 2, 1) @ xc / n), cfg)
    f = 1.0 / np.sqrt(np.maximum(w, cfg.eps_eig))
    return (xc @ u) @ (f[:, :, None] * u.transpose(0, 2, 1))


def _psd_sqrt_apply(yc: np.ndarray, z: np.ndarray, cfg: EigenConfig) -> np.ndarray:
    """floor(Sigma_y)^1/2 @ z where Sigma_y = yc yc^T / N, batched."""
    b, c, n = yc.shape
    if n >= c:
        w, v = sym_eig(_sym(yc @ yc.transpose(0, 2, 1) / n), cfg)
        r = np.sqrt(np.maximum(w, cfg.eps_eig))
        return v @ (r[:, :, None] * (v.transpose(0, 2, 1) @ z))
    # floor(Sigma)^1/2 = sqrt(eps) I + sum_i (sqrt(l_i) - sqrt(eps)) phi_i phi_i^T over
    # l_i > eps, with phi_i = Y u_i / sqrt(n l_i) from the Gram eigenpairs
    w, u = sym_eig(_sym(yc.transpose(0, 2, 1) @ yc / n), cfg)
    root_eps = np.sqrt(cfg.eps_eig)
    keep = w > cfg.eps_eig
    safe = np.where(keep, w, 1.0)
    coef = np.where(keep, (np.sqrt(safe) - root_eps) / (n * safe), 0.0)
    yu = yc @ u
    return root_eps * z + yu @ (coef[:, :, None] * (yu.transpose(0, 2, 1) @ z))


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.transpose(0, 2, 1))


def wct_batch(feats: np.ndarray, refs: np.ndarray, cfg: EigenConfig = EigenConfig(),
              chunk: int = 256) -> np.ndarray:
    """Row-wise WCT: ``feats[i]`` whitened and colored with ``refs[i]``'s stats.

    Both arrays are ``(B, C, H, W)``. Matches :func:`wct` applied per map.
    """
    feats = np.asarray(feats, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if feats.shape != refs.shape or feats.ndim != 4:
        raise DimensionError(f"wct_batch needs equal (B, C, H, W) shapes, got {feats.shape} and {refs.shape}")
    if not (np.all(np.isfinite(feats)) and np.all(np.isfinite(refs))):
        raise DataError("feature maps have non-finite activations")
    b, c, h, w = feats.shape
    out = np.empty_like(feats)
    for s in range(0, b, chunk):
        x = feats[s:s + chunk].reshape(-1, c, h * w)
        y = refs[s:s + chunk].reshape(-1, c, h * w)
        xc = x - x.mean(axis=2, keepdims=True)
        my = y.mean(axis=2, keepdims=True)
        white = _psd_apply_inv_sqrt(xc, cfg)
        out[s:s + chunk] = (_psd_sqrt_apply(y - my, white, cfg) + my).reshape(-1, c, h, w)
    return out
