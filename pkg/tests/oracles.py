"""Independent reference implementations used as test oracles.

Nothing here imports the package's numerical code: finite differences, loop
convolutions, brute-force scans and textbook statistics are written out
plainly so they can check the vectorized versions.
"""
import numpy as np


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_err(analytic, numeric) -> float:
    """Max abs difference over the larger of the two max magnitudes."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def loop_conv(x, k, b, padding):
    """Direct cross-correlation with zero padding, one output at a time."""
    c, h, w = x.shape
    co, ci, kh, kw = k.shape
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                out[o, i, j] = np.sum(xp[:, i:i + kh, j:j + kw] * k[o]) + b[o]
    return out


def loop_maxpool(x):
    c, h, w = x.shape
    out = np.full((c, (h + 1) // 2, (w + 1) // 2), -np.inf)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                out[ch, i // 2, j // 2] = max(out[ch, i // 2, j // 2], x[ch, i, j])
    return out


def spatial_cov(f):
    """Population channel covariance of a (C, H, W) map, written with explicit sums."""
    c = f.shape[0]
    x = f.reshape(c, -1)
    n = x.shape[1]
    mean = x.sum(axis=1) / n
    cov = np.zeros((c, c))
    for p in range(n):
        d = x[:, p] - mean
        cov += np.outer(d, d)
    return mean, cov / n


def brute_nn(features, ids, query):
    """(position, distance) of the nearest row, ties to the lowest id."""
    best, best_d = None, np.inf
    for pos in range(len(features)):
        d = np.sqrt(np.sum((features[pos] - query) ** 2))
        if d < best_d or (d == best_d and ids[pos] < ids[best]):
            best, best_d = pos, d
    return best, best_d
