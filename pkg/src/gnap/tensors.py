"""Dense rank-4 feature maps and rank-2 matrices on a numpy float64 substrate.

A feature map is a C-contiguous float64 array of shape (n, c, h, w); a matrix
is float64 of shape (rows, cols). Spatial positions are flattened row-major,
p = i * w + j with i indexing rows over h and j columns over w.

Seeded tensors come from numpy's PCG64 stream (via SeedSequence), so the same
(shape, seed, std) triple reproduces bit-identical values everywhere.
"""

from __future__ import annotations

import json

import numpy as np

Shape4 = tuple[int, int, int, int]


def _check_shape(shape) -> Shape4:
    if len(shape) != 4:
        raise ValueError(f"feature map shape must have 4 dims, got {shape!r}")
    n, c, h, w = (int(d) for d in shape)
    for d in (n, c, h, w):
        if d < 1:
            raise ValueError(f"all dims must be >= 1, got {shape!r}")
    if n * c * h * w > 2**40:
        raise ValueError(f"shape {shape!r} overflows the supported size")
    return (n, c, h, w)


def zeros(shape) -> np.ndarray:
    """All-zero feature map of the given (n, c, h, w) shape."""
    return np.zeros(_check_shape(shape), dtype=np.float64)


def randn_seeded(shape, seed: int, std: float = 1.0) -> np.ndarray:
    """Gaussian feature map, deterministic per (shape, seed, std)."""
    if std <= 0:
        raise ValueError(f"std must be > 0, got {std}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    return rng.standard_normal(_check_shape(shape)) * std


def permute_spatial(x: np.ndarray, perm) -> np.ndarray:
    """Move the value at flat spatial position p to position perm[p].

    perm must be a bijection on {0 .. h*w-1}; channel vectors travel intact,
    so per-position quantities (local norms in particular) are only relocated.
    """
    n, c, h, w = x.shape
    perm = np.asarray(perm, dtype=np.intp)
    if perm.shape != (h * w,) or not np.array_equal(np.sort(perm), np.arange(h * w)):
        raise ValueError(f"perm is not a bijection on {h * w} spatial positions")
    flat = x.reshape(n, c, h * w)
    out = np.empty_like(flat)
    out[:, :, perm] = flat
    return out.reshape(n, c, h, w)


def inverse_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.intp)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def scale(x: np.ndarray, alpha: float) -> np.ndarray:
    """Every entry multiplied by alpha."""
    return x * float(alpha)


def save_tensor(path, x: np.ndarray) -> None:
    """Write {"shape": [n,c,h,w], "data": [...row-major...]} as UTF-8 JSON."""
    payload = {"shape": list(x.shape), "data": np.ravel(x, order="C").tolist()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_tensor(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    shape = _check_shape(payload["shape"])
    data = np.asarray(payload["data"], dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise ValueError(
            f"data length {data.size} does not match shape {shape} "
            f"(expected {int(np.prod(shape))})"
        )
    return data.reshape(shape)
