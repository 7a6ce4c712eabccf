"""Norm-aware pooling block and the comparison heads, forward and backward.

The block stacks four spatially symmetric stages:

    BN (per channel, gamma fixed at 1)
      -> norm-aware reweighting (each local feature rescaled to the sample's
         mean local-feature L2 norm)
      -> global average pooling
      -> BN (per feature, gamma fixed at 1)

Every forward returns a cache; backwards are hand-derived Jacobian-transpose
products over those caches and are certified against central finite
differences by the gradcheck module.

Conventions: float64 throughout; per-sample statistics for the reweighting
(never across the batch); running statistics updated in train mode as
``running <- momentum * running + (1 - momentum) * batch``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_EPS_BN = 1e-5
DEFAULT_EPS_NORM = 1e-12
DEFAULT_MOMENTUM = 0.9

#: BN scale parameter, frozen by construction; never part of any gradient set.
GAMMA_FIXED = 1.0


@dataclass
class GradBundle:
    """Input gradient plus gradients for each learnable parameter."""

    d_input: np.ndarray
    d_params: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class NormCache:
    """Saved forward state of the reweighting layer."""

    saved_input: np.ndarray  # (n, c, h, w)
    local_norms: np.ndarray  # (n, h, w)
    mean_norm: np.ndarray  # (n,)
    eps_norm: float


@dataclass
class BnCache:
    x_centered: np.ndarray
    inv_std: np.ndarray
    count: int
    axis: str  # "channel" | "feature"
    mode: str  # "train" | "inference"


@dataclass
class GnapCaches:
    bn_in: BnCache
    reweight: NormCache
    map_shape: tuple[int, int, int, int]
    bn_out: BnCache


@dataclass
class GnapState:
    """Parameters and running statistics of one norm-aware pooling block.

    gamma is the constant 1 in both BN stages; only the shifts are learnable.
    """

    c: int
    beta_in: np.ndarray
    beta_out: np.ndarray
    eps_bn: float = DEFAULT_EPS_BN
    eps_norm: float = DEFAULT_EPS_NORM
    momentum: float = DEFAULT_MOMENTUM
    running_mean_in: np.ndarray = None
    running_var_in: np.ndarray = None
    running_mean_out: np.ndarray = None
    running_var_out: np.ndarray = None
    mode: str = "train"

    @property
    def gamma_fixed(self) -> float:
        return GAMMA_FIXED

    def __post_init__(self):
        if self.eps_bn <= 0 or self.eps_norm <= 0:
            raise ValueError("eps_bn and eps_norm must be > 0")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.mode not in ("train", "inference"):
            raise ValueError(f"mode must be 'train' or 'inference', got {self.mode!r}")
        for name in ("beta_in", "beta_out"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (self.c,):
                raise ValueError(f"{name} must have shape ({self.c},), got {v.shape}")
            setattr(self, name, v)
        defaults = {
            "running_mean_in": 0.0,
            "running_var_in": 1.0,
            "running_mean_out": 0.0,
            "running_var_out": 1.0,
        }
        for name, fill in defaults.items():
            v = getattr(self, name)
            v = np.full(self.c, fill) if v is None else np.asarray(v, dtype=np.float64)
            if v.shape != (self.c,):
                raise ValueError(f"{name} must have shape ({self.c},), got {v.shape}")
            setattr(self, name, v)
        if np.any(self.running_var_in < 0) or np.any(self.running_var_out < 0):
            raise ValueError("running variances must be >= 0")

    @classmethod
    def initialize(cls, c: int, **kwargs) -> "GnapState":
        return cls(c=c, beta_in=np.zeros(c), beta_out=np.zeros(c), **kwargs)

    def to_json_dict(self) -> dict:
        return {
            "c": self.c,
            "beta_in": self.beta_in.tolist(),
            "beta_out": self.beta_out.tolist(),
            "eps_bn": self.eps_bn,
            "eps_norm": self.eps_norm,
            "momentum": self.momentum,
            "running_mean_in": self.running_mean_in.tolist(),
            "running_var_in": self.running_var_in.tolist(),
            "running_mean_out": self.running_mean_out.tolist(),
            "running_var_out": self.running_var_out.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict, mode: str = "inference") -> "GnapState":
        return cls(
            c=int(d["c"]),
            beta_in=np.asarray(d["beta_in"], dtype=np.float64),
            beta_out=np.asarray(d["beta_out"], dtype=np.float64),
            eps_bn=float(d["eps_bn"]),
            eps_norm=float(d["eps_norm"]),
            momentum=float(d["momentum"]),
            running_mean_in=np.asarray(d["running_mean_in"], dtype=np.float64),
            running_var_in=np.asarray(d["running_var_in"], dtype=np.float64),
            running_mean_out=np.asarray(d["running_mean_out"], dtype=np.float64),
            running_var_out=np.asarray(d["running_var_out"], dtype=np.float64),
            mode=mode,
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path, mode: str = "inference") -> "GnapState":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh), mode=mode)


# ---------------------------------------------------------------------------
# norm-aware reweighting
# ---------------------------------------------------------------------------


def local_norms(x: np.ndarray) -> np.ndarray:
    """Per-position L2 norm over channels: out[n, i, j] = ||x[n, :, i, j]||."""
    return np.sqrt(np.einsum("nchw,nchw->nhw", x, x))


def mean_norm(norms: np.ndarray) -> np.ndarray:
    """Per-sample arithmetic mean of the local norms."""
    return norms.mean(axis=(1, 2))


def reweight(x: np.ndarray, eps_norm: float = DEFAULT_EPS_NORM) -> tuple[np.ndarray, NormCache]:
    """Rescale each local feature to the sample's mean local norm.

    out[n, :, i, j] = mean_norm[n] / (||x[n, :, i, j]|| + eps_norm) * x[n, :, i, j]

    The ratio is degree-0 homogeneous in x, so positive rescaling of the whole
    map commutes with this layer (up to the eps_norm perturbation).
    """
    norms = local_norms(x)
    means = mean_norm(norms)
    ratio = means[:, None, None] / (norms + eps_norm)
    out = x * ratio[:, None, :, :]
    return out, NormCache(saved_input=x, local_norms=norms, mean_norm=means, eps_norm=eps_norm)


def reweight_backward(d_out: np.ndarray, cache: NormCache) -> GradBundle:
    """Exact Jacobian-transpose product of the reweighting layer.

    Both the local norm at each position and the sample mean norm are treated
    as functions of the input. With r_p = m / (n_p + eps), s_p = <g_p, x_p>,
    P the number of positions and u = x / n (0 where n = 0):

        dx = g * r + u * (sum_q s_q / (n_q + eps) / P  -  s * m / (n + eps)^2)
    """
    x = cache.saved_input
    if d_out.shape != x.shape:
        raise ValueError(f"d_out shape {d_out.shape} does not match cached input {x.shape}")
    norms, means, eps = cache.local_norms, cache.mean_norm, cache.eps_norm
    n_eps = norms + eps
    p_count = x.shape[2] * x.shape[3]

    ratio = means[:, None, None] / n_eps
    s = np.einsum("nchw,nchw->nhw", d_out, x)
    mean_term = (s / n_eps).sum(axis=(1, 2)) / p_count  # d(mean)/dn path, per sample
    coef = mean_term[:, None, None] - s * means[:, None, None] / n_eps**2
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = np.where(norms[:, None, :, :] > 0.0, x / safe[:, None, :, :], 0.0)
    dx = d_out * ratio[:, None, :, :] + unit * coef[:, None, :, :]
    return GradBundle(d_input=dx)


# ---------------------------------------------------------------------------
# batch normalization with fixed gamma
# ---------------------------------------------------------------------------

_BN_AXES = {"channel": (0, 2, 3), "feature": (0,)}


def _bn_slots(state: GnapState, axis: str):
    if axis == "channel":
        return state.beta_in, "running_mean_in", "running_var_in"
    if axis == "feature":
        return state.beta_out, "running_mean_out", "running_var_out"
    raise ValueError(f"unknown BN axis {axis!r}")


def bn_fixed_gamma_forward(
    x: np.ndarray, state: GnapState, axis: str
) -> tuple[np.ndarray, BnCache]:
    """Standardize and shift; the scale is the constant 1.

    axis="channel" expects (n, c, h, w) and reduces over (n, h, w);
    axis="feature" expects (n, c) and reduces over n. Train mode uses batch
    statistics and updates the matching running slots; inference mode uses the
    stored running statistics.
    """
    beta, mean_slot, var_slot = _bn_slots(state, axis)
    reduce_axes = _BN_AXES[axis]
    expect_ndim = 4 if axis == "channel" else 2
    if x.ndim != expect_ndim or x.shape[1] != state.c:
        raise ValueError(f"BN axis {axis!r} expects {expect_ndim}-d input with c={state.c}")
    bshape = (1, state.c, 1, 1) if axis == "channel" else (1, state.c)
    count = x.size // state.c

    if state.mode == "train":
        if count < 2:
            raise ValueError(
                f"train-mode BN over axis {axis!r} needs >= 2 values per group, got {count}"
            )
        mu = x.mean(axis=reduce_axes)
        var = x.var(axis=reduce_axes)
        getattr(state, mean_slot)[:] = state.momentum * getattr(state, mean_slot) + (
            1.0 - state.momentum
        ) * mu
        getattr(state, var_slot)[:] = state.momentum * getattr(state, var_slot) + (
            1.0 - state.momentum
        ) * var
    else:
        mu = getattr(state, mean_slot)
        var = getattr(state, var_slot)

    inv_std = 1.0 / np.sqrt(var + state.eps_bn)
    x_centered = x - mu.reshape(bshape)
    out = x_centered * inv_std.reshape(bshape) + beta.reshape(bshape)
    return out, BnCache(
        x_centered=x_centered, inv_std=inv_std, count=count, axis=axis, mode=state.mode
    )


def bn_fixed_gamma_backward(d_out: np.ndarray, cache: BnCache) -> GradBundle:
    """Standard BN input/shift gradients; no scale gradient exists here."""
    if cache.mode != "train":
        raise ValueError("BN backward requires a train-mode cache")
    if d_out.shape != cache.x_centered.shape:
        raise ValueError(
            f"d_out shape {d_out.shape} does not match cache {cache.x_centered.shape}"
        )
    reduce_axes = _BN_AXES[cache.axis]
    bshape = (1, -1, 1, 1) if cache.axis == "channel" else (1, -1)
    m = cache.count
    xc = cache.x_centered
    inv = cache.inv_std.reshape(bshape)

    d_beta = d_out.sum(axis=reduce_axes)
    d_var = (d_out * xc).sum(axis=reduce_axes) * (-0.5) * cache.inv_std**3
    d_mu = -(d_out.sum(axis=reduce_axes)) * cache.inv_std + d_var * (-2.0 / m) * xc.sum(
        axis=reduce_axes
    )
    dx = d_out * inv + d_var.reshape(bshape) * 2.0 * xc / m + d_mu.reshape(bshape) / m
    return GradBundle(d_input=dx, d_params={"beta": d_beta})


# ---------------------------------------------------------------------------
# global average pooling
# ---------------------------------------------------------------------------


def gap_forward(x: np.ndarray) -> np.ndarray:
    """Per-channel mean over all spatial positions, (n, c, h, w) -> (n, c)."""
    return x.mean(axis=(2, 3))


def gap_backward(d_out: np.ndarray, input_shape) -> np.ndarray:
    n, c, h, w = input_shape
    if d_out.shape != (n, c):
        raise ValueError(f"d_out shape {d_out.shape} does not match ({n}, {c})")
    return np.broadcast_to(d_out[:, :, None, None] / (h * w), (n, c, h, w)).copy()


# ---------------------------------------------------------------------------
# the full block
# ---------------------------------------------------------------------------


def gnap_forward(x: np.ndarray, state: GnapState) -> tuple[np.ndarray, GnapCaches]:
    """BN(channel) -> reweight -> GAP -> BN(feature); returns (n, c) embedding."""
    y, bn_in = bn_fixed_gamma_forward(x, state, "channel")
    z, ncache = reweight(y, state.eps_norm)
    pooled = gap_forward(z)
    emb, bn_out = bn_fixed_gamma_forward(pooled, state, "feature")
    return emb, GnapCaches(bn_in=bn_in, reweight=ncache, map_shape=z.shape, bn_out=bn_out)


def gnap_backward(d_embedding: np.ndarray, caches: GnapCaches) -> GradBundle:
    """Chain rule through the four stages, in reverse."""
    out_stage = bn_fixed_gamma_backward(d_embedding, caches.bn_out)
    d_pooled = gap_backward(out_stage.d_input, caches.map_shape)
    rw_stage = reweight_backward(d_pooled, caches.reweight)
    in_stage = bn_fixed_gamma_backward(rw_stage.d_input, caches.bn_in)
    return GradBundle(
        d_input=in_stage.d_input,
        d_params={
            "beta_in": in_stage.d_params["beta"],
            "beta_out": out_stage.d_params["beta"],
        },
    )


try:
    from ._kernels import gnap_infer_kernel as _infer_kernel
except ImportError:  # numba unavailable: the numpy path below serves instead
    _infer_kernel = None


def gnap_forward_fused(x: np.ndarray, state: GnapState, threads: int = 1) -> np.ndarray:
    """Inference-only fast path; same math as gnap_forward, fewer passes.

    Folds the entry BN into per-channel (a, b) coefficients and never
    materializes the normalized map:

        ||y_p||^2   = sum_c a^2 x^2 + sum_c 2ab x + sum_c b^2
        pooled_c    = a_c * (sum_p r_p x_cp) / P + b_c * mean_p(r_p)

    Workers split the batch dimension only and every per-sample reduction
    keeps a fixed order, so the result is independent of ``threads``.
    """
    if state.mode != "inference":
        raise ValueError("fused forward is inference-only; use gnap_forward to train")
    if threads < 1:
        raise ValueError("threads must be >= 1")
    n, c, h, w = x.shape
    if c != state.c:
        raise ValueError(f"expected c={state.c}, got {c}")

    inv_in = 1.0 / np.sqrt(state.running_var_in + state.eps_bn)
    a = inv_in
    b = state.beta_in - state.running_mean_in * inv_in
    inv_out = 1.0 / np.sqrt(state.running_var_out + state.eps_bn)
    a_out = inv_out
    b_out = state.beta_out - state.running_mean_out * inv_out
    p = h * w

    if _infer_kernel is not None:

        def chunk(lo: int, hi: int) -> np.ndarray:
            xs = np.ascontiguousarray(x[lo:hi]).reshape(hi - lo, c, p)
            res = np.empty((hi - lo, c))
            _infer_kernel(xs, a, b, state.eps_norm, a_out, b_out, res)
            return res

    else:
        aa = a * a
        ab2 = 2.0 * a * b
        bb = float(np.dot(b, b))

        def chunk(lo: int, hi: int) -> np.ndarray:
            xs = x[lo:hi].reshape(hi - lo, c, p)
            normsq = np.matmul(aa, np.square(xs))  # contracts the channel axis
            normsq += np.matmul(ab2, xs)
            normsq += bb
            norms = np.sqrt(normsq)
            ratio = norms.mean(axis=1)[:, None] / (norms + state.eps_norm)
            pooled = np.matmul(xs, ratio[:, :, None])[:, :, 0]
            pooled = a * (pooled / p) + b * ratio.mean(axis=1)[:, None]
            return a_out * pooled + b_out

    if threads == 1 or n == 1:
        return chunk(0, n)
    from concurrent.futures import ThreadPoolExecutor

    bounds = np.linspace(0, n, min(threads, n) + 1).astype(int)
    out = np.empty((n, c))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [
            (lo, pool.submit(chunk, lo, hi))
            for lo, hi in zip(bounds[:-1], bounds[1:])
            if hi > lo
        ]
        for lo, fut in futures:
            res = fut.result()
            out[lo : lo + res.shape[0]] = res
    return out


# ---------------------------------------------------------------------------
# comparison heads
# ---------------------------------------------------------------------------


@dataclass
class FcCache:
    x_flat: np.ndarray
    weights: np.ndarray
    input_shape: tuple[int, int, int, int]


def fc_head_forward(
    x: np.ndarray, weights: np.ndarray, bias: np.ndarray
) -> tuple[np.ndarray, FcCache]:
    """Flatten the map and apply an affine layer: out = flat(x) @ W + b."""
    n, c, h, w = x.shape
    if weights.shape[0] != c * h * w:
        raise ValueError(f"weights need {c * h * w} rows, got {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise ValueError(f"bias must have shape ({weights.shape[1]},), got {bias.shape}")
    flat = x.reshape(n, c * h * w)
    out = flat @ weights + bias
    return out, FcCache(x_flat=flat, weights=weights, input_shape=x.shape)


def fc_head_backward(d_out: np.ndarray, cache: FcCache) -> GradBundle:
    if d_out.shape != (cache.x_flat.shape[0], cache.weights.shape[1]):
        raise ValueError(f"d_out shape {d_out.shape} does not match the forward call")
    d_flat = d_out @ cache.weights.T
    return GradBundle(
        d_input=d_flat.reshape(cache.input_shape),
        d_params={"weights": cache.x_flat.T @ d_out, "bias": d_out.sum(axis=0)},
    )


@dataclass
class PwCache:
    saved_input: np.ndarray
    weights: np.ndarray


def pointwise_conv_forward(
    x: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, PwCache]:
    """1x1 convolution: channel mixing applied independently at each position."""
    if weights.shape[0] != x.shape[1]:
        raise ValueError(f"weights need {x.shape[1]} rows, got {weights.shape[0]}")
    out = np.einsum("nchw,cd->ndhw", x, weights)
    return out, PwCache(saved_input=x, weights=weights)


def pointwise_conv_backward(d_out: np.ndarray, cache: PwCache) -> GradBundle:
    n, c, h, w = cache.saved_input.shape
    if d_out.shape != (n, cache.weights.shape[1], h, w):
        raise ValueError(f"d_out shape {d_out.shape} does not match the forward call")
    d_input = np.einsum("ndhw,cd->nchw", d_out, cache.weights)
    d_weights = np.einsum("nchw,ndhw->cd", cache.saved_input, d_out)
    return GradBundle(d_input=d_input, d_params={"weights": d_weights})
