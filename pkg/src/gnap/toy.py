"""Desk-scale training demo: tiny trunk, swappable pooling head, margin loss.

The network is pointwise-conv (map_channels -> embed_dim) + ReLU + head, where
the head is one of:

    gnap  norm-aware pooling block (the subject under test)
    gap   plain global average pooling
    fc    flatten + affine layer (the spatial-asymmetry baseline)

Data is synthetic: one Gaussian template per class plus noise, with a random
half of the spatial positions attenuated to mimic low-information viewpoints
(small local norms). Training runs plain SGD on one fixed batch so the whole
loop is bit-deterministic; with lr = 0 the logged loss is exactly constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers
from .layers import GnapState
from .metrics import ScoreSet

# Sub-stream tags under the config seed, so data / init / eval never collide.
_STREAM_TEMPLATES = 0
_STREAM_BATCH = 1
_STREAM_INIT = 2
_STREAM_EVAL = 3

HEADS = ("gnap", "gap", "fc")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass
class ToyConfig:
    head: str = "gnap"
    seed: int = 0
    steps: int = 500
    batch: int = 64
    lr: float = 0.05
    lr_head_multiplier: float = 1.0  # classifier-layer multiplier; 10 in fasterfc mode
    weight_decay: float = 0.0
    margin: float = 0.2
    scale_s: float = 16.0
    classes: int = 8
    embed_dim: int = 8
    map_channels: int = 3
    map_h: int = 4
    map_w: int = 4
    hard_fraction: float = 0.5
    atten_low: float = 0.05
    atten_high: float = 0.3
    noise_std: float = 0.3

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError("margin must lie in [0, pi/2)")
        if self.scale_s <= 0:
            raise ValueError("scale_s must be > 0")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.batch < 2:
            raise ValueError("batch must be >= 2 (per-feature BN needs it)")

    def fasterfc(self) -> "ToyConfig":
        return replace(self, lr_head_multiplier=10.0, weight_decay=5e-4)


@dataclass
class SyntheticSample:
    map: np.ndarray  # (c, h, w)
    class_id: int
    hard_mask: np.ndarray  # (h, w) bool; True = attenuated position


def _rng(config: ToyConfig, *tags) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([config.seed, *tags]))
    )


def class_templates(config: ToyConfig) -> np.ndarray:
    """Fixed per-class mean maps, (classes, c, h, w)."""
    rng = _rng(config, _STREAM_TEMPLATES)
    return rng.standard_normal(
        (config.classes, config.map_channels, config.map_h, config.map_w)
    )


def _make_sample(
    rng: np.random.Generator, config: ToyConfig, templates: np.ndarray, class_id: int
) -> SyntheticSample:
    c, h, w = config.map_channels, config.map_h, config.map_w
    m = templates[class_id] + rng.standard_normal((c, h, w)) * config.noise_std
    n_hard = int(round(h * w * config.hard_fraction))
    hard_flat = rng.permutation(h * w)[:n_hard]
    factors = rng.uniform(config.atten_low, config.atten_high, size=n_hard)
    flat = m.reshape(c, h * w)
    flat[:, hard_flat] *= factors  # whole local feature shrinks at hard positions
    mask = np.zeros(h * w, dtype=bool)
    mask[hard_flat] = True
    return SyntheticSample(
        map=flat.reshape(c, h, w), class_id=int(class_id), hard_mask=mask.reshape(h, w)
    )


def generate_batch(config: ToyConfig, step: int) -> list[SyntheticSample]:
    """Deterministic batch for (config.seed, step)."""
    rng = _rng(config, _STREAM_BATCH, step)
    templates = class_templates(config)
    class_ids = rng.integers(0, config.classes, size=config.batch)
    return [_make_sample(rng, config, templates, cid) for cid in class_ids]


def make_eval_pairs(
    config: ToyConfig, n_pairs: int, tag: int = 0
) -> list[tuple[SyntheticSample, SyntheticSample]]:
    """Held-out verification pairs, alternating genuine / impostor."""
    rng = _rng(config, _STREAM_EVAL, tag)
    templates = class_templates(config)
    pairs = []
    for k in range(n_pairs):
        a = int(rng.integers(0, config.classes))
        if k % 2 == 0:
            b = a
        else:
            b = int((a + 1 + rng.integers(0, config.classes - 1)) % config.classes)
        pairs.append(
            (
                _make_sample(rng, config, templates, a),
                _make_sample(rng, config, templates, b),
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# angular-margin classification loss
# ---------------------------------------------------------------------------


def angular_margin_loss(
    embeddings: np.ndarray,
    class_weights: np.ndarray,
    labels,
    margin: float,
    scale_s: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Additive-angular-margin softmax over cosine logits.

    Embedding rows and class-weight columns are L2-normalized; the true-class
    logit uses cos(theta + margin) = cos t cos m - sin t sin m, everything is
    scaled by scale_s, and the mean cross-entropy is returned together with
    analytic gradients for the embeddings and the class weights.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, d = embeddings.shape
    e_norm = np.linalg.norm(embeddings, axis=1)
    w_norm = np.linalg.norm(class_weights, axis=0)
    if np.any(e_norm == 0.0):
        raise ValueError("zero-norm embedding row")
    if np.any(w_norm == 0.0):
        raise ValueError("zero-norm class-weight column")
    e_hat = embeddings / e_norm[:, None]
    w_hat = class_weights / w_norm[None, :]
    cos = e_hat @ w_hat  # (n, K)

    rows = np.arange(n)
    cos_y = np.clip(cos[rows, labels], -1.0, 1.0)
    sin_y = np.sqrt(np.maximum(1.0 - cos_y**2, 1e-24))
    cos_m, sin_m = math.cos(margin), math.sin(margin)

    logits = scale_s * cos
    logits[rows, labels] = scale_s * (cos_y * cos_m - sin_y * sin_m)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    softmax = exp / exp.sum(axis=1, keepdims=True)
    loss = float(np.mean(np.log(exp.sum(axis=1)) - shifted[rows, labels]))

    d_logits = softmax.copy()
    d_logits[rows, labels] -= 1.0
    d_logits /= n
    d_cos = scale_s * d_logits
    # d/dc of cos(theta + m) with theta = arccos(c); sin_y floor keeps it finite
    d_cos[rows, labels] *= cos_m + sin_m * cos_y / sin_y

    d_e_hat = d_cos @ w_hat.T
    d_emb = (d_e_hat - (d_e_hat * e_hat).sum(axis=1, keepdims=True) * e_hat) / e_norm[:, None]
    d_w_hat = e_hat.T @ d_cos
    d_weights = (d_w_hat - (d_w_hat * w_hat).sum(axis=0, keepdims=True) * w_hat) / w_norm[None, :]
    return loss, d_emb, d_weights


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


@dataclass
class ToyParams:
    head: str
    conv_w: np.ndarray  # (map_channels, embed_dim)
    class_w: np.ndarray  # (embed_dim, classes)
    gnap_state: GnapState | None = None
    fc_w: np.ndarray | None = None
    fc_b: np.ndarray | None = None


@dataclass
class TrainingLog:
    config: ToyConfig
    losses: list[float] = field(default_factory=list)  # losses[k] = after k updates
    params: ToyParams | None = None

    def jsonl_lines(self) -> list[str]:
        return [
            '{"step":%d,"loss":%s}' % (k, repr(v)) for k, v in enumerate(self.losses)
        ]


def init_params(config: ToyConfig) -> ToyParams:
    rng = _rng(config, _STREAM_INIT)
    c, d = config.map_channels, config.embed_dim
    conv_w = rng.standard_normal((c, d)) / math.sqrt(c)
    class_w = rng.standard_normal((d, config.classes)) / math.sqrt(d)
    params = ToyParams(head=config.head, conv_w=conv_w, class_w=class_w)
    if config.head == "gnap":
        params.gnap_state = GnapState.initialize(d, mode="train")
    elif config.head == "fc":
        flat = d * config.map_h * config.map_w
        params.fc_w = rng.standard_normal((flat, d)) / math.sqrt(flat)
        params.fc_b = np.zeros(d)
    return params


def _relu(x):
    return np.maximum(x, 0.0)


def _forward(params: ToyParams, maps: np.ndarray):
    """Trunk + head; returns (embeddings, caches for backward)."""
    conv_out, conv_cache = layers.pointwise_conv_forward(maps, params.conv_w)
    act = _relu(conv_out)
    if params.head == "gnap":
        emb, head_cache = layers.gnap_forward(act, params.gnap_state)
    elif params.head == "gap":
        emb, head_cache = layers.gap_forward(act), act.shape
    else:
        emb, head_cache = layers.fc_head_forward(act, params.fc_w, params.fc_b)
    return emb, (conv_cache, conv_out, head_cache)


def _backward(params: ToyParams, caches, d_emb: np.ndarray):
    conv_cache, conv_out, head_cache = caches
    grads = {}
    if params.head == "gnap":
        bundle = layers.gnap_backward(d_emb, head_cache)
        d_act = bundle.d_input
        grads["beta_in"] = bundle.d_params["beta_in"]
        grads["beta_out"] = bundle.d_params["beta_out"]
    elif params.head == "gap":
        d_act = layers.gap_backward(d_emb, head_cache)
    else:
        bundle = layers.fc_head_backward(d_emb, head_cache)
        d_act = bundle.d_input
        grads["fc_w"] = bundle.d_params["weights"]
        grads["fc_b"] = bundle.d_params["bias"]
    d_conv_out = d_act * (conv_out > 0.0)
    grads["conv_w"] = layers.pointwise_conv_backward(d_conv_out, conv_cache).d_params[
        "weights"
    ]
    return grads


def train(config: ToyConfig) -> TrainingLog:
    """SGD on the fixed step-0 batch; losses[k] is the loss after k updates."""
    params = init_params(config)
    batch = generate_batch(config, 0)
    maps = np.stack([s.map for s in batch])
    labels = np.asarray([s.class_id for s in batch])
    lr, wd = config.lr, config.weight_decay
    log = TrainingLog(config=config)

    for step in range(config.steps + 1):
        emb, caches = _forward(params, maps)
        loss, d_emb, d_class_w = angular_margin_loss(
            emb, params.class_w, labels, config.margin, config.scale_s
        )
        if not math.isfinite(loss):
            raise TrainingDivergedError(step)
        log.losses.append(loss)
        if step == config.steps:
            break

        grads = _backward(params, caches, d_emb)
        params.conv_w -= lr * (grads["conv_w"] + wd * params.conv_w)
        params.class_w -= lr * config.lr_head_multiplier * (
            d_class_w + wd * params.class_w
        )
        if config.head == "gnap":
            params.gnap_state.beta_in -= lr * grads["beta_in"]
            params.gnap_state.beta_out -= lr * grads["beta_out"]
        elif config.head == "fc":
            params.fc_w -= lr * (grads["fc_w"] + wd * params.fc_w)
            params.fc_b -= lr * grads["fc_b"]

    log.params = params
    return log


def embed_maps(params: ToyParams, maps: np.ndarray, mode: str = "inference") -> np.ndarray:
    """Embeddings for a stack of maps; gnap heads run with stored statistics."""
    if params.head == "gnap":
        state = params.gnap_state
        prev = state.mode
        state.mode = mode
        try:
            emb, _ = _forward(params, maps)
        finally:
            state.mode = prev
        return emb
    return _forward(params, maps)[0]


def embed_pairs(params: ToyParams, pair_list) -> ScoreSet:
    """Cosine-score each pair; label 1 iff both samples share a class."""
    a = np.stack([p[0].map for p in pair_list])
    b = np.stack([p[1].map for p in pair_list])
    ea = embed_maps(params, a)
    eb = embed_maps(params, b)
    na = np.linalg.norm(ea, axis=1)
    nb = np.linalg.norm(eb, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("zero-norm embedding in pair scoring")
    scores = (ea * eb).sum(axis=1) / (na * nb)
    labels = np.asarray(
        [1 if p[0].class_id == p[1].class_id else 0 for p in pair_list]
    )
    return ScoreSet(labels, scores)
