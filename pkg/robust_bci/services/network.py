"""The compact convolutional classifier: initialisation, forward pass and loss"""
import logging
from typing import Dict, Literal, Optional, Tuple

import numpy as np

from robust_bci.config import settings
from robust_bci.errors import DimensionError, ValidationError
from robust_bci.models.network import BN_LAYERS, BatchNormStats, ModelConfig, ModelParams
from robust_bci.numerics import ops
from robust_bci.numerics.tensor import GradTape, Tensor

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]

# Weights drawn uniformly within the fan-in bound; fan-in per tensor
_FAN_IN = {
    "temporal.weight": lambda cfg: cfg.temporal_kernel_len,
    "spatial.weight": lambda cfg: cfg.c,
    "separable.depthwise": lambda cfg: cfg.separable_kernel_len,
    "separable.pointwise": lambda cfg: cfg.f2,
    "dense.weight": lambda cfg: cfg.n_features,
}


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    return {
        "temporal.weight": (cfg.f1, cfg.temporal_kernel_len),
        "bn1.gamma": (cfg.f1,),
        "bn1.beta": (cfg.f1,),
        "spatial.weight": (cfg.f1, cfg.d, cfg.c),
        "bn2.gamma": (cfg.f2,),
        "bn2.beta": (cfg.f2,),
        "separable.depthwise": (cfg.f2, cfg.separable_kernel_len),
        "separable.pointwise": (cfg.f2, cfg.f2),
        "bn3.gamma": (cfg.f2,),
        "bn3.beta": (cfg.f2,),
        "dense.weight": (cfg.K, cfg.n_features),
        "dense.bias": (cfg.K,),
    }


def fan_in_bound(cfg: ModelConfig, name: str) -> float:
    return float(np.sqrt(6.0 / _FAN_IN[name](cfg)))


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases, identity batch-norm."""
    rng = np.random.default_rng(seed)
    weights: Dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if name in _FAN_IN:
            bound = fan_in_bound(cfg, name)
            value = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        weights[name] = Tensor.wrap(value.astype(np.float32))
    bn_stats = {
        layer: BatchNormStats(
            running_mean=np.zeros(weights[f"{layer}.gamma"].shape, dtype=np.float32),
            running_var=np.ones(weights[f"{layer}.gamma"].shape, dtype=np.float32),
            momentum=cfg.bn_momentum,
        )
        for layer in BN_LAYERS
    }
    return ModelParams(weights=weights, bn_stats=bn_stats)


def check_compatible(params: ModelParams, cfg: ModelConfig) -> None:
    for name, shape in param_shapes(cfg).items():
        if name not in params.weights:
            raise ValidationError(f"Parameters are missing '{name}'")
        if params.weights[name].shape != shape:
            raise ValidationError(f"Parameter '{name}' has shape {params.weights[name].shape}, config needs {shape}")


def effective_bn_mode(params: ModelParams, cfg: ModelConfig) -> str:
    return params.bn_mode_override or cfg.bn_mode


def _batch_norm(params: ModelParams, cfg: ModelConfig, layer: str, x: Tensor, mode: Mode,
                bn_mode: str) -> Tensor:
    gamma, beta = params.weights[f"{layer}.gamma"], params.weights[f"{layer}.beta"]
    stats = params.bn_stats[layer]
    if mode == "eval" and bn_mode == "running":
        return ops.batch_norm(x, gamma, beta, running=(stats.running_mean, stats.running_var),
                              eps=cfg.bn_eps).output
    out, mean, var = ops.batch_norm(x, gamma, beta, eps=cfg.bn_eps)
    if mode == "train":
        n = x.size // x.shape[1]
        unbiased = var * n / max(n - 1, 1)
        m = stats.momentum
        stats.running_mean = ((1 - m) * stats.running_mean + m * mean).astype(np.float32)
        stats.running_var = ((1 - m) * stats.running_var + m * unbiased).astype(np.float32)
    return out


def forward(params: ModelParams, cfg: ModelConfig, batch, mode: Mode = "eval",
            tape: Optional[GradTape] = None, dropout_seed: Optional[int] = None) -> Tensor:
    """Logits ``[b, K]`` for a batch ``[b, c, t]``.

    Train mode normalises with batch statistics, updates the running statistics in
    place and applies dropout. Eval mode uses the running statistics unless the
    effective bn mode is ``batch``. Operations are recorded on ``tape`` when given.
    """
    x = ops.as_tensor(batch)
    if x.ndim != 3 or x.shape[1:] != (cfg.c, cfg.t):
        raise ValidationError(f"Batch shape {x.shape} does not match (b, {cfg.c}, {cfg.t})")
    if tape is not None:
        with tape:
            return forward(params, cfg, x, mode=mode, dropout_seed=dropout_seed)

    w = params.weights
    bn_mode = effective_bn_mode(params, cfg)
    rate = cfg.dropout_rate if mode == "train" else 0.0
    rng = np.random.default_rng(dropout_seed) if rate > 0 else None
    b = x.shape[0]

    h = ops.conv1d(x, w["temporal.weight"])
    h = _batch_norm(params, cfg, "bn1", h, mode, bn_mode)
    h = ops.spatial_filter(h, w["spatial.weight"])
    h = _batch_norm(params, cfg, "bn2", h, mode, bn_mode)
    h = ops.elu(h)
    h = ops.avg_pool(h, cfg.pool1)
    h = ops.dropout(h, rate, rng)
    h = ops.depthwise_conv1d(h, w["separable.depthwise"])
    h = ops.pointwise(h, w["separable.pointwise"])
    h = _batch_norm(params, cfg, "bn3", h, mode, bn_mode)
    h = ops.elu(h)
    h = ops.avg_pool(h, cfg.pool2)
    h = ops.dropout(h, rate, rng)
    h = ops.reshape(h, (b, cfg.n_features))
    return ops.affine(h, w["dense.weight"], w["dense.bias"])


def zero_based(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 1 or labels.max() > n_classes):
        raise ValidationError(f"Labels must lie in 1..{n_classes}")
    return labels.astype(np.int64) - 1


def cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy for one-based ``labels`` in ``1..K``."""
    logits = ops.as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [batch, K], got {logits.shape}")
    return ops.softmax_cross_entropy(logits, zero_based(labels, logits.shape[1]))


def predict_proba(params: ModelParams, cfg: ModelConfig, signals: np.ndarray,
                  batch_size: Optional[int] = None) -> np.ndarray:
    """Class probabilities ``[N, K]`` (float64), evaluated in chunks."""
    batch_size = batch_size or settings.EVAL_BATCH_SIZE
    chunks = []
    for start in range(0, len(signals), batch_size):
        logits = forward(params, cfg, signals[start:start + batch_size], mode="eval")
        z = logits.data.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        chunks.append(e / e.sum(axis=1, keepdims=True))
    if not chunks:
        return np.zeros((0, cfg.K))
    return np.concatenate(chunks, axis=0)


def predict(params: ModelParams, cfg: ModelConfig, signals: np.ndarray,
            batch_size: Optional[int] = None) -> np.ndarray:
    """One-based class predictions; ties go to the lowest class."""
    return np.argmax(predict_proba(params, cfg, signals, batch_size), axis=1) + 1
