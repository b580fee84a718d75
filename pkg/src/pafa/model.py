"""
Pooled-MLP encoder with a classification head and a projection head.

    features (B, T, M)
      -> temporal mean and std pooling          (B, 2M)
      -> encoder MLP, ReLU between layers       (B, d)     encoder_out
      -> classifier: linear                     (B, n_classes)
      -> projection: linear, ReLU, linear       (B, d_proj) training only

Weights are stored (fan_in, fan_out) so a layer is `x @ W + b`. The
projection branch is removed for inference; classification outputs never
depend on it. Backward returns exact gradients for every parameter; both
heads' gradients meet at the encoder output.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from .errors import DataError, UsageError

N_FRAMES = 498
N_MELS = 128


@dataclass(frozen=True)
class EncoderConfig:
    frames: int = N_FRAMES
    mels: int = N_MELS
    hidden: Tuple[int, ...] = (256, 128)
    embed_dim: int = 128
    proj_dim: int = 128
    n_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        widths = (self.frames, self.mels, self.embed_dim, self.proj_dim, self.n_classes, *self.hidden)
        if any(v < 1 for v in widths):
            raise UsageError(f"All model widths must be >= 1: {self}")

    @property
    def pooled_dim(self) -> int:
        return 2 * self.mels

    @property
    def encoder_widths(self) -> Tuple[int, ...]:
        return (self.pooled_dim, *self.hidden, self.embed_dim)

    def to_flat(self) -> Dict[str, object]:
        return {
            "model.frames": self.frames,
            "model.mels": self.mels,
            "model.hidden": self.hidden,
            "model.embed_dim": self.embed_dim,
            "model.proj_dim": self.proj_dim,
            "model.n_classes": self.n_classes,
            "model.seed": self.seed,
        }

    @classmethod
    def from_flat(cls, values: Mapping[str, str]) -> "EncoderConfig":
        return cls(
            frames=int(values["model.frames"]),
            mels=int(values["model.mels"]),
            hidden=tuple(int(v) for v in str(values["model.hidden"]).split(",") if v),
            embed_dim=int(values["model.embed_dim"]),
            proj_dim=int(values["model.proj_dim"]),
            n_classes=int(values["model.n_classes"]),
            seed=int(values["model.seed"]),
        )


class ParamSet:
    """Named parameter tensors; `training` is False once the projection is stripped."""

    def __init__(self, config: EncoderConfig, tensors: Dict[str, np.ndarray], training: bool = True):
        self.config = config
        self.tensors = dict(tensors)
        self.training = training

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def has_projection(self) -> bool:
        return PROJ_W0 in self.tensors

    @property
    def n_encoder_layers(self) -> int:
        return len(self.config.encoder_widths) - 1

    def copy(self) -> "ParamSet":
        return ParamSet(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.training)

    def require_training(self) -> "ParamSet":
        if not self.training or not self.has_projection:
            raise UsageError("This parameter set was stripped for inference and cannot be trained")
        return self

    def n_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


CLS_W, CLS_B = "cls.weight", "cls.bias"
PROJ_W0, PROJ_B0 = "proj.0.weight", "proj.0.bias"
PROJ_W1, PROJ_B1 = "proj.1.weight", "proj.1.bias"
PROJECTION_KEYS = (PROJ_W0, PROJ_B0, PROJ_W1, PROJ_B1)


def enc_keys(layer: int) -> Tuple[str, str]:
    return f"enc.{layer}.weight", f"enc.{layer}.bias"


def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    bias = rng.uniform(-bound, bound, size=fan_out)
    return weight, bias


def init_params(config: EncoderConfig, rng: Optional[np.random.Generator] = None) -> ParamSet:
    """Scaled-uniform fan-in initialization, seeded from config.seed by default."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    tensors: Dict[str, np.ndarray] = {}
    widths = config.encoder_widths
    for layer in range(len(widths) - 1):
        w_key, b_key = enc_keys(layer)
        tensors[w_key], tensors[b_key] = _uniform_layer(rng, widths[layer], widths[layer + 1])
    tensors[CLS_W], tensors[CLS_B] = _uniform_layer(rng, config.embed_dim, config.n_classes)
    tensors[PROJ_W0], tensors[PROJ_B0] = _uniform_layer(rng, config.embed_dim, config.embed_dim)
    tensors[PROJ_W1], tensors[PROJ_B1] = _uniform_layer(rng, config.embed_dim, config.proj_dim)
    return ParamSet(config, tensors)


def zero_params(config: EncoderConfig) -> ParamSet:
    params = init_params(config)
    return ParamSet(config, {k: np.zeros_like(v) for k, v in params.items()})


# =============================================================================
# FORWARD / BACKWARD
# =============================================================================

@dataclass
class ForwardOutput:
    logits: np.ndarray
    proj: Optional[np.ndarray]
    encoder_out: np.ndarray
    # activations kept for backward
    layer_inputs: List[np.ndarray] = field(default_factory=list, repr=False)
    pre_activations: List[np.ndarray] = field(default_factory=list, repr=False)
    proj_hidden_pre: Optional[np.ndarray] = field(default=None, repr=False)


def pool(features: np.ndarray) -> np.ndarray:
    """Concatenate temporal mean and std per mel bin."""
    return np.concatenate([features.mean(axis=1), features.std(axis=1)], axis=1)


def forward(params: ParamSet, features: np.ndarray) -> ForwardOutput:
    """Logits, projection embeddings (None when stripped) and encoder output."""
    x = np.asarray(features, dtype=np.float64)
    cfg = params.config
    if x.ndim != 3 or x.shape[2] != cfg.mels:
        raise DataError(f"Features must be shaped (B, T, {cfg.mels}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("Features contain NaN or Inf")
    return forward_pooled(params, pool(x))


def forward_pooled(params: ParamSet, pooled: np.ndarray) -> ForwardOutput:
    """forward() from already pooled (B, 2M) vectors."""
    h = np.asarray(pooled, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.config.pooled_dim:
        raise DataError(f"Pooled features must be shaped (B, {params.config.pooled_dim}), got {h.shape}")
    layer_inputs, pre_activations = [], []
    n_layers = params.n_encoder_layers
    for layer in range(n_layers):
        w_key, b_key = enc_keys(layer)
        layer_inputs.append(h)
        a = h @ params[w_key] + params[b_key]
        pre_activations.append(a)
        h = np.maximum(a, 0.0) if layer < n_layers - 1 else a
    encoder_out = h

    logits = encoder_out @ params[CLS_W] + params[CLS_B]

    proj = proj_pre = None
    if params.has_projection:
        proj_pre = encoder_out @ params[PROJ_W0] + params[PROJ_B0]
        proj = np.maximum(proj_pre, 0.0) @ params[PROJ_W1] + params[PROJ_B1]

    return ForwardOutput(logits, proj, encoder_out, layer_inputs, pre_activations, proj_pre)


def cross_entropy(logits: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """Mean negative log-softmax at the true class, and d/dlogits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    batch, n_classes = logits.shape
    if labels.shape != (batch,) or np.any(labels < 0) or np.any(labels >= n_classes):
        raise DataError(f"Labels must be {batch} class indices in [0, {n_classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_norm[:, None]
    loss = float(-log_probs[np.arange(batch), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(batch), labels] -= 1.0
    return loss, grad / batch


def backward(params: ParamSet, out: ForwardOutput, grad_logits: np.ndarray,
             grad_proj: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """Reverse-mode gradients for every tensor in `params`."""
    grads: Dict[str, np.ndarray] = {}
    e = out.encoder_out

    grads[CLS_W] = e.T @ grad_logits
    grads[CLS_B] = grad_logits.sum(axis=0)
    g_e = grad_logits @ params[CLS_W].T

    if params.has_projection:
        if grad_proj is None:
            grad_proj = np.zeros_like(out.proj)
        hidden = np.maximum(out.proj_hidden_pre, 0.0)
        grads[PROJ_W1] = hidden.T @ grad_proj
        grads[PROJ_B1] = grad_proj.sum(axis=0)
        g_hidden = (grad_proj @ params[PROJ_W1].T) * (out.proj_hidden_pre > 0)
        grads[PROJ_W0] = e.T @ g_hidden
        grads[PROJ_B0] = g_hidden.sum(axis=0)
        g_e = g_e + g_hidden @ params[PROJ_W0].T

    g = g_e
    for layer in reversed(range(params.n_encoder_layers)):
        w_key, b_key = enc_keys(layer)
        if layer < params.n_encoder_layers - 1:
            g = g * (out.pre_activations[layer] > 0)
        grads[w_key] = out.layer_inputs[layer].T @ g
        grads[b_key] = g.sum(axis=0)
        if layer > 0:
            g = g @ params[w_key].T

    return {k: grads[k] for k in params}


def strip_projection(params: ParamSet) -> ParamSet:
    """Inference copy without the projection head."""
    tensors = {k: v.copy() for k, v in params.items() if k not in PROJECTION_KEYS}
    return ParamSet(params.config, tensors, training=False)


def check_param_gradients(params: ParamSet, features: np.ndarray, labels,
                          proj_weights: np.ndarray, h: float = 1e-5,
                          floor: float = 1e-4) -> float:
    """
    Max relative error of backward() against central differences.

    The check objective is CE(logits) + sum(proj * proj_weights), so the
    projection branch receives grad_proj = proj_weights. Entries smaller
    than `floor` are compared against `floor` instead of their own size.
    """
    def objective(p: ParamSet) -> float:
        out = forward(p, features)
        ce, _ = cross_entropy(out.logits, labels)
        return ce + float(np.sum(out.proj * proj_weights))

    out = forward(params, features)
    _, grad_logits = cross_entropy(out.logits, labels)
    analytic = backward(params, out, grad_logits, proj_weights)

    worst = 0.0
    perturbed = params.copy()
    for name, tensor in perturbed.items():
        for idx in np.ndindex(*tensor.shape):
            original = tensor[idx]
            tensor[idx] = original + h
            f_plus = objective(perturbed)
            tensor[idx] = original - h
            f_minus = objective(perturbed)
            tensor[idx] = original
            numeric = (f_plus - f_minus) / (2 * h)
            a = analytic[name][idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
    return worst
