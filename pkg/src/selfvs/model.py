"""Student encoder: two serial transformer stacks, a score head and the
score-weighted video representation.

Pipeline for a video with ``n`` frames::

    frames ++ sinusoidal PE  -> linear -> dropout
    -> first encoder stack   -> X  (frame features x_i)
    -> second encoder stack  -> Y
    -> scores w = softmax(Y W_s)  (pre-training)  or  sigmoid(Y W_s)  (fine-tuning)
    -> phi_v = sum_i w_i x_i  -> linear projection to the teacher width

Encoder layers are pre-norm residual blocks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Rng, Tensor

SCORE_MODES = ("softmax", "sigmoid")
ACTIVATIONS = ("relu", "gelu", "gelu_exact")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 1024
    d_model: int = 256
    n_layers_total: int = 6
    n_heads: int = 4
    d_head: int = 64
    d_ff: int | None = None
    pe_dim: int = 64
    dropout_p: float = 0.2
    activation: str = "gelu"
    teacher_dim: int = 512
    score_mode: str = "softmax"
    first_stage_layers: int | None = None
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.first_stage_layers is None:
            object.__setattr__(self, "first_stage_layers", self.n_layers_total // 2)
        self.validate()

    def validate(self) -> None:
        dims = dict(input_dim=self.input_dim, d_model=self.d_model, n_heads=self.n_heads,
                    d_head=self.d_head, d_ff=self.d_ff, pe_dim=self.pe_dim, teacher_dim=self.teacher_dim)
        for key, value in dims.items():
            if int(value) != value or value <= 0:
                raise ConfigurationError(f"{key} must be a positive integer, got {value}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigurationError(f"d_model ({self.d_model}) must equal n_heads * d_head ({self.n_heads} * {self.d_head})")
        if self.pe_dim % 2:
            raise ConfigurationError(f"pe_dim must be even, got {self.pe_dim}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}")
        if self.score_mode not in SCORE_MODES:
            raise ConfigurationError(f"score_mode must be one of {SCORE_MODES}")
        if self.n_layers_total < 2 or not 1 <= self.first_stage_layers < self.n_layers_total:
            raise ConfigurationError("need at least one encoder layer in each stage")
        if self.ln_eps <= 0:
            raise ConfigurationError("ln_eps must be positive")

    @property
    def second_stage_layers(self) -> int:
        return self.n_layers_total - self.first_stage_layers

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class StudentOutput:
    frame_features: Tensor
    scores: Tensor
    representation: Tensor
    projected_repr: Tensor | None = None


def positional_encoding(n: int, pe_dim: int) -> np.ndarray:
    """Sinusoidal encoding; columns (2i, 2i+1) hold sin/cos of pos / 10000^(2i/pe_dim)."""
    if pe_dim % 2:
        raise ConfigurationError(f"pe_dim must be even, got {pe_dim}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, pe_dim, 2, dtype=np.float64) / pe_dim)
    pe = np.empty((n, pe_dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def self_attention(X: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Tensor:
    """One scaled dot-product attention head; the scale is sqrt of the head width."""
    if X.ndim != 2 or X.shape[0] == 0:
        raise DimensionError(f"self_attention needs a nonempty n x d input, got {X.shape}")
    q, k, v = X @ w_q, X @ w_k, X @ w_v
    att = T.softmax(q @ k.T * (1.0 / math.sqrt(w_q.shape[1])), axis=-1)
    return att @ v


def multi_head_attention(X: Tensor, heads, w_o: Tensor, b_o: Tensor) -> Tensor:
    """Concatenate independent heads and project back to the model width.

    ``heads`` is a sequence of ``(w_q, w_k, w_v)`` triples.
    """
    outs = [self_attention(X, *h) for h in heads]
    merged = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
    return merged @ w_o + b_o


def ffn(X: Tensor, w_1: Tensor, b_1: Tensor, w_2: Tensor, b_2: Tensor, kind: str = "relu") -> Tensor:
    return T.activation(X @ w_1 + b_1, kind) @ w_2 + b_2


def aggregate_representation(X: Tensor, W: Tensor) -> Tensor:
    """Score-weighted sum of frame features."""
    if W.ndim != 1 or X.ndim != 2 or W.shape[0] != X.shape[0]:
        raise DimensionError(f"weights {W.shape} do not match frame features {X.shape}")
    return W @ X


def _glorot(rng: Rng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


class StudentModel:
    """Parameter set of the student plus its forward pass.

    Parameters live in ``self.params``, an insertion-ordered dict from a
    dotted name to a leaf :class:`Tensor`.  The order is a pure function of
    the config, which keeps optimizer state and checkpoints aligned.
    """

    PROJECTION_PREFIX = "proj."

    def __init__(self, config: ModelConfig, rng: Rng | None = None, seed: int = 0):
        self.config = config
        rng = rng if rng is not None else Rng(seed)
        self.params: dict[str, Tensor] = {}
        c = config
        self._matrix("input.w", c.input_dim + c.pe_dim, c.d_model, rng)
        self._zeros("input.b", c.d_model)
        for stage, n_layers in (("enc1", c.first_stage_layers), ("enc2", c.second_stage_layers)):
            for layer in range(n_layers):
                p = f"{stage}.{layer}."
                self._ones(p + "ln1.gamma", c.d_model)
                self._zeros(p + "ln1.beta", c.d_model)
                for h in range(c.n_heads):
                    for w in ("w_q", "w_k", "w_v"):
                        self._matrix(f"{p}attn.head{h}.{w}", c.d_model, c.d_head, rng)
                self._matrix(p + "attn.w_o", c.d_model, c.d_model, rng)
                self._zeros(p + "attn.b_o", c.d_model)
                self._ones(p + "ln2.gamma", c.d_model)
                self._zeros(p + "ln2.beta", c.d_model)
                self._matrix(p + "ffn.w_1", c.d_model, c.d_ff, rng)
                self._zeros(p + "ffn.b_1", c.d_ff)
                self._matrix(p + "ffn.w_2", c.d_ff, c.d_model, rng)
                self._zeros(p + "ffn.b_2", c.d_model)
            self._ones(f"{stage}.final_ln.gamma", c.d_model)
            # a shift here would act as a bias on the score logits, which the score head does not have
            if stage != "enc2":
                self._zeros(f"{stage}.final_ln.beta", c.d_model)
        self._add("score.w_s", _glorot(rng, c.d_model, 1, (c.d_model,)))
        self._matrix(self.PROJECTION_PREFIX + "w", c.d_model, c.teacher_dim, rng)

    # -- parameter bookkeeping ---------------------------------------------
    def _add(self, name, data):
        self.params[name] = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)

    def _matrix(self, name, fan_in, fan_out, rng):
        self._add(name, _glorot(rng, fan_in, fan_out, (fan_in, fan_out)))

    def _zeros(self, name, n):
        self._add(name, np.zeros(n))

    def _ones(self, name, n):
        self._add(name, np.ones(n))

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def encoder_parameters(self) -> dict[str, Tensor]:
        """Everything except the pre-training projection head."""
        return {k: v for k, v in self.params.items() if not k.startswith(self.PROJECTION_PREFIX)}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = [k for k in self.params if k not in state]
        unexpected = [k for k in state if k not in self.params]
        if strict and (missing or unexpected):
            raise ConfigurationError(f"state mismatch: missing {missing[:3]}, unexpected {unexpected[:3]}")
        for k, p in self.params.items():
            if k in state:
                arr = np.asarray(state[k], dtype=np.float64)
                if arr.shape != p.shape:
                    raise DimensionError(f"parameter {k}: expected shape {p.shape}, got {arr.shape}")
                p.data = arr.copy()

    def with_score_mode(self, mode: str) -> "StudentModel":
        """Switch the score activation in place and return self."""
        self.config = replace(self.config, score_mode=mode)
        return self

    # -- forward -----------------------------------------------------------
    def _encoder_layer(self, x: Tensor, prefix: str) -> Tensor:
        c, P = self.config, self.params
        h = T.layer_norm(x, P[prefix + "ln1.gamma"], P[prefix + "ln1.beta"], c.ln_eps)
        heads = [tuple(P[f"{prefix}attn.head{i}.{w}"] for w in ("w_q", "w_k", "w_v")) for i in range(c.n_heads)]
        x = x + multi_head_attention(h, heads, P[prefix + "attn.w_o"], P[prefix + "attn.b_o"])
        h = T.layer_norm(x, P[prefix + "ln2.gamma"], P[prefix + "ln2.beta"], c.ln_eps)
        return x + ffn(h, P[prefix + "ffn.w_1"], P[prefix + "ffn.b_1"], P[prefix + "ffn.w_2"], P[prefix + "ffn.b_2"], c.activation)

    def _stack(self, x: Tensor, stage: str, n_layers: int) -> Tensor:
        for layer in range(n_layers):
            x = self._encoder_layer(x, f"{stage}.{layer}.")
        P = self.params
        beta = P.get(f"{stage}.final_ln.beta")
        if beta is None:
            beta = Tensor(np.zeros(self.config.d_model))
        return T.layer_norm(x, P[f"{stage}.final_ln.gamma"], beta, self.config.ln_eps)

    def forward(self, frames, training: bool = False, rng: Rng | None = None, *,
                score_mode: str | None = None, positional: bool = True, project: bool | None = None) -> StudentOutput:
        return student_forward(frames, self, training, rng, score_mode=score_mode, positional=positional, project=project)

    __call__ = forward

    def scores(self, frames, score_mode: str | None = None) -> np.ndarray:
        """Evaluation-mode frame scores as a plain array."""
        return self.forward(frames, training=False, score_mode=score_mode, project=False).scores.data.copy()


def student_forward(frames, model: StudentModel, training: bool = False, rng: Rng | None = None, *,
                    score_mode: str | None = None, positional: bool = True, project: bool | None = None) -> StudentOutput:
    c, P = model.config, model.params
    frames = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float64))
    if frames.ndim != 2 or frames.shape[1] != c.input_dim:
        raise DimensionError(f"expected frames of shape (n, {c.input_dim}), got {frames.shape}")
    n = frames.shape[0]
    if n == 0:
        raise DimensionError("video has no frames")
    mode = score_mode or c.score_mode
    if mode not in SCORE_MODES:
        raise ConfigurationError(f"score_mode must be one of {SCORE_MODES}")

    pe = positional_encoding(n, c.pe_dim) if positional else np.zeros((n, c.pe_dim))
    h = T.concat([frames, Tensor(pe)], axis=1) @ P["input.w"] + P["input.b"]
    h = T.dropout(h, c.dropout_p, training, rng)

    X = model._stack(h, "enc1", c.first_stage_layers)
    Y = model._stack(X, "enc2", c.second_stage_layers)
    logits = Y @ P["score.w_s"]
    scores = T.softmax(logits, axis=0) if mode == "softmax" else T.sigmoid(logits)
    phi = aggregate_representation(X, scores)

    if project is None:
        project = mode == "softmax"
    projected = phi @ P[StudentModel.PROJECTION_PREFIX + "w"] if project else None
    return StudentOutput(frame_features=X, scores=scores, representation=phi, projected_repr=projected)
