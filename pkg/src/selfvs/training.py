"""Losses, optimizer, learning-rate schedule, training loops and checkpoints."""

from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import DTYPE_F64, Dataset, VideoSample, decode_tensor, encode_tensor
from .errors import ConfigurationError, ContractError, DatasetError, DimensionError, FormatError
from .model import ModelConfig, StudentModel
from .tensor import Rng, Tensor

LOG_FLOOR = 1e-12
CHECKPOINT_VERSION = 1
HISTOGRAM_BINS = 20


# -- losses -----------------------------------------------------------------

def distillation_loss(student_repr: Tensor, teacher_repr, temperature: float = 1.0) -> Tensor:
    """Cross-entropy -sum(a * log b) between softened teacher (a) and student (b) distributions.

    The teacher side is a constant: no gradient flows into it.
    """
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    teacher = teacher_repr.data if isinstance(teacher_repr, Tensor) else np.asarray(teacher_repr, dtype=np.float64)
    if teacher.shape != student_repr.shape or student_repr.ndim != 1:
        raise DimensionError(f"student {student_repr.shape} and teacher {teacher.shape} representations differ in shape")
    a = T.softmax(Tensor(teacher / temperature), axis=0).data
    b = T.softmax(student_repr * (1.0 / temperature), axis=0)
    return -(T.log(b, floor=LOG_FLOOR) @ Tensor(a))


def representation_mse(student_repr: Tensor, teacher_repr) -> Tensor:
    """Mean squared difference between raw representations (loss ablation)."""
    teacher = teacher_repr.data if isinstance(teacher_repr, Tensor) else np.asarray(teacher_repr, dtype=np.float64)
    if teacher.shape != student_repr.shape:
        raise DimensionError(f"student {student_repr.shape} and teacher {teacher.shape} representations differ in shape")
    diff = student_repr - Tensor(teacher)
    return (diff * diff).mean()


def softmax_np(x, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64) / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def entropy_kl_decompose(a, b, atol: float = 1e-9) -> tuple[float, float, float]:
    """Return (entropy of a, cross-entropy of b under a, KL(a || b)).

    ``0 * log 0`` is taken as 0; logs of ``b`` are clamped at 1e-12.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"distributions must be 1-D of equal length, got {a.shape} and {b.shape}")
    for name, d in (("a", a), ("b", b)):
        if np.any(d < 0) or abs(d.sum() - 1.0) > atol:
            raise ContractError(f"{name} is not a probability distribution (sum={d.sum()!r})")
    live = a > 0
    h = float(-np.sum(a[live] * np.log(a[live])))
    ce = float(-np.sum(a[live] * np.log(np.maximum(b[live], LOG_FLOOR))))
    return h, ce, ce - h


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} lengths differ")
    diff = pred - Tensor(target)
    return (diff * diff).mean()


# -- optimizer and schedule -------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam with decoupled weight decay, applied in place."""
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for parameters {missing[:5]}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for k, p in params.items():
        g = p.grad
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    """Linear warm-up to ``lr_max`` over ``warmup_steps``, then half-cosine decay."""
    if not 0 <= warmup_steps < total_steps:
        raise ContractError(f"need 0 <= warmup_steps ({warmup_steps}) < total_steps ({total_steps})")
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return lr_max * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * progress))


# -- configs ----------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 512
    epochs: int = 30
    warmup_epochs: int = 5
    lr_max: float = 1e-4
    loss_kind: str = "cross_entropy"
    temperature: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.lr_max <= 0 or self.temperature <= 0:
            raise ConfigurationError("lr_max and temperature must be positive")
        if self.loss_kind not in ("cross_entropy", "mse"):
            raise ConfigurationError(f"unknown loss_kind {self.loss_kind!r}")
        _check_betas(self.beta1, self.beta2)


@dataclass(frozen=True)
class FinetuneConfig:
    batch_size: int = 4
    epochs: int = 25
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    seed: int = 0
    eps: float = 1e-8

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigurationError("lr must be positive and weight_decay nonnegative")
        _check_betas(self.beta1, self.beta2)


def _check_betas(b1, b2):
    if not (0 < b1 < 1 and 0 < b2 < 1):
        raise ConfigurationError(f"betas must lie in (0, 1), got ({b1}, {b2})")


# -- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict
    adam: AdamState | None = None
    step: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    history: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config["model"])

    def build_model(self) -> StudentModel:
        model = StudentModel(self.model_config)
        model.load_state_dict(self.params, strict=False)
        return model


def _safe_name(name: str) -> str:
    return name.replace("/", "_") + ".svsf"


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``ckpt`` to directory ``path`` (replacing it atomically)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        files = {}
        for group, arrays in _checkpoint_arrays(ckpt):
            (tmp / group).mkdir(parents=True, exist_ok=True)
            for name, arr in arrays.items():
                rel = f"{group}/{_safe_name(name)}"
                (tmp / rel).write_bytes(encode_tensor(arr, DTYPE_F64))
                files.setdefault(group, {})[name] = {"file": rel, "shape": list(arr.shape)}
        manifest = {
            "format": "selfvs-checkpoint",
            "version": ckpt.version,
            "config": ckpt.config,
            "step": ckpt.step,
            "epoch": ckpt.epoch,
            "rng_state": ckpt.rng_state,
            "adam_t": ckpt.adam.t if ckpt.adam is not None else None,
            "tensors": files,
            "param_order": list(ckpt.params),
            "history": ckpt.history,
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _checkpoint_arrays(ckpt: Checkpoint):
    yield "params", ckpt.params
    if ckpt.adam is not None:
        yield "adam_m", ckpt.adam.m
        yield "adam_v", ckpt.adam.v


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        doc = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"checkpoint manifest not found in {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt checkpoint manifest in {path}: {exc}") from None
    if doc.get("format") != "selfvs-checkpoint":
        raise FormatError(f"{path} is not a checkpoint directory")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint version {doc.get('version')} unsupported (expected {CHECKPOINT_VERSION})")
    groups: dict[str, dict[str, np.ndarray]] = {}
    for group, entries in doc["tensors"].items():
        groups[group] = {}
        for name, meta in entries.items():
            try:
                arr = decode_tensor((path / meta["file"]).read_bytes())
            except FileNotFoundError:
                raise FormatError(f"missing tensor file {meta['file']}") from None
            except FormatError as exc:
                raise FormatError(f"{meta['file']}: {exc}") from None
            if list(arr.shape) != meta["shape"]:
                raise FormatError(f"{meta['file']}: shape {arr.shape} != declared {meta['shape']}")
            groups[group][name] = arr.astype(np.float64)
    order = doc["param_order"]
    params = {k: groups["params"][k] for k in order}
    adam = None
    if "adam_m" in groups:
        adam = AdamState({k: groups["adam_m"][k] for k in groups["adam_m"]},
                         {k: groups["adam_v"][k] for k in groups["adam_v"]}, int(doc["adam_t"]))
    return Checkpoint(params=params, config=doc["config"], adam=adam, step=int(doc["step"]), epoch=int(doc["epoch"]),
                      rng_state=doc["rng_state"], history=doc["history"], version=int(doc["version"]))


# -- training loops ---------------------------------------------------------

def score_histogram(scores: np.ndarray, bins: int = HISTOGRAM_BINS) -> dict:
    """Histogram of scores over [0, max score] plus summary statistics."""
    top = float(scores.max())
    counts, _ = np.histogram(scores, bins=bins, range=(0.0, top if top > 0 else 1.0))
    return {"min": float(scores.min()), "max": top, "counts": counts.astype(int).tolist()}


def _run_epochs(model: StudentModel, samples: Sequence[VideoSample], params: dict[str, Tensor], *, batch_size: int,
                epochs: int, seed: int, video_loss: Callable, lr_for_step: Callable[[int], float], adam_kwargs: dict,
                resume: Checkpoint | None, stop_after_epoch: int | None, score_mode: str, project: bool,
                config_snapshot: dict, keep_params: Callable[[str], bool]) -> Checkpoint:
    rng = Rng(seed)
    state = AdamState.zeros_like(params)
    step, start_epoch, history = 0, 0, {"loss": [], "histograms": []}
    if resume is not None:
        model.load_state_dict(resume.params, strict=False)
        if resume.rng_state is not None:
            rng.set_state(resume.rng_state)
        if resume.adam is not None:
            state = AdamState({k: resume.adam.m[k].copy() for k in params}, {k: resume.adam.v[k].copy() for k in params}, resume.adam.t)
        step, start_epoch = resume.step, resume.epoch
        history = json.loads(json.dumps(resume.history))
    last = epochs if stop_after_epoch is None else min(epochs, stop_after_epoch)
    n = len(samples)
    n_batches = math.ceil(n / batch_size)

    for epoch in range(start_epoch, last):
        order = rng.permutation(n)
        losses, seen_scores = [], []
        for b in range(n_batches):
            batch = order[b * batch_size:(b + 1) * batch_size]
            model.zero_grad()
            total = None
            for i in batch:
                sample = samples[i]
                out = model.forward(sample.frame_features, training=True, rng=rng, score_mode=score_mode, project=project)
                loss = video_loss(out, sample)
                losses.append(loss.item())
                seen_scores.append(out.scores.data.copy())
                total = loss if total is None else total + loss
            total = total * (1.0 / len(batch))
            T.backward(total)
            adam_step(params, state, lr_for_step(step), **adam_kwargs)
            step += 1
        history["loss"].append(float(np.mean(losses)))
        hist = score_histogram(np.concatenate(seen_scores))
        hist["min_spread"] = float(min(sc.max() - sc.min() for sc in seen_scores))
        history["histograms"].append(hist)

    return Checkpoint(
        params={k: v.copy() for k, v in model.state_dict().items() if keep_params(k)},
        config=config_snapshot,
        adam=AdamState({k: state.m[k].copy() for k in params}, {k: state.v[k].copy() for k in params}, state.t),
        step=step,
        epoch=last,
        rng_state=rng.get_state(),
        history=history,
    )


def pretrain(model: StudentModel, dataset: Dataset | Sequence[VideoSample], cfg: PretrainConfig, *,
             resume: Checkpoint | None = None, stop_after_epoch: int | None = None) -> Checkpoint:
    """Distil teacher representations into the student (self-supervised stage).

    Every student parameter, including the projection head, is optimized;
    teacher vectors are read as constants.  ``stop_after_epoch`` ends the
    run early so that it can later be resumed with ``resume``.
    """
    cfg.validate()
    samples = list(dataset)
    if not samples:
        raise DatasetError("no training videos")
    for s in samples:
        if s.teacher_repr is None:
            raise DatasetError("missing teacher representation", s.id, "teacher_repr")
        if s.teacher_repr.shape != (model.config.teacher_dim,):
            raise DatasetError(f"teacher_repr length {s.teacher_repr.shape[0]} != model teacher_dim {model.config.teacher_dim}", s.id, "teacher_repr")
    n_batches = math.ceil(len(samples) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    warmup_steps = cfg.warmup_epochs * n_batches

    if cfg.loss_kind == "cross_entropy":
        def video_loss(out, sample):
            return distillation_loss(out.projected_repr, sample.teacher_repr, cfg.temperature)
    else:
        def video_loss(out, sample):
            return representation_mse(out.projected_repr, sample.teacher_repr)

    model.with_score_mode("softmax")
    snapshot = {"phase": "pretrain", "model": model.config.to_dict(), "training": asdict(cfg)}
    return _run_epochs(
        model, samples, model.params, batch_size=cfg.batch_size, epochs=cfg.epochs, seed=cfg.seed,
        video_loss=video_loss, lr_for_step=lambda s: lr_at(s, total_steps, warmup_steps, cfg.lr_max),
        adam_kwargs=dict(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=0.0),
        resume=resume, stop_after_epoch=stop_after_epoch, score_mode="softmax", project=True,
        config_snapshot=snapshot, keep_params=lambda k: True,
    )


def finetune(model: StudentModel, dataset: Dataset | Sequence[VideoSample], train_ids: Sequence[str] | None,
             cfg: FinetuneConfig, init: Checkpoint | None = None, *, resume: Checkpoint | None = None,
             stop_after_epoch: int | None = None) -> Checkpoint:
    """Supervised fine-tuning on frame-level ground-truth scores.

    ``init`` supplies starting weights (typically a pre-training checkpoint);
    without it the model's current (fresh) weights are used.  The projection
    head is neither optimized nor written to the result.
    """
    cfg.validate()
    if isinstance(dataset, Dataset):
        samples = dataset.subset(train_ids) if train_ids is not None else list(dataset)
    else:
        samples = list(dataset)
    if not samples:
        raise DatasetError("no training videos")
    for s in samples:
        if s.gt_scores is None:
            raise DatasetError("missing ground-truth scores", s.id, "gt_scores")
    if init is not None:
        model.load_state_dict(init.params, strict=False)
    model.with_score_mode("sigmoid")
    params = model.encoder_parameters()

    def video_loss(out, sample):
        return mse_loss(out.scores, sample.gt_scores)

    snapshot = {"phase": "finetune", "model": model.config.to_dict(), "training": asdict(cfg),
                "init": "pretrained" if init is not None else "fresh"}
    return _run_epochs(
        model, samples, params, batch_size=cfg.batch_size, epochs=cfg.epochs, seed=cfg.seed,
        video_loss=video_loss, lr_for_step=lambda s: cfg.lr,
        adam_kwargs=dict(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay),
        resume=resume, stop_after_epoch=stop_after_epoch, score_mode="sigmoid", project=False,
        config_snapshot=snapshot, keep_params=lambda k: not k.startswith(StudentModel.PROJECTION_PREFIX),
    )


def predict_scores(model: StudentModel, sample: VideoSample, score_mode: str | None = None) -> np.ndarray:
    return model.scores(sample.frame_features, score_mode=score_mode)


def dataset_mse(model: StudentModel, samples: Sequence[VideoSample]) -> float:
    """Mean over videos of the per-video frame MSE, evaluation mode, sigmoid scores."""
    errs = []
    for s in samples:
        pred = model.scores(s.frame_features, score_mode="sigmoid")
        errs.append(float(np.mean((pred - s.gt_scores) ** 2)))
    return float(np.mean(errs))


def mean_teacher_entropy(samples: Sequence[VideoSample], temperature: float = 1.0) -> float:
    hs = []
    for s in samples:
        a = softmax_np(s.teacher_repr, temperature)
        hs.append(entropy_kl_decompose(a, a)[0])
    return float(np.mean(hs))
