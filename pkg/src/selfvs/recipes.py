"""Desk-scale configurations shared by the acceptance suite and the demos."""

from __future__ import annotations

from dataclasses import replace

from .data import SynthConfig
from .model import ModelConfig
from .training import FinetuneConfig, PretrainConfig

SEED = 7


def planted_synth(**overrides) -> SynthConfig:
    """8 videos x 32 frames, 16-wide features and teacher, noise-free."""
    return replace(SynthConfig(n_videos=8, n_frames=32, input_dim=16, teacher_dim=16, noise=0.0, seed=SEED), **overrides)


def small_model(input_dim: int = 16, teacher_dim: int = 16, **overrides) -> ModelConfig:
    """One layer per stage, d_model 16; the full-size defaults live on ModelConfig."""
    cfg = ModelConfig(input_dim=input_dim, d_model=16, n_layers_total=2, n_heads=2, d_head=8, pe_dim=8,
                      teacher_dim=teacher_dim, dropout_p=0.2, activation="gelu")
    return replace(cfg, **overrides)


def short_pretrain(**overrides) -> PretrainConfig:
    """500 full-batch steps on the 8-video set: warmup 25, peak lr 1e-3."""
    return replace(PretrainConfig(batch_size=8, epochs=500, warmup_epochs=25, lr_max=1e-3, seed=SEED), **overrides)


def short_finetune(**overrides) -> FinetuneConfig:
    return replace(FinetuneConfig(batch_size=4, epochs=100, lr=1e-3, seed=SEED), **overrides)
