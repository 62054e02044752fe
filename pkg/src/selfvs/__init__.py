"""Self-supervised frame-importance learning for video summarization, on a small numpy autodiff engine."""

from .data import Dataset, SynthConfig, VideoSample, generate_synthetic, load_manifest, make_splits
from .evaluation import evaluate_dataset, f_score, generate_summary, kendall_tau, knapsack_select, spearman_rho
from .model import ModelConfig, StudentModel
from .tensor import Rng, Tensor, backward
from .training import FinetuneConfig, PretrainConfig, finetune, load_checkpoint, pretrain, save_checkpoint

__version__ = "0.1.0"
