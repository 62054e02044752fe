"""Does pre-training help fine-tuning on a small labelled set?

Run:  python demos/02_pretrain_vs_scratch.py [split]

Pre-training sees only the training videos of the split and never their
labels.  Both fine-tuning runs share seed, epochs and data, so the only
difference is the starting point.
"""

import sys

from selfvs import recipes as R
from selfvs.data import generate_synthetic, make_splits
from selfvs.model import StudentModel
from selfvs.training import dataset_mse, finetune, pretrain

split_index = int(sys.argv[1]) if len(sys.argv) > 1 else 0
dataset, _ = generate_synthetic(R.planted_synth())
split = make_splits(dataset, k=5, seed=R.SEED)[split_index]
train, test = dataset.subset(split.train), dataset.subset(split.test)
print(f"split {split_index}: train {split.train}\n         test  {split.test}")

wins = 0
for seed in range(5):
    pre = pretrain(StudentModel(R.small_model(), seed=seed), train, R.short_pretrain(seed=seed, batch_size=len(train)))
    warm = StudentModel(R.small_model(), seed=seed)
    finetune(warm, train, None, R.short_finetune(seed=seed), init=pre)
    cold = StudentModel(R.small_model(), seed=seed)
    finetune(cold, train, None, R.short_finetune(seed=seed))
    a, b = dataset_mse(warm, test), dataset_mse(cold, test)
    wins += a <= b
    print(f"seed {seed}: test MSE pretrained {a:.4f}  scratch {b:.4f}  {'pretrained' if a <= b else 'scratch'} wins")
print(f"pretrained at least as good in {wins}/5 seeds")
