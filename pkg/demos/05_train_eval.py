"""Train a miniature model end to end and read the evaluation report.

Uses a small synthetic dataset and a deliberately tiny model so the whole
script runs in well under a minute; the full-size desk run lives behind
`emgmoe train --preset desk`.
"""

import numpy as np

from emgmoe.model import ModelConfig
from emgmoe.sigproc import build_split, synth_dataset
from emgmoe.trainer import TrainConfig, evaluate, train

recordings = synth_dataset(seed=0, subjects=2, sessions=2, classes=3, t=400, v=8)
split = build_split(recordings, protocol="inter-session")
n_train = sum(ps.patches.shape[0] for ps in split.train)
n_test = sum(ps.patches.shape[0] for ps in split.test)
print(f"{n_train} training patches (session 1), {n_test} held-out (session 2)")

cfg = ModelConfig(
    channels=8, classes=3, d_model=8, state_dim=2, expand=2,
    n_experts=2, top_k=1, wtfm_channels=2, chan_embed=2,
)
model, history, _ = train(
    cfg,
    TrainConfig(epochs=8, batch_size=16, lr0=1e-3, val_every=4),
    split,
    log=print,
)

report = evaluate(model, split.test)
print("\nconfusion matrix (rows = true class):")
print(report.confusion)
print(f"signal accuracy {report.total_accuracy:.3f} "
      f"(balanced {report.balanced_accuracy:.3f}), "
      f"patch accuracy {report.patch_accuracy:.3f}")
print("per-class AUC:", [None if a is None else round(a, 3)
                         for a in report.per_class_auc])
