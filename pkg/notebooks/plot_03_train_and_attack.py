"""
Training a small segmenter and attacking it
===========================================

Fit the full network on synthetic lung-like images for a few epochs, then
measure how its Dice score falls under targeted iterative sign attacks.
Takes under half a minute on one core.
"""

import numpy as np

from nlcen.attack import AttackConfig, generate_adversarial, sweep
from nlcen.data import SyntheticConfig, split, synth_generate, to_arrays
from nlcen.segnet import ModelConfig, NLCEN
from nlcen.train import TrainSettings, train_model

records = synth_generate(SyntheticConfig(kind="lung-like", count=80, seed=0))
train, test = split(records, "train"), split(records, "test")
print(len(train), "train /", len(test), "test, mask fraction", np.mean([r.mask.mean() for r in records]).round(3))

model = NLCEN(ModelConfig(variant="full", codewords=8))
for log in train_model(model, train, TrainSettings(epochs=6), seed=0):
    print(f"epoch {log.epoch}  loss {log.loss:.3f}  train DIC {log.dic:.3f}  lr {log.lr:.1e}")

###############################################################################
# One attack, inspected: the perturbation never leaves the epsilon ball.

images, masks = to_arrays(test)
adv = generate_adversarial(model, images[:4], masks[:4], AttackConfig(epsilon=8))
print("iterations", adv.iterations_run, "L-inf", adv.linf)
print("target loss per iteration", np.round(adv.trace, 3))

###############################################################################
# A short sweep over attack intensities.

for row in sweep(model, images, masks, [2, 8, 16]):
    print(f"eps {row.epsilon:>4g}  DIC {row.dic:.3f}  JSC {row.jsc:.3f}")
