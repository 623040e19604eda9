"""
Overfitting a single image
==========================

A network that cannot memorise one image has a bug somewhere. Train the full
model on one 128x128 synthetic sample with Adam and print the Dice of its own
thresholded prediction as it goes. On one CPU core this takes a minute or two.
"""
import torch

from clawunet.data import SynthSpec, synth_sample
from clawunet.training import overfit_sanity

torch.set_num_threads(1)

sample = synth_sample(SynthSpec(size=128, seed=2024), 0)
print(f"foreground {100 * sample.mask.mean():.1f}% of pixels")

print(f"untrained Dice {overfit_sanity(sample, steps=0):.4f}")


def report(step, loss, dice):
    if step % 10 == 0 or dice >= 0.99:
        print(f"step {step:3d}  loss {loss:.4f}  Dice {dice:.4f}")


final = overfit_sanity(sample, steps=500, target_dice=0.99, on_step=report)
print(f"final Dice {final:.4f}")
