"""
Walking the default network
===========================

Push one 512x512 RGB image through the default Claw UNet and print the
feature map at every stage: the encoder stack, the bottom-branch maps that
are re-expanded from the 16x16x512 bottom, the decoder maps and the final
probability map.
"""
import time

import torch

from clawunet import ClawUNet, ModelConfig
from clawunet.model import count_parameters

torch.set_num_threads(1)

config = ModelConfig()
model = ClawUNet(config).eval()
print(f"{count_parameters(model):,} trainable parameters")

image = torch.rand(1, 3, 512, 512, generator=torch.Generator().manual_seed(0))

t0 = time.perf_counter()
with torch.no_grad():
    enc = model.encode(image)
    branch = model.bottom_branch(enc.bottom)
    dec = model.decode(enc, branch)
    prob = model.head(dec[0])
print(f"forward took {time.perf_counter() - t0:.1f}s")


def describe(t):
    return f"{t.shape[2]}x{t.shape[3]}x{t.shape[1]}"


for i, e in enumerate(enc.maps):
    print(f"E{i}  {describe(e)}")

# B[i] is the bottom upsampled N - i times, then convolved down to E[i]'s width
for i, b in enumerate(branch):
    print(f"B{i}  {describe(b)}")

for i, d in enumerate(dec):
    print(f"D{i}  {describe(d)}")

print(f"out {describe(prob)}")
