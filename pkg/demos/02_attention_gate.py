"""
Inside one attention gate
=========================

The gate mixes three signals, the skip map x, the bottom-branch map y and the
coarser decoder signal g, into one coefficient per pixel:

    alpha = sigmoid(psi . relu(W_x x + W_y y + W_g g + b_g) + b_psi)

Both x and y are rescaled by the same alpha. Here we evaluate it once with
the module and once by hand for a single pixel.
"""
import numpy as np
import torch

from clawunet.model import AttentionGate

rng = np.random.default_rng(0)
gate = AttentionGate(g_channels=4, x_channels=2, y_channels=2).double()
with torch.no_grad():
    for p in gate.parameters():
        p.copy_(torch.from_numpy(rng.normal(size=tuple(p.shape))))

g = torch.from_numpy(rng.normal(size=(1, 4, 2, 2)))   # coarse, gets resampled to 4x4
x = torch.from_numpy(rng.normal(size=(1, 2, 4, 4)))
y = torch.from_numpy(rng.normal(size=(1, 2, 4, 4)))

with torch.no_grad():
    gx, gy, alpha = gate(g, x, y)
print("alpha map:\n", np.round(alpha[0, 0].numpy(), 4))

###############################################################################
# The same number by hand, at pixel (1, 2).

from clawunet.substrate import upsample2x

g_up = upsample2x(g)[0, :, 1, 2].numpy()
xp, yp = x[0, :, 1, 2].numpy(), y[0, :, 1, 2].numpy()
f = gate.inter_channels
wg = gate.w_g.weight.detach().numpy().reshape(f, -1)
wx = gate.w_x.weight.detach().numpy().reshape(f, -1)
wy = gate.w_y.weight.detach().numpy().reshape(f, -1)
s = wx @ xp + wy @ yp + wg @ g_up + gate.w_g.bias.detach().numpy()
q = gate.psi.weight.detach().numpy().reshape(-1) @ np.maximum(s, 0) + gate.psi.bias.item()
print(f"by hand {1 / (1 + np.exp(-q)):.12f}  module {alpha[0, 0, 1, 2].item():.12f}")

###############################################################################
# With every parameter at zero the gate lets exactly half of each signal through.

with torch.no_grad():
    for p in gate.parameters():
        p.zero_()
    print("zero gate alpha:", torch.unique(gate(g, x, y)[2]).tolist())
