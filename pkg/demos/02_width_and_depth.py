"""What changes when a layer runs with fewer experts, or the model exits early."""
import numpy as np

from dynsep.dynamic_layer import dynamic_layer_forward, init_dynamic_layer
from dynsep.model import DESK, init_model, model_costs, model_forward
from dynsep.spectral import stft
from dynsep.tensor import Tensor

rng = np.random.default_rng(1)

#%%
# a single dynamic layer, 16 features, 4 experts; weights widened so the gates have something to say
layer = init_dynamic_layer(rng, 16, 8, 4, 16, 16, bidirectional=False, tac=True)
for p in layer.parameters():
    p.data = rng.normal(0, 0.5, p.shape)

x = Tensor(rng.standard_normal((1, 30, 16)))
for w in range(1, 5):
    _, q = dynamic_layer_forward(x, layer, w, return_weights=True)
    print(f"w={w}  Q={np.round(q.data[0], 3)}  sum={q.data.sum():.6f}")
# the first weights move when a new expert joins: Q at width w is not a prefix of width w+1

#%%
# whole model: every (w, d) runs from the same parameters
params = init_model(DESK, 0)
S = stft(rng.standard_normal((1, 4000)), DESK.window, DESK.hop)
full = model_forward(S, params, 4, 4)
for w, d in [(1, 1), (2, 2), (4, 1), (1, 4), (4, 4)]:
    out = model_forward(S, params, w, d)
    n, macs = model_costs(DESK, w, d, DESK.frames_per_second)
    diff = np.abs(out.to_complex() - full.to_complex()).max()
    print(f"(w={w}, d={d})  params {n:6d}  MACs/s {macs / 1e6:6.2f}M  max diff to full {diff:.3g}")
