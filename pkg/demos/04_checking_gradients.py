"""The autodiff engine against finite differences, from one op up to a whole model."""
import numpy as np

from dynsep import tensor as T
from dynsep.model import ModelConfig, init_model
from dynsep.tensor import Tensor
from dynsep.training import DataSpec, make_batch, subnet_loss, synth_batch

rng = np.random.default_rng(2)

#%%
a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
f = lambda _: T.sum(T.tanh(T.matmul(a, b)))
print("matmul + tanh:   %.2e" % T.grad_check(f, [a, b]))

#%%
x = Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
w_ih, w_hh = Tensor(rng.standard_normal((3, 12)) * 0.5), Tensor(rng.standard_normal((4, 12)) * 0.5)
b_ih, b_hh = Tensor(np.zeros(12)), Tensor(np.zeros(12))
g = lambda _: T.sum(T.gru(x, w_ih, w_hh, b_ih, b_hh))
print("GRU sequence:    %.2e" % T.grad_check(g, [x, w_ih, w_hh, b_ih, b_hh]))

#%%
# a small model at full size; 20 sampled coordinates per tensor keeps this quick
config = ModelConfig(n_features=6, reweight_dim=3, max_width=3, max_depth=2, rnn_hidden=5, tac_hidden=4, n_bands=4)
params = init_model(config, 0)
batch = make_batch(*synth_batch(rng, DataSpec(duration=0.03, batch_size=1)), config.window, config.hop)
h = lambda _: subnet_loss(params, batch, 3, 2)
print("whole model:     %.2e" % T.grad_check(h, params.parameters(), max_coords=20))
