"""Train a small dynamic model briefly, then pick and ship a subnetwork for a budget.

A few hundred steps is enough to see the loss fall; real runs use the CLI
(`dynsep train --config desk --out run/`).
"""
import tempfile
from pathlib import Path

import numpy as np

from dynsep.deploy import enumerate_costs, extract_subnet, load_checkpoint, save_checkpoint, select_config
from dynsep.model import DESK, init_model
from dynsep.training import DataSpec, TrainConfig, evaluate_snr, make_test_set, train

#%%
data = DataSpec(duration=0.5)
cfg = TrainConfig(steps_per_epoch=50, max_epochs=4, val_batches=1, seed=0)
result = train(init_model(DESK, 0), data, cfg,
               on_epoch=lambda r: print(f"epoch {r.epoch}  train {r.train_loss:.4f}  val {r.val_loss:.4f}  {r.histogram_str()}"))
model = result.params

#%%
items = make_test_set(data, 2, seed=7)
for w, d in [(1, 1), (2, 2), (4, 4)]:
    print(f"(w={w}, d={d})  SNR {np.mean(evaluate_snr(model, items, w, d)):.2f} dB")

#%%
table = enumerate_costs(DESK)
budget = 0.5 * table.lookup(4, 4).macs_per_s
choice = select_config(table, max_macs=budget)
print(f"half the full model's MACs ({budget / 1e6:.2f}M/s) buys", choice)

#%%
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "small.ckpt"
    save_checkpoint(extract_subnet(model, choice), path)
    small = load_checkpoint(path, dtype="float64")
    print(f"checkpoint {path.stat().st_size} bytes, {small.num_parameters()} parameters")
    print("SNR of the shipped subnetwork: %.2f dB" % np.mean(evaluate_snr(small, items, choice.w, choice.d)))
