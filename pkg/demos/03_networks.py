# %% [markdown]
# # Regressors from angle to pulse
#
# MLP, mixture of experts and multi-region models are trained on normalized
# coefficients, then an MLP is fine-tuned directly on simulated infidelity and
# a compact student is distilled from the mixture.
#
# Uses the sweep written by ``02_pulse_optimization.py`` (regenerated if
# missing). The sizes are tiny so the script finishes in a few minutes.

# %%
from pathlib import Path

import numpy as np

from snapml import datasets as dsm
from snapml.control import OptimizeOptions, generate_dataset
from snapml.networks import (FinetuneOptions, MlpConfig, MlpModel, MoeModel, MrModel, TrainOptions, distill,
                             evaluate, finetune_infidelity, mse, train_mr, train_mse)
from snapml.operators import SystemSpec

sys_ = SystemSpec()
path = Path("demo_out") / "sweep32.csv"
if path.exists():
    ds = dsm.load(path)
else:
    path.parent.mkdir(exist_ok=True)
    ds = generate_dataset(sys_, 32, 2, OptimizeOptions(target_infidelity=1e-6))
    dsm.save(ds, path)

ds = dsm.smooth(dsm.filter_by_infidelity(ds, 1e-4), 3, sys_, 2)
train, val, test = dsm.split(ds, (0.7, 0.15, 0.15), seed=0)
scale = dsm.target_scale(train)
print(f"{len(train)}/{len(val)}/{len(test)} records, scale {scale:.3f}")

# %%
opts = TrainOptions(epochs=400, batch_size=8, lr_start=3e-3)
cfg = MlpConfig.from_hidden((16, 16))
mlp, hist = train_mse(MlpModel(cfg, scale=scale, seed=0), train, val, opts)
print(f"MLP {mlp.n_params} params  test MSE {mse(mlp, test):.2e}")

moe, _ = train_mse(MoeModel.build(cfg, 3, None, scale, 0), train, val, opts)
print(f"MoE {moe.n_params} params  test MSE {mse(moe, test):.2e}")

mr, _ = train_mr(MrModel.build(MlpConfig.from_hidden((8,)), scale=scale, seed=0), train, val, opts)
print(f"MR  {mr.n_params} params  test MSE {mse(mr, test):.2e}")

# %% [markdown]
# Mean and worst infidelity of the predicted pulses on a 64-angle grid.

# %%
for name, m in [("mlp", mlp), ("moe", moe), ("mr", mr)]:
    mean, mx, _ = evaluate(m, sys_, 2, 64)
    print(f"{name}: mean {mean:.2e}  max {mx:.2e}")

# %% [markdown]
# Fine-tuning samples angles in proportion to their current infidelity and
# backpropagates the simulated infidelity through the network.

# %%
tuned, rounds = finetune_infidelity(mlp, sys_, 2, FinetuneOptions(rounds=2, batches_per_round=10, eval_grid=64))
print("fine-tune means:", [f"{r['mean']:.2e}" for r in rounds])

# %% [markdown]
# Distillation: the mixture labels a dense grid and a single MLP learns it.

# %%
dist = distill(moe, 2000)
print("labels equal teacher output:", np.array_equal(dist.theta, moe.forward(dist.alpha)))
dtr, dva, _ = dsm.split(dist, (0.8, 0.1, 0.1), seed=0)
student, _ = train_mse(MlpModel(cfg, scale=dsm.target_scale(dtr), seed=0), dtr, dva,
                       TrainOptions(epochs=60, batch_size=32, lr_start=3e-3))
print(f"student mean infidelity {evaluate(student, sys_, 2, 64)[0]:.2e}")
