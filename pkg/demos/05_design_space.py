# %% [markdown]
# # Architecture search and the Pareto front
#
# Random MLP shapes are trained with one shared schedule; the Pareto front
# keeps every model that no smaller model beats.

# %%
from pathlib import Path

import numpy as np

from snapml.datasets import Dataset, angle_grid, split, target_scale
from snapml.explorer import DsePoint, pareto_front, random_configs, run_dse, save_results
from snapml.networks import TrainOptions

configs = random_configs(12, seed=0, depth_range=(1, 4), width_range=(4, 32))
for c in configs[:4]:
    print(c.layer_widths, c.n_params)

# %%
alpha = angle_grid(300)
theta = 0.2 * np.cos(np.outer(alpha, np.linspace(0.2, 1.0, 32)))
train, val, test = split(Dataset(alpha, theta, np.zeros(len(alpha))), seed=0)
points = run_dse(configs, train, val, test, TrainOptions(epochs=40, batch_size=32, lr_start=3e-3))

# %% [markdown]
# Without simulation the front is taken over test MSE; with ``sys`` passed to
# ``run_dse`` each point also gets its mean and worst infidelity.

# %%
front = pareto_front(points, "test_mse")
for p in front:
    print(f"{p.name:>16} {p.params:6d} {p.test_mse:.2e}")
out = Path("demo_out")
out.mkdir(exist_ok=True)
save_results(points, out / "dse.csv")

# %% [markdown]
# Two reference rows: the 514-parameter model has lower
# mean infidelity than the 1022-parameter one, so only it is on the front.

# %%
fixture = [DsePoint("mlp_514", "fixture", 514, mean_infidelity=0.014049),
         DsePoint("mlp_1022", "fixture", 1022, mean_infidelity=0.035468)]
print([p.name for p in pareto_front(fixture)])
