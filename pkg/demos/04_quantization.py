# %% [markdown]
# # Fixed-point models
#
# Weights, biases and ReLU outputs use signed formats with zero integer bits
# and ``f`` fractional bits; each layer result is held in <16,6>. Training
# sees the rounding through fake quantization with a straight-through
# gradient, and inference runs on integer words only.

# %%
from pathlib import Path

import numpy as np

from snapml.datasets import Dataset, angle_grid, split, target_scale
from snapml.fixedpoint import (FixedFormat, QuantConfig, export_weights, import_weights, qat_train,
                               quantize_value, quantized_forward, resource_estimate, trace_compare)
from snapml.networks import MlpConfig, MlpModel, TrainOptions, mse, train_mse

fmt = FixedFormat(5, 0)  # sign bit plus 4 fractional bits
print(fmt, "range", fmt.min_value, fmt.max_value, "step", fmt.step)
print([quantize_value(x, fmt) for x in (0.3125, 0.33, 1.5, 0.03125)])

# %% [markdown]
# A smooth synthetic target keeps this script fast; the pipeline is the same
# for optimized pulse data.

# %%
alpha = angle_grid(400)
theta = 0.2 * np.sin(np.outer(alpha, np.linspace(0.3, 1.2, 32)) + np.linspace(0, 1, 32))
train, val, test = split(Dataset(alpha, theta, np.zeros(len(alpha))), seed=0)
scale = target_scale(train)
cfg = MlpConfig.from_hidden((16, 16))
opts = TrainOptions(epochs=150, batch_size=32, lr_start=3e-3)
flt, _ = train_mse(MlpModel(cfg, scale=scale, seed=0), train, val, opts)
print(f"float val MSE {mse(flt, val):.2e}")

# %%
models = {}
for frac in (2, 4, 6, 8):
    q = QuantConfig.from_frac_bits(frac)
    models[frac] = qat_train(MlpModel(cfg, scale=scale, seed=0), q, train, val, opts)
    err = np.abs(quantized_forward(models[frac], test.alpha) - test.theta).max()
    print(f"frac={frac}: max |theta error| {err:.3e}  resources {resource_estimate(models[frac])}")

# %% [markdown]
# Per-layer trace against the fake-quantized float reference. Squeezing the
# result format exposes saturation (too few integer bits) and coarse steps
# (too few fractional bits).

# %%
qm = models[6]
ref = qm.dequantized()
for name, res in [("<16,6>", FixedFormat(16, 6)), ("<16,0>", FixedFormat(16, 0)), ("<8,6>", FixedFormat(8, 6))]:
    squeezed = type(qm)(qm.config, qm.quant.with_result(res), qm.weight_words, qm.bias_words, qm.scale)
    flags = [(t.layer, t.low_int, t.low_frac) for t in trace_compare(ref, squeezed, angle_grid(128))]
    print(name, flags)

# %% [markdown]
# Export as integer words plus formats, and read it back.

# %%
path = export_weights(qm, Path("demo_out") / "qmodel.json")
print("round trip identical:", import_weights(path).equals(qm))
