"""Fixed-point formats, quantization-aware training and a bit-accurate integer emulator.

A format ``<W, I>`` has ``W`` total bits of which ``I`` are integer bits; for
signed formats the sign bit is counted separately, so the fractional width is
``W - I - 1`` and the range is ``[-2**I, 2**I - 2**-frac]``. Rounding is
round-half-to-even and every stored value saturates at its format's range.

Integer inference keeps full-width accumulators and only rounds when a layer
result is written into its result format, then again when the ReLU output is
written into the activation format.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Dataset
from .networks import MlpConfig, MlpModel, TrainOptions, train_mse

__all__ = [
    "FixedFormat",
    "QuantConfig",
    "QuantizedModel",
    "FakeQuant",
    "quantize_value",
    "qat_train",
    "quantize_model",
    "quantized_forward",
    "quantized_layer_results",
    "trace_compare",
    "resource_estimate",
    "export_weights",
    "import_weights",
]


@dataclass(frozen=True)
class FixedFormat:
    total_bits: int
    int_bits: int
    signed: bool = True

    def __post_init__(self):
        if self.total_bits < 1:
            raise ValueError("total_bits must be >= 1")
        if self.signed and self.int_bits >= self.total_bits:
            raise ValueError("int_bits must be smaller than total_bits for signed formats")
        if not self.signed and self.int_bits > self.total_bits:
            raise ValueError("int_bits cannot exceed total_bits")

    @property
    def frac_bits(self) -> int:
        return self.total_bits - self.int_bits - int(self.signed)

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def word_min(self) -> int:
        return -(1 << (self.total_bits - 1)) if self.signed else 0

    @property
    def word_max(self) -> int:
        return (1 << (self.total_bits - 1)) - 1 if self.signed else (1 << self.total_bits) - 1

    @property
    def min_value(self) -> float:
        return math.ldexp(self.word_min, -self.frac_bits)

    @property
    def max_value(self) -> float:
        return math.ldexp(self.word_max, -self.frac_bits)

    def to_words(self, x) -> np.ndarray:
        """Nearest representable words (ties to even, saturating)."""
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("cannot quantize non-finite values")
        k = np.round(np.ldexp(x, self.frac_bits))
        k = np.clip(k, self.word_min, self.word_max)
        if self.total_bits <= 52:
            return k.astype(np.int64)
        return np.vectorize(int, otypes=[object])(k)

    def from_words(self, k) -> np.ndarray:
        return np.asarray(k, dtype=float) * self.step

    def quantize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("cannot quantize non-finite values")
        k = np.clip(np.round(np.ldexp(x, self.frac_bits)), self.word_min, self.word_max)
        return np.ldexp(k, -self.frac_bits)

    def to_dict(self) -> dict:
        return {"total_bits": self.total_bits, "int_bits": self.int_bits, "signed": self.signed}

    @classmethod
    def from_dict(cls, d: dict) -> "FixedFormat":
        return cls(int(d["total_bits"]), int(d["int_bits"]), bool(d.get("signed", True)))

    def __str__(self) -> str:
        return f"<{self.total_bits},{self.int_bits}>"


def quantize_value(x: float, fmt: FixedFormat) -> float:
    if not math.isfinite(x):
        raise ValueError("cannot quantize a non-finite value")
    return float(fmt.quantize(x))


DEFAULT_RESULT = FixedFormat(16, 6)


@dataclass(frozen=True)
class QuantConfig:
    """Formats for weights, biases, activations, per-layer results and the input."""

    weight: FixedFormat
    bias: FixedFormat
    act: FixedFormat
    result: tuple = (DEFAULT_RESULT,)
    input: FixedFormat = DEFAULT_RESULT

    def __post_init__(self):
        res = self.result
        if isinstance(res, FixedFormat):
            res = (res,)
        object.__setattr__(self, "result", tuple(res))

    @classmethod
    def from_frac_bits(cls, frac: int, result: FixedFormat | tuple = DEFAULT_RESULT,
                       input: FixedFormat = DEFAULT_RESULT) -> "QuantConfig":
        """Signed formats with zero integer bits and ``frac`` fractional bits."""
        fmt = FixedFormat(frac + 1, 0)
        return cls(fmt, fmt, fmt, result, input)

    def result_for(self, layer: int) -> FixedFormat:
        """Result format of ``layer``; a single format applies to every layer."""
        return self.result[layer] if len(self.result) > 1 else self.result[0]

    def with_result(self, result) -> "QuantConfig":
        return QuantConfig(self.weight, self.bias, self.act, result, self.input)

    def to_dict(self) -> dict:
        return {"weight": self.weight.to_dict(), "bias": self.bias.to_dict(), "act": self.act.to_dict(),
                "result": [r.to_dict() for r in self.result], "input": self.input.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        return cls(FixedFormat.from_dict(d["weight"]), FixedFormat.from_dict(d["bias"]),
                   FixedFormat.from_dict(d["act"]), tuple(FixedFormat.from_dict(r) for r in d["result"]),
                   FixedFormat.from_dict(d["input"]))


class FakeQuant:
    """Float emulation of the quantized software model used during training.

    Weights, biases and ReLU outputs are rounded to their formats; gradients
    pass straight through inside the representable range and are zero outside.
    Layer results are left unrounded (result precision belongs to the
    hardware emulator).
    """

    def __init__(self, quant: QuantConfig):
        self.quant = quant

    @staticmethod
    def _ste(x, fmt):
        return fmt.quantize(x), (x >= fmt.min_value) & (x <= fmt.max_value)

    def weight(self, w, layer):
        return self._ste(w, self.quant.weight)

    def bias(self, b, layer):
        return self._ste(b, self.quant.bias)

    def act(self, z, layer):
        fmt = self.quant.act
        r = np.maximum(z, 0.0)
        return fmt.quantize(r), (z > 0) & (z <= fmt.max_value)

    def result(self, z, layer):
        return z


@dataclass
class QuantizedModel:
    """Integer words for every tensor of an MLP plus the formats that give them meaning."""

    config: MlpConfig
    quant: QuantConfig
    weight_words: list
    bias_words: list
    scale: float = 1.0
    history: list = field(default_factory=list, repr=False, compare=False)

    kind = "quantized_mlp"

    def __post_init__(self):
        for w in self.weight_words:
            _check_words(w, self.quant.weight)
        for b in self.bias_words:
            _check_words(b, self.quant.bias)

    @property
    def n_params(self) -> int:
        return sum(np.size(w) + np.size(b) for w, b in zip(self.weight_words, self.bias_words))

    def dequantized(self) -> MlpModel:
        """Float model holding exactly the represented weight values."""
        ws = [self.quant.weight.from_words(w) for w in self.weight_words]
        bs = [self.quant.bias.from_words(b) for b in self.bias_words]
        return MlpModel(self.config, ws, bs, self.scale)

    def forward(self, alpha):
        return quantized_forward(self, alpha)

    def equals(self, other: "QuantizedModel") -> bool:
        return (self.config == other.config and self.quant == other.quant and self.scale == other.scale
                and len(self.weight_words) == len(other.weight_words)
                and all(np.array_equal(a, b) for a, b in zip(self.weight_words, other.weight_words))
                and all(np.array_equal(a, b) for a, b in zip(self.bias_words, other.bias_words)))


def _check_words(words, fmt: FixedFormat) -> None:
    words = np.asarray(words)
    if words.size and (words.min() < fmt.word_min or words.max() > fmt.word_max):
        raise ValueError(f"stored word outside the range of {fmt}")


def quantize_model(model: MlpModel, quant: QuantConfig) -> QuantizedModel:
    """Post-training quantization of a float MLP (no retraining)."""
    return QuantizedModel(model.config, quant,
                          [quant.weight.to_words(w) for w in model.weights],
                          [quant.bias.to_words(b) for b in model.biases], model.scale)


def qat_train(model: MlpModel, quant: QuantConfig, train: Dataset, val: Dataset,
              opts: TrainOptions = TrainOptions()) -> QuantizedModel:
    """Quantization-aware MSE training starting from ``model``'s float weights.

    Passing a freshly initialized model trains quantized from the start, which
    lets the network settle into the format ranges; starting from a trained
    float model is faster but inherits its out-of-range weights and
    activations. The best-validation checkpoint (measured with the fake-quantized forward
    pass) is materialized as integer words.
    """
    best, history = train_mse(model, train, val, opts, quant=FakeQuant(quant))
    qm = quantize_model(best, quant)
    qm.history = history
    return qm


# ---------------------------------------------------------------------------
# integer emulator


def _round_shift(acc: np.ndarray, shift: int) -> np.ndarray:
    """``acc * 2**-shift`` rounded half to even (``shift`` may be negative)."""
    if shift <= 0:
        return acc * (1 << -shift)
    q = acc >> shift
    r = acc - (q << shift)
    half = 1 << (shift - 1)
    up = (r > half) | ((r == half) & ((q & 1) == 1))
    return q + up.astype(q.dtype) if q.dtype != object else q + np.where(up, 1, 0)


def _saturate(words: np.ndarray, fmt: FixedFormat):
    sat = (words < fmt.word_min) | (words > fmt.word_max)
    return np.clip(words, fmt.word_min, fmt.word_max), sat


def _needs_bigint(qm: QuantizedModel) -> bool:
    q = qm.quant
    widths = qm.config.layer_widths
    in_bits = max(q.input.total_bits, q.act.total_bits)
    acc_frac = max(q.act.frac_bits, q.input.frac_bits) + q.weight.frac_bits
    shifts = max(0, q.bias.frac_bits - acc_frac) + max(0, max(r.frac_bits for r in q.result) - acc_frac)
    bits = in_bits + q.weight.total_bits + math.ceil(math.log2(max(widths) + 1)) + shifts + 2
    return bits > 62 or max(r.total_bits for r in q.result) > 62


def quantized_layer_results(qm: QuantizedModel, alpha):
    """Run the integer pipeline and return per-layer result words and saturation masks.

    Returns ``(results, saturated)`` where ``results[i]`` are the words written
    into layer ``i``'s result format (before ReLU).
    """
    q = qm.quant
    big = _needs_bigint(qm)
    x = np.atleast_1d(np.asarray(alpha, dtype=float)).reshape(-1, 1) / np.pi
    a = q.input.to_words(x)
    a_frac = q.input.frac_bits
    if big:
        a = a.astype(object)
    results, saturated = [], []
    n_layers = len(qm.weight_words)
    for i, (w, b) in enumerate(zip(qm.weight_words, qm.bias_words)):
        w = np.asarray(w, dtype=object if big else np.int64)
        b = np.asarray(b, dtype=object if big else np.int64)
        acc_frac = a_frac + q.weight.frac_bits
        frac = max(acc_frac, q.bias.frac_bits)
        acc = (a @ w) * (1 << (frac - acc_frac)) + b * (1 << (frac - q.bias.frac_bits))
        rfmt = q.result_for(i)
        res, sat = _saturate(_round_shift(acc, frac - rfmt.frac_bits), rfmt)
        results.append(res)
        saturated.append(sat)
        if i < n_layers - 1:
            relu = np.maximum(res, 0)
            a, _ = _saturate(_round_shift(relu, rfmt.frac_bits - q.act.frac_bits), q.act)
            a_frac = q.act.frac_bits
    return results, saturated


def quantized_forward(qm: QuantizedModel, alpha):
    """De-normalized output of the integer pipeline, shape 32 or (N, 32)."""
    results, _ = quantized_layer_results(qm, alpha)
    out = qm.quant.result_for(len(results) - 1).from_words(results[-1]) * qm.scale
    return out[0] if np.ndim(alpha) == 0 else out


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class LayerTrace:
    layer: int
    reference: np.ndarray
    quantized: np.ndarray
    slope: float
    residual_rms: float
    saturation_count: int
    low_int: bool
    low_frac: bool


def trace_compare(float_model: MlpModel, qm: QuantizedModel, inputs) -> list[LayerTrace]:
    """Compare every layer's result against the fake-quantized float reference.

    The reference evaluates ``float_model`` with weights, biases and activations
    rounded to ``qm``'s formats but with unrounded layer results. ``low_int`` is
    set when any result saturated; ``low_frac`` when the RMS deviation from the
    reference exceeds one activation quantization step.
    """
    if float_model.config != qm.config:
        raise ValueError("reference and quantized models have different architectures")
    fq = FakeQuant(qm.quant)
    x = np.atleast_1d(np.asarray(inputs, dtype=float)).reshape(-1, 1) / np.pi
    # pre-activation reference results of each layer
    refs = []
    a = x
    n_layers = len(float_model.weights)
    for i, (w, b) in enumerate(zip(float_model.weights, float_model.biases)):
        z = a @ fq.weight(w, i)[0] + fq.bias(b, i)[0]
        refs.append(z)
        if i < n_layers - 1:
            a = fq.act(z, i)[0]
    results, saturated = quantized_layer_results(qm, inputs)
    step = qm.quant.act.step
    out = []
    for i, (ref, words, sat) in enumerate(zip(refs, results, saturated)):
        quant = qm.quant.result_for(i).from_words(words)
        r, qv = ref.ravel(), quant.ravel()
        var = np.var(r)
        slope = float(np.cov(r, qv, bias=True)[0, 1] / var) if var > 0 else float("nan")
        rms = float(np.sqrt(np.mean((qv - r) ** 2)))
        nsat = int(np.sum(sat))
        out.append(LayerTrace(i, ref, quant, slope, rms, nsat, nsat > 0, rms > step))
    return out


def resource_estimate(qm: QuantizedModel) -> tuple[int, int]:
    """Relative LUT/FF cost: multiplier bit-products and registered result bits.

    ``lut = Σ n_in·n_out·weight_bits·input_bits``, ``ff = Σ n_out·result_bits``.
    Only useful for comparing configurations against each other.
    """
    q = qm.quant
    lut = ff = 0
    for i, w in enumerate(qm.weight_words):
        n_in, n_out = np.shape(w)
        in_bits = q.input.total_bits if i == 0 else q.act.total_bits
        lut += n_in * n_out * q.weight.total_bits * in_bits
        ff += n_out * q.result_for(i).total_bits
    return lut, ff


def export_weights(qm: QuantizedModel, path) -> Path:
    """Write integer words, formats and dimensions as JSON."""
    q = qm.quant
    layers = []
    for i, (w, b) in enumerate(zip(qm.weight_words, qm.bias_words)):
        layers.append({
            "index": i,
            "n_in": int(np.shape(w)[0]),
            "n_out": int(np.shape(w)[1]),
            "weight_format": q.weight.to_dict(),
            "bias_format": q.bias.to_dict(),
            "result_format": q.result_for(i).to_dict(),
            "activation_format": q.act.to_dict() if i < len(qm.weight_words) - 1 else None,
            "weights": [[int(v) for v in row] for row in np.asarray(w)],
            "biases": [int(v) for v in np.asarray(b)],
        })
    doc = {
        "kind": qm.kind,
        "layer_widths": list(qm.config.layer_widths),
        "scale": qm.scale,
        "quant": q.to_dict(),
        "layers": layers,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1))
    tmp.replace(path)
    return path


def import_weights(path) -> QuantizedModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != QuantizedModel.kind:
        raise ValueError(f"{path}: not a quantized model export")
    quant = QuantConfig.from_dict(doc["quant"])
    big = max(quant.weight.total_bits, quant.bias.total_bits) > 62
    dtype = object if big else np.int64
    ws = [np.array(layer["weights"], dtype=dtype).reshape(layer["n_in"], layer["n_out"]) for layer in doc["layers"]]
    bs = [np.array(layer["biases"], dtype=dtype) for layer in doc["layers"]]
    return QuantizedModel(MlpConfig(tuple(doc["layer_widths"])), quant, ws, bs, doc["scale"])
