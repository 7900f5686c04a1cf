import numpy as np
import pytest
from hypothesis import given, strategies as st

from snapml.datasets import Dataset, angle_grid
from snapml.fixedpoint import (
    DEFAULT_RESULT, FakeQuant, FixedFormat, QuantConfig, QuantizedModel, export_weights, import_weights,
    qat_train, quantize_model, quantize_value, quantized_forward, quantized_layer_results,
    resource_estimate, trace_compare,
)
from snapml.networks import MlpConfig, MlpModel, TrainOptions, mse

from oracles import oracle_forward_words


def random_qm(widths, quant, seed=0):
    rng = np.random.default_rng(seed)

    def words(fmt, shape):
        if fmt.total_bits <= 62:
            return rng.integers(fmt.word_min, fmt.word_max + 1, shape)
        # wider than int64: exact Python integers spanning the full range
        span = fmt.word_max - fmt.word_min
        flat = [fmt.word_min + int.from_bytes(rng.bytes(16), "little") % (span + 1) for _ in range(int(np.prod(shape)))]
        return np.array(flat, dtype=object).reshape(shape)

    ws = [words(quant.weight, (a, b)) for a, b in zip(widths[:-1], widths[1:])]
    bs = [words(quant.bias, (b,)) for b in widths[1:]]
    return QuantizedModel(MlpConfig(widths), quant, ws, bs, scale=0.2)


def bounded_model(widths=(1, 16, 16, 32), seed=0, lim=0.9):
    m = MlpModel(MlpConfig(widths), scale=0.2, seed=seed)
    m.weights = [np.clip(w, -lim, lim) for w in m.weights]
    rng = np.random.default_rng(seed + 100)
    m.biases = [rng.uniform(-0.3, 0.3, b.shape) for b in m.biases]
    return m


# ---------------------------------------------------------------------------
# formats and scalar quantization


def test_quantize_value_examples():
    f4 = FixedFormat(5, 0)
    assert f4.frac_bits == 4 and f4.min_value == -1.0 and f4.max_value == 0.9375
    assert quantize_value(0.3125, f4) == 0.3125
    assert quantize_value(0.33, f4) == 0.3125
    assert quantize_value(1.5, f4) == 0.9375
    assert quantize_value(-7.0, f4) == -1.0
    # ties go to the even word
    assert quantize_value(0.03125, f4) == 0.0
    assert quantize_value(0.09375, f4) == 0.125
    with pytest.raises(ValueError):
        quantize_value(float("nan"), f4)
    with pytest.raises(ValueError):
        quantize_value(float("inf"), f4)


def test_format_validation_and_range():
    assert DEFAULT_RESULT.frac_bits == 9 and DEFAULT_RESULT.min_value == -64.0
    with pytest.raises(ValueError):
        FixedFormat(0, 0)
    with pytest.raises(ValueError):
        FixedFormat(4, 4)
    u = FixedFormat(4, 1, signed=False)
    assert (u.word_min, u.word_max, u.frac_bits) == (0, 15, 3)
    assert FixedFormat.from_dict(u.to_dict()) == u


@given(st.floats(-4, 4, allow_nan=False), st.integers(1, 12), st.integers(0, 3))
def test_quantize_idempotent_and_bounded(x, frac, ib):
    fmt = FixedFormat(frac + ib + 1, ib)
    q = quantize_value(x, fmt)
    assert quantize_value(q, fmt) == q
    assert fmt.min_value <= q <= fmt.max_value
    if fmt.min_value <= x <= fmt.max_value:
        assert abs(x - q) <= 2.0 ** (-frac - 1)


@given(st.lists(st.floats(-2, 2, allow_nan=False), min_size=1, max_size=20), st.integers(1, 10))
def test_words_round_trip(xs, frac):
    fmt = FixedFormat(frac + 2, 1)
    k = fmt.to_words(xs)
    assert np.array_equal(fmt.from_words(k), fmt.quantize(xs))
    assert k.min() >= fmt.word_min and k.max() <= fmt.word_max


def test_quant_config_defaults():
    q = QuantConfig.from_frac_bits(6)
    assert q.weight == q.bias == q.act == FixedFormat(7, 0)
    assert q.result_for(0) == q.result_for(3) == FixedFormat(16, 6)
    q2 = q.with_result((FixedFormat(16, 6), FixedFormat(20, 4)))
    assert q2.result_for(1) == FixedFormat(20, 4)
    assert QuantConfig.from_dict(q2.to_dict()) == q2


def test_stored_words_must_fit():
    q = QuantConfig.from_frac_bits(3)
    with pytest.raises(ValueError):
        QuantizedModel(MlpConfig((1, 2, 32)), q, [np.full((1, 2), 8), np.zeros((2, 32), int)],
                       [np.zeros(2, int), np.zeros(32, int)])


# ---------------------------------------------------------------------------
# integer inference


@pytest.mark.parametrize("quant", [
    QuantConfig.from_frac_bits(6),
    QuantConfig.from_frac_bits(3, result=FixedFormat(10, 2)),
    QuantConfig(FixedFormat(12, 2), FixedFormat(9, 1), FixedFormat(8, 3),
                (FixedFormat(14, 4), FixedFormat(11, 5), FixedFormat(18, 1)), FixedFormat(20, 1)),
], ids=["frac6", "narrow-result", "mixed"])
def test_quantized_forward_matches_bigint_oracle(quant):
    qm = random_qm((1, 12, 10, 32), quant, seed=3)
    alphas = np.random.default_rng(7).uniform(-np.pi, np.pi, 1000)
    results, _ = quantized_layer_results(qm, alphas)
    for n, a in enumerate(alphas):
        expect = oracle_forward_words(qm, a)
        for layer, words in enumerate(expect):
            assert [int(v) for v in results[layer][n]] == words, (n, layer)


def test_wide_formats_use_exact_integers():
    quant = QuantConfig(FixedFormat(40, 2), FixedFormat(40, 2), FixedFormat(40, 2), FixedFormat(70, 8))
    qm = random_qm((1, 6, 32), quant, seed=5)
    alphas = np.random.default_rng(2).uniform(-np.pi, np.pi, 20)
    results, _ = quantized_layer_results(qm, alphas)
    for n, a in enumerate(alphas):
        assert [[int(v) for v in r[n]] for r in results] == oracle_forward_words(qm, a)


def test_result_precision_headroom():
    m = bounded_model()
    q = QuantConfig(FixedFormat(24, 0), FixedFormat(24, 0), FixedFormat(24, 4), FixedFormat(32, 8))
    qm = quantize_model(m, q)
    grid = angle_grid(256)
    assert np.max(np.abs(quantized_forward(qm, grid) - m.forward(grid))) <= 1e-3
    assert quantized_forward(qm, 0.3).shape == (32,)


def test_fake_quant_matches_integer_pipeline_with_fine_results():
    m = bounded_model(seed=4)
    q = QuantConfig.from_frac_bits(5, result=FixedFormat(40, 8))
    qm = quantize_model(m, q)
    x = (angle_grid(64) / np.pi)[:, None]
    ref = qm.dequantized().forward_norm(x, FakeQuant(q))[0] * qm.scale
    # only result rounding (2^-31) separates the two
    assert np.max(np.abs(quantized_forward(qm, angle_grid(64)) - ref)) < 1e-6


# ---------------------------------------------------------------------------
# trace comparison


def test_trace_huge_precision_is_one_to_one():
    m = bounded_model()
    fine = FixedFormat(40, 4)
    qm = quantize_model(m, QuantConfig(fine, fine, fine, FixedFormat(60, 8), FixedFormat(40, 2)))
    for t in trace_compare(m, qm, angle_grid(128)):
        assert abs(t.slope - 1.0) <= 1e-6
        assert t.residual_rms < 1e-9
        assert t.saturation_count == 0 and not t.low_int and not t.low_frac


def test_trace_flags_low_integer_bits():
    m = bounded_model(widths=(1, 4, 32))
    m.weights[0] = np.array([[3.0, -3.0, 2.5, 1.0]])
    m.biases[0] = np.zeros(4)
    wide = FixedFormat(16, 3)
    q = QuantConfig(wide, wide, FixedFormat(12, 3), (FixedFormat(16, 1), FixedFormat(16, 6)))
    traces = trace_compare(m, quantize_model(m, q), angle_grid(128))
    assert traces[0].low_int and traces[0].saturation_count > 0
    assert not traces[1].low_int


def test_trace_flags_low_fraction_bits():
    m = bounded_model()
    q = QuantConfig.from_frac_bits(8, result=FixedFormat(8, 6))
    traces = trace_compare(m, quantize_model(m, q), angle_grid(128))
    assert any(t.low_frac for t in traces)
    assert not any(t.low_int for t in traces)
    fine = trace_compare(m, quantize_model(m, QuantConfig.from_frac_bits(8)), angle_grid(128))
    assert not any(t.low_frac for t in fine)


def test_trace_rejects_other_architecture():
    qm = quantize_model(bounded_model(), QuantConfig.from_frac_bits(6))
    with pytest.raises(ValueError):
        trace_compare(bounded_model(widths=(1, 8, 32)), qm, [0.1])


# ---------------------------------------------------------------------------
# resource model


def test_resource_examples():
    m = bounded_model()
    empty = QuantizedModel(m.config, QuantConfig.from_frac_bits(4), [], [])
    assert resource_estimate(empty) == (0, 0)
    lut4, _ = resource_estimate(quantize_model(m, QuantConfig.from_frac_bits(4)))
    lut7, _ = resource_estimate(quantize_model(m, QuantConfig.from_frac_bits(7)))
    assert lut4 < lut7
    q = QuantConfig.from_frac_bits(6)
    small = resource_estimate(quantize_model(bounded_model(widths=(1, 8, 32)), q))
    big = resource_estimate(quantize_model(bounded_model(widths=(1, 16, 32)), q))
    # both layers touch the doubled width: every multiplier count doubles
    assert big[0] == 2 * small[0]
    assert big[1] - small[1] == 8 * q.result_for(0).total_bits


@given(st.integers(1, 8), st.integers(1, 8), st.integers(8, 24), st.sampled_from(["weight", "act", "result", "input"]))
def test_resource_monotone_in_bits(frac, extra, rbits, which):
    m = bounded_model(widths=(1, 5, 32))
    base = QuantConfig.from_frac_bits(frac, result=FixedFormat(rbits, 4))
    kw = base.to_dict()
    grown = dict(kw)
    if which == "result":
        grown["result"] = [{"total_bits": rbits + extra, "int_bits": 4, "signed": True}]
    else:
        f = dict(kw[which])
        f["total_bits"] += extra
        grown[which] = f
    a = resource_estimate(quantize_model(m, base))
    b = resource_estimate(quantize_model(m, QuantConfig.from_dict(grown)))
    assert b[0] >= a[0] and b[1] >= a[1] and b != a


# ---------------------------------------------------------------------------
# export


@pytest.mark.parametrize("quant", [QuantConfig.from_frac_bits(4),
                                   QuantConfig(FixedFormat(70, 2), FixedFormat(70, 2), FixedFormat(20, 2))])
def test_export_round_trip(tmp_path, quant):
    qm = random_qm((1, 7, 5, 32), quant, seed=11)
    path = export_weights(qm, tmp_path / "w" / "model.json")
    back = import_weights(path)
    assert back.equals(qm)
    alphas = np.linspace(-3, 3, 9)
    assert np.array_equal(quantized_forward(back, alphas), quantized_forward(qm, alphas))


def test_export_schema(tmp_path):
    import json
    qm = quantize_model(bounded_model(), QuantConfig.from_frac_bits(5))
    doc = json.loads(export_weights(qm, tmp_path / "m.json").read_text())
    assert doc["kind"] == "quantized_mlp" and doc["scale"] == qm.scale
    assert doc["layer_widths"] == list(qm.config.layer_widths)
    for layer in doc["layers"]:
        for key in ("weight_format", "bias_format", "result_format"):
            assert {"total_bits", "int_bits"} <= set(layer[key])
        wf, bf = FixedFormat.from_dict(layer["weight_format"]), FixedFormat.from_dict(layer["bias_format"])
        w = np.array(layer["weights"])
        assert w.shape == (layer["n_in"], layer["n_out"])
        assert wf.word_min <= w.min() and w.max() <= wf.word_max
        assert all(bf.word_min <= v <= bf.word_max for v in layer["biases"])
    with pytest.raises(ValueError):
        (tmp_path / "bad.json").write_text(json.dumps({"kind": "mlp"}))
        import_weights(tmp_path / "bad.json")


# ---------------------------------------------------------------------------
# quantization-aware training


def _smooth_data(n, seed):
    a = angle_grid(n)
    theta = 0.15 * np.sin(np.outer(a, np.linspace(0.2, 1.0, 32)))
    theta += 0.001 * np.random.default_rng(seed).normal(size=theta.shape)
    return Dataset(a, theta, np.zeros(n))


def test_qat_returns_representable_checkpoint():
    train, val = _smooth_data(120, 0), _smooth_data(40, 1)
    m = MlpModel(MlpConfig((1, 8, 32)), scale=0.2, seed=0)
    q = QuantConfig.from_frac_bits(6)
    qm = qat_train(m, q, train, val, TrainOptions(epochs=30, batch_size=16, lr_start=3e-3))
    assert len(qm.history) == 30
    deq = qm.dequantized()
    for w in deq.weights:
        assert np.array_equal(q.weight.quantize(w), w)
    best = min(h["val_loss"] for h in qm.history)
    assert mse(deq, val, FakeQuant(q)) == pytest.approx(best, rel=1e-9, abs=1e-15)


def test_ste_masks_out_of_range():
    q = QuantConfig.from_frac_bits(3)
    fq = FakeQuant(q)
    w = np.array([-1.5, -0.2, 0.5, 0.95])
    vals, mask = fq.weight(w, 0)
    assert list(mask) == [False, True, True, False]
    assert np.all(np.abs(vals) <= 1.0)
    z = np.array([-0.5, 0.3, 2.0])
    vals, mask = fq.act(z, 0)
    assert list(vals) == [0.0, 0.25, 0.875] and list(mask) == [False, True, False]
