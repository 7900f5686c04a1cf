import numpy as np
import pytest
from hypothesis import given, strategies as st

from snapml.datasets import Dataset, angle_grid, split
from snapml.explorer import DsePoint, load_results, pareto_front, random_configs, run_dse, save_results
from snapml.networks import REFERENCE_WIDTHS, MlpConfig, TrainOptions

from oracles import brute_front


def pt(name, params, inf, **kw):
    return DsePoint(name, "fixture", params, mean_infidelity=inf, **kw)


def test_pareto_examples():
    one = pt("a", 10, 0.1)
    assert pareto_front([one]) == [one]
    pts = [pt("a", 100, 0.05), pt("b", 200, 0.01), pt("c", 300, 0.02)]
    assert [p.name for p in pareto_front(pts)] == ["a", "b"]
    with pytest.raises(ValueError):
        pareto_front([])


def test_pareto_reference_rows():
    mlp_514 = pt("mlp_514", 514, 0.014049)
    mlp_1022 = pt("mlp_1022", 1022, 0.035468)
    front = pareto_front([mlp_1022, mlp_514])
    assert mlp_514 in front and mlp_1022 not in front


def test_pareto_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    # coarse values so that ties in both coordinates actually occur
    pts = [pt(f"p{i}", int(rng.integers(10, 60)), float(rng.integers(0, 40)) / 40) for i in range(1000)]
    front = pareto_front(pts)
    expect = brute_front(pts)
    assert sorted(p.name for p in front) == sorted(p.name for p in expect)
    assert [p.params for p in front] == sorted(p.params for p in front)
    for p in pts:
        if p not in front:
            assert any(q.params <= p.params and q.mean_infidelity <= p.mean_infidelity for q in front)


@given(st.lists(st.tuples(st.integers(1, 30), st.integers(0, 10)), min_size=1, max_size=60))
def test_pareto_property(pairs):
    pts = [pt(f"p{i}", n, v / 10) for i, (n, v) in enumerate(pairs)]
    assert sorted(p.name for p in pareto_front(pts)) == sorted(p.name for p in brute_front(pts))


def test_pareto_other_objective():
    pts = [DsePoint("a", "x", 10, max_infidelity=0.5, mean_infidelity=0.1),
           DsePoint("b", "x", 20, max_infidelity=0.2, mean_infidelity=0.3)]
    assert [p.name for p in pareto_front(pts, "max_infidelity")] == ["a", "b"]
    assert [p.name for p in pareto_front(pts)] == ["a"]


def test_random_configs_contract():
    cfgs = random_configs(100, seed=3)
    assert len(cfgs) == 100
    assert cfgs == random_configs(100, seed=3)
    assert cfgs != random_configs(100, seed=4)
    for c in cfgs:
        assert c.layer_widths[0] == 1 and c.layer_widths[-1] == 32
        assert 2 <= len(c.hidden) <= 10
        assert all(4 <= w <= 64 for w in c.hidden)
    narrow = random_configs(200, seed=1, depth_range=(1, 1), width_range=(5, 6))
    assert {c.hidden for c in narrow} == {(5,), (6,)}
    with pytest.raises(ValueError):
        random_configs(3, depth_range=(3, 2))


def test_parameter_counts():
    assert MlpConfig(REFERENCE_WIDTHS).n_params == 1608
    for h in (1, 7, 64):
        assert MlpConfig((1, h, 32)).n_params == 1 * h + h + h * 32 + 32


def test_point_params_checked():
    with pytest.raises(ValueError):
        DsePoint("x", MlpConfig((1, 4, 32)), 99)
    with pytest.raises(ValueError):
        DsePoint("x", "fixture", 1, stage="unknown")
    p = DsePoint.from_config(MlpConfig((1, 4, 32)))
    assert p.name == "mlp_168" and p.params == 168


def _data():
    a = angle_grid(60)
    theta = 0.1 * np.cos(np.outer(a, np.linspace(0.1, 1, 32)))
    return split(Dataset(a, theta, np.zeros(60)), (0.6, 0.2, 0.2), seed=0)


def test_run_dse_and_results_round_trip(tmp_path):
    train, val, test = _data()
    cfgs = [MlpConfig((1, 4, 32)), MlpConfig((1, 3, 2, 32)), MlpConfig((1, 4, 32))]
    opts = TrainOptions(epochs=3, batch_size=16)
    pts = run_dse(cfgs, train, val, test, opts)
    assert [p.params for p in pts] == [c.n_params for c in cfgs]
    assert len({p.name for p in pts}) == 3
    assert pts[0].test_mse == pts[2].test_mse  # same config, same seed
    assert all(np.isnan(p.mean_infidelity) for p in pts)
    # NaN fields defeat ==, so compare the printed form
    key = lambda ps: [repr(p) for p in ps]
    assert key(run_dse(cfgs, train, val, test, opts, jobs=2)) == key(pts)
    back = load_results(save_results(pts, tmp_path / "dse.csv"))
    assert key(back) == key(pts)
