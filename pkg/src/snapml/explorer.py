"""Random architecture search and Pareto-front extraction over (size, infidelity)."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import Dataset, _atomic_write, target_scale
from .dynamics import DEFAULT_CONFIG, PropagationConfig
from .networks import MlpConfig, MlpModel, TrainOptions, evaluate, mse, train_mse

__all__ = ["DsePoint", "random_configs", "pareto_front", "run_dse", "save_results", "load_results"]

STAGES = ("trained", "finetuned", "distilled")
RESULT_COLUMNS = ["name", "layer_widths", "params", "test_mse", "mean_infidelity", "max_infidelity", "stage"]


@dataclass(frozen=True)
class DsePoint:
    name: str
    config: MlpConfig | str
    params: int
    test_mse: float = float("nan")
    mean_infidelity: float = float("nan")
    max_infidelity: float = float("nan")
    stage: str = "trained"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if isinstance(self.config, MlpConfig) and self.params != self.config.n_params:
            raise ValueError(f"{self.name}: params {self.params} != {self.config.n_params} from its config")

    @classmethod
    def from_config(cls, config: MlpConfig, **kw) -> "DsePoint":
        return cls(name=kw.pop("name", f"mlp_{config.n_params}"), config=config, params=config.n_params, **kw)


def random_configs(n: int, seed: int = 0, depth_range=(2, 10), width_range=(4, 64)) -> list[MlpConfig]:
    """``n`` MLP configs with uniform depth and log-uniform hidden widths."""
    lo_d, hi_d = depth_range
    lo_w, hi_w = width_range
    if n < 0 or not (1 <= lo_d <= hi_d) or not (1 <= lo_w <= hi_w):
        raise ValueError("invalid count or ranges")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        depth = int(rng.integers(lo_d, hi_d + 1))
        # round in log space then clip so the bounds stay attainable
        w = np.exp(rng.uniform(math.log(lo_w), math.log(hi_w + 1), depth))
        widths = np.clip(np.floor(w), lo_w, hi_w).astype(int)
        out.append(MlpConfig.from_hidden(tuple(int(x) for x in widths)))
    return out


def pareto_front(points: list[DsePoint], objective: str = "mean_infidelity") -> list[DsePoint]:
    """Points not dominated in ``(params, objective)``, both minimized, sorted by size.

    A point is dominated when another is no worse in both objectives and
    strictly better in at least one; exact duplicates are all kept.
    """
    if not points:
        raise ValueError("need at least one point")
    order = sorted(range(len(points)), key=lambda i: (points[i].params, getattr(points[i], objective)))
    front = []
    best = math.inf  # lowest objective among strictly smaller models
    group: list[int] = []

    def flush():
        nonlocal best
        if not group:
            return
        vals = [getattr(points[i], objective) for i in group]
        low = min(vals)
        if low < best:
            front.extend(points[i] for i, v in zip(group, vals) if v == low)
            best = low

    for i in order:
        if group and points[i].params != points[group[0]].params:
            flush()
            group = []
        group.append(i)
    flush()
    return front


def config_key(config: MlpConfig) -> str:
    return hashlib.sha1(json.dumps(list(config.layer_widths)).encode()).hexdigest()[:12]


def _train_one(args):
    config, train, val, test, opts, sys, level, grid, cfg = args
    model = MlpModel(config, scale=target_scale(train), seed=opts.seed)
    best, _ = train_mse(model, train, val, opts)
    mean = mx = float("nan")
    if sys is not None:
        mean, mx, _ = evaluate(best, sys, level, grid, cfg)
    return DsePoint.from_config(config, test_mse=mse(best, test), mean_infidelity=mean, max_infidelity=mx)


def run_dse(configs: list[MlpConfig], train: Dataset, val: Dataset, test: Dataset,
            opts: TrainOptions = TrainOptions(), sys=None, level: int = 2, grid: int = 256,
            cfg: PropagationConfig = DEFAULT_CONFIG, jobs: int = 1) -> list[DsePoint]:
    """Train every config with the same options and collect one point per config.

    Trainings are independent; with ``jobs > 1`` they run in worker processes
    and the results are returned in config order, so the output does not
    depend on scheduling.
    """
    tasks = [(c, train, val, test, opts, sys, level, grid, cfg) for c in configs]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            points = list(pool.map(_train_one, tasks))
    else:
        points = [_train_one(t) for t in tasks]
    # distinct names even when two configs share a parameter count
    seen: dict[str, int] = {}
    out = []
    for c, p in zip(configs, points):
        k = seen.get(p.name, 0)
        seen[p.name] = k + 1
        name = p.name if k == 0 else f"{p.name}_{config_key(c)}"
        out.append(DsePoint(name, c, p.params, p.test_mse, p.mean_infidelity, p.max_infidelity, p.stage))
    return out


def save_results(points: list[DsePoint], path) -> Path:
    """Comma-separated results table; widths are ``-``-joined."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for p in points:
        widths = "-".join(map(str, p.config.layer_widths)) if isinstance(p.config, MlpConfig) else p.config
        w.writerow([p.name, widths, p.params, repr(p.test_mse), repr(p.mean_infidelity),
                    repr(p.max_infidelity), p.stage])
    path = Path(path)
    _atomic_write(path, buf.getvalue())
    return path


def load_results(path) -> list[DsePoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and list(rows[0].keys()) != RESULT_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {list(rows[0].keys())}")
    out = []
    for r in rows:
        widths = r["layer_widths"]
        try:
            config = MlpConfig(tuple(int(x) for x in widths.split("-")))
        except ValueError:
            config = widths
        out.append(DsePoint(r["name"], config, int(r["params"]), float(r["test_mse"]),
                            float(r["mean_infidelity"]), float(r["max_infidelity"]), r["stage"]))
    return out
