"""Command-line driver for the pulse-generation, training and quantization pipeline.

Every subcommand writes its outputs into ``--out`` together with a
``manifest.json`` recording the effective configuration, seeds, inputs and
outputs. Configuration precedence is flags > ``--config`` JSON file > defaults.

Exit status: 0 on success, 1 on runtime errors (missing input, bad file), 2 on
usage errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import datasets as dsm
from .control import OptimizeOptions, generate_dataset
from .datasets import DatasetFormatError, _atomic_write
from .dynamics import PropagationConfig
from .explorer import pareto_front, random_configs, run_dse, save_results, load_results
from .fixedpoint import (FixedFormat, QuantConfig, QuantizedModel, export_weights, import_weights,
                         qat_train, quantize_model, trace_compare)
from .networks import (REFERENCE_WIDTHS, FinetuneOptions, MlpConfig, MlpModel, MoeModel, MrModel,
                       TrainOptions, distill, evaluate, finetune_infidelity, load_model, mse, save_model,
                       train_mr, train_mse)
from .operators import SystemSpec

logger = logging.getLogger("snapml")

COMMANDS = ("generate", "preprocess", "train", "finetune", "moe", "mr", "distill", "dse",
            "quantize", "trace", "evaluate", "export", "plot")


class CliError(Exception):
    """Runtime failure reported with exit status 1."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    started: str = ""
    finished: str = ""
    version: str = __version__

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        self.outputs = sorted(set(self.outputs) | {str(path)})
        _atomic_write(path, json.dumps(asdict(self), indent=2, sort_keys=True, default=str))
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# ---------------------------------------------------------------------------
# helpers


def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise CliError(f"input not found: {path}")
    return path


def _dataset_path(path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.csv"
    return _need(path)


def _load_dataset(path, run) -> dsm.Dataset:
    p = _dataset_path(path)
    run.inputs.append(str(p))
    return dsm.load(p)


def _load_splits(path, seed: int, run):
    """Train/val/test from a preprocess directory, or a fresh split of one dataset."""
    path = _need(path)
    if path.is_dir() and (path / "train.csv").exists():
        parts = []
        for name in ("train", "val", "test"):
            p = _need(path / f"{name}.csv")
            run.inputs.append(str(p))
            parts.append(dsm.load(p))
        return tuple(parts)
    return dsm.split(_load_dataset(path, run), seed=seed)


def _load_any_model(path, run):
    path = _need(path)
    run.inputs.append(str(path))
    kind = json.loads(path.read_text()).get("kind")
    return import_weights(path) if kind == QuantizedModel.kind else load_model(path)


def _widths(text: str | None, default=REFERENCE_WIDTHS) -> MlpConfig:
    if not text:
        return MlpConfig(tuple(default))
    parts = [int(x) for x in text.replace(",", "-").split("-") if x]
    return MlpConfig(tuple(parts)) if parts[0] == 1 and parts[-1] == 32 else MlpConfig.from_hidden(parts)


def _scale(ds: dsm.Dataset) -> float:
    """Normalization recorded by ``preprocess``, else computed from ``ds``."""
    return float(ds.meta.get("scale") or dsm.target_scale(ds))


def _fmt(text: str) -> FixedFormat:
    w, i = (int(x) for x in text.split(","))
    return FixedFormat(w, i)


def _system(args) -> SystemSpec:
    return SystemSpec(d=args.d)


def _prop(args) -> PropagationConfig:
    return PropagationConfig(steps=args.steps)


def _train_opts(args) -> TrainOptions:
    return TrainOptions(epochs=args.epochs, batch_size=args.batch_size, lr_start=args.lr_start,
                        lr_end=args.lr_end, seed=args.seed)


def _write_table(path: Path, header: list, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    _atomic_write(path, buf.getvalue())
    return path


def _save_model(model, out: Path, run, name: str = "model.json") -> Path:
    p = save_model(model, out / name)
    run.outputs.append(str(p))
    return p


def _history_table(history: list, out: Path, run, name: str = "history.csv") -> None:
    if not history:
        return
    keys = list(history[0].keys())
    run.outputs.append(str(_write_table(out / name, keys, ([h.get(k) for k in keys] for h in history))))


def _profile(model, args, out: Path, run, name: str = "profile.csv"):
    mean, mx, (alphas, prof) = evaluate(model, _system(args), args.level, args.grid, _prop(args))
    run.outputs.append(str(_write_table(out / name, ["alpha", "infidelity"], zip(alphas, prof))))
    return mean, mx


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args, run):
    opts = OptimizeOptions(target_infidelity=args.target, max_iters=args.max_iters, restarts=args.restarts,
                           seed=args.seed)
    ds = generate_dataset(_system(args), args.angles, args.level, opts, _prop(args))
    ds.meta["seed"] = args.seed
    p = dsm.save(ds, args.out / "dataset.csv")
    run.outputs += [str(p), str(p.with_name("dataset.meta.json"))]
    print(f"records={len(ds)} converged={sum(ds.meta['converged'])} "
          f"frac<=1e-3={np.mean(ds.infidelity <= 1e-3):.3f}")


def cmd_preprocess(args, run):
    ds = _load_dataset(args.data, run)
    ds = dsm.filter_by_infidelity(ds, args.threshold)
    if len(ds) == 0:
        raise CliError(f"no records left after filtering at {args.threshold:g}")
    ds = dsm.smooth(ds, args.window, _system(args), args.level, _prop(args))
    parts = dsm.split(ds, tuple(args.fractions), args.seed)
    # targets are normalized by the largest magnitude in the training split
    for part in (ds, *parts):
        part.meta["scale"] = dsm.target_scale(parts[0])
        part.meta["split_seed"] = args.seed
    outputs = [dsm.save(ds, args.out / "dataset.csv")]
    for name, part in zip(("train", "val", "test"), parts):
        outputs.append(dsm.save(part, args.out / f"{name}.csv"))
    for p in outputs:
        run.outputs += [str(p), str(p.with_name(p.stem + ".meta.json"))]
    print(f"records={len(ds)} smoothed_mean_infidelity={np.nanmean(ds.infidelity):.3e}")


def cmd_train(args, run):
    train, val, test = _load_splits(args.data, args.seed, run)
    model = MlpModel(_widths(args.widths), scale=_scale(train), seed=args.seed)
    best, history = train_mse(model, train, val, _train_opts(args))
    _save_model(best, args.out, run)
    _history_table(history, args.out, run)
    print(f"params={best.n_params} val_mse={mse(best, val):.3e} test_mse={mse(best, test):.3e}")


def cmd_finetune(args, run):
    model = _load_any_model(args.model, run)
    opts = FinetuneOptions(rounds=args.rounds, eval_grid=args.grid, seed=args.seed)
    best, history = finetune_infidelity(model, _system(args), args.level, opts, _prop(args))
    _save_model(best, args.out, run)
    _history_table(history, args.out, run)
    print(f"before={history[0]['mean']:.3e} after={min(h['mean'] for h in history):.3e}")


def cmd_moe(args, run):
    train, val, test = _load_splits(args.data, args.seed, run)
    gate = tuple(int(x) for x in args.gate.split(",")) if args.gate else None
    model = MoeModel.build(_widths(args.widths), args.experts, gate, _scale(train), args.seed)
    best, history = train_mse(model, train, val, _train_opts(args))
    if args.rounds:
        best, _ = finetune_infidelity(best, _system(args), args.level,
                                      FinetuneOptions(rounds=args.rounds, eval_grid=args.grid, seed=args.seed),
                                      _prop(args))
    _save_model(best, args.out, run)
    _history_table(history, args.out, run)
    print(f"params={best.n_params} test_mse={mse(best, test):.3e}")


def cmd_mr(args, run):
    train, val, test = _load_splits(args.data, args.seed, run)
    model = MrModel.build(_widths(args.widths), scale=_scale(train), seed=args.seed)
    best, _ = train_mr(model, train, val, _train_opts(args))
    _save_model(best, args.out, run)
    print(f"params={best.n_params} test_mse={mse(best, test):.3e}")


def cmd_distill(args, run):
    teacher = _load_any_model(args.model, run)
    ds = distill(teacher, args.n, _system(args) if args.recompute else None, args.level, _prop(args))
    p = dsm.save(ds, args.out / "dataset.csv")
    run.outputs += [str(p), str(p.with_name("dataset.meta.json"))]
    print(f"records={len(ds)}")


def cmd_dse(args, run):
    train, val, test = _load_splits(args.data, args.seed, run)
    configs = random_configs(args.configs, args.seed, tuple(args.depth), tuple(args.width))
    sysm = _system(args) if args.evaluate else None
    points = run_dse(configs, train, val, test, _train_opts(args), sysm, args.level, args.grid,
                     _prop(args), jobs=args.jobs)
    run.outputs.append(str(save_results(points, args.out / "results.csv")))
    if args.evaluate:
        front = pareto_front(points)
    else:
        front = pareto_front(points, "test_mse")
    run.outputs.append(str(save_results(front, args.out / "pareto.csv")))
    print(f"configs={len(points)} pareto={len(front)}")


def _quant_config(args) -> QuantConfig:
    return QuantConfig.from_frac_bits(args.frac_bits, _fmt(args.result), _fmt(args.input))


def cmd_quantize(args, run):
    train, val, test = _load_splits(args.data, args.seed, run)
    if args.model:
        model = _load_any_model(args.model, run)
        if not isinstance(model, MlpModel):
            raise CliError("quantize expects a single MLP model")
    else:
        # quantized training from a fresh initialization
        model = MlpModel(_widths(args.widths), scale=_scale(train), seed=args.seed)
    qm = qat_train(model, _quant_config(args), train, val, _train_opts(args))
    run.outputs.append(str(export_weights(qm, args.out / "qmodel.json")))
    _history_table(qm.history, args.out, run)
    print(f"frac_bits={args.frac_bits} params={qm.n_params}")


def cmd_trace(args, run):
    qm = _load_any_model(args.model, run)
    if not isinstance(qm, QuantizedModel):
        raise CliError("trace expects a quantized model")
    ref = _load_any_model(args.reference, run) if args.reference else qm.dequantized()
    inputs = dsm.angle_grid(args.grid)
    report = trace_compare(ref, qm, inputs)
    rows = [(t.layer, t.slope, t.residual_rms, t.saturation_count, int(t.low_int), int(t.low_frac))
            for t in report]
    run.outputs.append(str(_write_table(args.out / "trace.csv",
                                        ["layer", "slope", "residual_rms", "saturated", "low_int", "low_frac"],
                                        rows)))
    pairs = [(t.layer, r, q) for t in report for r, q in zip(t.reference.ravel(), t.quantized.ravel())]
    run.outputs.append(str(_write_table(args.out / "trace_pairs.csv", ["layer", "reference", "quantized"], pairs)))
    for t in report:
        print(f"layer={t.layer} slope={t.slope:.6f} rms={t.residual_rms:.3e} sat={t.saturation_count}"
              f"{' low_int' if t.low_int else ''}{' low_frac' if t.low_frac else ''}")


def cmd_evaluate(args, run):
    model = _load_any_model(args.model, run)
    mean, mx = _profile(model, args, args.out, run)
    print(f"mean={mean:.6e} max={mx:.6e}")


def cmd_export(args, run):
    model = _load_any_model(args.model, run)
    if isinstance(model, MlpModel):
        model = quantize_model(model, _quant_config(args))
    elif not isinstance(model, QuantizedModel):
        raise CliError("export expects an MLP or a quantized model")
    run.outputs.append(str(export_weights(model, args.out / "weights.json")))
    print(f"layers={len(model.weight_words)} params={model.n_params}")


def cmd_plot(args, run):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "snapml"
    fig, ax = plt.subplots(figsize=(7, 4))
    kind = args.kind
    if kind == "heatmap":
        ds = _load_dataset(args.data, run)
        im = ax.imshow(ds.theta.T, aspect="auto", origin="lower", cmap="coolwarm",
                       extent=(ds.alpha[0], ds.alpha[-1], -0.5, ds.theta.shape[1] - 0.5))
        fig.colorbar(im, ax=ax, label="coefficient value")
        ax.set_xlabel("alpha [rad]")
        ax.set_ylabel("coefficient index")
        table = _write_table(args.out / "heatmap.csv", dsm.HEADER[:-1],
                             (np.concatenate([[a], th]) for a, th in zip(ds.alpha, ds.theta)))
    elif kind == "infidelity":
        rows = []
        for path in args.data.split(","):
            p = _need(path)
            run.inputs.append(str(p))
            a, f = np.loadtxt(p, delimiter=",", skiprows=1, unpack=True, ndmin=2)
            ax.semilogy(a, f, label=p.parent.name or p.stem)
            rows += [(p.parent.name or p.stem, x, y) for x, y in zip(a, f)]
        ax.set_xlabel("alpha [rad]")
        ax.set_ylabel("infidelity")
        ax.legend()
        table = _write_table(args.out / "infidelity.csv", ["source", "alpha", "infidelity"], rows)
    else:
        p = _need(args.data if not Path(args.data).is_dir() else Path(args.data) / "results.csv")
        run.inputs.append(str(p))
        points = load_results(p)
        front = pareto_front(points)
        ax.scatter([q.params for q in points], [q.mean_infidelity for q in points], s=12, label="configs")
        ax.plot([q.params for q in front], [q.mean_infidelity for q in front], "r.-", label="Pareto front")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("parameters")
        ax.set_ylabel("mean infidelity")
        ax.legend()
        table = save_results(front, args.out / "pareto.csv")
    svg = args.out / f"{kind}.svg"
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    _atomic_write(svg, buf.getvalue())
    run.outputs += [str(svg), str(table)]
    print(f"wrote {svg}")


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=512, help="time steps of the propagator")
    p.add_argument("--grid", type=int, default=256, help="evaluation grid size")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (1 = serial)")
    p.add_argument("--level", type=int, default=2, help="SNAP target level")
    p.add_argument("--d", type=int, default=5, help="qudit dimension")
    p.add_argument("--config", type=Path, help="JSON file with option defaults")
    p.add_argument("-v", "--verbose", action="store_true")


def _training(p: argparse.ArgumentParser, data: bool = True) -> None:
    if data:
        p.add_argument("--data", required=True, help="preprocess directory or dataset file")
    p.add_argument("--widths", help="layer widths, e.g. 1-8-8-32, or hidden widths only")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr-start", type=float, default=1e-3)
    p.add_argument("--lr-end", type=float, default=1e-5)


def _quant_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--frac-bits", type=int, default=8)
    p.add_argument("--result", default="16,6", help="result format W,I")
    p.add_argument("--input", default="16,6", help="input format W,I")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="snapml", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, help):
        p = sub.add_parser(name, help=help)
        _common(p)
        subs[name] = p
        return p

    p = add("generate", "optimize pulses on a uniform angle grid")
    p.add_argument("--angles", type=int, default=64)
    p.add_argument("--target", type=float, default=1e-5, help="stop once infidelity reaches this")
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--restarts", type=int, default=3)

    p = add("preprocess", "filter, smooth and split a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--fractions", type=float, nargs=3, default=[0.8, 0.1, 0.1])

    _training(add("train", "train an MLP on normalized targets"))

    p = add("finetune", "fine-tune a model on simulated infidelity")
    p.add_argument("--model", required=True)
    p.add_argument("--rounds", type=int, default=5)

    p = add("moe", "train a mixture of experts")
    _training(p)
    p.add_argument("--experts", type=int, default=5)
    p.add_argument("--gate", help="gate hidden widths, comma separated")
    p.add_argument("--rounds", type=int, default=0, help="fine-tuning rounds after training")

    _training(add("mr", "train a multi-region model"))

    p = add("distill", "sample a teacher model on a uniform grid")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--recompute", action="store_true", help="simulate the infidelity of every record")

    p = add("dse", "random architecture search")
    _training(p)
    p.add_argument("--configs", type=int, default=100)
    p.add_argument("--depth", type=int, nargs=2, default=[2, 10])
    p.add_argument("--width", type=int, nargs=2, default=[4, 64])
    p.add_argument("--evaluate", action="store_true", help="simulate infidelity of every trained config")

    p = add("quantize", "quantization-aware training of an MLP")
    _training(p)
    p.add_argument("--model", help="float MLP to start from (default: fresh initialization of --widths)")
    _quant_flags(p)

    p = add("trace", "per-layer comparison of a quantized model against its float reference")
    p.add_argument("--model", required=True, help="quantized model file")
    p.add_argument("--reference", help="float model (defaults to the dequantized weights)")

    p = add("evaluate", "simulate a model's pulses on the angle grid")
    p.add_argument("--model", required=True)

    p = add("export", "write integer weights of an MLP or quantized model")
    p.add_argument("--model", required=True)
    _quant_flags(p)

    p = add("plot", "heatmap, infidelity curve or Pareto scatter as SVG plus data")
    p.add_argument("kind", choices=("heatmap", "infidelity", "pareto"))
    p.add_argument("--data", required=True, help="dataset, profile CSV(s) or DSE results")
    return parser, subs


def _parse(argv) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        cfg = json.loads(_need(args.config).read_text())
        sp = subs[args.command]
        known = {a.dest for a in sp._actions}
        unknown = set(cfg) - known
        if unknown:
            sp.error(f"unknown keys in {args.config}: {', '.join(sorted(unknown))}")
        sp.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parse(argv)
    except CliError as exc:
        print(f"snapml: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    run = RunManifest(args.command, config, {"seed": args.seed}, started=_now())
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](args, run)
    except (CliError, DatasetFormatError, FileNotFoundError, ValueError) as exc:
        print(f"snapml {args.command}: error: {exc}", file=sys.stderr)
        return 1
    run.finished = _now()
    run.write(args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
