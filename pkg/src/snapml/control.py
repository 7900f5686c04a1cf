"""Per-angle pulse optimization and bulk dataset generation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from .datasets import Dataset, angle_grid
from .dynamics import DEFAULT_CONFIG, PropagationConfig, batch_infidelity
from .operators import SnapSpec, SystemSpec
from .pulses import DURATION, N_COEFFS, PulseParams

logger = logging.getLogger(__name__)

INIT_MODES = ("continuation", "random", "explicit")


@dataclass(frozen=True)
class OptimizeOptions:
    max_iters: int = 500
    grad_tol: float = 1e-7
    target_infidelity: float = 1e-5
    restarts: int = 3
    init_mode: str = "continuation"
    init_scale: float = 0.05
    bound: float | None = None
    seed: int = 0
    optimizer: str = "lbfgs"
    adam_lr: float = 2e-3

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.grad_tol > 0 and self.target_infidelity > 0):
            raise ValueError("tolerances must be positive")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")
        if self.optimizer not in ("lbfgs", "adam"):
            raise ValueError("optimizer must be 'lbfgs' or 'adam'")


@dataclass
class OptimizedSample:
    alpha: float
    params: PulseParams
    infidelity: float
    converged: bool
    iters: int
    trace: list = field(default_factory=list, repr=False)


class _Objective:
    """Value/gradient wrapper that remembers the best point it has seen."""

    def __init__(self, sys, spec, cfg, duration):
        self.sys, self.spec, self.cfg, self.duration = sys, spec, cfg, duration
        self.best_x = None
        self.best_f = np.inf
        self.best_g = None

    def __call__(self, x):
        f, g = batch_infidelity(self.sys, x, self.spec.alpha, self.spec.n, self.cfg,
                                self.duration, grad=True)
        f, g = float(f[0]), g[0]
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            raise FloatingPointError("non-finite objective")
        if f < self.best_f:
            self.best_f, self.best_x, self.best_g = f, np.array(x, dtype=float), g
        return f, g


def _run_lbfgs(obj: _Objective, x0: np.ndarray, opts: OptimizeOptions, trace: list) -> int:
    iters = 0

    def callback(intermediate_result):
        nonlocal iters
        iters += 1
        trace.append(obj.best_f)
        if obj.best_f <= opts.target_infidelity:
            raise StopIteration

    bounds = None if opts.bound is None else [(-opts.bound, opts.bound)] * x0.size
    f0, g0 = obj(x0)
    trace.append(obj.best_f)
    if f0 <= opts.target_infidelity or np.max(np.abs(g0)) <= opts.grad_tol:
        return 0
    minimize(obj, x0, jac=True, method="L-BFGS-B", bounds=bounds, callback=callback,
             options={"maxiter": opts.max_iters, "gtol": opts.grad_tol, "ftol": 1e-15,
                      "maxfun": 10 * opts.max_iters})
    return iters


def _run_adam(obj: _Objective, x0: np.ndarray, opts: OptimizeOptions, trace: list) -> int:
    """First-order fallback: plain Adam steps, projected onto the box if one is set."""
    from .networks import Adam

    x = np.array(x0, dtype=float)
    adam = Adam([x], opts.adam_lr)
    for it in range(opts.max_iters):
        f, g = obj(x)
        trace.append(obj.best_f)
        if f <= opts.target_infidelity or np.max(np.abs(g)) <= opts.grad_tol:
            return it
        (x,) = adam.step([x], [g])
        if opts.bound is not None:
            x = np.clip(x, -opts.bound, opts.bound)
    obj(x)
    trace.append(obj.best_f)
    return opts.max_iters


def _converged(obj: _Objective, opts: OptimizeOptions) -> bool:
    return bool(obj.best_f <= opts.target_infidelity
                or np.max(np.abs(obj.best_g)) <= opts.grad_tol)


def optimize_pulse(sys: SystemSpec, spec: SnapSpec, init: PulseParams | None = None,
                   opts: OptimizeOptions = OptimizeOptions(),
                   cfg: PropagationConfig = DEFAULT_CONFIG,
                   duration: float | None = None) -> OptimizedSample:
    """Minimize the SNAP infidelity over the 32 spline coefficients.

    Starts from ``init`` (a small random pulse when omitted) and, if that run
    does not converge, tries ``opts.restarts`` random starts drawn from
    ``uniform(-init_scale, init_scale)``; the best result over all runs is kept.
    """
    if duration is None:
        duration = init.duration if init is not None else DURATION
    rng = np.random.default_rng([opts.seed, int(np.round(spec.alpha * 1e9)) & 0xFFFFFFFF])

    def random_start():
        return rng.uniform(-opts.init_scale, opts.init_scale, 2 * N_COEFFS)

    best: tuple | None = None
    trace: list = []
    total_iters = 0
    for attempt in range(1 + opts.restarts):
        if best is not None and best[3]:
            break
        x0 = init.vector if (attempt == 0 and init is not None) else random_start()
        obj = _Objective(sys, spec, cfg, duration)
        run_trace: list = []
        try:
            run = _run_lbfgs if opts.optimizer == "lbfgs" else _run_adam
            total_iters += run(obj, x0, opts, run_trace)
        except (FloatingPointError, ValueError) as exc:
            logger.warning("alpha=%.6f: run %d aborted (%s)", spec.alpha, attempt, exc)
        if obj.best_x is None:
            continue
        if best is not None:
            # keep the trace monotone across restarts
            run_trace = [min(v, best[1]) for v in run_trace]
        trace.extend(run_trace)
        if best is None or obj.best_f < best[1]:
            best = (obj.best_x, obj.best_f, obj.best_g, _converged(obj, opts))
    if best is None:
        raise FloatingPointError(f"alpha={spec.alpha}: every optimization run failed")
    x, f, _, conv = best
    return OptimizedSample(spec.alpha, PulseParams.from_vector(x, duration), f, conv, total_iters, trace)


def _sweep_order(alphas: np.ndarray) -> list[list[int]]:
    """Index chains sweeping outward from alpha = 0 (non-negative, then negative)."""
    pos = [i for i in np.argsort(alphas) if alphas[i] >= 0]
    neg = [i for i in np.argsort(alphas)[::-1] if alphas[i] < 0]
    return [c for c in (pos, neg) if c]


def _predict(samples, alphas, solved: list, alpha: float, duration: float) -> PulseParams | None:
    """Warm start from the solved neighbours: secant extrapolation once two exist."""
    if not solved:
        return None
    x1 = samples[solved[-1]].params.vector
    if len(solved) == 1 or not (samples[solved[-1]].converged and samples[solved[-2]].converged):
        return PulseParams.from_vector(x1, duration)
    a1, a0 = alphas[solved[-1]], alphas[solved[-2]]
    x0 = samples[solved[-2]].params.vector
    return PulseParams.from_vector(x1 + (x1 - x0) * (alpha - a1) / (a1 - a0), duration)


def generate_dataset(sys: SystemSpec, n: int, level: int = 2,
                     opts: OptimizeOptions = OptimizeOptions(),
                     cfg: PropagationConfig = DEFAULT_CONFIG,
                     duration: float = DURATION, init: PulseParams | None = None,
                     progress=None) -> Dataset:
    """Optimize pulses on the uniform angle grid and collect them as a dataset.

    In continuation mode the sweep runs outward from zero, first over the
    non-negative angles and then over the negative ones, each angle
    warm-started by extrapolating its two previously solved neighbours. The
    very first angle starts from a small random pulse (the zero pulse is
    stationary for every angle); the negative side continues from the first two
    non-negative solutions so both halves lie on one solution branch.
    ``init_mode="random"`` solves every angle from a random start and
    ``"explicit"`` starts every angle from ``init``. Unconverged angles are kept
    and flagged in ``meta["converged"]``.
    """
    alphas = angle_grid(n)
    samples: list[OptimizedSample | None] = [None] * n
    if opts.init_mode == "continuation":
        chains = _sweep_order(alphas)
        for c, chain in enumerate(chains):
            # the second side continues through zero from the first side's solutions
            solved: list[int] = [] if c == 0 else chains[0][:2][::-1]
            for i in chain:
                spec = SnapSpec(float(alphas[i]), level)
                samples[i] = optimize_pulse(sys, spec, _predict(samples, alphas, solved, alphas[i], duration),
                                            opts, cfg, duration)
                solved.append(i)
                if progress:
                    progress(i, samples[i])
    else:
        for i, a in enumerate(alphas):
            start = init if opts.init_mode == "explicit" else None
            samples[i] = optimize_pulse(sys, SnapSpec(float(a), level), start, opts, cfg, duration)
            if progress:
                progress(i, samples[i])
    meta = {
        "system": sys.to_dict(),
        "level": level,
        "duration": duration,
        "steps": cfg.steps,
        "substeps": cfg.substeps,
        "method": cfg.method,
        "options": asdict(opts),
        "converged": [bool(s.converged) for s in samples],
    }
    return Dataset(alphas, np.stack([s.params.vector for s in samples]),
                   np.array([s.infidelity for s in samples]), meta)
