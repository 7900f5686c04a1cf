"""Small numpy regressors mapping a SNAP angle to 32 spline coefficients.

Three model families share one interface:

* :class:`MlpModel` -- dense ReLU stack on ``alpha / pi`` with a linear output.
* :class:`MoeModel` -- experts blended by a softmax gate ("soft switching").
* :class:`MrModel` -- fixed angle regions, one regressor each ("hard switching").

Every model predicts normalized targets ``theta / scale`` and exposes
``forward_norm`` / ``backward`` so the same Adam loop serves MSE training and
fine-tuning on the simulated infidelity.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .datasets import Dataset, angle_grid
from .dynamics import DEFAULT_CONFIG, PropagationConfig, batch_infidelity

logger = logging.getLogger(__name__)

N_OUT = 32
REFERENCE_WIDTHS = (1, 8, 8, 8, 8, 8, 8, 16, 16, 16, 32)
MR_BOUNDARIES = tuple(b * np.pi for b in (-0.490, -0.426, 0.0, 0.682))


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class MlpConfig:
    layer_widths: tuple

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise ValueError("need an input, at least one hidden and an output layer")
        if widths[0] != 1:
            raise ValueError("input width must be 1")
        if any(w < 1 for w in widths):
            raise ValueError("widths must be positive")

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    @property
    def hidden(self) -> tuple:
        return self.layer_widths[1:-1]

    @classmethod
    def from_hidden(cls, hidden, n_out: int = N_OUT) -> "MlpConfig":
        return cls((1, *hidden, n_out))


class _Float:
    """Identity quantizer: plain float weights and ReLU."""

    def weight(self, w, layer):
        return w, None

    def bias(self, b, layer):
        return b, None

    def act(self, z, layer):
        return np.maximum(z, 0.0), z > 0

    def result(self, z, layer):
        return z


FLOAT = _Float()


class MlpModel:
    """Dense network ``x -> y`` with weights stored as ``(n_in, n_out)`` arrays."""

    kind = "mlp"

    def __init__(self, config: MlpConfig, weights=None, biases=None, scale: float = 1.0, seed: int = 0):
        self.config = config
        self.scale = float(scale)
        self.seed = seed
        widths = config.layer_widths
        if weights is None:
            rng = np.random.default_rng(seed)
            weights, biases = [], []
            for n_in, n_out in zip(widths[:-1], widths[1:]):
                lim = math.sqrt(6.0 / n_in)
                weights.append(rng.uniform(-lim, lim, (n_in, n_out)))
                biases.append(np.zeros(n_out))
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        for (n_in, n_out), w, b in zip(zip(widths[:-1], widths[1:]), self.weights, self.biases):
            if w.shape != (n_in, n_out) or b.shape != (n_out,):
                raise ValueError("weight shapes do not match the configuration")

    @property
    def n_params(self) -> int:
        return self.config.n_params

    @property
    def n_out(self) -> int:
        return self.config.layer_widths[-1]

    @property
    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, params) -> None:
        params = list(params)
        self.weights = [np.array(p, dtype=float) for p in params[0::2]]
        self.biases = [np.array(p, dtype=float) for p in params[1::2]]

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def forward_norm(self, x, quant=FLOAT):
        """Normalized outputs for inputs ``x`` of shape ``(N, 1)``; also returns a cache."""
        a = np.asarray(x, dtype=float)
        cache = []
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            wq, wmask = quant.weight(w, i)
            bq, bmask = quant.bias(b, i)
            z = quant.result(a @ wq + bq, i)
            if i < n_layers - 1:
                out, amask = quant.act(z, i)
            else:
                out, amask = z, None
            cache.append((a, wq, wmask, bmask, amask))
            a = out
        return a, cache

    def backward(self, cache, dy) -> list:
        grads = [None] * (2 * len(cache))
        g = dy
        for i in range(len(cache) - 1, -1, -1):
            a_in, wq, wmask, bmask, amask = cache[i]
            if amask is not None:
                g = g * amask
            gw = a_in.T @ g
            gb = g.sum(axis=0)
            if wmask is not None:
                gw = gw * wmask
            if bmask is not None:
                gb = gb * bmask
            grads[2 * i], grads[2 * i + 1] = gw, gb
            if i:
                g = g @ wq.T
        return grads

    def layer_outputs(self, x, quant=FLOAT) -> list:
        """Per-layer outputs after activation (linear for the last layer)."""
        a = np.asarray(x, dtype=float)
        outs = []
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = quant.result(a @ quant.weight(w, i)[0] + quant.bias(b, i)[0], i)
            a = quant.act(z, i)[0] if i < n_layers - 1 else z
            outs.append(a)
        return outs

    def forward(self, alpha):
        return _denormalized(self, alpha)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "layer_widths": list(self.config.layer_widths),
            "scale": self.scale,
            "seed": self.seed,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        return cls(MlpConfig(tuple(d["layer_widths"])), d["weights"], d["biases"], d["scale"], d.get("seed", 0))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class MoeModel:
    """Softmax-gated mixture of MLP experts."""

    kind = "moe"

    def __init__(self, experts: list, gate: MlpModel, scale: float = 1.0):
        if gate.n_out != len(experts):
            raise ValueError("gate must have one output per expert")
        self.experts = list(experts)
        self.gate = gate
        self.scale = float(scale)
        for m in self.experts + [self.gate]:
            m.scale = self.scale

    @classmethod
    def build(cls, expert_config: MlpConfig, n_experts: int, gate_hidden=None,
              scale: float = 1.0, seed: int = 0) -> "MoeModel":
        gate_hidden = (n_experts,) if gate_hidden is None else tuple(gate_hidden)
        experts = [MlpModel(expert_config, scale=scale, seed=seed * 1000 + e) for e in range(n_experts)]
        gate = MlpModel(MlpConfig((1, *gate_hidden, n_experts)), scale=scale, seed=seed * 1000 + 999)
        return cls(experts, gate, scale)

    @property
    def n_params(self) -> int:
        return sum(e.n_params for e in self.experts) + self.gate.n_params

    @property
    def params(self) -> list:
        out = []
        for m in self.experts + [self.gate]:
            out += m.params
        return out

    def set_params(self, params) -> None:
        params = list(params)
        for m in self.experts + [self.gate]:
            k = len(m.params)
            m.set_params(params[:k])
            params = params[k:]

    def copy(self) -> "MoeModel":
        return copy.deepcopy(self)

    def gate_weights(self, alpha) -> np.ndarray:
        x = np.atleast_1d(np.asarray(alpha, dtype=float)).reshape(-1, 1) / np.pi
        return _softmax(self.gate.forward_norm(x)[0])

    def forward_norm(self, x, quant=FLOAT):
        outs, caches = [], []
        for e in self.experts:
            y, c = e.forward_norm(x)
            outs.append(y)
            caches.append(c)
        logits, gcache = self.gate.forward_norm(x)
        p = _softmax(logits)
        ys = np.stack(outs, axis=1)  # (N, E, out)
        y = np.einsum("ne,neo->no", p, ys)
        return y, (caches, gcache, p, ys)

    def backward(self, cache, dy) -> list:
        caches, gcache, p, ys = cache
        grads = []
        for e, (expert, c) in enumerate(zip(self.experts, caches)):
            grads += expert.backward(c, p[:, e:e + 1] * dy)
        dp = np.einsum("no,neo->ne", dy, ys)
        dlogits = p * (dp - np.sum(p * dp, axis=1, keepdims=True))
        grads += self.gate.backward(gcache, dlogits)
        return grads

    def forward(self, alpha):
        return _denormalized(self, alpha)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scale": self.scale,
                "experts": [e.to_dict() for e in self.experts], "gate": self.gate.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "MoeModel":
        return cls([MlpModel.from_dict(e) for e in d["experts"]], MlpModel.from_dict(d["gate"]), d["scale"])


class MrModel:
    """Hard-switched regressors over ``[b_{k-1}, b_k)`` angle regions."""

    kind = "mr"

    def __init__(self, regressors: list, boundaries=MR_BOUNDARIES, scale: float = 1.0):
        boundaries = tuple(float(b) for b in boundaries)
        if any(b1 <= b0 for b0, b1 in zip(boundaries[:-1], boundaries[1:])):
            raise ValueError("boundaries must be strictly increasing")
        if len(regressors) != len(boundaries) + 1:
            raise ValueError("need one regressor per region")
        self.boundaries = boundaries
        self.regressors = list(regressors)
        self.scale = float(scale)
        for m in self.regressors:
            m.scale = self.scale

    @classmethod
    def build(cls, config: MlpConfig, boundaries=MR_BOUNDARIES, scale: float = 1.0, seed: int = 0) -> "MrModel":
        regs = [MlpModel(config, scale=scale, seed=seed * 1000 + k) for k in range(len(boundaries) + 1)]
        return cls(regs, boundaries, scale)

    def region(self, alpha) -> np.ndarray:
        return np.searchsorted(self.boundaries, np.asarray(alpha, dtype=float), side="right")

    @property
    def n_params(self) -> int:
        return sum(r.n_params for r in self.regressors)

    @property
    def params(self) -> list:
        out = []
        for m in self.regressors:
            out += m.params
        return out

    def set_params(self, params) -> None:
        params = list(params)
        for m in self.regressors:
            k = len(m.params)
            m.set_params(params[:k])
            params = params[k:]

    def copy(self) -> "MrModel":
        return copy.deepcopy(self)

    def forward_norm(self, x, quant=FLOAT):
        x = np.asarray(x, dtype=float)
        reg = self.region(x[:, 0] * np.pi)
        y = np.zeros((len(x), N_OUT))
        caches = []
        for k, m in enumerate(self.regressors):
            idx = np.nonzero(reg == k)[0]
            if len(idx):
                yk, c = m.forward_norm(x[idx])
                y[idx] = yk
                caches.append((idx, c))
            else:
                caches.append((idx, None))
        return y, caches

    def backward(self, cache, dy) -> list:
        grads = []
        for m, (idx, c) in zip(self.regressors, cache):
            if c is None:
                grads += [np.zeros_like(p) for p in m.params]
            else:
                grads += m.backward(c, dy[idx])
        return grads

    def forward(self, alpha):
        return _denormalized(self, alpha)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scale": self.scale, "boundaries": list(self.boundaries),
                "regressors": [r.to_dict() for r in self.regressors]}

    @classmethod
    def from_dict(cls, d: dict) -> "MrModel":
        return cls([MlpModel.from_dict(r) for r in d["regressors"]], d["boundaries"], d["scale"])


def _denormalized(model, alpha):
    scalar = np.ndim(alpha) == 0
    x = np.atleast_1d(np.asarray(alpha, dtype=float)).reshape(-1, 1) / np.pi
    y = model.forward_norm(x)[0] * model.scale
    return y[0] if scalar else y


def forward(model, alpha):
    """De-normalized coefficients for one angle (shape 32) or many (shape (N, 32))."""
    return model.forward(alpha)


def save_model(model, path, extra: dict | None = None) -> Path:
    path = Path(path)
    doc = model.to_dict()
    if extra:
        doc["meta"] = extra
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)
    return path


def load_model(path):
    doc = json.loads(Path(path).read_text())
    return model_from_dict(doc)


def model_from_dict(doc: dict):
    kinds = {"mlp": MlpModel, "moe": MoeModel, "mr": MrModel}
    try:
        return kinds[doc["kind"]].from_dict(doc)
    except KeyError as exc:
        raise ValueError(f"not a model document: missing {exc}") from None


# ---------------------------------------------------------------------------
# optimization


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> list:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 50
    batch_size: int = 64
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr(self, epoch: int) -> float:
        """Exponential decay from ``lr_start`` at epoch 0 to ``lr_end`` at the last epoch."""
        if self.epochs == 1:
            return self.lr_start
        return self.lr_start * (self.lr_end / self.lr_start) ** (epoch / (self.epochs - 1))


def _xy(ds: Dataset, scale: float):
    return ds.alpha.reshape(-1, 1) / np.pi, ds.theta / scale


def mse(model, ds: Dataset, quant=FLOAT) -> float:
    """Mean squared error on normalized targets ``theta / scale``."""
    x, t = _xy(ds, model.scale)
    y = model.forward_norm(x, quant)[0]
    return float(np.mean((y - t) ** 2))


def train_mse(model, train: Dataset, val: Dataset, opts: TrainOptions = TrainOptions(), quant=FLOAT):
    """Adam on the MSE of normalized targets; returns the best-validation checkpoint.

    ``history`` holds one dict per epoch with ``lr``, ``train_loss``, ``val_loss``.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation sets must be nonempty")
    model = model.copy()
    rng = np.random.default_rng(opts.seed)
    x, t = _xy(train, model.scale)
    adam = Adam(model.params, opts.lr_start, opts.beta1, opts.beta2, opts.eps)
    best, best_val = model.copy(), mse(model, val, quant)
    history = []
    n = len(x)
    for epoch in range(opts.epochs):
        adam.lr = opts.lr(epoch)
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, opts.batch_size):
            idx = perm[start:start + opts.batch_size]
            y, cache = model.forward_norm(x[idx], quant)
            err = y - t[idx]
            batch = float(np.sum(err ** 2))
            if not np.isfinite(batch):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} (lr={adam.lr:.3g})")
            total += batch
            dy = 2.0 * err / err.size
            model.set_params(adam.step(model.params, model.backward(cache, dy)))
        train_loss = total / (n * t.shape[1])
        val_loss = mse(model, val, quant)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch} (lr={adam.lr:.3g})")
        history.append({"epoch": epoch, "lr": adam.lr, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < best_val:
            best, best_val = model.copy(), val_loss
    return best, history


def train_restarts(build, train: Dataset, val: Dataset, opts: TrainOptions = TrainOptions(), seeds=(0, 1, 2)):
    """Train ``build(seed)`` for every seed; keep the run with the lowest validation MSE.

    Returns ``(model, history, val_losses)`` where ``val_losses`` lists the
    best validation loss of each seed.
    """
    best = None
    losses = []
    for seed in seeds:
        model, history = train_mse(build(seed), train, val, replace(opts, seed=seed))
        loss = mse(model, val)
        losses.append(loss)
        if best is None or loss < best[2]:
            best = (model, history, loss)
    return best[0], best[1], losses


def train_mr(model: MrModel, train: Dataset, val: Dataset, opts: TrainOptions = TrainOptions()):
    """Train each region's regressor on the records of its region only."""
    histories = []
    out = model.copy()
    for k in range(len(out.regressors)):
        tr = train.subset(np.nonzero(out.region(train.alpha) == k)[0])
        va = val.subset(np.nonzero(out.region(val.alpha) == k)[0])
        if len(tr) == 0:
            logger.warning("region %d has no training records", k)
            histories.append([])
            continue
        if len(va) == 0:
            va = tr
        out.regressors[k], h = train_mse(out.regressors[k], tr, va, opts)
        histories.append(h)
    return out, histories


# ---------------------------------------------------------------------------
# evaluation against the simulator


def model_infidelity(model, alphas, sys, level: int, cfg: PropagationConfig = DEFAULT_CONFIG,
                     chunk: int = 64) -> np.ndarray:
    alphas = np.asarray(alphas, dtype=float)
    out = []
    for i in range(0, len(alphas), chunk):
        a = alphas[i:i + chunk]
        out.append(batch_infidelity(sys, model.forward(a), a, level, cfg))
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model, sys, level: int = 2, grid: int = 256, cfg: PropagationConfig = DEFAULT_CONFIG):
    """Return ``(mean, max, (alphas, infidelities))`` over the uniform angle grid."""
    if grid < 2:
        raise ValueError("grid must be >= 2")
    alphas = angle_grid(grid)
    prof = model_infidelity(model, alphas, sys, level, cfg)
    return float(np.mean(prof)), float(np.max(prof)), (alphas, prof)


@dataclass(frozen=True)
class FinetuneOptions:
    rounds: int = 5
    batches_per_round: int = 25
    angles_per_batch: int = 16
    lr: float = 1e-3
    eval_grid: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0 or self.batches_per_round < 1 or self.angles_per_batch < 1 or self.eval_grid < 2:
            raise ValueError("fine-tuning counts must be positive")

    def gamma(self, r: int) -> float:
        """Sampling exponent, 1 in the first round falling linearly to 0 in the last."""
        return 1.0 if self.rounds <= 1 else 1.0 - r / (self.rounds - 1)


def sampling_probabilities(infid: np.ndarray, gamma: float) -> np.ndarray:
    w = np.clip(np.asarray(infid, dtype=float), 1e-16, None) ** gamma
    return w / w.sum()


def infidelity_loss_and_grads(model, alphas, sys, level: int, cfg: PropagationConfig = DEFAULT_CONFIG):
    """Mean infidelity of the model's pulses and its gradient w.r.t. the model parameters."""
    alphas = np.asarray(alphas, dtype=float)
    x = alphas.reshape(-1, 1) / np.pi
    y, cache = model.forward_norm(x)
    infid, g_theta = batch_infidelity(sys, y * model.scale, alphas, level, cfg, grad=True)
    dy = g_theta * model.scale / len(alphas)
    return float(np.mean(infid)), model.backward(cache, dy)


def finetune_infidelity(model, sys, level: int = 2, opts: FinetuneOptions = FinetuneOptions(),
                        cfg: PropagationConfig = DEFAULT_CONFIG):
    """Fine-tune directly on the simulated infidelity.

    Each round draws ``batches_per_round`` batches of angles from the eval grid
    with probability proportional to ``infidelity ** gamma(r)`` (jittered within
    the grid cell) and takes one Adam step per batch. The returned model is the
    best round checkpoint, the starting model included.
    """
    model = model.copy()
    rng = np.random.default_rng(opts.seed)
    grid = angle_grid(opts.eval_grid)
    spacing = 2 * np.pi / opts.eval_grid
    prof = model_infidelity(model, grid, sys, level, cfg)
    best, best_mean = model.copy(), float(np.mean(prof))
    history = [{"round": 0, "gamma": None, "mean": best_mean, "max": float(np.max(prof))}]
    adam = Adam(model.params, opts.lr)
    for r in range(opts.rounds):
        gamma = opts.gamma(r)
        p = sampling_probabilities(prof, gamma)
        losses = []
        for _ in range(opts.batches_per_round):
            idx = rng.choice(len(grid), size=opts.angles_per_batch, p=p)
            alphas = grid[idx] + rng.uniform(-0.5, 0.5, len(idx)) * spacing
            try:
                loss, grads = infidelity_loss_and_grads(model, alphas, sys, level, cfg)
            except (ValueError, FloatingPointError) as exc:
                logger.warning("round %d: skipped batch (%s)", r, exc)
                continue
            losses.append(loss)
            model.set_params(adam.step(model.params, grads))
        prof = model_infidelity(model, grid, sys, level, cfg)
        mean = float(np.mean(prof))
        history.append({"round": r + 1, "gamma": gamma, "mean": mean, "max": float(np.max(prof)),
                        "batch_loss": float(np.mean(losses)) if losses else float("nan")})
        if mean < best_mean:
            best, best_mean = model.copy(), mean
    return best, history


def compose_best_regions(checkpoints: list, sys, level: int = 2, grid: int = 256,
                         cfg: PropagationConfig = DEFAULT_CONFIG) -> MrModel:
    """Assemble an MR model taking, per region, the checkpoint regressor with the lowest mean infidelity."""
    base = checkpoints[0].copy()
    alphas = angle_grid(grid)
    regions = base.region(alphas)
    profiles = [model_infidelity(c, alphas, sys, level, cfg) for c in checkpoints]
    for k in range(len(base.regressors)):
        mask = regions == k
        if not mask.any():
            continue
        j = int(np.argmin([np.mean(p[mask]) for p in profiles]))
        base.regressors[k] = checkpoints[j].regressors[k].copy()
    return base


def distill(teacher, n: int = 10000, sys=None, level: int = 2,
            cfg: PropagationConfig = DEFAULT_CONFIG) -> Dataset:
    """Teacher predictions on the uniform angle grid as a training dataset.

    The infidelity column is recomputed with the simulator when ``sys`` is
    given and left as NaN otherwise.
    """
    alphas = angle_grid(n)
    theta = teacher.forward(alphas)
    if sys is not None:
        infid = model_infidelity(teacher, alphas, sys, level, cfg)
    else:
        infid = np.full(n, np.nan)
    return Dataset(alphas, theta, infid, {"source": "distilled", "teacher": teacher.kind,
                                          "teacher_params": teacher.n_params, "level": level})
