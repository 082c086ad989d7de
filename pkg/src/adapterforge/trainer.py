"""Optimizers, learning-rate schedules, synthetic tasks and the sweep engine.

One optimizer step follows a fixed hook order: raw gradients, then the
variant's gradient rewrite, then optimizer moments, then the update, then
the variant's ``after_step`` hook and any budget controller.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterSpec, LoRAAdapter, build_adapter, variant_info
from .adapters.init_variants import GradContext, estimate_activation_cov, estimate_gradients
from .adapters.rank_budget import (
    BudgetSchedule,
    IncreLoRAAdapter,
    SaLoRAAdapter,
    SensitivityState,
    SvdAdapter,
    adalora_mask_step,
    adapter_scores,
    increlora_grow,
    update_adapter_stats,
)
from .adapters.rank_share import (
    SharedBank,
    make_dense_bank,
    make_randlora_bank,
    make_rasa_bank,
    make_sharelora_bank,
    make_vera_bank,
)
from .autodiff import Tape
from .config import ConfigError, ExperimentConfig, config_hash
from .linalg import RngStream, gaussian

CSV_COLUMNS = ("variant", "lr", "step", "loss", "best_loss", "diverged")


# -- optimizers ------------------------------------------------------------

class Optimizer:
    def __init__(self, weight_decay: float = 0.0):
        self.weight_decay = weight_decay
        self.state: dict[str, dict] = {}

    def reset(self, names):
        """Drop the moments of ``names`` (merge-and-reinit, rank growth)."""
        for n in names:
            self.state.pop(n, None)

    def _slot(self, name, shape):
        st = self.state.get(name)
        if st is None or st["shape"] != shape:
            st = self.state[name] = self._fresh(shape)
        return st

    def step(self, params: dict, grads: dict, lr: float, multipliers: dict | None = None) -> dict:
        multipliers = multipliers or {}
        out = dict(params)
        for name in sorted(grads):
            eff = lr * np.asarray(multipliers.get(name, 1.0))
            out[name] = self._update(name, params[name], grads[name], eff)
        return out

    def state_sizes(self) -> dict:
        return {n: sum(v.size for k, v in st.items() if isinstance(v, np.ndarray)) for n, st in self.state.items()}


class SGD(Optimizer):
    def __init__(self, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(weight_decay)
        self.momentum = momentum

    def _fresh(self, shape):
        return {"shape": shape, "buf": np.zeros(shape)} if self.momentum else {"shape": shape}

    def _update(self, name, p, g, lr):
        st = self._slot(name, p.shape)
        if self.momentum:
            st["buf"] = self.momentum * st["buf"] + g
            g = st["buf"]
        return p * (1.0 - lr * self.weight_decay) - lr * g


class AdamW(Optimizer):
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(weight_decay)
        self.b1, self.b2 = betas
        self.eps = eps

    def _fresh(self, shape):
        return {"shape": shape, "m": np.zeros(shape), "v": np.zeros(shape), "t": 0}

    def _update(self, name, p, g, lr):
        st = self._slot(name, p.shape)
        st["t"] += 1
        t = st["t"]
        st["m"] = self.b1 * st["m"] + (1 - self.b1) * g
        st["v"] = self.b2 * st["v"] + (1 - self.b2) * g * g
        mhat = st["m"] / (1 - self.b1**t)
        vhat = st["v"] / (1 - self.b2**t)
        return p * (1.0 - lr * self.weight_decay) - lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(cfg) -> Optimizer:
    if cfg.kind == "sgd":
        return SGD(cfg.momentum, cfg.weight_decay)
    return AdamW(tuple(cfg.betas), cfg.eps, cfg.weight_decay)


# -- schedules ---------------------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    """Multiplier on the base learning rate at step ``t`` (1-based).

    ``jagged`` restarts at zero at every phase boundary ``t = k * phase_length``
    and re-warms linearly over ``rewarmup_steps`` under a cosine envelope.
    """

    kind: str = "constant"
    total_steps: int = 1
    warmup_ratio: float = 0.03
    phase_length: int | None = None
    rewarmup_steps: int = 10

    @property
    def warmup_steps(self) -> int:
        return int(math.ceil(self.warmup_ratio * self.total_steps))

    def factor(self, t: int) -> float:
        T, W = self.total_steps, self.warmup_steps
        if self.kind == "constant":
            return 1.0
        if W and t <= W and self.kind != "jagged":
            return t / W
        if self.kind == "linear_warmup_decay":
            return max(0.0, (T - t) / max(T - W, 1))
        progress = min(max((t - W) / max(T - W, 1), 0.0), 1.0)
        cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
        if self.kind == "cosine":
            return cosine
        if self.kind == "jagged":
            q = t % self.phase_length
            return cosine * min(1.0, q / max(self.rewarmup_steps, 1))
        raise ConfigError(f"unknown schedule {self.kind!r}")

    def lr_at(self, base_lr: float, t: int) -> float:
        return base_lr * self.factor(t)


# -- synthetic tasks ------------------------------------------------------------

@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    X_eval: np.ndarray
    Y_eval: np.ndarray
    bases: list
    loss: str
    teacher: list



def _layer_dims(task) -> list[tuple[int, int]]:
    m, n = task.in_features, task.out_features
    return [(m, m)] * (task.depth - 1) + [(m, n)]


def _teacher_forward(weights, X):
    h = X
    for i, W in enumerate(weights):
        h = h @ W
        if i < len(weights) - 1:
            h = np.tanh(h)
    return h


def make_task(task, seed: int) -> Dataset:
    """Regenerate the synthetic task from ``seed`` (bit-exact).

    The pretrained model is a random network; the teacher adds a
    rank-``teacher_rank`` delta to every layer, scaled so the delta moves
    each output by about one unit of standard deviation.
    """
    rng = RngStream(seed).spawn(1000)
    dims = _layer_dims(task)
    bases, teacher = [], []
    for m, n in dims:
        W0 = gaussian(m, n, 1.0 / math.sqrt(m), rng)
        r = task.teacher_rank
        delta = gaussian(m, r, 1.0, rng) @ gaussian(r, n, 1.0, rng) / math.sqrt(m * r)
        bases.append(W0)
        teacher.append(W0 + delta)
    total = task.samples + task.eval_samples
    m = task.in_features
    if task.kind == "lowrank_teacher_regression":
        X = rng.normal(1.0, (total, m))
        Y = _teacher_forward(teacher, X) + rng.normal(task.noise, (total, task.out_features))
        loss = "mse"
    else:
        k = task.out_features
        centers = rng.normal(2.0, (k, m))
        labels = rng.integers(0, k, (total,))
        X = centers[labels] + rng.normal(1.0, (total, m))
        Y = labels.reshape(-1, 1).astype(np.float64)
        loss = "xent"
    s = task.samples
    return Dataset(X[:s], Y[:s], X[s:], Y[s:], bases, loss, teacher)


def batches(data: Dataset, batch_size: int, rng: RngStream):
    """Endless reshuffled minibatches."""
    n = data.X.shape[0]
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            idx = order[i:i + batch_size]
            yield data.X[idx], data.Y[idx]


# -- model ---------------------------------------------------------------------

_BANK_MAKERS = {
    "sharelora", "vera", "tied_lora", "denselora", "randlora", "rasa",
}


class AdaptedModel:
    """A stack of adapted linear layers with ``tanh`` between them."""

    def __init__(self, bases, loss: str = "mse"):
        self.bases = [np.array(b, dtype=np.float64) for b in bases]
        self.loss = loss
        self.layers: list[tuple[str, LoRAAdapter]] = []

    @property
    def names(self):
        return [f"l{i}" for i in range(len(self.bases))]

    def attach(self, cfg_adapter, seed: int, ctx: GradContext | None = None):
        rng = RngStream(seed).spawn(2000)
        bank = self._make_bank(cfg_adapter, rng)
        self.layers = []
        for i, (name, W) in enumerate(zip(self.names, self.bases)):
            m, n = W.shape
            spec = AdapterSpec(m, n, rank=cfg_adapter.rank, alpha=cfg_adapter.alpha, dropout=cfg_adapter.dropout,
                               scaling_mode=cfg_adapter.scaling_mode, variant=cfg_adapter.variant,
                               params=dict(cfg_adapter.params), seed=seed)
            adapter = build_adapter(spec, W, rng.spawn(i), ctx, name, bank)
            self.layers.append((name, adapter))
        return self

    def _make_bank(self, a, rng) -> SharedBank | None:
        if a.variant not in _BANK_MAKERS or len(self.bases) == 1:
            return None
        dims = [W.shape for W in self.bases]
        m_max, n_max = max(d[0] for d in dims), max(d[1] for d in dims)
        brng = rng.spawn(999)
        p = {**variant_info(a.variant).params, **a.params}
        if a.variant == "sharelora":
            return make_sharelora_bank("sharelora", m_max, n_max, a.rank, p["mode"], brng)
        if a.variant in ("vera", "tied_lora"):
            return make_vera_bank(a.variant, m_max, n_max, a.rank, brng)
        if a.variant == "denselora":
            return make_dense_bank("denselora", m_max, n_max, a.rank, brng, p["train_shared"])
        if a.variant == "randlora":
            return make_randlora_bank("randlora", dims, a.rank, brng, p.get("cap"))
        if len(set(dims)) != 1:
            raise ConfigError("rasa sharing needs identical layer shapes")
        return make_rasa_bank("rasa", dims[0][0], dims[0][1], int(p["shared_rank"]), len(dims), brng)

    def banks(self) -> list[SharedBank]:
        seen, out = set(), []
        for _, a in self.layers:
            for bank, _ in a.shared.values():
                if id(bank) not in seen:
                    seen.add(id(bank))
                    out.append(bank)
        return out

    # -- parameters ------------------------------------------------
    def parameters(self) -> dict:
        out = {}
        for name, a in self.layers:
            for k, v in a.trainable_parameters().items():
                out[f"{name}.{k}"] = v
        for bank in self.banks():
            out.update(bank.trainable_parameters())
        return out

    def assign(self, values: dict):
        for name, a in self.layers:
            for k in a.trainable:
                a.params[k] = values[f"{name}.{k}"]
        for bank in self.banks():
            for k in bank.trainable:
                bank.tensors[k] = values[bank.full_name(k)]

    def num_trainable(self) -> int:
        return int(sum(v.size for v in self.parameters().values()))

    # -- graphs ------------------------------------------------------
    def _loss_node(self, tape, pred, y):
        if self.loss == "mse":
            return tape.mse(pred, tape.input(y))
        return tape.softmax_xent(pred, y.reshape(-1).astype(np.int64))

    def graph(self, tape: Tape, x, train: bool):
        h = tape.input(x, name="x")
        regs = []
        for i, (name, a) in enumerate(self.layers):
            nodes = a.register(tape, prefix=f"{name}.")
            h = a.graph(tape, h, nodes, train)
            reg = a.regularizer(tape, nodes)
            if reg is not None:
                regs.append(reg)
            if i < len(self.layers) - 1:
                h = tape.tanh(h)
        return h, regs

    def loss_and_grads(self, x, y, train: bool = True):
        tape = Tape()
        pred, regs = self.graph(tape, x, train)
        loss = self._loss_node(tape, pred, y)
        task_loss = float(loss.value[0, 0])
        total = loss
        for r in regs:
            total = tape.add(total, r)
        grads = tape.backward(total)
        return task_loss, grads

    def predict(self, x) -> np.ndarray:
        tape = Tape()
        pred, _ = self.graph(tape, x, False)
        return pred.value

    def evaluate(self, X, Y) -> float:
        pred = self.predict(X)
        if self.loss == "mse":
            return float(0.5 * np.mean((pred - Y) ** 2))
        z = pred - pred.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(-np.mean(logp[np.arange(len(Y)), Y.reshape(-1).astype(int)]))

    # -- estimation hooks (adapters disabled) --------------------------
    def full_weight_gradients(self, x, y) -> dict:
        tape = Tape()
        h = tape.input(x)
        for i, (name, W) in enumerate(zip(self.names, self.bases)):
            h = tape.matmul(h, tape.param(name, W))
            if i < len(self.bases) - 1:
                h = tape.tanh(h)
        self._loss_node(tape, h, y)
        return tape.backward()

    def layer_inputs(self, x) -> dict:
        out, h = {}, np.asarray(x, dtype=np.float64)
        for i, (name, W) in enumerate(zip(self.names, self.bases)):
            out[name] = h
            h = h @ W
            if i < len(self.bases) - 1:
                h = np.tanh(h)
        return out


# -- budget controllers --------------------------------------------------------

class BudgetController:
    """Sensitivity tracking plus AdaLoRA masking or IncreLoRA growth."""

    def __init__(self, model: AdaptedModel, steps: int):
        self.model = model
        adapters = [a for _, a in model.layers]
        self.kind = adapters[0].kind
        p = adapters[0].spec.params
        self.stats = SensitivityState(float(p.get("beta1", 0.85)), float(p.get("beta2", 0.85)))
        self.prefixes = [f"{n}." for n, _ in model.layers]
        self.adapters = adapters
        self.interval = int(p.get("mask_interval", 10))
        self.schedule = None
        if self.kind == "adalora":
            t_i, t_f = int(p.get("t_i", 100)), int(p.get("t_f", 900))
            if t_i + t_f > steps:
                raise ConfigError(f"adalora needs t_i + t_f <= steps ({t_i} + {t_f} > {steps})")
            L = len(adapters)
            self.schedule = BudgetSchedule(adapters[0].r * L, int(p.get("target_rank", 8)) * L, t_i, t_f, steps)
        else:
            self.budget_left = int(p.get("grow_budget", 8)) * len(adapters)
            self.every, self.top = int(p.get("grow_every", 50)), int(p.get("grow_top", 1))

    def observe(self, grads: dict):
        for a, pre in zip(self.adapters, self.prefixes):
            update_adapter_stats(a, grads, self.stats, pre)

    def after_step(self, t: int, optimizer: Optimizer) -> dict:
        if self.kind == "adalora":
            s = self.schedule
            final = s.T - s.t_f
            if (s.t_i <= t < final and (t - s.t_i) % self.interval == 0) or t == final:
                b = adalora_mask_step(self.adapters, self.stats, s, t, self.prefixes)
                return {"budget": b}
            return {}
        scores = [float(np.mean(adapter_scores(a, self.stats, pre))) for a, pre in zip(self.adapters, self.prefixes)]
        before = self.budget_left
        self.budget_left, grown = increlora_grow(self.adapters, scores, t, self.every, self.top, self.budget_left)
        for i in grown:
            optimizer.reset([self.prefixes[i] + k for k in ("A", "B", "D")])
        return {"grown": grown} if before != self.budget_left else {}


# -- runs ------------------------------------------------------------------------

@dataclass
class RunReport:
    variant: str
    lr: float
    seed: int
    config_hash: str
    evals: list = field(default_factory=list)
    best_loss: float = math.inf
    final_loss: float = math.inf
    initial_loss: float = math.inf
    diverged: bool = False
    steps_run: int = 0
    trainable_params: int = 0
    events: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "lr": self.lr, "seed": self.seed, "config_hash": self.config_hash,
            "evals": self.evals, "best_loss": self.best_loss, "final_loss": self.final_loss,
            "initial_loss": self.initial_loss, "diverged": self.diverged, "steps_run": self.steps_run,
            "trainable_params": self.trainable_params, "events": self.events,
        }


def _estimation_context(model: AdaptedModel, cfg: ExperimentConfig, data: Dataset, info) -> GradContext | None:
    if not (info.needs_gradients or info.needs_covariance):
        return None
    params = {**info.params, **cfg.adapter.params}
    steps = cfg.train.estimation_steps or int(params.get("estimation_steps", 64))
    stream = batches(data, cfg.train.batch_size, RngStream(cfg.seed).spawn(3))
    est = [next(stream) for _ in range(steps)]
    ctx = estimate_gradients(model, est, steps) if info.needs_gradients else GradContext()
    if info.needs_covariance:
        estimate_activation_cov(model, est, steps, ctx)
    return ctx


def run_experiment(cfg: ExperimentConfig, data: Dataset | None = None) -> RunReport:
    """Train one adapter variant at one learning rate; deterministic per seed."""
    info = variant_info(cfg.adapter.variant)
    data = data if data is not None else make_task(cfg.task, cfg.seed)
    model = AdaptedModel(data.bases, data.loss)
    ctx = _estimation_context(model, cfg, data, info)
    model.attach(cfg.adapter, cfg.seed, ctx)
    opt = make_optimizer(cfg.optimizer)
    steps = cfg.train.steps
    sched = LrSchedule(cfg.schedule.kind, steps, cfg.schedule.warmup_ratio, cfg.schedule.phase_length,
                       cfg.schedule.rewarmup_steps)
    controller = None
    first = model.layers[0][1]
    if isinstance(first, SvdAdapter) and not isinstance(first, SaLoRAAdapter):
        if first.kind == "adalora" or isinstance(first, IncreLoRAAdapter):
            controller = BudgetController(model, steps)
    report = RunReport(cfg.adapter.name, cfg.optimizer.lr, cfg.seed, config_hash(cfg),
                       trainable_params=model.num_trainable())
    with np.errstate(all="ignore"):
        init = model.evaluate(data.X_eval, data.Y_eval)
    report.initial_loss = init
    report.evals.append({"step": 0, "loss": init})
    best = init
    stream = batches(data, cfg.train.batch_size, RngStream(cfg.seed).spawn(4))
    for t in range(1, steps + 1):
        x, y = next(stream)
        with np.errstate(all="ignore"):
            train_loss, raw = model.loss_and_grads(x, y, train=True)
        if not math.isfinite(train_loss) or not all(np.all(np.isfinite(g)) for g in raw.values()):
            report.diverged = True
            report.steps_run = t
            break
        if controller is not None:
            controller.observe(raw)
        grads, mults = {}, {}
        for name, a in model.layers:
            pre = f"{name}."
            local = {k: raw[pre + k] for k in a.trainable}
            for k, v in a.rewrite_grads(local).items():
                grads[pre + k] = v
            for k, v in a.lr_multipliers().items():
                if k in a.trainable:
                    mults[pre + k] = v
        for bank in model.banks():
            for k in bank.trainable:
                grads[bank.full_name(k)] = raw[bank.full_name(k)]
        with np.errstate(all="ignore"):
            new = opt.step(model.parameters(), grads, sched.lr_at(cfg.optimizer.lr, t), mults)
        model.assign(new)
        for name, a in model.layers:
            ev = a.after_step(t, opt, f"{name}.")
            if any(v and v != "noop" for v in ev.values()):
                report.events.append({"step": t, "layer": name, **ev})
        if controller is not None:
            ev = controller.after_step(t, opt)
            if ev:
                report.events.append({"step": t, **ev})
        report.steps_run = t
        if t % cfg.train.eval_every == 0 or t == steps:
            with np.errstate(all="ignore"):
                loss = model.evaluate(data.X_eval, data.Y_eval)
            report.evals.append({"step": t, "loss": loss})
            if not math.isfinite(loss) or loss > cfg.train.divergence_factor * init:
                report.diverged = True
                break
            best = min(best, loss)
    report.best_loss = best
    report.final_loss = report.evals[-1]["loss"]
    if report.diverged:
        report.final_loss = math.inf
    return report


# -- sweeps ------------------------------------------------------------------------

@dataclass
class SweepReport:
    config_hash: str
    seed: int
    lrs: list
    lr_scale: float
    runs: list = field(default_factory=list)

    def best_by_variant(self) -> dict:
        best = {}
        for r in self.runs:
            if not r.diverged:
                best[r.variant] = min(best.get(r.variant, math.inf), r.best_loss)
            else:
                best.setdefault(r.variant, math.inf)
        return best

    def run(self, variant: str, lr: float) -> RunReport:
        for r in self.runs:
            if r.variant == variant and r.lr == lr:
                return r
        raise KeyError((variant, lr))

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash, "seed": self.seed, "lrs": self.lrs, "lr_scale": self.lr_scale,
            "best_by_variant": self.best_by_variant(), "runs": [r.to_dict() for r in self.runs],
        }


def _sweep_job(args):
    cfg, grid_lr = args
    rep = run_experiment(cfg)
    rep.lr = grid_lr
    return rep


def run_sweep(cfg: ExperimentConfig, lrs=None, jobs: int = 1) -> SweepReport:
    """One run per (variant, learning rate); ``lr_scale`` multiplies every grid point.

    Runs are independent, so ``jobs > 1`` uses worker processes; the report
    order is fixed by (variant order, grid order) either way.
    """
    lrs = list(cfg.sweep.lrs if lrs is None else lrs)
    if not lrs:
        raise ConfigError("sweep needs at least one learning rate")
    variants = list(cfg.sweep.variants) or [cfg.adapter]
    work = [(cfg.with_run(v, lr * cfg.sweep.lr_scale), lr) for v in variants for lr in lrs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_sweep_job, work))
    else:
        runs = [_sweep_job(w) for w in work]
    return SweepReport(config_hash(cfg), cfg.seed, lrs, cfg.sweep.lr_scale, runs)


# -- serialization --------------------------------------------------------------------

def _json_safe(obj):
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def to_json(obj) -> str:
    """Deterministic JSON: sorted keys, non-finite floats as strings, trailing newline."""
    return json.dumps(_json_safe(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def report_rows(report) -> list[dict]:
    runs = report.runs if isinstance(report, SweepReport) else [report]
    rows = []
    for r in runs:
        best = math.inf
        for e in r.evals:
            if math.isfinite(e["loss"]):
                best = min(best, e["loss"])
            rows.append({"variant": r.variant, "lr": r.lr, "step": e["step"], "loss": e["loss"],
                         "best_loss": best, "diverged": r.diverged})
    return rows


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else v)
                    for k, v in row.items() if k in CSV_COLUMNS})
    return buf.getvalue()

