import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapterforge import trainer
from adapterforge.config import (
    DEFAULT_LR_GRID,
    AdapterConfig,
    ExperimentConfig,
    OptimizerConfig,
    ScheduleConfig,
    SweepConfig,
    TaskConfig,
    TrainConfig,
)
from adapterforge.trainer import (
    CSV_COLUMNS,
    SGD,
    AdamW,
    AdaptedModel,
    LrSchedule,
    make_task,
    report_rows,
    run_experiment,
    run_sweep,
    to_csv,
    to_json,
)

SMALL_TASK = TaskConfig(in_features=16, out_features=16, teacher_rank=2, samples=2048, eval_samples=512)


def small_cfg(variant="lora", lr=1e-2, steps=100, rank=4, sched="cosine", **kw):
    params = kw.pop("params", {})
    return ExperimentConfig(
        seed=kw.pop("seed", 0),
        task=kw.pop("task", SMALL_TASK),
        adapter=AdapterConfig(variant=variant, rank=rank, alpha=2.0 * rank, params=params),
        optimizer=OptimizerConfig(kind=kw.pop("opt", "adamw"), lr=lr),
        schedule=ScheduleConfig(kind=sched),
        train=TrainConfig(steps=steps, batch_size=64, eval_every=kw.pop("eval_every", 25)),
        **kw,
    )


class TestAdamW:
    def test_zero_grads_no_decay(self, nprng):
        p = {"w": nprng.normal(size=(3, 2))}
        out = AdamW().step(p, {"w": np.zeros((3, 2))}, 0.1)
        assert np.array_equal(out["w"], p["w"])

    def test_first_step_closed_form(self, nprng):
        p, g = nprng.normal(size=(4, 3)), nprng.normal(size=(4, 3))
        lr, eps = 1e-2, 1e-8
        out = AdamW(eps=eps).step({"w": p}, {"w": g}, lr)["w"]
        # bias-corrected moments after one step are g and g^2
        assert np.max(np.abs(out - (p - lr * g / (np.abs(g) + eps)))) <= 1e-12

    def test_reference_oracle_over_steps(self, nprng):
        b1, b2, eps, lr, wd = 0.9, 0.999, 1e-8, 3e-3, 0.01
        opt = AdamW((b1, b2), eps, wd)
        p = ref = nprng.normal(size=(3, 3))
        m = v = np.zeros((3, 3))
        for t in range(1, 8):
            g = nprng.normal(size=(3, 3))
            p = opt.step({"w": p}, {"w": g}, lr)["w"]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g**2
            ref = ref - lr * wd * ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert np.max(np.abs(p - ref)) <= 1e-12

    def test_decay_only(self, nprng):
        p = nprng.normal(size=(2, 2))
        out = AdamW(weight_decay=0.1).step({"w": p}, {"w": np.zeros((2, 2))}, 0.5)["w"]
        assert np.allclose(out, p * (1 - 0.05), atol=1e-15)

    def test_multiplier(self, nprng):
        p, g = np.zeros((2, 2)), nprng.normal(size=(2, 2))
        a = AdamW().step({"w": p}, {"w": g}, 1e-3)["w"]
        b = AdamW().step({"w": p}, {"w": g}, 1e-3, {"w": 16.0})["w"]
        assert np.allclose(b, 16 * a, rtol=1e-14)

    def test_reset(self, nprng):
        opt = AdamW()
        opt.step({"w": np.zeros(2)}, {"w": np.ones(2)}, 0.1)
        opt.reset(["w", "absent"])
        assert "w" not in opt.state


def test_sgd_momentum(nprng):
    opt = SGD(momentum=0.5)
    p = np.zeros(3)
    g = np.ones(3)
    p = opt.step({"w": p}, {"w": g}, 0.1)["w"]
    p = opt.step({"w": p}, {"w": g}, 0.1)["w"]
    assert np.allclose(p, -0.1 - 0.15)


class TestSchedules:
    def test_warmup_preset(self):
        assert ScheduleConfig().warmup_ratio == 0.03

    def test_warmup_then_cosine(self):
        s = LrSchedule("cosine", 100, 0.03)
        assert s.warmup_steps == 3
        assert [s.factor(t) for t in (1, 2, 3)] == pytest.approx([1 / 3, 2 / 3, 1.0])
        assert s.factor(100) == pytest.approx(0.0, abs=1e-15)

    def test_linear_decay(self):
        s = LrSchedule("linear_warmup_decay", 100, 0.1)
        assert s.factor(10) == 1.0 and s.factor(55) == pytest.approx(0.5) and s.factor(100) == 0.0

    def test_jagged_zero_at_phase_starts(self):
        s = LrSchedule("jagged", 400, 0.03, phase_length=100, rewarmup_steps=10)
        for t in (100, 200, 300):
            assert s.factor(t) == 0.0
            # continuous re-warm inside the phase
            assert 0 < s.factor(t + 1) < s.factor(t + 5) <= s.factor(t + 10) + 1e-12

    @settings(max_examples=80, deadline=None)
    @given(kind=st.sampled_from(["constant", "linear_warmup_decay", "cosine", "jagged"]),
           total=st.integers(1, 500), t=st.integers(1, 500))
    def test_nonnegative(self, kind, total, t):
        s = LrSchedule(kind, total, 0.03, phase_length=max(total // 4, 1))
        assert 0.0 <= s.factor(min(t, total)) <= 1.0


class TestTasks:
    def test_bit_exact_regeneration(self):
        a, b = make_task(SMALL_TASK, 3), make_task(SMALL_TASK, 3)
        assert all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("X", "Y", "X_eval", "Y_eval"))
        assert not np.array_equal(a.X, make_task(SMALL_TASK, 4).X)

    def test_teacher_is_low_rank_shift(self):
        d = make_task(SMALL_TASK, 0)
        delta = d.teacher[0] - d.bases[0]
        s = np.linalg.svd(delta, compute_uv=False)
        assert s[2] <= 1e-12 * s[0]

    def test_blob_labels(self):
        d = make_task(TaskConfig(kind="blob_classification", in_features=8, out_features=3, samples=60,
                                 eval_samples=12), 0)
        assert d.loss == "xent" and set(np.unique(d.Y)) <= {0.0, 1.0, 2.0}

    def test_depth(self):
        d = make_task(TaskConfig(in_features=6, out_features=4, depth=3, samples=10, eval_samples=4), 0)
        assert [b.shape for b in d.bases] == [(6, 6), (6, 6), (6, 4)]


class TestModel:
    def test_parameter_names(self):
        d = make_task(TaskConfig(in_features=6, out_features=4, depth=2, samples=10, eval_samples=4), 0)
        m = AdaptedModel(d.bases).attach(AdapterConfig(rank=2), 0)
        assert sorted(m.parameters()) == ["l0.A", "l0.B", "l1.A", "l1.B"]

    def test_gradients_match_finite_differences(self):
        d = make_task(TaskConfig(in_features=5, out_features=3, depth=2, samples=8, eval_samples=4), 0)
        m = AdaptedModel(d.bases).attach(AdapterConfig(rank=2), 0)
        rng = np.random.default_rng(0)
        m.assign({k: rng.normal(size=v.shape) for k, v in m.parameters().items()})
        _, grads = m.loss_and_grads(d.X, d.Y)
        params = m.parameters()
        h = 1e-6
        for name, v in params.items():
            for idx in np.ndindex(v.shape):
                vals = []
                for sign in (1, -1):
                    w = v.copy()
                    w[idx] += sign * h
                    m.assign({**params, name: w})
                    vals.append(m.evaluate(d.X, d.Y))
                m.assign(params)
                assert abs((vals[0] - vals[1]) / (2 * h) - grads[name][idx]) <= 1e-6


class TestRuns:
    def test_teacher_recovery_reaches_noise_floor(self):
        cfg = small_cfg(lr=1e-2, steps=600)
        data = make_task(cfg.task, cfg.seed)
        floor = 0.5 * np.mean((data.X_eval @ data.teacher[0] - data.Y_eval) ** 2)
        rep = run_experiment(cfg, data)
        assert not rep.diverged
        assert rep.best_loss <= 1.1 * floor

    def test_zero_lr_keeps_loss(self):
        rep = run_experiment(small_cfg(lr=0.0, steps=50))
        assert all(e["loss"] == rep.initial_loss for e in rep.evals)

    def test_large_lr_diverges(self):
        rep = run_experiment(small_cfg(lr=10.0, steps=100, opt="sgd"))
        assert rep.diverged and rep.final_loss == math.inf

    def test_deterministic(self):
        a = run_experiment(small_cfg(steps=40))
        b = run_experiment(small_cfg(steps=40))
        assert to_json(a.to_dict()) == to_json(b.to_dict())

    def test_eval_cadence(self):
        rep = run_experiment(small_cfg(steps=60, eval_every=25))
        assert [e["step"] for e in rep.evals] == [0, 25, 50, 60]
        assert rep.best_loss == min(e["loss"] for e in rep.evals)

    def test_lora_plus_multiplier_reaches_optimizer(self, monkeypatch):
        seen = []
        real = trainer.make_optimizer

        def spy(cfg):
            opt = real(cfg)
            step = opt.step

            def recording(params, grads, lr, multipliers=None):
                seen.append(dict(multipliers or {}))
                return step(params, grads, lr, multipliers)

            opt.step = recording
            return opt

        monkeypatch.setattr(trainer, "make_optimizer", spy)
        run_experiment(small_cfg("lora_plus", steps=3))
        assert seen and all(m == {"l0.B": 16.0} for m in seen)

    def test_adalora_budget_events(self):
        cfg = small_cfg("adalora", steps=60, rank=6, params={"t_i": 10, "t_f": 20, "target_rank": 3})
        rep = run_experiment(cfg)
        budgets = [e["budget"] for e in rep.events if "budget" in e]
        assert budgets[0] <= 6 and budgets[-1] == 3
        assert all(a >= b for a, b in zip(budgets, budgets[1:]))

    def test_adalora_needs_room(self):
        from adapterforge.config import ConfigError

        with pytest.raises(ConfigError):
            run_experiment(small_cfg("adalora", steps=50))

    def test_increlora_grows(self):
        cfg = small_cfg("increlora", steps=120, rank=2, params={"grow_every": 30, "grow_budget": 2})
        rep = run_experiment(cfg)
        grown = [e for e in rep.events if "grown" in e]
        assert 1 <= len(grown) <= 2


class TestSweep:
    def test_default_grid(self):
        assert DEFAULT_LR_GRID == (1e-6, 1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3)
        assert SweepConfig().lrs == DEFAULT_LR_GRID

    def test_singleton_equals_run(self):
        cfg = small_cfg(steps=30, lr=1e-2)
        sweep = run_sweep(cfg, [1e-2])
        assert to_json(sweep.runs[0].to_dict()) == to_json(run_experiment(cfg).to_dict())

    def test_rows_and_best(self):
        cfg = small_cfg(steps=30, sweep=SweepConfig(lrs=(1e-3, 1e-2, 5e-2)))
        sweep = run_sweep(cfg)
        assert len(sweep.runs) == 3
        best = sweep.best_by_variant()["lora"]
        assert all(best <= r.best_loss for r in sweep.runs)
        assert best in [r.best_loss for r in sweep.runs]

    def test_multiple_variants_and_scale(self):
        variants = (AdapterConfig("lora", 2, 4.0), AdapterConfig("lora", 2, 4.0, scaling_mode="rank_stabilized", label="rs"))
        cfg = small_cfg(steps=20, sweep=SweepConfig(lrs=(1e-3, 1e-2), lr_scale=2.0, variants=variants))
        sweep = run_sweep(cfg)
        assert [(r.variant, r.lr) for r in sweep.runs] == [("lora", 1e-3), ("lora", 1e-2), ("rs", 1e-3), ("rs", 1e-2)]
        direct = run_experiment(cfg.with_run(variants[0], 2e-3))
        assert direct.best_loss == sweep.run("lora", 1e-3).best_loss

    def test_parallel_matches_serial(self):
        cfg = small_cfg(steps=20, sweep=SweepConfig(lrs=(1e-3, 1e-2)))
        assert to_json(run_sweep(cfg, jobs=2).to_dict()) == to_json(run_sweep(cfg).to_dict())


class TestSerialization:
    def test_csv_columns(self):
        rep = run_experiment(small_cfg(steps=30))
        text = to_csv(report_rows(rep))
        header, *rows = text.splitlines()
        assert tuple(header.split(",")) == CSV_COLUMNS
        assert len(rows) == len(rep.evals) and text.endswith("\n")

    def test_json_non_finite(self):
        text = to_json({"a": math.inf, "b": math.nan, "c": np.float64(1.5)})
        assert json.loads(text) == {"a": "inf", "b": "nan", "c": 1.5} and text.endswith("\n")
