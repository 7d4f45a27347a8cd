"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
report. All tolerances are fixed here, not configurable.
"""

import json
import time

import numpy as np
import pytest

from oracles import finite_difference_gradient, max_relative_error, min_preactivation_margin

from mergelab.cli import _accuracy_per_task, main
from mergelab.core import ParamVector, TensorSlot
from mergelab.datasets import generate_suite
from mergelab.diagnostics import acc_at_k, bias_comparison, disentanglement_residual
from mergelab.merging import task_arithmetic, task_vector, ties_merge, weight_average
from mergelab.model import ModelSpec, backward, init_params
from mergelab.se_merging import rescale_coefficients, remerge_into, se_evaluate
from mergelab.training import TrainConfig, finetune, pretrain


def report(criterion, detail):
    print(f"\nACCEPTANCE {criterion} PASS — {detail}")


def flat_pv(values):
    arr = np.asarray(values, dtype=np.float32)
    return ParamVector(arr, (TensorSlot("w", 0, (arr.size,)),))


class TestCriterion1HypothesisAnalogue:
    def test_acc_at_1_deep_layer(self, trained):
        spec, suite = trained["spec"], trained["suite"]
        started = time.time()
        rep = acc_at_k(spec, suite, trained["theta_pt"], trained["taus"], 0.3)
        elapsed = time.time() - started
        layer = spec.depth - 1
        per_task = [rep.acc(t, layer, 1) for t in range(suite.num_tasks)]
        assert min(per_task) >= 0.90
        for t in range(suite.num_tasks):
            for l in range(1, spec.depth + 1):
                accs = [rep.acc(t, l, k) for k in range(1, 5)]
                assert all(a <= b for a, b in zip(accs, accs[1:]))
                assert rep.acc(t, l, 4) == 1.0
        assert elapsed < 120.0
        report(1, f"acc@1 at layer {layer}: {['%.3f' % a for a in per_task]}, "
                  f"monotone, acc@4 == 1.0, computed in {elapsed:.1f}s")


class TestCriterion2SEDirection:
    def test_default_suite_gap_non_negative(self, trained):
        spec, suite = trained["spec"], trained["suite"]
        merged = task_arithmetic(trained["theta_pt"], trained["taus"], 0.3)
        static = float(np.mean(list(_accuracy_per_task(spec, merged, suite).values())))
        result = se_evaluate(
            spec, suite, trained["theta_pt"], trained["taus"], 0.3, spec.depth - 1
        )
        gap = result.mean_accuracy - static
        assert gap >= 0.0
        report(2, f"default suite: SE {result.mean_accuracy:.4f} vs static {static:.4f} "
                  f"(gap {gap:+.4f})")

    def test_conflict_suite_gap_strictly_positive(self):
        suite = generate_suite(4, 16, 4, 512, 256, seed=7, separation_sigmas=3.0)
        spec = ModelSpec((16, 256, 256, 4))
        pre = pretrain(
            spec, suite, TrainConfig(epochs=1, batch_size=128, learning_rate=0.05, seed=7)
        )
        taus = []
        for task in suite.tasks:
            ft = finetune(
                spec, pre.params, task,
                TrainConfig(epochs=3, batch_size=32, learning_rate=0.02,
                            seed=8 + task.task_id),
            )
            taus.append(task_vector(ft.params, pre.params))
        merged = task_arithmetic(pre.params, taus, 0.3)
        static = float(np.mean(list(_accuracy_per_task(spec, merged, suite).values())))
        result = se_evaluate(spec, suite, pre.params, taus, 0.3, spec.depth - 1)
        gap = result.mean_accuracy - static
        assert gap > 0.0
        report(2, f"conflict suite: SE {result.mean_accuracy:.4f} vs static {static:.4f} "
                  f"(gap {gap:+.4f}, strictly positive)")


class TestCriterion3BiasReduction:
    def test_se_bias_lower_on_most_tasks(self, trained):
        spec, suite = trained["spec"], trained["suite"]
        comparison = bias_comparison(
            spec, suite, trained["theta_pt"], trained["taus"], 0.3, spec.depth - 1
        )
        static = comparison.per_config["task_arithmetic"]
        dynamic = comparison.per_config["se_merging"]
        reduced = sum(dynamic[t] < static[t] for t in static)
        assert reduced >= 3
        report(3, f"SE bias below static on {reduced}/4 tasks "
                  f"(static {['%.4f' % static[t] for t in sorted(static)]}, "
                  f"SE {['%.4f' % dynamic[t] for t in sorted(dynamic)]})")


class TestCriterion4CoefficientIdentities:
    def test_budget_rank_and_uniform_reduction(self, trained, rng):
        for _ in range(1000):
            t = int(rng.integers(1, 9))
            distances = rng.uniform(0.0, 10.0, size=t).tolist()
            lam = float(rng.uniform(0.05, 1.0))
            coeffs = rescale_coefficients(distances, t, lam)
            assert abs(sum(coeffs) - t * lam) < 1e-6
            order_d = np.argsort(np.asarray(distances), kind="stable")
            order_c = np.argsort(-np.asarray(coeffs), kind="stable")
            assert np.array_equal(order_d, order_c)

        spec = trained["spec"]
        theta_pt, taus = trained["theta_pt"], trained["taus"]
        merged = task_arithmetic(theta_pt, taus, 0.3)
        uniform = rescale_coefficients([1.0] * 4, 4, 0.3)
        scratch = np.empty_like(merged.values)
        remerge_into(scratch, merged.values, taus, uniform, 0.3)
        assert np.abs(scratch - merged.values).max() < 1e-7
        report(4, "1000 random vectors: budget within 1e-6, ranks reversed exactly; "
                  "uniform distances reproduce static parameters within 1e-7")


class TestCriterion5WorkedExample:
    def test_hand_oracle_coefficients(self):
        got = rescale_coefficients([1.0, 3.0], 2, 0.3)
        assert got[0] == pytest.approx(0.4387, abs=5e-4)
        assert got[1] == pytest.approx(0.1613, abs=5e-4)
        report(5, f"rescale_coefficients([1, 3], T=2, lambda=0.3) = "
                  f"[{got[0]:.4f}, {got[1]:.4f}]")


class TestCriterion6MergeAlgebra:
    def test_merge_algebra(self, rng):
        # Round trip on exactly-representable values: bitwise.
        base = flat_pv(rng.integers(-512, 512, size=64) / 64.0)
        expert = flat_pv(rng.integers(-512, 512, size=64) / 64.0)
        tau = task_vector(expert, base)
        assert np.array_equal(task_arithmetic(base, [tau], 1.0).values, expert.values)

        # Weight-average selection and idempotence: exact.
        other = flat_pv(rng.normal(size=64))
        assert np.array_equal(weight_average([base, other], [1.0, 0.0]).values, base.values)
        assert np.array_equal(weight_average([base, base], [0.5, 0.5]).values, base.values)

        # density=1 with sign agreement reduces to the mean merge.
        signs = np.sign(rng.normal(size=16)).astype(np.float32)
        signs[signs == 0] = 1.0
        zero = flat_pv(np.zeros(16))
        agree = [
            task_vector(flat_pv(signs * rng.uniform(0.5, 1.5, 16)), zero)
            for _ in range(3)
        ]
        merged = ties_merge(zero, agree, scaling=0.3, density=1.0)
        mean_delta = np.mean([t.delta.values for t in agree], axis=0)
        assert np.abs(merged.values - 0.3 * mean_delta).max() < 1e-7

        # Both hand oracles: exact.
        b2 = flat_pv([0.0, 0.0])
        tau1 = task_vector(flat_pv([1.0, -4.0]), b2)
        tau2 = task_vector(flat_pv([3.0, 2.0]), b2)
        full = ties_merge(b2, [tau1, tau2], scaling=1.0, density=1.0)
        assert np.array_equal(full.values, np.array([2.0, -4.0], dtype=np.float32))
        half = ties_merge(b2, [tau1, tau2], scaling=1.0, density=0.5)
        assert np.array_equal(half.values, np.array([3.0, -4.0], dtype=np.float32))
        report(6, "round-trip bitwise, averaging cases exact, trim/elect/merge "
                  "hand oracles exact, density-1 reduction within 1e-7")


class TestCriterion7GradientCorrectness:
    def test_hundred_random_small_nets(self, rng):
        worst = 0.0
        checked = 0
        while checked < 100:
            n_hidden = int(rng.integers(1, 3))
            widths = [int(rng.integers(2, 9))]
            widths += [int(rng.integers(2, 9)) for _ in range(n_hidden)]
            widths.append(int(rng.integers(2, 9)))
            activation = "relu" if rng.integers(2) else "tanh"
            spec = ModelSpec(tuple(widths), activation)
            params = init_params(spec, int(rng.integers(1 << 30)))
            params = ParamVector(
                params.values + rng.normal(scale=0.4, size=params.size).astype(np.float32),
                params.index,
            )
            x = rng.normal(size=spec.input_dim).astype(np.float32)
            # Central differences need a smooth epsilon-ball: skip draws where
            # a relu pre-activation sits within reach of the probe step.
            if activation == "relu" and min_preactivation_margin(spec, params, x) < 5e-3:
                continue
            y = int(rng.integers(spec.num_classes))
            analytic = backward(spec, params, x, y).values.astype(np.float64)
            numeric = finite_difference_gradient(spec, params, x, y, eps=1e-3)
            worst = max(worst, max_relative_error(analytic, numeric))
            checked += 1
        assert worst < 1e-4
        report(7, f"100 random nets (widths <= 8): max relative error {worst:.2e} < 1e-4")


class TestCriterion8Determinism:
    def test_byte_identical_runs_across_thread_counts(self, tmp_path):
        config = {
            "seed": 5,
            "out_dir": str(tmp_path / "runs"),
            "run_id": "det",
            "suite": {"tasks": 2, "input_dim": 8, "classes": 3,
                      "train_per_task": 96, "test_per_task": 48},
            "model": {"hidden": [24, 24]},
            "pretrain": {"epochs": 4, "batch_size": 16, "learning_rate": 0.05},
            "finetune": {"epochs": 3, "batch_size": 16, "learning_rate": 0.02},
        }
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config))
        run_dir = tmp_path / "runs" / "det"

        assert main(["reproduce", "--config", str(path), "--threads", "1"]) == 0
        first = {
            p.name: p.read_bytes() for p in (run_dir / "checkpoints").iterdir()
        }
        summary_first = (run_dir / "summary.json").read_bytes()
        assert main(["reproduce", "--config", str(path), "--threads", "4"]) == 0
        for p in (run_dir / "checkpoints").iterdir():
            assert p.read_bytes() == first[p.name]
        assert (run_dir / "summary.json").read_bytes() == summary_first
        report(8, f"{len(first)} checkpoints and summary.json byte-identical "
                  f"across reruns with threads 1 and 4")


class TestCriterion9DisentanglementSanity:
    def test_residuals_and_frozen_ratio(self, trained, rng):
        spec, suite = trained["spec"], trained["suite"]
        theta_pt, taus = trained["theta_pt"], trained["taus"]

        # Single-task and zero-alpha cases collapse exactly.
        from mergelab.datasets import TaskDataset, TaskSuite

        xs = rng.normal(size=(8, 16)).astype(np.float32)
        ys = rng.integers(4, size=8).astype(np.int64)
        single = TaskSuite(
            (TaskDataset(0, xs, ys, xs, ys),), 1, 16, 4, 0, 0.5, 6.0,
            rng.normal(size=(1, 4, 16)), (1.0,),
        )
        lone = disentanglement_residual(spec, single, theta_pt, [taus[0]], [0.3])
        assert lone.per_task_residual[0] == 0.0
        zeros = disentanglement_residual(spec, suite, theta_pt, taus, [0.0] * 4)
        assert all(v == 0.0 for v in zeros.per_task_residual.values())

        # Frozen regression bound from the first calibration run of the
        # default pipeline (observed max per-task ratio 0.0014).
        full = disentanglement_residual(spec, suite, theta_pt, taus, [0.3] * 4)
        ratio = max(full.per_task_ratio.values())
        assert ratio < 0.01
        report(9, f"T=1 and alpha=0 residuals exactly 0; default-suite ratio "
                  f"{ratio:.5f} within frozen bound 0.01 "
                  f"(far-field ratio {full.far_field_ratio:.5f})")
