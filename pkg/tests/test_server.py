import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import optimize

from airvote.data import assigned_sets, generate_allocation
from airvote.errors import ConfigError
from airvote.learn import gradient, init_params, sign_quantize
from airvote.server import (
    ExperimentConfig,
    RoundPhases,
    build_datasets,
    config_to_dict,
    geometric_median,
    operation_counts,
    run,
    run_digital_gm,
    run_hierarchical,
    run_naive_signsgd,
    run_noise_free,
)
from airvote.worker import AttackSpec

BED = {"kind": "synthetic", "classes": 2, "per_class": 200, "test_per_class": 100, "features": 5, "separation": 2.0}


@pytest.fixture(scope="module")
def data():
    return build_datasets(BED, 0)


def cfg(**kw):
    base = dict(K=10, A=8, T=15, eta=0.02, seed=1, dataset=BED)
    base.update(kw)
    return ExperimentConfig(**base)


def _traj(res):
    return np.array([[m.train_loss, m.test_accuracy, m.sign_error_rate] for m in res.metrics])


class TestConfig:
    @pytest.mark.parametrize("bad", [
        dict(K=0), dict(c=1.0), dict(c=-0.1), dict(p=1.5), dict(T=0), dict(eta=0.0),
        dict(scheme="rotaf"), dict(model_kind="cnn"), dict(c=0.2),
    ])
    def test_rejected(self, bad):
        with pytest.raises(ConfigError):
            cfg(**bad)

    def test_batch_larger_than_subset(self, data):
        with pytest.raises(ConfigError):
            run(cfg(A=41), data)

    def test_echo(self):
        d = config_to_dict(cfg(c=0.2, attack=AttackSpec("mimic", 3)))
        assert d["attack"] == {"variant": "mimic", "target": 3} and d["K"] == 10


class TestRuns:
    def test_metrics_shape(self, data):
        res = run(cfg(c=0.2, attack=AttackSpec("omniscient")), data)
        assert len(res.metrics) == 15
        for m in res.metrics:
            assert 0 <= m.sign_error_rate <= 1 and 0 <= m.test_accuracy <= 1
            assert m.rho > 0 and m.min_channel_gain > 0
        assert res.power_violations == 0

    def test_deterministic(self, data):
        c = cfg(c=0.3, attack=AttackSpec("label_flip"))
        a, b = run(c, data), run(c, data)
        np.testing.assert_array_equal(_traj(a), _traj(b))
        np.testing.assert_array_equal(a.final_params.values, b.final_params.values)

    def test_thread_count_irrelevant(self, data):
        c = cfg(c=0.3, attack=AttackSpec("label_flip"))
        np.testing.assert_array_equal(_traj(run(c, data)), _traj(run(replace(c, threads=3), data)))

    def test_single_round_l1_move(self, data):
        res = run(cfg(T=1), data)
        start = init_params("logistic", 5, 2)
        assert np.abs(res.final_params.values - start.values).sum() == pytest.approx(0.02 * start.d)

    def test_reduction_to_naive(self, data):
        h = run_hierarchical(cfg(p=0.0, snr_db=None), data)
        n = run_naive_signsgd(cfg(p=0.7, snr_db=None), data)
        nf = run_noise_free(cfg(p=0.0), data)
        np.testing.assert_array_equal(_traj(h), _traj(n))
        np.testing.assert_array_equal(_traj(h), _traj(nf))

    def test_noise_free_equals_infinite_snr(self, data):
        a = run_noise_free(cfg(p=0.3), data)
        b = run_hierarchical(cfg(p=0.3, snr_db=math.inf), data)
        np.testing.assert_array_equal(_traj(a), _traj(b))

    def test_noise_only_adds_errors_at_start(self, data):
        c = cfg(K=40, p=1.0, A=4, T=10, snr_db=0.0)
        noisy, clean = run(c, data), run_noise_free(c, data)
        assert clean.metrics[0].sign_error_rate <= noisy.metrics[0].sign_error_rate
        assert np.mean([m.sign_error_rate for m in clean.metrics]) <= np.mean([m.sign_error_rate for m in noisy.metrics])

    def test_naive_loss_decreases(self, data):
        res = run_naive_signsgd(cfg(T=50, snr_db=30.0), data)
        assert res.metrics[-1].train_loss < res.metrics[0].train_loss - 0.05

    def test_stride(self, data):
        res = run(cfg(metrics_stride=4), data)
        assert [m.evaluated for m in res.metrics] == [t % 4 == 0 or t == 14 for t in range(15)]

    def test_sign_error_against_full_gradient(self, data):
        # a noiseless, attack-free run with p = 1 and large batches tracks the true sign closely
        res = run(cfg(p=1.0, A=40, snr_db=None, T=3), data)
        assert res.metrics[0].sign_error_rate <= 0.25


class TestAccounting:
    def test_table(self):
        h = operation_counts("hierarchical", 50, 0.1)
        assert (h["local_sgd_per_worker"], h["workers"], h["local_sgd"], h["gm"], h["aircomp"], h["digital"]) == (5, 50, 250, 0, 1, 0)
        assert h["local_sgd_expected"] == pytest.approx(295)
        g = operation_counts("digital_gm", 50)
        assert (g["local_sgd"], g["gm"], g["aircomp"], g["digital"]) == (50, 1, 0, 50)
        assert operation_counts("rotaf", 50, G=10)["aircomp"] == 10
        assert operation_counts("aircomp_gm", 50, U=200)["aircomp"] == 200
        with pytest.raises(ValueError):
            operation_counts("fedavg", 50)

    def test_run_counts_gradient_evals(self, data):
        c = cfg(p=0.3, T=4)
        res = run(c, data)
        S = assigned_sets(generate_allocation(10, 0.3, c.seed))
        assert res.counts["gradient_evals_total"] == 4 * sum(len(s) for s in S)
        assert res.counts["aircomp_aggregations"] == 4 and res.counts["digital_uploads"] == 0

    def test_expected_evals(self):
        K, p = 50, 0.1
        per_round = [generate_allocation(K, p, seed).entries.sum() for seed in range(200)]
        assert np.mean(per_round) == pytest.approx(K * (1 + (K - 1) * p), rel=0.02)

    def test_phases(self):
        ph = RoundPhases([0, 2])
        ph.submit_honest(0, "a")
        with pytest.raises(RuntimeError):
            ph.begin_byzantine()
        ph.submit_honest(2, "b")
        assert ph.begin_byzantine() == {0: "a", 2: "b"}
        with pytest.raises(RuntimeError):
            ph.submit_honest(1, "c")


class TestGeometricMedian:
    def test_line(self):
        pts = np.array([[0.0], [1.0], [10.0]])
        z, _, ok = geometric_median(pts)
        brute = optimize.minimize_scalar(lambda x: np.abs(x - pts[:, 0]).sum(), bounds=(0, 10), method="bounded",
                                         options={"xatol": 1e-10}).x
        assert ok and abs(z[0] - brute) <= 1e-6 and abs(z[0] - 1.0) <= 1e-6

    def test_identical_points(self):
        g = np.array([0.3, -1.0, 2.0])
        z, it, ok = geometric_median(np.tile(g, (5, 1)))
        np.testing.assert_allclose(z, g)
        assert it == 1 and ok

    def test_non_convergence_flag(self):
        rng = np.random.default_rng(0)
        z, it, ok = geometric_median(rng.normal(size=(20, 3)), max_iter=2)
        assert it == 2 and not ok

    def test_robust_to_sign_flips(self, data):
        train, _ = data
        params = init_params("logistic", 5, 2).with_values(np.random.default_rng(0).normal(size=12) * 0.3)
        g = gradient(params, train)
        rng = np.random.default_rng(1)
        honest = [gradient(params, train, rng.choice(len(train), 32, replace=False)) for _ in range(12)]
        pts = np.stack(honest + [-g] * 8)
        z, _, _ = geometric_median(pts)
        assert np.mean(sign_quantize(z) == sign_quantize(g)) > 0.95

    def test_digital_gm_run(self, data):
        res = run_digital_gm(cfg(c=0.3, attack=AttackSpec("oracle_sign_flip"), T=30), data)
        assert res.counts["digital_uploads"] == 300 and res.counts["gm_computations"] == 30
        assert res.counts["gradient_evals_total"] == 7 * 30
        assert all(math.isnan(m.rho) for m in res.metrics)
        assert res.final_accuracy > 0.7
