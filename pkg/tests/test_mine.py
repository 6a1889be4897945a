import csv
import math

import numpy as np
import pytest

from taskdriven import autodiff as ad
from taskdriven.autodiff import ContractViolation, Tensor
from taskdriven.envs import LavaEnv
from taskdriven.mine import (
    MineDivergenceError,
    MineEstimator,
    derangement,
    dv_objective,
    ema_update,
    marginal_pairs,
    mine_estimate,
    mine_grad_wrt_policy,
    mine_step_gradient,
    pathwise_mi,
    train_mine,
    unroll_trvs,
    write_mine_log,
)
from taskdriven.nets import MineCritic, build_lava_nets
from taskdriven.oracles import correlated_gaussians, gaussian_mi, gaussian_mi_check
from taskdriven.training import rollout_batch


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def constant_critic(k):
    return lambda x, z: ad.add(ad.scale(ad.reshape(ad.take(z, np.array([0]), axis=1), (z.shape[0],)), 0.0), Tensor(k))


class TestEma:
    def test_examples(self):
        assert ema_update(1.0, 2.0, 0.5) == 1.5
        assert ema_update(7.0, 2.0, 0.0) == 2.0
        assert ema_update(None, 3.0, 0.9) == 3.0

    def test_constant_sequence(self):
        v = None
        for _ in range(10):
            v = ema_update(v, 4.0, 0.3)
            assert v == 4.0

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            ema_update(1.0, 1.0, 1.0)


class TestDvObjective:
    def test_constant_critic_is_zero(self, rng):
        x, z = rng.normal(size=(20, 1)), rng.normal(size=(20, 1))
        assert dv_objective(constant_critic(2.5), (x, z), (x, z[::-1])).item() == pytest.approx(0.0, abs=1e-12)

    def test_same_batches_non_positive(self, rng):
        critic = MineCritic.init(rng, 1, 1, 16)
        x, z = rng.normal(size=(50, 1)), rng.normal(size=(50, 1))
        assert dv_objective(critic, (x, z), (x, z)).item() <= 1e-12

    def test_empty(self):
        with pytest.raises(ContractViolation):
            dv_objective(constant_critic(0.0), (np.zeros((0, 1)), np.zeros((0, 1))), (np.zeros((1, 1)), np.zeros((1, 1))))


class TestTraining:
    def make(self, seed=0, **kw):
        return MineEstimator(MineCritic.init(np.random.default_rng(seed), 1, 1, 16), **kw)

    def test_zero_epochs_leaves_parameters(self, rng):
        est = self.make()
        before = est.arrays()
        train_mine(est, rng.normal(size=(30, 1)), rng.normal(size=(30, 1)), 0, 10, rng)
        for k, v in est.arrays().items():
            assert v.tobytes() == before[k].tobytes()

    def test_minibatch_smaller_than_batch(self, rng):
        with pytest.raises(ContractViolation):
            train_mine(self.make(), np.zeros((10, 1)), np.zeros((10, 1)), 1, 10, rng)

    def test_deterministic(self):
        x, z = correlated_gaussians(0.5, 200, np.random.default_rng(0))
        a, b = self.make(lr=1e-3), self.make(lr=1e-3)
        train_mine(a, x, z, 50, 20, np.random.default_rng(5))
        train_mine(b, x, z, 50, 20, np.random.default_rng(5))
        for k, v in a.arrays().items():
            assert v.tobytes() == b.arrays()[k].tobytes()
        assert a.ema_denominator == b.ema_denominator > 0

    def test_ema_with_alpha_zero_is_plain_dv_gradient(self, rng):
        est = self.make(ema_alpha=0.0)
        est.ema_denominator = 123.0
        x, zj, zm = rng.normal(size=(3, 25, 1))
        grads, _ = mine_step_gradient(est, x, zj, zm)
        params = est.params()
        plain = ad.grad_of(ad.neg(dv_objective(est.critic, (x, zj), (x, zm))), params.values())
        for g, k in zip(plain, params):
            np.testing.assert_allclose(grads[k], g, rtol=1e-10, atol=1e-14)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_diagnostics(self, rng):
        est = self.make()
        est.critic.layers[-1].bias.data[:] = 1e3
        with pytest.raises(MineDivergenceError, match="theta"):
            train_mine(est, rng.normal(size=(30, 1)), rng.normal(size=(30, 1)), 1, 10, rng)

    def test_log_rows(self, rng, tmp_path):
        log = []
        train_mine(self.make(), rng.normal(size=(30, 1)), rng.normal(size=(30, 1)), 6, 10, rng, log, log_every=2)
        assert [row[0] for row in log] == [2, 4, 6]
        path = tmp_path / "mine_log.csv"
        write_mine_log(path, [(s, 3, j, e) for s, j, e in log])
        write_mine_log(path, [(8, 3, 0.1, 1.0)])
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["epoch", "timestep", "j_dv", "ema_denominator"] and len(rows) == 5


class TestEstimate:
    def test_small_batch(self):
        with pytest.raises(ContractViolation):
            mine_estimate(constant_critic(0.0), np.zeros((1, 1)), np.zeros((1, 1)), np.random.default_rng(0))

    def test_untrained_is_finite(self, rng):
        est = MineEstimator(MineCritic.init(rng, 1, 1, 16))
        assert math.isfinite(mine_estimate(est, rng.normal(size=(40, 1)), rng.normal(size=(40, 1)), rng))

    def test_derangement_has_no_fixed_points(self, rng):
        for n in (2, 3, 10, 101):
            p = derangement(n, rng)
            assert sorted(p) == list(range(n)) and np.all(p != np.arange(n))


class TestGaussianOracle:
    def test_independent(self):
        r = gaussian_mi_check(0.0)
        assert -0.05 <= r.estimate <= 0.1

    def test_moderate_correlation(self):
        r = gaussian_mi_check(0.5)
        assert abs(r.estimate - gaussian_mi(0.5)) <= 0.05

    def test_strong_correlation_within_fifteen_percent(self):
        r = gaussian_mi_check(0.9, steps=2000)
        assert abs(r.estimate - gaussian_mi(0.9)) <= 0.15 * gaussian_mi(0.9)
        # underestimate, with a little room for sampling noise
        assert r.estimate <= gaussian_mi(0.9) + 0.1

    def test_constant_trv_carries_no_information(self, rng):
        x = rng.standard_normal((10_000, 1))
        z = np.ones_like(x)
        est = MineEstimator(MineCritic.init(rng, 1, 1, 32), lr=1e-3, ema_alpha=0.99)
        train_mine(est, x, z, 1000, 500, rng)
        assert mine_estimate(est, x, z, rng) <= 0.02

    def test_identity_trv_estimate_grows(self, rng):
        x = rng.standard_normal((10_000, 1))
        est = MineEstimator(MineCritic.init(rng, 1, 1, 64), lr=1e-3, ema_alpha=0.99)
        values = []
        for _ in range(3):
            train_mine(est, x, x, 1000, 500, rng)
            values.append(mine_estimate(est, x, x, rng))
        assert values[-1] > 2.0 and values[-1] > values[0]


# ---------------------------------------------------------------------------
# pathwise gradient


def quadratic_critic(a):
    def critic(x, z):
        zz = ad.reshape(ad.take(z, np.array([0]), axis=1), (z.shape[0],))
        xx = ad.reshape(ad.take(x, np.array([0]), axis=1), (x.shape[0],))
        return ad.sub(ad.scale(ad.mul(xx, zz), a), ad.scale(ad.square(zz), 0.5))

    return critic


@pytest.fixture
def small_batch():
    params = build_lava_nets(np.random.default_rng(4), trv_dim=1, hidden=4)
    batch = rollout_batch(params, LavaEnv(), None, 24, seed=2)
    return params, batch


class TestPathwiseGradient:
    def test_constant_critic_gives_zero_gradient(self, small_batch):
        params, batch = small_batch
        grads = mine_grad_wrt_policy(constant_critic(1.0), params, batch, 2)
        assert grads and all(np.all(g == 0) for g in grads.values())
        assert all(k.startswith("q") for k in grads)

    def test_matches_finite_differences(self, small_batch):
        params, batch = small_batch
        t = 2
        critic = quadratic_critic(0.8)
        grads = mine_grad_wrt_policy(critic, params, batch, t)
        keys = np.concatenate([batch.states[:, t], batch.trv_noise[:, t]], axis=1)
        pairs = marginal_pairs(keys, 8)

        def value():
            with ad.no_grad():
                trv = unroll_trvs(params, batch.obs, batch.trv_noise, t)[t]
                return float(pathwise_mi(critic, batch.states[:, t], trv, pairs).data)

        blocks = params.blocks()
        worst = 0.0
        for name in ("q/t0/layer0/weight", "q/t1/mean/bias", "q/t2/log_std/weight", "q/t2/layer1/bias"):
            arr = blocks[name].data
            fd = np.zeros_like(arr)
            for i in range(arr.size):
                orig = arr.flat[i]
                arr.flat[i] = orig + 1e-6
                up = value()
                arr.flat[i] = orig - 1e-6
                down = value()
                arr.flat[i] = orig
                fd.flat[i] = (up - down) / 2e-6
            scale = max(np.linalg.norm(fd), np.linalg.norm(grads[name]), 1e-8)
            worst = max(worst, np.linalg.norm(fd - grads[name]) / scale)
        assert worst <= 1e-3
        # later encoders cannot affect x~_t
        assert np.all(grads["q/t3/mean/weight"] == 0)

    def test_invariant_to_rollout_order(self, small_batch):
        params, batch = small_batch
        critic = quadratic_critic(0.5)
        a = mine_grad_wrt_policy(critic, params, batch, 3)
        perm = np.random.default_rng(0).permutation(batch.n)
        b = mine_grad_wrt_policy(critic, params, batch.subset(perm), 3)
        for k in a:
            np.testing.assert_allclose(a[k], b[k], rtol=1e-9, atol=1e-13)

    def test_requires_stored_noise(self, small_batch):
        params, batch = small_batch
        batch.trv_noise = None
        with pytest.raises(ContractViolation):
            mine_grad_wrt_policy(quadratic_critic(1.0), params, batch, 1)

    def test_marginal_pairs_are_off_diagonal(self, rng):
        keys = rng.normal(size=(10, 3))
        a, b = marginal_pairs(keys, 4)
        assert len(a) == 40 and np.all(a != b)
        pa, pb = marginal_pairs(keys[::-1], 4)
        as_rows = lambda i, j, k: sorted(map(tuple, np.concatenate([k[i], k[j]], axis=1).tolist()))  # noqa: E731
        assert as_rows(a, b, keys) == as_rows(pa, pb, keys[::-1])
