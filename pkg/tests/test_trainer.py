import csv
import json
from collections import Counter

import numpy as np
import pytest
import torch

from amortized_al.kernel_gp import DTYPE, KernelConfig
from amortized_al.policy import init_policy, load_checkpoint
from amortized_al.rff import evaluate
from amortized_al.trainer import (
    EPOCH_STEPS,
    ConfigError,
    TrainConfig,
    TrainRecord,
    batch_loss,
    chunk_kernels,
    lr_at,
    read_record,
    rollout_myopic,
    rollout_nonmyopic,
    sample_episodes,
    sample_prior,
    select_best,
    simulate,
    train,
)


def tiny(**kw):
    base = dict(dim=1, T=3, num_kernels=2, noise_sets=2, functions_per_prior=2, num_features=20, steps=4)
    base.update(kw)
    return TrainConfig(**base).validate()


def constant_policy(X, Y):
    """Stand-in policy for structural tests: always queries the centre."""
    return torch.full(X.shape[:-2] + X.shape[-1:], 0.5, dtype=DTYPE)


class TestPrior:
    def test_ranges_and_sum(self):
        cfg = sample_prior(torch.Generator().manual_seed(0), 2, (10_000,))
        v, s2, ls = cfg.variance, cfg.noise_variance, cfg.lengthscales
        assert float(v.min()) >= 0.505 and float(v.max()) <= 1.0
        assert float((v + s2 - 1.01).abs().max()) < 1e-12
        assert float(s2.min()) >= 0.01 - 1e-12 and float(s2.max()) <= 0.505 + 1e-12
        assert float(ls.min()) >= 0.05 and float(ls.max()) <= 1.0
        # lengthscale dimensions are drawn independently
        assert abs(np.corrcoef(ls[:, 0].numpy(), ls[:, 1].numpy())[0, 1]) < 0.05

    def test_reproducible(self):
        a = sample_prior(torch.Generator().manual_seed(4), 1, (5,))
        b = sample_prior(torch.Generator().manual_seed(4), 1, (5,))
        assert torch.equal(a.variance, b.variance) and torch.equal(a.lengthscales, b.lengthscales)


class TestSchedule:
    def test_lr_at(self):
        assert lr_at(0, 1e-3) == 1e-3
        assert lr_at(49, 1e-3) == 1e-3
        assert lr_at(50, 1e-3) == pytest.approx(0.98e-3, rel=1e-15)
        assert lr_at(100, 1e-3) == pytest.approx(0.98**2 * 1e-3, rel=1e-15)

    def test_trained_lr_trace(self):
        rec = train(tiny(steps=101, num_kernels=1, noise_sets=1, functions_per_prior=1, T=1))
        lr0 = 1e-4
        assert rec.lrs[0] == lr0 and rec.lrs[49] == lr0
        assert rec.lrs[50] == pytest.approx(0.98 * lr0, rel=1e-12)
        assert rec.lrs[100] == pytest.approx(0.98**2 * lr0, rel=1e-12)


class TestConfig:
    def test_default_batch_is_6250(self):
        cfg = TrainConfig()
        assert (cfg.num_kernels, cfg.noise_sets, cfg.functions_per_prior) == (25, 10, 25)
        assert cfg.experiments_per_step == 6250

    def test_default_steps(self):
        assert TrainConfig(loss="entropy").steps == 20_000
        assert TrainConfig(loss="entropy_v2").steps == 20_000
        assert TrainConfig(loss="reg_entropy").steps == 10_000
        assert TrainConfig(loss="reg_entropy_v2").steps == 10_000

    def test_myopic_defaults(self):
        cfg = TrainConfig(algorithm="myopic")
        assert cfg.num_kernels == 250 and cfg.num_chunks == 20

    def test_grid_must_be_large(self):
        with pytest.raises(ConfigError, match="train.n_grid"):
            TrainConfig(loss="reg_entropy", T=10, n_grid=49).validate()
        TrainConfig(loss="reg_entropy", T=10, n_grid=50).validate()
        TrainConfig(loss="entropy", T=10, n_grid=0).validate()

    def test_unknown_loss_lists_valid(self):
        with pytest.raises(ConfigError) as err:
            TrainConfig(loss="mi").validate()
        assert "reg_entropy_v2" in str(err.value)

    def test_nonpositive_field(self):
        with pytest.raises(ConfigError, match="train.T"):
            TrainConfig(T=0).validate()

    def test_toml(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('[train]\ndim = 2\nT = 4\nloss = "reg_entropy"\nn_grid = 20\n\n[prior]\nlengthscale_range = [0.1, 0.5]\n')
        cfg = TrainConfig.from_toml(path)
        assert cfg.dim == 2 and cfg.T == 4 and cfg.prior.lengthscale_range == (0.1, 0.5)
        assert cfg.steps == 10_000

    def test_toml_unknown_field(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[train]\nlearning_rate = 0.1\n")
        with pytest.raises(ConfigError, match="train.learning_rate"):
            TrainConfig.from_toml(path)

    def test_toml_syntax_error(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[train\n")
        with pytest.raises(ConfigError):
            TrainConfig.from_toml(path)


class TestNonmyopic:
    def test_structure(self):
        cfg = tiny(T=3, n_init=2)
        batch = rollout_nonmyopic(init_policy(1), cfg, torch.Generator().manual_seed(0))
        assert len(batch) == cfg.experiments_per_step == 8
        assert batch.X_init.shape == (8, 2, 1) and batch.X_query.shape == (8, 3, 1)
        assert batch.forward_calls == 3
        assert not batch.has_grid

    def test_queries_follow_the_policy_in_order(self):
        policy = init_policy(1, seed=1)
        gen = torch.Generator().manual_seed(2)
        episodes = sample_episodes(sample_prior(gen, 1, (2,)), 1, 2, 1, 3, gen, num_features=10)
        batch = simulate(policy, episodes)
        with torch.no_grad():
            for t in range(3):
                X = torch.cat([batch.X_init, batch.X_query[:, :t]], dim=1)
                Y = torch.cat([batch.Y_init, batch.Y_query[:, :t]], dim=1)
                assert torch.equal(policy(X, Y), batch.X_query[:, t])

    def test_deterministic(self):
        cfg = tiny()
        policy = init_policy(1)
        a = rollout_nonmyopic(policy, cfg, torch.Generator().manual_seed(9))
        b = rollout_nonmyopic(policy, cfg, torch.Generator().manual_seed(9))
        assert torch.equal(a.X_query, b.X_query) and torch.equal(a.Y_query, b.Y_query)

    def test_labels_come_from_the_stored_function(self):
        batch = rollout_nonmyopic(init_policy(1), tiny(), torch.Generator().manual_seed(1))
        f_vals = evaluate(batch.function, batch.X_query)
        assert torch.allclose(batch.Y_query - f_vals, batch.query_noise, atol=1e-12)

    def test_noise_sets_shared_across_functions(self):
        gen = torch.Generator().manual_seed(3)
        K, S, F = 2, 3, 4
        ep = sample_episodes(sample_prior(gen, 1, (K,)), S, F, 2, 2, gen, num_features=10)
        noise = ep.query_noise.reshape(K, S, F, 2)
        assert torch.equal(noise[:, :, 0], noise[:, :, 3])
        assert not torch.equal(noise[:, 0], noise[:, 1])
        # functions differ along F but are shared along S
        w = ep.function.weights.reshape(K, S, F, -1)
        assert torch.equal(w[:, 0], w[:, 2]) and not torch.equal(w[:, :, 0], w[:, :, 1])
        # the kernel of experiment (k*S+s)*F+f is kernel k
        v = ep.cfg.variance.reshape(K, S, F)
        assert torch.equal(v[0], v[0, 0, 0].expand(S, F))

    def test_noise_variance_matches(self):
        gen = torch.Generator().manual_seed(5)
        kernels = KernelConfig(torch.tensor([0.7]), torch.tensor([[0.3]]), torch.tensor([0.31]))
        ep = sample_episodes(kernels, 10_000, 1, 1, 1, gen, num_features=10)
        batch = simulate(constant_policy, ep)
        resid = (batch.Y_query - evaluate(batch.function, batch.X_query)).numpy().ravel()
        assert abs(resid.var() / 0.31 - 1) < 0.05

    def test_grid_resampled_every_step(self):
        cfg = tiny(loss="reg_entropy", n_grid=15)
        gen = torch.Generator().manual_seed(0)
        prev = None
        for _ in range(100):
            batch = rollout_nonmyopic(constant_policy, cfg, gen)
            assert batch.X_grid.shape == (8, 15, 1)
            if prev is not None:
                assert not torch.equal(prev, batch.X_grid)
            prev = batch.X_grid


class TestMyopic:
    def test_chunking(self):
        chunks = chunk_kernels(250, 20)
        sizes = Counter(len(c) for c in chunks)
        assert sizes == {13: 10, 12: 10}
        assert sorted(i for c in chunks for i in c) == list(range(250))

    def test_context_size_support(self):
        cfg = tiny(algorithm="myopic", T=4, n_init=2, num_kernels=20, num_chunks=20, noise_sets=1,
                   functions_per_prior=1, num_features=2)
        gen = torch.Generator().manual_seed(0)
        sizes = Counter()
        for _ in range(500):
            for b in rollout_myopic(constant_policy, cfg, gen):
                sizes[b.X_init.shape[1]] += 1
        assert sum(sizes.values()) == 10_000
        assert set(sizes) == {2, 3, 4, 5}

    def test_one_forward_call_per_experiment(self):
        calls = []

        def counting(X, Y):
            calls.append(X.shape[0])
            return constant_policy(X, Y)

        cfg = tiny(algorithm="myopic", num_kernels=6, num_chunks=3)
        batches = rollout_myopic(counting, cfg, torch.Generator().manual_seed(0))
        assert all(b.forward_calls == 1 and b.X_query.shape[1] == 1 for b in batches)
        assert sum(calls) == cfg.experiments_per_step

    def test_t1_matches_nonmyopic(self):
        policy = init_policy(1)
        non = rollout_nonmyopic(policy, tiny(T=1), torch.Generator().manual_seed(6))
        my = rollout_myopic(policy, tiny(T=1, algorithm="myopic", num_chunks=1), torch.Generator().manual_seed(6))
        assert len(my) == 1
        assert torch.equal(non.X_query, my[0].X_query) and torch.equal(non.Y_query, my[0].Y_query)
        assert batch_loss("entropy", non).item() == batch_loss("entropy", my).item()


class TestTrain:
    def test_record_files(self, tmp_path):
        rec = train(tiny(steps=60), tmp_path, seed=3)
        run = tmp_path / "run_3"
        assert (run / "epoch_1.ckpt").exists() and (run / "final.ckpt").exists()
        assert rec.final_checkpoint == run / "final.ckpt"
        with open(run / "record.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["step", "loss", "lr", "wall_ms"] and len(rows) == 60
        summary = json.loads((run / "summary.json").read_text())
        assert summary["steps"] == 60 and len(summary["epoch_means"]) == 1
        again = read_record(run)
        assert again.losses == rec.losses and again.lrs == rec.lrs
        assert load_checkpoint(rec.final_checkpoint).dim == 1

    def test_bitwise_determinism(self):
        a = train(tiny(loss="reg_entropy_v2", n_grid=15, steps=5), seed=2)
        b = train(tiny(loss="reg_entropy_v2", n_grid=15, steps=5), seed=2)
        assert a.losses == b.losses
        for va, vb in zip(a.policy.state_dict().values(), b.policy.state_dict().values()):
            assert torch.equal(va, vb)

    @pytest.mark.parametrize("loss", ["entropy", "reg_entropy", "entropy_v2", "reg_entropy_v2"])
    @pytest.mark.parametrize("algorithm", ["nonmyopic", "myopic"])
    def test_every_combination_runs(self, loss, algorithm):
        cfg = tiny(loss=loss, algorithm=algorithm, n_grid=15, steps=2, num_chunks=2)
        rec = train(cfg, seed=0)
        assert len(rec.losses) == 2 and all(np.isfinite(rec.losses))

    def test_parameters_change(self):
        rec = train(tiny(steps=3), seed=0)
        fresh = init_policy(1, 0)
        assert any(not torch.equal(a, b) for a, b in zip(rec.policy.state_dict().values(), fresh.state_dict().values()))


class TestSelectBest:
    @staticmethod
    def record(seed, value):
        return TrainRecord(seed=seed, losses=[value] * (10 * EPOCH_STEPS))

    def test_single(self):
        r = self.record(0, -1.0)
        assert select_best([r]) is r

    def test_argmin(self):
        recs = [self.record(0, -3.1), self.record(1, -2.9), self.record(2, -3.5)]
        assert select_best(recs).seed == 2

    def test_tie_goes_to_lower_seed(self):
        recs = [self.record(4, -3.0), self.record(1, -3.0), self.record(2, -2.0)]
        assert select_best(recs).seed == 1

    def test_uses_last_ten_epochs(self):
        a = TrainRecord(seed=0, losses=[-100.0] * EPOCH_STEPS + [-1.0] * (10 * EPOCH_STEPS))
        b = TrainRecord(seed=1, losses=[0.0] * EPOCH_STEPS + [-2.0] * (10 * EPOCH_STEPS))
        assert a.last10_mean == -1.0 and select_best([a, b]).seed == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            select_best([])
