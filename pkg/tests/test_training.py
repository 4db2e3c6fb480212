import numpy as np
import pytest

from se3fm.backbone import SequenceRecord, atoms_to_frames
from se3fm.coupling import pairwise_cost, solve_assignment
from se3fm.data import toy_generate
from se3fm.errors import ConfigError, DataError, NumericError
from se3fm.geometry import (
    TangentField,
    conditional_field,
    geodesic_interpolant,
    rotation_distance,
    sample_noise_chain,
)
from se3fm.model import ModelConfig, ModelParams, init_params
from se3fm.training import (
    BatchItem,
    TrainConfig,
    TrainState,
    batch_size_for_length,
    fm_loss,
    load_checkpoint,
    make_epoch_plan,
    reft_filter,
    reft_loss,
    save_checkpoint,
    train_step,
    _loss_graph,
)

SMALL = ModelConfig(hidden=16, trunk_depth=2, seq_embed_dim=8, time_embed_dim=8,
                    pos_embed_dim=8, max_residues=64)


def make_items(rng, n_items=3, length=6):
    items = []
    for _ in range(n_items):
        items.append(
            BatchItem(
                x0=sample_noise_chain(length, rng, trans_scale=2.0),
                x1=sample_noise_chain(length, rng, trans_scale=2.0),
                seq=SequenceRecord(rng.integers(0, 20, size=length)),
            )
        )
    return items


def corpus(n_per_class=8, length=12):
    items = []
    for k in range(n_per_class):
        atoms, seq = toy_generate("helix", length, seed=1000 + k)
        items.append((atoms_to_frames(atoms), seq, np.zeros(length, bool)))
    return items


class TestFmLoss:
    def test_perfect_predictor_zero_loss(self, rng):
        items = make_items(rng)
        ts = rng.uniform(0.1, 1.0, size=len(items))
        preds = []
        for item, t in zip(items, ts):
            x_t = geodesic_interpolant(item.x0, item.x1, t)
            preds.append(conditional_field(x_t, item.x0, t))
        loss, per_item = fm_loss(None, items, ts, predictions=preds)
        assert loss < 1e-18
        assert np.abs(per_item).max() < 1e-18

    def test_zero_predictor_closed_form(self, rng):
        items = make_items(rng, n_items=2, length=8)
        ts = np.array([0.4, 0.9])
        zero = ModelParams(SMALL, np.zeros(init_params(SMALL).size))
        loss, per_item = fm_loss(zero, items, ts)
        expected = []
        for item in items:
            d = rotation_distance(item.x0.rot, item.x1.rot)
            s = np.linalg.norm(item.x1.trans - item.x0.trans, axis=1)
            expected.append(np.mean(d**2 + s**2))
        assert np.allclose(per_item, expected, rtol=1e-9)
        assert np.isclose(loss, np.mean(expected))

    def test_mask_all_but_one_equals_single(self, rng):
        items = make_items(rng, n_items=1, length=5)
        item = items[0]
        mask = np.array([True, True, False, True, True])
        masked_item = BatchItem(x0=item.x0, x1=item.x1, seq=item.seq, residue_mask=mask)
        single = BatchItem(
            x0=_slice_chain(item.x0, [2]),
            x1=_slice_chain(item.x1, [2]),
            seq=SequenceRecord(item.seq.tokens[[2]]),
        )
        ts = np.array([0.5])
        preds_masked = [_zero_field(5)]
        preds_single = [_zero_field(1)]
        loss_masked, _ = fm_loss(None, [masked_item], ts, predictions=preds_masked)
        loss_single, _ = fm_loss(None, [single], ts, predictions=preds_single)
        assert np.isclose(loss_masked, loss_single, rtol=1e-12)

    def test_all_masked_item_rejected(self, rng):
        item = make_items(rng, n_items=1)[0]
        bad = BatchItem(x0=item.x0, x1=item.x1, seq=item.seq,
                        residue_mask=np.ones(len(item.x0), bool))
        with pytest.raises(DataError):
            fm_loss(None, [bad], np.array([0.5]), predictions=[_zero_field(len(item.x0))])

    def test_nonnegative_and_zero_iff_exact(self, rng):
        items = make_items(rng, n_items=2)
        ts = np.array([0.3, 0.8])
        params = init_params(SMALL, seed=1)
        loss, per_item = fm_loss(params, items, ts)
        assert loss > 0 and (per_item > 0).all()


def _slice_chain(chain, idx):
    from se3fm.geometry import FrameChain

    return FrameChain(chain.rot[idx], chain.trans[idx])


def _zero_field(n):
    return TangentField(np.zeros((n, 3)), np.zeros((n, 3)))


class TestGradients:
    def test_reverse_mode_matches_finite_differences(self, rng):
        params = init_params(SMALL, seed=3)
        items = make_items(rng, n_items=2, length=4)
        ts = np.array([0.3, 0.7])
        w = np.full(2, 0.5)
        tape, loss, _ = _loss_graph(params, items, ts, 0.01, w)
        grad = tape.backward(loss, params.size)
        eps = 1e-5
        checked = rng.choice(params.size, size=300, replace=False)
        for i in checked:
            hi = params.copy()
            hi.flat[i] += eps
            lo = params.copy()
            lo.flat[i] -= eps
            _, lh, _ = _loss_graph(hi, items, ts, 0.01, w)
            _, ll, _ = _loss_graph(lo, items, ts, 0.01, w)
            fd = (lh.value - ll.value) / (2 * eps)
            denom = max(abs(fd), abs(grad[i]), 1e-3)
            assert abs(fd - grad[i]) / denom < 1e-4

    def test_loss_and_gradients_finite_across_time_range(self, rng):
        params = init_params(SMALL, seed=7)
        items = make_items(rng, n_items=1, length=4)
        for t in (0.01, 0.05, 0.3, 0.7, 1.0):
            tape, loss, _ = _loss_graph(params, items, np.array([t]), 0.01, np.array([1.0]))
            assert np.isfinite(loss.value)
            grad = tape.backward(loss, params.size)
            assert np.isfinite(grad).all()

    def test_reft_gradient_is_reward_weighted_sum(self, rng):
        params = init_params(SMALL, seed=4)
        items = make_items(rng, n_items=3, length=4)
        ts = np.array([0.3, 0.5, 0.9])
        rewards = np.array([1.0, 3.0, 0.5])
        weights = rewards / rewards.sum()
        tape, loss, _ = _loss_graph(params, items, ts, 0.01, weights)
        grad_joint = tape.backward(loss, params.size)
        grad_sum = np.zeros(params.size)
        for k in range(3):
            w = np.zeros(3)
            w[k] = weights[k]
            tape_k, loss_k, _ = _loss_graph(params, [items[k]], ts[[k]], 0.01, w[[k]])
            grad_sum += tape_k.backward(loss_k, params.size)
        assert np.abs(grad_joint - grad_sum).max() < 1e-10


class TestTrainStep:
    def test_loss_decreases_on_toy_helices(self):
        rng = np.random.default_rng(0)
        cfg = TrainConfig(learning_rate=1e-3, batch_budget=2000, seed=0)
        state = TrainState(params=init_params(SMALL, seed=0))
        items = corpus(n_per_class=16, length=12)
        eval_rng = np.random.default_rng(9)
        eval_items = [
            BatchItem(x0=c, x1=sample_noise_chain(12, eval_rng), seq=s, residue_mask=m)
            for c, s, m in items
        ]
        eval_ts = eval_rng.uniform(cfg.t_min, 1.0, size=len(eval_items))
        loss_before, _ = fm_loss(state.params, eval_items, eval_ts)
        for _ in range(200):
            batch = [items[i] for i in rng.permutation(len(items))[:8]]
            state = train_step(state, batch, rng, cfg)
        loss_after, _ = fm_loss(state.params, eval_items, eval_ts)
        assert loss_after < loss_before

    def test_zero_learning_rate_freezes_params(self, rng):
        cfg = TrainConfig(learning_rate=0.0, batch_budget=2000, seed=0)
        state = TrainState(params=init_params(SMALL, seed=0))
        before = state.params.flat.copy()
        state = train_step(state, corpus(2, 8), rng, cfg)
        assert np.array_equal(state.params.flat, before)
        assert state.step == 1

    def test_identical_seeds_identical_curves(self):
        def run():
            rng = np.random.default_rng(33)
            cfg = TrainConfig(learning_rate=5e-4, batch_budget=2000, seed=33)
            state = TrainState(params=init_params(SMALL, seed=33))
            items = corpus(4, 8)
            for _ in range(10):
                state = train_step(state, items, rng, cfg)
            return state.loss_history

        assert run() == run()

    def test_frozen_embedding_slice_unchanged(self, rng):
        cfg = TrainConfig(learning_rate=1e-3, batch_budget=2000, freeze_seq_embedding=True)
        state = TrainState(params=init_params(SMALL, seed=0))
        off, size = state.params.slice_of("seq_embed")
        before = state.params.flat[off : off + size].copy()
        for _ in range(3):
            state = train_step(state, corpus(4, 8), rng, cfg)
        assert np.array_equal(state.params.flat[off : off + size], before)

    def test_ot_coupling_not_worse_than_identity_during_training(self, rng):
        items = corpus(8, 10)
        chains = [c for c, _, _ in items]
        for _ in range(5):
            noises = [sample_noise_chain(10, rng) for _ in chains]
            cost = pairwise_cost(chains, noises)
            assert solve_assignment(cost).cost <= np.trace(cost) + 1e-9


class TestEpochPlan:
    def test_batch_size_formula(self):
        assert batch_size_for_length(100, 500_000) == 50
        assert batch_size_for_length(16, 20_000) == 79

    def test_all_experimental_unaffected_by_fraction(self):
        cfg = TrainConfig(batch_budget=1000, synthetic_fraction=2 / 3, seed=1)
        plan = make_epoch_plan([8] * 30, ["experimental"] * 30, cfg)
        assert sorted(i for b in plan for i in b) == list(range(30))

    def test_synthetic_cap_arithmetic(self):
        cfg = TrainConfig(batch_budget=10_000, synthetic_fraction=2 / 3, seed=0)
        provenances = ["synthetic"] * 90 + ["experimental"] * 30
        plan = make_epoch_plan([10] * 120, provenances, cfg)
        scheduled = [i for b in plan for i in b]
        n_syn = sum(1 for i in scheduled if provenances[i] == "synthetic")
        assert n_syn == 60
        assert sum(1 for i in scheduled if provenances[i] == "experimental") == 30

    def test_batches_group_lengths_and_respect_budget(self):
        cfg = TrainConfig(batch_budget=2000, seed=2)
        lengths = [10] * 12 + [20] * 9
        plan = make_epoch_plan(lengths, ["experimental"] * 21, cfg)
        for batch in plan:
            ns = {lengths[i] for i in batch}
            assert len(ns) == 1
            n = ns.pop()
            assert len(batch) <= batch_size_for_length(n, cfg.batch_budget)

    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            make_epoch_plan([], [], TrainConfig())

    def test_all_synthetic_with_cap_rejected(self):
        cfg = TrainConfig(synthetic_fraction=2 / 3)
        with pytest.raises(DataError):
            make_epoch_plan([8] * 5, ["synthetic"] * 5, cfg)

    def test_deterministic_given_seed(self):
        cfg = TrainConfig(batch_budget=500, seed=11)
        lengths = [8] * 10 + [12] * 10
        prov = (["experimental", "synthetic"] * 10)[:20]
        assert make_epoch_plan(lengths, prov, cfg) == make_epoch_plan(lengths, prov, cfg)


class TestReft:
    def test_filter_keeps_quarter(self):
        samples = [(f"s{i}", r) for i, r in enumerate([0.1, 0.9, 0.5, 0.7])]
        kept = reft_filter(samples)
        assert kept == [("s1", 0.9)]
        samples8 = [(f"s{i}", float(i)) for i in range(8)]
        assert [s for s, _ in reft_filter(samples8)] == ["s6", "s7"]

    def test_filter_ties_keep_input_order(self):
        samples = [(f"s{i}", 1.0) for i in range(8)]
        assert [s for s, _ in reft_filter(samples)] == ["s0", "s1"]

    def test_uniform_rewards_equal_plain_loss(self, rng):
        items = make_items(rng, n_items=3)
        ts = np.array([0.3, 0.6, 0.9])
        preds = [_zero_field(len(i.x0)) for i in items]
        plain, _ = fm_loss(None, items, ts, predictions=preds)
        weighted, _ = reft_loss(None, items, ts, np.full(3, 2.5), predictions=preds)
        assert np.isclose(plain, weighted, rtol=1e-12)

    def test_single_nonzero_reward_selects_item(self, rng):
        items = make_items(rng, n_items=3)
        ts = np.array([0.3, 0.6, 0.9])
        preds = [_zero_field(len(i.x0)) for i in items]
        _, per_item = fm_loss(None, items, ts, predictions=preds)
        loss, _ = reft_loss(None, items, ts, np.array([0.0, 5.0, 0.0]), predictions=preds)
        assert np.isclose(loss, per_item[1], rtol=1e-12)

    def test_reward_scaling_invariance(self, rng):
        items = make_items(rng, n_items=4)
        ts = rng.uniform(0.1, 1.0, size=4)
        rewards = np.array([1.0, 2.0, 3.0, 4.0])
        params = init_params(SMALL, seed=5)
        a, _ = reft_loss(params, items, ts, rewards)
        b, _ = reft_loss(params, items, ts, 2.0 * rewards)
        assert abs(a - b) < 1e-12

    def test_all_zero_rewards_rejected(self, rng):
        items = make_items(rng, n_items=2)
        with pytest.raises(DataError):
            reft_loss(None, items, np.array([0.5, 0.5]), np.zeros(2),
                      predictions=[_zero_field(len(i.x0)) for i in items])

    def test_negative_rewards_shifted(self, rng):
        items = make_items(rng, n_items=2)
        ts = np.array([0.4, 0.8])
        preds = [_zero_field(len(i.x0)) for i in items]
        loss, per_item = reft_loss(None, items, ts, np.array([-1.0, 1.0]), predictions=preds)
        # after the shift the weights are (0, 1)
        assert np.isclose(loss, per_item[1], rtol=1e-12)


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path, rng):
        cfg = TrainConfig(learning_rate=1e-3, batch_budget=2000)
        state = TrainState(params=init_params(SMALL, seed=0))
        for _ in range(3):
            state = train_step(state, corpus(4, 8), rng, cfg)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, state, config_text="[train]\nseed = 0\n")
        loaded, config_text = load_checkpoint(path)
        assert config_text == "[train]\nseed = 0\n"
        assert loaded.step == state.step
        assert np.array_equal(loaded.params.flat, state.params.flat)
        assert np.array_equal(loaded.adam_m, state.adam_m)
        assert np.array_equal(loaded.adam_v, state.adam_v)
        assert loaded.params.config == state.params.config
        # bytes stable across rewrites
        save_checkpoint(tmp_path / "again.ckpt", loaded, config_text)
        assert (tmp_path / "model.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()

    def test_garbage_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(DataError):
            load_checkpoint(path)


class TestNumericGuards:
    def test_nonfinite_loss_aborts(self, rng):
        params = init_params(SMALL, seed=0)
        params.flat[:] = 1e200
        state = TrainState(params=ModelParams(SMALL, params.flat))
        cfg = TrainConfig(learning_rate=1e-3, batch_budget=2000)
        with np.errstate(all="ignore"), pytest.raises(NumericError):
            train_step(state, corpus(2, 8), rng, cfg)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(mask_prob=1.5)
        with pytest.raises(ConfigError):
            TrainConfig(t_min=0.0)
