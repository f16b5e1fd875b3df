"""Policy network tests. Gradients are checked against central finite
differences of the loss; training-loop expectations (publish points,
version arithmetic) are plain counting."""

import numpy as np
import pytest

from corpus import NS
from pocketloop.datanode import DataStore, SampleBatch
from pocketloop.trajvalidate import Episode, Frame
from pocketloop.policy import (
    PolicyArch,
    PolicySnapshot,
    TrainConfig,
    TrainState,
    batch_seed,
    compute_loss_and_grads,
    evaluate_policy_loss,
    init_policy,
    init_weights,
    load_checkpoint,
    normalize_targets,
    predict_chunk,
    run_online_finetune,
    save_checkpoint,
    train_step,
)


def random_small_arch(rng):
    action_dim = int(rng.integers(2, 4))
    t_pred = int(rng.integers(2, 5))
    return PolicyArch(
        obs_dim=int(rng.integers(3, 9)),
        hidden=tuple(int(rng.integers(3, 9)) for _ in range(int(rng.integers(1, 3)))),
        t_pred=t_pred,
        t_exec=int(rng.integers(1, t_pred + 1)),
        action_dim=action_dim,
        action_scale=tuple(float(rng.uniform(0.05, 2.0)) for _ in range(action_dim)),
    )


def finite_difference_grads(arch, weights, obs, target_norm, h=1e-5):
    grads = {}
    for name, arr in weights.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            hi, _ = compute_loss_and_grads(arch, weights, obs, target_norm)
            flat[j] = orig - h
            lo, _ = compute_loss_and_grads(arch, weights, obs, target_norm)
            flat[j] = orig
            gflat[j] = (hi - lo) / (2 * h)
        grads[name] = g
    return grads


def gradient_relative_error(arch, seed):
    rng = np.random.default_rng(seed)
    weights = init_weights(arch, seed)
    # nonzero biases so their gradients are exercised off the init point
    for name in weights:
        if name.startswith("b"):
            weights[name] = rng.normal(0, 0.1, size=weights[name].shape)
    obs = rng.normal(size=(3, arch.obs_dim))
    target_norm = rng.uniform(-1, 1, size=(3, arch.out_dim))
    _, analytic = compute_loss_and_grads(arch, weights, obs, target_norm)
    numeric = finite_difference_grads(arch, weights, obs, target_norm)
    num = np.sqrt(
        sum(float(np.sum((numeric[k] - analytic[k]) ** 2)) for k in weights)
    )
    den = (
        np.sqrt(sum(float(np.sum(numeric[k] ** 2)) for k in weights))
        + np.sqrt(sum(float(np.sum(analytic[k] ** 2)) for k in weights))
        + 1e-12
    )
    return num / den


class TestInit:
    def test_same_seed_identical(self):
        a = init_policy(PolicyArch(), 7)
        b = init_policy(PolicyArch(), 7)
        assert a.version == 0
        for k in a.weights:
            assert a.weights[k].tobytes() == b.weights[k].tobytes()

    def test_different_seed_differs(self):
        a = init_policy(PolicyArch(), 7)
        b = init_policy(PolicyArch(), 8)
        assert any(not np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)

    def test_default_layer_shapes(self):
        shapes = dict(PolicyArch().layer_shapes())
        assert shapes == {
            "w0": (22, 64),
            "b0": (64,),
            "w1": (64, 64),
            "b1": (64,),
            "w2": (64, 48),
            "b2": (48,),
        }

    def test_bias_zero_and_bounds(self):
        w = init_weights(PolicyArch(), 3)
        assert np.all(w["b0"] == 0) and np.all(w["b2"] == 0)
        assert np.max(np.abs(w["w0"])) <= 1 / np.sqrt(22)
        assert np.max(np.abs(w["w1"])) <= 1 / np.sqrt(64)

    def test_arch_invariants(self):
        with pytest.raises(ValueError):
            PolicyArch(t_obs=2)
        with pytest.raises(ValueError):
            PolicyArch(t_exec=17)
        with pytest.raises(ValueError):
            PolicyArch(action_scale=(0.05, 0.05))


class TestPredictChunk:
    def test_zero_weights_zero_chunk(self):
        arch = PolicyArch()
        zero = PolicySnapshot(0, arch, {k: np.zeros(s) for k, s in arch.layer_shapes()})
        chunk = predict_chunk(zero, np.ones(22))
        assert chunk.shape == (16, 3)
        assert np.all(chunk == 0.0)

    def test_shape_and_determinism(self):
        snap = init_policy(PolicyArch(), 11)
        obs = np.random.default_rng(0).normal(size=22)
        a = predict_chunk(snap, obs)
        b = predict_chunk(snap, obs)
        assert a.shape == (16, 3)
        assert np.array_equal(a, b)

    def test_clamped_to_bounds(self):
        arch = PolicyArch()
        big = PolicySnapshot(
            0, arch, {k: np.full(s, 50.0) for k, s in arch.layer_shapes()}
        )
        chunk = predict_chunk(big, np.ones(22))
        scale = np.array(arch.action_scale)
        assert np.all(chunk <= scale + 1e-15) and np.all(chunk >= -scale - 1e-15)
        assert np.max(np.abs(chunk[:, 0])) == pytest.approx(0.05)

    def test_dimension_mismatch(self):
        snap = init_policy(PolicyArch(), 1)
        with pytest.raises(ValueError):
            predict_chunk(snap, np.ones(21))


class TestGradients:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(77)
        for draw in range(6):
            arch = random_small_arch(rng)
            rel = gradient_relative_error(arch, seed=1000 + draw)
            assert rel < 1e-4, f"draw {draw}: relative error {rel}"


def make_batch(arch, rng, size=32, targets_from=None):
    items = []
    for _ in range(size):
        obs = rng.normal(size=arch.obs_dim)
        if targets_from is not None:
            target = predict_chunk(targets_from, obs)
        else:
            target = rng.uniform(-1, 1, size=(arch.t_pred, arch.action_dim)) * np.array(
                arch.action_scale
            )
        items.append((obs, target))
    return SampleBatch(items=items, composition=(size, 0))


class TestTrainStep:
    def test_self_targets_zero_loss_no_motion(self):
        arch = PolicyArch()
        snap = init_policy(arch, 5)
        state = TrainState.from_snapshot(snap, TrainConfig(batch_size=8))
        batch = make_batch(arch, np.random.default_rng(2), size=8, targets_from=snap)
        before = {k: v.copy() for k, v in state.weights.items()}
        loss = train_step(state, batch)
        assert loss == pytest.approx(0.0, abs=1e-28)
        for k in before:
            np.testing.assert_allclose(state.weights[k], before[k], atol=1e-16)

    def test_loss_strictly_decreases_overfit(self):
        arch = PolicyArch(obs_dim=6, hidden=(16,), t_pred=4, t_exec=2)
        state = TrainState.from_snapshot(
            init_policy(arch, 3), TrainConfig(batch_size=4, learning_rate=0.05)
        )
        batch = make_batch(arch, np.random.default_rng(4), size=4)
        losses = [train_step(state, batch) for _ in range(100)]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_batch_size_mismatch(self):
        arch = PolicyArch()
        state = TrainState.from_snapshot(init_policy(arch, 0), TrainConfig(batch_size=32))
        with pytest.raises(ValueError):
            train_step(state, make_batch(arch, np.random.default_rng(0), size=8))

    def test_non_finite_loss_raises(self):
        arch = PolicyArch(obs_dim=4, hidden=(4,), t_pred=2, t_exec=1)
        weights = {k: np.full(s, 1e200) for k, s in arch.layer_shapes()}
        state = TrainState(
            arch=arch,
            cfg=TrainConfig(batch_size=2),
            weights=weights,
            velocity={k: np.zeros(s) for k, s in arch.layer_shapes()},
        )
        batch = make_batch(arch, np.random.default_rng(1), size=2)
        with pytest.raises(FloatingPointError):
            train_step(state, batch)


# fixed linear obs->action map shared by every generated episode, so the
# regression target is consistent and learnable
_TRUE_MAP = np.random.default_rng(1234).normal(size=(3, 6)) * 0.3


def bounded_episode(episode_id, kind="demo", n_frames=40, seed=0):
    rng = np.random.default_rng(seed)
    scale = np.array([0.05, 0.05, 1.0])
    t0 = 1_700_000_000 * NS
    frames = []
    for i in range(n_frames):
        obs = rng.normal(size=6)
        action = np.clip(np.tanh(_TRUE_MAP @ obs), -1.0, 1.0) * scale
        frames.append(
            Frame(
                t_ns=t0 + i * 33_333_333,
                gripper_width=0.01,
                feature_count=200,
                obs=obs,
                action=action,
            )
        )
    return Episode(episode_id, "sort", "sim0", 30.0, t0, kind, 0, frames)


def seeded_store(n_demo=3, n_corr=0):
    store = DataStore()
    for e in range(n_demo):
        store.ingest_episode(bounded_episode(f"d{e}", seed=e))
    for e in range(n_corr):
        store.ingest_episode(bounded_episode(f"c{e}", kind="correction", seed=100 + e))
    return store


def arch_for_store():
    # bounded_episode obs are 6-wide with 3-wide actions
    return PolicyArch(obs_dim=6, hidden=(8, 8), t_pred=16, t_exec=8, action_dim=3)


class TestOnlineFinetune:
    def test_publish_points_and_versions(self):
        store = seeded_store(n_demo=2, n_corr=1)
        state = TrainState.from_snapshot(
            init_policy(arch_for_store(), 0), TrainConfig(batch_size=32, sync_interval=100)
        )
        published = []
        run_online_finetune(store, state, steps=250, publish=lambda s: published.append(s))
        assert [s.version for s in published] == [1, 2]
        assert state.version == 2
        assert state.steps_done == 250

    def test_zero_steps_noop(self):
        store = seeded_store()
        snap = init_policy(arch_for_store(), 0)
        state = TrainState.from_snapshot(snap, TrainConfig())
        run_online_finetune(store, state, steps=0, publish=lambda s: pytest.fail("published"))
        assert state.version == snap.version
        for k in snap.weights:
            assert np.array_equal(state.weights[k], snap.weights[k])

    def test_published_snapshots_immutable(self):
        store = seeded_store(n_demo=2, n_corr=1)
        state = TrainState.from_snapshot(
            init_policy(arch_for_store(), 1), TrainConfig(sync_interval=50)
        )
        published = []
        run_online_finetune(store, state, steps=100, publish=lambda s: published.append(s))
        frozen = {k: v.copy() for k, v in published[0].weights.items()}
        run_online_finetune(store, state, steps=50, publish=None)
        for k in frozen:
            assert np.array_equal(published[0].weights[k], frozen[k])

    def test_bit_identical_reruns(self):
        def one_run():
            store = seeded_store(n_demo=2, n_corr=1)
            state = TrainState.from_snapshot(
                init_policy(arch_for_store(), 9),
                TrainConfig(batch_size=32, learning_rate=0.01, seed=42),
            )
            run_online_finetune(store, state, steps=120)
            return state

        a, b = one_run(), one_run()
        for k in a.weights:
            assert a.weights[k].tobytes() == b.weights[k].tobytes()

    def test_midrun_ingest_joins_pool(self):
        store = seeded_store(n_demo=2, n_corr=0)
        compositions = []

        class Recorder:
            def sample_batch(self, n, fraction, rng_seed):
                batch = store.sample_batch(n, fraction, rng_seed=rng_seed)
                compositions.append(batch.composition)
                if len(compositions) == 50:
                    store.ingest_episode(
                        bounded_episode("c-mid", kind="correction", seed=55)
                    )
                return batch

        state = TrainState.from_snapshot(init_policy(arch_for_store(), 0), TrainConfig())
        run_online_finetune(Recorder(), state, steps=80)
        assert all(c == (32, 0) for c in compositions[:50])
        assert all(c == (16, 16) for c in compositions[50:])

    def test_eval_loss_decreases_across_publishes(self):
        # median over 5 seeds of the eval-loss sequence at publish points
        arch = arch_for_store()
        sequences = []
        for seed in range(5):
            store = seeded_store(n_demo=3, n_corr=1)
            state = TrainState.from_snapshot(
                init_policy(arch, seed),
                TrainConfig(batch_size=32, learning_rate=0.05, sync_interval=100, seed=seed),
            )
            heldout_batch = store.sample_batch(64, 0.5, rng_seed=777)
            losses = []
            run_online_finetune(
                store,
                state,
                steps=300,
                publish=lambda s: losses.append(evaluate_policy_loss(s, heldout_batch.items)),
            )
            sequences.append(losses)
        median = np.median(np.array(sequences), axis=0)
        assert len(median) == 3
        assert all(b <= a for a, b in zip(median, median[1:]))


class TestEvaluate:
    def test_self_generated_targets_zero(self):
        arch = PolicyArch()
        snap = init_policy(arch, 2)
        rng = np.random.default_rng(3)
        items = []
        for _ in range(10):
            obs = rng.normal(size=22) * 0.1
            items.append((obs, predict_chunk(snap, obs)))
        assert evaluate_policy_loss(snap, items) == pytest.approx(0.0, abs=1e-28)

    def test_equals_train_loss_on_same_batch(self):
        arch = arch_for_store()
        store = seeded_store()
        batch = store.sample_batch(32, rng_seed=8)
        snap = init_policy(arch, 4)
        state = TrainState.from_snapshot(snap, TrainConfig(batch_size=32))
        train_loss = train_step(state, batch)
        eval_loss = evaluate_policy_loss(snap, batch.items)
        assert eval_loss == pytest.approx(train_loss, rel=1e-12)

    def test_empty_heldout_rejected(self):
        with pytest.raises(ValueError):
            evaluate_policy_loss(init_policy(PolicyArch(), 0), [])


class TestSnapshotWire:
    def test_wire_round_trip_bit_exact(self):
        snap = init_policy(PolicyArch(obs_dim=5, hidden=(6,), t_pred=3, t_exec=1), 6)
        quant = PolicySnapshot(
            3, snap.arch, {k: v.astype(np.float32).astype(np.float64) for k, v in snap.weights.items()}
        )
        back = PolicySnapshot.from_wire(quant.arch, quant.to_wire())
        assert back.version == 3
        for k in quant.weights:
            assert back.weights[k].tobytes() == quant.weights[k].tobytes()

    def test_checkpoint_file_round_trip(self, tmp_path):
        arch = PolicyArch(obs_dim=4, hidden=(5,), t_pred=2, t_exec=1)
        state = TrainState.from_snapshot(init_policy(arch, 8), TrainConfig(batch_size=4))
        batch = make_batch(arch, np.random.default_rng(5), size=4)
        train_step(state, batch)
        snap = state.snapshot()
        path = str(tmp_path / "ckpt.rpkt")
        save_checkpoint(snap, path)
        back = load_checkpoint(arch, path)
        for k in snap.weights:
            assert back.weights[k].tobytes() == snap.weights[k].tobytes()

    def test_arch_mismatch_rejected(self):
        snap = init_policy(PolicyArch(obs_dim=4, hidden=(5,), t_pred=2, t_exec=1), 8)
        other = PolicyArch(obs_dim=5, hidden=(5,), t_pred=2, t_exec=1)
        with pytest.raises(ValueError):
            PolicySnapshot.from_wire(other, snap.to_wire())


def test_batch_seed_stable():
    assert batch_seed(42, 1) == batch_seed(42, 1)
    assert batch_seed(42, 1) != batch_seed(42, 2)


def test_normalize_targets_shape():
    arch = PolicyArch()
    t = np.zeros((4, 16, 3))
    assert normalize_targets(arch, t).shape == (4, 48)
