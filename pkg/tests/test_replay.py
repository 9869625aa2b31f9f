import numpy as np
import pytest

from ledot.dataset_io import FeatureInstance
from ledot.errors import DomainError
from ledot.numerics import RngState
from ledot.replay import (
    Prototype,
    ReplayState,
    effective_buffer,
    generate_synthetic,
    instance_features,
    load_replay_state,
    save_replay_state,
    select_memory,
    update_prototypes,
)


def make_item(h, label):
    h = np.asarray(h, dtype=np.float32)
    d = h.size // 2
    inst = FeatureInstance(
        instance_id="x", label_id=label, h_start=h[:d], h_end=h[d:],
        lm_logits_start=np.zeros(1, dtype=np.float32),
        lm_logits_end=np.zeros(1, dtype=np.float32),
        token_ids=np.zeros(0, dtype=np.uint32))
    return (inst, label)


def make_class(rng, label, n, dim=6, mean=0.0):
    g = rng.generator()
    return [make_item(mean + g.standard_normal(dim), label) for _ in range(n)]


class TestSelectMemory:
    def test_small_class_exhausted(self):
        items = make_class(RngState(1), label=1, n=3)
        out = select_memory(items, k=20)
        assert out[1].shape[0] == 3

    def test_identical_vectors_mean_preserved(self):
        items = [make_item(np.ones(6), 2) for _ in range(8)]
        out = select_memory(items, k=4)
        np.testing.assert_allclose(out[2].mean(axis=0), np.ones(6), atol=1e-12)

    def test_random_strategy_deterministic(self):
        items = make_class(RngState(2), label=1, n=30)
        a = select_memory(items, k=5, strategy="random", rng=RngState(9))
        b = select_memory(items, k=5, strategy="random", rng=RngState(9))
        np.testing.assert_array_equal(a[1], b[1])

    def test_herding_tracks_class_mean(self):
        items = make_class(RngState(3), label=1, n=200)
        X = np.stack([instance_features(inst) for inst, _ in items])
        out = select_memory(items, k=20)
        d_herd = np.linalg.norm(out[1].mean(axis=0) - X.mean(axis=0))
        rand = select_memory(items, k=20, strategy="random", rng=RngState(0))
        d_rand = np.linalg.norm(rand[1].mean(axis=0) - X.mean(axis=0))
        assert d_herd <= d_rand + 1e-12

    def test_never_exceeds_k(self):
        items = make_class(RngState(4), 1, 50) + make_class(RngState(5), 2, 7)
        out = select_memory(items, k=10)
        assert out[1].shape[0] == 10
        assert out[2].shape[0] == 7


class TestPrototypes:
    def test_single_item(self):
        store = update_prototypes({}, [make_item([1.0, 2.0], 1)])
        assert np.array_equal(store[1].mean, [1.0, 2.0])
        assert np.array_equal(store[1].var, [0.0, 0.0])

    def test_two_items_population_variance(self):
        items = [make_item([0.0, 0.0], 1), make_item([2.0, 2.0], 1)]
        store = update_prototypes({}, items)
        np.testing.assert_allclose(store[1].mean, [1.0, 1.0])
        np.testing.assert_allclose(store[1].var, [1.0, 1.0])  # divisor n

    def test_against_two_pass_oracle(self):
        items = make_class(RngState(6), label=3, n=500, dim=8)
        X = np.stack([instance_features(inst) for inst, _ in items])
        store = update_prototypes({}, items)
        # independent two-pass computation
        mean = X.sum(axis=0) / X.shape[0]
        var = ((X - mean) ** 2).sum(axis=0) / X.shape[0]
        np.testing.assert_allclose(store[3].mean, mean, atol=1e-10)
        np.testing.assert_allclose(store[3].var, var, atol=1e-10)

    def test_untouched_labels_kept(self):
        store = {7: Prototype(mean=np.ones(2), var=np.ones(2), count=4)}
        out = update_prototypes(store, [make_item([1.0, 2.0], 1)])
        assert 7 in out and 1 in out


class TestGenerateSynthetic:
    def test_ratio_zero_empty(self):
        store = {1: Prototype(mean=np.zeros(2), var=np.ones(2), count=5)}
        out = generate_synthetic(store, [1], 0.0, {1: 20}, RngState(1))
        assert out == {}

    def test_zero_variance_all_equal_mean(self):
        store = {1: Prototype(mean=np.array([3.0, -1.0]), var=np.zeros(2), count=5)}
        out = generate_synthetic(store, [1], 2.0, {1: 4}, RngState(2),
                                 variance_floor=0.0)
        assert np.all(out[1] == np.array([3.0, -1.0]))

    def test_counting(self):
        store = {1: Prototype(mean=np.zeros(2), var=np.ones(2), count=5)}
        out = generate_synthetic(store, [1], 10.0, {1: 20}, RngState(3))
        assert out[1].shape == (200, 2)

    def test_missing_label_rejected(self):
        with pytest.raises(DomainError):
            generate_synthetic({}, [1], 1.0, {1: 5}, RngState(4))

    def test_statistics_match_prototype(self):
        mean = np.array([1.0, -2.0, 0.5])
        var = np.array([0.5, 2.0, 1.0])
        store = {1: Prototype(mean=mean, var=var, count=9)}
        n = 50_000
        out = generate_synthetic(store, [1], 1.0, {1: n}, RngState(5))[1]
        assert np.all(np.abs(out.mean(axis=0) - mean) < 3 * np.sqrt(var / n))
        assert np.all(np.abs(out.var(axis=0) - var) / var < 0.05)


class TestEffectiveBuffer:
    def test_empty_synthetic_is_buffer(self):
        buf = {1: np.ones((3, 4))}
        eff = effective_buffer(buf, {})
        assert len(eff) == 3 and not eff.is_synthetic.any()

    def test_empty_buffer_synthetic_only(self):
        eff = effective_buffer({}, {2: np.zeros((5, 4))})
        assert len(eff) == 5 and eff.is_synthetic.all()

    def test_sizes_add(self):
        eff = effective_buffer({1: np.ones((3, 4))}, {1: np.zeros((6, 4))})
        assert len(eff) == 9
        assert int(eff.is_synthetic.sum()) == 6

    def test_label_major_deterministic_order(self):
        buf = {2: np.full((2, 1), 2.0), 1: np.full((1, 1), 1.0)}
        syn = {2: np.full((1, 1), 20.0)}
        eff = effective_buffer(buf, syn)
        np.testing.assert_array_equal(eff.labels, [1, 2, 2, 2])
        np.testing.assert_array_equal(eff.features.ravel(), [1.0, 2.0, 2.0, 20.0])

    def test_buffer_not_mutated_by_later_tasks(self):
        items = make_class(RngState(7), label=1, n=10)
        buf = select_memory(items, k=4)
        frozen = buf[1].copy()
        buf.update(select_memory(make_class(RngState(8), label=2, n=10), k=4))
        np.testing.assert_array_equal(buf[1], frozen)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        state = ReplayState(
            buffer={1: np.arange(12, dtype=np.float64).reshape(3, 4)},
            prototypes={1: Prototype(mean=np.ones(4), var=np.full(4, 2.0), count=3),
                        2: Prototype(mean=-np.ones(4), var=np.zeros(4), count=1)},
        )
        save_replay_state(state, tmp_path / "ckpt")
        back = load_replay_state(tmp_path / "ckpt")
        np.testing.assert_allclose(back.buffer[1], state.buffer[1])
        np.testing.assert_allclose(back.prototypes[2].mean, -np.ones(4))
        assert back.prototypes[1].count == 3
