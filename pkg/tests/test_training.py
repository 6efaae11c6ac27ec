import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hopfe import data, model, training
from hopfe.errors import InvalidConfig, ShapeMismatch
from hopfe.model import ModelConfig
from hopfe.training import TrainConfig


def cycle_store(n=20):
    named = {"train": [(f"e{i}", "next", f"e{(i + 1) % n}") for i in range(n)]}
    return data.from_named_splits(named)


def tiny_params(seed=0, **kw):
    cfg = ModelConfig(dim=kw.pop("dim", 2), heads=kw.pop("heads", 2), **kw)
    return model.init_model(4, 2, cfg, seed=seed)


class TestNegatives:
    def test_two_entity_graph(self):
        store = data.from_named_splits({"train": [("a", "r", "b")]})
        rng = np.random.default_rng(0)
        neg = training.sample_negatives(store.triples[0], store, 50, rng)
        tail_side = neg[neg[:, 0] == 0]
        assert np.all(tail_side[:, 2] == 0)
        head_side = neg[neg[:, 2] == 1]
        assert np.all(head_side[:, 0] == 1)
        assert not np.any((neg[:, 0] == 0) & (neg[:, 2] == 1))

    def test_absent_from_filter(self):
        store = data.generate_er_graph(50, 6, num_relations=2, seed=1)
        rng = np.random.default_rng(1)
        neg = training.corrupt(store.split("train")[:40], 16, store.num_entities, store.filter_index, rng)
        assert neg.shape == (40, 16, 3)
        assert not store.filter_index.contains(neg[..., 0], neg[..., 1], neg[..., 2]).any()

    def test_one_side_changed(self):
        store = data.generate_er_graph(50, 6, seed=2)
        pos = store.split("train")[:30]
        neg = training.corrupt(pos, 8, store.num_entities, store.filter_index, np.random.default_rng(2))
        same_h = neg[..., 0] == pos[:, None, 0]
        same_t = neg[..., 2] == pos[:, None, 2]
        assert np.all(same_h | same_t)
        assert np.all(neg[..., 1] == pos[:, None, 1])

    def test_deterministic(self):
        store = data.generate_er_graph(30, 4, seed=3)
        a = training.sample_negatives(store.triples[0], store, 10, np.random.default_rng(9))
        b = training.sample_negatives(store.triples[0], store, 10, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_dense_graph_terminates(self):
        # every corruption is a known triple: resampling gives up and accepts
        both = data.from_named_splits({"train": [(f"e{i}", "r", f"e{j}") for i in range(3) for j in range(3)]})
        neg = training.sample_negatives(both.triples[0], both, 5, np.random.default_rng(0))
        assert neg.shape == (5, 3)


class TestLoss:
    def test_positive_only(self):
        value, _, _ = training.loss_from_scores(0.0, np.empty(0), 12.0, 1.0)
        assert value == pytest.approx(6.1442e-6, rel=1e-4)

    def test_negative_at_margin(self):
        value, _, _ = training.loss_from_scores(-np.inf, np.array([12.0]), 12.0, 1.0)
        assert value == pytest.approx(math.log(2), abs=1e-12)

    def test_duplicate_negatives(self):
        one, _, _ = training.loss_from_scores(3.0, np.array([10.0]), 12.0, 1.0)
        two, _, _ = training.loss_from_scores(3.0, np.array([10.0, 10.0]), 12.0, 1.0)
        assert two == pytest.approx(one, abs=1e-15)

    @given(st.lists(st.floats(0, 40), min_size=1, max_size=12), st.sampled_from([0.5, 1.0]))
    def test_weights_sum_to_one(self, neg, alpha):
        w = training.adversarial_weights(np.array(neg), alpha)
        assert abs(w.sum() - 1.0) < 1e-12
        assert np.all(w >= 0)

    def test_plausible_negatives_weigh_more(self):
        w = training.adversarial_weights(np.array([1.0, 5.0, 9.0]), 1.0)
        assert w[0] > w[1] > w[2]

    @given(st.lists(st.floats(0, 30), min_size=1, max_size=8), st.integers(0, 7),
           st.floats(1e-3, 5.0), st.floats(0, 20))
    def test_monotone_in_negative_distance(self, neg, which, bump, pos):
        # weights detached, as in the gradient; the weight itself also shrinks
        neg = np.array(neg)
        which = which % len(neg)
        moved = neg.copy()
        moved[which] += bump
        w = training.adversarial_weights(neg, 1.0)
        a, _, gn = training.loss_from_scores(pos, neg, 12.0, 1.0, w)
        b, _, _ = training.loss_from_scores(pos, moved, 12.0, 1.0, w)
        assert b <= a + 1e-12
        assert np.all(gn <= 0)
        assert training.adversarial_weights(moved, 1.0)[which] <= w[which] + 1e-15

    def test_live_weights_can_raise_loss(self):
        # without detaching, pushing away an implausible negative reweights toward harder ones
        a, _, _ = training.loss_from_scores(0.0, np.array([0.0, 0.0, 1.0]), 12.0, 1.0)
        b, _, _ = training.loss_from_scores(0.0, np.array([0.0, 0.0, 2.0]), 12.0, 1.0)
        assert b > a

    def test_score_derivatives(self, rng):
        pos, neg = 5.0, rng.uniform(5, 20, 6)
        w = training.adversarial_weights(neg, 1.0)
        _, gp, gn = training.loss_from_scores(pos, neg, 12.0, 1.0)
        h = 1e-5
        f = lambda p, n: training.loss_from_scores(p, n, 12.0, 1.0, w)[0]
        assert gp == pytest.approx((f(pos + h, neg) - f(pos - h, neg)) / (2 * h), rel=1e-6)
        for i in range(6):
            e = np.zeros(6)
            e[i] = h
            assert gn[i] == pytest.approx((f(pos, neg + e) - f(pos, neg - e)) / (2 * h), rel=1e-4, abs=1e-10)

    def test_model_loss_uses_scores(self):
        p = tiny_params(gamma=6.0)
        pos = [0, 1, 2]
        negs = [[0, 1, 3], [1, 1, 2]]
        s = model.scores(p, [0, 0, 1], [1, 1, 1], [2, 3, 2])
        want, _, _ = training.loss_from_scores(s[0], s[1:], 6.0, 1.0)
        assert training.loss(pos, negs, p) == pytest.approx(float(want), abs=1e-14)

    def test_loss_cfg_override(self):
        p = tiny_params(gamma=6.0)
        a = training.loss([0, 1, 2], [[0, 1, 3]], p)
        b = training.loss([0, 1, 2], [[0, 1, 3]], p, ModelConfig(gamma=24.0))
        assert a != b


class TestGradients:
    def test_fixed_point(self):
        # D+ = 0 far below the margin, every D- far above it
        p = model.init_model(3, 1, ModelConfig(dim=2, variant="no-hopf", gamma=30.0), seed=0)
        p.entity_points[:2] = [1.0, 0.0, 0.0]
        p.entity_points[2] = [100.0, 0.0, 0.0]
        p.relation_quats[:] = [1.0, 0.0, 0.0, 0.0]
        pos = np.array([[0, 0, 1]])
        neg = np.array([[[0, 0, 2], [2, 0, 1]]])
        _, g = training.gradients(pos, neg, p)
        assert max(np.abs(a).max() for a in g.values()) < 1e-6

    def test_untouched_parameters_zero(self):
        p = model.init_model(6, 3, ModelConfig(dim=3, heads=2, gamma=1.0), seed=1)
        pos = np.array([[0, 0, 1], [1, 0, 2]])
        neg = np.array([[[0, 0, 2], [3, 0, 1]], [[1, 0, 0], [2, 0, 2]]])
        _, g = training.gradients(pos, neg, p)
        assert np.all(g["entity_points"][4:] == 0.0)
        assert np.all(g["entity_phases"][4:] == 0.0)
        assert np.all(g["relation_quats"][1:] == 0.0)
        assert np.all(g["relation_phases"][1:] == 0.0)
        assert np.any(g["entity_points"][:4] != 0.0)

    def test_mean_over_batch(self):
        p = tiny_params(gamma=2.0, seed=3)
        pos = np.array([[0, 0, 1], [2, 1, 3]])
        neg = np.array([[[0, 0, 2]], [[1, 1, 3]]])
        value, _ = training.gradients(pos, neg, p)
        want = np.mean([training.loss(pos[i], neg[i], p) for i in range(2)])
        assert value == pytest.approx(want, abs=1e-14)

    def test_thread_count_irrelevant(self):
        store = data.generate_er_graph(40, 8, seed=0)
        p = model.init_model(40, 1, ModelConfig(dim=3, heads=2), seed=0)
        pos = store.split("train")[:300]
        neg = training.corrupt(pos, 4, 40, store.filter_index, np.random.default_rng(0))
        a, ga = training.gradients(pos, neg, p, threads=1)
        b, gb = training.gradients(pos, neg, p, threads=4)
        assert a == b
        for name in ga:
            np.testing.assert_array_equal(ga[name], gb[name])

    def test_shape_checks(self):
        p = tiny_params()
        with pytest.raises(ShapeMismatch):
            training.gradients([[0, 0, 1]], np.zeros((2, 1, 3), dtype=int), p)
        with pytest.raises(ValueError):
            training.gradients(np.zeros((0, 3), dtype=int), np.zeros((0, 1, 3), dtype=int), p)


class TestAdam:
    def _scalar(self):
        p = model.init_model(1, 1, ModelConfig(dim=1), seed=0)
        return p, {k: np.zeros_like(v) for k, v in p.tables().items()}

    def test_first_step_magnitude(self):
        for scale, tol in ((1.0, 1e-6), (1e-3, 1e-4), (250.0, 1e-6)):
            p, g = self._scalar()
            before = p.entity_points.copy()
            g["entity_points"][0, 0, 0] = scale
            training.adam_step(p, g, training.AdamState(p), 0.1)
            assert p.entity_points[0, 0, 0] - before[0, 0, 0] == pytest.approx(-0.1, rel=tol)

    def test_zero_gradient_no_move(self):
        p, g = self._scalar()
        snap = {k: v.copy() for k, v in p.tables().items()}
        st_ = training.AdamState(p)
        for _ in range(3):
            training.adam_step(p, g, st_, 0.1)
        for k, v in p.tables().items():
            np.testing.assert_array_equal(v, snap[k])

    def test_second_step_bias_correction(self):
        p, g = self._scalar()
        g["relation_phases"][0, 0] = 2.0
        before = p.relation_phases[0, 0]
        s = training.AdamState(p)
        training.adam_step(p, g, s, 0.1)
        training.adam_step(p, g, s, 0.1)
        assert p.relation_phases[0, 0] - before == pytest.approx(-0.2, rel=1e-6)

    def test_schedule(self):
        assert training.scheduled_lr(0.1, 0.1, 1000, 1000) == pytest.approx(0.01, abs=1e-12)
        assert training.scheduled_lr(0.1, 0.1, 0, 1000) == 0.1
        assert training.scheduled_lr(0.1, 0.1, 500, 1000) == pytest.approx(0.1 * 0.1 ** 0.5, abs=1e-15)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"batch_size": 0}, {"learning_rate": 0.0}, {"decay_rate": 1.5},
                                    {"max_steps": 0}, {"grad_check_interval": -1}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidConfig):
            TrainConfig(**kw).validate()


class TestTrain:
    def test_cycle_overfit(self):
        store = cycle_store()
        cfg = TrainConfig(batch_size=20, neg_samples=8, max_steps=2000, eval_split="train", seed=0)
        _, log = training.train(store, cfg, ModelConfig(dim=10))
        assert log[-1]["step"] == 2000
        assert log[-1]["mrr"] >= 0.9

    def test_first_step_loss(self):
        store = data.generate_er_graph(30, 4, seed=5)
        cfg = TrainConfig(batch_size=8, neg_samples=4, max_steps=1, eval_split="train", seed=11)
        mcfg = ModelConfig(dim=3, heads=2)
        _, log = training.train(store, cfg, mcfg)
        # replay the loop's first draw
        rng = np.random.default_rng(11)
        p0 = model.init_model(store.num_entities, store.num_relations, mcfg, seed=11)
        order = rng.permutation(len(store.split("train")))
        batch = store.split("train")[order[:8]]
        neg = training.corrupt(batch, 4, store.num_entities, store.filter_index, rng)
        want = np.mean([training.loss(batch[i], neg[i], p0) for i in range(8)])
        assert log[0]["loss"] == pytest.approx(want, abs=1e-12)

    def test_deterministic_logs(self, tmp_path):
        store = data.generate_er_graph(30, 4, seed=5)
        cfg = TrainConfig(batch_size=16, neg_samples=4, max_steps=30, valid_every=10, seed=2)
        a_path, b_path = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        pa, _ = training.train(store, cfg, ModelConfig(dim=3, heads=2), log_path=a_path)
        pb, _ = training.train(store, cfg, ModelConfig(dim=3, heads=2), log_path=b_path)
        assert a_path.read_text() == b_path.read_text()
        np.testing.assert_array_equal(pa.entity_points, pb.entity_points)

    def test_log_records(self, tmp_path):
        store = data.generate_er_graph(30, 4, seed=5)
        cfg = TrainConfig(batch_size=16, neg_samples=4, max_steps=25, valid_every=10)
        path = tmp_path / "log.jsonl"
        training.train(store, cfg, ModelConfig(dim=3), log_path=path)
        recs = [json.loads(line) for line in path.read_text().splitlines()]
        assert [r["step"] for r in recs] == [10, 20, 25]
        assert set(recs[0]) == {"step", "loss", "mrr", "hits1", "hits3", "hits10", "lr"}
        assert recs[-1]["lr"] == pytest.approx(0.1 * 0.1, rel=1e-12)

    def test_gradient_check_hook_runs(self, caplog):
        store = data.generate_er_graph(20, 4, seed=5)
        cfg = TrainConfig(batch_size=8, neg_samples=4, max_steps=2, grad_check_interval=1)
        with caplog.at_level("INFO", logger="hopfe.training"):
            training.train(store, cfg, ModelConfig(dim=2, heads=2))
        assert "gradient check" in caplog.text
