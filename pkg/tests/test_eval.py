import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from helpers import TINY_SWIN, ap_bruteforce, auc_bruteforce, random_specs

from s3t.backbone import SwinTransformer, init_params
from s3t.evaluation import (EvalError, FeatureTable, MetricsReport, ProbeConfig, average_precision, featurize,
                            pr_auc_tagwise, read_features, repeated_eval, roc_auc_binary, roc_auc_tagwise, subset,
                            top_k_accuracy, train_probe, write_features)


def onehot(y, C):
    return np.eye(C, dtype=np.float32)[y]


class TestTopK:
    def test_examples(self):
        assert top_k_accuracy(np.array([[0.2, 0.8], [0.6, 0.4]]), np.array([0, 0]), 1) == 0.5
        s = np.random.default_rng(0).random((20, 6))
        assert top_k_accuracy(s, s.argmax(1), 1) == 1.0
        assert top_k_accuracy(s, np.zeros(20, int), 6) == 1.0

    def test_tie_prefers_lower_index(self):
        s = np.array([[0.5, 0.5, 0.1]])
        assert top_k_accuracy(s, np.array([0]), 1) == 1.0
        assert top_k_accuracy(s, np.array([1]), 1) == 0.0

    def test_range(self):
        with pytest.raises(EvalError):
            top_k_accuracy(np.zeros((2, 3)), np.zeros(2, int), 4)

    def test_monotone_in_k(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            C = int(rng.integers(2, 12))
            s = rng.integers(0, 4, (15, C)).astype(float)
            y = rng.integers(0, C, 15)
            accs = [top_k_accuracy(s, y, k) for k in range(1, C + 1)]
            assert all(a <= b for a, b in zip(accs, accs[1:])) and accs[-1] == 1.0


class TestAuc:
    def test_examples(self):
        assert roc_auc_tagwise([0.9, 0.8, 0.1], [1, 0, 0]) == 1.0
        assert roc_auc_tagwise([0.1, 0.9], [1, 0]) == 0.0

    def test_random_is_half(self):
        rng = np.random.default_rng(0)
        assert abs(roc_auc_binary(rng.random(10_000), rng.integers(0, 2, 10_000)) - 0.5) < 0.02

    def test_bruteforce(self):
        rng = np.random.default_rng(2)
        for _ in range(60):
            N = int(rng.integers(2, 200))
            y = rng.integers(0, 2, N)
            if y.min() == y.max():
                continue
            s = rng.integers(0, 10, N) / 10.0
            assert abs(roc_auc_binary(s, y) - auc_bruteforce(s, y)) < 1e-9

    def test_excluded_tags(self):
        labels = np.array([[1, 0, 1], [0, 0, 1], [1, 0, 1]])
        scores = np.array([[0.9, 0.2, 0.5], [0.1, 0.3, 0.4], [0.8, 0.1, 0.3]])
        value, excluded = roc_auc_tagwise(scores, labels, return_excluded=True)
        assert value == 1.0 and excluded == [1, 2]
        with pytest.raises(EvalError):
            roc_auc_tagwise(scores[:, 1:], labels[:, 1:])


class TestAveragePrecision:
    def test_examples(self):
        assert average_precision(np.array([0.9, 0.8, 0.1]), np.array([1, 1, 0])) == 1.0
        N = 17
        s = np.linspace(1, 0, N)
        y = np.zeros(N)
        y[-1] = 1
        assert average_precision(s, y) == pytest.approx(1 / N, abs=1e-15)

    def test_all_ties(self):
        y = np.array([1, 0, 0, 1, 0, 0, 0, 0])
        assert average_precision(np.full(8, 0.3), y) == pytest.approx(0.25, abs=1e-15)

    def test_bruteforce(self):
        rng = np.random.default_rng(3)
        for _ in range(60):
            N = int(rng.integers(2, 200))
            y = rng.integers(0, 2, N)
            if y.sum() == 0:
                continue
            s = rng.integers(0, 15, N) / 15.0
            assert abs(average_precision(s, y) - ap_bruteforce(s, y)) < 1e-9

    def test_tagwise_mean(self):
        rng = np.random.default_rng(4)
        s, y = rng.random((50, 3)), rng.integers(0, 2, (50, 3))
        expect = np.mean([ap_bruteforce(s[:, j], y[:, j]) for j in range(3)])
        assert pr_auc_tagwise(s, y) == pytest.approx(expect, abs=1e-12)


class TestSubset:
    def test_identity(self):
        labels = onehot(np.repeat(np.arange(3), 7), 3)
        assert np.array_equal(subset(labels, 1.0, 0), np.arange(21))

    def test_ten_percent(self):
        y = np.repeat(np.arange(10), 100)
        idx = subset(onehot(y, 10), 0.1, 0)
        assert np.all(np.bincount(y[idx]) == 10)
        other = subset(onehot(y, 10), 0.1, 1)
        assert not np.array_equal(idx, other) and np.all(np.bincount(y[other]) == 10)

    def test_minimum_one(self):
        y = np.repeat(np.arange(4), 5)
        assert np.all(np.bincount(y[subset(onehot(y, 4), 0.01, 0)]) == 1)

    @settings(max_examples=40, deadline=None)
    @given(counts=st.lists(st.integers(1, 60), min_size=2, max_size=6), fraction=st.floats(0.01, 1.0),
           seed=st.integers(0, 1000))
    def test_proportions(self, counts, fraction, seed):
        y = np.repeat(np.arange(len(counts)), counts)
        got = np.bincount(y[subset(onehot(y, len(counts)), fraction, seed)], minlength=len(counts))
        assert got.tolist() == [max(1, math.ceil(fraction * c)) if fraction < 1 else c for c in counts]

    def test_multi_label_rarest_bucket(self):
        labels = np.array([[1, 1], [1, 0], [1, 0], [1, 0], [0, 1], [0, 0]])
        idx = subset(labels, 0.01, 0, multi_label=True)
        # buckets: tag 1 (rows 0, 4), tag 0 (rows 1-3), untagged (row 5)
        assert len(idx) == 3 and 5 in idx

    def test_bad_fraction(self):
        with pytest.raises(EvalError):
            subset(np.eye(2), 0.0, 0)


def blobs(n_per, C, dim=16, sep=4.0, seed=0):
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((C, dim)) * sep
    y = np.repeat(np.arange(C), n_per)
    return (centres[y] + rng.standard_normal((len(y), dim))).astype(np.float32), y


class TestProbe:
    def test_separable_reaches_full_accuracy(self):
        x, y = blobs(40, 2)
        probe = train_probe(x, onehot(y, 2), False, ProbeConfig(), seed=0)
        assert top_k_accuracy(probe.scores(x), y, 1) == 1.0

    def test_shuffled_labels_near_chance(self):
        x, y = blobs(100, 4, seed=1)
        xt, yt = blobs(100, 4, seed=1)
        shuffled = np.random.default_rng(0).permutation(y)
        rng = np.random.default_rng(5)
        test_x = rng.standard_normal(xt.shape).astype(np.float32) * 4
        acc = top_k_accuracy(train_probe(x, onehot(shuffled, 4), False).scores(test_x), yt, 1)
        sigma = math.sqrt(0.25 * 0.75 / len(yt))
        assert abs(acc - 0.25) <= 3 * sigma

    def test_positive_scaling_keeps_argmax(self):
        x, y = blobs(30, 3, seed=2)
        probe = train_probe(x, onehot(y, 3), False)
        with torch.no_grad():
            probe.fc.bias.zero_()
        assert np.array_equal(probe.scores(x).argmax(1), probe.scores(3.0 * x).argmax(1))

    def test_multi_label(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((200, 8)).astype(np.float32)
        labels = (x[:, :3] > 0).astype(np.float32)
        probe = train_probe(x, labels, True, ProbeConfig(lr=1e-2))
        assert roc_auc_tagwise(probe.scores(x), labels) > 0.95

    def test_single_class_rejected(self):
        with pytest.raises(EvalError):
            train_probe(np.zeros((4, 3), np.float32), onehot(np.zeros(4, int), 2), False)

    def test_probe_leaves_backbone_untouched(self):
        model = init_params(SwinTransformer(TINY_SWIN), 0)
        before = {n: p.clone() for n, p in model.state_dict().items()}
        table = featurize(random_specs(6), model, size=16, labels=onehot(np.arange(6) % 2, 2))
        train_probe(table.features, table.labels, False)
        assert all(torch.equal(before[n], p) for n, p in model.state_dict().items())


class TestReport:
    def test_single_run_std_zero(self):
        r = MetricsReport.from_runs([{"top1": 0.7}])
        assert r.std == {"top1": 0.0} and r.mean == {"top1": 0.7}

    def test_sample_std(self):
        r = MetricsReport.from_runs([{"a": 1.0}, {"a": 2.0}, {"a": 3.0}])
        assert r.std["a"] == pytest.approx(1.0)
        assert "mean" in r.to_json() and "run2" in r.to_table()

    def test_zero_lr_runs_identical(self):
        x, y = blobs(20, 3, seed=4)
        table = FeatureTable([str(i) for i in range(len(y))], x, onehot(y, 3))
        cfg = ProbeConfig(lr=1e-30, epochs=2, warmup_epochs=0)
        rep = repeated_eval(table, table, 3, 0, cfg)
        assert rep.runs == repeated_eval(table, table, 3, 0, cfg).runs
        single = repeated_eval(table, table, 1, 0, cfg)
        assert single.std["top1"] == 0.0

    def test_repeated_eval_fields(self):
        x, y = blobs(30, 4, seed=5, sep=1.0)
        table = FeatureTable([str(i) for i in range(len(y))], x, onehot(y, 4))
        rep = repeated_eval(table.select(range(0, 120, 2)), table.select(range(1, 120, 2)), 5, 0)
        vals = [r["top1"] for r in rep.runs]
        assert len(vals) == 5 and min(vals) <= rep.mean["top1"] <= max(vals) and rep.std["top1"] >= 0


class TestFeatures:
    def test_roundtrip(self, tmp_path):
        x, y = blobs(3, 2)
        t = FeatureTable(["a", "b", "ü", "d", "e", "f"], x, onehot(y, 2))
        write_features(tmp_path / "f.s3tfeat", t)
        back = read_features(tmp_path / "f.s3tfeat")
        assert back.ids == t.ids and np.array_equal(back.features, t.features)
        assert np.array_equal(back.labels, t.labels)

    def test_featurize_deterministic_and_chunked(self):
        model = init_params(SwinTransformer(TINY_SWIN), 0)
        specs = random_specs(3, T=50)
        a = featurize(specs, model, size=16, max_frames=20)
        b = featurize(specs, model, size=16, max_frames=20)
        assert len(a) == 3 and a.features.shape == (3, 16)
        assert np.array_equal(a.features, b.features)
        one = featurize(specs[:1], model, size=16, max_frames=20)
        assert np.allclose(one.features[0], a.features[0], atol=1e-6)
