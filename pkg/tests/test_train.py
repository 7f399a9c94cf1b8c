import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_grid
from meshgrade import tensor as T
from meshgrade.errors import (
    DatasetTooSmall,
    EmptySplit,
    InvalidTarget,
    MixedFeatureWidth,
    SchemaError,
    ShapeMismatch,
    UnnormalizedInput,
)
from meshgrade.graph import SparseGraph, build_element_graph, symmetrize
from meshgrade.layers import ModelConfig, MQENet
from meshgrade.train import (
    LABEL_NAMES,
    EarlyStopping,
    OptimizerState,
    PlateauSchedule,
    TrainConfig,
    amsgrad_step,
    batch_graphs,
    checkpoint_from_json,
    checkpoint_to_json,
    clip_gradients,
    evaluate,
    global_norm,
    load_config,
    log_to_csv,
    nll_loss,
    predict,
    report_from_predictions,
    split_dataset,
    train,
)


class TestSplit:
    def test_hundred(self):
        tr, va, te = split_dataset(np.arange(100) % 4, seed=0)
        assert (len(tr), len(va), len(te)) == (60, 20, 20)

    def test_ten_balanced(self):
        labels = np.array([0] * 5 + [1] * 5)
        tr, va, te = split_dataset(labels, seed=3)
        assert (len(tr), len(va), len(te)) == (6, 2, 2)
        assert set(labels[tr]) == {0, 1}

    def test_too_small(self):
        with pytest.raises(DatasetTooSmall):
            split_dataset([0, 1, 0], seed=0)

    def test_stratified_balanced(self):
        labels = np.repeat(np.arange(8), 64)
        tr, va, te = split_dataset(labels, seed=1)
        for part in (tr, va, te):
            counts = np.bincount(labels[part], minlength=8)
            assert counts.max() - counts.min() <= 1

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 7), min_size=5, max_size=200), st.integers(0, 2**31))
    def test_partition(self, labels, seed):
        parts = split_dataset(labels, seed)
        allidx = np.concatenate(parts)
        assert sorted(allidx.tolist()) == list(range(len(labels)))
        n = len(labels)
        sizes = [len(p) for p in parts]
        assert sum(sizes) == n
        for s, f in zip(sizes, (0.6, 0.2, 0.2)):
            assert abs(s - n * f) < 1
        again = split_dataset(labels, seed)
        assert all(np.array_equal(a, b) for a, b in zip(parts, again))


def tiny_graph(n, label, rng, width=6):
    edges = symmetrize([(k, k + 1) for k in range(n - 1)], n)
    return SparseGraph(n, rng.normal(size=(n, width)), edges, "element", label=label)


class TestBatch:
    def test_two_single_nodes(self, rng):
        b = batch_graphs([tiny_graph(1, 0, rng), tiny_graph(1, 1, rng)])
        assert b.graph_ids.tolist() == [0, 1] and len(b.edges) == 0 and b.labels.tolist() == [0, 1]

    def test_offsets(self, rng):
        b = batch_graphs([tiny_graph(3, 0, rng), tiny_graph(2, 0, rng)])
        assert b.edges.tolist() == [[0, 1], [1, 0], [1, 2], [2, 1], [3, 4], [4, 3]]

    def test_mixed_width(self, rng):
        with pytest.raises(MixedFeatureWidth):
            batch_graphs([tiny_graph(2, 0, rng), tiny_graph(2, 0, rng, width=3)])

    def test_batched_equals_unbatched(self, rng):
        model = MQENet.init(ModelConfig(), 2)
        graphs = [build_element_graph(random_grid(int(rng.integers(3, 8)), int(rng.integers(3, 8)), rng)) for _ in range(6)]
        model.input_shift = np.concatenate([g.features for g in graphs]).mean(axis=0)
        model.input_scale = np.concatenate([g.features for g in graphs]).std(axis=0)
        batched = predict(model, graphs)
        single = np.concatenate([predict(model, [g]) for g in graphs])
        np.testing.assert_allclose(batched, single, atol=1e-9)
        assert np.array_equal(batched.argmax(axis=1), single.argmax(axis=1))


class TestLoss:
    def test_certain(self):
        lp = np.full(8, -np.inf)
        lp[3] = 0.0
        lp = np.where(np.isinf(lp), -1e3, lp)
        lp = lp - np.logaddexp.reduce(lp)
        assert nll_loss(lp, 3).data == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self):
        assert float(nll_loss(np.full(8, -math.log(8)), 5).data) == pytest.approx(math.log(8))
        assert math.log(8) == pytest.approx(2.0794, abs=1e-4)

    def test_errors(self):
        with pytest.raises(InvalidTarget):
            nll_loss(np.full(8, -math.log(8)), 9)
        with pytest.raises(UnnormalizedInput):
            nll_loss(np.zeros(8), 1)
        with pytest.raises(ShapeMismatch):
            nll_loss(np.full((2, 8), -math.log(8)), [1])

    def test_grad(self, rng):
        x = T.Tensor(rng.normal(size=(4, 8)))
        assert T.grad_check(lambda x: nll_loss(T.log_softmax(x), [0, 3, 7, 3]), x) < 1e-4


class TestOptimizer:
    def test_first_step(self):
        theta = {"p": np.array([0.5])}
        amsgrad_step(theta, {"p": np.array([1.0])}, OptimizerState(), lr=0.01)
        assert theta["p"][0] - 0.5 == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)

    def test_zero_grad(self):
        theta = {"p": np.array([0.5, -2.0])}
        state = OptimizerState()
        amsgrad_step(theta, {"p": np.array([1.0, 1.0])}, state)
        before, vmax = theta["p"].copy(), state.v_max["p"].copy()
        # a zero gradient still moves theta through the first moment; it is the
        # very first step with g=0 that leaves everything unchanged
        fresh = {"p": np.array([0.5])}
        fresh_state = OptimizerState()
        amsgrad_step(fresh, {"p": np.array([0.0])}, fresh_state)
        assert fresh["p"][0] == 0.5 and fresh_state.v_max["p"][0] == 0.0
        amsgrad_step(theta, {"p": np.zeros(2)}, state)
        assert np.all(state.v_max["p"] == vmax) and not np.array_equal(theta["p"], before)

    def test_vmax_monotone(self):
        theta = {"p": np.zeros(3)}
        state = OptimizerState()
        prev = None
        for k in range(100):
            g = np.array([1.0, -1.0, 0.5]) * (-1) ** k * (1 + 0.3 * math.sin(k))
            amsgrad_step(theta, {"p": g}, state)
            if prev is not None:
                assert np.all(state.v_max["p"] >= prev)
            prev = state.v_max["p"].copy()

    def test_weight_decay_coupled(self):
        theta = {"p": np.array([2.0])}
        state = OptimizerState()
        amsgrad_step(theta, {"p": np.array([0.0])}, state, lr=0.01, weight_decay=0.5)
        # g = 0.5 * 2 = 1 enters the moments
        assert state.m["p"][0] == pytest.approx(0.1)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            amsgrad_step({"p": np.zeros(2)}, {"p": np.zeros(3)}, OptimizerState())

    def test_quadratic_descent(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            d = int(rng.integers(1, 6))
            q = rng.normal(size=(d, d))
            a = q @ q.T + 0.1 * np.eye(d)
            c = rng.normal(size=d)
            x = rng.normal(size=d) * 3
            loss = lambda v: 0.5 * (v - c) @ a @ (v - c)
            theta = {"x": x.copy()}
            amsgrad_step(theta, {"x": a @ (x - c)}, OptimizerState(), lr=1e-2)
            assert loss(theta["x"]) < loss(x)


class TestClip:
    def test_examples(self):
        assert clip_gradients({"a": np.array([0.3, 0.4])}, 1.0)["a"].tolist() == [0.3, 0.4]
        np.testing.assert_allclose(clip_gradients({"a": np.array([3.0, 4.0])}, 1.0)["a"], [0.6, 0.8])
        assert clip_gradients({"a": np.zeros(3)}, 1.0)["a"].tolist() == [0, 0, 0]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(1e-3, 1e3))
    def test_norm_bound(self, values, clip):
        out = clip_gradients({"a": np.array(values[::2]), "b": np.array(values[1::2])}, clip)
        assert global_norm(out) <= clip + 1e-12 * max(1.0, clip)


class TestSchedules:
    def test_plateau_floor(self):
        s = PlateauSchedule(1e-2, 0.5, 2, 1e-5)
        s.step(1.0)
        for _ in range(200):
            s.step(2.0)
        assert s.lr == 1e-5

    def test_plateau_patience(self):
        s = PlateauSchedule(1.0, 0.5, 3, 1e-5)
        s.step(1.0)
        lrs = [s.step(1.0) for _ in range(4)]
        assert lrs == [1.0, 1.0, 1.0, 0.5]

    def test_early_stop(self):
        e = EarlyStopping(20)
        assert not e.step(0.0)
        flags = [e.step(1.0 + k) for k in range(20)]
        assert flags == [False] * 19 + [True]


class _Toy:
    def __init__(self, graphs):
        self.graphs = graphs
        self.labels = [g.label for g in graphs]


def toy_dataset(rng, n=20):
    graphs = []
    for k in range(n):
        label = k % 2
        g = tiny_graph(int(rng.integers(3, 7)), label, rng)
        g.features[:, 0] = (2.0 if label else -2.0) + 0.1 * rng.normal(size=g.n)
        graphs.append(g)
    return _Toy(graphs)


class TestTrain:
    def test_separable_toy(self, rng):
        ds = toy_dataset(rng)
        cfg = ModelConfig(out_classes=2)
        res = train(ds, cfg, TrainConfig(max_epochs=50, seed=0))
        _, va, _ = res.split
        pred = predict(res.model, [ds.graphs[i] for i in va]).argmax(axis=1)
        assert np.array_equal(pred, np.array(ds.labels)[va])
        assert len(res.log) <= 50
        assert set(res.log[0]) == {"epoch", "train_loss", "val_loss", "lr", "seconds"}

    def test_deterministic(self, rng):
        ds = toy_dataset(rng)
        runs = [train(ds, ModelConfig(out_classes=2), TrainConfig(max_epochs=5, seed=4)) for _ in range(2)]
        a, b = (checkpoint_to_json(r.model) for r in runs)
        assert a == b
        assert [r["val_loss"] for r in runs[0].log] == [r["val_loss"] for r in runs[1].log]

    def test_best_epoch_restored(self, rng):
        ds = toy_dataset(rng)
        res = train(ds, ModelConfig(out_classes=2), TrainConfig(max_epochs=8, seed=1))
        _, va, _ = res.split
        logp = predict(res.model, [ds.graphs[i] for i in va])
        val = -np.mean(logp[np.arange(len(va)), np.array(ds.labels)[va]])
        assert val == pytest.approx(min(r["val_loss"] for r in res.log), rel=1e-12)
        assert res.log[res.best_epoch - 1]["val_loss"] == pytest.approx(val, rel=1e-12)

    def test_log_csv(self):
        rows = [{"epoch": 1, "train_loss": 0.5, "val_loss": 0.25, "lr": 0.01, "seconds": 0.1}]
        assert log_to_csv(rows).splitlines() == ["epoch,train_loss,val_loss,lr,seconds", "1,0.5,0.25,0.01,0.100000"]


class TestReport:
    def test_perfect(self):
        y = np.repeat(np.arange(8), 3)
        rep = report_from_predictions(y, y)
        assert np.array_equal(rep.confusion, 100 * np.eye(8)) and rep.accuracy == 1.0

    def test_constant(self):
        y = np.repeat(np.arange(8), 5)
        rep = report_from_predictions(y, np.zeros_like(y))
        assert rep.accuracy == 0.125
        assert rep.property_recalls() == (0.0, 0.0, 0.0)

    def test_rows_and_balance(self, rng):
        y = np.repeat(np.arange(8), 10)
        p = rng.integers(0, 8, size=len(y))
        rep = report_from_predictions(y, p)
        assert np.all(np.abs(rep.confusion.sum(axis=1) - 100) < 0.01)
        assert rep.accuracy == pytest.approx(np.mean(np.diag(rep.confusion)) / 100)
        assert 0 <= rep.accuracy <= 1

    def test_empty(self):
        with pytest.raises(EmptySplit):
            report_from_predictions([], [])

    def test_csv(self):
        y = np.repeat(np.arange(8), 2)
        rep = report_from_predictions(y, y)
        lines = rep.confusion_csv().splitlines()
        assert lines[0] == "Labels," + ",".join(f"{n} (%)" for n in LABEL_NAMES)
        assert len(lines) == 9 and lines[1].startswith("W,100.00,0.00")
        assert rep.summary_csv().splitlines() == [
            "accuracy,recall_orthogonality,recall_smoothing,recall_distribution",
            "100.00,100.00,100.00,100.00",
        ]

    def test_evaluate_deterministic(self, rng):
        model = MQENet.init(ModelConfig(), 0)
        graphs = [build_element_graph(random_grid(5, 4, rng)) for _ in range(8)]
        labels = np.arange(8)
        a, b = evaluate(model, graphs, labels), evaluate(model, graphs, labels)
        assert a.confusion_csv() == b.confusion_csv() and a.summary_csv() == b.summary_csv()


class TestConfigAndCheckpoint:
    def test_load_config(self):
        m, t = load_config({"hidden": 8, "lr": 0.001, "activation": "elu"})
        assert m.hidden == 8 and m.activation == "elu" and t.lr == 0.001
        with pytest.raises(SchemaError):
            load_config({"hiddne": 8})
        with pytest.raises(SchemaError):
            load_config({"pooling_ratio": 2.0})

    def test_round_trip(self, rng):
        model = MQENet.init(ModelConfig(conv_kind="gat"), 7)
        model.input_shift = rng.normal(size=6)
        state = OptimizerState(t=3)
        text = checkpoint_to_json(model, TrainConfig(), state, {"split_seed": 7})
        again, doc = checkpoint_from_json(text)
        assert doc["split_seed"] == 7
        assert checkpoint_to_json(again, TrainConfig(), state, {"split_seed": 7}) == text
        for k, p in model.parameters().items():
            assert np.array_equal(p.data, again.parameters()[k].data)

    def test_bad_checkpoint(self):
        with pytest.raises(SchemaError):
            checkpoint_from_json("{}")
        with pytest.raises(SchemaError):
            checkpoint_from_json(json.dumps({"format": "other"}))
