import json

import numpy as np
import pytest

from saliency_align import network as nw
from saliency_align.autodiff import finite_diff_check
from saliency_align.data import synth_gaussian_blobs
from saliency_align.harness import load_checkpoint
from saliency_align.metrics import linearized_robustness
from saliency_align.network import build_network, linear_network
from saliency_align.training import (ConfigError, TrainConfig, TrainingDivergedError, evaluate, geometric_grid,
                                     lambda_sweep, objective, train)
from test_network import random_net

MLP = [nw.dense(2, 16), nw.relu(), nw.dense(16, 3)]


@pytest.fixture(scope="module")
def blobs():
    return synth_gaussian_blobs(3, 200, 2, 3.0, seed=0)


def _flat(arrays):
    return np.concatenate([a.ravel() for a in arrays])


def _unflat(net, vec):
    out, pos = [], 0
    for p in net.parameters():
        out.append(vec[pos:pos + p.size].reshape(p.shape))
        pos += p.size
    return out


def _batch(seed):
    net, x = random_net(seed)
    y = np.array([(nw.predict(net, x) + 1) % net.n_classes])
    return net, (x[None], y)


class TestObjectiveGradients:
    @pytest.mark.parametrize("kind", ["grad-norm", "alignment"])
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_finite_differences(self, seed, kind):
        net, batch = _batch(seed)
        r = objective(net, batch, 0.7, kind)

        def f(vec):
            c = net.copy()
            c.set_parameters(_unflat(net, vec))
            return objective(c, batch, 0.7, kind).loss

        assert finite_diff_check(f, _flat(net.parameters()), h=1e-6, analytic=_flat(r.gradients)) < 1e-5

    def test_lambda_zero_is_plain_nll(self):
        net, batch = _batch(3)
        plain = objective(net, batch, 0.0, "none")
        for kind in ("grad-norm", "alignment"):
            r = objective(net, batch, 0.0, kind)
            assert r.loss == plain.loss
            assert all(a.tobytes() == b.tobytes() for a, b in zip(r.gradients, plain.gradients))

    def test_grad_norm_penalty_recomputed(self, rng):
        net, _ = random_net(8)
        X = rng.standard_normal((6,) + net.input_shape)
        y = rng.integers(0, net.n_classes, 6)
        Z = net.logits_batch(X)
        p = np.exp(Z - Z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        _, G = net.vjp_batch(X, p - np.eye(net.n_classes)[y])
        expect = float(np.mean(np.sum(G.reshape(6, -1) ** 2, axis=1)))
        assert objective(net, (X, y), 1.0).penalty == pytest.approx(expect, rel=1e-10)

    def test_alignment_penalty_hand_values(self):
        net = linear_network([[0.0, 2.0], [0.0, 0.0]])
        assert objective(net, (np.array([[1.0, 0.0]]), np.array([0])), 1.0, "alignment").penalty == 4.0
        assert objective(net, (np.array([[0.0, 3.0]]), np.array([0])), 1.0, "alignment").penalty == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_alignment_penalty_is_non_negative(self, seed):
        net, _ = random_net(seed)
        X = np.random.default_rng(seed).standard_normal((8,) + net.input_shape)
        assert objective(net, (X, np.zeros(8, dtype=int)), 1.0, "alignment").penalty >= -1e-12

    @pytest.mark.parametrize("bad", [dict(lam=-1.0), dict(kind="l1")])
    def test_rejects_bad_arguments(self, bad):
        net, batch = _batch(0)
        with pytest.raises(ConfigError):
            objective(net, batch, bad.get("lam", 1.0), bad.get("kind", "grad-norm"))

    def test_rejects_out_of_range_labels(self):
        net, (x, _) = _batch(0)
        with pytest.raises(ValueError):
            objective(net, (x, np.array([net.n_classes])), 1.0)


class TestTrain:
    def test_learns_separable_blobs(self):
        ds = synth_gaussian_blobs(2, 200, 2, 4.0, seed=0)
        init = build_network([nw.dense(2, 16), nw.relu(), nw.dense(16, 2)], seed=0, input_shape=(2,))
        net, hist = train(init, ds, TrainConfig(epochs=20, learning_rate=1e-3, batch_size=50))
        assert evaluate(net, ds.validation.images, ds.validation.labels)[1] > 0.95
        assert hist.val_accuracy[-1] > 0.95 and len(hist) == 20
        assert net.meta["lambda"] == 0.0 and net.mode == "eval"

    def test_deterministic(self, blobs):
        init = build_network(MLP, seed=1, input_shape=(2,))
        cfg = TrainConfig(lam=1.0, epochs=3, learning_rate=1e-3, batch_size=50, seed=4)
        a, _ = train(init, blobs, cfg)
        b, _ = train(init, blobs, cfg)
        assert all(p.tobytes() == q.tobytes() for p, q in zip(a.parameters(), b.parameters()))

    def test_lambda_zero_trajectories_agree(self, blobs):
        init = build_network(MLP, seed=2, input_shape=(2,))
        runs = [train(init, blobs, TrainConfig(penalty_kind=k, epochs=3, batch_size=50))
                for k in ("grad-norm", "alignment", "none")]
        for net, hist in runs[1:]:
            assert hist.train_loss == runs[0][1].train_loss
            assert all(p.tobytes() == q.tobytes() for p, q in zip(net.parameters(), runs[0][0].parameters()))

    def test_does_not_touch_the_initial_network(self, blobs):
        init = build_network(MLP, seed=1, input_shape=(2,))
        before = [p.copy() for p in init.parameters()]
        train(init, blobs, TrainConfig(epochs=1, batch_size=50))
        assert all(np.array_equal(p, q) for p, q in zip(before, init.parameters()))

    def test_large_lambda_costs_accuracy(self, blobs):
        init = build_network(MLP, seed=0, input_shape=(2,))
        accs = {}
        for lam in (0.0, 100.0):
            _, hist = train(init, blobs, TrainConfig(lam=lam, epochs=20, learning_rate=1e-3, batch_size=50))
            accs[lam] = hist.val_accuracy[-1]
        assert accs[100.0] < accs[0.0] - 0.2

    def test_divergence_is_reported(self, blobs):
        init = build_network(MLP, seed=0, input_shape=(2,))
        with pytest.raises(TrainingDivergedError, match="lambda=1000"):
            train(init, blobs, TrainConfig(lam=1000.0, epochs=5, learning_rate=1e-2, batch_size=50))

    def test_plateau_drops_learning_rate(self, blobs):
        init = build_network(MLP, seed=0, input_shape=(2,))
        _, hist = train(init, blobs, TrainConfig(epochs=30, learning_rate=1e-2, batch_size=50, patience=1,
                                                 plateau_threshold=0.5))
        assert hist.learning_rate[0] == 1e-2 and min(hist.learning_rate) < 1e-2

    def test_history_serializes(self, blobs):
        init = build_network(MLP, seed=0, input_shape=(2,))
        _, hist = train(init, blobs, TrainConfig(epochs=2, batch_size=50))
        d = json.loads(json.dumps(hist.to_dict()))
        assert set(d) == {"train_loss", "penalty", "val_loss", "val_accuracy", "learning_rate"}


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(lam=-0.1), dict(lam=float("inf")), dict(penalty_kind="l2"),
                                    dict(batch_size=0), dict(learning_rate=0.0), dict(momentum=1.0),
                                    dict(patience=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_from_dict_accepts_lambda_key(self):
        assert TrainConfig.from_dict({"lambda": 2.0, "epochs": 3}) == TrainConfig(lam=2.0, epochs=3)

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigError, match="unknown"):
            TrainConfig.from_dict({"lr": 0.1})

    def test_round_trip(self):
        cfg = TrainConfig(lam=3.0, penalty_kind="alignment", seed=9)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestSweep:
    def test_bookkeeping(self, blobs, tmp_path):
        entries = lambda_sweep(TrainConfig(epochs=2, learning_rate=1e-3, batch_size=50), [0.0, 10.0, 100.0], blobs,
                               spec=MLP, out_dir=tmp_path)
        assert [e.lam for e in entries] == [0.0, 10.0, 100.0]
        assert sorted(p.name for p in tmp_path.iterdir()) == ["model_0.saln", "model_1.saln", "model_2.saln"]
        for e in entries:
            assert e.error is None and load_checkpoint(e.checkpoint).meta["lambda"] == e.lam

    def test_failures_are_recorded_and_skipped(self, blobs):
        entries = lambda_sweep(TrainConfig(epochs=3, learning_rate=1e-2, batch_size=50), [0.0, 1000.0], blobs,
                               spec=MLP)
        assert entries[0].error is None and entries[1].network is None and "non-finite" in entries[1].error

    @pytest.mark.parametrize("lams", [[], [1.0, 0.5]])
    def test_rejects_bad_lists(self, blobs, lams):
        with pytest.raises(ConfigError):
            lambda_sweep(TrainConfig(epochs=1), lams, blobs, spec=MLP)

    def test_median_robustness_grows_with_lambda(self):
        # 2-d blobs are already separated with a wide margin at lambda=0; 20 dimensions leave room to gain
        ds = synth_gaussian_blobs(4, 200, 20, 3.0, seed=0)
        cfg = TrainConfig(epochs=20, learning_rate=1e-2, batch_size=50)
        entries = lambda_sweep(cfg, [0.0, 0.3, 1.0, 3.0, 10.0], ds, spec=[nw.dense(20, 32), nw.relu(), nw.dense(32, 4)])
        X = ds.validation.images
        med = [np.median([linearized_robustness(e.network, x)[0] for x in X]) for e in entries]
        inversions = sum(b < a for a, b in zip(med, med[1:]))
        assert inversions <= 1, med


def test_geometric_grid():
    np.testing.assert_allclose(geometric_grid(1e-3, 10.0, 5), [1e-3, 1e-2, 1e-1, 1.0, 10.0], rtol=1e-12)
    with pytest.raises(ValueError):
        geometric_grid(0.0, 1.0, 3)
