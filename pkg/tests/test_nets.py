import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import approx_fprime

from proxyunlearn import datagen, nets
from proxyunlearn.nets import (
    MlpClassifier,
    Monitor,
    TrainConfig,
    TrainingDivergedError,
    loss_and_gradients,
    make_arch,
    numerical_gradient,
)
from proxyunlearn.numkit import softmax


@pytest.fixture(scope="module")
def small():
    ds = datagen.generate(datagen.make_mixture_spec(3, 2, 2, seed=1), 40, seed=1)
    split = datagen.build_scenario(ds, datagen.SubclassScenario(0, 0))
    return ds, split


def _flat_loss(model, X, t, loss):
    def f(flat):
        m = model.copy()
        m.set_flat(flat)
        return loss_and_gradients(m, X, t, loss)[0]
    return f


class TestModel:
    def test_shapes(self):
        m = make_arch("mlp2", 5, 3, hidden=7, seed=0)
        assert m.layer_dims == [5, 7, 7, 3]
        assert m.n_params == 5 * 7 + 7 + 7 * 7 + 7 + 7 * 3 + 3
        assert m.logits(np.zeros((4, 5))).shape == (4, 3)

    def test_init_range(self):
        m = make_arch("mlp1", 100, 2, hidden=10, seed=3)
        assert np.abs(m.weights[0]).max() <= 0.1
        assert np.abs(m.weights[1]).max() <= 1 / np.sqrt(10)

    def test_seeded(self):
        np.testing.assert_array_equal(make_arch("mlp1", 3, 2, seed=4).get_flat(), make_arch("mlp1", 3, 2, seed=4).get_flat())

    def test_flat_round_trip(self):
        m = make_arch("mlp1", 3, 2, seed=0)
        flat = np.arange(m.n_params, dtype=float)
        m.set_flat(flat)
        np.testing.assert_array_equal(m.get_flat(), flat)
        with pytest.raises(ValueError):
            m.set_flat(flat[:-1])

    def test_unknown_arch(self):
        with pytest.raises(ValueError):
            make_arch("resnet", 2, 2)

    def test_checkpoint(self, tmp_path):
        m = make_arch("mlp2", 4, 3, hidden=5, seed=9)
        nets.save_model(m, tmp_path / "m.txt")
        np.testing.assert_array_equal(nets.load_model(tmp_path / "m.txt").get_flat(), m.get_flat())
        (tmp_path / "bad.txt").write_text("garbage\n")
        with pytest.raises(ValueError):
            nets.load_model(tmp_path / "bad.txt")


class TestGradients:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["linear", "mlp1", "mlp2"]),
           st.sampled_from(["cross_entropy", "kl_to_targets"]))
    def test_against_scipy_differences(self, seed, arch, loss):
        rng = np.random.default_rng(seed)
        m = make_arch(arch, 3, 4, hidden=5, seed=seed)
        X = rng.standard_normal((6, 3))
        t = rng.integers(0, 4, 6) if loss == "cross_entropy" else softmax(rng.standard_normal((6, 4)))
        _, grads = loss_and_gradients(m, X, t, loss)
        analytic = np.concatenate([g.ravel() for g in grads])
        approx = approx_fprime(m.get_flat(), _flat_loss(m, X, t, loss), 1e-7)
        np.testing.assert_allclose(analytic, approx, atol=1e-5)

    def test_central_differences_helper(self, rng):
        m = make_arch("mlp1", 3, 3, hidden=4, seed=0)
        X, y = rng.standard_normal((5, 3)), rng.integers(0, 3, 5)
        _, grads = loss_and_gradients(m, X, y)
        analytic = np.concatenate([g.ravel() for g in grads])
        np.testing.assert_allclose(numerical_gradient(m, X, y), analytic, rtol=1e-5, atol=1e-9)

    def test_kl_loss_vanishes_at_own_probits(self, rng):
        m = make_arch("mlp1", 2, 3, seed=0)
        X = rng.standard_normal((8, 2))
        value, grads = loss_and_gradients(m, X, m.predict_proba(X), "kl_to_targets")
        assert abs(value) < 1e-12
        assert max(np.abs(g).max() for g in grads) < 1e-12

    def test_negated(self, rng):
        m = make_arch("linear", 2, 2, seed=0)
        X, y = rng.standard_normal((4, 2)), rng.integers(0, 2, 4)
        a, ga = loss_and_gradients(m, X, y)
        b, gb = loss_and_gradients(m, X, y, "negated_cross_entropy")
        assert a == -b
        for u, v in zip(ga, gb):
            np.testing.assert_array_equal(u, -v)


class TestTraining:
    def test_zero_epochs_is_identity(self, small):
        ds, _ = small
        m = make_arch("mlp1", 2, 3, seed=0)
        before = m.get_flat()
        trace = nets.train_ce(m, ds, TrainConfig(epochs=0))
        assert len(trace) == 0
        np.testing.assert_array_equal(m.get_flat(), before)

    def test_deterministic_and_learns(self, small):
        ds, _ = small
        a, b = make_arch("mlp1", 2, 3, seed=0), make_arch("mlp1", 2, 3, seed=0)
        cfg = TrainConfig(epochs=10, learning_rate=1e-2)
        ta = nets.train_ce(a, ds, cfg)
        nets.train_ce(b, ds, cfg)
        np.testing.assert_array_equal(a.get_flat(), b.get_flat())
        assert ta.records[-1].loss < ta.initial_loss

    @pytest.mark.parametrize("opt", ["sgd-momentum", "adam"])
    def test_optimizers(self, small, opt):
        ds, _ = small
        m = make_arch("linear", 2, 3, seed=0)
        trace = nets.train_ce(m, ds, TrainConfig(epochs=5, learning_rate=1e-2, optimizer=opt))
        assert trace.records[-1].loss < trace.initial_loss

    def test_divergence(self, small):
        ds, _ = small
        m = make_arch("mlp1", 2, 3, seed=0)
        with pytest.raises(TrainingDivergedError):
            nets.train_ce(m, ds, TrainConfig(epochs=50, learning_rate=1e3, optimizer="sgd-momentum"),
                          loss="negated_cross_entropy")

    def test_label_range(self, small):
        ds, _ = small
        with pytest.raises(ValueError):
            nets.train_ce(make_arch("linear", 2, 2), ds, TrainConfig(epochs=1))

    def test_distill_validates_targets(self, small):
        ds, _ = small
        m = make_arch("linear", 2, 3)
        with pytest.raises(ValueError):
            nets.distill(m, np.ones((len(ds), 3)), ds, TrainConfig(epochs=1))

    def test_distill_with_zero_targets(self, small):
        ds, _ = small
        m = make_arch("mlp1", 2, 3, seed=0)
        t = np.zeros((len(ds), 3))
        t[:, 1] = 0.3
        t[:, 2] = 0.7
        trace = nets.distill(m, t, ds, TrainConfig(epochs=30, learning_rate=1e-2))
        assert trace.records[-1].loss < 0.05

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=-1)
        with pytest.raises(ValueError):
            TrainConfig(optimizer="lbfgs")

    def test_trace_json(self, small):
        ds, _ = small
        trace = nets.train_ce(make_arch("linear", 2, 3), ds, TrainConfig(epochs=3))
        back = nets.TrainTrace.from_json(trace.to_json())
        assert back.column("loss") == trace.column("loss")


class TestBaselines:
    @pytest.mark.parametrize("kind", nets.BASELINES)
    def test_runs(self, small, kind):
        ds, split = small
        initial = make_arch("mlp1", 2, 3, seed=0)
        nets.train_ce(initial, ds, TrainConfig(epochs=3))
        ref = make_arch("mlp1", 2, 3, seed=1)
        fm = split.forget_mask(ds)
        mon = Monitor(test=(ds.features, ds.labels), forget=(ds.features[fm], ds.labels[fm]), reference=ref)
        model, trace = nets.baseline(kind, initial, ds, split, TrainConfig(epochs=3), mon)
        assert model is not initial
        assert len(trace) >= 1
        assert 0 <= nets.select_best_epoch(trace) < len(trace)

    def test_ga_ft_joins_traces(self, small):
        ds, split = small
        initial = make_arch("mlp1", 2, 3, seed=0)
        _, trace = nets.baseline("GA+FT", initial, ds, split, TrainConfig(epochs=4))
        assert trace.column("phase") == ["ga"] + ["ft"] * 4
        assert trace.column("epoch") == list(range(5))

    def test_unknown(self, small):
        ds, split = small
        with pytest.raises(ValueError):
            nets.baseline("SCRUB", make_arch("linear", 2, 3), ds, split, TrainConfig())

    def test_best_epoch_needs_reference(self, small):
        ds, _ = small
        trace = nets.train_ce(make_arch("linear", 2, 3), ds, TrainConfig(epochs=2))
        with pytest.raises(ValueError):
            nets.select_best_epoch(trace)


class TestClassifier:
    def test_sklearn_api(self, small):
        ds, _ = small
        clf = MlpClassifier(hidden_layer_sizes=(8,), learning_rate=1e-2, epochs=20)
        clf.fit(ds.features, np.array(["a", "b", "c"])[ds.labels])
        assert set(clf.predict(ds.features)) <= {"a", "b", "c"}
        assert clf.score(ds.features, np.array(["a", "b", "c"])[ds.labels]) > 0.6
        np.testing.assert_allclose(clf.predict_proba(ds.features).sum(1), 1.0)


class TestWorkedExamples:
    def test_separable_blobs(self, rng):
        X = np.concatenate([rng.normal(-3, 0.5, (100, 2)), rng.normal(3, 0.5, (100, 2))])
        ds = datagen.LabeledDataset(X, np.repeat([0, 1], 100), np.arange(200), 2)
        m = make_arch("mlp1", 2, 2, 16, seed=0)
        nets.train_ce(m, ds, TrainConfig(epochs=50, learning_rate=1e-2))
        assert np.mean(m.predict(X) == ds.labels) >= 0.99

    @pytest.mark.parametrize("opt", nets.OPTIMIZERS)
    def test_zero_learning_rate(self, small, opt):
        ds, _ = small
        m = make_arch("mlp1", 2, 3, seed=0)
        before = m.get_flat()
        nets.train_ce(m, ds, TrainConfig(epochs=3, learning_rate=0.0, optimizer=opt))
        np.testing.assert_array_equal(m.get_flat(), before)

    def test_own_probits_are_a_fixed_point(self, small):
        ds, _ = small
        m = make_arch("mlp1", 2, 3, seed=0)
        trace = nets.distill(m, m.predict_proba(ds.features), ds, TrainConfig(epochs=3))
        assert abs(trace.initial_loss) < 1e-12
        assert max(trace.column("loss")) < 1e-6

    def test_one_hot_teacher_is_cross_entropy(self, small, rng):
        ds, _ = small
        m = make_arch("mlp1", 2, 3, seed=0)
        idx = rng.permutation(len(ds))[:16]
        onehot = np.eye(3)[ds.labels[idx]]
        kl, g_kl = loss_and_gradients(m, ds.features[idx], onehot, "kl_to_targets")
        ce, g_ce = loss_and_gradients(m, ds.features[idx], ds.labels[idx])
        assert abs(kl - ce) < 1e-10
        for a, b in zip(g_kl, g_ce):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_dirac_teacher_suppresses_forgotten_label(self, small):
        from proxyunlearn import proxies

        ds, split = small
        m = make_arch("mlp1", 2, 3, seed=0)
        nets.train_ce(m, ds, TrainConfig(epochs=10, learning_rate=1e-2))
        pair = proxies.fit("DIR", ds, split)
        teacher = pair.target_probits(m.logits(ds.features), ds.features, ds.sample_id)
        fm = split.forget_mask(ds)
        assert np.all(ds.labels[fm] == 0)
        # forget-set CE on label 0 is minus the mean log-probit of that label
        mon = Monitor(forget=(ds.features[fm], ds.labels[fm]))
        start = mon.evaluate(m)["ce_f"]
        trace = nets.distill(m, teacher, ds, TrainConfig(epochs=5, learning_rate=1e-2), mon)
        assert np.all(np.isfinite(trace.column("loss")))
        assert np.all(np.diff([start] + trace.column("ce_f")) > 0)

    def test_finetune_without_epochs(self, small):
        ds, split = small
        initial = make_arch("mlp1", 2, 3, seed=0)
        model, _ = nets.baseline("FT", initial, ds, split, TrainConfig(epochs=0))
        np.testing.assert_array_equal(model.get_flat(), initial.get_flat())

    def test_ascent_raises_forget_loss(self, small):
        ds, split = small
        initial = make_arch("mlp1", 2, 3, seed=0)
        nets.train_ce(initial, ds, TrainConfig(epochs=10, learning_rate=1e-2))
        fm = split.forget_mask(ds)
        Xf, yf = ds.features[fm], ds.labels[fm]
        before = loss_and_gradients(initial, Xf, yf)[0]
        model, _ = nets.baseline("GA", initial, ds, split, TrainConfig(epochs=1, learning_rate=1e-3))
        assert loss_and_gradients(model, Xf, yf)[0] > before

    def test_retrain_is_deterministic(self, small):
        ds, split = small
        initial = make_arch("mlp1", 2, 3, seed=0)
        a, _ = nets.baseline("Retrain", initial, ds, split, TrainConfig(epochs=3, seed=5))
        b, _ = nets.baseline("Retrain", initial, ds, split, TrainConfig(epochs=3, seed=5))
        np.testing.assert_array_equal(a.get_flat(), b.get_flat())

    @pytest.mark.parametrize("values,best", [([3, 1, 2], 1), ([2, 2, 2], 0), ([5, 4, 3, 2], 3)])
    def test_best_epoch(self, values, best):
        trace = nets.TrainTrace([nets.EpochRecord(i, 0.0, 0.0, kl_f=float(v)) for i, v in enumerate(values)])
        assert nets.select_best_epoch(trace) == best
