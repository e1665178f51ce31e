import itertools

import numpy as np
import pytest

from debiaslab.data import BiasSpec, Dataset, generate_synthetic
from debiaslab.end_reg import EndWeights
from debiaslab.errors import ParameterError, RunError
from debiaslab.model import DenseLayer, ModelParams, init_model
from debiaslab.pipeline import (
    TrainConfig,
    bias_pseudo_accuracy,
    biasness_curve,
    default_snapshot_epochs,
    evaluate,
    run_pipeline,
    search_hyperparams,
    train_debiased,
    train_vanilla,
)
from conftest import build_splits


def brute_force_permutation_accuracy(predictions, labels, n_classes):
    confusion = np.zeros((n_classes, n_classes))
    np.add.at(confusion, (predictions, labels), 1.0)
    best = max(
        sum(confusion[perm[c], c] for c in range(n_classes))
        for perm in itertools.permutations(range(n_classes))
    )
    return best / len(predictions)


def one_hot_model(n_classes):
    """Encoder identity over one-hot features; classifies them perfectly."""
    enc = [DenseLayer(np.eye(n_classes), np.zeros(n_classes), "linear")]
    cls = DenseLayer(np.eye(n_classes), np.zeros(n_classes), "linear")
    return ModelParams(enc, cls)


def one_hot_dataset(n_classes, repeats=3):
    targets = np.tile(np.arange(n_classes), repeats)
    feats = np.eye(n_classes)[targets]
    return Dataset(
        features=feats,
        targets=targets,
        biases=targets.copy(),
        n_targets=n_classes,
        n_biases=n_classes,
        rho=1.0,
    )


class TestBiasPseudoAccuracy:
    def test_permuted_labels_score_one(self, rng):
        labels = rng.integers(0, 6, 500)
        perm = rng.permutation(6)
        assert bias_pseudo_accuracy(perm[labels], labels, 6) == 1.0

    def test_identity_is_raw_accuracy(self, rng):
        labels = rng.integers(0, 4, 300)
        preds = labels.copy()
        flip = rng.random(300) < 0.1
        preds[flip] = (preds[flip] + 1) % 4
        raw = (preds == labels).mean()
        # identity is already optimal here
        assert bias_pseudo_accuracy(preds, labels, 4) == pytest.approx(raw)

    def test_uniform_random_near_chance(self, rng):
        preds = rng.integers(0, 10, 10**4)
        labels = rng.integers(0, 10, 10**4)
        acc = bias_pseudo_accuracy(preds, labels, 10)
        # maximization inflates slightly above 1/10
        assert 0.1 <= acc < 0.13

    @pytest.mark.parametrize("n_classes", [3, 4, 5])
    def test_matches_brute_force(self, n_classes, rng):
        for _ in range(25):
            n = int(rng.integers(20, 60))
            preds = rng.integers(0, n_classes, n)
            labels = rng.integers(0, n_classes, n)
            assert bias_pseudo_accuracy(preds, labels, n_classes) == pytest.approx(
                brute_force_permutation_accuracy(preds, labels, n_classes)
            )

    def test_errors(self):
        with pytest.raises(ParameterError):
            bias_pseudo_accuracy([0, 5], [0, 1], 3)
        with pytest.raises(ParameterError):
            bias_pseudo_accuracy([], [], 3)
        with pytest.raises(ParameterError):
            bias_pseudo_accuracy([0, 1], [0], 3)


class TestEvaluate:
    def test_memorizing_model(self):
        ds = one_hot_dataset(5)
        acc, per_class = evaluate(one_hot_model(5), ds)
        assert acc == 1.0
        np.testing.assert_array_equal(per_class, np.ones(5))

    def test_constant_model_on_balanced_set(self):
        ds = one_hot_dataset(5)
        params = one_hot_model(5)
        params.classifier.weight = np.zeros((5, 5))
        params.classifier.bias = np.array([0.0, 1.0, 0.0, 0.0, 0.0])
        acc, _ = evaluate(params, ds)
        assert acc == pytest.approx(1 / 5)

    def test_random_models_near_chance_on_average(self, rng):
        # A single random net favors arbitrary classes; the mean over many
        # random nets lands at chance level.
        ds = generate_synthetic(BiasSpec(rho=0.1, seed=0), 2000)
        accs = [
            evaluate(init_model(ds.dim, (16,), 8, 10, rng), ds)[0] for _ in range(20)
        ]
        assert abs(np.mean(accs) - 0.1) < 0.03

    def test_empty_dataset(self):
        empty = Dataset(
            features=np.zeros((0, 5)),
            targets=np.zeros(0, dtype=int),
            biases=None,
            n_targets=5,
            n_biases=5,
            rho=0.5,
        )
        with pytest.raises(ParameterError):
            evaluate(one_hot_model(5), empty)


class TestTrainVanilla:
    def test_zero_epochs_returns_initialization(self):
        train, val, _ = build_splits(0.9, seed=2, n_train=200, n_val=100, n_test=0)
        cfg = TrainConfig(epochs=0, seed=2, rho=0.9)
        params, snapshots, report = train_vanilla(cfg, train, val)
        fresh = init_model(train.dim, cfg.hidden, cfg.embedding_dim,
                           train.n_targets, np.random.default_rng(2))
        for a, b in zip(params.all_layers(), fresh.all_layers()):
            np.testing.assert_array_equal(a.weight, b.weight)
        assert snapshots == {} and report.train_loss == []

    def test_divergence_raises_run_error(self):
        train, val, _ = build_splits(0.9, seed=3, n_train=200, n_val=100, n_test=0)
        cfg = TrainConfig(epochs=2, seed=3, optimizer="sgd", learning_rate=1e150,
                          rho=0.9)
        with pytest.raises(RunError) as err:
            with np.errstate(all="ignore"):
                train_vanilla(cfg, train, val)
        assert err.value.epoch is not None

    def test_report_lengths_match_epochs(self):
        train, val, _ = build_splits(0.9, seed=4, n_train=300, n_val=100, n_test=0)
        cfg = TrainConfig(epochs=3, seed=4, snapshot_epochs=(1, 3), rho=0.9)
        params, snapshots, report = train_vanilla(cfg, train, val)
        assert len(report.train_loss) == 3
        assert len(report.val_acc) == 3
        assert sorted(snapshots) == [1, 3]

    def test_invalid_snapshot_epochs(self):
        with pytest.raises(ParameterError):
            TrainConfig(epochs=5, snapshot_epochs=(0, 3))

    def test_runs_with_masked_bias_labels(self):
        # The bias-capturing phase never needs bias labels.
        train, val, _ = build_splits(0.9, seed=4, n_train=300, n_val=100, n_test=0)
        cfg = TrainConfig(epochs=2, seed=4, rho=0.9)
        _, _, report = train_vanilla(cfg, train.mask_biases(), val.mask_biases())
        assert len(report.val_acc) == 2
        assert all(np.isnan(v) for v in report.val_bias_pseudo_acc)


class TestTrainDebiased:
    def test_zero_weights_matches_vanilla_bitwise(self):
        # With (0, 0) the regularizer contributes nothing, so the update
        # sequence is identical to vanilla training under the same seed.
        train, val, _ = build_splits(0.9, seed=5, n_train=400, n_val=150, n_test=0)
        cfg = TrainConfig(epochs=4, seed=5, rho=0.9)
        vparams, _, _ = train_vanilla(cfg, train, val)
        dparams, _ = train_debiased(cfg, train, val, EndWeights(0.0, 0.0))
        for a, b in zip(vparams.all_layers(), dparams.all_layers()):
            np.testing.assert_array_equal(a.weight, b.weight)
            np.testing.assert_array_equal(a.bias, b.bias)

    def test_requires_pseudo_labels(self):
        train, val, _ = build_splits(0.9, seed=6, n_train=200, n_val=100, n_test=0)
        masked = Dataset(
            features=train.features,
            targets=train.targets,
            biases=None,
            n_targets=train.n_targets,
            n_biases=train.n_biases,
            rho=train.rho,
        )
        with pytest.raises(ParameterError):
            train_debiased(TrainConfig(epochs=1, seed=6), masked, val, EndWeights(1, 1))


class TestSearchHyperparams:
    def test_budget_one_returns_zero_point(self):
        train, val, _ = build_splits(0.9, seed=7, n_train=300, n_val=100, n_test=0)
        cfg = TrainConfig(epochs=2, seed=7, rho=0.9)
        w, trials = search_hyperparams(cfg, train, val, budget=1)
        assert (w.alpha, w.beta) == (0.0, 0.0)
        assert len(trials) == 1

    def test_candidates_within_interval(self, rng):
        train, val, _ = build_splits(0.9, seed=8, n_train=300, n_val=100, n_test=0)
        cfg = TrainConfig(epochs=1, seed=8, rho=0.9)
        _, trials = search_hyperparams(cfg, train, val, budget=6, rng=rng)
        for t in trials[1:]:
            assert 1e-2 <= t["alpha"] <= 50.0
            assert 1e-2 <= t["beta"] <= 50.0

    def test_budget_validation(self):
        train, val, _ = build_splits(0.9, seed=9, n_train=200, n_val=100, n_test=0)
        with pytest.raises(ParameterError):
            search_hyperparams(TrainConfig(epochs=1, seed=9), train, val, budget=0)


class TestBiasnessCurve:
    def test_untrained_model_phi_within_bounds(self, rng):
        ds = generate_synthetic(BiasSpec(rho=0.99, seed=10), 2000)
        snapshots = {0: init_model(ds.dim, (16,), 8, 10, rng)}
        curve = biasness_curve(snapshots, ds, rho=0.99)
        assert len(curve) == 1
        assert 0.0 <= curve[0][1] <= 1.0

    def test_requires_bias_labels(self, rng):
        ds = generate_synthetic(BiasSpec(rho=0.99, seed=11), 100)
        masked = Dataset(
            features=ds.features,
            targets=ds.targets,
            biases=None,
            n_targets=10,
            n_biases=10,
            rho=0.99,
        )
        snapshots = {0: init_model(ds.dim, (16,), 8, 10, rng)}
        with pytest.raises(ParameterError):
            biasness_curve(snapshots, masked, rho=0.99)


class TestRunPipeline:
    @pytest.fixture(scope="class")
    def small_result(self):
        train, val, test = build_splits(0.999, seed=12, n_train=1200, n_val=500,
                                        n_test=400)
        cfg = TrainConfig(epochs=10, seed=12, snapshot_epochs=(3, 10),
                          search_budget=3, rho=0.999)
        return (
            run_pipeline(cfg, train, val, test, search_rng=np.random.default_rng(12)),
            train,
        )

    def test_phase_isolation(self, small_result):
        result, train = small_result
        pseudo = result.pseudo_train
        # the dataset handed to phase 3 carries only predictor outputs
        assert not np.shares_memory(pseudo.biases, train.biases)
        fields = {f.name for f in pseudo.__dataclass_fields__.values()}
        assert fields == {
            "features", "targets", "biases", "n_targets", "n_biases", "rho",
            "bias_spec",
        }
        preds = np.asarray(pseudo.biases)
        assert preds.max() < result.predictor.k

    def test_artifacts_present(self, small_result):
        result, _ = small_result
        assert result.vanilla_report.test_acc is not None
        assert result.debiased_report.test_acc is not None
        assert result.chosen_weights is not None
        assert len(result.trials) == 3
        assert [e for e, _ in result.phi_curve] == [3, 10]
        assert all(0.0 <= phi <= 1.0 for _, phi in result.phi_curve)

    def test_deterministic_repeat(self, small_result):
        result, train = small_result
        train2, val2, test2 = build_splits(0.999, seed=12, n_train=1200, n_val=500,
                                           n_test=400)
        cfg = TrainConfig(epochs=10, seed=12, snapshot_epochs=(3, 10),
                          search_budget=3, rho=0.999)
        repeat = run_pipeline(cfg, train2, val2, test2,
                              search_rng=np.random.default_rng(12))
        np.testing.assert_array_equal(train.features, train2.features)
        assert repeat.vanilla_report.test_acc == result.vanilla_report.test_acc
        assert repeat.debiased_report.test_acc == result.debiased_report.test_acc
        for a, b in zip(result.debiased_params.all_layers(),
                        repeat.debiased_params.all_layers()):
            np.testing.assert_array_equal(a.weight, b.weight)

    def test_phase_one_stops_early(self):
        train, val, test = build_splits(0.9, seed=13, n_train=400, n_val=150,
                                        n_test=100)
        cfg = TrainConfig(epochs=3, seed=13, snapshot_epochs=(3,), rho=0.9)
        result = run_pipeline(cfg, train, val, test, phase="1")
        assert result.predictor is None and result.debiased_params is None

    def test_invalid_phase(self):
        train, val, test = build_splits(0.9, seed=13, n_train=200, n_val=100,
                                        n_test=50)
        with pytest.raises(ParameterError):
            run_pipeline(TrainConfig(epochs=1, seed=13), train, val, test, phase="4")


class TestMonotoneTrends:
    def test_vanilla_accuracy_and_phi_monotone_in_rho(self):
        # Shared seed across the rho ladder: unbiased-test accuracy must not
        # increase with rho, the early-epoch bias estimate must not decrease.
        accs, phis = [], []
        for rho in (0.9, 0.99, 0.999):
            train, val, test = build_splits(rho, seed=14)
            cfg = TrainConfig(epochs=40, seed=14, snapshot_epochs=(10,), rho=rho)
            params, snaps, _ = train_vanilla(cfg, train, val)
            acc, _ = evaluate(params, test)
            accs.append(acc)
            phis.append(biasness_curve(snaps, train, rho)[0][1])
        assert accs[0] >= accs[1] >= accs[2]
        assert phis[0] <= phis[1] <= phis[2]


def test_default_snapshot_epochs():
    assert default_snapshot_epochs(40) == (10, 40)
    assert default_snapshot_epochs(8) == (8,)
    assert default_snapshot_epochs(0) == ()
