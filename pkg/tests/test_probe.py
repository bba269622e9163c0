import numpy as np
import pytest

from probekit.datasets import Dataset, one_hot
from probekit.exceptions import DimensionError, GraphError, InputError, NumericError
from probekit.graph import build_mlp, parameter_checksum
from probekit.models.config import ProbeTrainConfig
from probekit.probe import Probe, attach_probes, eval_probe, extract_features, extract_many, train_probe
from probekit.tensor import Rng


def _fit(blobs, config, seed=0):
    probe = Probe(_point(), 2, 2)
    return train_probe(probe, blobs.inputs, blobs.labels, blobs.inputs, blobs.labels, config, Rng(seed))


def _point():
    return build_mlp(depth=1, width=2, alpha=0.5, num_classes=2, rng=Rng(0), input_dim=2).probe_point("layer0")


# ---------- attach / extract ----------
def test_attach_one_probe_per_point():
    g = build_mlp(depth=32, width=16, alpha=0.5, num_classes=2, rng=Rng(0), input_dim=8)
    probes = attach_probes(g, [p.name for p in g.probe_points], 2)
    assert len(probes) == 33
    assert probes[0].k == 8 and probes[5].k == 16
    assert all(p.d == 2 and not p.W.any() and not p.b.any() for p in probes)


def test_attach_unknown_point(tiny_mlp):
    with pytest.raises(GraphError):
        attach_probes(tiny_mlp, ["layer99"], 2)


def test_zero_probe_predicts_class_zero(tiny_mlp):
    labels = np.array([0, 1, 1, 0, 1, 1, 1, 0])
    x = Rng(3).normal((8, 4))
    before = parameter_checksum(tiny_mlp.parameters)
    (probe,) = attach_probes(tiny_mlp, ["layer2"], 2)
    feats = extract_many(tiny_mlp, tiny_mlp.parameters, x, ["layer2"])["layer2"]
    assert eval_probe(probe, feats, one_hot(labels, 2)) == pytest.approx(1 - 3 / 8)
    assert parameter_checksum(tiny_mlp.parameters) == before


def test_input_point_features_are_the_input(tiny_mlp, rng):
    x = rng.normal((7, 4)).astype(np.float32)
    feats = extract_many(tiny_mlp, tiny_mlp.parameters, x, ["layer0"], batch_size=3)["layer0"]
    assert np.array_equal(feats, x)


def test_extraction_is_repeatable_and_batch_independent(tiny_mlp, rng):
    x = rng.normal((10, 4))
    a = extract_many(tiny_mlp, tiny_mlp.parameters, x, ["layer1", "layer3"], batch_size=4)
    b = extract_many(tiny_mlp, tiny_mlp.parameters, x, ["layer1", "layer3"], batch_size=10)
    for name in ("layer1", "layer3"):
        assert a[name].shape == (10, 8)
        assert np.allclose(a[name], b[name], atol=1e-6)
    again = extract_many(tiny_mlp, tiny_mlp.parameters, x, ["layer1", "layer3"], batch_size=4)
    assert a["layer3"].tobytes() == again["layer3"].tobytes()


def test_extract_features_returns_labels(tiny_mlp, rng):
    ds = Dataset(rng.normal((5, 4)), one_hot(np.array([0, 1, 0, 1, 1]), 2))
    feats, labels = extract_features(tiny_mlp, tiny_mlp.parameters, ds, "layer2")
    assert feats.shape == (5, 8)
    assert labels is ds.labels


def test_extract_rejects_foreign_parameters(tiny_mlp, rng):
    other = build_mlp(depth=2, width=8, alpha=0.5, num_classes=2, rng=Rng(1), input_dim=4)
    with pytest.raises(GraphError):
        extract_many(tiny_mlp, other.parameters, rng.normal((2, 4)), ["layer1"])


# ---------- training ----------
def test_separable_blobs_reach_zero_error(blobs, fast_probe_config):
    trained, history = _fit(blobs, fast_probe_config)
    assert eval_probe(trained, blobs.inputs, blobs.labels) == 0.0
    assert history.initial_validation_error == pytest.approx(0.5)
    assert history.best_epoch >= 1


def test_training_is_deterministic(blobs, fast_probe_config):
    a, ha = _fit(blobs, fast_probe_config, seed=4)
    b, hb = _fit(blobs, fast_probe_config, seed=4)
    assert a.W.tobytes() == b.W.tobytes()
    assert ha.train_loss == hb.train_loss


def test_full_batch_gradient_descent_is_monotone(blobs):
    cfg = ProbeTrainConfig(
        optimizer="sgd", learning_rate=1e-2, minibatch=len(blobs), max_epochs=25, patience=25, standardize=False
    )
    _, history = _fit(blobs, cfg)
    losses = history.train_loss
    assert len(losses) == 25
    assert all(b <= a + 1e-7 for a, b in zip(losses, losses[1:]))


def test_one_hot_features_are_perfectly_separable(fast_probe_config):
    y = one_hot(np.arange(60) % 3, 3)
    probe = Probe(_point(), 3, 3)
    trained, _ = train_probe(probe, y, y, y, y, fast_probe_config, Rng(0))
    assert eval_probe(trained, y, y) == 0.0


def test_scaling_features_does_not_change_the_fit(blobs, fast_probe_config):
    plain, _ = _fit(blobs, fast_probe_config)
    scaled_data = Dataset(blobs.inputs * 4.0, blobs.labels)
    scaled, _ = _fit(scaled_data, fast_probe_config)
    assert eval_probe(plain, blobs.inputs, blobs.labels) == eval_probe(scaled, scaled_data.inputs, blobs.labels)
    assert np.array_equal(plain.W, scaled.W)


def test_permuting_features_does_not_change_the_error(fast_probe_config):
    r = Rng(6)
    x = r.normal((120, 5))
    y = one_hot((x[:, 0] - x[:, 3] > 0).astype(int), 2)
    perm = np.array([3, 0, 4, 1, 2])
    probe = Probe(_point(), 2, 5)
    a, _ = train_probe(probe, x, y, x, y, fast_probe_config, Rng(1))
    b, _ = train_probe(probe, x[:, perm], y, x[:, perm], y, fast_probe_config, Rng(1))
    assert abs(eval_probe(a, x, y) - eval_probe(b, x[:, perm], y)) <= 0.02


def _random_probe(seed, k=4, d=3):
    r = Rng(seed)
    return Probe(_point(), d, k, W=r.normal((d, k)), b=r.normal(d))


def test_eval_probe_ignores_example_order():
    probe = _random_probe(7)
    r = Rng(8)
    x = r.normal((50, 4))
    y = one_hot(r.integers(3, 50), 3)
    perm = r.permutation(50)
    assert eval_probe(probe, x[perm], y[perm]) == eval_probe(probe, x, y)


@pytest.mark.parametrize("c", [0.25, 4.0, 1024.0])
def test_argmax_survives_rescaling_features_against_weights(c):
    probe = _random_probe(9)
    x = Rng(10).normal((40, 4))
    rescaled = Probe(probe.point, 3, 4, W=probe.W / c, b=probe.b)
    assert np.array_equal(rescaled.predict(x * c), probe.predict(x))


def test_early_stopping_respects_patience(blobs):
    cfg = ProbeTrainConfig(learning_rate=0.05, max_epochs=200, patience=3, minibatch=8)
    _, history = _fit(blobs, cfg)
    assert history.epochs_used - history.best_epoch <= 3
    assert history.epochs_used < 200


def test_training_does_not_mutate_the_input_probe(blobs, fast_probe_config):
    probe = Probe(_point(), 2, 2)
    train_probe(probe, blobs.inputs, blobs.labels, blobs.inputs, blobs.labels, fast_probe_config, Rng(0))
    assert not probe.W.any()
    assert probe.mean is None


# ---------- errors ----------
def test_empty_sets_raise_input_error(fast_probe_config):
    probe = Probe(_point(), 2, 2)
    empty_x, empty_y = np.zeros((0, 2)), np.zeros((0, 2))
    with pytest.raises(InputError):
        eval_probe(probe, empty_x, empty_y)
    with pytest.raises(InputError):
        train_probe(probe, empty_x, empty_y, np.ones((1, 2)), one_hot(np.array([0]), 2), fast_probe_config, Rng(0))


def test_dimension_mismatch(blobs, fast_probe_config):
    probe = Probe(_point(), 2, 3)
    with pytest.raises(DimensionError):
        eval_probe(probe, blobs.inputs, blobs.labels)
    with pytest.raises(DimensionError):
        train_probe(probe, blobs.inputs, blobs.labels, blobs.inputs, blobs.labels, fast_probe_config, Rng(0))
    with pytest.raises(DimensionError):
        Probe(_point(), 2, 2, W=np.zeros((2, 3)))


def test_non_finite_features_raise_numeric_error(blobs):
    cfg = ProbeTrainConfig(standardize=False, max_epochs=3)
    x = blobs.inputs.copy()
    x[0, 0] = np.inf
    with pytest.raises(NumericError) as exc:
        train_probe(Probe(_point(), 2, 2), x, blobs.labels, blobs.inputs, blobs.labels, cfg, Rng(0))
    assert exc.value.epoch == 1
