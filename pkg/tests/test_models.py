import numpy as np
import pytest

from adasearch import io as aio
from adasearch.models import (
    Detector,
    NoDetector,
    TrainingDiverged,
    accuracy,
    detect,
    make_defended,
    make_fixture_dataset,
    train_fixture,
)
from adasearch.tensor import forward, quantize_values


def test_dataset_deterministic():
    a, b = make_fixture_dataset("bars", 8, 0), make_fixture_dataset("bars", 8, 0)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)


@pytest.mark.parametrize("kind", ["bars", "blobs"])
def test_dataset_balanced_and_in_domain(kind):
    d = make_fixture_dataset(kind, 400, 0)
    assert np.bincount(d.y, minlength=4).tolist() == [100] * 4
    assert d.x.shape == (400, 1, 8, 8) and d.x.min() >= 0 and d.x.max() <= 1


def test_dataset_rejects_nonpositive_n():
    with pytest.raises(ValueError):
        make_fixture_dataset("bars", 0, 0)


def test_fixture_mlp_accuracy(mlp, test_data, golden):
    acc = accuracy(mlp, test_data)
    assert acc >= 0.95
    assert acc == golden["mlp_clean_accuracy"]


def test_untrained_is_near_chance(test_data):
    m = train_fixture(make_fixture_dataset("bars", 40, 0), "mlp", epochs=0, seed=0)
    assert 0.1 <= accuracy(m, test_data) <= 0.5


def test_training_deterministic():
    d = make_fixture_dataset("bars", 64, 0)
    a, b = train_fixture(d, "cnn", 2, 5), train_fixture(d, "cnn", 2, 5)
    assert aio.model_bytes(a) == aio.model_bytes(b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_divergence_is_reported():
    d = make_fixture_dataset("bars", 64, 0)
    with pytest.raises(TrainingDiverged):
        train_fixture(d, "mlp", 5, 0, lr=1e200)


def test_empty_defense_list_is_identity(mlp, test_data):
    d = make_defended(mlp, [])
    assert np.array_equal(d.probs(test_data.x), mlp.probs(test_data.x))


def test_quantize_idempotent_on_fixed_points(mlp, test_data):
    xq = quantize_values(test_data.x[:50], 8)
    d = make_defended(mlp, [{"type": "quantize", "levels": 8}])
    assert np.array_equal(d.probs(xq), mlp.probs(xq))
    assert np.array_equal(d.predict(xq), mlp.predict(xq))


def test_noise_rng_contract(noise, test_data):
    x = test_data.x[:4]
    assert noise.is_randomized
    assert np.array_equal(noise.probs(x, np.random.default_rng(1)), noise.probs(x, np.random.default_rng(1)))
    assert not np.array_equal(noise.probs(x, np.random.default_rng(1)), noise.probs(x, np.random.default_rng(2)))


def test_is_randomized_matches_behaviour(mlp, quant, rs, noise, test_data):
    x = test_data.x[0]
    for m in (mlp, quant, rs, noise):
        outs = {m.probs(x, np.random.default_rng(s)).tobytes() for s in range(100)}
        assert (len(outs) > 1) == m.is_randomized
    assert not make_defended(mlp, [{"type": "gaussian-noise", "sigma": 0.0}]).is_randomized


@pytest.mark.parametrize("bad", [{"type": "quantize", "levels": 1}, {"type": "gaussian-noise", "sigma": -1},
                                 {"type": "reverse-sigmoid", "beta": 2.0}, {"type": "jpeg"},
                                 {"type": "quantize", "levels": 8, "extra": 1}])
def test_invalid_defense(mlp, bad):
    with pytest.raises(ValueError):
        make_defended(mlp, [bad])


def test_reverse_sigmoid_goes_after_probs(mlp):
    d = make_defended(mlp, [{"type": "reverse-sigmoid"}, {"type": "quantize"}])
    ids = [v.id for v in d.graph.vertices]
    assert ids.index("def1_quantize") < ids.index("logits") < ids.index("def0_reverse-sigmoid")
    assert d.graph.probs_id == "def0_reverse-sigmoid"


def test_reverse_sigmoid_keeps_a_distribution(rs, test_data):
    p = rs.probs(test_data.x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert p.min() > 0


def test_detector_examples():
    det = Detector(0.5)
    assert det.accepts(np.array([0.9, 0.1, 0, 0])) == 1
    assert det.accepts(np.full(4, 0.25)) == 0
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            Detector(bad)


def test_detect_on_fixture(mlp, combo, test_data, golden):
    model = make_defended(mlp, [], 0.4)
    rate = float(np.mean(detect(model, test_data.x)))
    assert rate >= 0.95 and rate == golden["detector_accept_0.4"]
    assert detect(model, test_data.x[0]) in (0, 1)
    with pytest.raises(NoDetector):
        detect(mlp, test_data.x[0])


def test_serialization_roundtrip(full, combo):
    x = np.random.default_rng(0).uniform(0, 1, (100, 1, 8, 8))
    for m in (full, combo):
        back = aio.model_from_bytes(aio.model_bytes(m))
        assert back.detector == m.detector
        a = forward(m.graph, x, np.random.default_rng(5))[1]
        b = forward(back.graph, x, np.random.default_rng(5))[1]
        assert np.array_equal(a, b)
