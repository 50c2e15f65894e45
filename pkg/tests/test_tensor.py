import numpy as np
import pytest
from conftest import DATA, random_graph, random_input
from hypothesis import given
from hypothesis import strategies as st
from oracles import reference_forward

from adasearch import io as aio
from adasearch.models import make_defended
from adasearch.tensor import (
    GraphBuilder,
    GraphError,
    NaNError,
    ShapeError,
    TransformPolicy,
    apply_transform,
    backward,
    finite_diff_grad,
    forward,
    list_bpda_candidates,
    list_removal_candidates,
    train_bpda_approximator,
)


def linear_graph(W, softmax=True):
    W = np.asarray(W, dtype=float)
    b = GraphBuilder((W.shape[1],))
    z = b.add("dense", ["input"], "z", params={"W": W, "b": np.zeros(W.shape[0])})
    p = b.add("softmax", [z], "p")
    return b.build(z, p)


def quant_graph(levels=8):
    b = GraphBuilder((3,))
    q = b.add("quantize", ["input"], "v3", attrs={"levels": levels})
    z = b.add("dense", [q], "z", params={"W": np.eye(3), "b": np.zeros(3)})
    p = b.add("softmax", [z], "p")
    return b.build(z, p)


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / (np.abs(b) + 1e-8)))


def test_forward_identity_dense():
    logits, _, _ = forward(linear_graph(np.eye(2)), [1.0, 2.0])
    assert logits.tolist() == [1.0, 2.0]


def test_softmax_symmetric():
    _, probs, _ = forward(linear_graph(np.zeros((2, 2))), [0.3, 0.7])
    assert probs.tolist() == [0.5, 0.5]


def test_forward_matches_golden_reference(mlp, test_data):
    arrays, _ = aio.load_arrays(DATA / "golden.bin")
    logits, probs, _ = forward(mlp.graph, test_data.x[0])
    np.testing.assert_allclose(logits, arrays["logits0"], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(probs, arrays["probs0"], rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("name", ["quant", "rs", "full"])
def test_reference_evaluator_agrees_on_defended_models(name, test_data):
    # the reference has no noise; "full" is evaluated with sigma forced to 0
    model = aio.load_model(DATA / f"{name}.bin")
    g = model.graph.copy()
    for v in g.vertices:
        if v.op == "gaussian-noise":
            v.op = "identity"
    for i in range(3):
        ref_l, ref_p = reference_forward(g, test_data.x[i])
        lg, pr, _ = forward(g, test_data.x[i])
        np.testing.assert_allclose(lg, ref_l, atol=1e-12)
        np.testing.assert_allclose(pr, ref_p, atol=1e-12)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        forward(linear_graph(np.eye(2)), [1.0, 2.0, 3.0])


def test_nan_names_vertex():
    g = linear_graph(np.eye(2))
    with pytest.raises(NaNError) as e:
        forward(g, [np.nan, 0.0])
    assert e.value.vertex_id == "input"


def test_backward_linear_is_Wt_g():
    W = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]])
    g = linear_graph(W)
    _, _, tr = forward(g, [0.2, 0.4])
    gz = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(backward(g, tr, gz, "logits"), W.T @ gz)


def test_backward_needs_trace():
    with pytest.raises(GraphError):
        backward(linear_graph(np.eye(2)), None, np.ones(2))


def test_quantize_native_gradient_is_zero():
    g = quant_graph()
    _, _, tr = forward(g, [0.1, 0.5, 0.9])
    assert np.array_equal(backward(g, tr, np.ones(3)), np.zeros(3))


@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_quantize_zero_gradient_property(x, gz):
    g = quant_graph()
    _, _, tr = forward(g, x)
    assert not np.any(backward(g, tr, gz))


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("kind", ["mlp", "cnn"])
def test_backward_matches_finite_differences(seed, kind):
    m = random_graph(seed, kind)
    x = random_input(m, seed)
    gz = np.random.default_rng(seed).normal(size=m.num_classes)
    _, _, tr = forward(m.graph, x)
    grad = backward(m.graph, tr, gz, "logits")
    fd = finite_diff_grad(m.graph, x, lambda lg, pr: float(lg @ gz), h=1e-3)
    assert rel_err(grad, fd) <= 1e-4


def test_finite_diff_rejects_nonpositive_h():
    with pytest.raises(ValueError):
        finite_diff_grad(linear_graph(np.eye(2)), [0.0, 0.0], lambda lg, pr: 0.0, h=0.0)


def test_bpda_candidates():
    assert list_bpda_candidates(linear_graph(np.eye(2))) == []
    assert list_bpda_candidates(quant_graph()) == ["v3"]


def test_defended_candidates(full):
    assert list_bpda_candidates(full.graph) == ["def0_quantize"]
    assert set(list_removal_candidates(full.graph)) == {"def0_quantize", "def1_gaussian-noise",
                                                        "def2_reverse-sigmoid"}


def test_dim_changing_vertex_not_removable():
    W = np.ones((3, 2))
    assert "z" not in list_removal_candidates(linear_graph(W))


def test_reverse_sigmoid_is_removal_candidate(rs):
    assert "def0_reverse-sigmoid" in list_removal_candidates(rs.graph)


def test_empty_policy_bit_exact(full, test_data):
    g = apply_transform(full.graph, TransformPolicy())
    a = forward(full.graph, test_data.x[:20], np.random.default_rng(3))
    b = forward(g, test_data.x[:20], np.random.default_rng(3))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_remove_reverse_sigmoid_gives_base_probs(rs, mlp, test_data):
    g = apply_transform(rs.graph, TransformPolicy(removal={"def0_reverse-sigmoid": True}))
    np.testing.assert_array_equal(forward(g, test_data.x[:10])[1], forward(mlp.graph, test_data.x[:10])[1])
    # the source graph is untouched
    assert "def0_reverse-sigmoid" in rs.graph


def test_bpda_identity_on_quantize(quant, test_data):
    g = apply_transform(quant.graph, TransformPolicy(bpda={"def0_quantize": "identity"}))
    x = test_data.x[0]
    assert np.array_equal(forward(g, x)[0], forward(quant.graph, x)[0])
    _, _, tr = forward(g, x)
    assert np.any(backward(g, tr, np.ones(4), "logits"))
    assert quant.graph["def0_quantize"].backward_mode == "native"


def test_apply_transform_rejects_invalid_ids(quant):
    with pytest.raises(GraphError):
        apply_transform(quant.graph, TransformPolicy(bpda={"logits": "identity"}))
    with pytest.raises(GraphError):
        apply_transform(quant.graph, TransformPolicy(removal={"nope": True}))


@given(st.lists(st.sampled_from(["quantize", "identity", "relu"]), min_size=1, max_size=3),
       st.integers(0, 2 ** 16))
def test_removal_never_breaks_shapes(ops, seed):
    m = random_graph(seed % 5, "mlp", extra=ops)
    cands = list_removal_candidates(m.graph)
    mask = np.random.default_rng(seed).random(len(cands)) < 0.5
    g = apply_transform(m.graph, TransformPolicy(removal={c: bool(r) for c, r in zip(cands, mask)}))
    lg, pr, _ = forward(g, random_input(m, seed % 7))
    assert lg.shape == (4,) and pr.shape == (4,)


def test_forward_deterministic_bits(noise, test_data):
    a = forward(noise.graph, test_data.x[:5], np.random.default_rng(11))
    b = forward(noise.graph, test_data.x[:5], np.random.default_rng(11))
    assert np.array_equal(a[1], b[1])


def test_conv1_learns_near_identity_vertex():
    # a 2^20-level quantizer is the identity up to 5e-7
    b = GraphBuilder((1, 4, 4))
    q = b.add("quantize", ["input"], "q", attrs={"levels": 2 ** 20})
    f = b.add("flatten", [q], "f")
    z = b.add("dense", [f], "z", params={"W": np.ones((3, 16)), "b": np.zeros(3)})
    p = b.add("softmax", [z], "p")
    g = b.build(z, p)
    x = np.random.default_rng(0).uniform(0, 1, (256, 1, 4, 4))
    _, hist = train_bpda_approximator(g, "q", "conv1", x, epochs=200, lr=0.5, seed=0)
    assert hist[-1] <= 1e-6


def test_zero_epochs_keeps_init(quant, test_data):
    w0, hist = train_bpda_approximator(quant.graph, "def0_quantize", "conv2relu", test_data.x, 0, seed=4)
    w1, _ = train_bpda_approximator(quant.graph, "def0_quantize", "conv2relu", test_data.x, 0, seed=4)
    assert len(hist) == 1
    assert all(np.array_equal(w0[k], w1[k]) for k in w0)


def test_conv2relu_on_four_level_quantizer_improves(mlp, test_data):
    q4 = make_defended(mlp, [{"type": "quantize", "levels": 4}])
    _, hist = train_bpda_approximator(q4.graph, "def0_quantize", "conv2relu", test_data.x, 10, seed=0)
    assert hist[-1] < hist[0]


def test_approximator_needs_data(quant):
    with pytest.raises(ValueError):
        train_bpda_approximator(quant.graph, "def0_quantize", "conv1", np.zeros((0, 1, 8, 8)))
