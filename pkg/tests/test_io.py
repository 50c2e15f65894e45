import numpy as np
import pytest

from adasearch.io import (
    FormatError,
    atomic_write,
    load_arrays,
    load_dataset,
    load_model,
    model_bytes,
    model_from_bytes,
    save_arrays,
    save_dataset,
    save_model,
)


@pytest.mark.parametrize("name", ["mlp", "quant", "rs", "noise", "combo", "full"])
def test_model_round_trip(name, request, test_data, tmp_path):
    m = request.getfixturevalue(name)
    save_model(m, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    assert model_bytes(back) == model_bytes(m)
    x = test_data.x[:5]
    for i in range(5):
        a = m.probs(x[i], np.random.default_rng(i))
        b = back.probs(x[i], np.random.default_rng(i))
        assert np.array_equal(a, b)


def test_dataset_round_trip(test_data, tmp_path):
    save_dataset(test_data, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    assert np.array_equal(back.x, test_data.x) and np.array_equal(back.y, test_data.y)
    assert np.array_equal(back.ids, test_data.ids) and back.num_classes == test_data.num_classes


def test_arrays_round_trip(tmp_path):
    arrs = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi])}
    save_arrays(arrs, tmp_path / "g.bin", {"k": 1})
    back, meta = load_arrays(tmp_path / "g.bin")
    assert meta == {"k": 1} and all(np.array_equal(back[k], arrs[k]) for k in arrs)


@pytest.mark.parametrize("data", [b"", b"no newline", b"ADAS-DATA v1 5\n{}\n", b"ADAS-MODEL v9 2\n{}\n",
                                  b"ADAS-MODEL v1 x\n{}\n", b"ADAS-MODEL v1 3\n{x}\n"])
def test_bad_headers(data):
    with pytest.raises(FormatError):
        model_from_bytes(data)


def test_truncated_blob(mlp):
    data = model_bytes(mlp)
    with pytest.raises(FormatError):
        model_from_bytes(data[:-8])


def test_missing_field(tmp_path):
    save_arrays({"x": np.zeros(2)}, tmp_path / "a.bin")
    raw = (tmp_path / "a.bin").read_bytes().replace(b"ADAS-ARRAYS", b"ADAS-DATA", 1)
    (tmp_path / "d.bin").write_bytes(raw)
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "d.bin")


def test_atomic_write_leaves_old_file_on_failure(tmp_path, monkeypatch):
    p = tmp_path / "out.txt"
    atomic_write(p, "old")

    def boom(*a):
        raise OSError("disk full")

    monkeypatch.setattr("os.replace", boom)
    with pytest.raises(OSError):
        atomic_write(p, "new")
    assert p.read_text() == "old"
    assert [q.name for q in tmp_path.iterdir()] == ["out.txt"]
