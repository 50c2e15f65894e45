"""File formats for models, datasets and golden arrays.

Every binary file has the same layout::

    ADAS-<KIND> v1 <header-bytes>\\n
    <JSON header, exactly header-bytes long>\\n
    <little-endian float64 blob>

The header lists each array as ``{"name", "shape", "offset"}`` where
``offset`` counts float64 elements into the blob.  Model headers additionally
describe the vertices (op, inputs, shapes, attrs, backward mode, block) and
the input/logit/probability taps, plus an optional detector.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .models import Classifier, Dataset, Detector
from .tensor import Graph, Vertex

MAGIC = "ADAS"
VERSION = "v1"


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes | str):
    """Write via a temporary file in the same directory and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack(kind: str, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries, chunks, off = [], [], 0
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": off})
        chunks.append(a.ravel().tobytes())
        off += a.size
    header = {**header, "arrays": entries}
    hb = json.dumps(header, sort_keys=True, indent=1).encode("utf-8")
    return f"{MAGIC}-{kind} {VERSION} {len(hb)}\n".encode() + hb + b"\n" + b"".join(chunks)


def _unpack(data: bytes, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError("missing header line")
    first = data[:nl].decode("ascii", "replace").split()
    if len(first) != 3 or first[0] != f"{MAGIC}-{kind}":
        raise FormatError(f"not an {MAGIC}-{kind} file")
    if first[1] != VERSION:
        raise FormatError(f"unsupported version {first[1]}")
    try:
        hlen = int(first[2])
        header = json.loads(data[nl + 1:nl + 1 + hlen])
    except (ValueError, json.JSONDecodeError) as e:
        raise FormatError(f"bad header: {e}") from None
    blob = np.frombuffer(data[nl + 2 + hlen:], dtype="<f8")
    arrays = {}
    for e in header.get("arrays", []):
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + n > blob.size:
            raise FormatError(f"array {e['name']} runs past the end of the blob")
        arrays[e["name"]] = blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return header, arrays


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def model_bytes(model: Classifier) -> bytes:
    g = model.graph
    verts, arrays = [], {}
    for v in g.vertices:
        verts.append({"id": v.id, "op": v.op, "inputs": list(v.inputs), "out_shape": list(v.out_shape),
                      "attrs": {k: _jsonable(a) for k, a in v.attrs.items()},
                      "backward_mode": v.backward_mode, "block": v.block,
                      "params": sorted(v.params), "bpda_params": sorted(v.bpda_params or {})})
        for k in sorted(v.params):
            arrays[f"{v.id}/{k}"] = v.params[k]
        for k in sorted(v.bpda_params or {}):
            arrays[f"{v.id}/bpda/{k}"] = v.bpda_params[k]
    header = {"name": model.name, "num_classes": model.num_classes, "input_id": g.input_id,
              "logits_id": g.logits_id, "probs_id": g.probs_id, "vertices": verts,
              "detector": None if model.detector is None else
              {"kind": model.detector.kind, "threshold": model.detector.threshold}}
    return _pack("MODEL", header, arrays)


def model_from_bytes(data: bytes) -> Classifier:
    h, arrays = _unpack(data, "MODEL")
    try:
        verts = []
        for e in h["vertices"]:
            params = {k: arrays[f"{e['id']}/{k}"] for k in e["params"]}
            bpda = {k: arrays[f"{e['id']}/bpda/{k}"] for k in e["bpda_params"]}
            verts.append(Vertex(e["id"], e["op"], list(e["inputs"]), tuple(e["out_shape"]), params,
                                dict(e["attrs"]), e["backward_mode"], bpda, e["block"]))
        graph = Graph(verts, h["input_id"], h["logits_id"], h["probs_id"])
        det = h.get("detector")
        detector = None if det is None else Detector(det["threshold"], det["kind"])
        return Classifier(graph, h["num_classes"], detector, h["name"])
    except KeyError as e:
        raise FormatError(f"model header is missing {e}") from None


def save_model(model: Classifier, path):
    atomic_write(path, model_bytes(model))


def load_model(path) -> Classifier:
    return model_from_bytes(Path(path).read_bytes())


def save_dataset(data: Dataset, path):
    header = {"name": data.name, "num_classes": data.num_classes, "n": len(data)}
    atomic_write(path, _pack("DATA", header, {"x": data.x, "y": data.y.astype(np.float64),
                                              "ids": data.ids.astype(np.float64)}))


def load_dataset(path) -> Dataset:
    h, a = _unpack(Path(path).read_bytes(), "DATA")
    try:
        return Dataset(a["x"], a["y"].astype(np.int64), h["name"], h["num_classes"], a["ids"].astype(np.int64))
    except KeyError as e:
        raise FormatError(f"dataset file is missing {e}") from None


def save_arrays(arrays: dict[str, np.ndarray], path, meta: dict | None = None):
    """Golden-value files: named float64 arrays plus free-form metadata."""
    atomic_write(path, _pack("ARRAYS", {"meta": meta or {}}, arrays))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    h, a = _unpack(Path(path).read_bytes(), "ARRAYS")
    return a, h.get("meta", {})
