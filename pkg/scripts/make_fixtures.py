"""Regenerate the shipped fixtures in tests/data.

Writes datasets, the trained fixture MLP, the defended variants, golden
forward outputs from the scalar-loop reference evaluator, and golden.json
with the recorded thresholds used by the tests.

    python scripts/make_fixtures.py [--out tests/data]
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from oracles import reference_forward  # noqa: E402

from adasearch import io as aio  # noqa: E402
from adasearch.dsl import parse  # noqa: E402
from adasearch.losses import enumerate_targets  # noqa: E402
from adasearch.metrics import evaluate  # noqa: E402
from adasearch.models import accuracy, make_defended, make_fixture_dataset, train_fixture  # noqa: E402
from adasearch.search import surrogate_of  # noqa: E402
from adasearch.tensor import TransformPolicy  # noqa: E402

EPS = 0.05
RS_STRONG = {"type": "reverse-sigmoid", "beta": 1.0, "gamma": 0.5}
GOLDEN_PROGRAM = "PGD with {step: 20, rel_stepsize: 0.1} with untargeted CE with probs"
# randomized defenses are attacked with gradient averaging
NOISE_PROGRAM = "EOT (PGD with {step: 20, rel_stepsize: 0.1}), 10 with untargeted CE with probs"
APGD_CE = "APGD with {} with untargeted CE with probs"
SQR = "SQR with {} with untargeted Hinge with logits"


def build(out: Path) -> dict:
    train = make_fixture_dataset("bars", 400, 0)
    test = make_fixture_dataset("bars", 200, 1)
    mlp = train_fixture(train, "mlp", 30, 0)
    models = {
        "mlp": mlp,
        "quant": make_defended(mlp, [{"type": "quantize", "levels": 8}], name="quant"),
        "rs": make_defended(mlp, [RS_STRONG], name="rs"),
        "noise": make_defended(mlp, [{"type": "gaussian-noise", "sigma": 0.05}], name="noise"),
        "combo": make_defended(mlp, [{"type": "quantize", "levels": 8}, {"type": "reverse-sigmoid"}], 0.4,
                               name="combo"),
        "full": make_defended(mlp, [{"type": "quantize", "levels": 8}, {"type": "gaussian-noise", "sigma": 0.05},
                                    {"type": "reverse-sigmoid"}], name="full"),
    }
    aio.save_dataset(train, out / "train.bin")
    aio.save_dataset(test, out / "test.bin")
    for name, m in models.items():
        aio.save_model(m, out / f"{name}.bin")

    logits0, probs0 = reference_forward(mlp.graph, test.x[0])
    targets0 = enumerate_targets(np.array(probs0), int(test.y[0]), 3)
    aio.save_arrays({"logits0": np.array(logits0), "probs0": np.array(probs0),
                     "targets0": np.array(targets0, dtype=float)}, out / "golden.bin",
                    {"model": "mlp.bin", "input": "test.bin sample 0", "evaluator": "tests/oracles.py"})

    rec: dict = {"eps": EPS, "golden_program": GOLDEN_PROGRAM, "noise_program": NOISE_PROGRAM}
    rec["mlp_clean_accuracy"] = accuracy(mlp, test)
    rec["detector_accept_0.4"] = float(np.mean(mlp.probs(test.x).max(axis=1) >= 0.4))
    rec["combo_clean_accept"] = float(np.mean(models["combo"].probs(test.x).max(axis=1) >= 0.4))

    quant = models["quant"]
    ident = surrogate_of(quant, TransformPolicy({"def0_quantize": "identity"}, {}, {}))
    apgd, sqr = parse(APGD_CE), parse(SQR)
    rec["quant_apgd_native_asr"] = evaluate(quant, apgd, test, EPS).asr
    rec["quant_apgd_bpda_asr"] = evaluate(quant, apgd, test, EPS, surrogate=ident).asr
    rec["quant_sqr_native_asr"] = evaluate(quant, sqr, test, EPS).asr

    gp = parse(GOLDEN_PROGRAM)
    rec["golden_rerr"] = {name: evaluate(models[name], gp, test, EPS, seed=0).rerr for name in ("mlp", "quant")}
    npg = parse(NOISE_PROGRAM)
    rec["golden_rerr"]["noise"] = [evaluate(models["noise"], npg, test, EPS, 10, seed=s).rerr for s in range(3)]
    return rec


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(ROOT / "tests" / "data"))
    args = ap.parse_args(argv)
    out = Path(args.out)
    t0 = time.perf_counter()
    rec = build(out)
    aio.atomic_write(out / "golden.json", json.dumps(rec, indent=1, sort_keys=True) + "\n")
    print(json.dumps(rec, indent=1, sort_keys=True))
    print(f"fixtures written to {out} in {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
