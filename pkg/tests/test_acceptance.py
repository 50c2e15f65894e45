"""Acceptance suite: one test (or group of tests) per criterion, at the stated tolerances.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion.  The desk-scale searches are the slow part
(several minutes) and are shared between criteria 5 and 8.
"""

import itertools
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import DATA, random_graph, random_input

from adasearch.cli import main as cli_main
from adasearch.dsl import DSLRangeError, format_program, parse, parse_spec
from adasearch.losses import DIRECTIONS, LOSS_KINDS, TAPS, LossSpec, eval_loss, loss_gradient, objective_and_grad_at_tap
from adasearch.metrics import SampleRecord, evaluate, rerr_empirical
from adasearch.search import (
    NEG_INF,
    SearchConfig,
    Trial,
    prefilter,
    successive_halving,
    surrogate_of,
    transformation_search,
)
from adasearch.tensor import TransformPolicy, finite_diff_grad

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))
import desk_comparison  # noqa: E402
import tpe_vs_random  # noqa: E402
from programs import random_program  # noqa: E402

EPS = 0.05
crit = pytest.mark.criterion


# 1 -------------------------------------------------------------------------


def _loss_combos():
    for kind, d, tap in itertools.product(LOSS_KINDS, DIRECTIONS, TAPS):
        if not (kind == "CE" and tap == "logits"):
            yield LossSpec(kind, d, tap, 1)


@crit(1, "gradient oracle: autodiff vs central differences (h=1e-3), rel. error <= 1e-4, < 30 s")
def test_c01_gradient_oracle():
    t0 = time.perf_counter()
    combos = list(_loss_combos())
    assert len(combos) == 27  # CE needs the probability tap
    worst = 0.0
    for gi in range(10):
        m = random_graph(100 + gi, "mlp" if gi % 2 == 0 else "cnn")
        x = random_input(m, gi)
        rng = np.random.default_rng(gi)
        for spec in combos:
            y = int(rng.integers(4))
            t = (y + 1 + int(rng.integers(3))) % 4 if spec.targeted else None
            ref = {c: rng.normal(size=4) for c in range(4)} if spec.kind == "LogitMatching" else None
            _, grad = loss_gradient(m.graph, x, y, t, spec, ref)

            def obj(lg, pr, spec=spec, y=y, t=t, ref=ref):
                return objective_and_grad_at_tap(lg if spec.tap == "logits" else pr, y, t, spec, ref)[0]

            fd = finite_diff_grad(m.graph, x, obj, h=1e-3)
            worst = max(worst, float(np.max(np.abs(grad - fd) / (np.abs(fd) + 1e-8))))
    elapsed = time.perf_counter() - t0
    print(f"worst relative error {worst:.2e} in {elapsed:.1f}s")
    assert worst <= 1e-4
    assert elapsed < 30


# 2 -------------------------------------------------------------------------


@crit(2, "obfuscation break on the quantize fixture")
def test_c02a_native_gradient_is_zero(quant, test_data):
    for i in range(20):
        _, g = loss_gradient(quant.graph, test_data.x[i], int(test_data.y[i]), None, LossSpec("CE"))
        assert not np.any(g)


@crit(2, "obfuscation break on the quantize fixture")
def test_c02b_transformation_search_picks_bpda(quant, test_data):
    clean = prefilter(quant, test_data, 0)
    cfg = SearchConfig(eps=EPS, n=50, clock="queries", budget_sec=0.5)
    tr = transformation_search(quant, clean, cfg)
    print("policy", tr.policy.describe(), "scores", tr.native_score, "->", tr.final_score)
    assert tr.policy.bpda.get("def0_quantize", "none") != "none"
    assert tr.final_score > tr.native_score


@crit(2, "obfuscation break on the quantize fixture")
def test_c02c_bpda_and_sqr_beat_native(quant, test_data, golden):
    ident = surrogate_of(quant, TransformPolicy({"def0_quantize": "identity"}, {}, {}))
    apgd = parse("APGD with {} with untargeted CE with probs")
    native = evaluate(quant, apgd, test_data, EPS).asr
    bpda = evaluate(quant, apgd, test_data, EPS, surrogate=ident).asr
    sqr = evaluate(quant, parse("SQR with {} with untargeted Hinge with logits"), test_data, EPS).asr
    print(f"APGD native {native:.4f}  APGD+BPDA {bpda:.4f}  SQR {sqr:.4f}")
    assert bpda > native and sqr > 0
    # recorded when the fixtures were built
    assert (native, bpda, sqr) == (golden["quant_apgd_native_asr"], golden["quant_apgd_bpda_asr"],
                                   golden["quant_sqr_native_asr"])


# 3 -------------------------------------------------------------------------


@crit(3, "removal break on the reverse-sigmoid fixture")
def test_c03_removal_of_reverse_sigmoid(rs, test_data):
    clean = prefilter(rs, test_data, 0)
    cfg = SearchConfig(eps=EPS, n=50, clock="queries", budget_sec=0.5)
    tr = transformation_search(rs, clean, cfg)
    print("policy", tr.policy.describe(), "scores", tr.native_score, "->", tr.final_score)
    assert tr.policy.removal.get("def0_reverse-sigmoid") is True
    assert tr.final_score > tr.native_score


# 4 -------------------------------------------------------------------------


@crit(4, "SHA schedule 64->16->4->1 on 100->200->400 samples")
def test_c04_sha_schedule():
    rng = np.random.default_rng(0)
    quality = rng.random(64)
    trials = [Trial(i, {}, None, f"t{i}") for i in range(64)]

    def rescore(t, ids):
        t.score = float(quality[t.index] + 0.01 * len(ids))
        t.seconds = 1.0

    for t in trials:
        rescore(t, range(100))
    res = successive_halving(trials, range(400), range(100), rescore, rng)
    assert res.survivors == [64, 16, 4, 1]
    assert res.sample_sizes == [100, 200, 400]
    assert res.winner.index == int(np.argmax(quality))


# 5 and 8 ------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_runs():
    t0 = time.perf_counter()
    rows = desk_comparison.run(DATA / "combo.bin", DATA / "test.bin", seeds=(0, 1, 2), budget=0.2)
    return rows, time.perf_counter() - t0


@crit(5, "search attack time <= 1.1 x 2mnkT_c; timed-out trials never win")
def test_c05_time_bound(desk_runs):
    rows, _ = desk_runs
    for r in rows:
        print(f"seed {r.seed}: attack time {r.attack_wall:.1f}s, bound {r.bound:.0f}s")
        assert r.attack_wall <= 1.1 * r.bound and r.within_bound
        assert r.winners_finite
    # with the full-scale constants (m=3, n=100, k=64) and |D| = N = 10000
    full = SearchConfig(m=3, n=100, k=64, budget_sec=1.0)
    assert full.time_bound() <= 4 * 10_000 * full.budget_sec


@crit(5, "search attack time <= 1.1 x 2mnkT_c; timed-out trials never win")
def test_c05_timeouts_never_win():
    rng = np.random.default_rng(1)
    trials = [Trial(i, {}, None, f"t{i}", score=NEG_INF if i % 4 else -0.5 + 0.01 * i) for i in range(64)]
    res = successive_halving(trials, range(400), range(100), lambda t, ids: None, rng)
    assert math.isfinite(res.winner.score)


@crit(8, "desk-scale search robust accuracy <= [APGD_CE; APGD_DLR] + 0.5 pp on 3 seeds, < 10 min")
def test_c08_search_beats_baseline(desk_runs):
    rows, elapsed = desk_runs
    for r in rows:
        print(f"seed {r.seed}: search {r.search_ra:.4f} vs baseline {r.baseline_ra:.4f}")
    assert all(r.search_ra <= r.baseline_ra + 0.005 for r in rows)
    print(f"total {elapsed:.0f}s")
    assert elapsed < 600


# 6 -------------------------------------------------------------------------

SEQ = ["FGSM with {} with untargeted CE with probs",
       "PGD with {step: 20, rel_stepsize: 0.05} with untargeted DLR with logits",
       "APGD with {n_iter: 20} with untargeted Hinge with logits"]


@crit(6, "sequence robust set = intersection of individual robust sets; extension is monotone")
def test_c06_sequence_semantics(mlp, test_data):
    from adasearch.attacks import run_sequence

    specs = [parse_spec(s) for s in SEQ]
    assert len(test_data) == 200
    robust = [set() for _ in specs]
    seq_robust = set()
    for i in range(len(test_data)):
        x, y, sid = test_data.x[i], int(test_data.y[i]), int(test_data.ids[i])
        for j, s in enumerate(specs):
            if not run_sequence([s], mlp, mlp, x, y, EPS, sample_id=sid).success:
                robust[j].add(sid)
        if not run_sequence(specs, mlp, mlp, x, y, EPS, sample_id=sid).success:
            seq_robust.add(sid)
    assert seq_robust == robust[0] & robust[1] & robust[2]
    ra = [evaluate(mlp, specs[:j], test_data, EPS).robust_accuracy for j in range(4)]
    print("robust accuracy by prefix", ra)
    assert all(a >= b for a, b in zip(ra, ra[1:]))


# 7 -------------------------------------------------------------------------


@crit(7, "Rerr: g=1 reduction, hand table 0.5, monotone under extension")
def test_c07_rerr(combo, test_data):
    rng = np.random.default_rng(0)
    rows = [SampleRecord(i, bool(c), float(a and c)) for i, (c, a) in enumerate(rng.integers(0, 2, (500, 2)))]
    direct = sum((not r.clean_correct) or r.adv_success == 1.0 for r in rows) / len(rows)
    assert rerr_empirical(rows)[0] == direct
    table = [SampleRecord(0, False, 0.0), SampleRecord(1, True, 1.0), SampleRecord(2, True, 0.0),
             SampleRecord(3, True, 0.0, 1.0, 0.0)]
    assert rerr_empirical(table)[0] == 0.5
    specs = [parse_spec(s) for s in SEQ]
    sur = desk_comparison.baseline_surrogate(combo)
    data = test_data.subset(np.arange(100))
    errs = [evaluate(combo, specs[:j], data, EPS, surrogate=sur).rerr for j in range(4)]
    print("Rerr by prefix", errs)
    assert all(a <= b for a, b in zip(errs, errs[1:]))


# 9 -------------------------------------------------------------------------


@crit(9, "TPE best-of-30 >= random best-of-30 in >= 12 of 20 paired seeds")
def test_c09_tpe_vs_random():
    wins, tpe_mean, rand_mean = tpe_vs_random.paired_wins(1.7, 30, 20)
    print(f"TPE wins {wins}/20 (mean best {tpe_mean:.2e} vs {rand_mean:.2e})")
    assert wins >= 12


# 10 ------------------------------------------------------------------------

BOUNDS = [("PGD", "rel_stepsize", 1 / 1000, 1.0), ("APGD", "n_iter", 20, 500), ("SQR", "n_queries", 1000, 8000),
          ("SQR", "p_init", 0.5, 0.9), ("FAB", "eta", 1.0, 1.2), ("FAB", "beta", 0.7, 1.0)]


@crit(10, "DSL round trip on 200 programs; inclusive range bounds")
def test_c10_round_trip():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        specs, text = random_program(rng)
        p1 = parse(text)
        assert list(p1) == specs
        assert parse(format_program(p1)) == p1


@crit(10, "DSL round trip on 200 programs; inclusive range bounds")
@pytest.mark.parametrize("bb,name,lo,hi", BOUNDS)
def test_c10_bounds(bb, name, lo, hi):
    loss = "untargeted Hinge with logits"
    for v in (lo, hi):
        assert parse_spec(f"{bb} with {{{name}: {v!r}}} with {loss}").params[name] == v
    step = 1 if isinstance(lo, int) else 1e-9
    for v in (lo - step, hi + step):
        with pytest.raises(DSLRangeError):
            parse(f"{bb} with {{{name}: {v!r}}} with {loss}")


# 11 ------------------------------------------------------------------------


@crit(11, "byte-identical search reports; noise-fixture Rerr spread <= 0.05 over seeds")
def test_c11_search_reports_identical(tmp_path):
    args = ["--model", str(DATA / "quant.bin"), "--data", str(DATA / "test.bin"), "--desk-scale",
            "--clock", "queries", "--budget-sec", "0.05", "--seed", "7"]
    for d in ("a", "b"):
        assert cli_main(["search", *args, "--out-dir", str(tmp_path / d)]) == 0
    for name in ("report.json", "report.txt", "program.txt", "surrogate.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert json.loads((tmp_path / "a" / "report.json").read_text())["rounds"]


@crit(11, "byte-identical search reports; noise-fixture Rerr spread <= 0.05 over seeds")
def test_c11_noise_spread(noise, test_data, golden):
    prog = parse(golden["noise_program"])
    errs = [evaluate(noise, prog, test_data, EPS, 10, seed=s).rerr for s in range(5)]
    print("Rerr by seed", errs)
    assert max(errs) - min(errs) <= 0.05


# 12 ------------------------------------------------------------------------


@crit(12, "loss unit values to 1e-9")
def test_c12_loss_unit_values():
    z = np.array([4.0, 2.0, 1.0])
    assert abs(eval_loss(z, 0, None, LossSpec("DLR", tap="logits")) - (-2 / 3)) <= 1e-9
    assert abs(eval_loss(z, 0, None, LossSpec("Hinge", tap="logits")) - (-2.0)) <= 1e-9
    assert abs(eval_loss(z, 0, None, LossSpec("L1", tap="logits")) - (-4.0)) <= 1e-9
    assert abs(eval_loss([0.5, 0.5], 0, None, LossSpec("CE")) - 0.693147) <= 1e-6
    assert abs(eval_loss([0.5, 0.5], 0, None, LossSpec("CE")) - math.log(2)) <= 1e-9
    lm = LossSpec("LogitMatching", tap="logits")
    assert abs(eval_loss([1.0, 0.0], 0, None, lm, np.array([0.0, 1.0])) - 2.0) <= 1e-9
