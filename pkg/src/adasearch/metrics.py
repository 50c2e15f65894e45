"""Robust error with detectors, attack success rate, and evaluation reports."""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import run_sequence
from .dsl import format_program
from .models import Classifier, Dataset


@dataclass
class SampleRecord:
    id: int
    clean_correct: bool
    adv_success: float  # mean criterion over draws (0/1 for deterministic models)
    g_clean: float = 1.0  # detector acceptance of x
    g_adv: float = 1.0  # mean detector acceptance of x'
    queries: int = 0
    seconds: float = 0.0
    attack_index: int = -1
    ce: float = 0.0  # cross-entropy of f at x', clipped to [0, 10]


def rerr_empirical(records: list[SampleRecord]) -> tuple[float, bool]:
    """Robust test error and a flag that is True when every sample was rejected.

    sum max(1[f(x)!=y] g(x), 1[f(x')!=y] g(x')) / sum max(g(x), g(x')), where
    the adversarial indicator already includes detector acceptance.
    """
    if not records:
        raise ValueError("no records")
    num = sum(max((0.0 if r.clean_correct else 1.0) * r.g_clean, r.adv_success) for r in records)
    den = sum(max(r.g_clean, r.g_adv) for r in records)
    if den == 0:
        return 0.0, True
    return num / den, False


def asr(records: list[SampleRecord]) -> tuple[float, bool]:
    """Success rate over clean-correct samples; the flag is True when there are none."""
    cc = [r for r in records if r.clean_correct]
    if not cc:
        return math.nan, True
    return sum(r.adv_success for r in cc) / len(cc), False


@dataclass
class EvalReport:
    records: list[SampleRecord]
    program: str
    config: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    @property
    def rerr(self) -> float:
        return rerr_empirical(self.records)[0]

    @property
    def all_rejected(self) -> bool:
        return rerr_empirical(self.records)[1]

    @property
    def robust_accuracy(self) -> float:
        return 1.0 - self.rerr

    @property
    def asr(self) -> float:
        return asr(self.records)[0]

    @property
    def clean_accuracy(self) -> float:
        return float(np.mean([r.clean_correct for r in self.records]))

    def score(self, lam: float = 0.01) -> float:
        """Search score of the program on the clean-correct samples: mean(c - lam * CE)."""
        cc = [r for r in self.records if r.clean_correct]
        if not cc:
            return math.nan
        return float(np.mean([r.adv_success - lam * r.ce for r in cc]))

    def summary(self) -> dict:
        a, undefined = asr(self.records)
        return {"n": len(self.records), "clean_accuracy": self.clean_accuracy, "rerr": self.rerr,
                "robust_accuracy": self.robust_accuracy, "asr": None if undefined else a,
                "asr_undefined": undefined, "all_rejected": self.all_rejected,
                "queries": int(sum(r.queries for r in self.records))}

    def to_dict(self, timing: bool = False) -> dict:
        d = {"program": self.program, "config": self.config, "summary": self.summary(),
             "records": [asdict(r) for r in self.records]}
        if not timing:
            for r in d["records"]:
                r.pop("seconds")
        else:
            d["wall_seconds"] = self.wall_seconds
        return d

    def to_text(self) -> str:
        s = self.summary()
        lines = ["program:"] + ["  " + ln for ln in (self.program or "(empty)").splitlines()]
        lines += [f"samples          {s['n']}",
                  f"clean accuracy   {s['clean_accuracy']:.4f}",
                  f"Rerr             {s['rerr']:.4f}",
                  f"robust accuracy  {s['robust_accuracy']:.4f}",
                  f"ASR              {'undefined' if s['asr_undefined'] else format(s['asr'], '.4f')}",
                  "",
                  f"{'id':>6} {'clean':>5} {'adv':>6} {'g(x)':>5} {'g(x`)':>6} {'attack':>6} {'queries':>8}"]
        for r in self.records:
            lines.append(f"{r.id:>6} {int(r.clean_correct):>5} {r.adv_success:>6.3f} {r.g_clean:>5.2f} "
                         f"{r.g_adv:>6.2f} {r.attack_index:>6} {r.queries:>8}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [k for k in SampleRecord.__dataclass_fields__ if k != "seconds"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.records:
            w.writerow([getattr(r, k) for k in names])
        return buf.getvalue()


def _accept(f: Classifier, x, rng, draws: int) -> float:
    if f.detector is None:
        return 1.0
    return float(np.mean([int(f.detector.accepts(f.probs(x, rng))) for _ in range(draws)]))


def _ce(f: Classifier, x, y: int, seed: int, sid: int, clip: float = 10.0) -> float:
    p = f.probs(x, np.random.default_rng([seed, sid, 0xCE]))
    return float(np.clip(-math.log(max(p[y], 1e-300)), 0.0, clip))


def evaluate(f: Classifier, program, data: Dataset, eps: float, draws: int | None = None, *,
             surrogate: Classifier | None = None, seed: int = 0, budget: float | None = None,
             clock: str = "wall", seconds_per_query: float = 1e-4, refs: Dataset | None = None,
             jobs: int = 1) -> EvalReport:
    """Run an attack sequence on every sample and collect a report.

    For randomised models each x' is scored by the mean criterion over
    ``draws`` forwards (default 10); deterministic models always use one.
    """
    specs = list(program or [])
    draws = (10 if draws is None else int(draws)) if f.is_randomized else 1
    if draws < 1:
        raise ValueError("draws must be >= 1")
    sur = surrogate or Classifier(f.graph, f.num_classes, None, f.name)
    refs = refs if refs is not None else data

    def one(i) -> SampleRecord:
        sid, x, y = int(data.ids[i]), data.x[i], int(data.y[i])
        crng = np.random.default_rng([seed, sid, 0xC1EA])
        probs = f.probs(x, crng)
        correct = int(np.argmax(probs)) == y
        g_clean = 1.0 if f.detector is None else float(f.detector.accepts(probs))
        if not correct or not specs:
            return SampleRecord(sid, correct, 0.0, g_clean, g_clean, ce=_ce(f, x, y, seed, sid))
        out = run_sequence(specs, sur, f, x, y, eps, seed=seed, sample_id=sid, budget=budget, clock=clock,
                           seconds_per_query=seconds_per_query, refs=refs, draws=draws)
        g_adv = _accept(f, out.x_adv, np.random.default_rng([seed, sid, 0xAD]), draws)
        return SampleRecord(sid, True, out.success_rate, g_clean, g_adv, out.queries, out.seconds,
                            out.attack_index, _ce(f, out.x_adv, y, seed, sid))

    t0 = time.perf_counter()
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            records = list(ex.map(one, range(len(data))))
    else:
        records = [one(i) for i in range(len(data))]
    cfg = {"eps": eps, "draws": draws, "seed": seed, "budget": budget, "clock": clock}
    return EvalReport(records, format_program(specs) if specs else "", cfg, time.perf_counter() - t0)
