"""Attack search: surrogate selection, TPE trials, successive halving and greedy sequences."""

from __future__ import annotations

import math
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attacks import run_sequence
from .dsl import format_spec, parse_spec
from .losses import LossSpec
from .metrics import _ce
from .models import Classifier, Dataset
from .program import BACKBONES, GENERIC, PARAMS, AttackSpec
from .tensor import (
    BPDA_CHOICES,
    TransformPolicy,
    apply_transform,
    list_bpda_candidates,
    list_removal_candidates,
    train_bpda_approximator,
)
from .tpe import Dim, Space, SpaceExhausted, TPEConfig, TPEModel

NEG_INF = -math.inf


@dataclass
class SearchConfig:
    m: int = 3  # sequence length
    k: int = 64  # trials per round
    n: int = 100  # initial evaluation subset size
    lam: float = 0.01
    budget_sec: float = 1.0  # T_c, per sample per attack
    keep_fraction: float = 0.25
    seed: int = 0
    eps: float = 0.05
    clock: str = "wall"
    seconds_per_query: float = 1e-4
    ce_clip: float = 10.0
    tpe_gamma: float = 0.25
    tpe_startup: int = 10
    tpe_candidates: int = 24
    backbones: tuple = BACKBONES
    default_attack: str = "APGD with {} with untargeted CE with probs"
    bpda_epochs: int = 10
    bpda_lr: float = 0.01
    bpda_batch: int = 32

    def __post_init__(self):
        if min(self.m, self.k, self.n) < 1:
            raise ValueError("m, k and n must be at least 1")
        if self.k % 16:
            raise ValueError("k must be divisible by 16 so that halving reaches a single survivor")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.budget_sec > 0:
            raise ValueError("the per-sample budget must be positive")
        if not 0 < self.keep_fraction < 1:
            raise ValueError("keep_fraction must lie in (0, 1)")
        if self.clock not in ("wall", "queries"):
            raise ValueError("clock must be 'wall' or 'queries'")
        self.backbones = tuple(self.backbones)
        unknown = set(self.backbones) - set(BACKBONES)
        if unknown or not self.backbones:
            raise ValueError(f"invalid backbone list {self.backbones}")
        parse_spec(self.default_attack)

    @classmethod
    def desk_scale(cls, **kw) -> SearchConfig:
        return cls(**{"m": 2, "k": 16, "n": 50, **kw})

    @property
    def tpe(self) -> TPEConfig:
        return TPEConfig(self.tpe_gamma, self.tpe_startup, self.tpe_candidates)

    def time_bound(self) -> float:
        """Worst-case attack time of trial scoring plus halving: 2 m n k T_c."""
        return 2.0 * self.m * self.n * self.k * self.budget_sec


# --------------------------------------------------------------------------
# search space over single attacks


def _loss_choices(backbone: str) -> list[str]:
    gen = GENERIC[backbone]
    # library-loss attacks use their own margin objective; one kind avoids aliases
    kinds = ("Hinge",) if gen.library_loss else gen.losses
    out = []
    for kind in kinds:
        for d in gen.directions:
            for tap in gen.taps:
                if kind == "CE" and tap != "probs":
                    continue
                out.append(f"{kind}/{d}/{tap}")
    return out


def attack_space(backbones=BACKBONES, num_classes: int = 4) -> Space:
    dims = [Dim("backbone", "cat", tuple(backbones))]
    for bb in backbones:
        when = (bb,)
        for name, r in PARAMS[bb].items():
            dims.append(Dim(f"{bb}.{name}", r.kind, lo=r.lo, hi=r.hi, log=r.log, parent="backbone", when=when))
        gen = GENERIC[bb]
        if len(gen.randomize) > 1:
            dims.append(Dim(f"{bb}.randomize", "cat", gen.randomize, parent="backbone", when=when))
        for name, r in (("eot", gen.eot), ("repeat", gen.repeat)):
            if r.hi > r.lo:
                dims.append(Dim(f"{bb}.{name}", "int", lo=r.lo, hi=r.hi, log=r.log, parent="backbone", when=when))
        losses = _loss_choices(bb)
        dims.append(Dim(f"{bb}.loss", "cat", tuple(losses), parent="backbone", when=when))
        targeted = tuple(c for c in losses if c.split("/")[1] != "U")
        if targeted and num_classes > 2:
            dims.append(Dim(f"{bb}.ntargets", "int", lo=1, hi=num_classes - 1,
                            parent=f"{bb}.loss", when=targeted))
    return Space(dims)


def theta_to_spec(theta: dict) -> AttackSpec:
    bb = theta["backbone"]
    gen = GENERIC[bb]
    params = {name: theta[f"{bb}.{name}"] for name in PARAMS[bb]}
    kind, direction, tap = theta[f"{bb}.loss"].split("/")
    loss = LossSpec(kind, direction, tap, theta.get(f"{bb}.ntargets", 1) if direction != "U" else 1)
    return AttackSpec(bb, params, loss,
                      bool(theta.get(f"{bb}.randomize", gen.randomize[0])),
                      int(theta.get(f"{bb}.eot", gen.eot.lo)),
                      int(theta.get(f"{bb}.repeat", gen.repeat.lo)))


def theta_key(theta: dict) -> str:
    return format_spec(theta_to_spec(theta))


# --------------------------------------------------------------------------
# scoring


@dataclass
class SampleResult:
    success: float
    ce: float
    queries: int
    cost: float  # seconds on the configured clock
    wall: float
    timed_out: bool


class Scorer:
    """Scores attacks on a fixed (f, surrogate) pair; caches per-sample outcomes.

    Per-sample results only depend on (attack text, sample id, seed), so
    re-scoring a survivor on an enlarged subset reuses earlier runs.
    """

    def __init__(self, f: Classifier, surrogate: Classifier, data: Dataset, config: SearchConfig,
                 refs: Dataset | None = None):
        self.f, self.sur, self.data, self.cfg = f, surrogate, data, config
        self.refs = refs if refs is not None else data
        self.index = {int(s): i for i, s in enumerate(data.ids)}
        self.cache: dict = {}
        self.attack_wall = 0.0  # wall time of attack runs actually executed
        self.runs = 0

    def sample(self, spec: AttackSpec, text: str, sid: int) -> SampleResult:
        key = (text, sid)
        if key in self.cache:
            return self.cache[key]
        i = self.index[sid]
        x, y = self.data.x[i], int(self.data.y[i])
        t0 = time.perf_counter()
        out = run_sequence([spec], self.sur, self.f, x, y, self.cfg.eps, seed=self.cfg.seed, sample_id=sid,
                           budget=self.cfg.budget_sec, clock=self.cfg.clock,
                           seconds_per_query=self.cfg.seconds_per_query, refs=self.refs)
        wall = time.perf_counter() - t0
        ce = _ce(self.f, out.x_adv, y, self.cfg.seed, sid, self.cfg.ce_clip)
        res = SampleResult(float(out.success), ce, out.queries, out.seconds, wall, out.timed_out)
        self.cache[key] = res
        self.attack_wall += wall
        self.runs += 1
        return res

    def score(self, spec: AttackSpec, sids, text: str | None = None) -> tuple[float, list[SampleResult]]:
        """mean(c - lambda * CE) over ``sids``; -inf when any sample exceeded its budget."""
        text = text or format_spec(spec)
        rows = [self.sample(spec, text, int(s)) for s in sids]
        if any(r.timed_out for r in rows):
            return NEG_INF, rows
        return float(np.mean([r.success - self.cfg.lam * r.ce for r in rows])), rows


def score(f: Classifier, attack: AttackSpec, data: Dataset, config: SearchConfig,
          surrogate: Classifier | None = None) -> float:
    """Score of one attack on all of ``data`` (assumed correctly classified)."""
    if len(data) == 0:
        raise ValueError("score needs a non-empty dataset")
    sur = surrogate or Classifier(f.graph, f.num_classes, None, f.name)
    return Scorer(f, sur, data, config).score(attack, data.ids)[0]


# --------------------------------------------------------------------------
# trials and successive halving


@dataclass
class Trial:
    index: int
    theta: dict
    spec: AttackSpec
    text: str
    score: float = NEG_INF
    samples_used: int = 0
    seconds: float = 0.0  # configured-clock seconds summed over samples
    queries: int = 0
    timed_out: bool = False

    def record(self, s: float, rows: list[SampleResult]):
        self.score = s
        self.samples_used = len(rows)
        self.seconds = float(sum(r.cost for r in rows))
        self.queries = int(sum(r.queries for r in rows))
        self.timed_out = any(r.timed_out for r in rows)

    def as_dict(self) -> dict:
        return {"index": self.index, "program": self.text, "score": _num(self.score),
                "samples_used": self.samples_used, "queries": self.queries,
                "seconds": round(self.seconds, 9), "timed_out": self.timed_out}


def _num(v: float):
    return v if math.isfinite(v) else ("-inf" if v < 0 else "inf")


def rank(trials: list[Trial]) -> list[Trial]:
    """Best first: higher score, then fewer seconds, then earlier insertion."""
    return sorted(trials, key=lambda t: (-t.score, t.seconds, t.index))


@dataclass
class SHAResult:
    winner: Trial
    survivors: list[int]  # survivor counts, one per halving step, ending at the final count
    sample_sizes: list[int]  # evaluation-set size at each scoring step
    sample_ids: list[int]


def successive_halving(trials: list[Trial], pool_ids, sample_ids, rescore: Callable[[Trial, list], None],
                       rng: np.random.Generator, keep_fraction: float = 0.25) -> SHAResult:
    """Keep the best quarter, double the evaluation set, re-score, repeat.

    ``trials`` must already be scored on ``sample_ids``.  New samples are
    drawn without replacement from ``pool_ids`` minus the current subset.
    Stops at a single survivor or once the subset is the whole pool.
    """
    if not trials:
        raise ValueError("successive halving needs at least one trial")
    pool = [int(s) for s in pool_ids]
    cur = [int(s) for s in sample_ids]
    survivors, sizes = [len(trials)], [len(cur)]

    def keep(n):
        return max(1, int(n * keep_fraction))

    alive = rank(trials)[:keep(len(trials))]
    survivors.append(len(alive))
    while len(alive) > 1 and len(cur) < len(pool):
        taken = set(cur)
        rest = [s for s in pool if s not in taken]
        extra = rng.choice(len(rest), size=min(len(cur), len(rest)), replace=False)
        cur = cur + [rest[j] for j in sorted(extra)]
        sizes.append(len(cur))
        for t in alive:
            rescore(t, cur)
        alive = rank(alive)[:keep(len(alive))]
        survivors.append(len(alive))
    return SHAResult(rank(alive)[0], survivors, sizes, cur)


# --------------------------------------------------------------------------
# network transformations


@dataclass
class TransformResult:
    policy: TransformPolicy
    surrogate: Classifier
    native_score: float
    final_score: float
    log: list = field(default_factory=list)  # (what, choice, score) rows in evaluation order


def surrogate_of(f: Classifier, policy: TransformPolicy) -> Classifier:
    # the surrogate never carries the detector: attacks are unaware of it
    return Classifier(apply_transform(f.graph, policy), f.num_classes, None, f"{f.name}+surrogate")


def transformation_search(f: Classifier, data: Dataset, config: SearchConfig,
                          rng: np.random.Generator | None = None, sample_ids=None) -> TransformResult:
    """BPDA choices first, then layer removals, each judged by the default attack's score.

    Approximators are trained on all of ``data``; scores use ``sample_ids``
    (default: a random subset of size ``config.n``).
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if sample_ids is None:
        sample_ids = data.ids[np.sort(rng.choice(len(data), min(config.n, len(data)), replace=False))]
    delta = parse_spec(config.default_attack)

    def evaluate(pol):
        return Scorer(f, surrogate_of(f, pol), data, config).score(delta, sample_ids)[0]

    policy = TransformPolicy({}, {}, {})
    native = current = evaluate(policy)
    log = [("native", "-", native)]
    for vid in list_bpda_candidates(f.graph):
        best, best_s = None, NEG_INF
        for k, choice in enumerate(BPDA_CHOICES):
            weights = dict(policy.weights)
            if choice != "identity":
                w, _ = train_bpda_approximator(f.graph, vid, choice, data.x, config.bpda_epochs,
                                               lr=config.bpda_lr, batch_size=config.bpda_batch,
                                               seed=config.seed + k)
                weights[vid] = w
            cand = TransformPolicy({**policy.bpda, vid: choice}, dict(policy.removal), weights)
            s = evaluate(cand)
            log.append((f"bpda:{vid}", choice, s))
            if best is None or s > best_s:
                best, best_s = cand, s
        policy, current = best, best_s
    for vid in list_removal_candidates(f.graph):
        cand = TransformPolicy(dict(policy.bpda), {**policy.removal, vid: True}, dict(policy.weights))
        s = evaluate(cand)
        log.append((f"remove:{vid}", "remove", s))
        log.append((f"remove:{vid}", "keep", current))
        if s > current:
            policy, current = cand, s
    return TransformResult(policy, surrogate_of(f, policy), native, current, log)


# --------------------------------------------------------------------------
# greedy sequence search


@dataclass
class SearchResult:
    policy: TransformPolicy
    surrogate: Classifier
    program: list  # AttackSpec, in order
    report: dict  # deterministic content
    timing: dict  # wall-clock measurements
    trials: list = field(default_factory=list)  # per round


def prefilter(f: Classifier, data: Dataset, seed: int) -> Dataset:
    """Drop samples ``f`` misclassifies (one forward per sample for randomised models)."""
    rng = np.random.default_rng([seed, 0xC1EA])
    keep = np.flatnonzero(f.predict(data.x, rng) == data.y)
    return data.subset(keep)


def greedy_sequence_search(f: Classifier, data: Dataset, config: SearchConfig,
                           log: Callable[[str], None] | None = None) -> SearchResult:
    say = log or (lambda s: None)
    t_start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    clean = prefilter(f, data, config.seed)
    say(f"{len(clean)}/{len(data)} samples correctly classified")
    report: dict = {"config": asdict(config), "n_data": len(data), "n_correct": len(clean)}
    timing: dict = {}
    if len(clean) == 0:
        report.update(program="", rounds=[], early_stop=True, transform=None)
        return SearchResult(TransformPolicy({}, {}, {}), surrogate_of(f, TransformPolicy({}, {}, {})),
                            [], report, timing)

    t0 = time.perf_counter()
    tr = transformation_search(f, clean, config, rng)
    timing["transform_wall"] = time.perf_counter() - t0
    say(f"transformations: {tr.policy.describe()} (score {tr.native_score:.4f} -> {tr.final_score:.4f})")
    report["transform"] = {"policy": tr.policy.describe(), "native_score": _num(tr.native_score),
                           "final_score": _num(tr.final_score),
                           "log": [[a, b, _num(s)] for a, b, s in tr.log]}

    # logit-matching references may come from any sample, including misclassified ones
    scorer = Scorer(f, tr.surrogate, clean, config, refs=data)
    space = attack_space(config.backbones, f.num_classes)
    program: list[AttackSpec] = []
    remaining = [int(s) for s in clean.ids]
    rounds, all_trials = [], []
    search_wall = 0.0
    early_stop = False
    for r in range(config.m):
        removed = []
        if program:
            last = program[-1]
            text = format_spec(last)
            w0 = scorer.attack_wall
            keep = []
            for sid in remaining:
                (removed if scorer.sample(last, text, sid).success > 0 else keep).append(sid)
            timing.setdefault("filter_wall", []).append(scorer.attack_wall - w0)
            remaining = keep
        if not remaining:
            early_stop = True
            say(f"round {r + 1}: every sample already broken, stopping early")
            break
        sample_ids = [remaining[j] for j in sorted(rng.choice(len(remaining), min(config.n, len(remaining)),
                                                                replace=False))]
        w0 = scorer.attack_wall
        tpe = TPEModel(space, config.tpe, theta_key)
        trials: list[Trial] = []
        for j in range(config.k):
            try:
                theta = tpe.suggest(rng)
            except SpaceExhausted:
                break
            spec = theta_to_spec(theta)
            t = Trial(j, theta, spec, format_spec(spec))
            t.record(*scorer.score(spec, sample_ids, t.text))
            tpe.observe(theta, t.score)
            trials.append(t)
        line8 = [t.as_dict() for t in trials]

        def rescore(t: Trial, ids):
            t.record(*scorer.score(t.spec, ids, t.text))

        sha = successive_halving(trials, remaining, sample_ids, rescore, rng, config.keep_fraction)
        round_wall = scorer.attack_wall - w0
        search_wall += round_wall
        winner = sha.winner
        program.append(winner.spec)
        say(f"round {r + 1}: {winner.text}  score {winner.score:.4f}")
        rounds.append({"round": r + 1, "n_remaining": len(remaining), "removed_before": removed,
                       "initial_sample_ids": sample_ids, "trials": line8,
                       "sha": {"survivors": sha.survivors, "sample_sizes": sha.sample_sizes,
                               "final_sample_ids": sha.sample_ids},
                       "winner": winner.as_dict()})
        all_trials.append(trials)
        timing.setdefault("round_attack_wall", []).append(round_wall)

    report.update(program=";\n".join(format_spec(s) for s in program), rounds=rounds, early_stop=early_stop,
                  bound_seconds=config.time_bound())
    timing.update(search_attack_wall=search_wall, bound_seconds=config.time_bound(),
                  within_bound=search_wall <= 1.1 * config.time_bound(),
                  total_wall=time.perf_counter() - t_start, attack_runs=scorer.runs)
    return SearchResult(tr.policy, tr.surrogate, program, report, timing, all_trials)


def config_from_dict(d: dict, base: SearchConfig | None = None) -> SearchConfig:
    base = base or SearchConfig()
    known = set(asdict(base))
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown search config keys {sorted(unknown)}")
    return replace(base, **d)
