"""Backbone attacks, generic decorators, the success criterion and attack sequences.

All attacks work in the L-infinity threat model on inputs in ``[0, 1]``.  They
compute candidates on a *surrogate* classifier (possibly a transformed copy of
the model) and stop early once the *original* model misclassifies the
candidate.  Whether a candidate counts is decided by :func:`criterion`, which
only ever looks at the original model and its detector.
"""

from __future__ import annotations

import hashlib
import math
import time
from collections.abc import Callable
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .losses import LossError, _runner_up, enumerate_targets, objective_and_grad_at_tap
from .models import Classifier, Dataset
from .program import AttackSpec
from .tensor import backward, forward, same_forward

# fixed internals of the backbones that have no searchable parameter for them
DEEPFOOL_STEPS = 50
DEEPFOOL_OVERSHOOT = 0.02
FAB_ALPHA_MAX = 0.1
NES_SIGMA_REL = 0.25
NES_CHUNK = 200
APGD_MOMENTUM = 0.75
APGD_FIRST_CHECKPOINT = 0.22
APGD_CHECKPOINT_SHRINK = 0.03
APGD_MIN_CHECKPOINT_GAP = 0.06
CW_INITIAL_CONST = 0.01
SQR_FIXED_SEED = 0
D_INF_TOL = 1e-12


class BudgetExceeded(Exception):
    pass


class Meter:
    """Query counter and cooperative time budget.

    ``clock="wall"`` measures elapsed time with ``perf_counter``;
    ``clock="queries"`` charges ``seconds_per_query`` per query instead, which
    makes budget cut-offs reproducible.
    """

    def __init__(self, limit: float | None = None, clock: str = "wall", seconds_per_query: float = 1e-4):
        if clock not in ("wall", "queries"):
            raise ValueError(f"unknown clock {clock!r}")
        self.clock = clock
        self.seconds_per_query = seconds_per_query
        self.queries = 0
        self._t0 = time.perf_counter()
        self.deadline = math.inf if limit is None else float(limit)

    def charge(self, n: int = 1):
        self.queries += int(n)

    def elapsed(self) -> float:
        if self.clock == "queries":
            return self.queries * self.seconds_per_query
        return time.perf_counter() - self._t0

    def wall(self) -> float:
        return time.perf_counter() - self._t0

    def tick(self):
        if self.elapsed() >= self.deadline:
            raise BudgetExceeded

    @contextmanager
    def cap(self, seconds: float | None):
        saved = self.deadline
        if seconds is not None:
            self.deadline = min(saved, self.elapsed() + seconds)
        try:
            yield
        finally:
            self.deadline = saved


@dataclass
class AttackOutcome:
    x_adv: np.ndarray
    success: bool
    queries: int
    seconds: float
    timed_out: bool
    success_rate: float = 0.0  # mean criterion over evaluation draws
    attack_index: int = -1  # position in a sequence that produced x_adv


def linf(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0


def criterion(f: Classifier, x_adv, x, y: int, eps: float, rng=None) -> bool:
    """Success iff within the eps-ball, misclassified by ``f`` and accepted by its detector."""
    if linf(x_adv, x) > eps + D_INF_TOL:
        return False
    probs = f.probs(x_adv, rng)
    if int(np.argmax(probs)) == y:
        return False
    if f.detector is not None and not f.detector.accepts(probs):
        return False
    return True


def criterion_rate(f: Classifier, x_adv, x, y, eps, rng, draws: int) -> float:
    """Mean criterion over ``draws`` independent forwards of a randomised model."""
    draws = draws if f.is_randomized else 1
    return float(np.mean([criterion(f, x_adv, x, y, eps, rng) for _ in range(draws)]))


# --------------------------------------------------------------------------
# shared attack state


class _Found(Exception):
    def __init__(self, x):
        self.x = x


class AttackRun:
    """Per-sample state shared by the backbones: objective, projection, checks."""

    def __init__(self, spec: AttackSpec, surrogate: Classifier, f: Classifier, x, y: int, eps: float,
                 rng: np.random.Generator, meter: Meter, refs: Dataset | None = None):
        self.spec = spec
        self.loss = spec.loss
        self.sur = surrogate
        self.f = f
        self.x = np.asarray(x, dtype=np.float64)
        self.y = int(y)
        self.eps = float(eps)
        self.rng = rng
        self.meter = meter
        self.refs = refs
        self.lo = np.clip(self.x - self.eps, 0.0, 1.0)
        self.hi = np.clip(self.x + self.eps, 0.0, 1.0)
        self.current = self.x.copy()
        self._zref_cache: dict = {}
        self.eot = spec.eot if surrogate.is_randomized else 1
        # when the surrogate only changes backward passes, the success check can
        # reuse the surrogate forward instead of a separate query to f
        self.shared = (not f.is_randomized and not surrogate.is_randomized
                       and same_forward(surrogate.graph, f.graph))
        self._last = None

    # --- geometry
    def project(self, xa):
        return np.clip(xa, self.lo, self.hi)

    def start(self, randomize: bool):
        if not randomize:
            return self.x.copy()
        return self.project(self.x + self.rng.uniform(-self.eps, self.eps, self.x.shape))

    # --- oracle access
    def _tap(self, logits, probs):
        return logits if self.loss.tap == "logits" else probs

    def zref(self, target):
        if self.loss.kind != "LogitMatching":
            return None
        key = (target, self.loss.direction)
        if key in self._zref_cache:
            return self._zref_cache[key]
        refs = {self.y: self._tap(*forward(self.sur.graph, self.x, self.rng)[:2])}
        self.meter.charge()
        if target is not None:
            if self.refs is None:
                raise LossError("targeted logit matching needs a reference dataset")
            pool = np.flatnonzero(self.refs.y == target)
            if len(pool) == 0:
                raise LossError(f"no reference sample of class {target}")
            xr = self.refs.x[self.rng.choice(pool)]
            refs[target] = self._tap(*forward(self.sur.graph, xr, self.rng)[:2])
            self.meter.charge()
        out = refs[self.y] if self.loss.direction == "U" else (refs[target] if self.loss.direction == "T" else refs)
        self._zref_cache[key] = out
        return out

    def grad(self, xa, target):
        """EOT-averaged objective and input gradient on the surrogate."""
        m = self.eot
        zr = self.zref(target)
        if m == 1 and self._last is not None and self._last[0] is xa:
            logits, probs, trace = self._last[1]
            self.meter.charge(1)
        else:
            xb = np.broadcast_to(xa, (m,) + xa.shape)
            logits, probs, trace = forward(self.sur.graph, xb, self.rng)
            self.meter.charge(2 * m)
        Z = self._tap(logits, probs)
        if m == 1:
            val, gz = objective_and_grad_at_tap(Z[0], self.y, target, self.loss, zr)
            return float(val), backward(self.sur.graph, trace, gz[None], self.loss.tap)[0]
        vals, gz = zip(*(objective_and_grad_at_tap(Z[i], self.y, target, self.loss, zr) for i in range(m)))
        gx = backward(self.sur.graph, trace, np.stack(gz), self.loss.tap)
        return float(np.mean(vals)), gx.mean(axis=0)

    def objective(self, xb, target) -> np.ndarray:
        """Objective values (forward only) for a batch, EOT-averaged."""
        m = self.eot
        zr = self.zref(target)
        n = len(xb)
        rep = np.repeat(xb, m, axis=0) if m > 1 else xb
        logits, probs, _ = forward(self.sur.graph, rep, self.rng)
        Z = self._tap(logits, probs)
        vals = np.array([objective_and_grad_at_tap(Z[i], self.y, target, self.loss, zr)[0] for i in range(len(Z))])
        self.meter.charge(len(rep))
        return vals.reshape(n, m).mean(axis=1)

    def logit_diff_grads(self, xa, classes):
        """Z_j - Z_y and their gradients for each class j in ``classes``."""
        n = len(classes)
        xb = np.broadcast_to(xa, (n,) + xa.shape)
        logits, _, trace = forward(self.sur.graph, xb, self.rng)
        seeds = np.zeros_like(logits)
        seeds[np.arange(n), classes] = 1.0
        seeds[:, self.y] -= 1.0
        g = backward(self.sur.graph, trace, seeds, "logits")
        self.meter.charge(2 * n)
        return logits[np.arange(n), classes] - logits[:, self.y], g

    def check(self, xa):
        """Record ``xa`` as the current iterate; stop the attack if ``f`` misclassifies it."""
        self.current = xa
        self.meter.charge()
        if self.shared:
            out = forward(self.sur.graph, xa[None])
            self._last = (xa, out)
            probs = out[1][0]
        else:
            probs = self.f.probs(xa, self.rng)
        if int(np.argmax(probs)) != self.y:
            raise _Found(xa)


# --------------------------------------------------------------------------
# backbones: each returns its final candidate or raises _Found / BudgetExceeded


def _fgsm(run: AttackRun, target):
    x0 = run.start(run.spec.randomize)
    run.current = x0
    run.meter.tick()
    _, g = run.grad(x0, target)
    xa = run.project(x0 + run.eps * np.sign(g))
    run.check(xa)
    return xa


def _pgd(run: AttackRun, target):
    p = run.spec.params
    alpha = p["rel_stepsize"] * run.eps
    xa = run.start(run.spec.randomize)
    run.current = xa
    for _ in range(p["step"]):
        run.meter.tick()
        _, g = run.grad(xa, target)
        xa = run.project(xa + alpha * np.sign(g))
        run.check(xa)
    return xa


def apgd_checkpoints(n_iter: int) -> list[int]:
    """Iterations at which APGD reconsiders its step size."""
    p = [0.0, APGD_FIRST_CHECKPOINT]
    while p[-1] < 1.0:
        p.append(p[-1] + max(p[-1] - p[-2] - APGD_CHECKPOINT_SHRINK, APGD_MIN_CHECKPOINT_GAP))
    # round first so that e.g. 0.57 * 100 does not ceil to 58
    its = {math.ceil(round(q * n_iter, 9)) for q in p[1:]}
    return sorted(i for i in its if i < n_iter)


def _apgd(run: AttackRun, target):
    p = run.spec.params
    n_iter, rho = int(p["n_iter"]), float(p["rho"])
    eta = 2.0 * run.eps
    checkpoints = set(apgd_checkpoints(n_iter))

    x0 = run.start(run.spec.randomize)
    run.current = x0
    run.meter.tick()
    f0, g0 = run.grad(x0, target)
    x1 = run.project(x0 + eta * np.sign(g0))
    run.check(x1)
    f1, g1 = run.grad(x1, target)
    best_f, best_x, best_g = (f1, x1, g1) if f1 > f0 else (f0, x0, g0)
    improved = int(f1 > f0)
    x_prev, xk, gk, fk = x0, x1, g1, f1
    last_ck, eta_ck, best_ck = 0, eta, best_f

    for k in range(1, n_iter):
        run.meter.tick()
        z = run.project(xk + eta * np.sign(gk))
        xn = run.project(xk + APGD_MOMENTUM * (z - xk) + (1 - APGD_MOMENTUM) * (xk - x_prev))
        run.check(xn)
        fn, gn = run.grad(xn, target)
        improved += fn > fk
        if fn > best_f:
            best_f, best_x, best_g = fn, xn, gn
        x_prev, xk, gk, fk = xk, xn, gn, fn
        if k in checkpoints:
            too_few = improved < rho * (k - last_ck)
            stalled = eta_ck == eta and best_ck == best_f
            eta_ck, best_ck = eta, best_f
            if too_few or stalled:
                eta /= 2.0
                xk, gk, fk = best_x, best_g, best_f
            improved, last_ck = 0, k
    return best_x


def _deepfool(run: AttackRun, target):
    xa = run.start(False)
    run.current = xa
    for _ in range(DEEPFOOL_STEPS):
        run.meter.tick()
        val, g = run.grad(xa, target)
        norm = np.abs(g).sum()
        if norm < 1e-12:
            break
        r = (max(-val, 0.0) + 1e-4) / norm * np.sign(g)
        xa = run.project(xa + (1 + DEEPFOOL_OVERSHOOT) * r)
        run.check(xa)
    return xa


def _cw_margin(Z, y, target, confidence):
    """CW objective term to minimise, and its gradient w.r.t. logits."""
    g = np.zeros_like(Z)
    if target is None:
        m = _runner_up(Z, y)
        val = Z[y] - Z[m]
        if val <= -confidence:
            return -confidence, g
        g[y], g[m] = 1.0, -1.0
        return float(val), g
    m = _runner_up(Z, target)
    val = Z[m] - Z[target]
    if val <= -confidence:
        return -confidence, g
    g[m], g[target] = 1.0, -1.0
    return float(val), g


def _cw(run: AttackRun, target):
    p = run.spec.params
    x = run.x
    w0 = np.arctanh(np.clip(2 * x - 1, -1 + 1e-6, 1 - 1e-6))
    c, c_lo, c_hi = CW_INITIAL_CONST, 0.0, math.inf
    last = run.project(x)
    run.current = last
    for _ in range(int(p["binary_search_steps"])):
        w = w0.copy()
        m1 = np.zeros_like(w)
        m2 = np.zeros_like(w)
        lr = float(p["learning_rate"])
        halvings = doublings = 0
        prev_loss, prev_w = math.inf, w
        fooled = False
        for it in range(int(p["max_iter"])):
            run.meter.tick()
            xa = 0.5 * (np.tanh(w) + 1)
            logits, _, trace = forward(run.sur.graph, xa, run.rng)
            marg, gz = _cw_margin(logits, run.y, target, p["confidence"])
            loss = float(np.sum((xa - x) ** 2) + c * marg)
            gx = 2 * (xa - x) + c * backward(run.sur.graph, trace, gz, "logits")
            run.meter.charge(2)
            fooled |= marg <= -p["confidence"] + 1e-12
            if loss > prev_loss:
                # reject the step and shrink the learning rate
                if halvings < p["max_halving"]:
                    lr *= 0.5
                    halvings += 1
                w = prev_w
                continue
            if it > 0 and doublings < p["max_doubling"]:
                lr *= 2.0
                doublings += 1
            prev_loss, prev_w = loss, w
            gw = gx * 0.5 * (1 - np.tanh(w) ** 2)
            m1 = 0.9 * m1 + 0.1 * gw
            m2 = 0.999 * m2 + 0.001 * gw ** 2
            t = it + 1
            step = (m1 / (1 - 0.9 ** t)) / (np.sqrt(m2 / (1 - 0.999 ** t)) + 1e-8)
            w = w - lr * step
            last = run.project(0.5 * (np.tanh(w) + 1))
            run.check(last)
        if fooled:
            c_hi = c
            c = (c_lo + c_hi) / 2
        else:
            c_lo = c
            c = c * 10 if math.isinf(c_hi) else (c_lo + c_hi) / 2
    return last


def _fab(run: AttackRun, target):
    p = run.spec.params
    eta, beta = float(p["eta"]), float(p["beta"])
    K = run.sur.num_classes
    classes = [target] if target is not None else [j for j in range(K) if j != run.y]
    x0 = run.x
    xk = run.start(run.spec.randomize)
    run.current = xk
    for _ in range(int(p["n_iter"])):
        run.meter.tick()
        fvals, grads = run.logit_diff_grads(xk, classes)
        norms = np.abs(grads).reshape(len(classes), -1).sum(axis=1) + 1e-12
        j = int(np.argmin(np.abs(fvals) / norms))
        gj, fj, nj = grads[j], fvals[j], norms[j]
        delta_k = max(-fj, 0.0) / nj * np.sign(gj)
        f_orig = fj + float(np.sum(gj * (x0 - xk)))
        delta_o = max(-f_orig, 0.0) / nj * np.sign(gj)
        dk, do = np.abs(delta_k).max(), np.abs(delta_o).max()
        alpha = min(dk / (dk + do + 1e-12), FAB_ALPHA_MAX)
        xn = run.project((1 - alpha) * (xk + eta * delta_k) + alpha * (x0 + eta * delta_o))
        if np.allclose(xn, xk):
            xn = run.project(xk + eta * (delta_k + 1e-4 / nj * np.sign(gj)))
        try:
            run.check(xn)
        except _Found:
            xb = run.project((1 - beta) * x0 + beta * xn)
            run.check(xb)
            raise _Found(xn) from None
        xk = xn
    return xk


def _sqr_p(p_init: float, i: int, n_queries: int) -> float:
    it = int(i / n_queries * 10000)
    for bound, div in ((8000, 512), (6000, 256), (4000, 128), (2000, 64), (1000, 32),
                       (500, 16), (200, 8), (50, 4), (10, 2)):
        if it > bound:
            return p_init / div
    return p_init


def _sqr(run: AttackRun, target):
    p = run.spec.params
    n_queries, p_init = int(p["n_queries"]), float(p["p_init"])
    srng = run.rng if run.spec.randomize else np.random.default_rng(SQR_FIXED_SEED)
    x, eps = run.x, run.eps
    shape = x.shape
    if len(shape) == 3:
        c, h, w = shape
    else:
        c, h, w = 1, 1, int(np.prod(shape))
    xi = x.reshape(c, h, w)
    delta = eps * srng.choice([-1.0, 1.0], size=(c, 1, w))
    best = run.project(np.clip(xi + delta, 0, 1).reshape(shape))
    run.meter.tick()
    best_val = run.objective(best[None], target)[0]
    run.check(best)
    for i in range(n_queries):
        run.meter.tick()
        frac = _sqr_p(p_init, i, n_queries)
        s = int(round(math.sqrt(frac * h * w)))
        s = min(max(s, 1), max(h - 1, 1)) if h > 1 else 1
        sw = s if h > 1 else max(1, int(round(frac * w)))
        vh = srng.integers(0, h - s + 1)
        vw = srng.integers(0, w - sw + 1)
        d = (best.reshape(c, h, w) - xi).copy()
        d[:, vh:vh + s, vw:vw + sw] = eps * srng.choice([-1.0, 1.0], size=(c, 1, 1))
        cand = run.project(np.clip(xi + d, 0, 1).reshape(shape))
        val = run.objective(cand[None], target)[0]
        if val > best_val:
            best, best_val = cand, val
            run.check(best)
    return best


def _nes(run: AttackRun, target):
    p = run.spec.params
    alpha = p["rel_stepsize"] * run.eps
    sigma = NES_SIGMA_REL * run.eps
    half = max(1, int(p["n_samples"]) // 2)
    xa = run.start(run.spec.randomize)
    run.current = xa
    if sigma == 0.0:  # eps = 0: nothing to estimate, nowhere to go
        run.check(xa)
        return xa
    for _ in range(int(p["step"])):
        g = np.zeros_like(xa)
        done = 0
        while done < half:
            run.meter.tick()
            b = min(NES_CHUNK, half - done)
            u = run.rng.standard_normal((b,) + xa.shape)
            vals = run.objective(np.concatenate([xa + sigma * u, xa - sigma * u]), target)
            g += np.tensordot(vals[:b] - vals[b:], u, axes=1)
            done += b
        g /= 2 * half * sigma
        xa = run.project(xa + alpha * np.sign(g))
        run.check(xa)
    return xa


BACKBONE_FNS: dict[str, Callable] = {
    "FGSM": _fgsm, "PGD": _pgd, "APGD": _apgd, "DeepFool": _deepfool,
    "CW": _cw, "FAB": _fab, "SQR": _sqr, "NES": _nes,
}


# --------------------------------------------------------------------------
# decorated attack


def run_attack(spec: AttackSpec, surrogate: Classifier, f: Classifier, x, y: int, eps: float,
               rng: np.random.Generator, *, budget: float | None = None, meter: Meter | None = None,
               refs: Dataset | None = None, draws: int = 1) -> AttackOutcome:
    """Run one decorated attack: repeat(EOT(randomize(backbone))) with its loss targets.

    ``budget`` is the per-sample allowance in seconds (cooperative); ``try``
    budgets inside ``spec`` further restrict it.
    """
    meter = meter or Meter(budget)
    if budget is not None and meter.deadline == math.inf:
        meter.deadline = meter.elapsed() + budget
    q0, t0 = meter.queries, meter.elapsed()
    run = AttackRun(spec, surrogate, f, x, y, eps, rng, meter, refs)
    fn = BACKBONE_FNS[spec.backbone]
    restarts = spec.repeat if spec.randomize else 1
    finals = []
    timed_out = False
    found = None
    with meter.cap(spec.budget):
        try:
            targets = [None]
            if spec.loss.targeted:
                meter.tick()
                meter.charge()
                clean = surrogate.probs(run.x, rng)
                targets = enumerate_targets(clean, run.y, spec.loss.ntargets)
            for _ in range(restarts):
                for t in targets:
                    finals.append((fn(run, t), t))
        except _Found as hit:
            found = hit.x
        except BudgetExceeded:
            timed_out = True
        except LossError:
            # targeted logit matching without a reference of the target class: not applicable
            pass
    if found is not None:
        x_adv = found
    elif timed_out or not finals:
        x_adv = run.current
    elif len(finals) == 1:
        x_adv = finals[0][0]
    else:
        # no restart fooled f: keep the candidate with the highest objective
        scores = [run.objective(xa[None], t)[0] for xa, t in finals]
        x_adv = finals[int(np.argmax(scores))][0]
    x_adv = run.project(x_adv)
    rate = criterion_rate(f, x_adv, run.x, run.y, eps, rng, draws)
    meter.charge(max(1, draws if f.is_randomized else 1))
    return AttackOutcome(x_adv, rate > 0 if draws <= 1 or not f.is_randomized else rate >= 0.5,
                         meter.queries - q0, meter.elapsed() - t0, timed_out, rate)


def attack_rng(seed: int, sample_id: int, spec_text: str) -> np.random.Generator:
    """RNG stream keyed by (seed, sample, attack) so outcomes do not depend on position."""
    h = int.from_bytes(hashlib.sha256(spec_text.encode()).digest()[:8], "little")
    return np.random.default_rng([int(seed), int(sample_id), h])


def run_sequence(specs: list[AttackSpec], surrogate: Classifier, f: Classifier, x, y: int, eps: float,
                 *, seed: int = 0, sample_id: int = 0, budget: float | None = None, clock: str = "wall",
                 seconds_per_query: float = 1e-4, refs: Dataset | None = None, draws: int = 1,
                 rng_factory: Callable | None = None) -> AttackOutcome:
    """Run attacks in order and return the first candidate satisfying the criterion.

    If none succeeds, the last attack's candidate is returned.  ``budget`` is
    per attack per sample.  With ``draws > 1`` on a randomised ``f`` the
    reported ``success_rate`` is the mean criterion over that many draws.
    """
    from .dsl import format_spec

    if not specs:
        raise ValueError("an attack sequence needs at least one attack")
    total_q, total_s = 0, 0.0
    out = None
    for i, spec in enumerate(specs):
        text = format_spec(spec)
        rng = rng_factory(text) if rng_factory else attack_rng(seed, sample_id, text)
        meter = Meter(budget, clock, seconds_per_query)
        out = run_attack(spec, surrogate, f, x, y, eps, rng, meter=meter, refs=refs, draws=draws)
        out.attack_index = i
        total_q += out.queries
        total_s += out.seconds
        if out.success:
            break
    out.queries, out.seconds = total_q, total_s
    return out
