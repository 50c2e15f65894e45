"""A small tree-structured Parzen estimator over conditional parameter spaces.

Parameters are described by :class:`Dim` objects.  A dimension may be
conditional on the value of a categorical parent, which is how per-backbone
parameters hang off the backbone choice.  Observations are split into a good
quantile and the rest; each side gets an independent per-dimension density and
suggestions maximise the density ratio over candidates drawn from the good
side.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr


class SpaceExhausted(RuntimeError):
    """Every point of a finite space has been evaluated."""


@dataclass(frozen=True)
class Dim:
    name: str
    kind: str  # "cat" | "int" | "float"
    choices: tuple = ()
    lo: float = 0.0
    hi: float = 1.0
    log: bool = False
    parent: str | None = None
    when: tuple = ()  # parent values that activate this dim

    def __post_init__(self):
        if self.kind not in ("cat", "int", "float"):
            raise ValueError(f"unknown dim kind {self.kind!r}")
        if self.kind == "cat" and not self.choices:
            raise ValueError(f"categorical dim {self.name} has no choices")
        if self.kind != "cat" and not self.lo <= self.hi:
            raise ValueError(f"dim {self.name} has lo > hi")
        if self.log and self.lo <= 0:
            raise ValueError(f"log dim {self.name} needs lo > 0")

    # internal coordinates: log-space for log dims
    def to_u(self, v) -> float:
        return math.log(v) if self.log else float(v)

    def from_u(self, u):
        v = math.exp(u) if self.log else u
        if self.kind == "int":
            return int(min(max(round(v), self.lo), self.hi))
        return float(min(max(v, self.lo), self.hi))

    @property
    def u_bounds(self) -> tuple[float, float]:
        if self.kind == "int":
            lo, hi = self.lo - 0.5, self.hi + 0.5
            if self.log:
                lo = max(lo, self.lo * 0.5)
            return self.to_u(lo), self.to_u(hi)
        return self.to_u(self.lo), self.to_u(self.hi)

    def size(self) -> float:
        if self.kind == "cat":
            return len(self.choices)
        if self.kind == "int":
            return self.hi - self.lo + 1
        return math.inf if self.hi > self.lo else 1


class Space:
    def __init__(self, dims: list[Dim]):
        self.dims = list(dims)
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise ValueError("duplicate dimension names")
        seen = set()
        for d in self.dims:
            if d.parent is not None and d.parent not in seen:
                raise ValueError(f"parent {d.parent!r} of {d.name} must come earlier")
            seen.add(d.name)
        self.by_name = {d.name: d for d in self.dims}

    def active(self, d: Dim, theta: dict) -> bool:
        if d.parent is None:
            return True
        return d.parent in theta and theta[d.parent] in d.when

    def sample_prior(self, rng: np.random.Generator) -> dict:
        theta: dict = {}
        for d in self.dims:
            if not self.active(d, theta):
                continue
            if d.kind == "cat":
                theta[d.name] = d.choices[int(rng.integers(len(d.choices)))]
            else:
                lo, hi = d.u_bounds
                theta[d.name] = d.from_u(rng.uniform(lo, hi))
        return theta

    def size(self) -> float:
        """Number of distinct points (inf when any active float dim is continuous)."""
        def count(i, theta):
            if i == len(self.dims):
                return 1
            d = self.dims[i]
            if not self.active(d, theta):
                return count(i + 1, theta)
            if d.kind == "cat":
                return sum(count(i + 1, {**theta, d.name: c}) for c in d.choices)
            s = d.size()
            return math.inf if math.isinf(s) else s * count(i + 1, theta)
        return count(0, {})


def default_key(theta: dict) -> str:
    return json.dumps(theta, sort_keys=True, default=str)


# --------------------------------------------------------------------------
# per-dimension Parzen densities


class _Cat:
    def __init__(self, d: Dim, values: list):
        counts = np.array([sum(v == c for v in values) for c in d.choices], dtype=float) + 1.0
        self.d = d
        self.p = counts / counts.sum()

    def sample(self, rng):
        return self.d.choices[int(rng.choice(len(self.p), p=self.p))]

    def logpdf(self, v) -> float:
        return math.log(self.p[self.d.choices.index(v)])


class _Parzen:
    """Truncated Gaussian mixture plus a uniform prior component."""

    def __init__(self, d: Dim, values: list, min_bw_frac: float):
        self.d = d
        self.lo, self.hi = d.u_bounds
        width = max(self.hi - self.lo, 1e-12)
        mus = np.array(sorted(d.to_u(v) for v in values), dtype=float)
        if len(mus):
            # bandwidth: distance to the nearest neighbour, the bounds counting as neighbours
            pts = np.concatenate([[self.lo], mus, [self.hi]])
            gaps = np.diff(pts)
            bw = np.minimum(gaps[:-1], gaps[1:])
            # floor shrinks with the number of points, so clustered observations
            # cannot collapse the kernels to a point
            floor = max(min_bw_frac, 1.0 / min(100, len(mus) + 1)) * width
            bw = np.clip(bw, floor, width)
        else:
            bw = np.zeros(0)
        self.mus, self.bw = mus, bw
        self.w = np.full(len(mus) + 1, 1.0 / (len(mus) + 1))  # last entry is the prior
        self.width = width
        self.mass = ndtr((self.hi - mus) / bw) - ndtr((self.lo - mus) / bw) if len(mus) else np.zeros(0)

    def sample(self, rng):
        j = int(rng.choice(len(self.w), p=self.w))
        if j == len(self.mus):
            return self.d.from_u(rng.uniform(self.lo, self.hi))
        for _ in range(100):
            u = rng.normal(self.mus[j], self.bw[j])
            if self.lo <= u <= self.hi:
                return self.d.from_u(u)
        return self.d.from_u(float(np.clip(u, self.lo, self.hi)))

    def logpdf(self, v) -> float:
        u = self.d.to_u(v)
        dens = self.w[-1] / self.width
        if len(self.mus):
            z = (u - self.mus) / self.bw
            comp = np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * self.bw * np.maximum(self.mass, 1e-300))
            dens += float(np.sum(self.w[:-1] * comp))
        return math.log(max(dens, 1e-300))


# --------------------------------------------------------------------------


@dataclass
class TPEConfig:
    gamma: float = 0.25
    n_startup: int = 10
    n_cand: int = 24
    min_bandwidth: float = 1e-3  # fraction of the dimension's range
    max_draws: int = 200  # prior re-draws before declaring a finite space exhausted

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.n_startup < 0 or self.n_cand < 1:
            raise ValueError("n_startup must be >= 0 and n_cand >= 1")


@dataclass
class TPEModel:
    """Observation history plus the suggest step; ``key`` decides what counts as already seen."""

    space: Space
    config: TPEConfig = field(default_factory=TPEConfig)
    key: Callable[[dict], str] = default_key
    observations: list = field(default_factory=list)
    seen: set = field(default_factory=set)
    _fitted: tuple | None = field(default=None, repr=False)  # (n_observations, good, bad) densities

    def observe(self, theta: dict, score: float):
        self.observations.append((dict(theta), float(score)))
        self.seen.add(self.key(theta))

    def split(self):
        """(good, bad) observation lists; ties keep insertion order."""
        n = len(self.observations)
        n_good = max(1, math.ceil(self.config.gamma * n))
        order = sorted(range(n), key=lambda i: (-self.observations[i][1], i))
        good = [self.observations[i][0] for i in order[:n_good]]
        bad = [self.observations[i][0] for i in order[n_good:]]
        return good, bad

    def _densities(self, thetas):
        out = {}
        for d in self.space.dims:
            vals = [t[d.name] for t in thetas if d.name in t]
            out[d.name] = _Cat(d, vals) if d.kind == "cat" else _Parzen(d, vals, self.config.min_bandwidth)
        return out

    def _unseen_prior(self, rng) -> dict:
        for _ in range(self.config.max_draws):
            theta = self.space.sample_prior(rng)
            if self.key(theta) not in self.seen:
                return theta
        if len(self.seen) >= self.space.size():
            raise SpaceExhausted("all points of the search space have been evaluated")
        raise SpaceExhausted(f"no unseen point found in {self.config.max_draws} prior draws")

    def suggest(self, rng: np.random.Generator) -> dict:
        if len(self.seen) >= self.space.size():
            raise SpaceExhausted("all points of the search space have been evaluated")
        if len(self.observations) < self.config.n_startup:
            return self._unseen_prior(rng)
        n = len(self.observations)
        if self._fitted is None or self._fitted[0] != n:
            good, bad = self.split()
            self._fitted = (n, self._densities(good), self._densities(bad))
        _, lg, lb = self._fitted
        best, best_val = None, -math.inf
        for _ in range(self.config.n_cand):
            theta: dict = {}
            ratio = 0.0
            for d in self.space.dims:
                if not self.space.active(d, theta):
                    continue
                v = lg[d.name].sample(rng)
                theta[d.name] = v
                ratio += lg[d.name].logpdf(v) - lb[d.name].logpdf(v)
            if self.key(theta) in self.seen:
                continue
            if ratio > best_val:
                best, best_val = theta, ratio
        return best if best is not None else self._unseen_prior(rng)


def random_suggest(space: Space, rng, seen: set | None = None, key=default_key, max_draws: int = 200) -> dict:
    """Prior sampling with the same duplicate exclusion as TPE (the random-search baseline)."""
    model = TPEModel(space, TPEConfig(n_startup=10 ** 9, max_draws=max_draws), key)
    model.seen = seen if seen is not None else set()
    return model.suggest(rng)
