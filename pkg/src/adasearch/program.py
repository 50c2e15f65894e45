"""Attack specs and the parameter tables that bound them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .losses import DIRECTIONS, LOSS_KINDS, TAPS, LossSpec


@dataclass(frozen=True)
class Range:
    kind: str  # "int" | "float"
    lo: float
    hi: float
    log: bool = False

    def contains(self, v) -> bool:
        if self.kind == "int" and (isinstance(v, bool) or int(v) != v):
            return False
        return self.lo <= v <= self.hi

    @property
    def default(self):
        mid = math.sqrt(self.lo * self.hi) if self.log else (self.lo + self.hi) / 2
        return int(round(mid)) if self.kind == "int" else mid

    def describe(self) -> str:
        star = "*" if self.log else ""
        sym = "Z" if self.kind == "int" else "R"
        return f"{star}{sym}[{self.lo:g}, {self.hi:g}]"


def Z(lo, hi, log=False):
    return Range("int", lo, hi, log)


def R(lo, hi, log=False):
    return Range("float", lo, hi, log)


# attack-specific parameters
PARAMS: dict[str, dict[str, Range]] = {
    "FGSM": {},
    "PGD": {"step": Z(20, 200), "rel_stepsize": R(1 / 1000, 1, log=True)},
    "DeepFool": {},
    "APGD": {"rho": R(0.5, 0.9), "n_iter": Z(20, 500)},
    "CW": {
        "confidence": R(0, 0.1),
        "max_iter": Z(20, 200),
        "binary_search_steps": Z(5, 25),
        "learning_rate": R(0.0001, 0.01, log=True),
        "max_halving": Z(5, 15),
        "max_doubling": Z(5, 15),
    },
    "FAB": {"n_iter": Z(10, 200), "eta": R(1, 1.2), "beta": R(0.7, 1)},
    "SQR": {"n_queries": Z(1000, 8000), "p_init": R(0.5, 0.9)},
    "NES": {"step": Z(20, 80), "rel_stepsize": R(0.01, 0.1, log=True), "n_samples": Z(400, 4000)},
}
BACKBONES = tuple(PARAMS)


@dataclass(frozen=True)
class Generic:
    randomize: tuple[bool, ...]
    eot: Range
    repeat: Range
    losses: tuple[str, ...]  # loss kinds honoured; library-loss attacks ignore the kind
    directions: tuple[str, ...]
    taps: tuple[str, ...]
    library_loss: bool = False


_ALL = dict(losses=LOSS_KINDS, directions=DIRECTIONS, taps=TAPS)
GENERIC: dict[str, Generic] = {
    "FGSM": Generic((False, True), Z(1, 200), Z(1, 10000, log=True), **_ALL),
    "PGD": Generic((False, True), Z(1, 40), Z(1, 10), **_ALL),
    "DeepFool": Generic((False,), Z(1, 1), Z(1, 1), LOSS_KINDS, ("D",), TAPS),
    "APGD": Generic((False, True), Z(1, 40), Z(1, 10), **_ALL),
    "CW": Generic((False,), Z(1, 1), Z(1, 1), LOSS_KINDS, ("U", "T"), ("logits",), library_loss=True),
    "FAB": Generic((False, True), Z(1, 1), Z(1, 10), LOSS_KINDS, ("U", "T"), ("logits",), library_loss=True),
    "SQR": Generic((False, True), Z(1, 1), Z(1, 3), **_ALL),
    "NES": Generic((False, True), Z(1, 1), Z(1, 1), **_ALL),
}


@dataclass(frozen=True)
class AttackSpec:
    backbone: str
    params: dict = field(default_factory=dict, hash=False)
    loss: LossSpec = LossSpec()
    randomize: bool = False
    eot: int = 1
    repeat: int = 1
    budget: float | None = None  # "try ... for n" seconds

    def __post_init__(self):
        if self.backbone not in PARAMS:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        full = {k: r.default for k, r in PARAMS[self.backbone].items()}
        unknown = set(self.params) - set(full)
        if unknown:
            raise ValueError(f"{self.backbone} has no parameter(s) {sorted(unknown)}")
        full.update(self.params)
        object.__setattr__(self, "params", full)

    def __hash__(self):
        return hash((self.backbone, tuple(sorted(self.params.items())), self.loss,
                     self.randomize, self.eot, self.repeat, self.budget))


def validate_ranges(spec: AttackSpec) -> list[str]:
    """Violations of the parameter tables (empty list for a valid attack)."""
    out = []
    for name, rng in PARAMS[spec.backbone].items():
        v = spec.params[name]
        if not rng.contains(v):
            out.append(f"{spec.backbone}.{name}={v!r} outside {rng.describe()}")
    gen = GENERIC[spec.backbone]
    if spec.randomize not in gen.randomize:
        out.append(f"{spec.backbone} does not support randomize={spec.randomize}")
    if not gen.eot.contains(spec.eot):
        out.append(f"{spec.backbone} EOT={spec.eot} outside {gen.eot.describe()}")
    if not gen.repeat.contains(spec.repeat):
        out.append(f"{spec.backbone} repeat={spec.repeat} outside {gen.repeat.describe()}")
    if spec.loss.direction not in gen.directions:
        out.append(f"{spec.backbone} does not support loss direction {spec.loss.direction}")
    if spec.loss.tap not in gen.taps:
        out.append(f"{spec.backbone} does not support the {spec.loss.tap} tap")
    if spec.loss.kind not in gen.losses:
        out.append(f"{spec.backbone} does not support {spec.loss.kind}")
    if spec.budget is not None and not (spec.budget > 0 and math.isfinite(spec.budget)):
        out.append(f"try-for budget must be a positive number, got {spec.budget}")
    return out
