"""The loss search space: five losses x {untargeted, targeted, difference} x {logits, probs}.

Table losses are written as quantities that grow when an *untargeted* attack
succeeds (e.g. the hinge ``max_{i!=y} Z_i - Z_y``).  Attacks always ascend a
signed objective derived from them:

    untargeted  ->  +loss(Z, y)
    targeted    ->  -loss(Z, t)
    difference  ->  -(loss(Z, t) - loss(Z, y))

so every backbone can be written as a maximiser.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .tensor import backward, forward

LOSS_KINDS = ("CE", "Hinge", "L1", "DLR", "LogitMatching")
DIRECTIONS = ("U", "T", "D")
TAPS = ("logits", "probs")

_LOG_FLOOR = 1e-300


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossSpec:
    kind: str = "CE"
    direction: str = "U"
    tap: str = "probs"
    ntargets: int = 1
    kappa: float = -math.inf

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise LossError(f"unknown loss {self.kind!r}")
        if self.direction not in DIRECTIONS:
            raise LossError(f"unknown direction {self.direction!r}")
        if self.tap not in TAPS:
            raise LossError(f"unknown tap {self.tap!r}")
        if self.kind == "CE" and self.tap != "probs":
            raise LossError("cross-entropy supports only probs")
        if int(self.ntargets) != self.ntargets or self.ntargets < 1:
            raise LossError("ntargets must be a positive integer")

    @property
    def targeted(self) -> bool:
        return self.direction in ("T", "D")

    @property
    def short(self) -> str:
        return f"{self.kind}-{self.direction}-{'L' if self.tap == 'logits' else 'P'}"


def _runner_up(Z: np.ndarray, y: int) -> int:
    """Index of the largest entry other than ``y`` (lowest index on ties)."""
    Zm = Z.copy()
    Zm[y] = -np.inf
    return int(np.argmax(Zm))


def _table_loss(Z: np.ndarray, y: int, kind: str, kappa: float, z_ref) -> tuple[float, np.ndarray]:
    """Value and gradient (w.r.t. Z) of a table loss evaluated at label ``y``."""
    K = Z.shape[-1]
    g = np.zeros_like(Z)
    if kind == "CE":
        p = max(Z[y], _LOG_FLOOR)
        g[y] = -1.0 / p
        return -math.log(p), g
    if kind == "L1":
        g[y] = -1.0
        return -float(Z[y]), g
    if kind == "Hinge":
        m = _runner_up(Z, y)
        val = float(Z[m] - Z[y])
        if math.isfinite(kappa) and -kappa > val:
            return -kappa, g
        g[m] += 1.0
        g[y] -= 1.0
        return val, g
    if kind == "DLR":
        if K < 3:
            raise LossError("DLR needs at least three classes")
        m = _runner_up(Z, y)
        order = np.argsort(-Z, kind="stable")
        p1, p3 = order[0], order[2]
        num = float(Z[y] - Z[m])
        den = float(Z[p1] - Z[p3])
        if den == 0.0:
            return 0.0, g
        g[y] -= 1.0 / den
        g[m] += 1.0 / den
        r = num / den
        # r / den rather than num / den**2, which underflows for tiny gaps
        g[p1] += r / den
        g[p3] -= r / den
        return -r, g
    if kind == "LogitMatching":
        if z_ref is None:
            raise LossError("logit matching needs a reference output")
        d = Z - np.asarray(z_ref, dtype=np.float64)
        return float(d @ d), 2.0 * d
    raise LossError(f"unknown loss {kind!r}")


def _ref(z_ref, cls):
    if z_ref is None or isinstance(z_ref, np.ndarray) or not isinstance(z_ref, Mapping):
        return z_ref
    if cls not in z_ref:
        raise LossError(f"no logit-matching reference for class {cls}")
    return z_ref[cls]


def _value_and_grad(Z, y, target, spec: LossSpec, z_ref):
    """Table-convention loss (U / T / D) and its gradient w.r.t. Z."""
    Z = np.asarray(Z, dtype=np.float64)
    if spec.targeted and target is None:
        raise LossError(f"direction {spec.direction} needs a target class")
    if spec.kind == "LogitMatching" and z_ref is None:
        raise LossError("logit matching needs a reference output")
    if spec.direction == "U":
        return _table_loss(Z, y, spec.kind, spec.kappa, _ref(z_ref, y))
    lt, gt = _table_loss(Z, target, spec.kind, spec.kappa, _ref(z_ref, target))
    if spec.direction == "T":
        return lt, gt
    if spec.kind == "LogitMatching" and not isinstance(z_ref, Mapping):
        raise LossError("difference logit matching needs references for both classes")
    lu, gu = _table_loss(Z, y, spec.kind, spec.kappa, _ref(z_ref, y))
    return lt - lu, gt - gu


def eval_loss(Z, y: int, target: int | None, spec: LossSpec, Z_ref=None) -> float:
    """Loss value in the table convention.

    ``Z_ref`` is the logit-matching reference: an array, or a mapping from
    class index to reference output (needed for direction ``D``).
    """
    return _value_and_grad(Z, y, target, spec, Z_ref)[0]


def objective_sign(spec: LossSpec) -> float:
    return 1.0 if spec.direction == "U" else -1.0


def objective_and_grad_at_tap(Z, y, target, spec: LossSpec, Z_ref=None):
    """Signed objective an attack maximises, and its gradient w.r.t. the tap."""
    val, g = _value_and_grad(Z, y, target, spec, Z_ref)
    s = objective_sign(spec)
    return s * val, s * g


def loss_gradient(graph, x, y: int, target: int | None, spec: LossSpec, Z_ref=None, rng=None):
    """Gradient w.r.t. ``x`` of the objective an attack ascends, on ``graph``.

    ``graph`` may be a surrogate: BPDA backward modes are honoured.
    Returns ``(objective_value, gradient)``.
    """
    logits, probs, trace = forward(graph, x, rng)
    Z = logits if spec.tap == "logits" else probs
    val, gz = objective_and_grad_at_tap(Z, y, target, spec, Z_ref)
    return val, backward(graph, trace, gz, spec.tap)


def enumerate_targets(probs_clean, y: int, ntargets: int) -> list[int]:
    """Top ``ntargets`` classes other than ``y`` by clean probability (ties -> lower index)."""
    p = np.asarray(probs_clean, dtype=np.float64)
    K = p.shape[-1]
    if ntargets >= K or ntargets < 1:
        raise LossError(f"ntargets must be in [1, {K - 1}], got {ntargets}")
    cand = [c for c in range(K) if c != y]
    cand.sort(key=lambda c: (-p[c], c))
    return cand[:ntargets]
