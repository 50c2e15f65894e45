"""Text syntax for attack programs.

Concrete grammar (whitespace-insensitive, ``#`` starts a comment)::

    program   := item (';' item)*
    item      := decorated 'with' loss
    decorated := 'randomize' decorated
               | 'EOT' decorated ',' INT
               | 'repeat' decorated ',' INT
               | 'try' decorated 'for' NUMBER
               | '(' decorated ')'
               | BACKBONE 'with' '{' [NAME ':' NUMBER (',' NAME ':' NUMBER)*] '}'
    loss      := 'untargeted' KIND 'with' TAP
               | 'targeted' KIND ',' INT ['-' 'untargeted' KIND] 'with' TAP

Decorators bind tighter than ``;``.  Each decorator may appear at most once
per attack, and the difference form needs the same loss kind on both sides.
Example::

    repeat (EOT (randomize APGD with {n_iter: 100, rho: 0.75}), 8), 3
        with untargeted DLR with logits;
    SQR with {n_queries: 2000} with targeted Hinge, 3 with probs
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

from .losses import LOSS_KINDS, TAPS, LossError, LossSpec
from .program import BACKBONES, PARAMS, AttackSpec, validate_ranges


class DSLError(ValueError):
    pass


class DSLSyntaxError(DSLError):
    def __init__(self, msg: str, line: int, col: int):
        super().__init__(f"line {line}, column {col}: {msg}")
        self.line, self.col = line, col


class DSLRangeError(DSLError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class AttackProgram:
    specs: tuple[AttackSpec, ...]

    def __post_init__(self):
        if not self.specs:
            raise DSLError("an attack program needs at least one attack")

    def __len__(self):
        return len(self.specs)

    def __iter__(self):
        return iter(self.specs)

    @property
    def text(self) -> str:
        return format_program(self)


_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r\n]+|\#[^\n]*)
  | (?P<num>[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[{}():,;\-])
""", re.VERBOSE)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    out, pos, line, lstart = [], 0, 1, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise DSLSyntaxError(f"unexpected character {text[pos]!r}", line, pos - lstart + 1)
        kind = m.lastgroup
        if kind != "ws":
            out.append(_Tok(kind, m.group(), line, pos - lstart + 1))
        for i, ch in enumerate(m.group()):
            if ch == "\n":
                line, lstart = line + 1, pos + i + 1
        pos = m.end()
    out.append(_Tok("eof", "", line, pos - lstart + 1))
    return out


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def error(self, msg, tok=None):
        tok = tok or self.tok
        return DSLSyntaxError(msg, tok.line, tok.col)

    def accept(self, text):
        if self.tok.text == text and self.tok.kind != "eof":
            self.i += 1
            return True
        return False

    def expect(self, text):
        if not self.accept(text):
            found = self.tok.text or "end of input"
            raise self.error(f"expected {text!r}, found {found!r}")

    def number(self, integer=False):
        tok = self.tok
        if tok.kind != "num":
            raise self.error(f"expected a number, found {tok.text or 'end of input'!r}")
        self.i += 1
        if integer:
            if not re.fullmatch(r"[+-]?\d+", tok.text):
                raise self.error(f"expected an integer, found {tok.text!r}", tok)
            return int(tok.text)
        return float(tok.text) if re.search(r"[.eE]", tok.text) else int(tok.text)

    def name(self, what):
        tok = self.tok
        if tok.kind != "name":
            raise self.error(f"expected {what}, found {tok.text or 'end of input'!r}")
        self.i += 1
        return tok

    # grammar ------------------------------------------------------------
    def program(self) -> list[AttackSpec]:
        items = [self.item()]
        while self.accept(";"):
            if self.tok.kind == "eof":  # tolerate a trailing ';'
                break
            items.append(self.item())
        if self.tok.kind != "eof":
            raise self.error(f"unexpected {self.tok.text!r}")
        return items

    def item(self) -> AttackSpec:
        start = self.tok
        deco: dict = {}
        backbone, params = self.decorated(deco)
        self.expect("with")
        loss = self.loss()
        try:
            spec = AttackSpec(backbone, params, loss, deco.get("randomize", False), deco.get("eot", 1),
                              deco.get("repeat", 1), deco.get("budget"))
        except ValueError as e:
            raise DSLSyntaxError(str(e), start.line, start.col) from None
        bad = validate_ranges(spec)
        if bad:
            raise DSLRangeError(bad)
        return spec

    def _set(self, deco, key, value, tok):
        if key in deco:
            raise self.error(f"decorator {tok.text!r} used twice on one attack", tok)
        deco[key] = value

    def decorated(self, deco):
        tok = self.tok
        if self.accept("randomize"):
            inner = self.decorated(deco)
            self._set(deco, "randomize", True, tok)
            return inner
        if self.accept("EOT") or self.accept("repeat"):
            inner = self.decorated(deco)
            self.expect(",")
            self._set(deco, "eot" if tok.text == "EOT" else "repeat", self.number(integer=True), tok)
            return inner
        if self.accept("try"):
            inner = self.decorated(deco)
            self.expect("for")
            sec = float(self.number())
            if not (sec > 0 and math.isfinite(sec)):
                raise self.error("try-for budget must be positive", tok)
            self._set(deco, "budget", sec, tok)
            return inner
        if self.accept("("):
            inner = self.decorated(deco)
            self.expect(")")
            return inner
        if tok.kind == "name" and tok.text in BACKBONES:
            self.i += 1
            self.expect("with")
            return tok.text, self.params(tok.text)
        raise self.error(f"expected an attack or decorator, found {tok.text or 'end of input'!r}")

    def params(self, backbone) -> dict:
        self.expect("{")
        out: dict = {}
        if self.accept("}"):
            return out
        while True:
            key = self.name("a parameter name")
            table = PARAMS[backbone]
            if key.text not in table:
                raise self.error(f"{backbone} has no parameter {key.text!r}", key)
            if key.text in out:
                raise self.error(f"parameter {key.text!r} given twice", key)
            self.expect(":")
            vtok = self.tok
            val = self.number()
            if table[key.text].kind == "int":
                if isinstance(val, float):
                    if not val.is_integer():
                        raise self.error(f"{backbone}.{key.text} must be an integer", vtok)
                    val = int(val)
            else:
                val = float(val)
            out[key.text] = val
            if self.accept("}"):
                return out
            self.expect(",")

    def kind(self):
        tok = self.name("a loss kind")
        if tok.text not in LOSS_KINDS:
            raise self.error(f"unknown loss {tok.text!r}", tok)
        return tok.text

    def loss(self) -> LossSpec:
        tok = self.tok
        if self.accept("untargeted"):
            kind, direction, n = self.kind(), "U", 1
        elif self.accept("targeted"):
            kind = self.kind()
            self.expect(",")
            n = self.number(integer=True)
            if n < 1:
                raise self.error("number of targets must be at least 1", tok)
            direction = "T"
            if self.accept("-"):
                self.expect("untargeted")
                ktok = self.tok
                if self.kind() != kind:
                    raise self.error("difference loss needs the same kind on both sides", ktok)
                direction = "D"
        else:
            raise self.error(f"expected 'untargeted' or 'targeted', found {tok.text or 'end of input'!r}")
        self.expect("with")
        ttok = self.name("'logits' or 'probs'")
        if ttok.text not in TAPS:
            raise self.error(f"unknown output {ttok.text!r}", ttok)
        try:
            return LossSpec(kind, direction, ttok.text, n)
        except LossError as e:
            raise DSLSyntaxError(str(e), tok.line, tok.col) from None


def parse(text: str) -> AttackProgram:
    """Parse an attack program; raises DSLSyntaxError or DSLRangeError."""
    return AttackProgram(tuple(_Parser(text).program()))


def parse_spec(text: str) -> AttackSpec:
    prog = parse(text)
    if len(prog) != 1:
        raise DSLError("expected a single attack")
    return prog.specs[0]


def _num(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def format_loss(loss: LossSpec) -> str:
    if loss.direction == "U":
        head = f"untargeted {loss.kind}"
    else:
        head = f"targeted {loss.kind}, {loss.ntargets}"
        if loss.direction == "D":
            head += f" - untargeted {loss.kind}"
    return f"{head} with {loss.tap}"


def format_spec(spec: AttackSpec) -> str:
    """Canonical text: try(repeat(EOT(randomize(attack)))) with loss; defaults are printed."""
    body = ", ".join(f"{k}: {_num(spec.params[k])}" for k in PARAMS[spec.backbone])
    s = f"{spec.backbone} with {{{body}}}"
    if spec.randomize:
        s = f"randomize {s}"
    if spec.eot != 1:
        s = f"EOT ({s}), {spec.eot}"
    if spec.repeat != 1:
        s = f"repeat ({s}), {spec.repeat}"
    if spec.budget is not None:
        s = f"try ({s}) for {_num(spec.budget)}"
    return f"{s} with {format_loss(spec.loss)}"


def format_program(program) -> str:
    specs = program.specs if isinstance(program, AttackProgram) else list(program)
    return ";\n".join(format_spec(s) for s in specs)
