"""First-order terms used as message content and transition patterns.

Textual grammar::

    term      := function | variable | constant
    function  := IDENT "(" term ("," term)* ")"
    variable  := "?" | "?" IDENT | "??" IDENT
    constant  := IDENT | QUOTED
    IDENT     := [A-Za-z0-9_.-]+
    QUOTED    := '"' (escaped char | any char except '"' and '\\')* '"'

``?name`` is an immutable variable, ``??name`` a mutable one and a bare
``?`` the anonymous variable.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Dict, Iterator, Mapping, Optional, Tuple, Union

__all__ = [
    "ANONYMOUS",
    "Bindings",
    "Constant",
    "Function",
    "GroundTermError",
    "MatchError",
    "Term",
    "TermSyntaxError",
    "Variable",
    "apply",
    "get_bindings",
    "is_ground",
    "matches",
    "parse_term",
    "render_term",
    "variables",
]

IDENT_RE = re.compile(r"[A-Za-z0-9_.\-]+")
_IDENT_FULL = re.compile(r"[A-Za-z0-9_.\-]+\Z")


class TermSyntaxError(ValueError):
    """Raised when text does not follow the term grammar."""

    def __init__(self, message: str, text: str, position: int):
        super().__init__(f"{message} at position {position} in {text!r}")
        self.text = text
        self.position = position


class GroundTermError(ValueError):
    """A term that had to be ground (variable-free) contained a variable."""


class MatchError(ValueError):
    """Bindings were requested for a pattern that does not match its value."""


@dataclass(frozen=True)
class Constant:
    text: str

    def __post_init__(self):
        if not isinstance(self.text, str) or not self.text:
            raise ValueError("constant text must be a non-empty string")

    def __str__(self) -> str:
        return render_term(self)


@dataclass(frozen=True)
class Variable:
    """A named (immutable or mutable) variable, or the anonymous variable when
    ``name`` is None."""

    name: Optional[str] = None
    mutable: bool = False

    def __post_init__(self):
        if self.name is None:
            if self.mutable:
                raise ValueError("the anonymous variable cannot be mutable")
        elif not isinstance(self.name, str) or not _IDENT_FULL.match(self.name):
            raise ValueError(f"invalid variable name {self.name!r}")

    @property
    def anonymous(self) -> bool:
        return self.name is None

    def __str__(self) -> str:
        return render_term(self)


@dataclass(frozen=True)
class Function:
    functor: str
    args: Tuple["Term", ...]

    def __post_init__(self):
        if not isinstance(self.functor, str) or not _IDENT_FULL.match(self.functor):
            raise ValueError(f"invalid functor {self.functor!r}")
        args = tuple(self.args)
        if not args:
            raise ValueError("a function needs at least one argument")
        for arg in args:
            if not isinstance(arg, (Constant, Variable, Function)):
                raise TypeError(f"function argument is not a term: {arg!r}")
        object.__setattr__(self, "args", args)

    @property
    def arity(self) -> int:
        return len(self.args)

    def __str__(self) -> str:
        return render_term(self)


Term = Union[Constant, Variable, Function]
Bindings = Dict[str, Term]

ANONYMOUS = Variable()


# -- parsing -----------------------------------------------------------------

_ESCAPES = {'"': '"', "\\": "\\", "n": "\n", "t": "\t", "r": "\r"}
_REVERSE_ESCAPES = {v: k for k, v in _ESCAPES.items()}


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, message: str, pos: Optional[int] = None) -> TermSyntaxError:
        return TermSyntaxError(message, self.text, self.pos if pos is None else pos)

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def ident(self) -> Optional[str]:
        m = IDENT_RE.match(self.text, self.pos)
        if m is None:
            return None
        self.pos = m.end()
        return m.group()

    def parse(self) -> Term:
        self.skip_ws()
        term = self.term()
        self.skip_ws()
        if self.pos != len(self.text):
            raise self.error(f"unexpected {self.peek()!r}")
        return term

    def term(self) -> Term:
        self.skip_ws()
        ch = self.peek()
        if not ch:
            raise self.error("unexpected end of input")
        if ch == "?":
            return self.variable()
        if ch == '"':
            return Constant(self.quoted())
        start = self.pos
        name = self.ident()
        if name is None:
            if ch == "(":
                raise self.error("empty functor")
            raise self.error(f"illegal character {ch!r}")
        self.skip_ws()
        if self.peek() != "(":
            return Constant(name)
        self.pos += 1
        args = [self.term()]
        while True:
            self.skip_ws()
            ch = self.peek()
            if ch == ",":
                self.pos += 1
                args.append(self.term())
            elif ch == ")":
                self.pos += 1
                return Function(name, tuple(args))
            elif not ch:
                raise self.error(f"unbalanced parenthesis opened by {name!r}", start)
            else:
                raise self.error(f"expected ',' or ')' but found {ch!r}")

    def variable(self) -> Variable:
        start = self.pos
        self.pos += 1
        mutable = False
        if self.peek() == "?":
            mutable = True
            self.pos += 1
        name = self.ident()
        if name is None:
            if mutable:
                raise self.error("'??' must be followed by a variable name", start)
            return ANONYMOUS
        return Variable(name, mutable)

    def quoted(self) -> str:
        start = self.pos
        self.pos += 1
        out = []
        while True:
            ch = self.peek()
            if not ch:
                raise self.error("unterminated string", start)
            self.pos += 1
            if ch == '"':
                break
            if ch == "\\":
                esc = self.peek()
                if esc not in _ESCAPES:
                    raise self.error(f"invalid escape \\{esc}", self.pos - 1)
                out.append(_ESCAPES[esc])
                self.pos += 1
            else:
                out.append(ch)
        if not out:
            raise self.error("empty constant", start)
        return "".join(out)


def parse_term(text: str) -> Term:
    """Parse ``text`` into a term, raising TermSyntaxError on bad input."""
    if not isinstance(text, str):
        raise TypeError("parse_term expects a string")
    if not text.strip():
        raise TermSyntaxError("empty term", text, 0)
    return _Parser(text).parse()


def _render_constant(text: str) -> str:
    if _IDENT_FULL.match(text):
        return text
    body = "".join("\\" + _REVERSE_ESCAPES[c] if c in _REVERSE_ESCAPES else c for c in text)
    return f'"{body}"'


def render_term(term: Term) -> str:
    if isinstance(term, Constant):
        return _render_constant(term.text)
    if isinstance(term, Variable):
        if term.name is None:
            return "?"
        return ("??" if term.mutable else "?") + term.name
    return f"{term.functor}({','.join(render_term(a) for a in term.args)})"


# -- matching ----------------------------------------------------------------

def variables(term: Term) -> Iterator[Variable]:
    """Yield every variable occurrence in ``term``, left to right."""
    if isinstance(term, Variable):
        yield term
    elif isinstance(term, Function):
        for arg in term.args:
            yield from variables(arg)


def is_ground(term: Term) -> bool:
    return next(variables(term), None) is None


def _match(pattern: Term, value: Term, seen: Bindings) -> bool:
    if isinstance(pattern, Variable):
        if pattern.name is None:
            return True
        previous = seen.get(pattern.name)
        if previous is None:
            seen[pattern.name] = value
            return True
        return previous == value
    if isinstance(pattern, Constant):
        return pattern == value
    if not isinstance(value, Function):
        return False
    if pattern.functor != value.functor or len(pattern.args) != len(value.args):
        return False
    return all(_match(p, v, seen) for p, v in zip(pattern.args, value.args))


def _require_ground(value: Term) -> None:
    if not is_ground(value):
        raise GroundTermError(f"value {render_term(value)!r} is not ground")


def matches(pattern: Term, value: Term) -> bool:
    """True if the ground ``value`` is an instance of ``pattern``.

    Repeated occurrences of one named variable must match equal sub-terms.
    """
    _require_ground(value)
    return _match(pattern, value, {})


def get_bindings(pattern: Term, value: Term) -> Bindings:
    """Bindings for every named variable of ``pattern`` against ``value``.

    Mutable and immutable variables are bound alike; the anonymous variable
    never is.
    """
    _require_ground(value)
    seen: Bindings = {}
    if not _match(pattern, value, seen):
        raise MatchError(f"{render_term(pattern)} does not match {render_term(value)}")
    return seen


def apply(bindings: Mapping[str, Term], pattern: Term) -> Term:
    """Substitute bound immutable variables in ``pattern``.

    Mutable, anonymous and unbound variables are left in place.
    """
    if isinstance(pattern, Variable):
        if pattern.name is not None and not pattern.mutable:
            return bindings.get(pattern.name, pattern)
        return pattern
    if isinstance(pattern, Function):
        args = tuple(apply(bindings, a) for a in pattern.args)
        if all(a is b for a, b in zip(args, pattern.args)):
            return pattern
        return Function(pattern.functor, args)
    return pattern
