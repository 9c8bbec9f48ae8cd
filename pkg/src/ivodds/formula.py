"""A deliberately small model-formula grammar.

Supported right-hand sides: an implicit intercept (``0`` or ``-1`` drops it),
main effects ``x``, products ``x:z``, dummy-coded factors ``C(z)`` and fixed
offsets ``offset(col)``. That covers every design the estimators need.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import FormulaError, MissingColumn

LINKS = ("identity", "logit", "probit")

_NAME = r"[A-Za-z_][A-Za-z0-9_.]*"
_FACTOR = re.compile(rf"^C\(\s*({_NAME})\s*\)$")
_OFFSET = re.compile(rf"^offset\(\s*({_NAME})\s*\)$")
_PLAIN = re.compile(rf"^{_NAME}$")


@dataclass(frozen=True)
class Term:
    kind: str  # "intercept" | "main" | "product" | "factor" | "offset"
    names: tuple[str, ...] = ()

    @property
    def label(self) -> str:
        if self.kind == "intercept":
            return "(Intercept)"
        if self.kind == "factor":
            return f"C({self.names[0]})"
        if self.kind == "offset":
            return f"offset({self.names[0]})"
        return ":".join(self.names)


INTERCEPT = Term("intercept")


@dataclass(frozen=True)
class ModelSpec:
    """Ordered regression terms plus a link function."""

    terms: tuple[Term, ...]
    link: str = "logit"
    response: str | None = None

    def __post_init__(self):
        if self.link not in LINKS:
            raise FormulaError(f"unknown link {self.link!r}")
        object.__setattr__(self, "terms", tuple(self.terms))
        if sum(t.kind == "intercept" for t in self.terms) > 1:
            raise FormulaError("at most one intercept allowed")
        keys = [(t.kind, tuple(sorted(t.names)) if t.kind == "product" else t.names) for t in self.terms]
        if len(set(keys)) != len(keys):
            raise FormulaError("duplicate terms in model")
        for t in self.terms:
            if t.kind == "product" and len(set(t.names)) != len(t.names):
                raise FormulaError(f"repeated column inside product {t.label}")

    @property
    def has_intercept(self) -> bool:
        return any(t.kind == "intercept" for t in self.terms)

    def has_main(self, name: str) -> bool:
        """True when ``name`` enters as an unrestricted main effect (plain or dummy coded)."""
        return any(t.kind in ("main", "factor") and t.names == (name,) for t in self.terms)

    def columns_used(self) -> set[str]:
        out = set()
        for t in self.terms:
            out.update(t.names)
        return out

    def with_link(self, link: str) -> "ModelSpec":
        return ModelSpec(self.terms, link, self.response)

    def with_response(self, response: str) -> "ModelSpec":
        return ModelSpec(self.terms, self.link, response)

    def __str__(self) -> str:
        rhs = [t.label for t in self.terms if t.kind != "intercept"]
        if not self.has_intercept:
            rhs = ["0"] + rhs
        elif not rhs:
            rhs = ["1"]
        lhs = f"{self.response} " if self.response else ""
        return f"{lhs}~ {' + '.join(rhs)}"


def parse_formula(text: str, link: str = "logit") -> ModelSpec:
    """Parse ``"y ~ x + z + x:z"`` (the left-hand side is optional)."""
    if "~" in text:
        lhs, rhs = text.split("~", 1)
        lhs = lhs.strip() or None
        if lhs is not None and not _PLAIN.match(lhs):
            raise FormulaError(f"bad response {lhs!r}")
    else:
        lhs, rhs = None, text
    rhs = rhs.strip()
    if not rhs:
        raise FormulaError("empty right-hand side")
    intercept = True
    terms: list[Term] = []
    # split on '+' and '-' keeping the sign
    for sign, tok in re.findall(r"([+-]?)\s*([^+-]+)", rhs):
        tok = tok.strip()
        if tok in ("0", "1"):
            if sign == "-" or tok == "0":
                intercept = False if (tok == "1" and sign == "-") or tok == "0" else intercept
            continue
        if sign == "-":
            raise FormulaError(f"cannot remove term {tok!r}; only '- 1' is supported")
        terms.append(_parse_term(tok))
    if intercept:
        terms.insert(0, INTERCEPT)
    if not terms:
        raise FormulaError("model has no terms")
    return ModelSpec(tuple(terms), link, lhs)


def _parse_term(tok: str) -> Term:
    if m := _FACTOR.match(tok):
        return Term("factor", (m.group(1),))
    if m := _OFFSET.match(tok):
        return Term("offset", (m.group(1),))
    parts = [p.strip() for p in tok.split(":")]
    for p in parts:
        if not _PLAIN.match(p):
            raise FormulaError(f"cannot parse term {tok!r}")
    if len(parts) == 1:
        return Term("main", (parts[0],))
    return Term("product", tuple(parts))


@dataclass(frozen=True, eq=False)
class Design:
    matrix: np.ndarray
    offset: np.ndarray
    names: tuple[str, ...]
    levels: Mapping[str, tuple[float, ...]]


def _column(frame: Mapping[str, np.ndarray], name: str) -> np.ndarray:
    try:
        return np.asarray(frame[name], dtype=float)
    except KeyError:
        raise MissingColumn(f"column {name!r} referenced by the model is not available") from None


def build_design(
    spec: ModelSpec,
    frame: Mapping[str, np.ndarray],
    levels: Mapping[str, tuple[float, ...]] | None = None,
) -> Design:
    """Evaluate ``spec`` on the columns in ``frame``.

    Factor levels are taken from ``levels`` when given (prediction) and from
    the data otherwise; the first level is the reference category.
    """
    n = len(next(iter(frame.values())))
    cols: list[np.ndarray] = []
    names: list[str] = []
    offset = np.zeros(n)
    used_levels: dict[str, tuple[float, ...]] = {}
    for t in spec.terms:
        if t.kind == "intercept":
            cols.append(np.ones(n))
            names.append(t.label)
        elif t.kind == "main":
            cols.append(_column(frame, t.names[0]))
            names.append(t.label)
        elif t.kind == "product":
            v = np.ones(n)
            for nm in t.names:
                v = v * _column(frame, nm)
            cols.append(v)
            names.append(t.label)
        elif t.kind == "offset":
            offset = offset + _column(frame, t.names[0])
        elif t.kind == "factor":
            v = _column(frame, t.names[0])
            lv = tuple(levels[t.names[0]]) if levels and t.names[0] in levels else tuple(np.unique(v).tolist())
            used_levels[t.names[0]] = lv
            for level in lv[1:]:
                cols.append((v == level).astype(float))
                names.append(f"C({t.names[0]})[{level:g}]")
    matrix = np.column_stack(cols) if cols else np.zeros((n, 0))
    return Design(matrix, offset, tuple(names), used_levels)


def spec_hash(spec: ModelSpec, levels: Mapping[str, tuple[float, ...]] | None = None) -> str:
    payload = repr((spec.terms, spec.link, sorted((levels or {}).items())))
    return hashlib.sha1(payload.encode()).hexdigest()[:16]
