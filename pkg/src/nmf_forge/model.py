"""Attribute codebook, query workload and tabulated-statistic definitions.

Every query is a contingency table over a subset of the codebook attributes.
Bins are laid out row-major over the query's attributes, taken in canonical
codebook order, with the last attribute varying fastest.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

CANONICAL_ORDER = ("voting_age", "hispanic", "race", "hhgq")
ABSENT = "*"


class CodingError(ValueError):
    """An attribute or category code does not exist in the codebook."""


@dataclass(frozen=True)
class Attribute:
    name: str
    categories: tuple[tuple[int, str], ...]

    def __post_init__(self):
        codes = [c for c, _ in self.categories]
        if any(b <= a for a, b in zip(codes, codes[1:])):
            raise CodingError(f"codes of attribute {self.name!r} must be strictly increasing")
        if len(codes) < 2:
            raise CodingError(f"attribute {self.name!r} needs at least two categories")

    @property
    def codes(self) -> tuple[int, ...]:
        return tuple(c for c, _ in self.categories)

    @property
    def size(self) -> int:
        return len(self.categories)

    @cached_property
    def _position(self) -> dict[int, int]:
        return {c: i for i, (c, _) in enumerate(self.categories)}

    @cached_property
    def _by_label(self) -> dict[str, int]:
        return {label: c for c, label in self.categories}

    def position(self, code: int) -> int:
        try:
            return self._position[code]
        except (KeyError, TypeError):
            raise CodingError(f"invalid code {code!r} for attribute {self.name!r}") from None

    def label(self, code: int) -> str:
        return self.categories[self.position(code)][1]

    def code_for_label(self, label: str) -> int:
        try:
            return self._by_label[label]
        except KeyError:
            raise CodingError(f"invalid label {label!r} for attribute {self.name!r}") from None


@dataclass(frozen=True)
class Codebook:
    attributes: tuple[Attribute, ...]
    version: str

    def __post_init__(self):
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise CodingError("duplicate attribute names in codebook")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.size for a in self.attributes)

    def attribute(self, name: str) -> Attribute:
        for a in self.attributes:
            if a.name == name:
                return a
        raise CodingError(f"unknown attribute {name!r}")

    def axis(self, name: str) -> int:
        return self.names.index(self.attribute(name).name)


@dataclass(frozen=True)
class QuerySpec:
    name: str
    attribute_names: tuple[str, ...]

    def __post_init__(self):
        if not self.name.endswith("_dpq"):
            raise CodingError(f"query name {self.name!r} must end in '_dpq'")

    def attributes(self, codebook: Codebook) -> list[Attribute]:
        attrs = [codebook.attribute(n) for n in self.attribute_names]
        axes = [codebook.axis(n) for n in self.attribute_names]
        if axes != sorted(set(axes)):
            raise CodingError(
                f"query {self.name!r} attributes must follow canonical codebook order {codebook.names}"
            )
        return attrs

    def bin_count(self, codebook: Codebook) -> int:
        return math.prod(a.size for a in self.attributes(codebook))


@dataclass(frozen=True)
class StatisticSpec:
    """A tabulated statistic: persons whose codes fall in ``predicate``.

    Attributes missing from ``predicate`` are unconstrained.
    """

    name: str
    predicate: Mapping[str, frozenset[int]] = field(default_factory=dict)

    def constrained(self, codebook: Codebook) -> list[str]:
        """Attributes whose predicate is a proper subset of their codes."""
        out = []
        for name in codebook.names:
            if name in self.predicate and set(self.predicate[name]) != set(codebook.attribute(name).codes):
                out.append(name)
        return out

    def validate(self, codebook: Codebook) -> None:
        for name, codes in self.predicate.items():
            attr = codebook.attribute(name)
            for c in codes:
                attr.position(c)

    def matches(self, codes: Mapping[str, int]) -> bool:
        return all(codes[name] in allowed for name, allowed in self.predicate.items() if name in codes)


@dataclass(frozen=True)
class Workload:
    queries: tuple[QuerySpec, ...]
    name: str
    statistics: tuple[StatisticSpec, ...] = ()
    version: str = ""

    def __post_init__(self):
        names = [q.name for q in self.queries]
        if len(set(names)) != len(names):
            raise CodingError("query names in a workload must be unique")

    def query(self, name: str) -> QuerySpec:
        for q in self.queries:
            if q.name == name:
                return q
        raise CodingError(f"unknown query {name!r}")

    def statistic(self, name: str) -> StatisticSpec:
        for s in self.statistics:
            if s.name == name:
                return s
        raise CodingError(f"unknown statistic {name!r}")

    @property
    def query_names(self) -> list[str]:
        return [q.name for q in self.queries]


@dataclass(frozen=True)
class BinLabel:
    codes: tuple[int, ...]
    labels: tuple[str, ...]


def bin_index(query: QuerySpec, codes: Sequence[int] | Mapping[str, int], codebook: Codebook | None = None) -> int:
    """Position of the cell with ``codes`` inside ``query``'s value vector.

    ``codes`` is either one code per query attribute (in the query's order) or
    a mapping from attribute name to code.
    """
    codebook = codebook or default_codebook()
    attrs = query.attributes(codebook)
    if isinstance(codes, Mapping):
        extra = set(codes) - set(query.attribute_names)
        if extra:
            raise CodingError(f"attribute {sorted(extra)[0]!r} is not a dimension of {query.name}")
        try:
            codes = [codes[a.name] for a in attrs]
        except KeyError as e:
            raise CodingError(f"missing code for attribute {e.args[0]!r}") from None
    if len(codes) != len(attrs):
        raise CodingError(f"{query.name} expects {len(attrs)} codes, got {len(codes)}")
    index = 0
    for attr, code in zip(attrs, codes):
        index = index * attr.size + attr.position(code)
    return index


def bin_labels(query: QuerySpec, codebook: Codebook | None = None) -> list[BinLabel]:
    codebook = codebook or default_codebook()
    attrs = query.attributes(codebook)
    out = []
    for cats in itertools.product(*(a.categories for a in attrs)):
        out.append(BinLabel(tuple(c for c, _ in cats), tuple(l for _, l in cats)))
    return out


def statistic_supported_by(stat: StatisticSpec, query: QuerySpec, codebook: Codebook | None = None) -> bool:
    codebook = codebook or default_codebook()
    return set(stat.constrained(codebook)) <= set(query.attribute_names)


# --- loading -----------------------------------------------------------------


def codebook_from_dict(d: Mapping) -> Codebook:
    attrs = tuple(
        Attribute(a["name"], tuple((int(c["code"]), str(c["label"])) for c in a["categories"]))
        for a in d["attributes"]
    )
    return Codebook(attrs, str(d.get("version", "")))


def codebook_to_dict(codebook: Codebook) -> dict:
    return {
        "version": codebook.version,
        "attributes": [
            {"name": a.name, "categories": [{"code": c, "label": l} for c, l in a.categories]}
            for a in codebook.attributes
        ],
    }


def workload_from_dict(d: Mapping, codebook: Codebook | None = None) -> Workload:
    codebook = codebook or default_codebook()
    queries = tuple(QuerySpec(q["name"], tuple(q["attributes"])) for q in d["queries"])
    for q in queries:
        q.attributes(codebook)
    stats = tuple(
        StatisticSpec(s["name"], {k: frozenset(int(c) for c in v) for k, v in s.get("predicate", {}).items()})
        for s in d.get("statistics", [])
    )
    for s in stats:
        s.validate(codebook)
    return Workload(queries, str(d.get("name", "")), stats, str(d.get("version", "")))


def workload_to_dict(workload: Workload) -> dict:
    return {
        "name": workload.name,
        "version": workload.version,
        "queries": [{"name": q.name, "attributes": list(q.attribute_names)} for q in workload.queries],
        "statistics": [
            {"name": s.name, "predicate": {k: sorted(v) for k, v in s.predicate.items()}}
            for s in workload.statistics
        ],
    }


def _read_json(path: str | Path | None, default_name: str) -> dict:
    if path is None:
        return json.loads(resources.files("nmf_forge.data").joinpath(default_name).read_text("utf-8"))
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def load_codebook(path: str | Path | None = None) -> Codebook:
    return codebook_from_dict(_read_json(path, "codebook.json"))


def load_workload(path: str | Path | None = None, codebook: Codebook | None = None) -> Workload:
    return workload_from_dict(_read_json(path, "workload.json"), codebook)


_DEFAULTS: dict[str, object] = {}


def default_codebook() -> Codebook:
    if "codebook" not in _DEFAULTS:
        _DEFAULTS["codebook"] = load_codebook()
    return _DEFAULTS["codebook"]  # type: ignore[return-value]


def default_workload() -> Workload:
    if "workload" not in _DEFAULTS:
        _DEFAULTS["workload"] = load_workload(codebook=default_codebook())
    return _DEFAULTS["workload"]  # type: ignore[return-value]


def statistics_for(query: QuerySpec, stats: Iterable[StatisticSpec], codebook: Codebook) -> list[StatisticSpec]:
    return [s for s in stats if statistic_supported_by(s, query, codebook)]
