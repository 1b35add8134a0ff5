"""Synthetic DAS geographic spines.

Geocodes are fixed-width ASCII strings ``F OO G``:

* ``F`` -- ``1`` inside an AI/AN area, ``0`` outside;
* ``OO`` -- two-digit optimized block group ordinal, ``00`` above OBG level;
* ``G`` -- tabulation GEOID prefix for the level (state 2, county 5,
  tract 11, block 15 characters; an OBG carries its tract's prefix).

So a block geocode is 18 characters and ``split_geocode`` is a pure slice.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

PREFIX_LEN = 3
_PIECE_LEN = {5: 2, 8: 5, 14: 11, 18: 15}


class GeoLevel(enum.IntEnum):
    STATE = 0
    COUNTY = 1
    TRACT = 2
    OBG = 3
    BLOCK = 4

    @classmethod
    def parse(cls, value: "str | int | GeoLevel") -> "GeoLevel":
        if isinstance(value, GeoLevel):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[value.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown geographic level {value!r}") from None


class GeocodeError(ValueError):
    pass


class SpineConfigError(ValueError):
    pass


def split_geocode(geocode: str) -> tuple[str, str]:
    """Split a geocode into its spine prefix and tabulation GEOID piece."""
    if not isinstance(geocode, str):
        raise GeocodeError(f"geocode must be text, got {type(geocode).__name__}")
    if len(geocode) not in _PIECE_LEN:
        raise GeocodeError(
            f"malformed geocode {geocode!r}: length {len(geocode)} at position {len(geocode)}, "
            f"expected one of {sorted(_PIECE_LEN)}"
        )
    for pos, ch in enumerate(geocode):
        if not ch.isdigit() or not ch.isascii():
            raise GeocodeError(f"malformed geocode {geocode!r}: non-digit {ch!r} at position {pos}")
    if geocode[0] not in "01":
        raise GeocodeError(f"malformed geocode {geocode!r}: AI/AN flag {geocode[0]!r} at position 0")
    if len(geocode) in (5, 8) and geocode[1:3] != "00":
        raise GeocodeError(f"malformed geocode {geocode!r}: OBG ordinal must be 00 at position 1")
    return geocode[:PREFIX_LEN], geocode[PREFIX_LEN:]


def geocode_level(geocode: str) -> GeoLevel:
    prefix, piece = split_geocode(geocode)
    if len(piece) == 2:
        return GeoLevel.STATE
    if len(piece) == 5:
        return GeoLevel.COUNTY
    if len(piece) == 11:
        return GeoLevel.TRACT if prefix[1:] == "00" else GeoLevel.OBG
    return GeoLevel.BLOCK


def make_geocode(aian: bool, obg: int, piece: str) -> str:
    return f"{int(aian)}{obg:02d}{piece}"


@dataclass(frozen=True)
class GeoUnit:
    geocode: str
    level: GeoLevel
    aian: bool
    tabulation_geoid: str
    housing_units: int
    parent_geocode: str | None
    children: tuple[str, ...] = ()


@dataclass(frozen=True)
class SpineConfig:
    """Size and seed parameters for a synthetic spine.

    ``blocks_per_tract`` is either a fixed count or an inclusive ``[lo, hi]``
    range drawn per tract.
    """

    states: int = 1
    counties_per_state: int = 2
    tracts_per_county: int = 2
    blocks_per_tract: int | tuple[int, int] = 4
    obg_size: int = 4
    aian_fraction: float = 0.0
    zero_fraction: float = 0.0
    max_housing_units: int = 30
    first_state_fips: int = 44

    def __post_init__(self):
        bpt = self.blocks_per_tract
        if isinstance(bpt, (list, tuple)):
            object.__setattr__(self, "blocks_per_tract", (int(bpt[0]), int(bpt[1])))
        for name in ("states", "counties_per_state", "tracts_per_county", "obg_size", "max_housing_units"):
            if getattr(self, name) < 1:
                raise SpineConfigError(f"{name} must be >= 1")
        lo, hi = self.block_range
        if lo < 1 or hi < lo or hi > 999:
            raise SpineConfigError("blocks_per_tract must lie in [1, 999] with lo <= hi")
        if not (0.0 <= self.aian_fraction <= 1.0) or not (0.0 <= self.zero_fraction <= 1.0):
            raise SpineConfigError("fractions must lie in [0, 1]")
        if self.states + self.first_state_fips > 100 or self.counties_per_state > 499 or self.tracts_per_county > 9999:
            raise SpineConfigError("config exceeds GEOID code space")
        if -(-hi // self.obg_size) > 99:
            raise SpineConfigError("more than 99 optimized block groups in a tract")

    @property
    def block_range(self) -> tuple[int, int]:
        bpt = self.blocks_per_tract
        return (bpt, bpt) if isinstance(bpt, int) else bpt

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.blocks_per_tract, tuple):
            d["blocks_per_tract"] = list(self.blocks_per_tract)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SpineConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class ZeroBlock:
    geocode: str
    geoid: str


@dataclass
class Spine:
    units: dict[str, GeoUnit]
    roots: tuple[str, ...]
    digest: str
    config: SpineConfig = field(default_factory=SpineConfig)
    seed: int = 0
    zero_blocks: tuple[ZeroBlock, ...] = ()

    def __getitem__(self, geocode: str) -> GeoUnit:
        return self.units[geocode]

    def __contains__(self, geocode: str) -> bool:
        return geocode in self.units

    def level_units(self, level: GeoLevel) -> list[GeoUnit]:
        return [u for u in self.units.values() if u.level == level]

    @property
    def blocks(self) -> list[GeoUnit]:
        return self.level_units(GeoLevel.BLOCK)

    @cached_property
    def _block_sets(self) -> dict[str, frozenset[str]]:
        out: dict[str, frozenset[str]] = {}
        for g in reversed(list(self.walk())):
            u = self.units[g]
            out[g] = frozenset([g]) if u.level == GeoLevel.BLOCK else frozenset().union(*(out[c] for c in u.children))
        return out

    def block_set(self, geocode: str) -> frozenset[str]:
        """Geocodes of the populated blocks under ``geocode``."""
        return self._block_sets[geocode]

    @cached_property
    def by_geoid(self) -> dict[str, str]:
        """Block GEOID to block geocode."""
        return {u.tabulation_geoid: u.geocode for u in self.blocks}

    def walk(self) -> Iterator[str]:
        """Pre-order traversal: every parent precedes its children."""
        stack = list(reversed(self.roots))
        while stack:
            g = stack.pop()
            yield g
            stack.extend(reversed(self.units[g].children))

    def path(self, geocode: str) -> list[str]:
        """Root-to-unit chain of geocodes."""
        out = [geocode]
        while (p := self.units[out[-1]].parent_geocode) is not None:
            out.append(p)
        return out[::-1]

    def validate(self) -> None:
        for g, u in self.units.items():
            if u.parent_geocode is None:
                if g not in self.roots:
                    raise SpineConfigError(f"orphan unit {g}")
            else:
                parent = self.units[u.parent_geocode]
                if g not in parent.children or parent.aian != u.aian or parent.level + 1 != u.level:
                    raise SpineConfigError(f"inconsistent parent link {u.parent_geocode} -> {g}")
            if u.level != GeoLevel.BLOCK and not u.children:
                raise SpineConfigError(f"childless unit {g}")
            if u.level == GeoLevel.BLOCK and u.housing_units < 1:
                raise SpineConfigError(f"structural-zero block {g} on spine")
        if sum(1 for _ in self.walk()) != len(self.units):
            raise SpineConfigError("spine traversal does not reach every unit exactly once")


def _digest(config: SpineConfig, seed: int, geocodes: Iterable[str]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(config.to_dict(), sort_keys=True).encode())
    h.update(f"|{seed}|".encode())
    for g in geocodes:
        h.update(g.encode() + b"\n")
    return h.hexdigest()[:16]


def build_spine(config: SpineConfig, seed: int) -> Spine:
    """Generate a deterministic spine for ``(config, seed)``.

    Each block draws its housing-unit count and AI/AN membership; blocks with
    zero housing units are kept aside as structural zeros. Every tract, county
    and state is split by AI/AN membership, and each (flag, tract) unit's
    populated blocks are cut into OBGs of ``config.obg_size`` consecutive blocks.
    """
    rng = np.random.default_rng(seed)
    lo, hi = config.block_range
    populated: list[tuple[bool, str]] = []  # (aian, 15-char GEOID)
    housing: dict[str, int] = {}
    zeros: list[ZeroBlock] = []
    for s in range(config.states):
        st = f"{config.first_state_fips + s:02d}"
        for c in range(config.counties_per_state):
            county = st + f"{2 * c + 1:03d}"
            for t in range(config.tracts_per_county):
                tract = county + f"{t + 1:04d}00"
                n = int(rng.integers(lo, hi + 1))
                for j in range(n):
                    geoid = tract + f"{min(9, 1 + j // 10)}{j:03d}"
                    is_zero, hu, aian = rng.random() < config.zero_fraction, int(rng.integers(1, config.max_housing_units + 1)), rng.random() < config.aian_fraction
                    if is_zero:
                        zeros.append(ZeroBlock(make_geocode(aian, 0, geoid), geoid))
                    else:
                        populated.append((bool(aian), geoid))
                        housing[geoid] = hu
    if not populated:
        raise SpineConfigError("config yields an empty spine (every block is a structural zero)")

    units: dict[str, dict] = {}

    def add(geocode, level, aian, geoid, parent):
        if geocode not in units:
            units[geocode] = dict(geocode=geocode, level=level, aian=aian, tabulation_geoid=geoid,
                                  housing_units=0, parent_geocode=parent, children=[])
            if parent is not None:
                units[parent]["children"].append(geocode)
        return units[geocode]

    # group populated blocks by (flag, tract) preserving GEOID order
    by_tract: dict[tuple[bool, str], list[str]] = {}
    for aian, geoid in sorted(populated, key=lambda x: (x[1], x[0])):
        by_tract.setdefault((aian, geoid[:11]), []).append(geoid)
    for (aian, tract), geoids in sorted(by_tract.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        sg = make_geocode(aian, 0, tract[:2])
        cg = make_geocode(aian, 0, tract[:5])
        tg = make_geocode(aian, 0, tract)
        add(sg, GeoLevel.STATE, aian, tract[:2], None)
        add(cg, GeoLevel.COUNTY, aian, tract[:5], sg)
        add(tg, GeoLevel.TRACT, aian, tract, cg)
        for k, geoid in enumerate(geoids):
            ordinal = 1 + k // config.obg_size
            og = make_geocode(aian, ordinal, tract)
            add(og, GeoLevel.OBG, aian, tract, tg)
            bg = make_geocode(aian, ordinal, geoid)
            add(bg, GeoLevel.BLOCK, aian, geoid, og)
            for g in (sg, cg, tg, og, bg):
                units[g]["housing_units"] += housing[geoid]

    frozen = {
        g: GeoUnit(**{**u, "children": tuple(sorted(u["children"]))})
        for g, u in sorted(units.items())
    }
    roots = tuple(sorted(g for g, u in frozen.items() if u.parent_geocode is None))
    spine = Spine(frozen, roots, _digest(config, seed, frozen), config, seed, tuple(zeros))
    spine.validate()
    return spine


# --- auxiliary constraint files and BAFs ---------------------------------------

AUX_HEADER = ["geocode", "geoid", "housing_units"]
BAF_HEADER = ["block_geoid", "state_gc", "county_gc", "tract_gc", "obg_gc", "block_gc", "aian"]


def write_aux_blocks(spine: Spine, out_dir: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``blocks_aux.csv`` (populated blocks) and ``blocks_zero.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    aux, zero = out_dir / "blocks_aux.csv", out_dir / "blocks_zero.csv"
    with open(aux, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(AUX_HEADER)
        for u in spine.blocks:
            w.writerow([u.geocode, u.tabulation_geoid, u.housing_units])
    with open(zero, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(AUX_HEADER)
        for z in spine.zero_blocks:
            w.writerow([z.geocode, z.geoid, 0])
    return aux, zero


def read_aux_blocks(path: str | os.PathLike) -> list[tuple[str, str, int]]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != AUX_HEADER:
            raise ValueError(f"{path}: expected header {','.join(AUX_HEADER)}")
        rows = [(r["geocode"], r["geoid"], int(r["housing_units"])) for r in reader]
    for g, geoid, _ in rows:
        if split_geocode(g)[1] != geoid:
            raise ValueError(f"{path}: geocode {g} does not carry GEOID {geoid}")
    return rows


@dataclass(frozen=True)
class BlockAssignmentRow:
    block_geoid: str
    state_gc: str
    county_gc: str
    tract_gc: str
    obg_gc: str
    block_gc: str
    aian: bool

    @property
    def geocodes(self) -> tuple[str, str, str, str, str]:
        return (self.state_gc, self.county_gc, self.tract_gc, self.obg_gc, self.block_gc)

    def geocode_at(self, level: GeoLevel) -> str:
        return self.geocodes[int(level)]

    def tabulation_geoid(self, level: GeoLevel) -> str:
        return split_geocode(self.geocode_at(level))[1]


def build_baf(spine: Spine) -> list[BlockAssignmentRow]:
    rows = []
    for u in spine.blocks:
        path = spine.path(u.geocode)
        rows.append(BlockAssignmentRow(u.tabulation_geoid, *path, aian=u.aian))
    return rows


def write_baf(rows: Iterable[BlockAssignmentRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(BAF_HEADER)
        for r in rows:
            w.writerow([r.block_geoid, *r.geocodes, int(r.aian)])


def read_baf(path: str | os.PathLike) -> list[BlockAssignmentRow]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != BAF_HEADER:
            raise ValueError(f"{path}: expected header {','.join(BAF_HEADER)}")
        return [
            BlockAssignmentRow(r["block_geoid"], r["state_gc"], r["county_gc"], r["tract_gc"],
                               r["obg_gc"], r["block_gc"], r["aian"] == "1")
            for r in reader
        ]


# --- persistence ---------------------------------------------------------------

SPINE_FILE = "spine.json"


def save_spine(spine: Spine, out_dir: str | os.PathLike) -> None:
    """Write the spine's recipe plus its auxiliary files and BAF to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"config": spine.config.to_dict(), "seed": spine.seed, "digest": spine.digest}
    (out_dir / SPINE_FILE).write_text(json.dumps(meta, indent=2) + "\n")
    write_aux_blocks(spine, out_dir)
    write_baf(build_baf(spine), out_dir / "baf.csv")


def load_spine(spine_dir: str | os.PathLike) -> Spine:
    """Rebuild a saved spine; raises if the digest no longer matches."""
    meta = json.loads((Path(spine_dir) / SPINE_FILE).read_text())
    spine = build_spine(SpineConfig.from_dict(meta["config"]), int(meta["seed"]))
    if meta.get("digest") and meta["digest"] != spine.digest:
        raise SpineConfigError(f"spine digest mismatch in {spine_dir}: {meta['digest']} != {spine.digest}")
    return spine
