"""
Dilation-rate lattices for poly-scale convolution.

A layer with Cout filters of Cin/g kernels each is described by a
Cout × (Cin/g) integer matrix D, one dilation rate per kernel.  The
constructors here build every lattice the library supports:

  uniform           every kernel shares one rate (d=1 is vanilla conv)
  psconv            a pattern {d1..dt} tiled along input channels, each
                    successive filter shifted by one input channel
  psconv_grouped    the psconv lattice repeated inside every group
  depthwise         one pattern laid across t single-channel groups
  input_axis_only   the tiled pattern without the shift (rows identical)
  output_axis_only  the pattern along output channels (columns identical)

Conventions
-----------
* Slots are 0-indexed here; user-facing text uses {d1, ..., dt}.
* Shift direction: D(c, k) = pattern[(k - c) mod t], so row c+1 is row c
  rotated right by one and D(c+1, (k+1) mod Cin) == D(c, k).
* When t does not divide the channel count the last cycle is truncated.
  Only ``rearrangement`` insists on full cycles.

Rearrangement
-------------
Sorting channels by residue class (index mod t) turns a psconv lattice into
a t × t block matrix whose block (q, r) holds pattern[(r - q) mod t].  The
returned plan carries both permutations: the output permutation of one
layer is the input permutation of the next, so chained layers can stay in
rearranged order.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

logger = logging.getLogger(__name__)

DEFAULT_PATTERN: Tuple[int, ...] = (1, 2, 1, 4)

PATTERN_PRESETS: Dict[str, Tuple[int, ...]] = {
    "default": DEFAULT_PATTERN,
    "1-2-1-1": (1, 2, 1, 1),
    "1-4-1-1": (1, 4, 1, 1),
    "1-2-1-2": (1, 2, 1, 2),
    "1-2-1-4": (1, 2, 1, 4),
    "1-2-4-8": (1, 2, 4, 8),
}


class LatticeError(ValueError):
    """Raised for invalid patterns, shapes, or non-rearrangeable lattices."""


class Construction(str, enum.Enum):
    UNIFORM = "uniform"
    PSCONV = "psconv"
    PSCONV_GROUPED = "psconv_grouped"
    DEPTHWISE = "depthwise"
    INPUT_AXIS_ONLY = "input_axis_only"
    OUTPUT_AXIS_ONLY = "output_axis_only"


@dataclass(frozen=True)
class DilationPattern:
    rates: Tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.rates:
            raise LatticeError("a dilation pattern needs at least one rate")
        if any(int(r) != r or r < 1 for r in self.rates):
            raise LatticeError(f"dilation rates must be integers >= 1, got {self.rates}")
        object.__setattr__(self, "rates", tuple(int(r) for r in self.rates))

    @property
    def t(self) -> int:
        """Cyclic interval."""
        return len(self.rates)

    def __getitem__(self, slot: int) -> int:
        return self.rates[slot % self.t]

    def __str__(self) -> str:
        return ",".join(str(r) for r in self.rates)

    @classmethod
    def parse(cls, text: str) -> "DilationPattern":
        """Parse ``"1,2,1,4"`` or a preset name such as ``"default"``."""
        if not isinstance(text, str):
            raise LatticeError(f"dilation pattern must be text, got {type(text).__name__}")
        text = text.strip()
        if text in PATTERN_PRESETS:
            return cls(PATTERN_PRESETS[text])
        try:
            rates = tuple(int(p) for p in text.split(",") if p.strip())
        except ValueError as exc:
            raise LatticeError(f"cannot parse dilation pattern {text!r}") from exc
        return cls(rates)

    @classmethod
    def default(cls) -> "DilationPattern":
        return cls(DEFAULT_PATTERN)


def interval_ablation_pattern(t: int) -> DilationPattern:
    """Length-t cycle with the second slot at rate 2 and the rest at 1."""
    if t < 1:
        raise LatticeError(f"cyclic interval must be >= 1, got {t}")
    if t == 1:
        return DilationPattern((1,))
    return DilationPattern(tuple(2 if slot == 1 else 1 for slot in range(t)))


@dataclass(frozen=True)
class DilationMatrix:
    entries: npt.NDArray[np.int64] = field(repr=False)
    groups: int
    construction: Construction
    pattern: DilationPattern

    def __post_init__(self) -> None:
        arr = np.array(self.entries, dtype=np.int64)
        if arr.ndim != 2:
            raise LatticeError(f"dilation matrix must be 2-D, got shape {arr.shape}")
        if arr.size and arr.min() < 1:
            raise LatticeError("dilation rates must be >= 1")
        if self.groups < 1 or arr.shape[0] % self.groups:
            raise LatticeError(f"{arr.shape[0]} rows cannot be split into {self.groups} groups")
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.entries.shape  # type: ignore[return-value]

    @property
    def cout(self) -> int:
        return self.entries.shape[0]

    @property
    def cin_per_group(self) -> int:
        return self.entries.shape[1]

    @property
    def cout_per_group(self) -> int:
        return self.cout // self.groups

    def distinct_rates(self) -> Tuple[int, ...]:
        return tuple(int(r) for r in np.unique(self.entries))

    def group_block(self, group: int) -> npt.NDArray[np.int64]:
        rows = self.cout_per_group
        return self.entries[group * rows:(group + 1) * rows]

    def to_csv(self) -> str:
        return "\n".join(",".join(str(int(v)) for v in row) for row in self.entries) + "\n"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DilationMatrix):
            return NotImplemented
        return (
            self.groups == other.groups
            and self.shape == other.shape
            and bool(np.array_equal(self.entries, other.entries))
        )

    def __hash__(self) -> int:
        return hash((self.groups, self.shape, self.entries.tobytes()))


def _as_pattern(pattern: DilationPattern | Sequence[int]) -> DilationPattern:
    return pattern if isinstance(pattern, DilationPattern) else DilationPattern(tuple(pattern))


def _check_positive(**counts: int) -> None:
    for name, value in counts.items():
        if value < 1:
            raise LatticeError(f"{name} must be >= 1, got {value}")


def _split_groups(cout: int, cin: int, groups: int) -> Tuple[int, int]:
    _check_positive(groups=groups)
    if cin % groups or cout % groups:
        raise LatticeError(f"groups={groups} must divide both Cin={cin} and Cout={cout}")
    return cout // groups, cin // groups


def _shifted_lattice(cout: int, cin: int, pattern: DilationPattern) -> np.ndarray:
    c = np.arange(cout)[:, None]
    k = np.arange(cin)[None, :]
    return np.asarray(pattern.rates, dtype=np.int64)[(k - c) % pattern.t]


# ── constructors ──────────────────────────────────────────────────────────────

def build_uniform(cout: int, cin: int, d: int, groups: int = 1) -> DilationMatrix:
    _check_positive(Cout=cout, Cin=cin)
    if d < 1:
        raise LatticeError(f"dilation must be >= 1, got {d}")
    _, cin_pg = _split_groups(cout, cin, groups)
    return DilationMatrix(
        np.full((cout, cin_pg), d, dtype=np.int64), groups, Construction.UNIFORM, DilationPattern((d,)),
    )


def build_psconv(cout: int, cin: int, pattern: DilationPattern | Sequence[int]) -> DilationMatrix:
    """Cyclic lattice with D(c, k) = pattern[(k - c) mod t]."""
    pattern = _as_pattern(pattern)
    _check_positive(Cout=cout, Cin=cin)
    return DilationMatrix(_shifted_lattice(cout, cin, pattern), 1, Construction.PSCONV, pattern)


def build_psconv_grouped(
    cout: int, cin: int, groups: int, pattern: DilationPattern | Sequence[int],
) -> DilationMatrix:
    """The psconv lattice of one group, repeated for each of *groups* groups."""
    pattern = _as_pattern(pattern)
    _check_positive(Cout=cout, Cin=cin)
    cout_pg, cin_pg = _split_groups(cout, cin, groups)
    if groups == 1:
        return build_psconv(cout, cin, pattern)
    if cin_pg == 1 and pattern.t > 1:
        raise LatticeError(
            "one input channel per group cannot hold a cyclic pattern; "
            "use build_depthwise for depthwise layers"
        )
    block = _shifted_lattice(cout_pg, cin_pg, pattern)
    return DilationMatrix(np.tile(block, (groups, 1)), groups, Construction.PSCONV_GROUPED, pattern)


def build_depthwise(c: int, pattern: DilationPattern | Sequence[int]) -> DilationMatrix:
    """C×1 lattice laying one pattern across t single-channel groups."""
    pattern = _as_pattern(pattern)
    _check_positive(C=c)
    column = np.asarray(pattern.rates, dtype=np.int64)[np.arange(c) % pattern.t]
    return DilationMatrix(column[:, None], c, Construction.DEPTHWISE, pattern)


def build_axis_variant(
    cout: int,
    cin: int,
    pattern: DilationPattern | Sequence[int],
    axis: str,
    groups: int = 1,
) -> DilationMatrix:
    """Ablation lattices varying the rate along a single axis.

    ``input_only`` drops the shift (every row is the tiled pattern);
    ``output_only`` varies the rate per filter only (D(c, k) = pattern[c mod t]).
    """
    pattern = _as_pattern(pattern)
    _check_positive(Cout=cout, Cin=cin)
    cout_pg, cin_pg = _split_groups(cout, cin, groups)
    rates = np.asarray(pattern.rates, dtype=np.int64)
    if axis == "input_only":
        block = np.tile(rates[np.arange(cin_pg) % pattern.t], (cout_pg, 1))
        tag = Construction.INPUT_AXIS_ONLY
    elif axis == "output_only":
        block = np.tile(rates[np.arange(cout_pg) % pattern.t][:, None], (1, cin_pg))
        tag = Construction.OUTPUT_AXIS_ONLY
    else:
        raise LatticeError(f"axis must be 'input_only' or 'output_only', got {axis!r}")
    return DilationMatrix(np.tile(block, (groups, 1)), groups, tag, pattern)


def build_lattice(
    construction: str,
    cout: int,
    cin: int,
    pattern: DilationPattern | Sequence[int],
    groups: int = 1,
) -> DilationMatrix:
    """Dispatch on a construction name (the CLI's ``--construction`` values)."""
    pattern = _as_pattern(pattern)
    if construction == Construction.UNIFORM.value:
        if len(set(pattern.rates)) != 1:
            raise LatticeError(f"uniform construction needs a single rate, got {pattern}")
        return build_uniform(cout, cin, pattern.rates[0], groups)
    if construction in (Construction.PSCONV.value, Construction.PSCONV_GROUPED.value):
        return build_psconv_grouped(cout, cin, groups, pattern)
    if construction == Construction.DEPTHWISE.value:
        if cin != cout:
            raise LatticeError("depthwise lattices need Cin == Cout")
        return build_depthwise(cout, pattern)
    if construction == Construction.INPUT_AXIS_ONLY.value:
        return build_axis_variant(cout, cin, pattern, "input_only", groups)
    if construction == Construction.OUTPUT_AXIS_ONLY.value:
        return build_axis_variant(cout, cin, pattern, "output_only", groups)
    raise LatticeError(f"unknown construction {construction!r}")


# ── rearrangement ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class BlockLayout:
    """t × t block structure of a rearranged lattice (identical in every group)."""

    t: int
    block_rows: int       # output channels per residue class
    block_cols: int       # input channels per residue class
    values: Tuple[Tuple[int, ...], ...]  # values[q][r], constant inside the block

    def value(self, q: int, r: int) -> int:
        return self.values[q][r]


@dataclass(frozen=True)
class RearrangementPlan:
    """Channel permutations (gather order: permuted[j] = natural[perm[j]])."""

    perm_in: npt.NDArray[np.int64] = field(repr=False)
    perm_out: npt.NDArray[np.int64] = field(repr=False)
    perm_in_local: npt.NDArray[np.int64] = field(repr=False)
    perm_out_local: npt.NDArray[np.int64] = field(repr=False)
    groups: int
    layout: BlockLayout

    @property
    def inverse_perm_in(self) -> np.ndarray:
        return np.argsort(self.perm_in)

    @property
    def inverse_perm_out(self) -> np.ndarray:
        return np.argsort(self.perm_out)


def _residue_order(n: int, t: int) -> np.ndarray:
    return np.argsort(np.arange(n) % t, kind="stable").astype(np.int64)


def _global_perm(local: np.ndarray, groups: int) -> np.ndarray:
    size = len(local)
    return np.concatenate([local + g * size for g in range(groups)]).astype(np.int64)


def rearrangement(D: DilationMatrix, t: Optional[int] = None) -> RearrangementPlan:
    """Group channels by residue class so D becomes block-constant.

    *t* defaults to the construction pattern's cyclic interval.  Raises
    LatticeError when t does not divide the per-group channel counts or
    when the permuted lattice is not block-constant.
    """
    t = D.pattern.t if t is None else t
    if len(set(D.pattern.rates)) == 1 and t == D.pattern.t:
        t = 1
    cout_pg, cin_pg = D.cout_per_group, D.cin_per_group
    if cin_pg % t or cout_pg % t:
        raise LatticeError(
            f"rearrangement needs t={t} to divide Cin/g={cin_pg} and Cout/g={cout_pg}"
        )

    perm_in_local = _residue_order(cin_pg, t)
    perm_out_local = _residue_order(cout_pg, t)
    bo, bi = cout_pg // t, cin_pg // t

    reference = D.group_block(0)
    values = []
    for g in range(D.groups):
        block = D.group_block(g)
        if not np.array_equal(block, reference):
            raise LatticeError("rearrangement needs the same lattice in every group")
    permuted = reference[perm_out_local][:, perm_in_local]
    for q in range(t):
        row = []
        for r in range(t):
            cell = permuted[q * bo:(q + 1) * bo, r * bi:(r + 1) * bi]
            if cell.size and not np.all(cell == cell.flat[0]):
                raise LatticeError(f"block ({q}, {r}) is not constant after rearrangement")
            row.append(int(cell.flat[0]))
        values.append(tuple(row))

    layout = BlockLayout(t=t, block_rows=bo, block_cols=bi, values=tuple(values))
    logger.debug("Rearranged %dx%d lattice into %dx%d blocks", D.cout, cin_pg, t, t)
    return RearrangementPlan(
        perm_in=_global_perm(perm_in_local, D.groups),
        perm_out=_global_perm(perm_out_local, D.groups),
        perm_in_local=perm_in_local,
        perm_out_local=perm_out_local,
        groups=D.groups,
        layout=layout,
    )


def apply_rearrangement(D: DilationMatrix, plan: RearrangementPlan) -> np.ndarray:
    """D with rows and columns permuted into block order."""
    return D.entries[plan.perm_out][:, plan.perm_in_local]


def undo_rearrangement(permuted: np.ndarray, plan: RearrangementPlan) -> np.ndarray:
    return permuted[plan.inverse_perm_out][:, np.argsort(plan.perm_in_local)]


def plans_chainable(first: RearrangementPlan, second: RearrangementPlan) -> bool:
    """True when *first*'s rearranged outputs can feed *second* directly."""
    return (
        first.perm_out.shape == second.perm_in.shape
        and bool(np.array_equal(first.perm_out, second.perm_in))
    )
