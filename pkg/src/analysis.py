"""
Scale-allocation dissection of poly-scale weights.

For every dilation rate d in a layer the proxy is

    proxy(d) = max over kernels (c, k) with D(c, k) = d of mean_ij |G[c, k, i, j]|

and the layer's proportions are the proxies normalised to sum to one.
Repeated pattern slots with the same rate (the two 1s in {1, 2, 1, 4}) form
a single class.  "Corresponding kernels" are all cells of the lattice with
that rate, across both channel axes.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

import numpy as np

from .kernel_lattice import DilationMatrix, DilationPattern, build_psconv_grouped
from .tensor_core import ShapeError, as_tensor4

logger = logging.getLogger(__name__)

CSV_FIELDS = ("layer_index", "stage", "dilation", "proportion")

_LAYER_INDEX_RE = re.compile(r"(\d+)")


class AllocationError(ValueError):
    """Raised for degenerate layers, missing layers, or mismatched archives."""


def scale_allocation(G: np.ndarray, D: DilationMatrix) -> Dict[int, float]:
    """Normalised per-rate proxy, keyed by dilation rate in ascending order."""
    G = as_tensor4(G, "weights")
    if G.shape[:2] != D.shape:
        raise ShapeError(f"weights {G.shape} do not match dilation matrix {D.shape}")
    kernel_means = np.abs(G).mean(axis=(2, 3))
    proxies = {d: float(kernel_means[D.entries == d].max()) for d in D.distinct_rates()}
    total = sum(proxies.values())
    if not total > 0:
        raise AllocationError("all kernel weights are zero; proportions are undefined")
    return {d: p / total for d, p in proxies.items()}


@dataclass(frozen=True)
class LayerLattice:
    """Which archive tensor a lattice applies to, plus ordering metadata."""

    name: str
    lattice: DilationMatrix
    stage: str = ""
    block_index: int = 0


@dataclass
class LayerAllocation:
    layer_index: int
    name: str
    stage: str
    block_index: int
    proportions: Dict[int, float]


@dataclass
class AllocationReport:
    layers: List[LayerAllocation] = field(default_factory=list)

    def rows(self) -> List[dict]:
        """Plot-ready long-format rows, one per (layer, dilation)."""
        return [
            {"layer_index": layer.layer_index, "stage": layer.stage,
             "dilation": d, "proportion": p}
            for layer in self.layers
            for d, p in layer.proportions.items()
        ]

    def column(self, dilation: int) -> List[float]:
        return [layer.proportions.get(dilation, 0.0) for layer in self.layers]

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "layers": [
                {"layer_index": layer.layer_index, "name": layer.name, "stage": layer.stage,
                 "block_index": layer.block_index,
                 "proportions": {str(d): p for d, p in layer.proportions.items()}}
                for layer in self.layers
            ],
            "rows": self.rows(),
        }


def allocation_report(
    archive: Mapping[str, np.ndarray], lattices: Sequence[LayerLattice],
) -> AllocationReport:
    """Per-layer proportions for every entry of *lattices*, in order."""
    if not archive:
        raise AllocationError("weights archive is empty")
    if not lattices:
        raise AllocationError("no layers selected for allocation analysis")
    report = AllocationReport()
    for idx, spec in enumerate(lattices):
        if spec.name not in archive:
            raise AllocationError(f"layer {spec.name!r} is missing from the archive")
        try:
            proportions = scale_allocation(archive[spec.name], spec.lattice)
        except ShapeError as exc:
            raise AllocationError(f"layer {spec.name!r}: {exc}") from exc
        report.layers.append(LayerAllocation(idx, spec.name, spec.stage, spec.block_index, proportions))
    logger.info("Scale allocation computed for %d layers", len(report.layers))
    return report


def lattices_for_archive(
    archive: Mapping[str, np.ndarray],
    pattern: DilationPattern,
    groups: int = 1,
) -> List[LayerLattice]:
    """psconv lattices for every spatial (K > 1) 4-D filter bank in *archive*.

    The stage is the name's first dotted component; the block index is the
    first integer found in the name after it, or the running count.
    """
    specs: List[LayerLattice] = []
    for name, tensor in archive.items():
        if tensor.ndim != 4 or tensor.shape[2] <= 1:
            continue
        cout, cin_pg = tensor.shape[:2]
        if cout % groups:
            raise AllocationError(f"layer {name!r}: {cout} filters cannot form {groups} groups")
        stage, _, rest = name.partition(".")
        match = _LAYER_INDEX_RE.search(rest)
        block = int(match.group(1)) if match else len(specs)
        specs.append(LayerLattice(
            name=name,
            lattice=build_psconv_grouped(cout, cin_pg * groups, groups, pattern),
            stage=stage,
            block_index=block,
        ))
    return specs
