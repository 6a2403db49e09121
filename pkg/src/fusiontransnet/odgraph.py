"""Per-mode OD graph data model and the two adjacency constructions."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import DataError, DimensionError, IngestionError

Grid = tuple[int, int]


@dataclass(frozen=True)
class ModeId:
    name: str
    index: int


@dataclass
class ODGraphSnapshot:
    """One mode at one step. Edges are implicit: (i, j) is an edge iff flow[i, j] > 0."""

    mode: ModeId
    time_index: int
    flow: np.ndarray
    features: np.ndarray
    grid_of_node: list[Grid]

    def __post_init__(self):
        n = self.flow.shape[0]
        if self.flow.shape != (n, n):
            raise DimensionError(f"flow must be square, got {self.flow.shape}")
        if (self.flow < 0).any():
            raise DataError(f"negative flow in mode {self.mode.name} at t={self.time_index}")
        if self.features.shape[0] != n:
            raise DimensionError(f"features have {self.features.shape[0]} rows for {n} nodes")
        if len(self.grid_of_node) != n:
            raise DimensionError(f"grid map has {len(self.grid_of_node)} entries for {n} nodes")

    def has_edge(self, i: int, j: int) -> bool:
        return bool(self.flow[i, j] > 0)


@dataclass
class ODGraphSequence:
    """``L`` consecutive snapshots of one mode and the OD matrix of the following step."""

    mode: ModeId
    snapshots: list[ODGraphSnapshot]
    target: np.ndarray

    def __post_init__(self):
        steps = [s.time_index for s in self.snapshots]
        if any(b - a != 1 for a, b in zip(steps, steps[1:])):
            raise DataError(f"snapshots are not consecutive: {steps}")
        grids = {tuple(s.grid_of_node) for s in self.snapshots}
        if len(grids) > 1:
            raise DataError("snapshots disagree on the node-to-grid mapping")

    @property
    def grid_of_node(self) -> list[Grid]:
        return self.snapshots[0].grid_of_node


@dataclass
class ModeSeries:
    """Full timeline of one mode: ``flows[t]`` is the N x N OD matrix at step t."""

    mode: ModeId
    flows: np.ndarray
    features: np.ndarray
    grid_of_node: list[Grid]
    feature_names: list[str] = field(default_factory=lambda: ["inflow", "outflow"])

    @property
    def num_nodes(self) -> int:
        return self.flows.shape[1]

    @property
    def num_steps(self) -> int:
        return self.flows.shape[0]

    def snapshot(self, t: int) -> ODGraphSnapshot:
        return ODGraphSnapshot(self.mode, t, self.flows[t], self.features[t], self.grid_of_node)

    def window(self, target_step: int, length: int) -> ODGraphSequence:
        if target_step - length < 0 or target_step >= self.num_steps:
            raise DataError(f"no window of length {length} ends before step {target_step}")
        snaps = [self.snapshot(t) for t in range(target_step - length, target_step)]
        return ODGraphSequence(self.mode, snaps, self.flows[target_step])


@dataclass
class MultiModalUnitIndex:
    """For each grid, the (mode index, node index) pairs located there."""

    members: dict[Grid, list[tuple[int, int]]]

    @property
    def units(self) -> list[Grid]:
        """Grids served by at least two distinct modes, in sorted order."""
        return sorted(g for g, pairs in self.members.items() if len({m for m, _ in pairs}) >= 2)

    def modes_at(self, grid: Grid) -> list[int]:
        return sorted({m for m, _ in self.members.get(grid, [])})

    def node_at(self, grid: Grid, mode: int) -> int | None:
        for m, node in self.members.get(grid, []):
            if m == mode:
                return node
        return None


def normalize_flows(flow) -> np.ndarray:
    """Divide every row by its total; rows without departures stay zero."""
    flow = np.asarray(flow, dtype=np.float64)
    if (flow < 0).any():
        raise DataError("normalize_flows: negative flow entry")
    totals = flow.sum(axis=-1, keepdims=True)
    return np.divide(flow, totals, out=np.zeros_like(flow), where=totals > 0)


def adaptive_graph(e_origin, e_dest) -> T.Tensor:
    """Learned row-stochastic adjacency softmax(relu(E_o E_d^T))."""
    e_origin, e_dest = T.as_tensor(e_origin), T.as_tensor(e_dest)
    if e_origin.shape[-1] != e_dest.shape[-1]:
        raise DimensionError(
            f"adaptive_graph: embedding widths differ ({e_origin.shape} vs {e_dest.shape})"
        )
    return T.softmax_rows(T.relu(T.matmul(e_origin, T.transpose(e_dest))))


def build_unit_index(
    sequences: Iterable, grid_shape: Grid | None = None
) -> MultiModalUnitIndex:
    """Co-location index over anything exposing ``mode`` and ``grid_of_node``.

    When ``grid_shape`` is given, grids outside ``[0, P) x [0, Q)`` are rejected.
    """
    members: dict[Grid, list[tuple[int, int]]] = {}
    for seq in sequences:
        for node, grid in enumerate(seq.grid_of_node):
            grid = (int(grid[0]), int(grid[1]))
            if grid_shape is not None and not (
                0 <= grid[0] < grid_shape[0] and 0 <= grid[1] < grid_shape[1]
            ):
                raise IngestionError(
                    f"mode {seq.mode.name} node {node} maps to unknown grid {grid}"
                )
            members.setdefault(grid, []).append((seq.mode.index, node))
    return MultiModalUnitIndex(members)


def geographic_adjacency(grids: Sequence[Grid]) -> np.ndarray:
    """Row-normalised 8-neighbourhood adjacency (with self loops) between grid cells."""
    coords = np.asarray(grids, dtype=np.int64).reshape(-1, 2)
    gap = np.abs(coords[:, None, :] - coords[None, :, :]).max(axis=-1)
    return normalize_flows((gap <= 1).astype(np.float64))
