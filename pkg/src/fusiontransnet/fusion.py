"""Inter-modal fusion: global attention with ModeDistinctNet, local fusion at
multi-modal units, and the multiple-perspective interaction.

Every mode's embedding ``P_m`` has shape (B, N_m, d_p); its first feature half
is the origin role and the second half the destination role.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .intra import split_od, uniform_param
from .odgraph import Grid, MultiModalUnitIndex


@dataclass
class FusionLayout:
    """Static candidate sets derived from where each mode's nodes sit."""

    num_nodes: list[int]
    candidate_modes: list[list[int]]          # per mode m: the other modes, in index order
    candidate_mask: list[np.ndarray]          # per mode m: bool (N_m, sum of N_n over candidates)
    units: list[Grid]
    unit_selection: list[np.ndarray]          # per mode m: (K, N_m) one-hot rows, zero if absent
    unit_presence: np.ndarray                 # (K, M) bool

    @classmethod
    def build(
        cls,
        grids_per_mode: Sequence[Sequence[Grid]],
        unit_index: MultiModalUnitIndex,
        global_candidates: str = "mode_restricted",
        max_candidates: int | None = None,
        node_volume: Sequence[np.ndarray] | None = None,
    ) -> FusionLayout:
        num_modes = len(grids_per_mode)
        sizes = [len(g) for g in grids_per_mode]
        if any(n == 0 for n in sizes):
            raise ConfigError(f"every mode needs at least one node, got sizes {sizes}")
        cand_modes, masks = [], []
        for m in range(num_modes):
            others = [n for n in range(num_modes) if n != m]
            cand_modes.append(others)
            blocks = []
            for n in others:
                if global_candidates == "all_nodes":
                    allowed = np.ones(sizes[m], dtype=bool)
                else:
                    allowed = np.array(
                        [n in unit_index.modes_at(tuple(g)) for g in grids_per_mode[m]], dtype=bool
                    )
                blocks.append(np.repeat(allowed[:, None], sizes[n], axis=1))
            mask = np.concatenate(blocks, axis=1) if blocks else np.zeros((sizes[m], 0), bool)
            if max_candidates is not None and mask.shape[1] > max_candidates:
                volume = (
                    np.concatenate([np.asarray(node_volume[n], float) for n in others])
                    if node_volume is not None
                    else np.zeros(mask.shape[1])
                )
                # highest volume first, ties by candidate position
                order = np.lexsort((np.arange(volume.size), -volume))
                for i in range(mask.shape[0]):
                    keep = [j for j in order if mask[i, j]][:max_candidates]
                    row = np.zeros(mask.shape[1], bool)
                    row[keep] = True
                    mask[i] = row
            masks.append(mask)
        units = unit_index.units
        selection = []
        presence = np.zeros((len(units), num_modes), dtype=bool)
        for m in range(num_modes):
            sel = np.zeros((len(units), sizes[m]))
            for k, grid in enumerate(units):
                node = unit_index.node_at(grid, m)
                if node is not None:
                    sel[k, node] = 1.0
                    presence[k, m] = True
            selection.append(sel)
        return cls(sizes, cand_modes, masks, units, selection, presence)

    def block_offsets(self, m: int) -> dict[int, tuple[int, int]]:
        """Column range of each candidate mode inside mode ``m``'s score matrix."""
        out, start = {}, 0
        for n in self.candidate_modes[m]:
            out[n] = (start, start + self.num_nodes[n])
            start += self.num_nodes[n]
        return out


@dataclass
class GlobalFusionParams:
    W_g: T.Tensor      # d_p/2 x h, shared scoring projection
    a_g_O: T.Tensor    # 2h
    a_g_D: T.Tensor    # 2h
    W_g_O: T.Tensor    # d_p/2 x d_p/2, ModeDistinctNet difference projections
    W_g_D: T.Tensor

    @classmethod
    def init(cls, rng, d_p: int):
        half = d_p // 2
        return cls(
            W_g=uniform_param(rng, (half, half), half, "W_g"),
            a_g_O=uniform_param(rng, (2 * half,), 2 * half, "a_g_O"),
            a_g_D=uniform_param(rng, (2 * half,), 2 * half, "a_g_D"),
            W_g_O=uniform_param(rng, (half, half), half, "W_g_O"),
            W_g_D=uniform_param(rng, (half, half), half, "W_g_D"),
        )

    def named(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LocalFusionParams:
    W_l_O: T.Tensor
    W_l_D: T.Tensor
    a_l_O: T.Tensor
    a_l_D: T.Tensor

    @classmethod
    def init(cls, rng, d_p: int):
        half = d_p // 2
        return cls(
            W_l_O=uniform_param(rng, (half, half), half, "W_l_O"),
            W_l_D=uniform_param(rng, (half, half), half, "W_l_D"),
            a_l_O=uniform_param(rng, (2 * half,), 2 * half, "a_l_O"),
            a_l_D=uniform_param(rng, (2 * half,), 2 * half, "a_l_D"),
        )

    def named(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class InteractionParams:
    W_p1: T.Tensor     # d_p x d_p
    W_p2: T.Tensor
    W_p3: T.Tensor
    W_p4: T.Tensor
    W_f1: T.Tensor     # N_m x d_p gates
    W_f2: T.Tensor
    W_f3: T.Tensor

    @classmethod
    def init(cls, rng, num_nodes: int, d_p: int):
        proj = {f"W_p{i}": uniform_param(rng, (d_p, d_p), d_p, f"W_p{i}") for i in range(1, 5)}
        gates = {
            f"W_f{i}": uniform_param(rng, (num_nodes, d_p), d_p, f"W_f{i}") for i in range(1, 4)
        }
        # cross-view gates start closed: training begins from the intra-modal
        # embedding and opens them only where the fused views reduce the loss
        for name in ("W_f2", "W_f3"):
            gates[name].data[...] = 0.0
        return cls(**proj, **gates)

    def named(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _score_pairs(left, right, vector, slope: float) -> T.Tensor:
    """leaky_relu(a . [x_i || y_j]) for every (i, j); left (B, I, h), right (B, J, h)."""
    h = left.shape[-1]
    a1 = T.reshape(T.slice(vector, 0, 0, h), (h, 1))
    a2 = T.reshape(T.slice(vector, 0, h, 2 * h), (h, 1))
    s_left = T.matmul(left, a1)                       # (B, I, 1)
    s_right = T.transpose(T.matmul(right, a2))         # (B, 1, J)
    return T.leaky_relu(T.add(s_left, s_right), slope)


def global_attention(
    p_all: Sequence[T.Tensor], params: GlobalFusionParams, layout: FusionLayout, slope: float = 0.01
) -> list[tuple[T.Tensor, T.Tensor]]:
    """Per mode ``m``: origin and destination score matrices of shape (B, N_m, C_m).

    Columns run over the candidate modes' nodes in mode order (see
    :meth:`FusionLayout.block_offsets`); each row is softmax-normalised over
    its allowed candidates and is all-zero when it has none.
    """
    halves = [split_od(p) for p in p_all]
    out = []
    for m, (p_o, p_d) in enumerate(halves):
        others = layout.candidate_modes[m]
        if not others:
            b = p_o.shape[0]
            zero = T.Tensor(np.zeros((b, layout.num_nodes[m], 0)))
            out.append((zero, zero))
            continue
        mask = layout.candidate_mask[m]
        pair = []
        for role, vector in ((0, params.a_g_O), (1, params.a_g_D)):
            own = T.matmul(halves[m][role], params.W_g)
            cand = T.concat([T.matmul(halves[n][role], params.W_g) for n in others], axis=1)
            logits = _score_pairs(own, cand, vector, slope)
            pair.append(T.softmax(logits, axis=-1, mask=mask))
        out.append(tuple(pair))
    return out


def _weighted_abs_diff(scores, own, cand) -> T.Tensor:
    """sum_j scores[i, j] * |own_i - cand_j|, own (B, I, h), cand (B, J, h)."""
    return T.weighted_abs_diff(scores, own, cand)


def mode_distinct_aggregate(
    scores: Sequence[tuple[T.Tensor, T.Tensor]],
    p_all: Sequence[T.Tensor],
    params: GlobalFusionParams,
    layout: FusionLayout,
) -> list[T.Tensor]:
    """Attention-weighted absolute embedding differences, ``c_m = [c_O || c_D]``."""
    halves = [split_od(p) for p in p_all]
    out = []
    for m in range(len(p_all)):
        others = layout.candidate_modes[m]
        parts = []
        for role, weight in ((0, params.W_g_O), (1, params.W_g_D)):
            own = T.matmul(halves[m][role], weight)
            if not others:
                parts.append(T.scale(own, 0.0))
                continue
            cand = T.concat([T.matmul(halves[n][role], weight) for n in others], axis=1)
            parts.append(_weighted_abs_diff(scores[m][role], own, cand))
        out.append(T.concat(parts, axis=-1))
    return out


def local_attention(
    p_all: Sequence[T.Tensor], params: LocalFusionParams, layout: FusionLayout, slope: float = 0.01
) -> tuple[T.Tensor, T.Tensor]:
    """Per-unit mode-to-mode scores, each of shape (B, K, M, M); rows over present modes sum to 1."""
    gathered = _gather_units(p_all, params, layout)
    mask = layout.unit_presence[:, :, None] & layout.unit_presence[:, None, :]
    out = []
    for role, vector in ((0, params.a_l_O), (1, params.a_l_D)):
        x = gathered[role][0]                         # (B, K, M, h)
        b, k, m, h = x.shape
        flat = T.reshape(x, (b * k, m, h))
        logits = T.reshape(_score_pairs(flat, flat, vector, slope), (b, k, m, m))
        out.append(T.softmax(logits, axis=-1, mask=mask[None]))
    return out[0], out[1]


def _gather_units(p_all, params: LocalFusionParams, layout: FusionLayout):
    """Projected embeddings at each unit: for each role, (same-role, cross-role) (B, K, M, h)."""
    halves = [split_od(p) for p in p_all]
    result = []
    for role, weight in ((0, params.W_l_O), (1, params.W_l_D)):
        same, cross = [], []
        for m, (p_o, p_d) in enumerate(halves):
            sel = layout.unit_selection[m]
            mine, other = (p_o, p_d) if role == 0 else (p_d, p_o)
            same.append(T.matmul(sel, T.matmul(mine, weight)))
            cross.append(T.matmul(sel, T.matmul(other, weight)))
        result.append((T.stack(same, axis=2), T.stack(cross, axis=2)))
    return result


def local_fusion(
    p_all: Sequence[T.Tensor],
    params: LocalFusionParams,
    layout: FusionLayout,
    slope: float = 0.01,
    return_scores: bool = False,
):
    """``S_m = [S_O || S_D]`` per mode; nodes outside multi-modal units get zeros."""
    b = p_all[0].shape[0]
    half = p_all[0].shape[-1] // 2
    if not layout.units:
        zeros = [T.Tensor(np.zeros((b, n, 2 * half))) for n in layout.num_nodes]
        return (zeros, None) if return_scores else zeros
    gathered = _gather_units(p_all, params, layout)
    scores = local_attention(p_all, params, layout, slope)
    per_role = []
    for role in (0, 1):
        same, cross = gathered[role]
        per_role.append(T.weighted_abs_diff(scores[role], same, cross))
    out = []
    for m, sel in enumerate(layout.unit_selection):
        parts = [
            T.matmul(sel.T, T.reshape(T.slice(s, 2, m, m + 1), (b, len(layout.units), half)))
            for s in per_role
        ]
        out.append(T.concat(parts, axis=-1))
    return (out, scores) if return_scores else out


def multiple_perspective_interaction(
    p, c, s, params: InteractionParams, use_global: bool = True, use_local: bool = True
) -> T.Tensor:
    """U = W_f1 * P + W_f2 * (c E_g^T) + W_f3 * (S E_l^T) with sigmoid cross-view gates.

    A disabled view contributes no addend at all, so its parameters receive no gradient.
    """
    p = T.as_tensor(p)
    for name, view in (("global", c), ("local", s)):
        if view is not None and T.as_tensor(view).shape != p.shape:
            raise DimensionError(f"{name} view shape {T.as_tensor(view).shape} != P shape {p.shape}")
    u = T.hadamard(params.W_f1, p)
    if use_global and c is not None:
        e_g = T.sigmoid(T.einsum("bnp,bnq->bpq", T.matmul(p, params.W_p1), T.matmul(c, params.W_p2)))
        u = T.add(u, T.hadamard(params.W_f2, T.einsum("bnq,bpq->bnp", c, e_g)))
    if use_local and s is not None:
        e_l = T.sigmoid(T.einsum("bnp,bnq->bpq", T.matmul(p, params.W_p3), T.matmul(s, params.W_p4)))
        u = T.add(u, T.hadamard(params.W_f3, T.einsum("bnq,bpq->bnp", s, e_l)))
    return u


def concat_views(p, c, s, params: InteractionParams | None = None) -> T.Tensor:
    """Interaction-free combination ``[P_O || c_O || S_O || P_D || c_D || S_D]``.

    With ``params`` each view is first scaled by its per-node weights
    (``W_f1 * P``, ``W_f2 * c``, ``W_f3 * S``), the same weights the interaction
    block applies, so only the cross-view terms and the additive merge differ.
    """
    views = []
    for view, gate in zip((p, c, s), ("W_f1", "W_f2", "W_f3")):
        if view is None:
            continue
        views.append(T.hadamard(getattr(params, gate), view) if params is not None else T.as_tensor(view))
    halves = [split_od(v) for v in views]
    return T.concat([h[0] for h in halves] + [h[1] for h in halves], axis=-1)
