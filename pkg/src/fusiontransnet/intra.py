"""Intra-modal encoder: OD-adaptive graph convolutions plus temporal attention.

Shapes use ``B`` for the batch, ``L`` for the window, ``N`` for the mode's
node count. All functions accept an optional leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError
from .odgraph import adaptive_graph


def uniform_param(rng: np.random.Generator, shape, fan_in: int, name: str) -> T.Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return T.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


@dataclass
class IntraModalParams:
    input_proj: T.Tensor      # k x d_c
    E_o: T.Tensor             # N x d_e
    E_d: T.Tensor             # N x d_e
    W_flow_O: T.Tensor        # d_c/2 x d_e/2, one per adjacency channel and role
    b_flow_O: T.Tensor        # N
    W_adapt_O: T.Tensor
    b_adapt_O: T.Tensor
    W_flow_D: T.Tensor
    b_flow_D: T.Tensor
    W_adapt_D: T.Tensor
    b_adapt_D: T.Tensor
    W_e0: T.Tensor            # L x L
    W_e1: T.Tensor            # N
    W_e2: T.Tensor            # d_e x N
    W_e3: T.Tensor            # d_e
    b_e: T.Tensor             # L
    W_geo: T.Tensor           # d_c x d_e/2, plain GCN used when O/D roles are merged
    b_geo: T.Tensor           # N

    @classmethod
    def init(cls, rng, num_nodes: int, num_features: int, d_c: int, d_e: int, window: int):
        if d_c % 2 or d_e % 2:
            raise ConfigError(f"d_c and d_e must be even, got {d_c}, {d_e}")
        n, hc, he = num_nodes, d_c // 2, d_e // 2
        shapes = {
            "input_proj": ((num_features, d_c), num_features),
            "E_o": ((n, d_e), d_e),
            "E_d": ((n, d_e), d_e),
            "W_flow_O": ((hc, he), hc), "b_flow_O": ((n,), hc),
            "W_adapt_O": ((hc, he), hc), "b_adapt_O": ((n,), hc),
            "W_flow_D": ((hc, he), hc), "b_flow_D": ((n,), hc),
            "W_adapt_D": ((hc, he), hc), "b_adapt_D": ((n,), hc),
            "W_e0": ((window, window), window),
            "W_e1": ((n,), n),
            "W_e2": ((d_e, n), d_e),
            "W_e3": ((d_e,), d_e),
            "b_e": ((window,), window),
            "W_geo": ((d_c, he), d_c), "b_geo": ((n,), d_c),
        }
        return cls(**{k: uniform_param(rng, s, f, k) for k, (s, f) in shapes.items()})

    def named(self) -> dict[str, T.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def embed_features(x, input_proj) -> T.Tensor:
    """H = relu(X @ input_proj)."""
    x, input_proj = T.as_tensor(x), T.as_tensor(input_proj)
    if x.shape[-1] != input_proj.shape[0]:
        raise ConfigError(
            f"feature width {x.shape[-1]} does not match input projection {input_proj.shape}"
        )
    return T.relu(T.matmul(x, input_proj))


def split_od(h) -> tuple[T.Tensor, T.Tensor]:
    """First half of the feature columns is the origin role, second half the destination role."""
    h = T.as_tensor(h)
    width = h.shape[-1]
    if width % 2:
        raise ConfigError(f"cannot split odd feature width {width} into origin/destination halves")
    return T.slice(h, -1, 0, width // 2), T.slice(h, -1, width // 2, width)


def _graph_conv(adj, h, weight, bias) -> T.Tensor:
    # relu(A^T H W + b), b is one scalar per node
    propagated = T.matmul(T.transpose(adj), h)
    return T.relu(T.add(T.matmul(propagated, weight), T.reshape(bias, (-1, 1))))


def od_gcn_step(h_o, h_d, flow_adj, adaptive_adj, params: IntraModalParams) -> T.Tensor:
    """Origin and destination convolutions over the flow graph and the adaptive graph.

    Returns ``[Z_O || Z_D]`` with ``d_e`` features per node.
    """
    flow_adj, adaptive_adj = T.as_tensor(flow_adj), T.as_tensor(adaptive_adj)
    for adj in (flow_adj, adaptive_adj):
        if np.isnan(adj.data).any():
            raise NumericError("od_gcn_step: adjacency contains NaN")
        if adj.shape[-1] != adj.shape[-2] or adj.shape[-1] != T.as_tensor(h_o).shape[-2]:
            raise DimensionError(f"adjacency {adj.shape} does not match node features")
    z_o = T.add(
        _graph_conv(flow_adj, h_o, params.W_flow_O, params.b_flow_O),
        _graph_conv(adaptive_adj, h_o, params.W_adapt_O, params.b_adapt_O),
    )
    z_d = T.add(
        _graph_conv(flow_adj, h_d, params.W_flow_D, params.b_flow_D),
        _graph_conv(adaptive_adj, h_d, params.W_adapt_D, params.b_adapt_D),
    )
    return T.concat([z_o, z_d], axis=-1)


def geo_gcn_step(h, geo_adj, params: IntraModalParams) -> T.Tensor:
    """Single-role GCN over the geographic grid graph; both halves of the output coincide."""
    z = _graph_conv(geo_adj, h, params.W_geo, params.b_geo)
    return T.concat([z, z], axis=-1)


def temporal_scores(z_seq, params: IntraModalParams) -> T.Tensor:
    """Row-softmaxed L x L time dependency matrix for ``z_seq`` of shape (B, L, N, d_e)."""
    node_mix = T.einsum("blnd,n->bld", z_seq, params.W_e1)
    left = T.einsum("bld,dn->bln", node_mix, params.W_e2)
    right = T.einsum("blnd,d->bln", z_seq, params.W_e3)
    pair = T.einsum("bln,bkn->blk", left, right)
    gated = T.sigmoid(T.add(pair, params.b_e))
    dependency = T.einsum("lk,bkj->blj", params.W_e0, gated)
    return T.softmax(dependency, axis=-1)


def flatten_time(weighted) -> T.Tensor:
    """(B, L, N, d_e) -> (B, N, L*d_e), origin block first, each block time-major."""
    b, length, n, d_e = weighted.shape
    blocks = []
    for part in split_od(weighted):
        per_node = T.transpose(part, (0, 2, 1, 3))
        blocks.append(T.reshape(per_node, (b, n, length * (d_e // 2))))
    return T.concat(blocks, axis=-1)


def temporal_attention(z_seq, params: IntraModalParams, return_scores: bool = False):
    """Re-weight the L slices by learned time dependencies and flatten per node.

    Accepts (L, N, d_e) or (B, L, N, d_e); returns P of shape (..., N, L*d_e).
    """
    z_seq = T.as_tensor(z_seq)
    batched = z_seq.ndim == 4
    if not batched:
        z_seq = T.reshape(z_seq, (1,) + z_seq.shape)
    if z_seq.ndim != 4 or z_seq.shape[1] == 0:
        raise ConfigError(f"temporal_attention expects (B, L, N, d_e), got {z_seq.shape}")
    scores = temporal_scores(z_seq, params)
    weighted = T.einsum("blk,bknd->blnd", scores, z_seq)
    p = flatten_time(weighted)
    if not batched:
        p = T.reshape(p, p.shape[1:])
        scores = T.reshape(scores, scores.shape[1:])
    return (p, scores) if return_scores else p


def encode_mode(features, flow_adj, params: IntraModalParams, geo_adj=None, merge_roles=False):
    """Run the whole intra-modal block for one mode.

    ``features``: (B, L, N, k); ``flow_adj``: (B, L, N, N) row-normalised flows.
    Returns ``(P, temporal_scores)``.
    """
    h = embed_features(features, params.input_proj)
    if merge_roles:
        z_seq = geo_gcn_step(h, geo_adj, params)
    else:
        a_s = adaptive_graph(params.E_o, params.E_d)
        h_o, h_d = split_od(h)
        z_seq = od_gcn_step(h_o, h_d, flow_adj, a_s, params)
    return temporal_attention(z_seq, params, return_scores=True)
