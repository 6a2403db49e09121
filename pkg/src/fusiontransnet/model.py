"""Full network assembly: parameters, batches and the forward pass."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import MultiModalDataset
from .decoder import balanced_multimodal_loss, mode_loss, predict_od
from .errors import ConfigError, DataError
from .fusion import (
    FusionLayout,
    GlobalFusionParams,
    InteractionParams,
    LocalFusionParams,
    concat_views,
    global_attention,
    local_fusion,
    mode_distinct_aggregate,
    multiple_perspective_interaction,
)
from .intra import IntraModalParams, encode_mode, uniform_param
from .odgraph import Grid, ModeId, build_unit_index, geographic_adjacency, normalize_flows

ModelState = dict  # hierarchical name -> Tensor


@dataclass
class ModeSpec:
    name: str
    grids: list[Grid]
    num_features: int = 2

    @property
    def num_nodes(self) -> int:
        return len(self.grids)


@dataclass
class Batch:
    """Per-mode arrays for ``B`` windows: features (B, L, N, k), adjacency (B, L, N, N), target (B, N, N)."""

    features: list[np.ndarray]
    adjacency: list[np.ndarray]
    target: list[np.ndarray]
    target_steps: np.ndarray

    @property
    def size(self) -> int:
        return len(self.target_steps)


@dataclass
class ForwardOutput:
    predictions: list[T.Tensor]
    embeddings: list[T.Tensor]
    intra: list[T.Tensor]
    temporal_scores: list[T.Tensor] = field(default_factory=list)
    global_scores: list | None = None
    local_scores: tuple | None = None


class WindowSampler:
    """Cuts (window, target) pairs out of a raw and a normalised copy of one dataset."""

    def __init__(self, raw: MultiModalDataset, scaled: MultiModalDataset, window: int):
        self.window = window
        self.features = [s.features for s in scaled.series]
        self.targets = [s.flows for s in scaled.series]
        self.adjacency = [normalize_flows(s.flows) for s in raw.series]

    def batch(self, steps: Sequence[int]) -> Batch:
        steps = np.asarray(list(steps), dtype=np.int64)
        if steps.size == 0:
            raise DataError("cannot build an empty batch")
        if steps.min() < self.window:
            raise DataError(f"target step {steps.min()} has no full window of {self.window}")
        idx = steps[:, None] - self.window + np.arange(self.window)[None, :]
        return Batch(
            [f[idx] for f in self.features],
            [a[idx] for a in self.adjacency],
            [t[steps] for t in self.targets],
            steps,
        )


class FusionTransNet:
    """Intra-modal encoders per mode, shared fusion parameters, one bilinear decoder per mode."""

    def __init__(
        self,
        config: ModelConfig,
        modes: Sequence[ModeSpec],
        grid_shape: Grid | None = None,
        node_volume: Sequence[np.ndarray] | None = None,
    ):
        if not modes:
            raise ConfigError("at least one mode is required")
        self.config = config
        self.modes = list(modes)
        self.grid_shape = grid_shape
        self.node_volume = None if node_volume is None else [np.asarray(v, dtype=np.float64) for v in node_volume]
        ids = [ModeId(m.name, i) for i, m in enumerate(self.modes)]
        carriers = [_GridCarrier(i, m.grids) for i, m in zip(ids, self.modes)]
        self.unit_index = build_unit_index(carriers, grid_shape)
        self.layout = FusionLayout.build(
            [m.grids for m in self.modes], self.unit_index, config.global_candidates,
            config.max_candidates, node_volume,
        )
        self.geo_adjacency = [geographic_adjacency(m.grids) for m in self.modes]
        rng = np.random.default_rng(config.seed)
        d_p = config.d_p
        self.intra = [
            IntraModalParams.init(rng, m.num_nodes, m.num_features, config.d_c, config.d_e, config.window)
            for m in self.modes
        ]
        self.global_params = GlobalFusionParams.init(rng, d_p)
        self.local_params = LocalFusionParams.init(rng, d_p)
        self.interaction = [InteractionParams.init(rng, m.num_nodes, d_p) for m in self.modes]
        self.decoder = [
            uniform_param(rng, (m.num_nodes, m.num_nodes), m.num_nodes, "W") for m in self.modes
        ]
        self.params: ModelState = {}
        for m, spec in enumerate(self.modes):
            for k, v in self.intra[m].named().items():
                self.params[f"{spec.name}.intra.{k}"] = v
            for k, v in self.interaction[m].named().items():
                self.params[f"{spec.name}.interaction.{k}"] = v
            self.params[f"{spec.name}.decoder.W"] = self.decoder[m]
        for k, v in self.global_params.named().items():
            self.params[f"global.{k}"] = v
        for k, v in self.local_params.named().items():
            self.params[f"local.{k}"] = v
        for name, t in self.params.items():
            t.name = name

    # ------------------------------------------------------------ structure
    @property
    def use_global(self) -> bool:
        return self.config.ablation not in ("no_global", "single") and len(self.modes) > 1

    @property
    def use_local(self) -> bool:
        return self.config.ablation not in ("no_local", "single") and len(self.modes) > 1

    def parameter_group(self, name: str) -> str:
        """Coarse group of a parameter: intra, global, local, interaction or decoder."""
        parts = name.split(".")
        return parts[0] if parts[0] in ("global", "local") else parts[1]

    # ------------------------------------------------------------ forward
    def forward(self, batch: Batch) -> ForwardOutput:
        cfg = self.config
        merge = cfg.ablation == "no_od_split"
        p_all, temporal = [], []
        for m in range(len(self.modes)):
            p, scores = encode_mode(
                batch.features[m], batch.adjacency[m], self.intra[m],
                geo_adj=self.geo_adjacency[m], merge_roles=merge,
            )
            p_all.append(p)
            temporal.append(scores)
        c_all = s_all = g_scores = l_scores = None
        if self.use_global:
            g_scores = global_attention(p_all, self.global_params, self.layout, cfg.leaky_slope)
            c_all = mode_distinct_aggregate(g_scores, p_all, self.global_params, self.layout)
        if self.use_local:
            s_all, l_scores = local_fusion(
                p_all, self.local_params, self.layout, cfg.leaky_slope, return_scores=True
            )
        embeddings, preds = [], []
        for m in range(len(self.modes)):
            c = c_all[m] if c_all is not None else None
            s = s_all[m] if s_all is not None else None
            if cfg.ablation == "no_mpi":
                u = concat_views(p_all[m], c, s, self.interaction[m])
            else:
                u = multiple_perspective_interaction(
                    p_all[m], c, s, self.interaction[m], self.use_global, self.use_local
                )
            embeddings.append(u)
            preds.append(predict_od(u, self.decoder[m]))
        return ForwardOutput(preds, embeddings, p_all, temporal, g_scores, l_scores)

    def loss(self, batch: Batch, output: ForwardOutput | None = None) -> T.Tensor:
        output = output or self.forward(batch)
        losses = [mode_loss(p, t) for p, t in zip(output.predictions, batch.target)]
        return balanced_multimodal_loss(
            losses, batch.target, [self.config.eta_for(m.name) for m in self.modes],
            self.config.zero_target, [m.name for m in self.modes],
        )

    def predict(self, batch: Batch) -> list[np.ndarray]:
        return [p.data for p in self.forward(batch).predictions]

    # ------------------------------------------------------------ state
    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in arrays.items():
            if v.shape != self.params[k].shape:
                raise ConfigError(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    @classmethod
    def for_dataset(
        cls, config: ModelConfig, dataset: MultiModalDataset, train_steps: range | None = None
    ) -> FusionTransNet:
        sel = slice(None) if train_steps is None else slice(train_steps.start, train_steps.stop)
        specs = [ModeSpec(s.mode.name, list(s.grid_of_node), s.features.shape[-1]) for s in dataset.series]
        volume = [s.flows[sel].sum(axis=(0, 2)) for s in dataset.series]
        return cls(config, specs, dataset.grid_shape, volume)


@dataclass
class _GridCarrier:
    mode: ModeId
    grid_of_node: list[Grid]
