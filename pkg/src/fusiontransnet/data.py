"""Synthetic multimodal OD data, dataset files, max-min scaling and chronological splits."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, IngestionError
from .odgraph import Grid, ModeId, ModeSeries

FORMAT_VERSION = 1


@dataclass
class MultiModalDataset:
    grid_shape: Grid
    series: list[ModeSeries]
    steps_per_day: int = 24

    @property
    def num_steps(self) -> int:
        return self.series[0].num_steps if self.series else 0

    @property
    def mode_names(self) -> list[str]:
        return [s.mode.name for s in self.series]

    def mode(self, name: str) -> ModeSeries:
        for s in self.series:
            if s.mode.name == name:
                return s
        raise KeyError(name)

    def subset(self, names: Sequence[str]) -> MultiModalDataset:
        """Keep only the named modes, re-indexed from 0."""
        picked = []
        for i, name in enumerate(names):
            src = self.mode(name)
            picked.append(
                ModeSeries(ModeId(name, i), src.flows, src.features, list(src.grid_of_node), list(src.feature_names))
            )
        return MultiModalDataset(self.grid_shape, picked, self.steps_per_day)


# ---------------------------------------------------------------- synthetic generator

@dataclass
class SyntheticConfig:
    grid: Grid = (6, 6)
    modes: list[tuple[str, float]] = field(
        default_factory=lambda: [("taxi", 0.9), ("bus", 0.7), ("bike", 0.6)]
    )
    days: int = 30
    steps_per_day: int = 24
    base_intensity: float = 30.0
    peak_amplitude: float = 0.8
    cross_modal_coupling: float = 0.8
    noise_std: float = 0.1
    latent_std: float = 0.5
    latent_persistence: float = 0.9
    city_share: float = 0.5
    mode_lag: int = 1
    seed: int = 0

    def __post_init__(self):
        self.grid = (int(self.grid[0]), int(self.grid[1]))
        self.validate()

    def validate(self) -> None:
        p, q = self.grid
        if p < 1 or q < 1 or p * q < 4:
            raise ConfigError(f"grid {self.grid} must have at least 4 cells")
        if not self.modes:
            raise ConfigError("at least one mode is required")
        names = [name for name, _ in self.modes]
        if len(set(names)) != len(names):
            raise ConfigError(f"mode names must be unique: {names}")
        for name, frac in self.modes:
            if not 0.0 < frac <= 1.0:
                raise ConfigError(f"served fraction of {name} must lie in (0, 1], got {frac}")
        if self.days < 1 or self.steps_per_day < 1:
            raise ConfigError("days and steps_per_day must be positive")
        if self.base_intensity < 0 or self.peak_amplitude < 0 or self.noise_std < 0:
            raise ConfigError("base_intensity, peak_amplitude and noise_std must be nonnegative")
        if not 0.0 <= self.cross_modal_coupling <= 1.0:
            raise ConfigError(f"cross_modal_coupling must lie in [0, 1], got {self.cross_modal_coupling}")
        if not 0.0 <= self.latent_persistence < 1.0:
            raise ConfigError("latent_persistence must lie in [0, 1)")
        if not 0.0 <= self.city_share <= 1.0:
            raise ConfigError("city_share must lie in [0, 1]")
        if self.mode_lag < 0:
            raise ConfigError("mode_lag must be nonnegative")

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> SyntheticConfig:
        """Keys: grid = 6x6, modes = taxi:0.9,bus:0.7, days, steps_per_day, ... ."""
        kwargs: dict = {}
        try:
            if "grid" in values:
                p, q = values["grid"].lower().split("x")
                kwargs["grid"] = (int(p), int(q))
            if "modes" in values:
                kwargs["modes"] = [
                    (name.strip(), float(frac))
                    for name, frac in (item.split(":") for item in values["modes"].split(","))
                ]
            for key in ("days", "steps_per_day", "seed", "mode_lag"):
                if key in values:
                    kwargs[key] = int(values[key])
            for key in ("base_intensity", "peak_amplitude", "cross_modal_coupling", "noise_std",
                        "latent_std", "latent_persistence", "city_share"):
                if key in values:
                    kwargs[key] = float(values[key])
        except ValueError as exc:
            raise ConfigError(f"bad synthetic config value: {exc}") from None
        return cls(**kwargs)


def _ar1(rng: np.random.Generator, rho: float, steps: int, size: int) -> np.ndarray:
    """Stationary unit-variance AR(1) paths, shape (steps, size)."""
    out = np.empty((steps, size))
    out[0] = rng.standard_normal(size)
    innovation = np.sqrt(1.0 - rho * rho)
    for t in range(1, steps):
        out[t] = rho * out[t - 1] + innovation * rng.standard_normal(size)
    return out


def mode_profile(mode_index: int, steps: int, steps_per_day: int) -> np.ndarray:
    """Diurnal profile of a mode: harmonic ``mode_index + 1`` of the day, peaking at 08:00.

    Distinct harmonics are orthogonal over whole days, so modes share no
    diurnal signal unless the coupling factor introduces one.
    """
    harmonic = mode_index + 1
    hour = (np.arange(steps) % steps_per_day) / steps_per_day
    peak = 8.0 / 24.0
    return np.cos(2.0 * np.pi * harmonic * (hour - peak))


def generate_synthetic(config: SyntheticConfig) -> MultiModalDataset:
    """Multimodal OD flows from latent grid demand.

    Each grid has a residential share, an origin mass and a destination mass.
    Trips i -> j of mode m at step t are Poisson with rate

        base * scale_m * O_i * D_j * exp(-dist_ij / 2) * exp(a_im(t) + a_jm(t))
             * max(0, 1 + peak_amplitude * w_ij * h_m(t))

    where ``w_ij`` favours residential -> commercial trips in a mode's morning
    phase (``h_m > 0``) and the reverse in its evening phase, and
    ``a_gm = latent_std * (c * s_g + (1 - c) * u_gm)`` mixes a factor shared
    by all modes with a mode-specific one through the coupling ``c``. The
    shared factor blends a city-wide path and a per-grid path (``city_share``)
    and reaches mode ``m`` ``m * mode_lag`` steps late, so demand shocks show
    up in one mode before spilling over into the next.
    """
    rng = np.random.default_rng(config.seed)
    p, q = config.grid
    grids = [(a, b) for a in range(p) for b in range(q)]
    num_grids = len(grids)
    coords = np.asarray(grids, dtype=float)
    residential = rng.uniform(0.0, 1.0, num_grids)
    origin_mass = rng.lognormal(0.0, 0.4, num_grids)
    dest_mass = rng.lognormal(0.0, 0.4, num_grids)
    dist = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    decay = np.exp(-dist / 2.0)
    np.fill_diagonal(decay, 0.25)  # trips inside one cell are rarer than to its neighbours
    direction = (1.0 + 2.0 * (residential[:, None] - residential[None, :])) / 3.0

    served = []
    for name, frac in config.modes:
        count = min(num_grids, max(2, int(round(frac * num_grids))))
        served.append(np.sort(rng.choice(num_grids, size=count, replace=False)))
    if len(served) >= 2:
        counts = np.zeros(num_grids, int)
        for s in served:
            counts[s] += 1
        if not (counts >= 2).any():
            served[1] = np.sort(np.unique(np.append(served[1], served[0][0])))

    steps = config.days * config.steps_per_day
    rho, c = config.latent_persistence, config.cross_modal_coupling
    lag = config.mode_lag
    horizon = steps + lag * (len(config.modes) - 1)
    shared = (
        np.sqrt(config.city_share) * _ar1(rng, rho, horizon, 1)
        + np.sqrt(1.0 - config.city_share) * _ar1(rng, rho, horizon, num_grids)
    )
    scales = (1.0, 2.0, 0.5)
    series = []
    for m, (name, _) in enumerate(config.modes):
        own = _ar1(rng, rho, steps, num_grids)
        start = lag * (len(config.modes) - 1 - m)
        activity = config.latent_std * (c * shared[start:start + steps] + (1.0 - c) * own)
        nodes = served[m]
        a = activity[:, nodes]
        profile = mode_profile(m, steps, config.steps_per_day)
        static = (
            config.base_intensity * scales[m % len(scales)]
            * origin_mass[nodes][:, None] * dest_mass[nodes][None, :] * decay[np.ix_(nodes, nodes)]
        )
        w = direction[np.ix_(nodes, nodes)]
        rate = static[None] * np.exp(a[:, :, None] + a[:, None, :])
        rate *= np.clip(1.0 + config.peak_amplitude * w[None] * profile[:, None, None], 0.0, None)
        if config.noise_std > 0:
            rate *= np.exp(config.noise_std * rng.standard_normal(rate.shape) - 0.5 * config.noise_std ** 2)
        flows = rng.poisson(rate).astype(np.float64)
        series.append(
            ModeSeries(ModeId(name, m), flows, node_features(flows), [grids[g] for g in nodes])
        )
    return MultiModalDataset(config.grid, series, config.steps_per_day)


def node_features(flows: np.ndarray) -> np.ndarray:
    """(T, N, 2) features: inflow (column sums) and outflow (row sums) at each step."""
    return np.stack([flows.sum(axis=1), flows.sum(axis=2)], axis=-1)


# ---------------------------------------------------------------- normalisation

@dataclass
class ModeScale:
    od_min: float
    od_max: float
    feat_min: np.ndarray
    feat_max: np.ndarray


@dataclass
class NormalizationState:
    modes: dict[str, ModeScale]

    def to_dict(self) -> dict:
        return {
            name: {"od_min": s.od_min, "od_max": s.od_max,
                   "feat_min": s.feat_min.tolist(), "feat_max": s.feat_max.tolist()}
            for name, s in self.modes.items()
        }

    @classmethod
    def from_dict(cls, raw: dict) -> NormalizationState:
        return cls({
            name: ModeScale(float(v["od_min"]), float(v["od_max"]),
                            np.asarray(v["feat_min"], float), np.asarray(v["feat_max"], float))
            for name, v in raw.items()
        })


def _scale(x: np.ndarray, lo, hi) -> np.ndarray:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    span = hi - lo
    return np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)


def _unscale(x: np.ndarray, lo, hi) -> np.ndarray:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return np.where(hi > lo, x * (hi - lo) + lo, lo)


def fit_normalization(dataset: MultiModalDataset, steps: range | None = None) -> NormalizationState:
    sel = slice(None) if steps is None else slice(steps.start, steps.stop)
    modes = {}
    for s in dataset.series:
        flows, feats = s.flows[sel], s.features[sel]
        if flows.size == 0:
            raise DataError(f"cannot fit normalisation on an empty slice of mode {s.mode.name}")
        modes[s.mode.name] = ModeScale(
            float(flows.min()), float(flows.max()),
            feats.min(axis=(0, 1)), feats.max(axis=(0, 1)),
        )
    return NormalizationState(modes)


def max_min_normalize(
    dataset: MultiModalDataset,
    state: NormalizationState | None = None,
    fit_steps: range | None = None,
) -> tuple[MultiModalDataset, NormalizationState]:
    """Scale OD entries and features with per-mode extrema.

    Without ``state`` the extrema are fitted on ``fit_steps`` (default: all
    steps). Constant data maps to 0.
    """
    if state is None:
        state = fit_normalization(dataset, fit_steps)
    out = []
    for s in dataset.series:
        sc = state.modes[s.mode.name]
        out.append(ModeSeries(
            s.mode,
            _scale(s.flows, sc.od_min, sc.od_max),
            _scale(s.features, sc.feat_min, sc.feat_max),
            list(s.grid_of_node), list(s.feature_names),
        ))
    return MultiModalDataset(dataset.grid_shape, out, dataset.steps_per_day), state


def denormalize_od(values: np.ndarray, state: NormalizationState, mode: str) -> np.ndarray:
    sc = state.modes[mode]
    return _unscale(np.asarray(values, float), sc.od_min, sc.od_max)


def denormalize_dataset(dataset: MultiModalDataset, state: NormalizationState) -> MultiModalDataset:
    out = []
    for s in dataset.series:
        sc = state.modes[s.mode.name]
        out.append(ModeSeries(
            s.mode, _unscale(s.flows, sc.od_min, sc.od_max),
            _unscale(s.features, sc.feat_min, sc.feat_max),
            list(s.grid_of_node), list(s.feature_names),
        ))
    return MultiModalDataset(dataset.grid_shape, out, dataset.steps_per_day)


# ---------------------------------------------------------------- splitting

@dataclass(frozen=True)
class Splits:
    train: range
    val: range
    test: range

    def targets(self, name: str, window: int) -> range:
        """Target steps whose whole input window lies inside the split."""
        steps = getattr(self, name)
        if len(steps) == 0:
            return range(0)
        return range(steps.start + window, steps.stop)


def temporal_split(
    num_steps: int, fractions: Sequence[float] = (0.7, 0.2, 0.1), window: int = 1
) -> Splits:
    """Contiguous chronological step ranges in train/val/test order.

    Each non-empty range must hold at least one full window plus its target.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must be three nonnegative values summing to 1, got {fractions}")
    cut1 = int(round(fractions[0] * num_steps))
    cut2 = int(round((fractions[0] + fractions[1]) * num_steps))
    parts = Splits(range(0, cut1), range(cut1, cut2), range(cut2, num_steps))
    for name in ("train", "val", "test"):
        steps = getattr(parts, name)
        if 0 < len(steps) <= window:
            raise DataError(
                f"{name} split has {len(steps)} steps, fewer than one window of {window} plus a target"
            )
    if len(parts.train) == 0:
        raise DataError("training split is empty")
    return parts


# ---------------------------------------------------------------- files

def _fmt(x) -> str:
    return repr(float(x)) if float(x) != int(x) else str(int(x))


def save_dataset(dataset: MultiModalDataset, path: str | Path) -> None:
    """Write the directory layout read by :func:`load_dataset`."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = [
        f"version = {FORMAT_VERSION}",
        f"modes = {','.join(dataset.mode_names)}",
        f"steps = {dataset.num_steps}",
        f"grid = {dataset.grid_shape[0]}x{dataset.grid_shape[1]}",
        f"steps_per_day = {dataset.steps_per_day}",
    ]
    (root / "manifest").write_text("\n".join(lines) + "\n")
    for s in dataset.series:
        d = root / s.mode.name
        d.mkdir(exist_ok=True)
        t_idx, i_idx, j_idx = np.nonzero(s.flows)
        rows = ["t,i,j,count"]
        rows += [f"{t},{i},{j},{_fmt(v)}" for t, i, j, v in zip(t_idx, i_idx, j_idx, s.flows[t_idx, i_idx, j_idx])]
        (d / "flows.csv").write_text("\n".join(rows) + "\n")
        header = ["t", "node"] + list(s.feature_names)
        rows = [",".join(header)]
        for t in range(s.num_steps):
            for node in range(s.num_nodes):
                rows.append(",".join([str(t), str(node)] + [_fmt(v) for v in s.features[t, node]]))
        (d / "features.csv").write_text("\n".join(rows) + "\n")
        rows = ["node,p,q"] + [f"{n},{g[0]},{g[1]}" for n, g in enumerate(s.grid_of_node)]
        (d / "gridmap.csv").write_text("\n".join(rows) + "\n")


def _read_manifest(root: Path) -> dict[str, str]:
    path = root / "manifest"
    if not path.is_file():
        raise IngestionError(f"{path}: manifest file missing")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise IngestionError(f"{path}:{lineno}: expected key = value")
        k, v = (x.strip() for x in line.split("=", 1))
        out[k] = v
    for key in ("modes", "steps"):
        if key not in out:
            raise IngestionError(f"{path}: missing key {key!r}")
    return out


def _read_csv(path: Path, expected: Sequence[str], allow_extra: bool = False) -> tuple[list[str], np.ndarray]:
    if not path.is_file():
        raise IngestionError(f"{path}: file missing")
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    if header[: len(expected)] != list(expected) or (not allow_extra and len(header) != len(expected)):
        raise IngestionError(f"{path}, row 1: header {header} does not match {list(expected)}")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise IngestionError(f"{path}: ragged or non-numeric rows ({exc})") from None
    if data.size == 0:
        data = np.zeros((0, len(header)))
    if data.shape[1] != len(header):
        raise IngestionError(f"{path}: rows have {data.shape[1]} columns, header has {len(header)}")
    return header, data


def _fail(path: Path, row: int, rule: str):
    # row numbers are 1-based file lines, header included
    raise IngestionError(f"{path}, row {row + 2}: {rule}")


def load_dataset(path: str | Path) -> MultiModalDataset:
    """Read and validate a dataset directory."""
    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"{root}: dataset directory not found")
    manifest = _read_manifest(root)
    names = [n.strip() for n in manifest["modes"].split(",") if n.strip()]
    try:
        steps = int(manifest["steps"])
        grid_raw = manifest.get("grid")
        steps_per_day = int(manifest.get("steps_per_day", 24))
    except ValueError as exc:
        raise IngestionError(f"{root / 'manifest'}: {exc}") from None
    series = []
    max_p = max_q = 0
    for m, name in enumerate(names):
        d = root / name
        _, gm = _read_csv(d / "gridmap.csv", ["node", "p", "q"])
        n = gm.shape[0]
        if n == 0:
            raise IngestionError(f"{d / 'gridmap.csv'}: mode has no nodes")
        for r, row in enumerate(gm):
            if row[0] != r:
                _fail(d / "gridmap.csv", r, f"node ids must be 0..N-1 in order, found {row[0]:g}")
            if row[1] < 0 or row[2] < 0 or row[1] != int(row[1]) or row[2] != int(row[2]):
                _fail(d / "gridmap.csv", r, "grid coordinates must be nonnegative integers")
        grids = [(int(p), int(q)) for _, p, q in gm]
        if len(set(grids)) != n:
            raise IngestionError(f"{d / 'gridmap.csv'}: two nodes share a grid cell")
        max_p, max_q = max(max_p, max(g[0] for g in grids)), max(max_q, max(g[1] for g in grids))

        _, fl = _read_csv(d / "flows.csv", ["t", "i", "j", "count"])
        t, i, j, v = fl.T
        checks = [
            (~((t >= 0) & (t < steps) & (t == np.floor(t))), lambda r: f"time index {t[r]:g} outside 0..{steps - 1}"),
            (~((i >= 0) & (i < n) & (j >= 0) & (j < n) & (i == np.floor(i)) & (j == np.floor(j))),
             lambda r: f"node pair ({i[r]:g}, {j[r]:g}) outside 0..{n - 1}"),
            (~(np.isfinite(v) & (v >= 0)), lambda r: f"flow count {v[r]:g} must be finite and nonnegative"),
        ]
        for bad, rule in checks:
            if bad.any():
                r = int(np.argmax(bad))
                _fail(d / "flows.csv", r, rule(r))
        flat = (t.astype(np.int64) * n + i.astype(np.int64)) * n + j.astype(np.int64)
        uniq, first = np.unique(flat, return_index=True)
        if uniq.size != flat.size:
            dup = np.setdiff1d(np.arange(flat.size), first)[0]
            _fail(d / "flows.csv", int(dup), f"duplicate entry for t={t[dup]:g}, i={i[dup]:g}, j={j[dup]:g}")
        flows = np.zeros(steps * n * n)
        flows[flat] = v
        flows = flows.reshape(steps, n, n)

        header, ft = _read_csv(d / "features.csv", ["t", "node", "inflow", "outflow"], allow_extra=True)
        if ft.shape[0] != steps * n:
            raise IngestionError(
                f"{d / 'features.csv'}: expected {steps * n} rows (steps x nodes), found {ft.shape[0]}"
            )
        expected_t = np.repeat(np.arange(steps), n)
        expected_node = np.tile(np.arange(n), steps)
        bad = np.nonzero((ft[:, 0] != expected_t) | (ft[:, 1] != expected_node))[0]
        if bad.size:
            r = int(bad[0])
            _fail(d / "features.csv", r,
                  f"timestamps must be consecutive: expected t={expected_t[r]}, node={expected_node[r]}")
        if not np.isfinite(ft[:, 2:]).all():
            r = int(np.nonzero(~np.isfinite(ft[:, 2:]).all(axis=1))[0][0])
            _fail(d / "features.csv", r, "feature values must be finite")
        features = ft[:, 2:].reshape(steps, n, -1)
        series.append(ModeSeries(ModeId(name, m), flows, features, grids, header[2:]))
    if grid_raw:
        try:
            p, q = (int(x) for x in grid_raw.lower().split("x"))
        except ValueError:
            raise IngestionError(f"{root / 'manifest'}: bad grid {grid_raw!r}") from None
        if max_p >= p or max_q >= q:
            raise IngestionError(f"{root}: a node maps to a grid outside {p}x{q}")
    else:
        p, q = max_p + 1, max_q + 1
    return MultiModalDataset((p, q), series, steps_per_day)


def copy_dataset(dataset: MultiModalDataset) -> MultiModalDataset:
    return copy.deepcopy(dataset)
