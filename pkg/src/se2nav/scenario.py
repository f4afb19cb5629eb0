"""Scenario configuration: one YAML file per closed-loop run, one per benchmark batch.

Every key is optional; missing keys take the defaults documented in
``DEFAULT_SCENARIO_YAML``.  Unknown keys are rejected so typos surface early.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .flatness import RobotParams
from .search import SearchConfig
from .terrain import AnalyticTerrain, HeightField, InvalidParameterError, SensorModel, TerrainParams, generate_terrain
from .traversability import AssessmentParams

DEFAULT_SCENARIO_YAML = """\
name: scenario            # used for output file names
seed: 0                   # drives sensor noise, pose noise and (unless terrain.seed is set) the terrain
start: [0.0, 0.0, 0.0]    # x [m], y [m], heading [rad]
goal: [8.0, 0.0, 0.0]
terrain:
  type: procedural        # procedural | analytic | file
  seed: null              # defaults to the scenario seed
  width: 40.0             # [m]
  height: 40.0
  resolution: 0.1
  amplitude: 1.0          # procedural: value-noise amplitude [m]
  wavelength: 8.0
  octaves: 4
  persistence: 0.45
  kind: value             # procedural: value | sinusoid; analytic: flat | incline | sinusoid | cap
  rocks: 0
  rock_radius: 0.5
  rock_height: 0.8
  rock_positions: []      # explicit rock centres [[x, y], ...]
  # analytic extras: pitch, roll, radius; file: path (npz with heights, resolution, origin)
sensor:
  max_range: 12.0
  azimuth_step_deg: 2.0
  elevation_min_deg: -30.0
  elevation_max_deg: 0.0
  n_elevations: 12
  noise_std: 0.01         # per-axis range noise [m]
  mount_height: 0.8       # sensor above the body origin [m]
pose_noise:
  position_std: 0.0       # [m]
  rotation_std: 0.0       # [rad]
map:
  size: 32.0              # side of the robot-centric elevation map [m]
  resolution: 0.1
  n_yaw: 16               # heading bins of the risk grid
  stride: 2               # risk-grid node every `stride` map cells
  plan_margin: 4.0        # risk grid covers the robot-goal box grown by this margin [m]
  fill_sigma: 0.5         # Gaussian width [m] for smoothing unseen window cells; 0 keeps nearest fill
  unknown_risk: 0.5       # risk ceiling for states whose footprint area is mostly unobserved; 1 disables
assessment:
  ellipse: [0.8, 0.5]
  weights: [0.4, 0.3, 0.3]
  kappa_max: 0.1
  phi_x_max: 0.52
  phi_y_max: 0.52
robot:
  wheelbase: 0.6
  delta_max: 0.785
  v_max: 1.0
  a_lon_max: 5.0
  a_lat_max: 10.0
  phi_x_max: 0.52
  phi_y_max: 0.52
optimizer:
  rho_t: 1.0
  rho_r: 1.0
  r_max: 0.7
  d_min: 0.1
  delta_plus: 0.9
  samples_per_piece: 16
  piece_length: 1.5       # initial piece length along the search path [m]
  speed_fraction: 0.5     # initial duration = length / (speed_fraction * v_max)
search: {}                # overrides of the kinodynamic search settings
loop:
  replan_period: 1.0      # [s] of simulated time
  perception_period: 1.0  # [s]; shorter periods also audit the remaining plan on each new map
  max_time: 90.0          # [s] simulated time before the run is tagged timeout
  goal_tolerance: 0.3     # [m]
  heading_tolerance: 0.3  # [rad]
  dt: 0.01                # integrator step [s]
"""


class ConfigError(ValueError):
    """Invalid or inconsistent scenario configuration."""


def _defaults() -> dict:
    return yaml.safe_load(DEFAULT_SCENARIO_YAML)


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = dict(base)
    for key, val in (over or {}).items():
        if key not in base:
            if path in ("terrain.", "search."):
                out[key] = val
                continue
            raise ConfigError(f"unknown key {path}{key}")
        if isinstance(base[key], dict) and path + key != "search":
            if not isinstance(val, dict):
                raise ConfigError(f"{path}{key} must be a mapping")
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = val
    return out


def _pose(value, name):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be three numbers") from exc
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} must be three finite numbers")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class MapSettings:
    size: float = 32.0
    resolution: float = 0.1
    n_yaw: int = 16
    stride: int = 2
    plan_margin: float = 4.0
    fill_sigma: float = 0.5
    unknown_risk: float = 0.5


@dataclass(frozen=True)
class OptimizerSettings:
    rho_t: float = 1.0
    rho_r: float = 1.0
    r_max: float = 0.7
    d_min: float = 0.1
    delta_plus: float = 0.9
    samples_per_piece: int = 16
    piece_length: float = 1.5
    speed_fraction: float = 0.5


@dataclass(frozen=True)
class LoopSettings:
    replan_period: float = 1.0
    perception_period: float = 1.0
    max_time: float = 90.0
    goal_tolerance: float = 0.3
    heading_tolerance: float = 0.3
    dt: float = 0.01


@dataclass(frozen=True)
class Scenario:
    """A fully resolved closed-loop run."""

    name: str
    seed: int
    start: tuple
    goal: tuple
    terrain: dict
    sensor: SensorModel
    position_std: float
    rotation_std: float
    map: MapSettings
    assessment: AssessmentParams
    robot: RobotParams
    optimizer: OptimizerSettings
    search: dict = field(default_factory=dict)
    loop: LoopSettings = LoopSettings()
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    # ------------------------------------------------------------------ construction

    @classmethod
    def from_dict(cls, data: dict | None = None, base_dir: Path | None = None) -> "Scenario":
        cfg = _merge(_defaults(), data or {})
        try:
            sc = cls._build(cfg, base_dir)
        except InvalidParameterError as exc:
            raise ConfigError(str(exc)) from exc
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        sc.validate()
        return sc

    @classmethod
    def _build(cls, cfg: dict, base_dir: Path | None) -> "Scenario":
        s = cfg["sensor"]
        if s["n_elevations"] < 1 or s["azimuth_step_deg"] <= 0:
            raise ConfigError("sensor needs >= 1 elevation and a positive azimuth step")
        sensor = SensorModel(
            max_range=float(s["max_range"]),
            azimuth_step=math.radians(float(s["azimuth_step_deg"])),
            elevations=tuple(np.radians(np.linspace(float(s["elevation_min_deg"]), float(s["elevation_max_deg"]),
                                                    int(s["n_elevations"])))),
            noise_cov=np.eye(3) * float(s["noise_std"]) ** 2,
            p_BS=np.array([0.0, 0.0, float(s["mount_height"])]),
        )
        a = cfg["assessment"]
        assessment = AssessmentParams(tuple(a["ellipse"]), tuple(a["weights"]), float(a["kappa_max"]),
                                      float(a["phi_x_max"]), float(a["phi_y_max"]))
        robot = RobotParams(**{k: float(v) for k, v in cfg["robot"].items()})
        terrain = dict(cfg["terrain"])
        if terrain.get("type") == "file" and base_dir is not None and "path" in terrain:
            terrain["path"] = str((base_dir / terrain["path"]).resolve())
        return cls(
            name=str(cfg["name"]),
            seed=int(cfg["seed"]),
            start=_pose(cfg["start"], "start"),
            goal=_pose(cfg["goal"], "goal"),
            terrain=terrain,
            sensor=sensor,
            position_std=float(cfg["pose_noise"]["position_std"]),
            rotation_std=float(cfg["pose_noise"]["rotation_std"]),
            map=MapSettings(**cfg["map"]),
            assessment=assessment,
            robot=robot,
            optimizer=OptimizerSettings(**cfg["optimizer"]),
            search=dict(cfg["search"]),
            loop=LoopSettings(**{k: float(v) for k, v in cfg["loop"].items()}),
            raw={**cfg, "terrain": terrain},
        )

    def with_overrides(self, **changes) -> "Scenario":
        """New scenario from this one's raw config with top-level keys replaced."""
        cfg = dict(self.raw)
        cfg.update(changes)
        return Scenario.from_dict(cfg)

    # ------------------------------------------------------------------ checks

    def validate(self) -> None:
        m, lp, opt = self.map, self.loop, self.optimizer
        if m.size <= 0 or m.resolution <= 0 or m.n_yaw < 4 or m.stride < 1 or m.plan_margin < 0:
            raise ConfigError("map needs positive size and resolution, >= 4 yaw bins and stride >= 1")
        if m.fill_sigma < 0 or not 0 <= m.unknown_risk <= 1:
            raise ConfigError("map.fill_sigma must be >= 0 and map.unknown_risk within [0, 1]")
        if min(lp.replan_period, lp.perception_period, lp.max_time, lp.dt, lp.goal_tolerance,
               lp.heading_tolerance) <= 0:
            raise ConfigError("loop periods, tolerances and dt must be positive")
        if lp.perception_period > lp.replan_period + 1e-12:
            raise ConfigError("perception_period must not exceed replan_period")
        if opt.piece_length <= 0 or not 0 < opt.speed_fraction <= 1:
            raise ConfigError("piece_length must be positive and speed_fraction in (0, 1]")
        if self.position_std < 0 or self.rotation_std < 0:
            raise ConfigError("pose noise must be non-negative")
        try:
            self.search_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"search settings: {exc}") from exc
        hf = self.build_terrain()
        for name, pose in (("start", self.start), ("goal", self.goal)):
            if not hf.contains(pose[0], pose[1]):
                raise ConfigError(f"{name} lies outside the terrain")
        reach = 0.5 * m.size - max(self.assessment.ellipse) - m.resolution * m.stride
        if max(abs(self.goal[0] - self.start[0]), abs(self.goal[1] - self.start[1])) > reach:
            raise ConfigError(f"goal is farther than the local map reaches ({reach:.1f} m per axis)")

    def search_config(self, start_gear: int = 0) -> SearchConfig:
        base = dict(r_max=self.optimizer.r_max, d_min=self.optimizer.d_min, delta_max=self.robot.delta_max,
                    wheelbase=self.robot.wheelbase)
        base.update(self.search)
        base["start_gear"] = start_gear
        return SearchConfig(**base)

    # ------------------------------------------------------------------ terrain

    @property
    def terrain_seed(self) -> int:
        seed = self.terrain.get("seed")
        return self.seed if seed is None else int(seed)

    def build_terrain(self) -> HeightField:
        return build_terrain(self.terrain, self.terrain_seed)


_PROCEDURAL_KEYS = {f.name for f in fields(TerrainParams)}
_ANALYTIC_KEYS = {f.name for f in fields(AnalyticTerrain)}


def build_terrain(spec: dict, seed: int) -> HeightField:
    """Ground-truth heightfield from a terrain section."""
    spec = dict(spec)
    kind = spec.pop("type", "procedural")
    spec.pop("seed", None)
    if kind == "file":
        path = spec.get("path")
        if not path:
            raise ConfigError("terrain.type file needs terrain.path")
        try:
            with np.load(path) as npz:
                return HeightField(npz["heights"], float(npz["resolution"]), tuple(npz["origin"]))
        except (OSError, KeyError) as exc:
            raise ConfigError(f"cannot read terrain file {path}: {exc}") from exc
    if kind == "procedural":
        params = {k: v for k, v in spec.items() if k in _PROCEDURAL_KEYS}
        if "rock_positions" in params:
            params["rock_positions"] = tuple(tuple(float(c) for c in p) for p in params["rock_positions"])
        return generate_terrain(int(seed), TerrainParams(**params))
    if kind == "analytic":
        akw = {k: v for k, v in spec.items() if k in _ANALYTIC_KEYS}
        terrain = AnalyticTerrain(**akw)
        return terrain.rasterize(float(spec.get("width", 40.0)), float(spec.get("height", 40.0)),
                                 float(spec.get("resolution", 0.1)))
    raise ConfigError(f"unknown terrain type {kind!r}")


def load_yaml(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_scenario(path) -> Scenario:
    path = Path(path)
    return Scenario.from_dict(load_yaml(path), path.parent)

