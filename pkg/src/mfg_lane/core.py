"""Vehicle, style, lane and scenario value types plus the built-in scenario tables."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional


class StyleClass(str, enum.Enum):
    EGO = "ego"
    SUPER_AGGRESSIVE = "super_aggressive"
    AGGRESSIVE = "aggressive"
    CONSERVATIVE = "conservative"
    NORMAL = "normal"
    COMPETITIVE = "competitive"


# Fixed slab ordering used by every density tensor.
STYLE_ORDER = (
    StyleClass.EGO,
    StyleClass.SUPER_AGGRESSIVE,
    StyleClass.AGGRESSIVE,
    StyleClass.CONSERVATIVE,
    StyleClass.NORMAL,
    StyleClass.COMPETITIVE,
)
STYLE_INDEX = {c: i for i, c in enumerate(STYLE_ORDER)}

_ALIASES = {
    "sa": StyleClass.SUPER_AGGRESSIVE,
    "ag": StyleClass.AGGRESSIVE,
    "agg": StyleClass.AGGRESSIVE,
    "cons": StyleClass.CONSERVATIVE,
    "norm": StyleClass.NORMAL,
    "comp": StyleClass.COMPETITIVE,
}


def parse_style_class(name) -> StyleClass:
    if isinstance(name, StyleClass):
        return name
    key = str(name).strip().lower().replace("-", "_")
    if key in _ALIASES:
        return _ALIASES[key]
    try:
        return StyleClass(key)
    except ValueError:
        raise ValueError(f"unknown style class: {name!r}") from None


@dataclass(frozen=True)
class StateBounds:
    s_max: float = 1500.0
    v_max: float = 40.0
    a_max: float = 6.5
    d_max: float = 5.625
    v_d_max: float = 3.0
    a_d_max: float = 3.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"StateBounds.{f.name} must be positive")


@dataclass(frozen=True)
class VehicleState:
    s: float
    v_s: float
    a_s: float = 0.0
    d: float = 0.0
    v_d: float = 0.0
    a_d: float = 0.0

    def as_tuple(self):
        return (self.s, self.v_s, self.a_s, self.d, self.v_d, self.a_d)

    def clamp(self, b: StateBounds) -> "VehicleState":
        return VehicleState(
            s=min(max(self.s, 0.0), b.s_max),
            v_s=min(max(self.v_s, 0.0), b.v_max),
            a_s=min(max(self.a_s, -b.a_max), b.a_max),
            d=min(max(self.d, -b.d_max), b.d_max),
            v_d=min(max(self.v_d, -b.v_d_max), b.v_d_max),
            a_d=min(max(self.a_d, -b.a_d_max), b.a_d_max),
        )


@dataclass(frozen=True)
class ControlInput:
    u_a: float = 0.0
    u_d: float = 0.0
    delta: int = 0

    def __post_init__(self):
        if self.delta not in (-1, 0, 1):
            raise ValueError("delta must be -1, 0 or +1")


@dataclass(frozen=True)
class DrivingStyle:
    cls: StyleClass
    v_des: float
    a_max: float
    a_min: float
    kappa_safe: float
    omega_interact: float
    alpha_aggr: float
    tau_react: float

    def __post_init__(self):
        if not (self.a_min < 0 < self.a_max):
            raise ValueError("need a_min < 0 < a_max")
        if self.v_des <= 0 or self.kappa_safe <= 0 or self.omega_interact <= 0 or self.tau_react <= 0:
            raise ValueError("v_des, kappa_safe, omega_interact, tau_react must be positive")
        if not (0 < self.alpha_aggr < 1):
            raise ValueError("alpha_aggr must lie in (0, 1)")

    def vector(self):
        """The seven behavioural parameters in a fixed order."""
        return (self.v_des, self.a_max, self.a_min, self.kappa_safe,
                self.omega_interact, self.alpha_aggr, self.tau_react)

    def scaled(self, factor: float) -> "DrivingStyle":
        """Every parameter multiplied by `factor` (alpha kept inside (0, 1))."""
        v = [x * factor for x in self.vector()]
        v[5] = min(max(v[5], 1e-6), 1 - 1e-6)
        return DrivingStyle(self.cls, *v)


_TABLE = {
    #                         v_des a_max a_min kappa omega alpha tau
    StyleClass.EGO:              (25, 2.5, -4.0, 1.4, 1.2, 0.7, 0.8),
    StyleClass.SUPER_AGGRESSIVE: (35, 4.0, -6.5, 0.4, 0.3, 0.95, 0.4),
    StyleClass.AGGRESSIVE:       (32, 3.5, -5.5, 0.6, 0.4, 0.85, 0.5),
    StyleClass.CONSERVATIVE:     (16, 1.0, -2.5, 2.8, 2.5, 0.15, 1.5),
    StyleClass.NORMAL:           (24, 2.2, -4.2, 1.3, 1.0, 0.5, 1.0),
    StyleClass.COMPETITIVE:      (29, 3.2, -5.0, 0.7, 0.6, 0.8, 0.6),
}


def style_catalog(cls) -> DrivingStyle:
    c = parse_style_class(cls)
    return DrivingStyle(c, *(float(x) for x in _TABLE[c]))


def style_envelope():
    """Per-parameter (min, max) across the catalog, used for normalisation."""
    rows = [style_catalog(c).vector() for c in STYLE_ORDER]
    lo = tuple(min(r[k] for r in rows) for k in range(7))
    hi = tuple(max(r[k] for r in rows) for k in range(7))
    return lo, hi


def style_box(cls, rel: float = 0.05):
    """Admissible parameter box around a catalog entry (+-rel, sign-aware)."""
    base = style_catalog(cls).vector()
    lo = tuple(min(x * (1 - rel), x * (1 + rel)) for x in base)
    hi = tuple(max(x * (1 - rel), x * (1 + rel)) for x in base)
    return lo, hi


def in_style_box(style: DrivingStyle, rel: float = 0.05) -> bool:
    lo, hi = style_box(style.cls, rel)
    return all(l - 1e-12 <= x <= h + 1e-12 for x, l, h in zip(style.vector(), lo, hi))


def saturate_control(u: ControlInput, style: DrivingStyle, bounds: StateBounds) -> ControlInput:
    ua = min(max(u.u_a, style.a_min), style.a_max)
    ud = min(max(u.u_d, -bounds.a_d_max), bounds.a_d_max)
    return ControlInput(ua, ud, u.delta)


@dataclass(frozen=True)
class LaneGeometry:
    lane_width: float = 3.75
    lane_centers: tuple = (-3.75, 0.0, 3.75)
    road_length: float = 1500.0
    curvature_radius: float = math.inf

    def __post_init__(self):
        if self.lane_width <= 0:
            raise ValueError("lane_width must be positive")
        c = self.lane_centers
        if any(b <= a for a, b in zip(c, c[1:])):
            raise ValueError("lane_centers must be strictly increasing")

    def nearest_lane(self, d: float) -> int:
        return min(range(len(self.lane_centers)), key=lambda i: abs(self.lane_centers[i] - d))

    def lane_band(self, lane: int):
        c = self.lane_centers[lane]
        return c - self.lane_width / 2, c + self.lane_width / 2


# Lane indices: 0 = left (-3.75 m), 1 = middle, 2 = right (+3.75 m).
LANE_NAMES = {"L": 0, "M": 1, "R": 2, "left": 0, "middle": 1, "right": 2}


@dataclass(frozen=True)
class VehicleSpec:
    id: int
    style: StyleClass
    lane: int
    rel_s: float
    speed: float


@dataclass
class ScenarioConfig:
    name: str
    vehicles: list
    ego_id: int
    target_lane: int
    horizon: float = 20.0
    dt: float = 0.1
    bounds: StateBounds = field(default_factory=StateBounds)
    geometry: LaneGeometry = field(default_factory=LaneGeometry)
    ego_s: float = 300.0
    # style overrides keyed by class (perturbation studies, parameter files)
    styles: dict = field(default_factory=dict)
    # vehicle id -> TrajectorySegment replayed verbatim
    replay: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [v.id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise ValueError("vehicle ids must be unique")
        if self.ego_id not in ids:
            raise ValueError("ego vehicle missing")
        if not (0 <= self.target_lane < len(self.geometry.lane_centers)):
            raise ValueError("target_lane out of range")

    def style_of(self, cls) -> DrivingStyle:
        cls = parse_style_class(cls)
        return self.styles.get(cls) or style_catalog(cls)

    def vehicle(self, vid: int) -> VehicleSpec:
        for v in self.vehicles:
            if v.id == vid:
                return v
        raise KeyError(vid)

    @property
    def ego(self) -> VehicleSpec:
        return self.vehicle(self.ego_id)

    @property
    def target_d(self) -> float:
        return self.geometry.lane_centers[self.target_lane]

    def initial_state(self, spec: VehicleSpec) -> VehicleState:
        if spec.id in self.replay:
            return self.replay[spec.id].states[0]
        return VehicleState(s=self.ego_s + spec.rel_s, v_s=spec.speed,
                            d=self.geometry.lane_centers[spec.lane])

    def initial_states(self) -> dict:
        return {v.id: self.initial_state(v) for v in self.vehicles}

    def classes_present(self):
        return sorted({v.style for v in self.vehicles}, key=STYLE_INDEX.get)

    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "ego_id": self.ego_id,
            "target_lane": self.target_lane,
            "horizon": self.horizon,
            "dt": self.dt,
            "ego_s": self.ego_s,
            "bounds": dataclasses.asdict(self.bounds),
            "geometry": {**dataclasses.asdict(self.geometry),
                         "lane_centers": list(self.geometry.lane_centers),
                         "curvature_radius": None if math.isinf(self.geometry.curvature_radius)
                         else self.geometry.curvature_radius},
            "vehicles": [
                {"id": v.id, "style": v.style.value, "lane": v.lane, "rel_s": v.rel_s, "speed": v.speed}
                for v in self.vehicles
            ],
            "styles": {c.value: list(s.vector()) for c, s in self.styles.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        geo = dict(doc.get("geometry", {}))
        if "lane_centers" in geo:
            geo["lane_centers"] = tuple(geo["lane_centers"])
        if geo.get("curvature_radius", 0) is None:
            geo["curvature_radius"] = math.inf
        vehicles = []
        for v in doc["vehicles"]:
            lane = v["lane"]
            lane = LANE_NAMES[lane] if isinstance(lane, str) else int(lane)
            vehicles.append(VehicleSpec(int(v["id"]), parse_style_class(v["style"]), lane,
                                        float(v["rel_s"]), float(v["speed"])))
        styles = {parse_style_class(k): DrivingStyle(parse_style_class(k), *map(float, vals))
                  for k, vals in doc.get("styles", {}).items()}
        return cls(
            name=doc.get("name", "custom"),
            vehicles=vehicles,
            ego_id=int(doc["ego_id"]),
            target_lane=int(doc["target_lane"]),
            horizon=float(doc.get("horizon", 20.0)),
            dt=float(doc.get("dt", 0.1)),
            bounds=StateBounds(**doc.get("bounds", {})),
            geometry=LaneGeometry(**geo),
            ego_s=float(doc.get("ego_s", 300.0)),
            styles=styles,
        )


def save_scenario(sc: ScenarioConfig, path) -> None:
    Path(path).write_text(json.dumps(sc.to_dict(), indent=2))


def load_scenario(path) -> ScenarioConfig:
    return ScenarioConfig.from_dict(json.loads(Path(path).read_text()))


# (id, style, lane, relative position, speed)
_SCENARIO7 = [
    (1, "ego", "M", 0, 25.0), (2, "sa", "L", -25, 36.5), (3, "ag", "R", -15, 32.4),
    (4, "comp", "M", -35, 27.4), (5, "norm", "L", 20, 22.3), (6, "ag", "R", 30, 32.5),
    (7, "cons", "M", 45, 15.2), (8, "comp", "L", -45, 29.7), (9, "sa", "R", -55, 33.9),
    (10, "norm", "L", 60, 25.0), (11, "ag", "R", 70, 33.5), (12, "comp", "M", -65, 30.9),
    (13, "norm", "M", 85, 25.9), (14, "ag", "L", -80, 30.8), (15, "cons", "R", 100, 17.4),
    (16, "comp", "R", -90, 27.3), (17, "sa", "L", 120, 34.6), (18, "norm", "M", -100, 22.3),
]
_SCENARIO8 = [
    (1, "ego", "M", 0, 25.0), (2, "sa", "M", -20, 24.0), (3, "ag", "M", -10, 20.8),
    (4, "comp", "M", -30, 20.8), (5, "norm", "M", 40, 18.4), (6, "ag", "M", 15, 20.8),
    (7, "cons", "M", 25, 14.4), (8, "comp", "M", 35, 20.8), (9, "sa", "M", 45, 24.0),
    (10, "norm", "R", -35, 21.9), (11, "ag", "R", 30, 24.7), (12, "comp", "R", 60, 24.7),
    (13, "norm", "R", -55, 21.9), (14, "ag", "L", 50, 29.9), (15, "cons", "L", 90, 20.7),
    (16, "comp", "L", -60, 29.9), (17, "sa", "R", 120, 28.5), (18, "norm", "R", -80, 21.9),
]
# (front style in the current lane, rear style in the target lane)
COMBOS = {
    1: ("super_aggressive", "conservative"),
    2: ("aggressive", "normal"),
    3: ("competitive", "conservative"),
    4: ("aggressive", "aggressive"),
    5: ("normal", "conservative"),
    6: ("competitive", "super_aggressive"),
}
COMBO_FRONT_GAP = 30.0
COMBO_REAR_GAP = -35.0

SCENARIO_NAMES = tuple([f"combo{i}" for i in COMBOS] + ["scenario7", "scenario8", "ngsim_replay"])


def _from_table(name, rows, target_lane, horizon):
    vs = [VehicleSpec(i, parse_style_class(st), LANE_NAMES[ln], float(rs), float(v))
          for i, st, ln, rs, v in rows]
    return ScenarioConfig(name=name, vehicles=vs, ego_id=1, target_lane=target_lane, horizon=horizon)


def build_scenario(name: str) -> ScenarioConfig:
    if name.startswith("combo") and name[5:].isdigit() and int(name[5:]) in COMBOS:
        front, rear = COMBOS[int(name[5:])]
        fs, rs = style_catalog(front), style_catalog(rear)
        vs = [
            VehicleSpec(1, StyleClass.EGO, 1, 0.0, 25.0),
            VehicleSpec(2, fs.cls, 1, COMBO_FRONT_GAP, fs.v_des),
            VehicleSpec(3, rs.cls, 0, COMBO_REAR_GAP, rs.v_des),
        ]
        return ScenarioConfig(name=name, vehicles=vs, ego_id=1, target_lane=0, horizon=20.0)
    if name == "scenario7":
        return _from_table(name, _SCENARIO7, 0, 30.0)
    if name == "scenario8":
        return _from_table(name, _SCENARIO8, 0, 45.0)
    if name == "ngsim_replay":
        from .ngsim import default_replay_scenario
        return default_replay_scenario()
    raise ValueError(f"unknown scenario: {name!r}")
