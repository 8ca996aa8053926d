"""NGSIM-format trajectory ingestion: parsing, resampling, Frenet mapping and replay attachment."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .core import LaneGeometry, ScenarioConfig, StyleClass, VehicleSpec, VehicleState

FT = 0.3048
FRAME_DT = 0.1

DEFAULT_HEADER = {
    "vehicle_id": "Vehicle_ID",
    "frame_id": "Frame_ID",
    "local_x": "Local_X",
    "local_y": "Local_Y",
    "v_vel": "v_Vel",
    "v_acc": "v_Acc",
    "lane_id": "Lane_ID",
    "space_headway": "Space_Headway",
    "time_headway": "Time_Headway",
}
REQUIRED = ("vehicle_id", "frame_id", "local_x", "local_y", "lane_id")
LENGTH_FIELDS = ("local_x", "local_y", "v_vel", "v_acc", "space_headway")

FIXTURE_NAME = "ngsim_fixture.csv"
SUBJECT_ID, FRONT_ID, REAR_ID = 2460, 2467, 2155


@dataclass(frozen=True)
class NgsimRecord:
    vehicle_id: int
    frame_id: int
    local_x: float
    local_y: float
    v_vel: float | None
    v_acc: float | None
    lane_id: int
    space_headway: float | None = None
    time_headway: float | None = None


class RecordList(list):
    """Parsed records plus the (line number, message) report of rejected rows."""

    def __init__(self, records=(), errors=()):
        super().__init__(records)
        self.errors = list(errors)


def _num(text, kind=float):
    text = text.strip()
    if kind is int:
        v = float(text)
        if not v.is_integer():
            raise ValueError(f"not an integer: {text!r}")
        return int(v)
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {text!r}")
    return v


def parse_ngsim_csv(path, imperial: bool = False, header_map: dict | None = None) -> RecordList:
    """Parse an NGSIM-schema CSV; malformed rows land in `.errors` instead of aborting."""
    hmap = {**DEFAULT_HEADER, **(header_map or {})}
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or not any(h.strip() for h in header):
            raise ValueError(f"{path}: empty file")
        cols = {h.strip(): i for i, h in enumerate(header)}
        for key in REQUIRED:
            if hmap[key] not in cols:
                raise ValueError(f"{path}: missing required column {hmap[key]!r}")
        idx = {k: cols.get(hmap[k]) for k in DEFAULT_HEADER}
        scale = FT if imperial else 1.0
        out = RecordList()
        n_rows = 0
        for line_no, row in enumerate(rd, start=2):
            if not row or not any(c.strip() for c in row):
                continue
            n_rows += 1
            try:
                vals = {}
                for k, i in idx.items():
                    if i is None or i >= len(row) or row[i].strip() == "":
                        if k in REQUIRED:
                            raise ValueError(f"missing {hmap[k]}")
                        vals[k] = None
                        continue
                    kind = int if k in ("vehicle_id", "frame_id", "lane_id") else float
                    v = _num(row[i], kind)
                    if k in LENGTH_FIELDS:
                        v = v * scale
                    vals[k] = v
                if vals["v_vel"] is not None and vals["v_vel"] < 0:
                    raise ValueError("negative velocity")
                out.append(NgsimRecord(**vals))
            except ValueError as e:
                out.errors.append((line_no, str(e)))
        if n_rows == 0:
            raise ValueError(f"{path}: no data rows")
    return out


def _fmt(v):
    return "" if v is None else repr(v)


def write_ngsim_csv(records, path, imperial: bool = False) -> Path:
    """Serialise records with the default header (inverse of parse_ngsim_csv on consumed columns)."""
    path = Path(path)
    scale = 1.0 / FT if imperial else 1.0
    keys = list(DEFAULT_HEADER)
    with path.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([DEFAULT_HEADER[k] for k in keys])
        for r in records:
            row = []
            for k in keys:
                v = getattr(r, k)
                if v is not None and k in LENGTH_FIELDS:
                    v = v * scale
                row.append(_fmt(v))
            wr.writerow(row)
    return path


def group_by_vehicle(records) -> dict:
    out = {}
    for r in records:
        out.setdefault(r.vehicle_id, []).append(r)
    return out


@dataclass(frozen=True)
class FrenetMap:
    """Source lane ids -> road lanes; lateral offset measured from the source lane centre."""
    lane_width_src: float = 12 * FT        # metres
    lane_map: tuple = ((1, 0), (2, 1), (3, 2))
    s_offset: float = 0.0
    geometry: LaneGeometry = LaneGeometry()

    def lane_index(self, lane_id: int) -> int:
        m = dict(self.lane_map)
        if lane_id not in m:
            raise ValueError(f"lane {lane_id} has no mapping onto the road")
        return m[lane_id]

    def lateral(self, local_x: float, lane_id: int) -> float:
        center = (lane_id - 0.5) * self.lane_width_src
        return self.geometry.lane_centers[self.lane_index(lane_id)] + (local_x - center)

    def longitudinal(self, local_y: float) -> float:
        return local_y - self.s_offset


@dataclass
class TrajectorySegment:
    vehicle_id: int
    start_time: float
    dt: float
    states: list
    lane: int
    source_lane: int | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        s = np.array([x.s for x in self.states])
        if s.size > 1 and np.min(np.diff(s)) < -0.5:
            raise ValueError(f"vehicle {self.vehicle_id}: backward jump in s")

    @property
    def span(self) -> float:
        """Covered duration: one dt per sample."""
        return len(self.states) * self.dt

    @property
    def times(self):
        return self.start_time + self.dt * np.arange(len(self.states))

    def trimmed(self, t0: float) -> "TrajectorySegment":
        k = int(round((t0 - self.start_time) / self.dt))
        if k < 0 or k >= len(self.states):
            raise ValueError(f"vehicle {self.vehicle_id}: t0={t0} outside segment")
        return TrajectorySegment(self.vehicle_id, self.start_time + k * self.dt, self.dt, self.states[k:], self.lane,
                                 self.source_lane)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["t", "vehicle_id", "s", "d", "v_s", "v_d", "u_a", "u_d", "delta"])
            for t, x in zip(self.times, self.states):
                wr.writerow([f"{t:.3f}", self.vehicle_id, f"{x.s:.6f}", f"{x.d:.6f}", f"{x.v_s:.6f}",
                             f"{x.v_d:.6f}", "", "", ""])
        return path


def resample_align(records, dt_target: float = 0.1, frame_dt: float = FRAME_DT,
                   frame: FrenetMap = FrenetMap()) -> TrajectorySegment:
    """Linear interpolation of one vehicle's records onto a uniform clock, mapped to (s, d)."""
    recs = sorted(records, key=lambda r: r.frame_id)
    if len(recs) < 2:
        raise ValueError("need at least two records")
    if len({r.vehicle_id for r in recs}) != 1:
        raise ValueError("records belong to several vehicles")
    fr = np.array([r.frame_id for r in recs], dtype=np.int64)
    if np.any(np.diff(fr) == 0):
        raise ValueError(f"vehicle {recs[0].vehicle_id}: duplicate frames")
    # work in frame units so a matching clock hits the source samples exactly
    u_src = (fr - fr[0]).astype(float)
    ratio = dt_target / frame_dt
    n = int(math.floor(u_src[-1] / ratio + 1e-9)) + 1
    u = np.arange(n) * ratio
    y = np.array([r.local_y for r in recs])
    s = np.interp(u, u_src, y) - frame.s_offset
    d_src = np.array([frame.lateral(r.local_x, r.lane_id) for r in recs])
    d = np.interp(u, u_src, d_src)
    if all(r.v_vel is not None for r in recs):
        v = np.interp(u, u_src, [r.v_vel for r in recs])
    else:
        v = np.gradient(s, dt_target) if n > 1 else np.zeros(n)
    if all(r.v_acc is not None for r in recs):
        a = np.interp(u, u_src, [r.v_acc for r in recs])
    else:
        a = np.gradient(v, dt_target) if n > 1 else np.zeros(n)
    vd = np.gradient(d, dt_target) if n > 1 else np.zeros(n)
    cnt = Counter(r.lane_id for r in recs)
    top = max(cnt.values())
    modal = min(k for k, c in cnt.items() if c == top)
    states = [VehicleState(float(s[i]), float(max(v[i], 0.0)), float(a[i]), float(d[i]), float(vd[i]), 0.0)
              for i in range(n)]
    return TrajectorySegment(recs[0].vehicle_id, float(fr[0] * frame_dt), dt_target, states,
                             frame.lane_index(modal), modal)


def resample_all(records, dt_target: float = 0.1, frame: FrenetMap = FrenetMap()) -> dict:
    return {vid: resample_align(rs, dt_target, frame=frame) for vid, rs in sorted(group_by_vehicle(records).items())}


def attach_replay(base: ScenarioConfig, segments: dict, roles: dict, t0: float | None = None,
                  style: StyleClass = StyleClass.NORMAL) -> ScenarioConfig:
    """Add the role vehicles as verbatim replays, trimmed to a common start time."""
    for role in ("front", "rear"):
        if role not in roles:
            raise ValueError(f"missing role {role!r}")
        if roles[role] not in segments:
            raise ValueError(f"role {role} vehicle {roles[role]} not among segments")
    ids = [roles["front"], roles["rear"]]
    if t0 is None:
        t0 = max(segments[i].start_time for i in ids)
    replay = dict(base.replay)
    vehicles = list(base.vehicles)
    taken = {v.id for v in vehicles}
    for vid in ids:
        if vid in taken:
            raise ValueError(f"vehicle id {vid} already present in the base scenario")
        seg = segments[vid].trimmed(t0)
        x0 = seg.states[0]
        lane = base.geometry.nearest_lane(x0.d)
        vehicles.append(VehicleSpec(vid, style, lane, x0.s - base.ego_s, x0.v_s))
        replay[vid] = seg
    return base.replace(vehicles=vehicles, replay=replay)


def summarize_gaps(segments: dict, subject: int = SUBJECT_ID, front: int = FRONT_ID, rear: int = REAR_ID) -> dict:
    """Longitudinal front/rear gap statistics of the subject over the common time window."""
    def on_window(seg, t_lo, t_hi):
        t = seg.times
        keep = (t >= t_lo - 1e-9) & (t <= t_hi + 1e-9)
        return np.array([x.s for x, k in zip(seg.states, keep) if k])

    segs = [segments[i] for i in (subject, front, rear)]
    t_lo = max(sg.times[0] for sg in segs)
    t_hi = min(sg.times[-1] for sg in segs)
    if t_hi < t_lo:
        raise ValueError("segments do not overlap in time")
    ss, sf, sr = (on_window(sg, t_lo, t_hi) for sg in segs)
    fg, rg = sf - ss, ss - sr
    return {"front_mean": float(fg.mean()), "front_std": float(fg.std()), "rear_mean": float(rg.mean()),
            "rear_std": float(rg.std()), "n": int(fg.size), "t_start": float(t_lo), "t_end": float(t_hi)}


def fixture_path() -> Path:
    return Path(str(resources.files("mfg_lane") / "data" / FIXTURE_NAME))


def default_replay_scenario(path=None, horizon: float = 30.0) -> ScenarioConfig:
    """Subject vehicle becomes the MFG ego; its recorded leader and left-lane follower are replayed."""
    recs = parse_ngsim_csv(path or fixture_path(), imperial=True)
    if recs.errors:
        raise ValueError(f"fixture has malformed rows: {recs.errors[:3]}")
    segs = resample_all(recs)
    t0 = max(segs[i].start_time for i in (SUBJECT_ID, FRONT_ID, REAR_ID))
    ego_seg = segs[SUBJECT_ID].trimmed(t0)
    x0 = ego_seg.states[0]
    geom = LaneGeometry()
    ego_lane = geom.nearest_lane(x0.d)
    target = geom.nearest_lane(segs[REAR_ID].trimmed(t0).states[0].d)
    base = ScenarioConfig(name="ngsim_replay", vehicles=[VehicleSpec(1, StyleClass.EGO, ego_lane, 0.0, x0.v_s)],
                          ego_id=1, target_lane=target, horizon=horizon, ego_s=x0.s, geometry=geom)
    return attach_replay(base, segs, {"front": FRONT_ID, "rear": REAR_ID}, t0)


# -- synthetic fixture -------------------------------------------------------------------------

def _synthetic_track(frames, y0, v0, amp, period, phase, x_center, wiggle):
    t = (np.asarray(frames) - frames[0]) * FRAME_DT
    w = 2 * math.pi / period
    v = v0 + amp * np.sin(w * t + phase)
    y = y0 + v0 * t - amp / w * (np.cos(w * t + phase) - math.cos(phase))
    a = amp * w * np.cos(w * t + phase)
    x = x_center + wiggle * np.sin(0.2 * t)
    return y, x, v, a


def synthetic_fixture_records() -> list:
    """Three vehicles in feet: subject and leader in lane 2, follower in lane 1 (deterministic)."""
    spec = [
        # id, first frame, n frames, y0 (ft), v0 (ft/s), amp, period (s), phase, lane
        (SUBJECT_ID, 1000, 946, 200.0, 50.0, 6.0, 30.0, 0.0, 2),
        (FRONT_ID, 1000, 946, 306.0, 50.0, 6.0, 30.0, 0.6, 2),
        (REAR_ID, 1040, 896, 150.0, 48.0, 4.0, 25.0, 1.1, 1),
    ]
    tracks = {}
    for vid, f0, nf, y0, v0, amp, per, ph, lane in spec:
        frames = np.arange(f0, f0 + nf)
        y, x, v, a = _synthetic_track(frames, y0, v0, amp, per, ph, (lane - 0.5) * 12.0, 0.4)
        tracks[vid] = (frames, np.round(y, 3), np.round(x, 3), np.round(v, 2), np.round(a, 2), lane)
    out = []
    front = tracks[FRONT_ID]
    lead_y = dict(zip(front[0].tolist(), front[1].tolist()))
    for vid in sorted(tracks):
        frames, y, x, v, a, lane = tracks[vid]
        for i, f in enumerate(frames.tolist()):
            gap = 0.0
            if vid == SUBJECT_ID and f in lead_y:
                gap = round(lead_y[f] - y[i], 3)
            th = round(gap / v[i], 2) if gap > 0 and v[i] > 0 else 0.0
            out.append(NgsimRecord(vid, int(f), float(x[i]), float(y[i]), float(v[i]), float(a[i]), lane,
                                   float(gap), float(th)))
    return out


def write_synthetic_fixture(path) -> Path:
    return write_ngsim_csv(synthetic_fixture_records(), path, imperial=False)
