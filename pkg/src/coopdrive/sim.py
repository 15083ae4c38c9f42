"""Mesoscopic lattice traffic simulator: 3-lane main road with an exit ramp.

One-second steps over a 1 m lattice. Controlled vehicles receive joint
lateral/longitudinal actions; the rest follow a quantized intelligent-driver
car-following law with a safety-gated lane-change heuristic. All active
vehicles update simultaneously from the pre-step snapshot; collisions are
detected pairwise and resolved by snapping the rear vehicle just behind the
front body at the front's speed.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import RoadGrid
from .errors import ConfigError, ContractError


class Lon(enum.IntEnum):
    AC = 0   # accelerate
    SK = 1   # speed keeping
    DC = 2   # decelerate


class Lat(enum.IntEnum):
    LEFT = 0
    KEEP = 1
    RIGHT = 2


@dataclass(frozen=True)
class ActionPair:
    """One of the 9 joint lateral/longitudinal actions."""

    lon: Lon
    lat: Lat

    @property
    def index(self) -> int:
        return int(self.lon) * 3 + int(self.lat)

    @classmethod
    def from_index(cls, i: int) -> "ActionPair":
        if not 0 <= i < 9:
            raise ContractError(f"action index {i} outside [0, 9)")
        return cls(Lon(i // 3), Lat(i % 3))

    def __str__(self):
        return f"{self.lon.name}+{self.lat.name}"


ALL_ACTIONS = tuple(ActionPair.from_index(i) for i in range(9))


class VehicleKind(enum.Enum):
    CAV = "CAV"
    HDV = "HDV"


class Status(enum.Enum):
    ACTIVE = "active"
    EXITED_RAMP = "exited_ramp"
    EXITED_MAIN = "exited_main"


@dataclass(frozen=True)
class IDMParams:
    """Car-following and lane-change parameters of the background drivers."""

    v0: float = 20.0         # desired speed
    s0: float = 2.0          # jam distance
    t_headway: float = 1.0
    a_max: float = 3.5
    b: float = 2.5           # comfortable deceleration
    quantize_threshold: float = 0.5
    lc_threshold: float = 0.5    # accel gain needed to change lanes
    b_safe: float = 2.5          # max imposed deceleration accepted in a change
    margin: float = 2.0          # net-gap floor used by gap acceptance


@dataclass(frozen=True)
class ScenarioConfig:
    """Road geometry, roster, kinematic limits and driver model parameters."""

    grid: RoadGrid = field(default_factory=RoadGrid)
    initial_x: tuple[float, ...] = (20.0, 30.0, 50.0, 50.0, 30.0, 0.0)
    initial_lane: tuple[int, ...] = (1, 0, 0, 2, 2, 1)
    cav_slots: tuple[int, ...] = (4, 5)
    initial_speed: float = 10.0
    accel: float = 3.5
    v_max: float = 20.0
    dt: float = 1.0
    body_len: float = 5.0
    lc_window: int = 2           # consecutive changes that count as frequent
    freeze_last_speed: bool = False
    max_steps: int = 0           # 0 = ceil(l_main / (v_max*dt)) + 5
    hdv: IDMParams = field(default_factory=IDMParams)

    def __post_init__(self):
        n = len(self.initial_x)
        if len(self.initial_lane) != n:
            raise ConfigError(
                f"{n} initial positions but {len(self.initial_lane)} lanes")
        for slot in self.cav_slots:
            if not 0 <= slot < n:
                raise ConfigError(f"cav slot {slot} outside roster of {n}")
        seen = set()
        for x, lane in zip(self.initial_x, self.initial_lane):
            if not 0 <= x < self.grid.l_main:
                raise ConfigError(f"initial x {x} off-road")
            if not 0 <= lane < self.grid.n_lanes:
                raise ConfigError(f"initial lane {lane} off-road")
            cell = (lane, int(math.floor(x)))
            if cell in seen:
                raise ConfigError(f"two vehicles share initial cell {cell}")
            seen.add(cell)
        if self.v_max <= 0 or self.accel <= 0 or self.dt <= 0:
            raise ConfigError("v_max, accel and dt must be positive")

    @property
    def n_vehicles(self) -> int:
        return len(self.initial_x)

    @property
    def episode_cap(self) -> int:
        if self.max_steps > 0:
            return self.max_steps
        return math.ceil(self.grid.l_main / (self.v_max * self.dt)) + 5


@dataclass
class Vehicle:
    """Kinematic and bookkeeping state of one vehicle."""

    vid: int
    kind: VehicleKind
    lane: int
    x: float
    v: float
    intends_ramp: bool
    status: Status = Status.ACTIVE
    missed_ramp: bool = False
    collided: bool = False
    recent_lc: tuple[bool, ...] = ()

    @property
    def is_active(self) -> bool:
        return self.status is Status.ACTIVE

    @property
    def is_cav(self) -> bool:
        return self.kind is VehicleKind.CAV


@dataclass
class SceneState:
    """Whole-scene state at one step; owns its private rng stream."""

    vehicles: list[Vehicle]
    t: int
    config: ScenarioConfig
    rng: np.random.Generator
    done: bool = False

    @property
    def grid(self) -> RoadGrid:
        return self.config.grid

    def cavs(self) -> list[Vehicle]:
        return [self.vehicles[i] for i in self.config.cav_slots]

    def active(self) -> list[Vehicle]:
        return [v for v in self.vehicles if v.is_active]


@dataclass
class StepOutcome:
    """Per-step event counts plus the speed vector used by the reward."""

    n_onramp: int
    n_collision: int
    n_lc: int
    speeds: list[float]
    done: bool
    actions: list[ActionPair | None] = field(default_factory=list)


def reset(config: ScenarioConfig, seed: int) -> SceneState:
    vehicles = []
    cav_set = set(config.cav_slots)
    for i in range(config.n_vehicles):
        kind = VehicleKind.CAV if i in cav_set else VehicleKind.HDV
        vehicles.append(Vehicle(
            vid=i,
            kind=kind,
            lane=config.initial_lane[i],
            x=float(config.initial_x[i]),
            v=config.initial_speed,
            intends_ramp=(kind is VehicleKind.CAV),
        ))
    return SceneState(vehicles=vehicles, t=0, config=config,
                      rng=np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# kinematics


@dataclass
class Candidate:
    """Post-step state proposal for one active vehicle."""

    vid: int
    lane: int
    x: float
    v: float
    changed_lane: bool
    pre_lane: int
    pre_x: float
    pre_v: float


def apply_action(veh: Vehicle, action: ActionPair,
                 config: ScenarioConfig) -> Candidate:
    """Semi-implicit update: new speed applies to this step's displacement.
    Boundary lane changes degrade to lane keeping."""
    dv = {Lon.AC: config.accel, Lon.SK: 0.0, Lon.DC: -config.accel}[action.lon]
    v_new = min(max(veh.v + dv * config.dt, 0.0), config.v_max)
    delta = {Lat.LEFT: -1, Lat.KEEP: 0, Lat.RIGHT: 1}[action.lat]
    lane_new = min(max(veh.lane + delta, 0), config.grid.n_lanes - 1)
    return Candidate(
        vid=veh.vid,
        lane=lane_new,
        x=veh.x + v_new * config.dt,
        v=v_new,
        changed_lane=lane_new != veh.lane,
        pre_lane=veh.lane,
        pre_x=veh.x,
        pre_v=veh.v,
    )


# ---------------------------------------------------------------------------
# neighbor queries (pre-step snapshot)


def find_leader(vehicles: list[Vehicle], lane: int, x: float,
                exclude: int) -> Vehicle | None:
    best = None
    for v in vehicles:
        if v.vid == exclude or not v.is_active or v.lane != lane:
            continue
        if v.x > x and (best is None or v.x < best.x):
            best = v
    return best


def find_follower(vehicles: list[Vehicle], lane: int, x: float,
                  exclude: int) -> Vehicle | None:
    best = None
    for v in vehicles:
        if v.vid == exclude or not v.is_active or v.lane != lane:
            continue
        if v.x <= x and (best is None or v.x > best.x):
            best = v
    return best


# ---------------------------------------------------------------------------
# background driver model


def idm_accel(p: IDMParams, v: float, leader_v: float | None,
              gap_net: float | None) -> float:
    """Intelligent-driver acceleration; `gap_net` is bumper-to-bumper."""
    free = p.a_max * (1.0 - (v / p.v0) ** 4)
    if leader_v is None:
        return free
    dv = v - leader_v
    interaction = v * p.t_headway + v * dv / (2.0 * math.sqrt(p.a_max * p.b))
    s_star = p.s0 + max(0.0, interaction)
    s = max(gap_net, 0.1)
    return p.a_max * (1.0 - (v / p.v0) ** 4 - (s_star / s) ** 2)


def quantize_accel(a: float, threshold: float) -> Lon:
    if a > threshold:
        return Lon.AC
    if a < -threshold:
        return Lon.DC
    return Lon.SK


def _idm_toward(scene: SceneState, veh: Vehicle, lane: int) -> float:
    """IDM acceleration the vehicle would see driving in `lane`."""
    leader = find_leader(scene.vehicles, lane, veh.x, veh.vid)
    if leader is None:
        return idm_accel(scene.config.hdv, veh.v, None, None)
    gap = leader.x - veh.x - scene.config.body_len
    return idm_accel(scene.config.hdv, veh.v, leader.v, gap)


def lane_change_safe(scene: SceneState, veh: Vehicle, target: int) -> bool:
    """Gap acceptance: hard net-gap floors plus bounded imposed decelerations."""
    cfg = scene.config
    p = cfg.hdv
    leader = find_leader(scene.vehicles, target, veh.x, veh.vid)
    follower = find_follower(scene.vehicles, target, veh.x, veh.vid)
    if leader is not None:
        if leader.x - veh.x - cfg.body_len < p.margin:
            return False
        if _idm_toward(scene, veh, target) < -p.b_safe:
            return False
    if follower is not None:
        gap_f = veh.x - follower.x - cfg.body_len
        if gap_f < p.margin:
            return False
        if idm_accel(p, follower.v, veh.v, gap_f) < -p.b_safe:
            return False
    return True


def hdv_control(scene: SceneState, veh: Vehicle) -> ActionPair:
    """Quantized IDM longitudinally; change lanes only when the acceleration
    gain beats the threshold and the gap-acceptance test passes."""
    if not veh.is_active or veh.is_cav:
        raise ContractError("hdv_control expects an active background vehicle")
    cfg = scene.config
    a_here = _idm_toward(scene, veh, veh.lane)
    lat = Lat.KEEP
    best_gain = cfg.hdv.lc_threshold
    for target, move in ((veh.lane - 1, Lat.LEFT), (veh.lane + 1, Lat.RIGHT)):
        if not 0 <= target < cfg.grid.n_lanes:
            continue
        gain = _idm_toward(scene, veh, target) - a_here
        if gain > best_gain and lane_change_safe(scene, veh, target):
            best_gain = gain
            lat = move
    return ActionPair(quantize_accel(a_here, cfg.hdv.quantize_threshold), lat)


# ---------------------------------------------------------------------------
# collision detection and resolution


def detect_collisions(pre: dict[int, Candidate], candidates: list[Candidate],
                      config: ScenarioConfig):
    """Flag colliding pairs and return overlap-free resolved candidates.

    A pair collides when, in the same post-step lane, (a) their bodies
    overlap, (b) they started in one lane and swapped order during the step,
    or (c) a lane change put both in the same integer cell. The rear vehicle
    (post-step order) snaps just behind the front body at the front's speed;
    a front-to-back sweep then guarantees no residual overlap.
    """
    body = config.body_len
    flagged: list[tuple[int, int]] = []
    by_vid = {c.vid: c for c in candidates}
    vids = sorted(by_vid)
    for ai in range(len(vids)):
        for bi in range(ai + 1, len(vids)):
            a, b = by_vid[vids[ai]], by_vid[vids[bi]]
            if a.lane != b.lane:
                continue
            overlap = abs(a.x - b.x) < body
            crossed = (a.pre_lane == b.pre_lane
                       and (a.pre_x - b.pre_x) * (a.x - b.x) < 0)
            merged_cell = ((a.changed_lane or b.changed_lane)
                           and math.floor(a.x) == math.floor(b.x))
            if overlap or crossed or merged_cell:
                flagged.append((a.vid, b.vid))

    work = {c.vid: [c.lane, c.x, c.v] for c in candidates}
    # order-swapping pairs first: put the pre-step rear back behind the front
    for va, vb in flagged:
        a, b = by_vid[va], by_vid[vb]
        if (a.pre_x - b.pre_x) * (work[va][1] - work[vb][1]) < 0:
            rear, front = (va, vb) if a.pre_x < b.pre_x else (vb, va)
            work[rear][1] = work[front][1] - body
            work[rear][2] = work[front][2]

    flagged_set = {frozenset(p) for p in flagged}
    lanes: dict[int, list[int]] = {}
    for c in candidates:
        lanes.setdefault(c.lane, []).append(c.vid)
    for lane_vids in lanes.values():
        lane_vids.sort(key=lambda vid: (-work[vid][1], vid))
        for front_vid, rear_vid in zip(lane_vids, lane_vids[1:]):
            limit = work[front_vid][1] - body
            if work[rear_vid][1] > limit:
                work[rear_vid][1] = limit
                if frozenset((front_vid, rear_vid)) in flagged_set:
                    work[rear_vid][2] = work[front_vid][2]
                else:
                    work[rear_vid][2] = min(work[rear_vid][2], work[front_vid][2])

    resolved = [replace(c, lane=work[c.vid][0], x=work[c.vid][1], v=work[c.vid][2])
                for c in candidates]
    return flagged, resolved


# ---------------------------------------------------------------------------
# ramp / main-road exits


def check_ramp_exit(veh: Vehicle, pre_x: float, post_x: float, post_lane: int,
                    grid: RoadGrid) -> str | None:
    """'exit' when the vehicle reaches the intention window in the ramp lane,
    'miss' when it passes the ramp throat in any other lane."""
    if not veh.intends_ramp or veh.missed_ramp or not veh.is_active:
        return None
    window_lo = grid.x_int - grid.int_range
    if post_lane == grid.ramp_lane and pre_x <= grid.x_int and post_x > window_lo:
        return "exit"
    if pre_x <= grid.x_int < post_x:
        return "miss"
    return None


# ---------------------------------------------------------------------------
# the step function


def step(scene: SceneState,
         cav_actions: list[ActionPair]) -> tuple[SceneState, StepOutcome]:
    """Advance one second. `cav_actions` lists one action per CAV slot (in
    roster order); actions of inactive CAVs are ignored."""
    if scene.done:
        raise ContractError("step() called on a finished scene")
    cfg = scene.config
    if len(cav_actions) != len(cfg.cav_slots):
        raise ContractError(
            f"expected {len(cfg.cav_slots)} CAV actions, got {len(cav_actions)}")

    actions: list[ActionPair | None] = [None] * cfg.n_vehicles
    cav_by_slot = dict(zip(cfg.cav_slots, cav_actions))
    for veh in scene.vehicles:
        if not veh.is_active:
            continue
        if veh.is_cav:
            actions[veh.vid] = cav_by_slot[veh.vid]
        else:
            actions[veh.vid] = hdv_control(scene, veh)

    candidates = [apply_action(veh, actions[veh.vid], cfg)
                  for veh in scene.vehicles if veh.is_active]
    pre = {c.vid: c for c in candidates}
    flagged, resolved = detect_collisions(pre, candidates, cfg)

    n_onramp = 0
    for cand in resolved:
        veh = scene.vehicles[cand.vid]
        verdict = check_ramp_exit(veh, cand.pre_x, cand.x, cand.lane, cfg.grid)
        if verdict == "exit":
            veh.status = Status.EXITED_RAMP
            n_onramp += 1
        elif verdict == "miss":
            veh.missed_ramp = True

    reached_end = False
    for cand in resolved:
        veh = scene.vehicles[cand.vid]
        veh.lane, veh.x, veh.v = cand.lane, cand.x, cand.v
        if veh.status is Status.ACTIVE and veh.x >= cfg.grid.l_main:
            veh.status = Status.EXITED_MAIN
        if veh.x >= cfg.grid.l_main:
            reached_end = True
        window = max(cfg.lc_window, 1)
        veh.recent_lc = (veh.recent_lc + (cand.changed_lane,))[-window:]

    collided_vids = {vid for pair in flagged for vid in pair}
    for vid in collided_vids:
        scene.vehicles[vid].collided = True

    stepped = {c.vid for c in resolved}
    n_lc = sum(1 for v in scene.vehicles
               if v.vid in stepped
               and len(v.recent_lc) >= max(cfg.lc_window, 1)
               and all(v.recent_lc))

    speeds = []
    for veh in scene.vehicles:
        if veh.is_active:
            speeds.append(veh.v)
        elif cfg.freeze_last_speed:
            speeds.append(veh.v)
        else:
            speeds.append(cfg.v_max)

    scene.t += 1
    cavs = scene.cavs()
    done = (reached_end
            or (bool(cavs) and all(not v.is_active for v in cavs))
            or scene.t >= cfg.episode_cap)
    scene.done = done
    outcome = StepOutcome(
        n_onramp=n_onramp,
        n_collision=len(flagged),
        n_lc=n_lc,
        speeds=speeds,
        done=done,
        actions=actions,
    )
    return scene, outcome
