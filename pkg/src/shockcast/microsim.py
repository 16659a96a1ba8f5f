"""Multi-lane microscopic traffic simulator.

IDM car-following with MOBIL lane changing on a straight multi-lane
segment, plus two kinds of injected disturbance (a short hard speed drop
and a long slow-moving vehicle).  Units are feet and seconds throughout;
speed limits come in as mph and are converted at the boundary.  Vehicle
state is sampled every tick (0.1 s by default, the connected-vehicle
message cadence) into a columnar trajectory log.

Every run is a pure function of its SimConfig: one seeded generator drives
parameter draws, arrivals, disturbance scheduling, and target selection in
a fixed order, so identical configs produce byte-identical logs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MPH_TO_FTPS = 1.46667

SPEED_LIMITS_MPH = (30, 45, 50, 55, 65, 70, 75)

# explicit-scheme caps; braking beyond -26 ft/s^2 (~0.8 g) is unphysical
ACCEL_MIN = -26.0
ACCEL_MAX = 13.0

LANE_CHANGE_COOLDOWN_S = 4.0

# per-vehicle parameter ranges (uniform draws)
T_RANGE = (1.0, 2.0)            # desired time headway, s
A_RANGE = (2.6, 4.9)            # max acceleration, ft/s^2
B_RANGE = (3.3, 6.6)            # comfortable deceleration, ft/s^2
S0_RANGE = (3.3, 9.8)           # standstill gap, ft
LENGTH_RANGE = (14.0, 16.0)     # vehicle length, ft
V0_FACTOR_RANGE = (0.9, 1.1)    # desired speed as a multiple of the limit
POLITENESS_RANGE = (0.2, 0.5)
ACCEL_EXPONENT = 4.0
LANE_CHANGE_THRESHOLD = 0.33    # ft/s^2
SAFE_DECEL_LIMIT = 13.1         # ft/s^2

# inflow process
FLOW_RANGE_VPHPL = (1200.0, 2200.0)
MIN_ENTRY_HEADWAY_S = 1.0

# disturbance scheduling
SPEED_DROP_COUNT_RANGE = (1, 4)      # inclusive
SLOW_VEHICLE_COUNT_RANGE = (0, 2)    # inclusive
SPEED_DROP_DURATION_S = 15.0
SLOW_VEHICLE_DURATION_S = 300.0
SPEED_DROP_FRACTION = 0.3
SLOW_SPEED_RANGE_FTPS = (8.0, 22.0)
DISTURBANCE_WINDOW_S = 20.0


class SimulationCollisionError(RuntimeError):
    """A gap closed to zero or less; carries the run seed and time."""

    def __init__(self, seed, time_s, lane):
        super().__init__(
            f"collision in run seed={seed} at t={time_s:.1f}s lane={lane}"
        )
        self.seed = seed
        self.time_s = time_s
        self.lane = lane


@dataclass
class DriverParams:
    """Car-following and lane-changing parameters of one driver."""

    desired_speed: float        # v0, ft/s
    time_headway: float         # T, s
    max_accel: float            # a, ft/s^2
    comfortable_decel: float    # b, ft/s^2
    min_gap: float              # s0, ft
    accel_exponent: float       # delta
    politeness: float           # p
    lane_change_threshold: float  # ft/s^2
    safe_decel_limit: float     # ft/s^2
    vehicle_length: float       # L, ft

    def __post_init__(self):
        ok = (
            self.desired_speed > 0 and self.time_headway > 0 and self.max_accel > 0
            and self.comfortable_decel > 0 and self.min_gap > 0
            and self.vehicle_length > 0 and 0 <= self.politeness <= 1
            and self.safe_decel_limit > 0
        )
        if not ok:
            raise ValueError(f"invalid driver parameters: {self}")


@dataclass
class VehicleState:
    """Instantaneous state of one vehicle (front-bumper position)."""

    id: int
    lane: int
    position: float
    speed: float
    params: DriverParams


@dataclass
class DisturbanceEvent:
    """One scheduled perturbation.

    target_speed is fixed at schedule time for a slow vehicle; for a speed
    drop it stays None and is resolved to 0.3x the target's current speed
    when the event fires.
    """

    kind: str            # "SpeedDrop" | "SlowVehicle"
    start_time: float    # s
    duration: float      # s
    target_speed: float | None = None

    def __post_init__(self):
        if self.kind not in ("SpeedDrop", "SlowVehicle"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.duration <= 0:
            raise ValueError("disturbance duration must be positive")


@dataclass
class SimConfig:
    """Full description of one run; seed makes the run reproducible."""

    seed: int
    speed_limit_mph: float | None = None   # drawn from SPEED_LIMITS_MPH when None
    duration_s: float = 900.0
    road_length_ft: float = 40000.0
    lanes: int = 3
    dt_s: float = 0.1
    inflow_vphpl: float | None = None      # drawn from FLOW_RANGE_VPHPL when None
    disturbances: list[DisturbanceEvent] | None = None  # scheduled when None

    def __post_init__(self):
        if self.dt_s <= 0:
            raise ValueError("dt must be positive")
        steps = self.duration_s / self.dt_s
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("duration must be an integral number of ticks")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration_s / self.dt_s))

    def to_json_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "speed_limit_mph": self.speed_limit_mph,
            "duration_s": self.duration_s,
            "road_length_ft": self.road_length_ft,
            "lanes": self.lanes,
            "dt_s": self.dt_s,
            "inflow_vphpl": self.inflow_vphpl,
            "disturbances": None if self.disturbances is None else [
                {"kind": d.kind, "start_time": d.start_time,
                 "duration": d.duration, "target_speed": d.target_speed}
                for d in self.disturbances
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SimConfig":
        dist = d.get("disturbances")
        events = None if dist is None else [
            DisturbanceEvent(kind=e["kind"], start_time=e["start_time"],
                             duration=e["duration"], target_speed=e.get("target_speed"))
            for e in dist
        ]
        return cls(
            seed=d["seed"],
            speed_limit_mph=d.get("speed_limit_mph"),
            duration_s=d.get("duration_s", 900.0),
            road_length_ft=d.get("road_length_ft", 40000.0),
            lanes=d.get("lanes", 3),
            dt_s=d.get("dt_s", 0.1),
            inflow_vphpl=d.get("inflow_vphpl"),
            disturbances=events,
        )


# ---------------------------------------------------------------------------
# car-following and lane-change primitives
# ---------------------------------------------------------------------------

def idm_acceleration(v: float, v_lead: float, gap: float, params: DriverParams) -> float:
    """IDM acceleration toward a leader at the given net gap.

    accel = a * (1 - (v/v0)^delta - (s*/gap)^2) with
    s* = s0 + v*T + v*(v - v_lead) / (2*sqrt(a*b)).
    """
    if gap <= 0:
        raise ValueError(f"gap must be positive, got {gap} (collision state)")
    if v < 0:
        raise ValueError(f"speed must be non-negative, got {v}")
    p = params
    s_star = p.min_gap + v * p.time_headway + v * (v - v_lead) / (
        2.0 * np.sqrt(p.max_accel * p.comfortable_decel)
    )
    return float(p.max_accel * (
        1.0 - (v / p.desired_speed) ** p.accel_exponent - (s_star / gap) ** 2
    ))


def free_road_acceleration(v: float, params: DriverParams) -> float:
    """IDM free-flow term for a leaderless vehicle: a * (1 - (v/v0)^delta)."""
    if v < 0:
        raise ValueError(f"speed must be non-negative, got {v}")
    return float(params.max_accel * (1.0 - (v / params.desired_speed) ** params.accel_exponent))


def _accel_toward(subject: VehicleState, leader: VehicleState | None) -> float:
    if leader is None:
        return free_road_acceleration(subject.speed, subject.params)
    gap = leader.position - leader.params.vehicle_length - subject.position
    return idm_acceleration(subject.speed, leader.speed, gap, subject.params)


def mobil_decide(subject: VehicleState, current_neighbors, target_neighbors) -> str:
    """MOBIL lane-change decision for one vehicle.

    current_neighbors is (leader, follower) in the subject's lane;
    target_neighbors maps "left"/"right" to (leader, follower) tuples for
    candidate lanes (omit or map to None when there is no such lane).
    Returns "Stay", "ChangeLeft", or "ChangeRight"; a tie between equally
    attractive sides goes left.
    """
    cur_leader, cur_follower = current_neighbors
    p = subject.params
    a_c = _accel_toward(subject, cur_leader)

    # old follower's terms are shared by both candidate directions
    if cur_follower is not None:
        a_o = _accel_toward(cur_follower, subject)
        a_o_new = _accel_toward(cur_follower, cur_leader)
    else:
        a_o = a_o_new = 0.0

    best = ("Stay", -np.inf)
    for direction in ("left", "right"):
        neigh = target_neighbors.get(direction)
        if neigh is None:
            continue
        new_leader, new_follower = neigh
        if new_leader is not None:
            gap_lead = new_leader.position - new_leader.params.vehicle_length - subject.position
            if gap_lead <= 0:
                continue
        if new_follower is not None:
            gap_foll = subject.position - p.vehicle_length - new_follower.position
            if gap_foll <= 0:
                continue
            a_n = _accel_toward(new_follower, new_leader)
            a_n_new = idm_acceleration(new_follower.speed, subject.speed, gap_foll,
                                       new_follower.params)
            if a_n_new < -new_follower.params.safe_decel_limit:
                continue  # safety criterion violated
        else:
            a_n = a_n_new = 0.0
        a_c_new = _accel_toward(subject, new_leader)
        incentive = a_c_new - a_c + p.politeness * ((a_n_new - a_n) + (a_o_new - a_o))
        if incentive <= p.lane_change_threshold:
            continue
        label = "ChangeLeft" if direction == "left" else "ChangeRight"
        # strict > keeps the earlier (left) candidate on ties
        if incentive > best[1]:
            best = (label, incentive)
    return best[0]


def sample_driver_params(rng: np.random.Generator, speed_limit_mph: float) -> DriverParams:
    """Draw one driver's parameters; desired speed is centered on the limit."""
    return DriverParams(
        desired_speed=speed_limit_mph * MPH_TO_FTPS * rng.uniform(*V0_FACTOR_RANGE),
        time_headway=rng.uniform(*T_RANGE),
        max_accel=rng.uniform(*A_RANGE),
        comfortable_decel=rng.uniform(*B_RANGE),
        min_gap=rng.uniform(*S0_RANGE),
        accel_exponent=ACCEL_EXPONENT,
        politeness=rng.uniform(*POLITENESS_RANGE),
        lane_change_threshold=LANE_CHANGE_THRESHOLD,
        safe_decel_limit=SAFE_DECEL_LIMIT,
        vehicle_length=rng.uniform(*LENGTH_RANGE),
    )


def schedule_disturbances(rng: np.random.Generator, duration_s: float = 900.0) -> list[DisturbanceEvent]:
    """Draw the run's disturbance schedule.

    Start times fall strictly inside 20 s windows (20i, 20i+20) with even i,
    one event per window at most, so window pairing can keep every onset out
    of the prediction targets.
    """
    if duration_s != 900.0:
        raise ValueError("disturbance scheduling is defined for 900 s runs")
    eligible_i = np.arange(0, 45, 2)  # even i in [0, 44]
    n_drop = int(rng.integers(SPEED_DROP_COUNT_RANGE[0], SPEED_DROP_COUNT_RANGE[1] + 1))
    n_slow = int(rng.integers(SLOW_VEHICLE_COUNT_RANGE[0], SLOW_VEHICLE_COUNT_RANGE[1] + 1))
    windows = rng.choice(eligible_i, size=n_drop + n_slow, replace=False)
    events = []
    for idx, i in enumerate(windows):
        start = DISTURBANCE_WINDOW_S * float(i) + rng.uniform(0.1, DISTURBANCE_WINDOW_S - 0.1)
        if idx < n_drop:
            events.append(DisturbanceEvent("SpeedDrop", start, SPEED_DROP_DURATION_S, None))
        else:
            events.append(DisturbanceEvent(
                "SlowVehicle", start, SLOW_VEHICLE_DURATION_S,
                float(rng.uniform(*SLOW_SPEED_RANGE_FTPS)),
            ))
    events.sort(key=lambda e: e.start_time)
    return events


# ---------------------------------------------------------------------------
# world state
# ---------------------------------------------------------------------------

@dataclass
class _PendingArrival:
    params: DriverParams
    entry_time: float


@dataclass
class SimulationState:
    """Mutable world arrays plus the run bookkeeping."""

    config: SimConfig
    rng: np.random.Generator
    speed_limit_mph: float
    inflow_vphpl: float
    disturbances: list[DisturbanceEvent]
    # per-vehicle arrays, unordered
    ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    lane: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    pos: np.ndarray = field(default_factory=lambda: np.empty(0))
    speed: np.ndarray = field(default_factory=lambda: np.empty(0))
    v0: np.ndarray = field(default_factory=lambda: np.empty(0))
    T: np.ndarray = field(default_factory=lambda: np.empty(0))
    a_max: np.ndarray = field(default_factory=lambda: np.empty(0))
    b_comf: np.ndarray = field(default_factory=lambda: np.empty(0))
    s0: np.ndarray = field(default_factory=lambda: np.empty(0))
    length: np.ndarray = field(default_factory=lambda: np.empty(0))
    politeness: np.ndarray = field(default_factory=lambda: np.empty(0))
    last_change: np.ndarray = field(default_factory=lambda: np.empty(0))
    next_id: int = 0
    total_spawned: int = 0
    pending: dict[int, _PendingArrival] = field(default_factory=dict)
    # active overrides: vehicle id -> (end_time, target_speed)
    overrides: dict[int, tuple[float, float]] = field(default_factory=dict)
    pending_events: list[DisturbanceEvent] = field(default_factory=list)

    def vehicle_count(self) -> int:
        return self.ids.size

    def vehicle_state(self, idx: int) -> VehicleState:
        return VehicleState(
            id=int(self.ids[idx]),
            lane=int(self.lane[idx]),
            position=float(self.pos[idx]),
            speed=float(self.speed[idx]),
            params=DriverParams(
                desired_speed=float(self.v0[idx]),
                time_headway=float(self.T[idx]),
                max_accel=float(self.a_max[idx]),
                comfortable_decel=float(self.b_comf[idx]),
                min_gap=float(self.s0[idx]),
                accel_exponent=ACCEL_EXPONENT,
                politeness=float(self.politeness[idx]),
                lane_change_threshold=LANE_CHANGE_THRESHOLD,
                safe_decel_limit=SAFE_DECEL_LIMIT,
                vehicle_length=float(self.length[idx]),
            ),
        )

    def _append_vehicle(self, lane: int, pos: float, speed: float, params: DriverParams, t: float):
        self.ids = np.append(self.ids, self.next_id)
        self.lane = np.append(self.lane, lane)
        self.pos = np.append(self.pos, pos)
        self.speed = np.append(self.speed, speed)
        self.v0 = np.append(self.v0, params.desired_speed)
        self.T = np.append(self.T, params.time_headway)
        self.a_max = np.append(self.a_max, params.max_accel)
        self.b_comf = np.append(self.b_comf, params.comfortable_decel)
        self.s0 = np.append(self.s0, params.min_gap)
        self.length = np.append(self.length, params.vehicle_length)
        self.politeness = np.append(self.politeness, params.politeness)
        self.last_change = np.append(self.last_change, -np.inf)
        self.next_id += 1
        self.total_spawned += 1

    def _remove_indices(self, mask_keep: np.ndarray):
        removed_ids = self.ids[~mask_keep]
        for name in ("ids", "lane", "pos", "speed", "v0", "T", "a_max", "b_comf",
                     "s0", "length", "politeness", "last_change"):
            setattr(self, name, getattr(self, name)[mask_keep])
        for rid in removed_ids:
            self.overrides.pop(int(rid), None)


def _init_state(config: SimConfig) -> SimulationState:
    rng = np.random.default_rng(config.seed)
    # fixed draw order: limit, inflow, schedule, then per-lane arrival seeds
    limit = config.speed_limit_mph
    if limit is None:
        limit = float(rng.choice(np.asarray(SPEED_LIMITS_MPH, dtype=float)))
    inflow = config.inflow_vphpl
    if inflow is None:
        inflow = float(rng.uniform(*FLOW_RANGE_VPHPL))
    if config.disturbances is None:
        if config.duration_s == 900.0:
            events = schedule_disturbances(rng, config.duration_s)
        else:
            events = []  # short diagnostic runs carry no scheduled disturbances
    else:
        events = list(config.disturbances)
    state = SimulationState(
        config=config, rng=rng, speed_limit_mph=limit, inflow_vphpl=inflow,
        disturbances=events, pending_events=sorted(events, key=lambda e: e.start_time),
    )
    mean_headway = 3600.0 / inflow
    for lane in range(config.lanes):
        entry = MIN_ENTRY_HEADWAY_S + rng.exponential(max(mean_headway - MIN_ENTRY_HEADWAY_S, 1e-6))
        state.pending[lane] = _PendingArrival(sample_driver_params(rng, limit), entry)
    return state


# ---------------------------------------------------------------------------
# vectorized IDM/MOBIL machinery
# ---------------------------------------------------------------------------

def _idm_accel_vec(v, v0, T, a, b, s0, lead_v, gap, has_leader):
    """Vectorized IDM; entries without a leader get the free-flow term."""
    free = a * (1.0 - (v / v0) ** ACCEL_EXPONENT)
    safe_gap = np.where(has_leader & (gap > 0), gap, 1.0)
    s_star = s0 + v * T + v * (v - lead_v) / (2.0 * np.sqrt(a * b))
    inter = a * (1.0 - (v / v0) ** ACCEL_EXPONENT - (s_star / safe_gap) ** 2)
    return np.where(has_leader, inter, free)


def _adjacent_lane_neighbors(pos_sorted_by_lane, order_by_lane, query_pos, query_lane):
    """Leader/follower indices for query points NOT present in the queried lane.

    pos_sorted_by_lane maps lane -> sorted positions; order_by_lane maps
    lane -> original indices in that sort order.  Returns (leader_idx,
    follower_idx) with -1 where absent.
    """
    n = query_pos.size
    leader = np.full(n, -1, dtype=np.int64)
    follower = np.full(n, -1, dtype=np.int64)
    for ln, positions in pos_sorted_by_lane.items():
        sel = np.nonzero(query_lane == ln)[0]
        if sel.size == 0 or positions.size == 0:
            continue
        j = np.searchsorted(positions, query_pos[sel], side="right")
        has_lead = j < positions.size
        leader[sel[has_lead]] = order_by_lane[ln][j[has_lead]]
        has_foll = j > 0
        follower[sel[has_foll]] = order_by_lane[ln][j[has_foll] - 1]
    return leader, follower


def _own_lane_neighbors(state, order_by_lane):
    """Leader/follower of every vehicle within its own lane (-1 where absent)."""
    n = state.vehicle_count()
    leader = np.full(n, -1, dtype=np.int64)
    follower = np.full(n, -1, dtype=np.int64)
    for order in order_by_lane.values():
        if order.size >= 2:
            leader[order[:-1]] = order[1:]
            follower[order[1:]] = order[:-1]
    return leader, follower


def _gather(arr, idx, fill):
    out = np.full(idx.shape, fill, dtype=float)
    valid = idx >= 0
    out[valid] = arr[idx[valid]]
    return out


def _lane_tables(state):
    tables_pos = {}
    tables_idx = {}
    for ln in range(state.config.lanes):
        sel = np.nonzero(state.lane == ln)[0]
        order = sel[np.argsort(state.pos[sel], kind="stable")]
        tables_idx[ln] = order
        tables_pos[ln] = state.pos[order]
    return tables_pos, tables_idx


def _candidate_incentives(state, direction, tables_pos, tables_idx,
                          a_current, a_old_foll_now, a_old_foll_after,
                          own_follower):
    """Incentive of changing one lane over (+1 left, -1 right); -inf if invalid."""
    target_lane = state.lane + direction
    valid = (target_lane >= 0) & (target_lane < state.config.lanes)
    new_leader, new_follower = _adjacent_lane_neighbors(
        tables_pos, tables_idx, state.pos, target_lane
    )
    new_leader[~valid] = -1
    new_follower[~valid] = -1

    gap_lead = _gather(state.pos, new_leader, np.inf) - _gather(state.length, new_leader, 0.0) - state.pos
    gap_foll = state.pos - state.length - _gather(state.pos, new_follower, -np.inf)
    ok = valid & (gap_lead > 0) & (gap_foll > 0)

    # subject's prospective acceleration behind the new leader
    a_new = _idm_accel_vec(
        state.speed, state.v0, state.T, state.a_max, state.b_comf, state.s0,
        _gather(state.speed, new_leader, 0.0), gap_lead, new_leader >= 0,
    )

    # new follower: now (behind new_leader) vs after (behind the subject)
    nf = new_follower
    has_nf = nf >= 0
    nf_speed = _gather(state.speed, nf, 0.0)
    nf_v0 = _gather(state.v0, nf, 1.0)
    nf_T = _gather(state.T, nf, 1.0)
    nf_a = _gather(state.a_max, nf, 1.0)
    nf_b = _gather(state.b_comf, nf, 1.0)
    nf_s0 = _gather(state.s0, nf, 1.0)
    nf_gap_now = (_gather(state.pos, new_leader, np.inf)
                  - _gather(state.length, new_leader, 0.0)
                  - _gather(state.pos, nf, 0.0))
    a_nf_now = _idm_accel_vec(nf_speed, nf_v0, nf_T, nf_a, nf_b, nf_s0,
                              _gather(state.speed, new_leader, 0.0),
                              nf_gap_now, has_nf & (new_leader >= 0))
    a_nf_now = np.where(has_nf, a_nf_now, 0.0)
    a_nf_after = _idm_accel_vec(nf_speed, nf_v0, nf_T, nf_a, nf_b, nf_s0,
                                state.speed, gap_foll, has_nf)
    a_nf_after = np.where(has_nf, a_nf_after, 0.0)

    safety = ~has_nf | (a_nf_after >= -SAFE_DECEL_LIMIT)

    d_old = np.where(own_follower >= 0, a_old_foll_after - a_old_foll_now, 0.0)
    incentive = (a_new - a_current) + state.politeness * ((a_nf_after - a_nf_now) + d_old)
    incentive = np.where(ok & safety, incentive, -np.inf)
    return incentive, new_leader, new_follower


def _apply_lane_changes(state, t):
    """Evaluate MOBIL for all eligible vehicles and apply winners sequentially."""
    n = state.vehicle_count()
    if n == 0:
        return
    eligible = (t - state.last_change) >= LANE_CHANGE_COOLDOWN_S
    for vid in state.overrides:
        eligible &= state.ids != vid  # disturbed vehicles hold their lane
    if not eligible.any():
        return

    tables_pos, tables_idx = _lane_tables(state)
    own_leader, own_follower = _own_lane_neighbors(state, tables_idx)

    gap_own = _gather(state.pos, own_leader, np.inf) - _gather(state.length, own_leader, 0.0) - state.pos
    a_current = _idm_accel_vec(
        state.speed, state.v0, state.T, state.a_max, state.b_comf, state.s0,
        _gather(state.speed, own_leader, 0.0), gap_own, own_leader >= 0,
    )

    # old follower now (behind subject) vs after the subject leaves (behind
    # the subject's current leader)
    of = own_follower
    has_of = of >= 0
    of_speed = _gather(state.speed, of, 0.0)
    of_v0 = _gather(state.v0, of, 1.0)
    of_T = _gather(state.T, of, 1.0)
    of_a = _gather(state.a_max, of, 1.0)
    of_b = _gather(state.b_comf, of, 1.0)
    of_s0 = _gather(state.s0, of, 1.0)
    of_gap_now = state.pos - state.length - _gather(state.pos, of, 0.0)
    a_of_now = _idm_accel_vec(of_speed, of_v0, of_T, of_a, of_b, of_s0,
                              state.speed, of_gap_now, has_of)
    of_gap_after = (_gather(state.pos, own_leader, np.inf)
                    - _gather(state.length, own_leader, 0.0)
                    - _gather(state.pos, of, 0.0))
    a_of_after = _idm_accel_vec(of_speed, of_v0, of_T, of_a, of_b, of_s0,
                                _gather(state.speed, own_leader, 0.0),
                                of_gap_after, has_of & (own_leader >= 0))
    a_of_now = np.where(has_of, a_of_now, 0.0)
    a_of_after = np.where(has_of, a_of_after, 0.0)

    inc_left, _, _ = _candidate_incentives(
        state, +1, tables_pos, tables_idx, a_current,
        a_of_now, a_of_after, own_follower)
    inc_right, _, _ = _candidate_incentives(
        state, -1, tables_pos, tables_idx, a_current,
        a_of_now, a_of_after, own_follower)

    threshold = LANE_CHANGE_THRESHOLD
    go_left = eligible & (inc_left > threshold) & (inc_left >= inc_right)
    go_right = eligible & (inc_right > threshold) & ~go_left
    movers = np.nonzero(go_left | go_right)[0]
    if movers.size == 0:
        return

    # apply downstream-first, rechecking gaps against the evolving state so
    # two movers never land on top of each other
    movers = movers[np.argsort(-state.pos[movers])]
    for i in movers:
        target = int(state.lane[i] + (1 if go_left[i] else -1))
        in_target = np.nonzero(state.lane == target)[0]
        ahead_ok = behind_ok = True
        if in_target.size:
            p = state.pos[in_target]
            ahead = in_target[p > state.pos[i]]
            behind = in_target[p <= state.pos[i]]
            if ahead.size:
                j = ahead[np.argmin(state.pos[ahead])]
                ahead_ok = state.pos[j] - state.length[j] - state.pos[i] > 0
            if behind.size:
                j = behind[np.argmax(state.pos[behind])]
                behind_ok = state.pos[i] - state.length[i] - state.pos[j] > 0
        if ahead_ok and behind_ok:
            state.lane[i] = target
            state.last_change[i] = t


def _spawn_vehicles(state, t):
    cfg = state.config
    mean_headway = 3600.0 / state.inflow_vphpl
    for ln in range(cfg.lanes):
        arrival = state.pending[ln]
        if t < arrival.entry_time:
            continue
        params = arrival.params
        in_lane = np.nonzero(state.lane == ln)[0]
        if in_lane.size:
            j = in_lane[np.argmin(state.pos[in_lane])]
            gap = state.pos[j] - state.length[j] - 0.0
            lead_speed = state.speed[j]
            # lead-safe speed: can brake comfortably to the leader's speed
            # within the available gap
            safe = float(np.sqrt(max(lead_speed ** 2 + 2.0 * params.comfortable_decel
                                     * (gap - params.min_gap), 0.0)))
            entry_speed = min(params.desired_speed, safe)
        else:
            gap = np.inf
            entry_speed = params.desired_speed
        if gap > params.min_gap + entry_speed * params.time_headway:
            state._append_vehicle(ln, 0.0, entry_speed, params, t)
            entry = t + MIN_ENTRY_HEADWAY_S + state.rng.exponential(
                max(mean_headway - MIN_ENTRY_HEADWAY_S, 1e-6))
            state.pending[ln] = _PendingArrival(
                sample_driver_params(state.rng, state.speed_limit_mph), entry)
        # otherwise the arrival waits at the gate and retries next tick


def _fire_disturbances(state, t):
    cfg = state.config
    while state.pending_events and state.pending_events[0].start_time <= t:
        event = state.pending_events.pop(0)
        lo, hi = cfg.road_length_ft * 0.25, cfg.road_length_ft * 0.75
        candidates = np.nonzero((state.pos >= lo) & (state.pos <= hi))[0]
        if candidates.size == 0:
            continue  # nobody mid-segment yet; the event fizzles
        candidates = candidates[np.argsort(state.ids[candidates])]
        pick = candidates[int(state.rng.integers(candidates.size))]
        vid = int(state.ids[pick])
        if event.kind == "SpeedDrop":
            target = SPEED_DROP_FRACTION * float(state.speed[pick])
        else:
            target = float(event.target_speed)
        state.overrides[vid] = (event.start_time + event.duration, target)


def _expire_overrides(state, t):
    done = [vid for vid, (end, _) in state.overrides.items() if t >= end]
    for vid in done:
        del state.overrides[vid]


def step(state: SimulationState, t: float, dt: float) -> SimulationState:
    """Advance the world one tick: lane changes, accelerations, kinematics.

    Disturbance overrides cap the target vehicle's command; speeds clamp at
    zero; vehicles past the end of the segment are removed and new ones
    enter per the inflow process.  Raises on any gap closing to zero.
    """
    cfg = state.config
    _expire_overrides(state, t)
    _fire_disturbances(state, t)
    _apply_lane_changes(state, t)

    n = state.vehicle_count()
    if n:
        _, tables_idx = _lane_tables(state)
        leader, _ = _own_lane_neighbors(state, tables_idx)
        gap = _gather(state.pos, leader, np.inf) - _gather(state.length, leader, 0.0) - state.pos
        accel = _idm_accel_vec(
            state.speed, state.v0, state.T, state.a_max, state.b_comf, state.s0,
            _gather(state.speed, leader, 0.0), gap, leader >= 0,
        )
        if state.overrides:
            for vid, (_, target) in state.overrides.items():
                sel = np.nonzero(state.ids == vid)[0]
                if sel.size:
                    i = sel[0]
                    cmd = np.clip((target - state.speed[i]) / dt,
                                  -state.b_comf[i], state.a_max[i])
                    accel[i] = min(accel[i], cmd)
        accel = np.clip(accel, ACCEL_MIN, ACCEL_MAX)

        v_new = np.maximum(state.speed + accel * dt, 0.0)
        dx = np.where(
            v_new > 0.0,
            state.speed * dt + 0.5 * accel * dt * dt,
            np.where(accel < 0.0, -state.speed ** 2 / (2.0 * np.minimum(accel, -1e-12)), 0.0),
        )
        state.pos = state.pos + np.maximum(dx, 0.0)
        state.speed = v_new

        keep = state.pos < cfg.road_length_ft
        if not keep.all():
            state._remove_indices(keep)

    _spawn_vehicles(state, t)

    # collision audit: within each lane every net gap must stay positive
    if state.vehicle_count():
        order = np.lexsort((state.pos, state.lane))
        lanes_o = state.lane[order]
        pos_o = state.pos[order]
        len_o = state.length[order]
        same = lanes_o[1:] == lanes_o[:-1]
        gaps = pos_o[1:] - len_o[1:] - pos_o[:-1]
        bad = same & (gaps <= 0)
        if bad.any():
            k = int(np.nonzero(bad)[0][0])
            raise SimulationCollisionError(cfg.seed, t + dt, int(lanes_o[k]))
    return state


# ---------------------------------------------------------------------------
# trajectory logs
# ---------------------------------------------------------------------------

CSV_HEADER = "run_id,time_s,vehicle_id,lane,position_ft,speed_ftps"


@dataclass
class TrajectorySample:
    """One sampled observation of one vehicle."""

    run_id: int
    time_s: float
    vehicle_id: int
    lane: int
    position_ft: float
    speed_ftps: float


@dataclass
class TrajectoryLog:
    """Columnar trajectory record of one run, sampled every tick."""

    run_id: int
    dt_s: float
    duration_s: float
    road_length_ft: float
    lanes: int
    speed_limit_mph: float
    inflow_vphpl: float
    time_index: np.ndarray   # int32 tick number; time = index * dt
    vehicle_id: np.ndarray   # int32
    lane: np.ndarray         # int16
    position_ft: np.ndarray  # float64
    speed_ftps: np.ndarray   # float64
    total_vehicles: int = 0

    def __len__(self):
        return self.time_index.size

    def samples(self):
        for k in range(len(self)):
            yield TrajectorySample(
                run_id=self.run_id,
                time_s=float(self.time_index[k]) * self.dt_s,
                vehicle_id=int(self.vehicle_id[k]),
                lane=int(self.lane[k]),
                position_ft=float(self.position_ft[k]),
                speed_ftps=float(self.speed_ftps[k]),
            )

    def to_csv(self, path) -> None:
        """Rows sorted by time then vehicle id; time printed with one decimal."""
        with open(path, "w", newline="") as fh:
            fh.write(CSV_HEADER + "\n")
            run = self.run_id
            dt = self.dt_s
            chunks = []
            for k in range(len(self)):
                chunks.append(
                    f"{run},{self.time_index[k] * dt:.1f},{self.vehicle_id[k]},"
                    f"{self.lane[k]},{float(self.position_ft[k])!r},{float(self.speed_ftps[k])!r}\n"
                )
                if len(chunks) >= 100_000:
                    fh.write("".join(chunks))
                    chunks = []
            fh.write("".join(chunks))

    @classmethod
    def from_csv(cls, path, dt_s: float = 0.1, road_length_ft: float = 40000.0,
                 lanes: int = 3) -> "TrajectoryLog":
        times, vids, lns, poss, spds = [], [], [], [], []
        run_id = 0
        with open(path) as fh:
            header = fh.readline().strip()
            if header != CSV_HEADER:
                raise ValueError(f"{path}: unexpected header {header!r}")
            for lineno, line in enumerate(fh, start=2):
                parts = line.rstrip("\n").split(",")
                if len(parts) != 6:
                    raise ValueError(f"{path}:{lineno}: malformed row {line!r}")
                try:
                    run_id = int(parts[0])
                    times.append(round(float(parts[1]) / dt_s))
                    vids.append(int(parts[2]))
                    lns.append(int(parts[3]))
                    poss.append(float(parts[4]))
                    spds.append(float(parts[5]))
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: malformed row: {exc}") from exc
        time_index = np.asarray(times, dtype=np.int32)
        duration = (int(time_index.max()) + 1) * dt_s if time_index.size else 0.0
        vid_arr = np.asarray(vids, dtype=np.int32)
        return cls(
            run_id=run_id, dt_s=dt_s, duration_s=duration,
            road_length_ft=road_length_ft, lanes=lanes,
            speed_limit_mph=0.0, inflow_vphpl=0.0,
            time_index=time_index,
            vehicle_id=vid_arr,
            lane=np.asarray(lns, dtype=np.int16),
            position_ft=np.asarray(poss),
            speed_ftps=np.asarray(spds),
            total_vehicles=int(np.unique(vid_arr).size) if vid_arr.size else 0,
        )


def run_simulation(config: SimConfig) -> TrajectoryLog:
    """Execute one run and return its sampled trajectory log."""
    state = _init_state(config)
    n_steps = config.n_steps
    dt = config.dt_s

    t_idx_parts, vid_parts, lane_parts, pos_parts, spd_parts = [], [], [], [], []
    for k in range(n_steps):
        n = state.vehicle_count()
        if n:
            order = np.argsort(state.ids, kind="stable")
            t_idx_parts.append(np.full(n, k, dtype=np.int32))
            vid_parts.append(state.ids[order].astype(np.int32))
            lane_parts.append(state.lane[order].astype(np.int16))
            pos_parts.append(state.pos[order].copy())
            spd_parts.append(state.speed[order].copy())
        if k < n_steps - 1:
            step(state, k * dt, dt)

    def _cat(parts, dtype):
        return np.concatenate(parts) if parts else np.empty(0, dtype=dtype)

    return TrajectoryLog(
        run_id=config.seed,
        dt_s=dt,
        duration_s=config.duration_s,
        road_length_ft=config.road_length_ft,
        lanes=config.lanes,
        speed_limit_mph=state.speed_limit_mph,
        inflow_vphpl=state.inflow_vphpl,
        time_index=_cat(t_idx_parts, np.int32),
        vehicle_id=_cat(vid_parts, np.int32),
        lane=_cat(lane_parts, np.int16),
        position_ft=_cat(pos_parts, float),
        speed_ftps=_cat(spd_parts, float),
        total_vehicles=state.total_spawned,
    )


def equilibrium_gap(v: float, params: DriverParams) -> float:
    """Net gap at which IDM acceleration is zero for steady following at v."""
    p = params
    s_star = p.min_gap + v * p.time_headway  # zero closing speed
    denom = 1.0 - (v / p.desired_speed) ** p.accel_exponent
    if denom <= 0:
        raise ValueError("no equilibrium exists at or above the desired speed")
    return float(s_star / np.sqrt(denom))
