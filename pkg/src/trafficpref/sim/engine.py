"""Discrete-time grid simulator with IDM-style car following.

Lanes end at a stop line ``link_length`` metres from their start. A vehicle
crossing the stop line is moved onto the downstream lane of its movement, or
retired when the movement leaves the grid. Vehicles on a lane are kept in
strict order; only the lane-front vehicle interacts with the signal.
"""
from __future__ import annotations

import math
from collections import deque
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .config import SimConfig
from .types import Observation, Phase, PhaseState, Stage, StepEvents

# heading delta (row, col) for vehicles arriving from N, E, S, W
_DELTA = ((1, 0), (0, -1), (-1, 0), (0, 1))
STRAIGHT, LEFT = 0, 1
STOP_SPEED = 0.1
HARSH_BRAKE = -3.0

# phase -> set of (approach, movement) with right of way
PHASE_MOVEMENTS = {
    Phase.EW_STRAIGHT: ((1, STRAIGHT), (3, STRAIGHT)),
    Phase.EW_LEFT: ((1, LEFT), (3, LEFT)),
    Phase.NS_STRAIGHT: ((0, STRAIGHT), (2, STRAIGHT)),
    Phase.NS_LEFT: ((0, LEFT), (2, LEFT)),
}

PENDING, BACKLOG, ACTIVE, DONE = 0, 1, 2, 3


@njit(cache=True)
def _follow_kernel(idx, same, lane, pos, v, dist, tail_pos, tail_v, lane_next, green,
                   link_length, veh_len, min_gap, headway, a_max, b_comfort, b_emergency, v_max, h,
                   crossed):
    """One car-following sub-step over vehicles sorted by (lane, -pos), updated in place.

    Scalar form of ``SimState._leaders`` plus ``SimState._idm`` and the kinematic update.
    The loop runs back to front so every vehicle still sees its leader's old state.
    """
    sq = 2.0 * math.sqrt(a_max * b_comfort)
    for j in range(idx.size - 1, -1, -1):
        i = idx[j]
        p, vi = pos[i], v[i]
        if j > 0 and same[j - 1]:
            ld = idx[j - 1]
            gap = pos[ld] - p - veh_len
            lv = v[ld]
        else:
            d = link_length - p
            ln = lane[i]
            nx = lane_next[ln]
            if not green[ln] and vi * vi / (2.0 * b_emergency) <= d + 1e-9:
                gap, lv = d, 0.0
            elif nx >= 0:
                gap, lv = max(d + tail_pos[nx] - veh_len, 0.0), tail_v[nx]
            else:
                gap, lv = math.inf, 0.0
        s = max(gap, 1e-3)
        s_star = min_gap + max(0.0, vi * headway + vi * (vi - lv) / sq)
        r = vi / v_max
        acc = a_max * (1.0 - r * r * r * r - (s_star / s) ** 2)
        acc = min(max(acc, -b_emergency), a_max)
        vn = min(max(vi + acc * h, 0.0), v_max)
        vn = max(min(vn, gap / h), max(vi - b_emergency * h, 0.0))
        step = min(vn * h, max(gap, 0.0))
        v[i] = vn
        dist[i] += step
        pos[i] = p + step
        crossed[j] = pos[i] > link_length


@njit(cache=True)
def _lane_view_kernel(idx, lane, pos, v, n_lanes):
    """Leader flags and per-lane tail state for vehicles sorted by (lane, -pos)."""
    n = idx.size
    same = np.empty(max(n - 1, 0), dtype=np.bool_)
    front = np.empty(n, dtype=np.bool_)
    tail = np.empty(n, dtype=np.bool_)
    tail_pos = np.full(n_lanes, np.inf)
    tail_v = np.zeros(n_lanes)
    count = np.zeros(n_lanes, dtype=np.int64)
    for j in range(n):
        ln = lane[idx[j]]
        count[ln] += 1
        front[j] = j == 0 or lane[idx[j - 1]] != ln
        if j > 0:
            same[j - 1] = not front[j]
        tail[j] = j == n - 1 or lane[idx[j + 1]] != ln
        if tail[j]:
            tail_pos[ln] = pos[idx[j]]
            tail_v[ln] = v[idx[j]]
    return same, front, tail, tail_pos, tail_v, count


@njit(cache=True)
def _ttc_kernel(idx, same, front, lane, pos, v, green, lane_int, link_length, veh_len,
                stop_speed, cap):
    """Rear-end TTC samples: moving followers first, then moving lane fronts facing red."""
    n = idx.size
    ints = np.empty(2 * n, dtype=np.int64)
    ttc = np.empty(2 * n)
    m = 0
    for rnd in range(2):
        for j in range(n):
            i = idx[j]
            if rnd == 0:
                if j == 0 or not same[j - 1]:
                    continue
                gap = pos[idx[j - 1]] - pos[i] - veh_len
                closing = v[i] - v[idx[j - 1]]
            else:
                if not front[j] or green[lane[i]]:
                    continue
                gap = link_length - pos[i]
                closing = v[i]
            if v[i] < stop_speed:
                continue
            ints[m] = lane_int[lane[i]]
            ttc[m] = min(max(gap, 0.0) / closing, cap) if closing > 0 else cap
            m += 1
    return ints[:m], ttc[:m]


def percentile_lower(values, alpha: float, cap: float) -> float:
    """Sorted-order percentile: element at 1-based rank ceil(alpha*n); empty -> cap."""
    n = len(values)
    if n == 0:
        return float(cap)
    k = max(1, math.ceil(alpha * n - 1e-12))
    return float(np.partition(np.asarray(values, dtype=float), k - 1)[k - 1])


def ttc_statistics(gaps, closing, follower_speed=None, cap: float = 10.0) -> dict:
    """p10/p50 of time-to-collision over (gap, closing speed) follower-leader pairs.

    Pairs whose follower is standing still are left out when ``follower_speed`` is given.
    """
    gaps = np.asarray(gaps, dtype=float)
    closing = np.asarray(closing, dtype=float)
    if follower_speed is not None:
        moving = np.asarray(follower_speed, dtype=float) >= STOP_SPEED
        gaps, closing = gaps[moving], closing[moving]
    ttc = np.full(gaps.shape, float(cap))
    pos = closing > 0
    with np.errstate(over="ignore"):
        ttc[pos] = np.minimum(gaps[pos] / closing[pos], cap)
    return {"p10": percentile_lower(ttc, 0.10, cap), "p50": percentile_lower(ttc, 0.50, cap)}


class Network:
    """Static lane topology of a rows x cols grid."""

    def __init__(self, cfg: SimConfig):
        R, C, J = cfg.grid_rows, cfg.grid_cols, cfg.lanes_per_movement
        self.rows, self.cols, self.lanes_per_movement = R, C, J
        self.n_int = R * C
        self.n_lanes = self.n_int * 4 * 2 * J
        n = self.n_lanes
        self.lane_int = np.zeros(n, dtype=np.int64)
        self.lane_app = np.zeros(n, dtype=np.int64)
        self.lane_mov = np.zeros(n, dtype=np.int64)
        self.lane_next = np.full(n, -1, dtype=np.int64)
        self.entry_lanes: list[int] = []
        for k in range(self.n_int):
            r, c = divmod(k, C)
            for d in range(4):
                dr, dc = _DELTA[d]
                upstream_inside = 0 <= r - dr < R and 0 <= c - dc < C
                for m in (STRAIGHT, LEFT):
                    nd = d if m == STRAIGHT else (d + 3) % 4
                    ndr, ndc = _DELTA[nd]
                    nr, nc = r + ndr, c + ndc
                    for j in range(J):
                        lane = self.lane_id(k, d, m, j)
                        self.lane_int[lane], self.lane_app[lane], self.lane_mov[lane] = k, d, m
                        if 0 <= nr < R and 0 <= nc < C:
                            self.lane_next[lane] = self.lane_id(nr * C + nc, nd, STRAIGHT, j)
                        if not upstream_inside:
                            self.entry_lanes.append(lane)
        # incoming lane/approach bookkeeping for observation aggregates
        self.lane_slot = self.lane_int * 4 + self.lane_app
        # pressure operator: +1 on incoming lanes of (k, d), -1 on lanes they feed
        P = np.zeros((self.n_int * 4, n))
        for lane in range(n):
            slot = self.lane_slot[lane]
            P[slot, lane] += 1.0
        for slot in range(self.n_int * 4):
            lanes = np.flatnonzero(self.lane_slot == slot)
            outs = {int(self.lane_next[l]) for l in lanes if self.lane_next[l] >= 0}
            for o in outs:
                P[slot, o] -= 1.0
        self.pressure_op = P
        self.green_table = np.zeros((4, n), dtype=bool)
        for ph, moves in PHASE_MOVEMENTS.items():
            for d, m in moves:
                self.green_table[int(ph)] |= (self.lane_app == d) & (self.lane_mov == m)

    def lane_id(self, k: int, d: int, m: int, j: int = 0) -> int:
        return ((k * 4 + d) * 2 + m) * self.lanes_per_movement + j

    def links(self) -> list[tuple[int, int]]:
        """(intersection, approach) incoming links; interior ones are shared with a neighbour."""
        return [(k, d) for k in range(self.n_int) for d in range(4)]

    def interior_links(self) -> list[tuple[int, int, int]]:
        """(upstream, downstream, approach) for links joining two intersections."""
        out = []
        for k in range(self.n_int):
            r, c = divmod(k, self.cols)
            for d in range(4):
                dr, dc = _DELTA[d]
                ur, uc = r - dr, c - dc
                if 0 <= ur < self.rows and 0 <= uc < self.cols:
                    out.append((ur * self.cols + uc, k, d))
        return out


def _arrival_schedule(cfg: SimConfig, net: Network) -> tuple[np.ndarray, np.ndarray]:
    """Poisson arrivals per entry lane, each lane with its own RNG stream (thinning for time-varying rates)."""
    seqs = np.random.SeedSequence(cfg.seed).spawn(len(net.entry_lanes))
    lam_max = cfg.arrival_rate_per_entry * cfg.max_rate_multiplier()
    times, lanes = [], []
    for lane, ss in zip(net.entry_lanes, seqs):
        rng = np.random.default_rng(ss)
        share = cfg.left_turn_fraction if net.lane_mov[lane] == LEFT else 1 - cfg.left_turn_fraction
        rate = lam_max * share / cfg.lanes_per_movement
        if rate <= 0:
            continue
        t = 0.0
        while True:
            t += rng.exponential(1.0 / rate)
            if t >= cfg.horizon_s:
                break
            if rng.random() * cfg.max_rate_multiplier() <= cfg.rate_multiplier(t):
                times.append(t)
                lanes.append(lane)
    order = np.lexsort((np.asarray(lanes, dtype=np.int64), np.asarray(times)))
    return np.asarray(times, dtype=float)[order], np.asarray(lanes, dtype=np.int64)[order]


class SimState:
    """Mutable simulator state; advance with :meth:`step`."""

    def __init__(self, cfg: SimConfig, substeps: int = 2):
        cfg.validate()
        self.substeps = substeps
        self.cfg = cfg
        self.net = net = Network(cfg)
        self.t = 0.0
        n = net.n_int
        self.phase = np.zeros(n, dtype=np.int64)
        self.next_phase = np.zeros(n, dtype=np.int64)
        self.stage = [Stage.GREEN] * n
        self.elapsed = np.zeros(n)

        arr_t, arr_lane = _arrival_schedule(cfg, net)
        N = len(arr_t)
        self.n_vehicles = N
        self.arrival = arr_t
        self.entry_lane = arr_lane
        self.lane = arr_lane.copy()
        self.pos = np.zeros(N)
        self.v = np.zeros(N)
        self.a = np.zeros(N)
        self.status = np.zeros(N, dtype=np.int64)
        self.finish = np.full(N, np.nan)
        self.wait = np.zeros(N)
        self.dist = np.zeros(N)
        self.link_enter = np.zeros(N)
        self._next_arrival = 0
        self._n_scheduled = N
        self._backlog: dict[int, deque] = {int(l): deque() for l in net.entry_lanes}

        W = int(round(cfg.window_s / cfg.dt))
        self._W = W
        self._brake_hist = np.zeros((W, n), dtype=np.int64)
        self._thru_hist = np.zeros((W, n), dtype=np.int64)
        self._ttc_hist: deque = deque(maxlen=W)
        self._risk_hist = np.zeros((W, n), dtype=bool)
        self._hist_i = 0

        # episode accumulators
        self.ttc_pool: list[np.ndarray] = []
        self.queue_sum = 0.0
        self._ctx_step = -1
        self._ctx: dict = {}
        self.steps = 0
        self.harsh_total = 0
        self.decisions_total = 0
        self.switches_total = 0
        self._refresh_lane_view()

    # -- signals -------------------------------------------------------
    def phase_state(self, k: int) -> PhaseState:
        return PhaseState(Phase(int(self.phase[k])), self.stage[k], float(self.elapsed[k]))

    def at_decision_point(self, k: int) -> bool:
        return self.stage[k] is Stage.GREEN and self.elapsed[k] >= self.cfg.green_s - 1e-9

    def decision_points(self) -> list[int]:
        return [k for k in range(self.net.n_int) if self.at_decision_point(k)]

    def lane_green(self) -> np.ndarray:
        key = (self.phase.tobytes(), tuple(self.stage))
        cached = getattr(self, "_green_cache", None)
        if cached is not None and cached[0] == key:
            return cached[1]
        g = self.net.green_table[self.phase]  # (n_int, n_lanes) rows per intersection phase
        own = g[self.net.lane_int, np.arange(self.net.n_lanes)]
        is_green = np.array([s is Stage.GREEN for s in self.stage])
        out = own & is_green[self.net.lane_int]
        out.flags.writeable = False
        self._green_cache = (key, out)
        return out

    def _dilemma(self, lanes_mask: np.ndarray) -> np.ndarray:
        """Per-intersection flag: a vehicle on a masked lane reaches the stop line within the
        yellow time at its current speed and could only stop there by braking harshly."""
        cfg, net = self.cfg, self.net
        idx = self._idx
        lane = self.lane[idx]
        pos, v = self.pos[idx], self.v[idx]
        dist = cfg.link_length - pos
        risky = lanes_mask[lane] & (dist > 0) & (v * cfg.yellow_s >= dist) \
            & (v * v / (2 * np.maximum(dist, 1e-9)) > -HARSH_BRAKE)
        return np.bincount(net.lane_int[lane[risky]], minlength=net.n_int) > 0

    def _apply_actions(self, actions, events: StepEvents) -> None:
        self._step_risk = np.zeros(self.net.n_int, dtype=bool)
        losing = np.zeros(self.net.n_lanes, dtype=bool)
        green_before = self.lane_green()
        for k in self.decision_points():
            events.decision_points.append(k)
            self.decisions_total += 1
            a = None if actions is None else actions[k]
            if a is None or int(a) == int(self.phase[k]):
                self.elapsed[k] = 0.0
            else:
                if not 0 <= int(a) < 4:
                    raise ValueError(f"invalid phase {a!r} for intersection {k}")
                self.next_phase[k] = int(a)
                self.stage[k] = Stage.YELLOW
                self.elapsed[k] = 0.0
                events.switches.append(k)
                self.switches_total += 1
                losing |= green_before & (self.net.lane_int == k)
        if losing.any():
            self._step_risk |= self._dilemma(losing)

    def _advance_signals(self) -> None:
        cfg = self.cfg
        self.elapsed += cfg.dt
        for k in range(self.net.n_int):
            if self.stage[k] is Stage.YELLOW and self.elapsed[k] >= cfg.yellow_s - 1e-9:
                self.stage[k], self.elapsed[k] = Stage.ALLRED, 0.0
            elif self.stage[k] is Stage.ALLRED and self.elapsed[k] >= cfg.allred_s - 1e-9:
                self.stage[k], self.elapsed[k] = Stage.GREEN, 0.0
                self.phase[k] = self.next_phase[k]
            elif self.stage[k] is Stage.GREEN:
                self.elapsed[k] = min(self.elapsed[k], cfg.green_s)

    # -- vehicles ------------------------------------------------------
    def _refresh_lane_view(self) -> None:
        """Sort active vehicles by (lane, -pos) and derive leader relations."""
        idx = np.flatnonzero(self.status == ACTIVE)
        if idx.size:
            order = np.lexsort((-self.pos[idx], self.lane[idx]))
            idx = idx[order]
        self._idx = idx
        (self._same, self._front, self._tail, self.tail_pos, self.tail_v,
         self.lane_count) = _lane_view_kernel(idx, self.lane, self.pos, self.v, self.net.n_lanes)

    def _refresh_tails(self) -> None:
        """Update the upstream-most vehicle of each lane when the sort order is unchanged."""
        tails = self._idx[self._tail]
        tl = self.lane[tails]
        self.tail_pos[tl] = self.pos[tails]
        self.tail_v[tl] = self.v[tails]

    def _leaders(self, green: np.ndarray):
        """Gap (bumper to bumper or to stop line) and leader speed for each sorted active vehicle."""
        cfg, cf, net = self.cfg, self.cfg.car_following, self.net
        idx = self._idx
        pos, v, lane = self.pos[idx], self.v[idx], self.lane[idx]
        gap = np.full(idx.size, np.inf)
        lv = np.zeros(idx.size)
        same = self._same
        gap[1:][same] = pos[:-1][same] - pos[1:][same] - cf.vehicle_length
        lv[1:][same] = v[:-1][same]
        f = self._front
        fl, fp, fv = lane[f], pos[f], v[f]
        dist = cfg.link_length - fp
        nxt = net.lane_next[fl]
        has_next = nxt >= 0
        safe_nxt = np.where(has_next, nxt, 0)
        down_gap = np.where(has_next, dist + self.tail_pos[safe_nxt] - cf.vehicle_length, np.inf)
        down_v = np.where(has_next, self.tail_v[safe_nxt], 0.0)
        can_stop = fv * fv / (2 * cf.b_emergency) <= dist + 1e-9
        stopline = ~green[fl] & can_stop
        gap[f] = np.where(stopline, dist, np.maximum(down_gap, 0.0))
        lv[f] = np.where(stopline, 0.0, down_v)
        return gap, lv, stopline

    def _idm(self, v, gap, lv):
        cf = self.cfg.car_following
        s = np.maximum(gap, 1e-3)
        s_star = cf.min_gap + np.maximum(
            0.0, v * cf.headway + v * (v - lv) / (2 * math.sqrt(cf.a_max_accel * cf.b_comfort)))
        inter = (s_star / s) ** 2  # an infinite gap gives exactly zero interaction
        acc = cf.a_max_accel * (1 - (v / cf.v_max) ** 4 - inter)
        return np.minimum(np.maximum(acc, -cf.b_emergency), cf.a_max_accel)

    def _follow_reference(self, h: float, green: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized form of one car-following sub-step: new speeds and advances of the
        sorted active vehicles, without touching the state."""
        cf = self.cfg.car_following
        gap, lv, _ = self._leaders(green)
        v = self.v[self._idx]
        acc = self._idm(v, gap, lv)
        v_new = np.minimum(np.maximum(v + acc * h, 0.0), cf.v_max)
        # never close the gap to the leader's (or stop line's) current position, but do not
        # brake harder than b_emergency; the rare remainder is absorbed by clamping the move
        v_new = np.maximum(np.minimum(v_new, gap / h), np.maximum(v - cf.b_emergency * h, 0.0))
        return v_new, np.minimum(v_new * h, np.maximum(gap, 0.0))

    def _insert_backlog(self, t_end: float, events: StepEvents) -> int:
        """Move due arrivals into lane backlogs and admit at most one per lane; returns the
        number admitted."""
        cf = self.cfg.car_following
        admitted = 0
        while self._next_arrival < self._n_scheduled and self.arrival[self._next_arrival] <= t_end:
            i = self._next_arrival
            self.status[i] = BACKLOG
            self._backlog[int(self.entry_lane[i])].append(i)
            self._next_arrival += 1
            events.spawned += 1
        for lane, q in self._backlog.items():
            if not q:
                continue
            tail = self.tail_pos[lane]
            if tail < cf.vehicle_length + cf.min_gap:
                continue
            i = q.popleft()
            v0 = cf.v_max
            if np.isfinite(tail):
                room = max(0.0, tail - cf.vehicle_length - cf.min_gap)
                v0 = min(v0, self.tail_v[lane] + math.sqrt(2 * cf.b_comfort * room))
            self.status[i] = ACTIVE
            self.lane[i] = lane
            self.pos[i] = 0.0
            self.v[i] = v0
            self.a[i] = 0.0
            self.link_enter[i] = t_end
            self.wait[i] += max(0.0, t_end - self.arrival[i] - self.cfg.dt)
            self.tail_pos[lane] = 0.0
            self.tail_v[lane] = v0
            admitted += 1
        return admitted

    def _move(self, h: float, green: np.ndarray, t_end: float, events: StepEvents) -> np.ndarray:
        """One car-following sub-step of length ``h``; returns stop-line crossings per intersection."""
        cfg, cf, net = self.cfg, self.cfg.car_following, self.net
        idx = self._idx
        crossed = np.empty(idx.size, dtype=np.bool_)
        _follow_kernel(idx, self._same, self.lane, self.pos, self.v, self.dist, self.tail_pos,
                       self.tail_v, net.lane_next, green, float(cfg.link_length),
                       float(cf.vehicle_length), float(cf.min_gap), float(cf.headway),
                       float(cf.a_max_accel), float(cf.b_comfort), float(cf.b_emergency),
                       float(cf.v_max), float(h), crossed)
        thru = np.zeros(net.n_int, dtype=np.int64)
        if crossed.any():
            lane = self.lane[idx]
            ci = idx[crossed]
            cl = lane[crossed]
            thru = np.bincount(net.lane_int[cl], minlength=net.n_int)
            nxt = net.lane_next[cl]
            exit_ = nxt < 0
            done = ci[exit_]
            self.status[done] = DONE
            self.finish[done] = t_end
            events.completed += int(exit_.sum())
            move = ci[~exit_]
            self.lane[move] = nxt[~exit_]
            self.pos[move] -= cfg.link_length
            self.link_enter[move] = t_end
            self._refresh_lane_view()
        elif idx.size:
            # no lane changes and no overtaking: the sorted order still holds
            self._refresh_tails()
        return thru

    def step(self, actions: Optional[Sequence[Optional[int]]] = None, observe: bool = True):
        cfg, net = self.cfg, self.net
        dt = cfg.dt
        events = StepEvents()
        self._apply_actions(actions, events)
        events.signals = [(int(self.phase[k]), self.stage[k].value) for k in range(net.n_int)]
        green = self.lane_green()

        idx = self._idx
        n = net.n_int
        thru_by_int = np.zeros(n, dtype=np.int64)
        v_start = self.v.copy()
        lane_start = self.lane.copy()
        moving = idx.copy()
        hsub = dt / self.substeps
        for sub in range(self.substeps):
            if self._idx.size == 0:
                break
            thru_by_int += self._move(hsub, green, self.t + (sub + 1) * hsub, events)
        brakes_by_int = np.zeros(n, dtype=np.int64)
        if moving.size:
            a_step = (self.v[moving] - v_start[moving]) / dt
            self.a[moving] = a_step
            harsh = a_step < HARSH_BRAKE
            if harsh.any():
                brakes_by_int = np.bincount(net.lane_int[lane_start[moving][harsh]], minlength=n)
                events.harsh_brakes = int(harsh.sum())
                self.harsh_total += events.harsh_brakes
            self.wait[moving] += np.where(self.v[moving] < STOP_SPEED, dt, 0.0)

        admitted = self._insert_backlog(self.t + dt, events)
        self._advance_signals()
        self.t += dt
        if admitted:
            # crossings already re-sorted inside the sub-steps; only new entries remain
            self._refresh_lane_view()

        slot = self._hist_i % self._W
        self._brake_hist[slot] = brakes_by_int
        self._thru_hist[slot] = thru_by_int
        self._risk_hist[slot] = self._step_risk | self._dilemma(~self.lane_green())
        self._hist_i += 1
        ttc_int, ttc_val = self._ttc_samples()
        self._ttc_hist.append((ttc_int, ttc_val))
        self.ttc_pool.append(ttc_val)
        self.queue_sum += float(self._queues().sum()) / net.n_int
        self.steps += 1

        obs = [self.observe(k) for k in range(net.n_int)] if observe else None
        return obs, events

    # -- observation ---------------------------------------------------
    def _queues(self) -> np.ndarray:
        idx = self._idx
        stopped = self.v[idx] < STOP_SPEED
        slots = self.net.lane_slot[self.lane[idx][stopped]]
        return np.bincount(slots, minlength=self.net.n_int * 4).reshape(self.net.n_int, 4)

    def _ttc_samples(self) -> tuple[np.ndarray, np.ndarray]:
        """Rear-end TTC for moving followers (and moving lane-fronts facing a red stop line)."""
        cfg = self.cfg
        idx = self._idx
        if idx.size == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        return _ttc_kernel(idx, self._same, self._front, self.lane, self.pos, self.v,
                           self.lane_green(), self.net.lane_int, float(cfg.link_length),
                           float(cfg.car_following.vehicle_length), STOP_SPEED, float(cfg.ttc_cap))

    def _context(self) -> dict:
        """Per-step aggregates shared by all intersections' observations."""
        if self._ctx_step == self.steps:
            return self._ctx
        cfg, cf, net = self.cfg, self.cfg.car_following, self.net
        n = net.n_int
        idx = self._idx
        lane = self.lane[idx]
        vint = net.lane_int[lane]
        pos, v = self.pos[idx], self.v[idx]
        queues = self._queues()
        pressure = (net.pressure_op @ self.lane_count).reshape(n, 4)
        delay = np.maximum(0.0, self.t - self.link_enter[idx] - pos / cf.v_max)
        cnt = np.bincount(vint, minlength=n)
        mean_delay = np.bincount(vint, weights=delay, minlength=n) / np.maximum(cnt, 1)
        dist = cfg.link_length - pos
        m = min(int(round(cfg.risk_memory_s / cfg.dt)), self._hist_i)
        recent = (self._hist_i - 1 - np.arange(m)) % self._W
        rho = self._risk_hist[recent].any(axis=0)
        near = np.full(n, -1, dtype=np.int64)
        if idx.size:
            order = np.lexsort((dist, vint))
            first = np.concatenate(([True], vint[order][1:] != vint[order][:-1]))
            near[vint[order][first]] = order[first]
        if self._ttc_hist:
            ti = np.concatenate([x[0] for x in self._ttc_hist])
            tv = np.concatenate([x[1] for x in self._ttc_hist])
        else:
            ti, tv = np.zeros(0, dtype=np.int64), np.zeros(0)
        o = np.lexsort((tv, ti))
        ti, tv = ti[o], tv[o]
        bounds = np.searchsorted(ti, np.arange(n + 1))
        ttc = np.full((n, 2), cfg.ttc_cap)
        for k in range(n):
            vals = tv[bounds[k]:bounds[k + 1]]
            m = vals.size
            if m:
                ttc[k, 0] = vals[max(1, math.ceil(0.10 * m - 1e-12)) - 1]
                ttc[k, 1] = vals[max(1, math.ceil(0.50 * m - 1e-12)) - 1]
        self._ctx = dict(queues=queues, pressure=pressure, mean_delay=mean_delay, rho=rho,
                         near=near, dist=dist, v=v, a=self.a[idx], ttc=ttc,
                         thru=self._thru_hist.sum(axis=0), brakes=self._brake_hist.sum(axis=0))
        self._ctx_step = self.steps
        return self._ctx

    def observe(self, k: int) -> Observation:
        ctx = self._context()
        j = ctx["near"][k]
        if j >= 0:
            v_near, a_near, d_stop = float(ctx["v"][j]), float(ctx["a"][j]), float(ctx["dist"][j])
        else:
            v_near = a_near = d_stop = 0.0
        return Observation(
            intersection_id=k,
            time=float(self.t),
            phase=self.phase_state(k),
            q=tuple(int(x) for x in ctx["queues"][k]),
            p=tuple(int(round(x)) for x in ctx["pressure"][k]),
            mean_delay=float(ctx["mean_delay"][k]),
            throughput=int(ctx["thru"][k]),
            ttc_p10=float(ctx["ttc"][k, 0]),
            ttc_p50=float(ctx["ttc"][k, 1]),
            h_brake=int(ctx["brakes"][k]),
            rho_red=int(ctx["rho"][k]),
            v_near=v_near,
            a_near=a_near,
            d_stop=d_stop,
            window_s=self.cfg.window_s,
        )

    # -- bookkeeping ---------------------------------------------------
    def add_vehicle(self, lane: int, pos: float, v: float = 0.0) -> int:
        """Place a vehicle directly on a lane (scenario fixtures); returns its index."""
        i = self.n_vehicles
        grow = lambda arr, val: np.concatenate((arr, np.asarray([val], dtype=arr.dtype)))
        self.arrival = grow(self.arrival, self.t)
        self.entry_lane = grow(self.entry_lane, lane)
        self.lane = grow(self.lane, lane)
        self.pos = grow(self.pos, pos)
        self.v = grow(self.v, v)
        self.a = grow(self.a, 0.0)
        self.status = grow(self.status, ACTIVE)
        self.finish = grow(self.finish, np.nan)
        self.wait = grow(self.wait, 0.0)
        self.dist = grow(self.dist, 0.0)
        self.link_enter = grow(self.link_enter, self.t)
        self.n_vehicles += 1
        self._refresh_lane_view()
        self._ctx_step = -1
        return i

    @property
    def done(self) -> bool:
        return self.t >= self.cfg.horizon_s - 1e-9

    def counts(self) -> dict:
        spawned = int((self.status >= BACKLOG).sum())
        on_net = int(((self.status == BACKLOG) | (self.status == ACTIVE)).sum())
        completed = int((self.status == DONE).sum())
        return {"spawned": spawned, "on_network": on_net, "completed": completed}

    def lane_snapshot(self) -> list[tuple[int, np.ndarray]]:
        """(lane, positions sorted descending) for every occupied lane."""
        out = []
        idx = self._idx
        for l in np.unique(self.lane[idx]):
            sel = idx[self.lane[idx] == l]
            out.append((int(l), np.sort(self.pos[sel])[::-1]))
        return out


def init_network(config: SimConfig) -> SimState:
    """Build an empty grid with every signal at EW_straight green; raises ConfigError."""
    return SimState(config)


def step(state: SimState, actions, observe: bool = True):
    obs, events = state.step(actions, observe=observe)
    return state, obs, events


def pressure_reward(obs: Observation) -> float:
    """Negative intersection pressure: -sum_i (n_in,i - n_out,i)."""
    return -float(sum(obs.p))


def external_reward_tl(obs: Observation, lambda_delay: float = 0.1) -> float:
    if lambda_delay < 0:
        raise ValueError("lambda_delay must be >= 0")
    return pressure_reward(obs) - lambda_delay * obs.mean_delay
