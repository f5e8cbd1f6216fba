"""Sampling-based MPPI control over cost and speed-limit maps.

Controls are ``(accel, steer_rate)`` pairs driving a kinematic bicycle.  A
rollout's cost sums, per step, the map cost of the occupied cell, a lethal
penalty on OOD/lethal cells and a quadratic speed-limit violation term, then
adds a weighted distance-to-goal at the end of the horizon.  Limits below
``crawl_speed`` are raised to it so the vehicle can always creep onto
terrain it has no experience of yet.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PlannerError


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.0
    max_steer: float = 0.5
    max_steer_rate: float = 0.8
    max_accel: float = 2.0
    max_decel: float = 4.0
    s_hard_max: float = 8.0


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float = 0.0
    steer: float = 0.0


@dataclass(frozen=True)
class MppiParams:
    horizon: int = 40
    dt: float = 0.1
    n_rollouts: int = 512
    temperature: float = 0.1
    accel_std: float = 1.0
    steer_rate_std: float = 0.4
    lethal_penalty: float = 100.0
    lethal_threshold: float = 0.9
    speed_weight: float = 20.0
    goal_weight: float = 4.0
    unknown_cost: float = 0.5
    crawl_speed: float = 1.0

    def __post_init__(self):
        if self.horizon < 1 or self.n_rollouts < 2 or self.temperature <= 0 or self.dt <= 0:
            raise ValueError("need horizon >= 1, n_rollouts >= 2, temperature > 0, dt > 0")


def dynamics_step(state: VehicleState, control, dt: float,
                  vehicle: VehicleParams = VehicleParams()) -> VehicleState:
    """One explicit-Euler step of the kinematic bicycle."""
    a, rate = control
    a = min(max(a, -vehicle.max_decel), vehicle.max_accel)
    rate = min(max(rate, -vehicle.max_steer_rate), vehicle.max_steer_rate)
    v, th, d = state.speed, state.heading, state.steer
    x = state.x + v * np.cos(th) * dt
    y = state.y + v * np.sin(th) * dt
    th = th + v / vehicle.wheelbase * np.tan(d) * dt
    v = min(max(v + a * dt, 0.0), vehicle.s_hard_max)
    d = min(max(d + rate * dt, -vehicle.max_steer), vehicle.max_steer)
    return VehicleState(float(x), float(y), float(th), float(v), float(d))


def clamp_controls(U, vehicle: VehicleParams = VehicleParams()) -> np.ndarray:
    U = np.array(U, dtype=np.float64)
    U[..., 0] = np.clip(U[..., 0], -vehicle.max_decel, vehicle.max_accel)
    U[..., 1] = np.clip(U[..., 1], -vehicle.max_steer_rate, vehicle.max_steer_rate)
    return U


def simulate_rollouts(state: VehicleState, U, dt: float, vehicle: VehicleParams = VehicleParams(),
                      return_applied: bool = False):
    """Propagate ``(M, H, 2)`` control sequences; returns x, y, heading, speed of shape ``(M, H)``.

    With ``return_applied`` the controls that actually took effect after the
    speed and steering clamps are returned as a fifth ``(M, H, 2)`` array.
    """
    U = np.asarray(U, dtype=np.float64)
    M, H = U.shape[:2]
    x = np.full(M, state.x)
    y = np.full(M, state.y)
    th = np.full(M, state.heading)
    v = np.full(M, state.speed)
    d = np.full(M, state.steer)
    xs, ys, ths, vs = (np.empty((M, H)) for _ in range(4))
    applied = np.empty((M, H, 2)) if return_applied else None
    inv_l = 1.0 / vehicle.wheelbase
    for h in range(H):
        x = x + v * np.cos(th) * dt
        y = y + v * np.sin(th) * dt
        th = th + v * inv_l * np.tan(d) * dt
        v_new = np.clip(v + U[:, h, 0] * dt, 0.0, vehicle.s_hard_max)
        d_new = np.clip(d + U[:, h, 1] * dt, -vehicle.max_steer, vehicle.max_steer)
        if return_applied:
            applied[:, h, 0] = (v_new - v) / dt
            applied[:, h, 1] = (d_new - d) / dt
        v, d = v_new, d_new
        xs[:, h], ys[:, h], ths[:, h], vs[:, h] = x, y, th, v
    if return_applied:
        return xs, ys, ths, vs, applied
    return xs, ys, ths, vs


def _step_costs(xs, ys, vs, grid, params: MppiParams, dt: float):
    i, j = grid.world_to_cell(xs, ys)
    inb = grid.in_bounds(i, j)
    ic = np.where(inb, i, 0)
    jc = np.where(inb, j, 0)
    known = inb & (grid.weight[ic, jc] > 0)
    raw_cost = grid.cost[ic, jc]
    have_cost = known & np.isfinite(raw_cost)
    cost = np.where(have_cost, raw_cost, params.unknown_cost)
    lethal = known & (grid.ood[ic, jc] | (have_cost & (raw_cost >= params.lethal_threshold)))
    lim = grid.speed_limit[ic, jc]
    lim = np.where(known & np.isfinite(lim), np.maximum(lim, params.crawl_speed), np.inf)
    over = np.maximum(vs - lim, 0.0)
    return cost + params.lethal_penalty * lethal + params.speed_weight * over ** 2 * dt


def rollout_cost(traj, grid, goal, params: MppiParams = MppiParams()) -> float:
    """Cost of a state sequence (list of ``VehicleState``) on ``grid``."""
    traj = list(traj)
    if not traj:
        raise ValueError("empty trajectory")
    xs = np.array([s.x for s in traj])
    ys = np.array([s.y for s in traj])
    vs = np.array([s.speed for s in traj])
    total = _step_costs(xs, ys, vs, grid, params, params.dt).sum()
    total += params.goal_weight * np.hypot(xs[-1] - goal[0], ys[-1] - goal[1])
    return float(total)


def batch_costs(xs, ys, vs, grid, goal, params: MppiParams) -> np.ndarray:
    step = _step_costs(xs, ys, vs, grid, params, params.dt).sum(axis=1)
    return step + params.goal_weight * np.hypot(xs[:, -1] - goal[0], ys[:, -1] - goal[1])


def softmax_weights(costs, temperature: float) -> np.ndarray:
    costs = np.asarray(costs, dtype=np.float64)
    finite = np.isfinite(costs)
    if not finite.any():
        raise PlannerError("all rollouts have non-finite cost")
    w = np.zeros_like(costs)
    w[finite] = np.exp(-(costs[finite] - costs[finite].min()) / temperature)
    return w / w.sum()


@dataclass
class MppiResult:
    controls: np.ndarray
    nominal: np.ndarray
    costs: np.ndarray
    weights: np.ndarray
    samples: np.ndarray = field(repr=False)

    @property
    def min_cost(self) -> float:
        return float(np.min(self.costs))

    @property
    def mean_cost(self) -> float:
        return float(np.mean(self.costs[np.isfinite(self.costs)]))


def shift_nominal(U) -> np.ndarray:
    U = np.asarray(U, dtype=np.float64)
    return np.concatenate([U[1:], U[-1:]], axis=0)


def mppi_plan(state: VehicleState, grid, goal, params: MppiParams = MppiParams(), seed: int = 0,
              nominal=None, vehicle: VehicleParams = VehicleParams()) -> MppiResult:
    """One MPPI update around ``nominal`` (zeros when omitted).

    Rollout ``m`` uses row ``m`` of a noise block drawn from a generator
    seeded with ``seed``, so the result is independent of evaluation order.
    The caller shifts the returned ``nominal`` before the next cycle.
    """
    H, M = params.horizon, params.n_rollouts
    U = np.zeros((H, 2)) if nominal is None else np.asarray(nominal, dtype=np.float64)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((M, H, 2)) * np.array([params.accel_std, params.steer_rate_std])
    V = clamp_controls(U[None] + eps, vehicle)
    # average what the vehicle could apply: braking at standstill or steering
    # into the stop would otherwise pile up in the warm start
    xs, ys, _, vs, V = simulate_rollouts(state, V, params.dt, vehicle, return_applied=True)
    J = batch_costs(xs, ys, vs, grid, goal, params)
    w = softmax_weights(J, params.temperature)
    new = np.tensordot(w, V, axes=1)
    return MppiResult(controls=new, nominal=new, costs=J, weights=w, samples=V)


class MppiController:
    """Keeps the warm-start nominal sequence between planning cycles."""

    def __init__(self, params: MppiParams = MppiParams(), vehicle: VehicleParams = VehicleParams()):
        self.params = params
        self.vehicle = vehicle
        self.nominal = np.zeros((params.horizon, 2))

    def plan(self, state: VehicleState, grid, goal, seed: int) -> MppiResult:
        res = mppi_plan(state, grid, goal, self.params, seed, self.nominal, self.vehicle)
        self.nominal = shift_nominal(res.controls)
        return res

    def reset(self):
        self.nominal = np.zeros((self.params.horizon, 2))
