"""Receding-horizon duty optimization over a one-step predictor.

A predictor maps (state, duty) to the state one control period later.  Two
interchangeable kinds ship: the averaged plant model itself, and the
trained network from the identification pipeline.  The optimizer rolls the
predictor over the horizon, scores the rollout with a discounted distance
cost, and descends the duty sequence with projected gradient steps; the
gradients come from an adjoint sweep through the rollout (for the network
this is backpropagation through time).  Only the first duty of the winner
is ever applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import nn as nnmod
from .converter import ConverterParams, Duty, State, step_averaged
from .sysid import NormStats, predict_next

GRAD_FLOOR = 1e-12  # stage cost below this treated as exactly on target
STEP_FLOOR = 1e-8   # halving below this counts as converged
IMPROVE_RTOL = 1e-12


class RolloutError(RuntimeError):
    """Predictor produced a non-finite state; carries the 1-based step."""

    def __init__(self, msg, step_index):
        super().__init__(msg)
        self.step_index = step_index


class OptimizationError(RuntimeError):
    """Every start of the optimizer failed to produce a finite cost."""


@dataclass(frozen=True)
class References:
    """Tracking targets for the stage cost."""

    v_ref: float
    i_ref: float

    def __post_init__(self):
        if not (math.isfinite(self.v_ref) and math.isfinite(self.i_ref)):
            raise ValueError("references must be finite")
        if self.v_ref <= 0.0:
            raise ValueError(f"v_ref must be > 0, got {self.v_ref}")

    def to_dict(self) -> dict:
        return {"v_ref": self.v_ref, "i_ref": self.i_ref}


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, discount, bounds, and optimizer knobs.

    slew_weight adds sum((d_k+1 - d_k)^2) to the objective being descended
    (never to the reported cost); zero keeps the plain discounted cost.
    use_warm_start lets the receding-horizon loop reuse the previous
    solution shifted by one; turning it off re-solves from scratch.
    """

    horizon: int = 10
    discount: float = 0.9
    d_min: float = 0.0
    d_max: float = 1.0
    iterations: int = 50
    step_size: float = 0.05
    restarts: int = 4
    step_period: float = 20e-6
    slew_weight: float = 0.0
    use_warm_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError(f"discount must be in [0, 1], got {self.discount}")
        if not 0.0 <= self.d_min <= self.d_max <= 1.0:
            raise ValueError("need 0 <= d_min <= d_max <= 1")
        if self.iterations < 1 or self.restarts < 0:
            raise ValueError("iterations >= 1 and restarts >= 0 required")
        if self.step_size <= 0.0 or self.step_period <= 0.0:
            raise ValueError("step_size and step_period must be > 0")
        if self.slew_weight < 0.0:
            raise ValueError("slew_weight must be >= 0")

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "discount": self.discount,
                "d_min": self.d_min, "d_max": self.d_max,
                "iterations": self.iterations, "step_size": self.step_size,
                "restarts": self.restarts, "step_period": self.step_period,
                "slew_weight": self.slew_weight,
                "use_warm_start": self.use_warm_start, "seed": self.seed}


@dataclass(frozen=True)
class DutySequence:
    duties: tuple

    def __post_init__(self):
        duties = tuple(d if isinstance(d, Duty) else Duty(float(d))
                       for d in self.duties)
        if not duties:
            raise ValueError("DutySequence cannot be empty")
        object.__setattr__(self, "duties", duties)

    @classmethod
    def from_array(cls, arr) -> "DutySequence":
        return cls(tuple(float(v) for v in arr))

    def as_array(self) -> np.ndarray:
        return np.array([d.value for d in self.duties])

    def __len__(self):
        return len(self.duties)

    def __getitem__(self, k) -> Duty:
        return self.duties[k]

    def shifted(self) -> "DutySequence":
        """Drop the applied first element, repeat the last."""
        return DutySequence(self.duties[1:] + (self.duties[-1],))


# --- predictors ------------------------------------------------------------

class AnalyticPredictor:
    """The averaged plant over one control period, reduced to x' = Phi x + d g.

    The sub-stepped RK4 map is linear in (state, duty), so probing it with
    unit vectors once captures it exactly; stepping and differentiating
    then cost two small matrix products.
    """

    def __init__(self, params: ConverterParams, step_period: float,
                 dt_max: float = 1e-6):
        if step_period <= 0.0:
            raise ValueError("step_period must be > 0")
        self.params = params
        self.step_period = step_period
        n_int = max(1, math.ceil(step_period / dt_max - 1e-12))
        h = step_period / n_int

        def raw(i, v, d):
            s = State(i, v)
            duty = Duty(d)
            for _ in range(n_int):
                s = step_averaged(s, params, duty, h)
            return s

        e1 = raw(1.0, 0.0, 0.0)
        e2 = raw(0.0, 1.0, 0.0)
        gd = raw(0.0, 0.0, 1.0)
        self._phi = np.array([[e1.i_l, e2.i_l], [e1.v_c, e2.v_c]])
        self._g = np.array([gd.i_l, gd.v_c])

    def step(self, s: State, d: float) -> State:
        i = self._phi[0, 0] * s.i_l + self._phi[0, 1] * s.v_c + d * self._g[0]
        v = self._phi[1, 0] * s.i_l + self._phi[1, 1] * s.v_c + d * self._g[1]
        return State(i, v)

    def jacobians(self, s: State, d: float):
        return self._phi, self._g

    def describe(self) -> dict:
        return {"kind": "analytic", "step_period": self.step_period,
                "params": self.params.to_dict()}


class NeuralPredictor:
    """The trained one-step identifier, with exact chain-rule Jacobians."""

    def __init__(self, network: nnmod.Network, stats: NormStats,
                 step_period: float):
        if network.in_dim != 3 or network.out_dim != 2:
            raise ValueError("predictor network must map 3 inputs to 2 outputs")
        if step_period <= 0.0:
            raise ValueError("step_period must be > 0")
        self.network = network
        self.stats = stats
        self.step_period = step_period

    def step(self, s: State, d: float) -> State:
        return predict_next(self.network, self.stats, s, d)

    def jacobians(self, s: State, d: float):
        xn = self.stats.norm_in(np.array([s.i_l, s.v_c, d]))
        jn = nnmod.input_jacobian(self.network, xn)
        # undo the z-scoring on both ends
        j_phys = (self.stats.out_scale[:, None] * jn) / self.stats.in_scale
        return j_phys[:, :2], j_phys[:, 2]

    def describe(self) -> dict:
        return {"kind": "neural", "step_period": self.step_period,
                "hidden": [l.out_dim for l in self.network.layers[:-1]]}


# --- costs -----------------------------------------------------------------

def stage_cost(s: State, refs: References) -> float:
    """Distance to the targets in (voltage, current) space."""
    return math.hypot(s.v_c - refs.v_ref, s.i_l - refs.i_ref)


def _stage_grad(s: State, refs: References) -> np.ndarray:
    """d stage_cost / d (i_l, v_c); zero exactly on target."""
    c = stage_cost(s, refs)
    if c <= GRAD_FLOOR:
        return np.zeros(2)
    return np.array([(s.i_l - refs.i_ref) / c, (s.v_c - refs.v_ref) / c])


def _rollout_states(pred, s0: State, d_arr: np.ndarray):
    states = [s0]
    s = s0
    for k, d in enumerate(d_arr, start=1):
        try:
            s = pred.step(s, float(d))
        except ValueError as exc:
            raise RolloutError(f"predictor failed at step {k}: {exc}", k) from exc
        if not (math.isfinite(s.i_l) and math.isfinite(s.v_c)):
            raise RolloutError(f"non-finite state at step {k}", k)
        states.append(s)
    return states


def cost_to_go(pred, s0: State, seq: DutySequence, refs: References,
               cfg: MpcConfig) -> float:
    """Discounted rollout cost: sum over k=1..N of discount^k * stage_cost."""
    if len(seq) != cfg.horizon:
        raise ValueError(f"sequence length {len(seq)} != horizon {cfg.horizon}")
    return _cost_of(pred, s0, seq.as_array(), refs, cfg)


def _cost_of(pred, s0: State, d_arr: np.ndarray, refs: References,
             cfg: MpcConfig) -> float:
    states = _rollout_states(pred, s0, d_arr)
    j = 0.0
    for k in range(1, len(d_arr) + 1):
        j += cfg.discount ** k * stage_cost(states[k], refs)
    if not math.isfinite(j):
        raise RolloutError("non-finite rollout cost", len(d_arr))
    return j


def _cost_and_grad(pred, s0: State, d_arr: np.ndarray, refs: References,
                   cfg: MpcConfig):
    """Adjoint sweep: one forward rollout, one backward pass.

    a_k carries dJ/dx(k); each step contributes its discounted stage
    gradient and pulls a_k+1 back through the step Jacobian.
    """
    n = len(d_arr)
    states = _rollout_states(pred, s0, d_arr)
    jac_a, jac_b = [], []
    for k in range(n):
        a, b = pred.jacobians(states[k], float(d_arr[k]))
        jac_a.append(np.asarray(a))
        jac_b.append(np.asarray(b))

    j = 0.0
    for k in range(1, n + 1):
        j += cfg.discount ** k * stage_cost(states[k], refs)
    if not math.isfinite(j):
        raise RolloutError("non-finite rollout cost", n)

    grad = np.empty(n)
    adj = cfg.discount ** n * _stage_grad(states[n], refs)
    grad[n - 1] = jac_b[n - 1] @ adj
    for k in range(n - 1, 0, -1):
        adj = cfg.discount ** k * _stage_grad(states[k], refs) + jac_a[k].T @ adj
        grad[k - 1] = jac_b[k - 1] @ adj
    return j, grad


def _slew_penalty(d_arr: np.ndarray, weight: float) -> float:
    if weight == 0.0 or len(d_arr) < 2:
        return 0.0
    diffs = np.diff(d_arr)
    return weight * float(diffs @ diffs)


def _slew_grad(d_arr: np.ndarray, weight: float) -> np.ndarray:
    g = np.zeros_like(d_arr)
    if weight == 0.0 or len(d_arr) < 2:
        return g
    diffs = np.diff(d_arr)
    g[:-1] -= 2.0 * weight * diffs
    g[1:] += 2.0 * weight * diffs
    return g


# --- optimizer -------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerDiag:
    """What the winning descent did; streamed by the harness if asked."""

    iterations_used: int
    restart_winner: int
    cost: float
    first_duty: float


def _descend(pred, s0, refs, cfg, d0):
    """Projected gradient descent from one start; returns (d, J, iters)."""
    lo, hi = cfg.d_min, cfg.d_max
    d = np.clip(d0, lo, hi)
    j = _cost_of(pred, s0, d, refs, cfg) + _slew_penalty(d, cfg.slew_weight)
    step = cfg.step_size
    iters = 0
    for it in range(cfg.iterations):
        iters = it + 1
        _, grad = _cost_and_grad(pred, s0, d, refs, cfg)
        grad = grad + _slew_grad(d, cfg.slew_weight)
        cand = np.clip(d - step * grad, lo, hi)
        if not np.any(cand != d):
            break  # projected step moved nothing: stationary
        jc = _cost_of(pred, s0, cand, refs, cfg) \
            + _slew_penalty(cand, cfg.slew_weight)
        if jc < j:
            gain = j - jc
            d, j = cand, jc
            if gain <= IMPROVE_RTOL * max(1.0, abs(j)):
                break
        else:
            step *= 0.5
            if step < STEP_FLOOR:
                break
    return d, j, iters


def _optimize_detailed(pred, s0: State, refs: References, cfg: MpcConfig,
                       warm_start: DutySequence | None = None, salt: int = 0):
    n = cfg.horizon
    if warm_start is not None and len(warm_start) != n:
        raise ValueError("warm start length does not match horizon")
    primary = warm_start.as_array() if warm_start is not None \
        else np.full(n, 0.5 * (cfg.d_min + cfg.d_max))
    rng = np.random.default_rng([cfg.seed, salt])
    starts = [primary] + [rng.uniform(cfg.d_min, cfg.d_max, n)
                          for _ in range(cfg.restarts)]

    best = None
    for idx, d0 in enumerate(starts):
        try:
            d, j_pen, iters = _descend(pred, s0, refs, cfg, d0)
        except RolloutError:
            continue
        if not math.isfinite(j_pen):
            continue
        if best is None or j_pen < best[1]:
            best = (d, j_pen, idx, iters)
    if best is None:
        raise OptimizationError(
            f"no start out of {len(starts)} produced a finite cost")

    d, _, idx, iters = best
    seq = DutySequence.from_array(d)
    j = _cost_of(pred, s0, d, refs, cfg)  # reported cost carries no penalty
    return seq, j, OptimizerDiag(iterations_used=iters, restart_winner=idx,
                                 cost=j, first_duty=float(d[0]))


def optimize_sequence(pred, s0: State, refs: References, cfg: MpcConfig,
                      warm_start: DutySequence | None = None, salt: int = 0):
    """Best duty sequence found across the warm start and seeded restarts.

    Returns (sequence, cost) with cost == cost_to_go of the sequence.
    Ties keep the earliest start, so restart order never changes results.
    """
    seq, j, _ = _optimize_detailed(pred, s0, refs, cfg, warm_start, salt)
    return seq, j


def grid_search_horizon1(pred, s0: State, refs: References, cfg: MpcConfig,
                         n_points: int = 1001):
    """Exhaustive single-step fallback: best duty on a uniform grid."""
    grid = np.linspace(cfg.d_min, cfg.d_max, n_points)
    one = replace(cfg, horizon=1)
    best_d, best_j = None, math.inf
    for d in grid:
        j = _cost_of(pred, s0, np.array([d]), refs, one)
        if j < best_j:
            best_d, best_j = float(d), j
    return best_d, best_j


# --- receding horizon ------------------------------------------------------

@dataclass(frozen=True)
class NnpcState:
    """Controller memory between calls: previous solution and call count."""

    predictor: object
    config: MpcConfig
    prev: DutySequence | None = None
    step_count: int = 0
    diag: OptimizerDiag | None = None


def nnpc_step(ctrl: NnpcState, s: State, refs: References):
    """One receding-horizon move: solve, apply the first duty, remember.

    The previous solution, shifted left with its tail repeated, seeds the
    next solve when warm starts are enabled.  Deterministic: the restart
    noise is keyed on (config seed, call index).
    """
    warm = None
    if ctrl.config.use_warm_start and ctrl.prev is not None:
        warm = ctrl.prev.shifted()
    seq, _, diag = _optimize_detailed(ctrl.predictor, s, refs, ctrl.config,
                                      warm, salt=ctrl.step_count)
    new_ctrl = replace(ctrl, prev=seq, step_count=ctrl.step_count + 1,
                       diag=diag)
    return seq[0], new_ctrl
