"""Identification pipeline: excite the plant under PI, log it, fit a one-step
neural predictor.

The dataset is rows of (i_l, v_c, d) at a fixed sample period.  Consecutive
rows become training pairs (i_l, v_c, d at k-1) -> (i_l, v_c at k); inputs
and targets are z-scored before training and mapped back for reporting, so
all RMSE figures are in amps and volts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .converter import (ConverterParams, Duty, IntegrationError, State,
                        StepSchedule, simulate, step_averaged)
from .fileio import atomic_write_text
from .pi_controller import PiConfig, PiState, pi_step

# sample periods by name: the slow legacy rate and the one that actually
# resolves the LC dynamics (resonance sits near 3.4 kHz with stock values)
SAMPLE_PERIOD_PRESETS = {"paper": 1e-3, "recommended": 20e-6}

SCALE_FLOOR = 1e-9


class CollectionError(RuntimeError):
    """Plant diverged while logging; carries where and under what excitation."""

    def __init__(self, msg, sample_index, v_ref, r_load):
        super().__init__(msg)
        self.sample_index = sample_index
        self.v_ref = v_ref
        self.r_load = r_load


@dataclass(frozen=True)
class ExcitationConfig:
    """Random-walk excitation: v_ref and r_load jump together at random dwells."""

    v_ref_range: tuple = (6.0, 18.0)
    r_load_range: tuple = (4.0, 8.0)
    dwell_range: tuple = (5e-3, 50e-3)
    seed: int = 0

    def __post_init__(self):
        for name, (lo, hi) in (("v_ref_range", self.v_ref_range),
                               ("r_load_range", self.r_load_range),
                               ("dwell_range", self.dwell_range)):
            if not (math.isfinite(lo) and math.isfinite(hi) and 0.0 < lo <= hi):
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got ({lo}, {hi})")

    def to_dict(self) -> dict:
        return {"v_ref_range": list(self.v_ref_range),
                "r_load_range": list(self.r_load_range),
                "dwell_range": list(self.dwell_range),
                "seed": self.seed}


@dataclass(frozen=True)
class RawDataset:
    """Logged samples: column arrays i_l, v_c, d plus the sample period.

    resets lists row indices (other than 0) that start a fresh episode, so
    concatenated logs never yield a training pair spanning the seam.
    """

    sample_period: float
    i_l: np.ndarray
    v_c: np.ndarray
    d: np.ndarray
    resets: tuple = ()
    seed: int | None = None

    def __post_init__(self):
        il = np.asarray(self.i_l, dtype=float)
        vc = np.asarray(self.v_c, dtype=float)
        d = np.asarray(self.d, dtype=float)
        n = il.shape[0]
        if il.ndim != 1 or vc.shape != (n,) or d.shape != (n,):
            raise ValueError("i_l, v_c, d must be equal-length 1-D arrays")
        if n < 2:
            raise ValueError("dataset needs at least 2 rows")
        if not (np.isfinite(il).all() and np.isfinite(vc).all()
                and np.isfinite(d).all()):
            raise ValueError("dataset values must be finite")
        if self.sample_period <= 0.0:
            raise ValueError("sample_period must be > 0")
        resets = tuple(int(r) for r in self.resets)
        if list(resets) != sorted(set(resets)) or any(
                not 0 < r < n for r in resets):
            raise ValueError("resets must be sorted unique indices in (0, n)")
        object.__setattr__(self, "i_l", il)
        object.__setattr__(self, "v_c", vc)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "resets", resets)

    def __len__(self):
        return self.i_l.shape[0]

    def to_csv(self) -> str:
        head = f"# sample_period={self.sample_period!r}"
        if self.seed is not None:
            head += f" seed={self.seed}"
        if self.resets:
            head += " resets=" + ";".join(str(r) for r in self.resets)
        lines = [head, "k,i_l,v_c,d"]
        for k in range(len(self)):
            lines.append(f"{k},{float(self.i_l[k])!r},{float(self.v_c[k])!r},"
                         f"{float(self.d[k])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "RawDataset":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) < 2 or not lines[0].startswith("#"):
            raise ValueError("malformed dataset CSV")
        meta = {}
        for token in lines[0].lstrip("#").split():
            key, _, val = token.partition("=")
            meta[key] = val
        if "sample_period" not in meta:
            raise ValueError("dataset CSV missing sample_period")
        if lines[1] != "k,i_l,v_c,d":
            raise ValueError(f"unexpected dataset header {lines[1]!r}")
        rows = [ln.split(",") for ln in lines[2:]]
        resets = tuple(int(r) for r in meta["resets"].split(";")) \
            if "resets" in meta else ()
        return cls(sample_period=float(meta["sample_period"]),
                   i_l=np.array([float(r[1]) for r in rows]),
                   v_c=np.array([float(r[2]) for r in rows]),
                   d=np.array([float(r[3]) for r in rows]),
                   resets=resets,
                   seed=int(meta["seed"]) if "seed" in meta else None)

    @classmethod
    def concat(cls, a: "RawDataset", b: "RawDataset") -> "RawDataset":
        """Join two logs, marking the seam so no pair spans it."""
        if a.sample_period != b.sample_period:
            raise ValueError("sample periods differ")
        n_a = len(a)
        return cls(sample_period=a.sample_period,
                   i_l=np.concatenate([a.i_l, b.i_l]),
                   v_c=np.concatenate([a.v_c, b.v_c]),
                   d=np.concatenate([a.d, b.d]),
                   resets=a.resets + (n_a,) + tuple(n_a + r for r in b.resets),
                   seed=a.seed)


def save_dataset(ds: RawDataset, path):
    atomic_write_text(path, ds.to_csv())


def load_dataset(path) -> RawDataset:
    with open(path) as f:
        return RawDataset.from_csv(f.read())


def _excitation_schedules(exc: ExcitationConfig, duration: float):
    """Pre-draw the whole (v_ref, r_load) timeline; draw order is fixed."""
    rng = np.random.default_rng(exc.seed)
    times, v_refs, r_loads = [0.0], [], []
    while times[-1] < duration:
        v_refs.append(rng.uniform(*exc.v_ref_range))
        r_loads.append(rng.uniform(*exc.r_load_range))
        times.append(times[-1] + rng.uniform(*exc.dwell_range))
    times = times[:-1]
    return (StepSchedule(tuple(times), tuple(v_refs)),
            StepSchedule(tuple(times), tuple(r_loads)))


def collect(params: ConverterParams, pi_cfg: PiConfig, exc: ExcitationConfig,
            n_samples: int = 10000, sample_period: float = 1e-3,
            control_period: float = 20e-6) -> RawDataset:
    """Log (i_l, v_c, d) from the PI-regulated averaged plant.

    The predictive controller stays out of the loop; only the PI baseline
    drives the plant while references and load hop around.  Each logged d
    is the duty active over the interval that follows the sample instant.
    """
    stride = round(sample_period / control_period)
    if stride < 1 or abs(stride * control_period - sample_period) > 1e-9 * sample_period:
        raise ValueError(
            f"sample_period {sample_period} must be an integer multiple of "
            f"the control period {control_period}")
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if exc.v_ref_range[1] >= params.vs:
        raise ValueError("v_ref range must stay below the source voltage")

    duration = n_samples * sample_period
    v_ref_sched, r_load_sched = _excitation_schedules(exc, duration)

    pi_state = PiState()

    def ctrl(t: float, s: State) -> Duty:
        nonlocal pi_state
        duty, pi_state = pi_step(pi_cfg, pi_state, v_ref_sched.at(t), s.v_c,
                                 control_period)
        return duty

    try:
        traj = simulate(State(0.0, 0.0), params, ctrl, duration, control_period,
                        model="averaged", r_load_schedule=r_load_sched)
    except IntegrationError as exc_err:
        t_bad = exc_err.t if exc_err.t is not None else 0.0
        k_bad = int(t_bad / sample_period)
        raise CollectionError(
            f"plant diverged at sample {k_bad} "
            f"(v_ref={v_ref_sched.at(t_bad):g} V, r_load={r_load_sched.at(t_bad):g} ohm)",
            k_bad, v_ref_sched.at(t_bad), r_load_sched.at(t_bad)) from exc_err

    idx = np.arange(n_samples) * stride
    return RawDataset(sample_period=sample_period,
                      i_l=traj.i_l[idx].copy(), v_c=traj.v_c[idx].copy(),
                      d=traj.duty[idx].copy(), seed=exc.seed)


# --- preprocessing ---------------------------------------------------------

@dataclass(frozen=True)
class SamplePair:
    """One training example: previous (i_l, v_c, d) maps to next (i_l, v_c)."""

    input: np.ndarray  # (3,)
    target: np.ndarray  # (2,)


@dataclass(frozen=True)
class NormStats:
    """Z-score constants for the 3 input and 2 target channels."""

    in_mean: np.ndarray
    in_scale: np.ndarray
    out_mean: np.ndarray
    out_scale: np.ndarray

    def __post_init__(self):
        im = np.asarray(self.in_mean, dtype=float)
        isc = np.asarray(self.in_scale, dtype=float)
        om = np.asarray(self.out_mean, dtype=float)
        osc = np.asarray(self.out_scale, dtype=float)
        if im.shape != (3,) or isc.shape != (3,) or om.shape != (2,) or osc.shape != (2,):
            raise ValueError("NormStats needs 3 input and 2 output channels")
        if not ((isc > 0.0).all() and (osc > 0.0).all()):
            raise ValueError("scales must be strictly positive")
        for name, arr in (("in_mean", im), ("in_scale", isc),
                          ("out_mean", om), ("out_scale", osc)):
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, arr)

    def norm_in(self, x):
        return (np.asarray(x, dtype=float) - self.in_mean) / self.in_scale

    def denorm_in(self, x):
        return np.asarray(x, dtype=float) * self.in_scale + self.in_mean

    def norm_out(self, y):
        return (np.asarray(y, dtype=float) - self.out_mean) / self.out_scale

    def denorm_out(self, y):
        return np.asarray(y, dtype=float) * self.out_scale + self.out_mean

    def to_dict(self) -> dict:
        return {"in_mean": [float(v) for v in self.in_mean],
                "in_scale": [float(v) for v in self.in_scale],
                "out_mean": [float(v) for v in self.out_mean],
                "out_scale": [float(v) for v in self.out_scale]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["in_mean"]), np.array(d["in_scale"]),
                   np.array(d["out_mean"]), np.array(d["out_scale"]))


def preprocess(raw: RawDataset):
    """Consecutive rows -> (pairs, NormStats); pairs never cross a reset."""
    n = len(raw)
    starts = set(raw.resets)
    pairs = []
    for k in range(1, n):
        if k in starts:
            continue
        pairs.append(SamplePair(
            input=np.array([raw.i_l[k - 1], raw.v_c[k - 1], raw.d[k - 1]]),
            target=np.array([raw.i_l[k], raw.v_c[k]])))
    if not pairs:
        raise ValueError("no usable consecutive pairs in dataset")
    x = np.array([p.input for p in pairs])
    y = np.array([p.target for p in pairs])
    stats = NormStats(
        in_mean=x.mean(axis=0),
        in_scale=np.maximum(x.std(axis=0), SCALE_FLOOR),
        out_mean=y.mean(axis=0),
        out_scale=np.maximum(y.std(axis=0), SCALE_FLOOR))
    return pairs, stats


def pairs_to_arrays(pairs: Sequence[SamplePair]):
    x = np.array([p.input for p in pairs])
    y = np.array([p.target for p in pairs])
    return x, y


# --- training --------------------------------------------------------------

DEFAULT_TRAIN = nn.TrainConfig(learning_rate=0.1, epochs=600, batch_size=32,
                               seed=0)


@dataclass(frozen=True)
class IdentifierReport:
    """Fit quality in physical units, plus the persistence-baseline check."""

    n_train: int
    n_val: int
    train_rmse: np.ndarray  # (2,) amps, volts
    val_rmse: np.ndarray
    persistence_rmse: np.ndarray  # val RMSE of "next = current"
    beats_persistence: bool
    loss_history: tuple = field(repr=False, default=())

    def to_dict(self) -> dict:
        return {"n_train": self.n_train, "n_val": self.n_val,
                "train_rmse": [float(v) for v in self.train_rmse],
                "val_rmse": [float(v) for v in self.val_rmse],
                "persistence_rmse": [float(v) for v in self.persistence_rmse],
                "beats_persistence": self.beats_persistence}


def fit_identifier(pairs: Sequence[SamplePair], stats: NormStats,
                   hidden: int = 7, train_cfg: nn.TrainConfig = DEFAULT_TRAIN):
    """Train the 3 -> hidden -> 2 one-step predictor on normalized pairs.

    Returns (net, stats, report); RMSE figures are denormalized.  A model
    that cannot beat copying the current state forward gets flagged, not
    rejected.
    """
    if hidden < 1:
        raise ValueError("hidden must be >= 1")
    x, y = pairs_to_arrays(pairs)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 pairs to split train/validation")

    rng = np.random.default_rng(train_cfg.seed)
    order = rng.permutation(n)
    n_val = max(1, round(0.2 * n))
    train_idx, val_idx = order[:-n_val], order[-n_val:]

    xn, yn = stats.norm_in(x), stats.norm_out(y)
    net = nn.init_network([3, hidden, 2],
                          [nn.ActivationKind.TANH, nn.ActivationKind.IDENTITY],
                          seed=train_cfg.seed)
    net, history = nn.train(net, xn[train_idx], yn[train_idx], train_cfg)

    def rmse_physical(idx):
        pred = stats.denorm_out(nn.forward(net, xn[idx]))
        return np.sqrt(np.mean((pred - y[idx]) ** 2, axis=0))

    persistence = np.sqrt(np.mean((x[val_idx, :2] - y[val_idx]) ** 2, axis=0))
    val_rmse = rmse_physical(val_idx)
    report = IdentifierReport(
        n_train=len(train_idx), n_val=len(val_idx),
        train_rmse=rmse_physical(train_idx), val_rmse=val_rmse,
        persistence_rmse=persistence,
        beats_persistence=bool((val_rmse < persistence).all()),
        loss_history=tuple(history))
    return net, stats, report


def predict_next(net: nn.Network, stats: NormStats, s: State, d) -> State:
    """One-step state prediction: normalize, forward, denormalize."""
    duty = d.value if isinstance(d, Duty) else float(d)
    out = stats.denorm_out(nn.forward(net, stats.norm_in(
        np.array([s.i_l, s.v_c, duty]))))
    return State(float(out[0]), float(out[1]))


def rollout_drift(net: nn.Network, stats: NormStats, params: ConverterParams,
                  s0: State, duties: Sequence[float], sample_period: float,
                  dt_max: float = 1e-6) -> np.ndarray:
    """Open-loop divergence between the identifier and the averaged plant.

    Returns the euclidean state error after each composed step.  Reported,
    never asserted: at slow sample rates the one-step map cannot be exact.
    """
    n_int = max(1, math.ceil(sample_period / dt_max - 1e-12))
    h = sample_period / n_int
    s_net, s_true = s0, s0
    out = np.empty(len(duties))
    for k, d in enumerate(duties):
        duty = d if isinstance(d, Duty) else Duty(float(d))
        s_net = predict_next(net, stats, s_net, duty)
        for _ in range(n_int):
            s_true = step_averaged(s_true, params, duty, h)
        out[k] = math.hypot(s_net.i_l - s_true.i_l, s_net.v_c - s_true.v_c)
    return out


# --- persistence -----------------------------------------------------------

@dataclass(frozen=True)
class IdentifierBundle:
    """Everything needed to use the identifier later: net, stats, rate."""

    network: nn.Network
    stats: NormStats
    sample_period: float

    def to_dict(self) -> dict:
        return {"sample_period": self.sample_period,
                "network": nn.network_to_dict(self.network),
                "norm_stats": self.stats.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "IdentifierBundle":
        return cls(network=nn.network_from_dict(d["network"]),
                   stats=NormStats.from_dict(d["norm_stats"]),
                   sample_period=float(d["sample_period"]))


def save_bundle(bundle: IdentifierBundle, path):
    atomic_write_text(path, json.dumps(bundle.to_dict(), indent=1) + "\n")


def load_bundle(path) -> IdentifierBundle:
    with open(path) as f:
        return IdentifierBundle.from_dict(json.load(f))
