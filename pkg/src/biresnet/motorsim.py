"""dq0 synchronous-machine simulator with electrical fault injection.

The machine is integrated in the rotor reference frame with classical RK4.
State vector layout (last axis): ``theta, w, lambda_d, lambda_q, lambda_0, lambda_f``.
Records carry eight channels: ``v_a, v_b, v_c, i_a, i_b, i_c, w, i_f``.

All routines are vectorised over a leading batch axis so a whole dataset
integrates in one pass; every per-record quantity (phase, load jitter, fault
onset) is drawn from the record's own seed, so results do not depend on how
records are batched.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.optimize import brentq

from .nncore import NumericalError, rng_for

TWO_PI_3 = 2.0 * math.pi / 3.0
CHANNELS = ("v_a", "v_b", "v_c", "i_a", "i_b", "i_c", "w", "i_f")


class FaultClass(enum.IntEnum):
    REVD = 0   # rotor excitation voltage disconnection
    OP = 1     # opened phase
    VREC = 2   # variation of rotor excitation current
    PSC2 = 3   # two phases short circuit
    PSC1 = 4   # one phase-to-neutral short circuit
    NF = 5     # no fault

    @property
    def label(self) -> str:
        return {"PSC2": "2PSC", "PSC1": "1PSC"}.get(self.name, self.name)

    @classmethod
    def parse(cls, value) -> "FaultClass":
        if isinstance(value, FaultClass):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).upper()
        key = {"2PSC": "PSC2", "1PSC": "PSC1"}.get(key, key)
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown fault class {value!r}") from None


CLASS_NAMES = tuple(c.label for c in FaultClass)


@dataclass
class MachineParams:
    R_a: float = 1.6
    R_f: float = 1.0
    L_d: float = 0.14
    L_q: float = 0.08
    L_0: float = 0.01
    L_ff: float = 0.45
    L_af: float = 0.15
    J: float = 0.011
    D: float = 0.05
    P: int = 4
    P_ref: float = 20.0
    f: float = 50.0
    V: float = 70.0
    v_f_nom: float = 1.5

    def __post_init__(self):
        for f_ in fields(self):
            if getattr(self, f_.name) <= 0:
                raise ValueError(f"machine parameter {f_.name} must be positive")
        if self.beta <= 0:
            raise ValueError(f"beta = 2 L_d L_ff - 3 L_af^2 = {self.beta:.4g} must be positive")

    @property
    def w_s(self) -> float:
        return 2.0 * math.pi * self.f

    @property
    def beta(self) -> float:
        return 2.0 * self.L_d * self.L_ff - 3.0 * self.L_af ** 2

    @property
    def sigma(self) -> float:
        return (self.P / 2.0) ** 2 / (self.J * self.w_s)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MachineParams":
        names = {f_.name for f_ in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @classmethod
    def from_json(cls, path) -> "MachineParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **changes) -> "MachineParams":
        d = self.to_dict()
        d.update(changes)
        return MachineParams(**d)


@dataclass
class SimConfig:
    duration: float = 1.0
    step: float = 1e-4
    sample_period: float = 1e-3
    lambda0_init: float = 0.0
    eq6_literal: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FaultSpec:
    fault_class: FaultClass
    t_f: float = math.inf
    magnitude: float = 0.0

    def __post_init__(self):
        self.fault_class = FaultClass.parse(self.fault_class)
        if self.fault_class == FaultClass.NF:
            self.t_f = math.inf
        elif not 0.2 <= self.t_f <= 0.8:
            raise ValueError(f"fault onset must lie in [0.2, 0.8] s, got {self.t_f}")


@dataclass
class ExperimentRecord:
    data: np.ndarray                 # [8, T]
    label: int
    t_f: float
    sample_period: float
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.label]


# ---------------------------------------------------------------------------
# Frame transforms
# ---------------------------------------------------------------------------

def park(v_abc, theta):
    """abc -> dq0 (cosine-aligned d axis, amplitude-invariant 2/3 scaling).

    ``v_abc`` has the phase on its last axis; ``theta`` broadcasts against
    the remaining axes.
    """
    v_abc = np.asarray(v_abc, dtype=np.float64)
    a, b, c = v_abc[..., 0], v_abc[..., 1], v_abc[..., 2]
    c0, c1, c2 = np.cos(theta), np.cos(theta - TWO_PI_3), np.cos(theta + TWO_PI_3)
    s0, s1, s2 = np.sin(theta), np.sin(theta - TWO_PI_3), np.sin(theta + TWO_PI_3)
    d = (2.0 / 3.0) * (a * c0 + b * c1 + c * c2)
    q = -(2.0 / 3.0) * (a * s0 + b * s1 + c * s2)
    z = (a + b + c) / 3.0
    return np.stack([d, q, z], axis=-1)


def inverse_park(x_dq0, theta):
    x_dq0 = np.asarray(x_dq0, dtype=np.float64)
    d, q, z = x_dq0[..., 0], x_dq0[..., 1], x_dq0[..., 2]
    a = d * np.cos(theta) - q * np.sin(theta) + z
    b = d * np.cos(theta - TWO_PI_3) - q * np.sin(theta - TWO_PI_3) + z
    c = d * np.cos(theta + TWO_PI_3) - q * np.sin(theta + TWO_PI_3) + z
    return np.stack([a, b, c], axis=-1)


# ---------------------------------------------------------------------------
# Machine equations
# ---------------------------------------------------------------------------

def currents_from_flux(state, params: MachineParams):
    """Invert the flux-linkage relations; returns ``[..., 4]`` = (i_d, i_q, i_0, i_f)."""
    beta = params.beta
    if beta <= 0:
        raise ValueError("beta must be positive for an invertible flux map")
    state = np.asarray(state, dtype=np.float64)
    ld, lq, l0, lf = state[..., 2], state[..., 3], state[..., 4], state[..., 5]
    i_d = (2.0 * params.L_ff * ld - 2.0 * params.L_af * lf) / beta
    i_f = (2.0 * params.L_d * lf - 3.0 * params.L_af * ld) / beta
    return np.stack([i_d, lq / params.L_q, l0 / params.L_0, i_f], axis=-1)


def flux_from_currents(i_d, i_q, i_0, i_f, params: MachineParams):
    """Forward linkage relations: ``(lambda_d, lambda_q, lambda_0, lambda_f)``."""
    return (params.L_d * i_d + params.L_af * i_f,
            params.L_q * i_q,
            params.L_0 * i_0,
            params.L_ff * i_f + 1.5 * params.L_af * i_d)


def derivative(state, inputs, params: MachineParams, p_ref=None, eq6_literal: bool = False):
    """Time derivative of the machine state.

    ``inputs`` holds ``v_d, v_q, v_0, v_f`` on its last axis; ``p_ref``
    overrides ``params.P_ref`` (and may be an array over the batch).
    """
    state = np.asarray(state, dtype=np.float64)
    inputs = np.asarray(inputs, dtype=np.float64)
    beta = params.beta
    w_s = params.w_s
    R_a, R_f = params.R_a, params.R_f
    L_d, L_q, L_0, L_ff, L_af = params.L_d, params.L_q, params.L_0, params.L_ff, params.L_af
    p_ref = params.P_ref if p_ref is None else p_ref
    w, ld, lq, l0, lf = state[..., 1], state[..., 2], state[..., 3], state[..., 4], state[..., 5]
    vd, vq, v0, vf = inputs[..., 0], inputs[..., 1], inputs[..., 2], inputs[..., 3]

    dw = params.sigma * (
        3.0 * p_ref
        - (w - w_s) / params.D
        + (3.0 * beta * w_s - 6.0 * L_ff * L_q * w_s) / (2.0 * beta * L_q) * ld * lq
        + 3.0 * L_af * w_s / beta * lq * lf
    )
    dld = -2.0 * R_a * L_ff / beta * ld + w * lq + 2.0 * R_a * L_af / beta * lf + vd
    dlq = -w * ld - R_a / L_q * lq + vq
    dl0 = -R_a / L_0 * (lq if eq6_literal else l0) + v0
    dlf = 3.0 * R_f * L_af / beta * ld - 2.0 * R_f * L_d / beta * lf + vf
    out = np.stack([w, dw, dld, dlq, dl0, dlf], axis=-1)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite machine derivative at state {state!r}")
    return out


def rk4_step(f, t, y, h):
    """One classical Runge-Kutta step of ``dy/dt = f(t, y)``."""
    if h <= 0:
        raise ValueError("step must be positive")
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    out = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite RK4 result at t={t}")
    return out


# ---------------------------------------------------------------------------
# Faults
# ---------------------------------------------------------------------------

def apply_fault(t, fault: FaultSpec, v_abc, v_f, i_abc=None):
    """Return ``(v_abc, v_f, i_abc)`` as seen at time ``t`` under ``fault``.

    Signals are untouched before onset. The open phase is modelled at the
    measurement layer: its terminal voltage and measured current are zero.
    """
    cls = FaultClass.parse(fault.fault_class)
    v_abc = np.array(v_abc, dtype=np.float64)
    i_abc = None if i_abc is None else np.array(i_abc, dtype=np.float64)
    if cls == FaultClass.NF or t < fault.t_f:
        return v_abc, v_f, i_abc
    if cls == FaultClass.REVD:
        v_f = 0.0 * v_f
    elif cls == FaultClass.VREC:
        v_f = v_f * (1.0 + fault.magnitude)
    elif cls == FaultClass.PSC1:
        v_abc[..., 0] = 0.0
    elif cls == FaultClass.PSC2:
        mean = 0.5 * (v_abc[..., 0] + v_abc[..., 1])
        v_abc[..., 0] = mean
        v_abc[..., 1] = mean
    elif cls == FaultClass.OP:
        v_abc[..., 0] = 0.0
        if i_abc is not None:
            i_abc[..., 0] = 0.0
    return v_abc, v_f, i_abc


def _apply_fault_batch(t, classes, t_f, magnitude, v_abc, v_f):
    active = t >= t_f
    v_f = np.where(active & (classes == FaultClass.REVD), 0.0, v_f)
    v_f = np.where(active & (classes == FaultClass.VREC), v_f * (1.0 + magnitude), v_f)
    zero_a = active & ((classes == FaultClass.PSC1) | (classes == FaultClass.OP))
    tied = active & (classes == FaultClass.PSC2)
    mean = 0.5 * (v_abc[:, 0] + v_abc[:, 1])
    va = np.where(zero_a, 0.0, np.where(tied, mean, v_abc[:, 0]))
    vb = np.where(tied, mean, v_abc[:, 1])
    return np.stack([va, vb, v_abc[:, 2]], axis=-1), v_f


# ---------------------------------------------------------------------------
# Steady state and simulation
# ---------------------------------------------------------------------------

def _steady_currents(delta, i_f, params: MachineParams):
    w_s = params.w_s
    a = np.array([[params.R_a, -w_s * params.L_q], [w_s * params.L_d, params.R_a]])
    rhs = np.array([params.V * math.cos(delta), params.V * math.sin(delta) - w_s * params.L_af * i_f])
    return np.linalg.solve(a, rhs)


def _electrical_power(delta, i_f, params):
    i_d, i_q = _steady_currents(delta, i_f, params)
    ld, lq, _, _ = flux_from_currents(i_d, i_q, 0.0, i_f, params)
    return 1.5 * params.w_s * (ld * i_q - lq * i_d)


def steady_state(params: MachineParams, p_ref: float | None = None):
    """Synchronous operating point: ``(load_angle, [w, lambda_d, lambda_q, lambda_0, lambda_f])``.

    The load angle is the voltage-minus-rotor angle; of the power-balance
    roots the one with positive synchronising slope (stable) nearest zero is used.
    """
    p_ref = params.P_ref if p_ref is None else p_ref
    i_f = params.v_f_nom / params.R_f
    target = -3.0 * p_ref
    grid = np.linspace(-math.pi, math.pi, 721)
    resid = np.array([_electrical_power(d, i_f, params) - target for d in grid])
    roots = []
    for k in range(len(grid) - 1):
        if resid[k] == 0 or resid[k] * resid[k + 1] < 0:
            r = brentq(lambda d: _electrical_power(d, i_f, params) - target, grid[k], grid[k + 1], xtol=1e-14)
            if resid[k + 1] > resid[k]:
                roots.append(r)
    if not roots:
        raise ValueError("no stable synchronous operating point for this load")
    delta = min(roots, key=abs)
    i_d, i_q = _steady_currents(delta, i_f, params)
    ld, lq, l0, lf = flux_from_currents(i_d, i_q, 0.0, i_f, params)
    return delta, np.array([params.w_s, ld, lq, l0, lf])


@dataclass
class RecordJitter:
    phase: float
    p_ref_scale: float
    t_f: float
    vrec_magnitude: float


def record_jitter(seed: int) -> RecordJitter:
    """Per-record randomness, drawn in a fixed order regardless of fault class."""
    g = rng_for(seed, "motorsim/jitter")
    phase = float(g.uniform(0.0, 2.0 * math.pi))
    p_scale = float(g.uniform(0.9, 1.1))
    t_f = float(g.uniform(0.2, 0.8))
    sign = 1.0 if g.uniform() < 0.5 else -1.0
    mag = sign * float(g.uniform(0.2, 0.5))
    return RecordJitter(phase, p_scale, t_f, mag)


def draw_fault(fault_class, seed: int) -> FaultSpec:
    cls = FaultClass.parse(fault_class)
    j = record_jitter(seed)
    if cls == FaultClass.NF:
        return FaultSpec(cls)
    return FaultSpec(cls, j.t_f, j.vrec_magnitude if cls == FaultClass.VREC else 0.0)


def simulate_batch(params: MachineParams, faults, seeds, sim: SimConfig | None = None,
                   return_states: bool = False):
    """Integrate several experiments at once; returns ``[N, 8, T]`` float64 recordings.

    With ``return_states`` the state ``(theta, w, lambda_d, lambda_q,
    lambda_0, lambda_f)`` at every recording instant comes back as a second
    ``[N, 6, T]`` array.
    """
    sim = sim or SimConfig()
    faults = list(faults)
    seeds = [int(s) for s in seeds]
    n = len(faults)
    jit = [record_jitter(s) for s in seeds]
    classes = np.array([int(f.fault_class) for f in faults])
    t_f = np.array([f.t_f for f in faults], dtype=np.float64)
    mag = np.array([f.magnitude for f in faults], dtype=np.float64)
    phase = np.array([j.phase for j in jit])
    p_ref = params.P_ref * np.array([j.p_ref_scale for j in jit])

    state = np.empty((n, 6))
    for r in range(n):
        delta, rest = steady_state(params, p_ref[r])
        state[r, 0] = phase[r] - delta
        state[r, 1:] = rest
    state[:, 4] = sim.lambda0_init

    h = sim.step
    n_steps = int(round(sim.duration / h))
    every = int(round(sim.sample_period / h))
    if every < 1 or abs(every * h - sim.sample_period) > 1e-12:
        raise ValueError("sample period must be a multiple of the integration step")
    n_samples = n_steps // every
    w_s = params.w_s
    phase_offsets = np.array([0.0, -TWO_PI_3, TWO_PI_3])

    def signals(t, y):
        v_abc = params.V * np.cos(w_s * t + phase[:, None] + phase_offsets[None, :])
        v_f = np.full(n, params.v_f_nom)
        return _apply_fault_batch(t, classes, t_f, mag, v_abc, v_f)

    def rhs(t, y):
        v_abc, v_f = signals(t, y)
        vdq0 = park(v_abc, y[:, 0])
        inputs = np.concatenate([vdq0, v_f[:, None]], axis=1)
        return derivative(y, inputs, params, p_ref=p_ref, eq6_literal=sim.eq6_literal)

    out = np.empty((n, len(CHANNELS), n_samples))
    states = np.empty((n, 6, n_samples)) if return_states else None
    for s in range(n_steps):
        t = s * h
        if s % every == 0:
            k = s // every
            v_abc, _ = signals(t, state)
            cur = currents_from_flux(state, params)
            i_abc = inverse_park(cur[:, :3], state[:, 0])
            i_abc[:, 0] = np.where((classes == FaultClass.OP) & (t >= t_f), 0.0, i_abc[:, 0])
            out[:, 0:3, k] = v_abc
            out[:, 3:6, k] = i_abc
            out[:, 6, k] = state[:, 1]
            out[:, 7, k] = cur[:, 3]
            if return_states:
                states[:, :, k] = state
        state = rk4_step(rhs, t, state, h)
        if not np.all(np.isfinite(state)):
            raise NumericalError(f"non-finite motor state at t={t + h:.4f}s: {state[~np.isfinite(state).all(axis=1)][0]}")
    return (out, states) if return_states else out


def simulate_experiment(params: MachineParams, fault: FaultSpec, seed: int,
                        sim: SimConfig | None = None) -> ExperimentRecord:
    sim = sim or SimConfig()
    data = simulate_batch(params, [fault], [seed], sim)[0]
    return ExperimentRecord(data, int(fault.fault_class), float(fault.t_f), sim.sample_period, int(seed),
                            {"magnitude": fault.magnitude})


def record_seed(seed: int, index: int) -> int:
    digest = hashlib.blake2b(f"{seed}:record:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def generate_dataset(params: MachineParams, per_class: int = 100, seed: int = 0,
                     sim: SimConfig | None = None, chunk: int = 256) -> list[ExperimentRecord]:
    """``per_class`` records for each fault class, ordered by record index.

    Record ``i`` has class ``i % 6`` and its own derived seed.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    sim = sim or SimConfig()
    total = per_class * len(FaultClass)
    seeds = [record_seed(seed, i) for i in range(total)]
    faults = [draw_fault(FaultClass(i % len(FaultClass)), s) for i, s in enumerate(seeds)]
    records = []
    for start in range(0, total, chunk):
        sl = slice(start, start + chunk)
        data = simulate_batch(params, faults[sl], seeds[sl], sim)
        for f, s, d in zip(faults[sl], seeds[sl], data):
            records.append(ExperimentRecord(d, int(f.fault_class), float(f.t_f), sim.sample_period, s,
                                            {"magnitude": f.magnitude}))
    return records
