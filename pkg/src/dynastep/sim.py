"""Closed-loop integration: fixed-step RK4, embedded RK45, telemetry capture.

``simulate`` integrates an assembled closed loop and records decimated
telemetry samples (states, controls, residuals, Lyapunov terms).  Runs
never raise out of the integrator: singular Jacobians, non-finite
values, norm blow-ups and adaptive step underflow all terminate the run
early with a partial trajectory and a termination cause.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .closedloop import build_closed_loop
from .controller import NonFiniteError, SingularJacobianError, SingularMatrixError

__all__ = [
    "SimConfig", "Termination", "Trajectory", "StepUnderflowError",
    "rk4_step", "rk45_step", "simulate",
]

MIN_ADAPTIVE_DT = 1e-12


class StepUnderflowError(RuntimeError):
    """The adaptive controller pushed the step size below its floor."""


@dataclass
class SimConfig:
    """Integrator selection and run horizon.

    ``dt`` is the fixed RK4 step, or the initial step for the adaptive
    pair (which then honors rtol/atol/dt_max).  ``sample_every``
    decimates the recorded telemetry.  ``abort_threshold`` bounds the
    augmented-state infinity norm; beyond it the run aborts, which
    separates divergence from slow convergence.
    """

    integrator: str = "rk4"
    dt: float = 1e-3
    t_final: float = 15.0
    rtol: float = 1e-6
    atol: float = 1e-9
    dt_max: float = 0.1
    sample_every: int = 1
    abort_threshold: float = 1e6

    def __post_init__(self):
        if self.integrator not in ("rk4", "rk45"):
            raise ValueError("integrator must be 'rk4' or 'rk45'")
        if self.dt <= 0.0 or self.t_final <= 0.0:
            raise ValueError("dt and t_final must be positive")
        if self.rtol <= 0.0 or self.atol <= 0.0:
            raise ValueError("rtol and atol must be positive")
        if self.sample_every < 1:
            raise ValueError("sample_every must be >= 1")


@dataclass(frozen=True)
class Termination:
    status: str                 # "completed" | "aborted"
    cause: str = None           # NonFinite | SingularJacobian | NormBound | StepUnderflow
    message: str = ""
    t: float = None

    @property
    def ok(self):
        return self.status == "completed"


@dataclass
class Trajectory:
    """Sampled closed-loop telemetry with strictly increasing times."""

    times: np.ndarray
    columns: dict
    state_labels: tuple = ()
    plant_labels: tuple = ()
    control_labels: tuple = ()
    residual_labels: tuple = ()
    termination: Termination = None
    name: str = ""

    @property
    def n_samples(self):
        return len(self.times)

    def column(self, name):
        if name not in self.columns:
            raise KeyError(f"no channel named '{name}'")
        return self.columns[name]

    def final(self, name):
        return float(self.column(name)[-1])

    def _norm_series(self, labels):
        if not labels:
            return np.zeros(self.n_samples)
        stack = np.vstack([self.columns[l] for l in labels])
        return np.max(np.abs(stack), axis=0)

    def state_inf_norms(self):
        return self._norm_series([l for l in self.state_labels if l in self.columns])

    def plant_inf_norms(self):
        return self._norm_series([l for l in self.plant_labels if l in self.columns])

    def write_csv(self, path):
        """17-significant-digit decimal text, time in column 1."""
        labels = list(self.columns.keys())
        with open(path, "w", encoding="ascii") as fh:
            fh.write(",".join(["t"] + labels) + "\n")
            for i in range(self.n_samples):
                vals = [self.times[i]] + [self.columns[k][i] for k in labels]
                fh.write(",".join("%.17g" % v for v in vals) + "\n")

    @classmethod
    def from_csv(cls, path):
        with open(path, "r", encoding="ascii") as fh:
            header = fh.readline().strip()
            if not header:
                raise ValueError(f"{path}: empty CSV")
            labels = header.split(",")
            if labels[0] != "t":
                raise ValueError(f"{path}: first column must be t")
            rows = [line.strip().split(",") for line in fh if line.strip()]
        if not rows:
            raise ValueError(f"{path}: CSV has no data rows")
        data = np.array([[float(v) for v in row] for row in rows])
        if data.shape[1] != len(labels):
            raise ValueError(f"{path}: ragged CSV rows")
        columns = {lab: data[:, j] for j, lab in enumerate(labels[1:], start=1)}
        return cls(times=data[:, 0], columns=columns,
                   termination=Termination("completed", message="loaded from csv"))


def rk4_step(rhs, t, y, dt):
    """Classical fourth-order step; local error O(dt^5) for smooth rhs."""
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * dt, y + (0.5 * dt) * k1)
    k3 = rhs(t + 0.5 * dt, y + (0.5 * dt) * k2)
    k4 = rhs(t + dt, y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# Dormand-Prince 5(4) tableau.
_DP_C = (0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0)
_DP_A = (
    (0.2,),
    (3.0 / 40.0, 9.0 / 40.0),
    (44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0),
    (19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0),
    (9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0,
     -5103.0 / 18656.0),
    (35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0,
     11.0 / 84.0),
)
_DP_B5 = (35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0,
          11.0 / 84.0, 0.0)
_DP_B4 = (5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0,
          -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0)


def rk45_step(rhs, t, y, dt, rtol, atol):
    """One embedded 5(4) trial step.

    Returns ``(y_new, dt_next, accepted)``; ``y_new`` is the fifth-order
    candidate and only valid when ``accepted``.  ``dt_next`` follows the
    standard error controller with growth/shrink clamps.

    Raises
    ------
    StepUnderflowError
        When the proposed step falls below the hard floor.
    """
    if dt < MIN_ADAPTIVE_DT:
        raise StepUnderflowError(f"step size underflow (dt = {dt:.3e})")
    k = [rhs(t, y)]
    for ci, row in zip(_DP_C, _DP_A):
        yi = y + dt * sum(a * kk for a, kk in zip(row, k))
        k.append(rhs(t + ci * dt, yi))
    y5 = y + dt * sum(b * kk for b, kk in zip(_DP_B5, k))
    err = dt * sum((b5 - b4) * kk for b5, b4, kk in zip(_DP_B5, _DP_B4, k))
    scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
    err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
    if err_norm == 0.0:
        factor = 5.0
    else:
        factor = min(5.0, max(0.2, 0.9 * err_norm ** -0.2))
    return y5, dt * factor, err_norm <= 1.0


def _vdot_central(times, values):
    n = len(times)
    out = np.empty(n)
    if n == 1:
        out[0] = 0.0
        return out
    out[0] = (values[1] - values[0]) / (times[1] - times[0])
    out[-1] = (values[-1] - values[-2]) / (times[-1] - times[-2])
    if n > 2:
        out[1:-1] = (values[2:] - values[:-2]) / (times[2:] - times[:-2])
    return out


def simulate(model, spec, simcfg, initial, name=""):
    """Integrate the closed loop and capture telemetry.

    Parameters
    ----------
    model, spec : CascadeModel, ControllerSpec
        The plant and the control-law configuration.
    simcfg : SimConfig
    initial : AugmentedState
        Initial augmented state (the loop shape dictates which blocks
        are needed).

    Returns
    -------
    Trajectory
        With a finite-difference dV/dt channel appended, and the
        termination record (early aborts keep the partial samples).
    """
    loop = build_closed_loop(model, spec)
    y = loop.initial_vector(initial)
    times = []
    rows = []
    termination = None

    def record(t, yv):
        row = {}
        for i, lab in enumerate(loop.state_labels):
            row[lab] = float(yv[i])
        row.update(loop.telemetry(t, yv))
        times.append(t)
        rows.append(row)

    def check(t, yv):
        if not np.all(np.isfinite(yv)):
            return Termination("aborted", "NonFinite",
                               "augmented state left the finite range", t)
        if np.max(np.abs(yv)) > simcfg.abort_threshold:
            return Termination(
                "aborted", "NormBound",
                f"state norm exceeded {simcfg.abort_threshold:.3e}", t)
        return None

    try:
        record(0.0, y)
        if simcfg.integrator == "rk4":
            n_steps = int(round(simcfg.t_final / simcfg.dt))
            t = 0.0
            for step in range(n_steps):
                y = rk4_step(loop.rhs, t, y, simcfg.dt)
                t = (step + 1) * simcfg.dt
                termination = check(t, y)
                if termination is not None:
                    break
                if (step + 1) % simcfg.sample_every == 0 or step == n_steps - 1:
                    record(t, y)
        else:
            t = 0.0
            dt = min(simcfg.dt, simcfg.dt_max)
            accepted_count = 0
            while t < simcfg.t_final - 1e-12:
                dt_try = min(dt, simcfg.t_final - t)
                y_new, dt_next, accepted = rk45_step(
                    loop.rhs, t, y, dt_try, simcfg.rtol, simcfg.atol)
                if accepted:
                    t += dt_try
                    y = y_new
                    termination = check(t, y)
                    if termination is not None:
                        break
                    accepted_count += 1
                    if (accepted_count % simcfg.sample_every == 0
                            or t >= simcfg.t_final - 1e-12):
                        record(t, y)
                dt = min(dt_next, simcfg.dt_max)
    except (SingularJacobianError, SingularMatrixError) as exc:
        termination = Termination("aborted", "SingularJacobian", str(exc), t=times[-1])
    except NonFiniteError as exc:
        termination = Termination("aborted", "NonFinite", str(exc), t=times[-1])
    except StepUnderflowError as exc:
        termination = Termination("aborted", "StepUnderflow", str(exc), t=times[-1])

    if termination is None:
        termination = Termination("completed", t=times[-1])

    labels = list(rows[0].keys())
    columns = {lab: np.array([r[lab] for r in rows]) for lab in labels}
    tarr = np.array(times)
    if "V" in columns:
        columns["Vdot_fd"] = _vdot_central(tarr, columns["V"])
    return Trajectory(
        times=tarr, columns=columns,
        state_labels=tuple(loop.state_labels),
        plant_labels=tuple(loop.plant_labels),
        control_labels=tuple(loop.control_labels),
        residual_labels=tuple(loop.residual_labels),
        termination=termination, name=name,
    )
