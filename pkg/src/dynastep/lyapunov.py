"""Composite Lyapunov evaluation and decrease monitoring.

The designed composite function stacks four terms: the plant-error
quadratic, the first-level residual quadratic, the virtual-control
mismatch quadratic and the terminal residual (or terminal tracking
error) quadratic.  ``eval_V`` reports the terms separately;
``monitor_decrease`` verifies the descent claim numerically on a
sampled trajectory via central differences, which is deliberately
independent of the controller's own derivative expressions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .closedloop import build_closed_loop

__all__ = [
    "LyapunovSample", "DecreaseReport", "TrajectoryTooShortError",
    "eval_V", "monitor_decrease",
]

TOL_VDOT = 1e-8


class TrajectoryTooShortError(ValueError):
    """Fewer than three samples: no interior central difference exists."""


@dataclass(frozen=True)
class LyapunovSample:
    """Composite Lyapunov value at one instant, with its four summands."""

    t: float
    V: float
    terms: tuple
    Vdot_fd: float = None


def eval_V(model, spec, state):
    """Composite Lyapunov value and its four terms at a state.

    The value is nonnegative everywhere and zero exactly at the
    converged equilibrium of the active design.  In tracking mode the
    first term quadratures the output error instead of the state.
    """
    loop = build_closed_loop(model, spec)
    y = loop.state_to_vector(state)
    tel = loop.telemetry(state.t, y)
    terms = tuple(tel[f"V_term{i}"] for i in range(1, 5))
    return LyapunovSample(t=state.t, V=tel["V"], terms=terms)


@dataclass(frozen=True)
class DecreaseReport:
    """Outcome of the sampled-descent check."""

    n_samples: int
    n_checked: int
    n_violations: int
    violation_fraction: float
    compliant_fraction: float
    first_violation_time: float
    max_vdot: float
    tol_vdot: float

    @property
    def ok(self):
        return self.n_violations == 0


def monitor_decrease(trajectory, tol_vdot=TOL_VDOT, exclude_norm_below=None):
    """Check dV/dt < tol along a trajectory by central differences.

    Interior samples only; endpoints carry one-sided estimates and are
    skipped.  ``exclude_norm_below`` drops samples whose augmented-state
    infinity norm is inside the terminal ball, where discretization
    noise dominates the vanishing true derivative.

    Raises
    ------
    TrajectoryTooShortError
        For trajectories with fewer than three samples.
    """
    if trajectory.n_samples < 3:
        raise TrajectoryTooShortError(
            f"need at least 3 samples, got {trajectory.n_samples}")
    times = trajectory.times
    V = trajectory.column("V")
    vdot = (V[2:] - V[:-2]) / (times[2:] - times[:-2])
    tmid = times[1:-1]
    keep = np.ones(len(vdot), dtype=bool)
    if exclude_norm_below is not None:
        norms = trajectory.state_inf_norms()[1:-1]
        keep = norms >= exclude_norm_below
    checked = vdot[keep]
    n_checked = int(checked.size)
    bad = checked >= tol_vdot
    n_violations = int(np.count_nonzero(bad))
    if n_violations:
        first_t = float(tmid[keep][bad][0])
    else:
        first_t = None
    return DecreaseReport(
        n_samples=trajectory.n_samples,
        n_checked=n_checked,
        n_violations=n_violations,
        violation_fraction=(n_violations / n_checked) if n_checked else 0.0,
        compliant_fraction=1.0 - ((n_violations / n_checked) if n_checked else 0.0),
        first_violation_time=first_t,
        max_vdot=float(np.max(checked)) if n_checked else 0.0,
        tol_vdot=tol_vdot,
    )
