"""Built-in closed-loop scenarios, runnable end to end.

Five worked systems cover the design space: a two-level pure-feedback
stabilization, a jet-engine style mixed chain with a rescaled residual,
a reference-tracking variant of the first system driven by a van der
Pol oscillator, a scalar plant whose unscaled residual is singular at
the origin, and a double-integrator baseline for the classical explicit
design.

Gains and initial conditions follow the published worked cases; domain
boxes, horizons and convergence thresholds are artifact choices
calibrated once against this build's own runs and pinned since.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .controller import (
    AugmentedState, ControllerSpec, ResidualScaling, SecondOrderReference,
)
from .model import CascadeModel, DomainBox, pure_level, strict_level
from .sim import SimConfig, simulate

__all__ = [
    "Scenario", "ScenarioConfigError", "SCENARIOS", "build_scenario",
    "example1_stabilization", "example2_jet_engine", "example3_tracking",
    "singular_scalar_example", "strict_baseline_example", "vdp_accel",
]


class ScenarioConfigError(ValueError):
    """Unknown scenario key or invalid scenario parameter."""


@dataclass
class Scenario:
    """A runnable configuration: plant, control law, horizon, expectations."""

    name: str
    model: CascadeModel
    spec: ControllerSpec
    simcfg: SimConfig
    initial: AugmentedState
    expected: dict = field(default_factory=dict)

    def run(self):
        return simulate(self.model, self.spec, self.simcfg, self.initial,
                        name=self.name)


def _merge(defaults, overrides, scenario):
    params = dict(defaults)
    for key, value in (overrides or {}).items():
        if key not in params:
            allowed = ", ".join(sorted(params))
            raise ScenarioConfigError(
                f"unknown key '{key}' for scenario {scenario} (allowed: {allowed})")
        params[key] = value
    return params


def _as_bool(value, key):
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)):
        return bool(value)
    text = str(value).strip().lower()
    if text in ("on", "true", "yes", "1"):
        return True
    if text in ("off", "false", "no", "0"):
        return False
    raise ScenarioConfigError(f"cannot read '{value}' as on/off for '{key}'")


def _simcfg(p):
    return SimConfig(
        integrator=str(p["integrator"]), dt=float(p["dt"]),
        t_final=float(p["t_final"]), rtol=float(p["rtol"]),
        atol=float(p["atol"]), dt_max=float(p["dt_max"]),
        sample_every=int(p["sample_every"]),
        abort_threshold=float(p["abort_threshold"]),
    )


_SIM_DEFAULTS = {
    "integrator": "rk4", "dt": 1e-3, "rtol": 1e-6, "atol": 1e-9,
    "dt_max": 0.1, "sample_every": 1, "abort_threshold": 1e6,
}


# ---------------------------------------------------------------------------
# example 1: two-level pure-feedback stabilization


def _example1_model():
    def f1(x1, x2):
        return x1 + x2 + x2 ** 3 / 5.0

    def f2(x1, x2, u):
        return x1 * x2 + u + u ** 3 / 7.0

    level0 = pure_level(f1, jacobians=(
        lambda x1, x2: 1.0,
        lambda x1, x2: 1.0 + 0.6 * x2 * x2,
    ))
    level1 = pure_level(f2, jacobians=(
        lambda x1, x2, u: x2,
        lambda x1, x2, u: x1,
        lambda x1, x2, u: 1.0 + (3.0 / 7.0) * u * u,
    ))
    domain = DomainBox(lower=[-1.0, -1.0, -1.0], upper=[1.0, 1.0, 1.0])
    return CascadeModel(1, (level0, level1), domain=domain,
                        name="pure-feedback-2", block_names=("x1", "x2"))


def example1_stabilization(**overrides):
    """Two-level pure-feedback plant, stabilized from (0.5, 0)."""
    p = _merge({
        "K1": 1.0, "K2": 1.0, "Kv1": 1.0, "Kv2": 1.0,
        "kappa2_variant": "full", "x2d_dot_variant": "full",
        "x1": 0.5, "x2": 0.0, "x2d0": 0.0, "u0": 0.0,
        "t_final": 15.0, **_SIM_DEFAULTS,
    }, overrides, "example1")
    model = _example1_model()
    spec = ControllerSpec(
        m=1, K1=float(p["K1"]), K2=float(p["K2"]), Kv1=float(p["Kv1"]),
        Kv2=float(p["Kv2"]), kappa2_variant=str(p["kappa2_variant"]),
        x2d_dot_variant=str(p["x2d_dot_variant"]),
        x2d0=float(p["x2d0"]), u0=float(p["u0"]),
    )
    initial = AugmentedState(x1=float(p["x1"]), x2=float(p["x2"]),
                             x2d=spec.x2d0, u=spec.u0)
    return Scenario(
        name="example1", model=model, spec=spec, simcfg=_simcfg(p),
        initial=initial,
        expected={
            "plant_norm_end": 1e-2,
            "residual_tol": 1e-3, "residual_by": 10.0,
            "vdot_violation_frac": 0.01, "terminal_ball": 1e-3,
        },
    )


# ---------------------------------------------------------------------------
# example 2: jet-engine style mixed chain with rescaled residual


def example2_jet_engine(**overrides):
    """Three-level mixed chain; the first level needs residual rescaling.

    The first level is pure feedback in the second state and its
    residual Jacobian carries a factor of the first state, so the
    design runs on the residual divided by that state.  The cubic
    first-level target keeps the virtual control continuous through the
    origin.
    """
    p = _merge({
        "sigma": 1.0, "K1": 1.0, "K2": 1.0, "K3": 1.0, "Kv1": 1.0, "Kv2": 1.0,
        "R": 2.0, "phi": 5.0, "psi": -5.0, "phi_d0": 0.0,
        "t_final": 20.0, **_SIM_DEFAULTS,
    }, overrides, "example2")
    sigma = float(p["sigma"])
    if sigma <= 0.0:
        raise ScenarioConfigError("sigma must be positive")
    K1 = float(p["K1"])

    def f1(R, phi):
        return -sigma * R * R - sigma * R * (2.0 * phi + phi * phi)

    def f2(R, phi):
        return -1.5 * phi * phi - 0.5 * phi ** 3 - 3.0 * R * phi - 3.0 * R

    level0 = pure_level(f1, jacobians=(
        lambda R, phi: -2.0 * sigma * R - sigma * (2.0 * phi + phi * phi),
        lambda R, phi: -sigma * R * (2.0 + 2.0 * phi),
    ))
    level1 = strict_level(
        f2, g=lambda R, phi: -1.0,
        jacobians=(
            lambda R, phi, psi: -3.0 * phi - 3.0,
            lambda R, phi, psi: -3.0 * phi - 1.5 * phi * phi - 3.0 * R,
        ),
    )
    level2 = strict_level(
        lambda R, phi, psi: 0.0, g=lambda R, phi, psi: -1.0,
        jacobians=(lambda *a: 0.0, lambda *a: 0.0, lambda *a: 0.0),
    )
    domain = DomainBox(
        lower=[-0.5, -6.0, -40.0, -400.0], upper=[3.0, 6.0, 40.0, 400.0])
    model = CascadeModel(1, (level0, level1, level2), domain=domain,
                         name="jet-engine", block_names=("R", "phi", "psi"))

    scaling = ResidualScaling(
        field_scaled=lambda R, phi: -sigma * R - sigma * (2.0 * phi + phi * phi),
        kappa1_scaled=lambda R: -K1 * R * R,
        s_inv=lambda R: R,
        jacobians=(
            lambda R, phi: -sigma,
            lambda R, phi: -sigma * (2.0 + 2.0 * phi),
        ),
        kappa1_scaled_jac=lambda R: -2.0 * K1 * R,
        matrix=lambda R: 1.0 / R,
    )
    spec = ControllerSpec(
        m=1, K1=K1, K2=float(p["K2"]), K3=float(p["K3"]), Kv1=float(p["Kv1"]),
        Kv2=float(p["Kv2"]), kappa1="cubic", scaling=scaling,
        x2d0=float(p["phi_d0"]),
    )
    initial = AugmentedState(x1=float(p["R"]), x2=float(p["phi"]),
                             x3=float(p["psi"]), x2d=float(p["phi_d0"]))
    return Scenario(
        name="example2", model=model, spec=spec, simcfg=_simcfg(p),
        initial=initial,
        expected={
            "plant_norm_end": 1e-2,
            "h1_tol": 1e-3, "h1_by": 15.0,
            "vdot_violation_frac": 0.01, "terminal_ball": 1e-3,
        },
    )


# ---------------------------------------------------------------------------
# example 3: output tracking of a van der Pol reference


def vdp_accel(r, rdot):
    """Van der Pol acceleration with the worked case's damping 0.2."""
    return -r + 0.2 * (1.0 - r * r) * rdot


def example3_tracking(**overrides):
    """Example-1 plant tracking a co-integrated van der Pol reference."""
    p = _merge({
        "K1": 1.0, "K2": 1.0, "Kv1": 1.0, "Kv2": 1.0,
        "kappa2_variant": "full", "x2d_dot_variant": "full",
        "x1": 0.5, "x2": 0.0, "x2d0": 0.0, "u0": 0.0,
        "r0": 0.5, "rdot0": 0.0,
        "t_final": 40.0, **_SIM_DEFAULTS,
    }, overrides, "example3")
    model = _example1_model()
    reference = SecondOrderReference(accel=vdp_accel, r0=float(p["r0"]),
                                     rdot0=float(p["rdot0"]))
    spec = ControllerSpec(
        m=1, K1=float(p["K1"]), K2=float(p["K2"]), Kv1=float(p["Kv1"]),
        Kv2=float(p["Kv2"]), kappa2_variant=str(p["kappa2_variant"]),
        x2d_dot_variant=str(p["x2d_dot_variant"]), reference=reference,
        x2d0=float(p["x2d0"]), u0=float(p["u0"]),
    )
    initial = AugmentedState(x1=float(p["x1"]), x2=float(p["x2"]),
                             x2d=spec.x2d0, u=spec.u0)
    return Scenario(
        name="example3", model=model, spec=spec, simcfg=_simcfg(p),
        initial=initial,
        expected={
            "tracking_tol": 5e-3, "tracking_from": 10.0,
            "residual_tol": 1e-3, "residual_by": 10.0,
            "period_corr": 0.99,
            "vdot_violation_frac": 0.01, "terminal_ball": 1e-3,
        },
    )


# ---------------------------------------------------------------------------
# scalar plant with a treatable residual singularity


def singular_scalar_example(**overrides):
    """Scalar plant x1' = x1 (x1 + u + u^3) with a stativized control.

    The unscaled residual has a d/du factor of x1, so the control-state
    rate becomes singular as the state converges; dividing the residual
    by x1 removes the singularity.  ``scaling=off`` runs the unscaled
    law, which aborts on the singularity diagnosis.  The unscaled run
    carries a wide singularity margin (det_tol 1e-2): past it, the
    residual's leftover forces a finite-time control escape whose norm
    blow-up would otherwise outrun the default 1e-12 determinant
    underflow, masking the root cause.
    """
    p = _merge({
        "K1": 1.0, "Kv1": 1.0, "scaling": True,
        "x1": 0.5, "u0": 0.0,
        "t_final": 40.0, **_SIM_DEFAULTS,
    }, overrides, "singular-scalar")
    K1 = float(p["K1"])
    use_scaling = _as_bool(p["scaling"], "scaling")

    def f(x1, u):
        return x1 * (x1 + u + u ** 3)

    level0 = pure_level(f, jacobians=(
        lambda x1, u: 2.0 * x1 + u + u ** 3,
        lambda x1, u: x1 * (1.0 + 3.0 * u * u),
    ))
    domain = DomainBox(lower=[-1.0, -2.0], upper=[1.0, 2.0])
    model = CascadeModel(1, (level0,), domain=domain, name="singular-scalar",
                         block_names=("x1",))
    scaling = None
    if use_scaling:
        scaling = ResidualScaling(
            field_scaled=lambda x1, u: x1 + u + u ** 3,
            kappa1_scaled=lambda x1: -K1,
            s_inv=lambda x1: x1,
            jacobians=(
                lambda x1, u: 1.0,
                lambda x1, u: 1.0 + 3.0 * u * u,
            ),
            kappa1_scaled_jac=lambda x1: 0.0,
            matrix=lambda x1: 1.0 / x1,
        )
    spec = ControllerSpec(m=1, K1=K1, Kv1=float(p["Kv1"]), scaling=scaling,
                          u0=float(p["u0"]),
                          det_tol=1e-12 if use_scaling else 1e-2)
    initial = AugmentedState(x1=float(p["x1"]), u=spec.u0)
    return Scenario(
        name="singular-scalar", model=model, spec=spec, simcfg=_simcfg(p),
        initial=initial,
        expected={"x1_end": 1e-3, "unscaled_cause": "SingularJacobian"},
    )


# ---------------------------------------------------------------------------
# double-integrator baseline for the explicit two-step design


def strict_baseline_example(**overrides):
    """Double integrator under the classical explicit design."""
    p = _merge({
        "K1": 1.0, "K2": 1.0,
        "x1": 1.0, "x2": 0.0,
        "t_final": 12.0, **_SIM_DEFAULTS,
    }, overrides, "strict-baseline")
    level0 = strict_level(lambda x1: 0.0, g=lambda x1: 1.0,
                          jacobians=(lambda x1, x2: 0.0,))
    level1 = strict_level(lambda x1, x2: 0.0, g=lambda x1, x2: 1.0,
                          jacobians=(lambda x1, x2, u: 0.0,
                                     lambda x1, x2, u: 0.0))
    domain = DomainBox(lower=[-2.0, -2.0, -4.0], upper=[2.0, 2.0, 4.0])
    model = CascadeModel(1, (level0, level1), domain=domain,
                         name="double-integrator", block_names=("x1", "x2"))
    spec = ControllerSpec(m=1, K1=float(p["K1"]), K2=float(p["K2"]))
    initial = AugmentedState(x1=float(p["x1"]), x2=float(p["x2"]))
    return Scenario(
        name="strict-baseline", model=model, spec=spec, simcfg=_simcfg(p),
        initial=initial,
        expected={"closed_form_tol": 1e-4, "plant_norm_end": 1e-3},
    )


SCENARIOS = {
    "example1": example1_stabilization,
    "example2": example2_jet_engine,
    "example3": example3_tracking,
    "singular-scalar": singular_scalar_example,
    "strict-baseline": strict_baseline_example,
}


def build_scenario(name, overrides=None):
    """Instantiate a named scenario with optional key overrides."""
    if name not in SCENARIOS:
        known = ", ".join(sorted(SCENARIOS))
        raise ScenarioConfigError(f"unknown scenario '{name}' (known: {known})")
    return SCENARIOS[name](**(overrides or {}))
