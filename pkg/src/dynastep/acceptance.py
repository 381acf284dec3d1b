"""Acceptance gate: every shipped behavior checked at a pinned tolerance.

Each check returns a ``CheckResult``; ``run_all`` drives them with a
shared run cache so the command-line ``verify`` and the test suite
execute the identical criteria.  The closed forms in this module are
hand-derived transcriptions of the worked scenarios' residuals and of
the double-integrator closed loop; they are independent of the generic
controller kernels they validate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .controller import AugmentedState, ControllerSpec, RefSample, check_gain_conditions
from .lyapunov import monitor_decrease
from .model import fd_jacobian
from .scenarios import (
    SCENARIOS, build_scenario, example1_stabilization, example2_jet_engine,
    example3_tracking, singular_scalar_example, strict_baseline_example,
    vdp_accel,
)
from . import controller as ctl

__all__ = ["CheckResult", "run_all", "ALL_CHECKS"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: {self.detail}"


# ---------------------------------------------------------------------------
# hand-derived closed forms for the worked scenarios


def h1_pure_form(x1, x2d, K1):
    """First-level residual of the two-level worked plant."""
    return x1 + x2d + x2d ** 3 / 5.0 + K1 * x1


def h2_pure_form(x1, x2, u, x2d, K1, K2, Kv1):
    """Second-level residual of the two-level worked plant.

    Derived by substituting the first-level rate law into the expected
    second-level dynamics and collecting coefficients; the bracket
    structure (2 - K1 - K1^2) x1 + 2 (1 + K1) h1 + Kv1 (1 + 0.6 x2d^2)^2 h1
    is the ground truth the generic engine must reproduce.
    """
    g = 1.0 + 0.6 * x2 * x2
    gd = 1.0 + 0.6 * x2d * x2d
    h1 = h1_pure_form(x1, x2d, K1)
    bracket = (2.0 - K1 - K1 * K1) * x1 + (2.0 * (1.0 + K1) + Kv1 * gd * gd) * h1
    return (x1 * x2 + u + u ** 3 / 7.0
            + K2 * g * ((x2 + 0.2 * x2 ** 3) - (x2d + 0.2 * x2d ** 3))
            + bracket / g)


def h1_tracking_form(x1, x2d, r, rdot, K1):
    """Tracking residual: expected dynamics act on the output error."""
    return x1 + x2d + x2d ** 3 / 5.0 + K1 * (x1 - r) - rdot


def h2_tracking_form(x1, x2, u, x2d, r, rdot, rddot, K1, K2, Kv1):
    """Tracking second-level residual, exact-design feedforward.

    Re-deriving the bracket with the error coordinate and the residual's
    explicit time dependence gives the feedforward tail
    (2 - K1 - K1^2)(x1 - r) + rdot - rddot.  A commonly reproduced
    variant of this expression instead carries -2 r - K1 rdot - rddot
    with a bare x1 coefficient; that variant is inconsistent with the
    error-coordinate design (the implied control target keeps an O(r)
    bias, which would visibly break the near-exact tracking this
    scenario achieves) and differs from the exact form by exactly
    ((K1 + K1^2) r + (1 + K1) rdot) / (1 + 0.6 x2^2).
    """
    g = 1.0 + 0.6 * x2 * x2
    gd = 1.0 + 0.6 * x2d * x2d
    h1 = h1_tracking_form(x1, x2d, r, rdot, K1)
    bracket = ((2.0 - K1 - K1 * K1) * (x1 - r)
               + (2.0 * (1.0 + K1) + Kv1 * gd * gd) * h1 + rdot - rddot)
    return (x1 * x2 + u + u ** 3 / 7.0
            + K2 * g * ((x2 + 0.2 * x2 ** 3) - (x2d + 0.2 * x2d ** 3))
            + bracket / g)


def h2_tracking_biased_variant(x1, x2, u, x2d, r, rdot, rddot, K1, K2, Kv1):
    """The inconsistent feedforward variant, kept to pin the exact gap."""
    g = 1.0 + 0.6 * x2 * x2
    gd = 1.0 + 0.6 * x2d * x2d
    h1 = h1_tracking_form(x1, x2d, r, rdot, K1)
    bracket = ((2.0 - K1 - K1 * K1) * x1
               + (2.0 * (1.0 + K1) + Kv1 * gd * gd) * h1
               - 2.0 * r - K1 * rdot - rddot)
    return (x1 * x2 + u + u ** 3 / 7.0
            + K2 * g * ((x2 + 0.2 * x2 ** 3) - (x2d + 0.2 * x2d ** 3))
            + bracket / g)


def h1_scaled_jet_form(R, phi_d, sigma, K1):
    """Rescaled first-level residual of the jet-engine chain."""
    return -sigma * R - sigma * (2.0 * phi_d + phi_d * phi_d) + K1 * R * R


def double_integrator_closed_form(t, x10, x20):
    """Closed-loop solution of the baseline design with unit gains.

    The loop is linear with eigenvalues -1 +/- i; the solution follows
    from the eigenvalue analysis and is independent of the integrator.
    """
    t = np.asarray(t, dtype=float)
    c, s, e = np.cos(t), np.sin(t), np.exp(-t)
    x1 = e * (x10 * (c + s) + x20 * s)
    x2 = e * (x20 * (c - s) - 2.0 * x10 * s)
    return x1, x2


# ---------------------------------------------------------------------------
# shared run cache


class RunCache:
    """Lazily runs and memoizes the scenario trajectories the checks share."""

    def __init__(self):
        self._runs = {}
        self.timings = {}

    def get(self, key, builder):
        if key not in self._runs:
            sc = builder()
            t0 = time.perf_counter()
            self._runs[key] = sc.run()
            self.timings[key] = time.perf_counter() - t0
        return self._runs[key]

    def example1(self):
        return self.get("example1", example1_stabilization)

    def example2(self):
        return self.get("example2", example2_jet_engine)

    def example3(self):
        return self.get("example3", example3_tracking)

    def singular_scaled(self):
        return self.get("singular-scaled", singular_scalar_example)

    def singular_unscaled(self):
        return self.get("singular-unscaled",
                        lambda: singular_scalar_example(scaling="off"))

    def baseline(self):
        return self.get("strict-baseline", strict_baseline_example)

    def variant(self):
        return self.get("variant", lambda: example1_stabilization(
            kappa2_variant="lipschitz", x2d_dot_variant="simplified",
            Kv1=3.0, K2=2.0, t_final=20.0))


# ---------------------------------------------------------------------------
# the criteria


def check_residual_equivalence(cache):
    """Generic residuals match the hand-derived closed forms to 1e-9."""
    rng = np.random.default_rng(2024)
    sc = example1_stabilization()
    sc3 = example3_tracking()
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        x1, x2, x2d, u, r, rd = rng.uniform(-1.0, 1.0, 6)
        worst = max(worst, abs(
            ctl.eval_h1(sc.model, sc.spec, x1, x2d)[0]
            - h1_pure_form(x1, x2d, 1.0)))
        st = AugmentedState(x1=x1, x2=x2, x2d=x2d, u=u)
        worst = max(worst, abs(
            ctl.eval_h2(sc.model, sc.spec, st)[0]
            - h2_pure_form(x1, x2, u, x2d, 1.0, 1.0, 1.0)))
        rdd = vdp_accel(r, rd)
        ref = RefSample(r=r, rdot=rd, rddot=rdd)
        worst = max(worst, abs(
            ctl.eval_h1(sc3.model, sc3.spec, x1, x2d, ref=ref)[0]
            - h1_tracking_form(x1, x2d, r, rd, 1.0)))
        stt = AugmentedState(x1=x1, x2=x2, x2d=x2d, u=u, ref=ref)
        h2v = ctl.eval_h2(sc3.model, sc3.spec, stt)[0]
        worst = max(worst, abs(
            h2v - h2_tracking_form(x1, x2, u, x2d, r, rd, rdd, 1.0, 1.0, 1.0)))
        # The biased variant differs by an exactly known gap.
        gap = h2v - h2_tracking_biased_variant(
            x1, x2, u, x2d, r, rd, rdd, 1.0, 1.0, 1.0)
        worst = max(worst, abs(gap - (2.0 * r + 2.0 * rd) / (1.0 + 0.6 * x2 * x2)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 1.0
    return CheckResult(
        "residual-oracle-equivalence", ok,
        f"max abs error {worst:.2e} (tol 1e-9) over 1000 states in {elapsed:.2f}s")


def check_example1_stabilization(cache):
    """Plant norm < 1e-2 by t=15, residuals < 1e-3 past t=10, run < 5 s."""
    tr = cache.example1()
    elapsed = cache.timings["example1"]
    norm_end = tr.plant_inf_norms()[-1]
    i10 = np.searchsorted(tr.times, 10.0)
    h1_tail = float(np.max(np.abs(tr.column("h1")[i10:])))
    h2_tail = float(np.max(np.abs(tr.column("h2")[i10:])))
    ok = (tr.termination.ok and norm_end < 1e-2
          and h1_tail < 1e-3 and h2_tail < 1e-3 and elapsed < 5.0)
    return CheckResult(
        "example1-stabilization", ok,
        f"plant norm(15s)={norm_end:.2e} (<1e-2), max|h1|,|h2| past 10s = "
        f"{h1_tail:.2e},{h2_tail:.2e} (<1e-3), runtime {elapsed:.2f}s (<5s)")


def check_lyapunov_decrease(cache):
    """dV/dt < 1e-8 at >= 99% of samples outside the 1e-3 terminal ball."""
    worst = 0.0
    details = []
    for name, tr in (("example1", cache.example1()),
                     ("example2", cache.example2()),
                     ("example3", cache.example3())):
        rep = monitor_decrease(tr, tol_vdot=1e-8, exclude_norm_below=1e-3)
        worst = max(worst, rep.violation_fraction)
        details.append(f"{name}:{rep.violation_fraction:.4f}")
    ok = worst <= 0.01
    return CheckResult(
        "lyapunov-decrease", ok,
        "violation fractions " + ", ".join(details) + " (tol 0.01)")


def check_example2(cache):
    """Mixed chain converges with the rescaled residual and no singularity."""
    tr = cache.example2()
    norm_end = tr.plant_inf_norms()[-1]
    i15 = np.searchsorted(tr.times, 15.0)
    h1_tail = float(np.max(np.abs(tr.column("h1")[i15:])))
    ok = (tr.termination.ok and tr.termination.cause is None
          and norm_end < 1e-2 and h1_tail < 1e-3)
    return CheckResult(
        "example2-jet-engine", ok,
        f"completed={tr.termination.ok}, plant norm(20s)={norm_end:.2e} "
        f"(<1e-2), max|h1| past 15s={h1_tail:.2e} (<1e-3)")


def _estimate_period(times, ref):
    i0 = np.searchsorted(times, 20.0)
    r = ref[i0:]
    up = np.where((r[:-1] < 0.0) & (r[1:] >= 0.0))[0] + i0
    if len(up) < 2:
        raise ValueError("too few reference cycles to estimate a period")
    return float(np.mean(np.diff(times[up])))


def check_example3_tracking(cache):
    """Output follows the reference; the control settles into a cycle."""
    tr = cache.example3()
    t = tr.times
    err = np.abs(tr.column("x1") - tr.column("r"))
    i10 = np.searchsorted(t, 10.0)
    sup_err = float(np.max(err[i10:]))
    period = _estimate_period(t, tr.column("r"))
    dt = t[1] - t[0]
    shift = int(round(period / dt))
    i20 = np.searchsorted(t, 20.0)
    u = tr.column("u")
    a = u[i20:i20 + 2 * shift]
    b = u[i20 + shift:i20 + 3 * shift]
    corr = float(np.corrcoef(a, b)[0, 1])
    ok = tr.termination.ok and sup_err < 5e-3 and corr > 0.99
    return CheckResult(
        "example3-tracking", ok,
        f"sup|x1-r| on [10,40]={sup_err:.2e} (<5e-3), period~{period:.3f}s, "
        f"one-period correlation of u={corr:.4f} (>0.99)")


def check_singularity_handling(cache):
    """Unscaled run aborts on the singularity; rescaled run converges."""
    tru = cache.singular_unscaled()
    trs = cache.singular_scaled()
    x1_end = abs(trs.final("x1"))
    ok = (tru.termination.status == "aborted"
          and tru.termination.cause == "SingularJacobian"
          and trs.termination.ok and x1_end < 1e-3)
    return CheckResult(
        "singularity-handling", ok,
        f"unscaled: {tru.termination.status}/{tru.termination.cause} at "
        f"t={tru.termination.t:.2f}; scaled: completed with |x1|->{x1_end:.1e}")


def check_gain_conditions_hand_case(cache):
    """The scalar linear-plant sufficiency numbers match hand evaluation."""
    from .model import CascadeModel, DomainBox, pure_level

    lin0 = pure_level(lambda x1, x2: x1 + x2,
                      jacobians=(lambda x1, x2: 1.0, lambda x1, x2: 1.0))
    lin1 = pure_level(lambda x1, x2, u: u,
                      jacobians=(lambda *a: 0.0, lambda *a: 0.0,
                                 lambda *a: 1.0))
    model = CascadeModel(1, (lin0, lin1),
                         domain=DomainBox([-1.0] * 3, [1.0] * 3), name="linear")
    st = AugmentedState(x1=0.3, x2=0.1, x2d=0.0, u=0.0)
    rep1 = check_gain_conditions(model, ControllerSpec(m=1, Kv1=1.0), st)
    rep3 = check_gain_conditions(model, ControllerSpec(m=1, Kv1=3.0), st)
    ok = (abs(rep1.rate_lhs[0, 0] - 1.0) < 1e-12
          and abs(rep1.rate_rhs[0, 0] - 2.75) < 1e-12
          and not rep1.rate_ok
          and abs(rep3.rate_lhs[0, 0] - 3.0) < 1e-12
          and rep3.rate_ok
          and abs(rep1.lipschitz - 1.0) < 1e-12)
    return CheckResult(
        "gain-condition-checker", ok,
        f"Kv1=1: lhs={rep1.rate_lhs[0, 0]:g} rhs={rep1.rate_rhs[0, 0]:g} "
        f"fails; Kv1=3 passes; L={rep1.lipschitz:g} (exact 1)")


def check_variant_robustness(cache):
    """Simplified rate and target variants still stabilize the worked plant."""
    tr = cache.variant()
    sc = example1_stabilization(Kv1=3.0, K2=2.0)
    rep = check_gain_conditions(
        sc.model, ControllerSpec(m=1, K1=1.0, K2=2.0, Kv1=3.0, Kv2=1.0),
        AugmentedState(x1=0.5, x2=0.0, x2d=0.0, u=0.0))
    norm_end = tr.plant_inf_norms()[-1]
    ok = (rep.rate_ok and rep.k2_ok and tr.termination.ok and norm_end < 1e-2)
    return CheckResult(
        "variant-robustness", ok,
        f"gain conditions hold (margin {rep.rate_margin:.2f}, K2 bound "
        f"{rep.k2_bound:.2f}); plant norm(20s)={norm_end:.2e} (<1e-2)")


def check_numerics(cache):
    """Fourth-order step ratio and analytic/FD Jacobian agreement."""
    finals = []
    for dt in (8e-3, 4e-3, 2e-3):
        sc = example1_stabilization(t_final=3.0, dt=dt)
        tr = sc.run()
        finals.append(np.array([tr.final(c) for c in ("x1", "x2", "x2d", "u")]))
    d1 = float(np.linalg.norm(finals[0] - finals[1]))
    d2 = float(np.linalg.norm(finals[1] - finals[2]))
    ratio = d1 / d2
    worst = 0.0
    rng = np.random.default_rng(7)
    for name in SCENARIOS:
        model = build_scenario(name).model
        m = model.m
        for _ in range(100):
            for i in range(model.n_levels):
                arity = model.arity(i)
                args = []
                for j in range(arity):
                    block = j if j < arity - 1 else i + 1
                    args.append(model.domain.sample_block(block, m, rng, 1)[0])
                for wrt in range(arity):
                    ana = model.jacobian(i, args, wrt)
                    fd = fd_jacobian(
                        lambda *a: model.eval_level(i, a), args, wrt, 1e-4)
                    worst = max(worst, float(np.max(np.abs(ana - fd))))
    ok = 8.0 <= ratio <= 32.0 and worst <= 1e-5
    return CheckResult(
        "numerical-infrastructure", ok,
        f"RK4 halving ratio {ratio:.1f} (in [8,32]); max analytic-vs-FD "
        f"Jacobian gap {worst:.2e} (<=1e-5)")


def check_strict_baseline(cache):
    """Double integrator matches the eigenvalue-analysis closed form."""
    tr = cache.baseline()
    x1_cf, x2_cf = double_integrator_closed_form(tr.times, 1.0, 0.0)
    err = max(float(np.max(np.abs(tr.column("x1") - x1_cf))),
              float(np.max(np.abs(tr.column("x2") - x2_cf))))
    norm_end = tr.plant_inf_norms()[-1]
    ok = tr.termination.ok and err <= 1e-4 and norm_end < 1e-3
    return CheckResult(
        "strict-baseline", ok,
        f"max closed-form deviation {err:.2e} (<=1e-4) over [0,12], "
        f"plant norm(12s)={norm_end:.2e} (<1e-3)")


ALL_CHECKS = (
    ("residual-oracle-equivalence", check_residual_equivalence),
    ("example1-stabilization", check_example1_stabilization),
    ("lyapunov-decrease", check_lyapunov_decrease),
    ("example2-jet-engine", check_example2),
    ("example3-tracking", check_example3_tracking),
    ("singularity-handling", check_singularity_handling),
    ("gain-condition-checker", check_gain_conditions_hand_case),
    ("variant-robustness", check_variant_robustness),
    ("numerical-infrastructure", check_numerics),
    ("strict-baseline", check_strict_baseline),
)


def run_all(name_filter=None, echo=None):
    """Run the acceptance checks, optionally filtered by substring.

    Returns the list of results; ``echo`` (e.g. ``print``) receives one
    pass/fail line per criterion as it completes.
    """
    cache = RunCache()
    results = []
    for name, fn in ALL_CHECKS:
        if name_filter and name_filter not in name:
            continue
        try:
            res = fn(cache)
        except Exception as exc:  # a broken check is a failed check
            res = CheckResult(name, False, f"check raised {type(exc).__name__}: {exc}")
        results.append(res)
        if echo:
            echo(res.line())
    return results
