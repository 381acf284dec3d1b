import numpy as np
import pytest

import dynastep as ds
from dynastep import AugmentedState, ControllerSpec, RefSample
from dynastep.acceptance import (
    h1_pure_form, h1_tracking_form, h2_pure_form, h2_tracking_biased_variant,
    h2_tracking_form,
)
from dynastep.controller import SingularJacobianError
from dynastep.model import CascadeModel, DomainBox, pure_level, strict_level
from dynastep.scenarios import vdp_accel


@pytest.fixture(scope="module")
def ex1():
    return ds.example1_stabilization()


@pytest.fixture(scope="module")
def ex3():
    return ds.example3_tracking()


@pytest.fixture(scope="module")
def ic_state():
    return AugmentedState(x1=0.5, x2=0.0, x2d=0.0, u=0.0)


class TestEvalH1:
    def test_hand_value_at_ic(self, ex1):
        np.testing.assert_allclose(ds.eval_h1(ex1.model, ex1.spec, 0.5, 0.0), [1.0])

    def test_vanishes_at_origin(self, ex1):
        np.testing.assert_allclose(ds.eval_h1(ex1.model, ex1.spec, 0.0, 0.0), [0.0])

    def test_tracking_hand_value(self, ex3):
        ref = RefSample(r=0.5, rdot=0.0, rddot=vdp_accel(0.5, 0.0))
        got = ds.eval_h1(ex3.model, ex3.spec, 0.5, 0.0, ref=ref)
        np.testing.assert_allclose(got, [0.5])


class TestX2dDot:
    def test_full_hand_value(self, ex1, ic_state):
        np.testing.assert_allclose(ds.x2d_dot(ex1.model, ex1.spec, ic_state),
                                   [-2.5], rtol=1e-12)

    def test_zero_where_residual_and_state_vanish(self, ex1):
        st = AugmentedState(x1=0.0, x2=0.3, x2d=0.0, u=0.1)
        assert ds.x2d_dot(ex1.model, ex1.spec, st)[0] == 0.0
        simplified = ds.example1_stabilization(x2d_dot_variant="simplified")
        assert ds.x2d_dot(simplified.model, simplified.spec, st)[0] == 0.0

    def test_simplified_hand_value(self, ic_state):
        sc = ds.example1_stabilization(x2d_dot_variant="simplified")
        np.testing.assert_allclose(ds.x2d_dot(sc.model, sc.spec, ic_state),
                                   [-1.0], rtol=1e-12)


class TestKappa2:
    def test_vanishes_with_matched_virtual_control(self, ex1):
        st = AugmentedState(x1=0.0, x2=0.0, x2d=0.0, u=0.3)
        assert ds.kappa2(ex1.model, ex1.spec, st)[0] == 0.0

    def test_lipschitz_hand_value(self):
        sc = ds.example1_stabilization(kappa2_variant="lipschitz",
                                       x2d_dot_variant="simplified")
        st = AugmentedState(x1=0.5, x2=0.2, x2d=0.0, u=0.0)
        # -K2 (x2 - x2d) + x2d rate = -0.2 - 1.0
        np.testing.assert_allclose(ds.kappa2(sc.model, sc.spec, st), [-1.2],
                                   rtol=1e-12)

    def test_full_hand_value_and_residual_rearrangement(self, ex1):
        st = AugmentedState(x1=0.5, x2=0.0, x2d=0.1, u=0.0)
        got = ds.kappa2(ex1.model, ex1.spec, st)[0]
        # hand transcription, exact decimal arithmetic
        assert abs(got - (-5.4140420072)) < 1e-9
        # must equal f2 - h2 with the hand-derived residual at u = 0
        h2 = h2_pure_form(0.5, 0.0, 0.0, 0.1, 1.0, 1.0, 1.0)
        assert abs(got - (0.0 - h2)) < 1e-12

    def test_first_order_variants(self, ic_state):
        lit = ds.example1_stabilization(kappa2_variant="first-order")
        inv = ds.example1_stabilization(kappa2_variant="first-order")
        inv.spec.first_order_inverse = True
        # at the IC both Jacobian factors are 1, so the forms coincide
        a = ds.kappa2(lit.model, lit.spec, ic_state)[0]
        b = ds.kappa2(inv.model, inv.spec, ic_state)[0]
        np.testing.assert_allclose(a, b, rtol=1e-12)
        st = AugmentedState(x1=0.5, x2=0.0, x2d=0.4, u=0.0)
        a = ds.kappa2(lit.model, lit.spec, st)[0]
        b = ds.kappa2(inv.model, inv.spec, st)[0]
        assert abs(a - b) > 1e-6  # they differ once the factor leaves 1


class TestEvalH2:
    def test_zero_at_origin(self, ex1):
        st = AugmentedState(x1=0.0, x2=0.0, x2d=0.0, u=0.0)
        assert ds.eval_h2(ex1.model, ex1.spec, st)[0] == 0.0

    def test_hand_value_at_ic(self, ex1, ic_state):
        got = ds.eval_h2(ex1.model, ex1.spec, ic_state)[0]
        assert got == pytest.approx(5.0, abs=1e-12)
        assert got == pytest.approx(
            h2_pure_form(0.5, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0), abs=1e-12)

    def test_matches_transcription_on_random_states(self, ex1):
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(1000):
            x1, x2, x2d, u = rng.uniform(-1, 1, 4)
            st = AugmentedState(x1=x1, x2=x2, x2d=x2d, u=u)
            got = ds.eval_h2(ex1.model, ex1.spec, st)[0]
            worst = max(worst, abs(got - h2_pure_form(x1, x2, u, x2d, 1, 1, 1)))
        assert worst <= 1e-9


class TestTrackingResiduals:
    def test_matches_exact_transcription(self, ex3):
        rng = np.random.default_rng(6)
        worst_h1 = worst_h2 = worst_gap = 0.0
        for _ in range(1000):
            x1, x2, x2d, u, r, rd = rng.uniform(-1, 1, 6)
            rdd = vdp_accel(r, rd)
            ref = RefSample(r=r, rdot=rd, rddot=rdd)
            h1v = ds.eval_h1(ex3.model, ex3.spec, x1, x2d, ref=ref)[0]
            worst_h1 = max(worst_h1, abs(h1v - h1_tracking_form(x1, x2d, r, rd, 1.0)))
            st = AugmentedState(x1=x1, x2=x2, x2d=x2d, u=u, ref=ref)
            h2v = ds.eval_h2(ex3.model, ex3.spec, st)[0]
            worst_h2 = max(worst_h2, abs(
                h2v - h2_tracking_form(x1, x2, u, x2d, r, rd, rdd, 1, 1, 1)))
            # The biased transcription variant differs by exactly
            # (2 r + 2 rdot) / (1 + 0.6 x2^2) at unit gains; pin it.
            gap = h2v - h2_tracking_biased_variant(
                x1, x2, u, x2d, r, rd, rdd, 1, 1, 1)
            worst_gap = max(worst_gap, abs(
                gap - (2 * r + 2 * rd) / (1 + 0.6 * x2 * x2)))
        assert worst_h1 == 0.0
        assert worst_h2 <= 1e-9
        assert worst_gap <= 1e-9


class TestUDot:
    def test_zero_at_origin(self, ex1):
        st = AugmentedState(x1=0.0, x2=0.0, x2d=0.0, u=0.0)
        assert ds.u_dot(ex1.model, ex1.spec, st)[0] == 0.0

    def test_hand_value_at_ic(self, ex1, ic_state):
        # Hand evaluation: h2 = 5, dh2/du = 1, and the coupling bracket
        # (dh2/dx1) f1 + (dh2/dx2) f2 + (dh2/dx2d) x2d_rate cancels the
        # gradient term exactly: 10*0.5 + 1.5*0 + 4*(-2.5) = -5.
        got = ds.u_dot(ex1.model, ex1.spec, ic_state)[0]
        assert abs(got - 0.0) < 1e-6

    def test_partials_match_hand_derivation(self, ex1, ic_state):
        dx1, dx2, dx2d, du = ds.h2_partials(ex1.model, ex1.spec, ic_state)
        assert dx1[0, 0] == pytest.approx(10.0, abs=1e-6)
        assert dx2[0, 0] == pytest.approx(1.5, abs=1e-6)
        assert dx2d[0, 0] == pytest.approx(4.0, abs=1e-6)
        assert du[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_gradient_term_vanishes_on_solved_residual(self, ex1):
        # Find u solving h2 = 0 at a state with x2 != x2d by bisection,
        # then the first term of the rate law drops and only the
        # coupling remains.
        x1, x2, x2d = 0.5, 0.3, 0.0

        def h2_at(u):
            return ds.eval_h2(ex1.model, ex1.spec,
                              AugmentedState(x1=x1, x2=x2, x2d=x2d, u=u))[0]

        lo, hi = -10.0, 10.0
        assert h2_at(lo) * h2_at(hi) < 0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if h2_at(lo) * h2_at(mid) <= 0:
                hi = mid
            else:
                lo = mid
        u = 0.5 * (lo + hi)
        st = AugmentedState(x1=x1, x2=x2, x2d=x2d, u=u)
        assert abs(ds.eval_h2(ex1.model, ex1.spec, st)[0]) < 1e-12
        rate = ds.u_dot(ex1.model, ex1.spec, st)[0]
        dx1, dx2, dx2d, du = ds.h2_partials(ex1.model, ex1.spec, st)
        f1 = ex1.model.eval_level(0, (x1, x2))[0]
        f2 = ex1.model.eval_level(1, (x1, x2, u))[0]
        xd = ds.x2d_dot(ex1.model, ex1.spec, st)[0]
        delta = f1 - ex1.model.eval_level(0, (x1, x2d))[0]
        g = ex1.model.jacobian(0, (x1, x2), 1)[0, 0]
        coupling = dx1[0, 0] * f1 + dx2[0, 0] * f2 + dx2d[0, 0] * xd + g * delta
        assert abs(rate - (-coupling / du[0, 0])) < 1e-9
        assert abs(coupling) > 1e-3  # the mismatch term is genuinely nonzero


class TestStrictLevelControl:
    def test_double_integrator_hand_value(self):
        sc = ds.strict_baseline_example()
        st = AugmentedState(x1=1.0, x2=0.0)
        np.testing.assert_allclose(
            ds.strict_level_control(sc.model, sc.spec, st), [-2.0], atol=1e-10)

    def test_zero_at_origin(self):
        sc = ds.strict_baseline_example()
        st = AugmentedState(x1=0.0, x2=0.0)
        assert ds.strict_level_control(sc.model, sc.spec, st)[0] == 0.0

    def test_identity_gain_reduces_to_target_minus_drift(self, ex1):
        # pure first level + strict second level with g2 = I
        f2 = lambda x1, x2: x1 * x2
        model = CascadeModel(1, (ex1.model.levels[0],
                                 strict_level(f2, lambda x1, x2: 1.0)),
                             name="mixed-two")
        spec = ControllerSpec(m=1)
        st = AugmentedState(x1=0.4, x2=0.2, x2d=0.1)
        u = ds.strict_level_control(model, spec, st)[0]
        kap = ds.kappa2(model, spec,
                        AugmentedState(x1=0.4, x2=0.2, x2d=0.1, u=0.0))[0]
        assert u == pytest.approx(kap - f2(0.4, 0.2), abs=1e-12)


class TestScaledResidual:
    def test_scalar_singular_hand_value(self):
        sc = ds.singular_scalar_example()
        got = ds.scaled_residual(sc.model, sc.spec, (2.0,), 0.0)
        np.testing.assert_allclose(got, [3.0])

    def test_jet_hand_value(self):
        sc = ds.example2_jet_engine()
        got = ds.scaled_residual(sc.model, sc.spec, (2.0,), 0.0)
        np.testing.assert_allclose(got, [2.0])

    def test_identity_scaling_is_plain_residual(self):
        sc = ds.singular_scalar_example(scaling="off")
        got = ds.scaled_residual(sc.model, sc.spec, (2.0,), 0.0)
        # h = x1 (x1 + u + u^3) + K1 x1 at (2, 0)
        np.testing.assert_allclose(got, [2.0 * 2.0 + 2.0])

    def test_generic_matrix_scaling_path(self, ex1):
        # A plain callable scaling multiplies the residual pointwise.
        spec = ControllerSpec(m=1, scaling=lambda x1: 2.0)
        got = ds.eval_h1(ex1.model, spec, 0.5, 0.0)[0]
        base = ds.eval_h1(ex1.model, ex1.spec, 0.5, 0.0)[0]
        assert got == pytest.approx(2.0 * base, rel=1e-12)


class TestSingularityDetection:
    def test_unscaled_rate_raises_near_singular_locus(self):
        sc = ds.singular_scalar_example(scaling="off")
        sc.spec.det_tol = 1e-12
        st = AugmentedState(x1=1e-13, x2d=0.0, u=0.0)
        with pytest.raises(SingularJacobianError):
            ds.x2d_dot(sc.model, sc.spec, st)

    def test_scaled_rate_fine_at_singular_locus(self):
        sc = ds.singular_scalar_example()
        st = AugmentedState(x1=0.0, x2d=0.0, u=0.0)
        val = ds.x2d_dot(sc.model, sc.spec, st)[0]
        assert np.isfinite(val)
        # d h~ / d u = 1 + 3 u^2 = 1 at u = 0: nonsingular by inspection
        assert val == pytest.approx(-1.0 * 1.0 * (0.0 + 0.0 + 1.0), abs=1e-12)


class TestClosedLoopRhs:
    def test_origin_fixed_point_example1(self, ex1):
        st = AugmentedState(x1=0.0, x2=0.0, x2d=0.0, u=0.0)
        r = ds.closed_loop_rhs(ex1.model, ex1.spec, st)
        for v in (r.x1, r.x2, r.x2d, r.u):
            assert abs(v[0]) == 0.0

    def test_ic_rates_example1(self, ex1, ic_state):
        r = ds.closed_loop_rhs(ex1.model, ex1.spec, ic_state)
        np.testing.assert_allclose(r.x1, [0.5])
        np.testing.assert_allclose(r.x2, [0.0])
        np.testing.assert_allclose(r.x2d, [-2.5])
        assert abs(r.u[0]) < 1e-6

    def test_example2_ic_rates(self):
        sc = ds.example2_jet_engine()
        st = AugmentedState(x1=2.0, x2=5.0, x3=-5.0, x2d=0.0)
        r = ds.closed_loop_rhs(sc.model, sc.spec, st)
        np.testing.assert_allclose(r.x1, [-74.0])
        for v in (r.x2, r.x3, r.x2d):
            assert np.all(np.isfinite(v))
        assert r.u is None  # explicit control, not a state

    def test_example2_origin_fixed_point(self):
        sc = ds.example2_jet_engine()
        st = AugmentedState(x1=0.0, x2=0.0, x3=0.0, x2d=0.0)
        r = ds.closed_loop_rhs(sc.model, sc.spec, st)
        for v in (r.x1, r.x2, r.x3, r.x2d):
            assert abs(v[0]) == 0.0

    def test_singular_scalar_augmented_equilibrium(self):
        # The converged control solves u + u^3 + K1 = 0, not u = 0.
        lo, hi = -1.0, 0.0
        f = lambda u: u + u ** 3 + 1.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if f(lo) * f(mid) <= 0:
                hi = mid
            else:
                lo = mid
        u_star = 0.5 * (lo + hi)
        sc = ds.singular_scalar_example()
        r = ds.closed_loop_rhs(sc.model, sc.spec,
                               AugmentedState(x1=0.0, u=u_star))
        assert abs(r.x1[0]) < 1e-12
        assert abs(r.u[0]) < 1e-9


class TestGainConditions:
    @pytest.fixture(scope="class")
    def linear_model(self):
        lin0 = pure_level(lambda x1, x2: x1 + x2,
                          jacobians=(lambda x1, x2: 1.0, lambda x1, x2: 1.0))
        lin1 = pure_level(lambda x1, x2, u: u,
                          jacobians=(lambda *a: 0.0, lambda *a: 0.0,
                                     lambda *a: 1.0))
        return CascadeModel(1, (lin0, lin1),
                            domain=DomainBox([-1.0] * 3, [1.0] * 3))

    def test_hand_computed_fail_and_pass(self, linear_model):
        st = AugmentedState(x1=0.3, x2=0.1, x2d=0.0, u=0.0)
        rep = ds.check_gain_conditions(linear_model, ControllerSpec(m=1), st)
        assert rep.rate_lhs[0, 0] == pytest.approx(1.0)
        assert rep.rate_rhs[0, 0] == pytest.approx(2.75)
        assert not rep.rate_ok
        rep3 = ds.check_gain_conditions(linear_model,
                                        ControllerSpec(m=1, Kv1=3.0), st)
        assert rep3.rate_ok
        assert rep3.rate_margin == pytest.approx(0.25)

    def test_linear_lipschitz_is_exact(self, linear_model):
        assert ds.estimate_lipschitz(linear_model) == pytest.approx(1.0)

    def test_k2_condition_flags(self, linear_model):
        st = AugmentedState(x1=0.3, x2=0.1, x2d=0.0, u=0.0)
        # L = 1, M = 1/Kv1 * (dh1/dx1)^2 = 4/3, bound = (1 + 4/3)/4
        rep = ds.check_gain_conditions(
            linear_model, ControllerSpec(m=1, Kv1=3.0, K2=1.0), st)
        assert rep.k2_bound == pytest.approx((1.0 + 4.0 / 3.0) / 4.0)
        assert rep.k2_ok
        weak = ds.check_gain_conditions(
            linear_model, ControllerSpec(m=1, Kv1=3.0, K2=0.5), st)
        assert not weak.k2_ok


class TestControllerSpecValidation:
    def test_rejects_nonpositive_gain(self):
        with pytest.raises(ValueError, match="positive definite"):
            ControllerSpec(m=1, Kv1=-1.0)

    def test_rejects_unknown_variant(self):
        with pytest.raises(ValueError, match="kappa2_variant"):
            ControllerSpec(m=1, kappa2_variant="bogus")

    def test_matrix_gain_must_be_symmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            ControllerSpec(m=2, K1=np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_scalar_gain_promoted_for_m2(self):
        spec = ControllerSpec(m=2, K1=2.0)
        np.testing.assert_allclose(spec.K1, 2.0 * np.eye(2))


class TestVectorBlocks:
    """m = 2 coverage of the generic matrix paths."""

    @pytest.fixture(scope="class")
    def mimo(self):
        a_mat = np.array([[0.4, -0.2], [0.1, 0.3]])

        def f1(x1, x2):
            return a_mat @ x1 + x2 + 0.2 * x2 ** 3

        def f2(x1, x2, u):
            return x1 * x2 + u + 0.1 * u ** 3

        lvl0 = pure_level(f1, jacobians=(
            lambda x1, x2: a_mat,
            lambda x1, x2: np.diag(1.0 + 0.6 * x2 ** 2),
        ))
        lvl1 = pure_level(f2, jacobians=(
            lambda x1, x2, u: np.diag(x2),
            lambda x1, x2, u: np.diag(x1),
            lambda x1, x2, u: np.diag(1.0 + 0.3 * u ** 2),
        ))
        model = CascadeModel(2, (lvl0, lvl1),
                             domain=DomainBox([-1.0] * 6, [1.0] * 6))
        spec = ControllerSpec(m=2)
        return model, spec

    def test_origin_fixed_point(self, mimo):
        model, spec = mimo
        z = np.zeros(2)
        st = AugmentedState(x1=z, x2=z, x2d=z, u=z)
        r = ds.closed_loop_rhs(model, spec, st)
        for v in (r.x1, r.x2, r.x2d, r.u):
            np.testing.assert_array_equal(v, z)

    def test_closed_loop_descends(self, mimo):
        model, spec = mimo
        simcfg = ds.SimConfig(t_final=8.0, dt=1e-3)
        initial = AugmentedState(x1=np.array([0.4, -0.3]), x2=np.zeros(2),
                                 x2d=np.zeros(2), u=np.zeros(2))
        traj = ds.simulate(model, spec, simcfg, initial)
        assert traj.termination.ok
        assert traj.plant_inf_norms()[-1] < 1e-2
        rep = ds.monitor_decrease(traj, exclude_norm_below=1e-3)
        assert rep.violation_fraction <= 0.01

    def test_partials_match_fd_shapes(self, mimo):
        model, spec = mimo
        st = AugmentedState(x1=np.array([0.2, 0.1]), x2=np.array([0.05, -0.1]),
                            x2d=np.zeros(2), u=np.zeros(2))
        for p in ds.h2_partials(model, spec, st):
            assert p.shape == (2, 2)
            assert np.all(np.isfinite(p))
