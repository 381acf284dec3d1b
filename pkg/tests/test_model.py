import numpy as np
import pytest

from dynastep import (
    CascadeModel, DomainBox, LevelDynamics, LevelKind, example1_stabilization,
    fd_jacobian, pure_level, strict_level,
)
from dynastep.scenarios import SCENARIOS, build_scenario


@pytest.fixture
def ex1_model():
    return example1_stabilization().model


class TestEvalLevel:
    def test_level1_hand_value(self, ex1_model):
        # x1 + x2 + x2^3/5 at (0.5, 0)
        np.testing.assert_allclose(ex1_model.eval_level(0, (0.5, 0.0)), [0.5])

    def test_origin_is_equilibrium(self, ex1_model):
        for i in range(ex1_model.n_levels):
            args = [0.0] * ex1_model.arity(i)
            assert ex1_model.eval_level(i, args)[0] == 0.0

    def test_level2_hand_value(self, ex1_model):
        # x1 x2 + u + u^3/7 at (1, 2, 1) = 3 + 1/7
        np.testing.assert_allclose(
            ex1_model.eval_level(1, (1.0, 2.0, 1.0)), [3.0 + 1.0 / 7.0])

    def test_arity_mismatch_rejected(self, ex1_model):
        with pytest.raises(ValueError, match="argument blocks"):
            ex1_model.eval_level(0, (0.5,))

    def test_wrong_block_length_rejected(self, ex1_model):
        with pytest.raises(ValueError, match="length-1"):
            ex1_model.eval_level(0, (np.array([0.5, 0.2]), 0.0))

    def test_ragged_output_rejected(self):
        bad = pure_level(lambda x1, x2: np.array([x1, x1]))
        model = CascadeModel(1, (bad,))
        with pytest.raises(ValueError, match="length-2"):
            model.eval_level(0, (0.3, 0.1))


class TestJacobian:
    def test_analytic_df1_dx2_at_zero(self, ex1_model):
        np.testing.assert_allclose(
            ex1_model.jacobian(0, (0.5, 0.0), 1), [[1.0]])

    def test_constant_field_jacobian_zero(self):
        const = pure_level(lambda x1, y: 3.0)
        model = CascadeModel(1, (const,))
        np.testing.assert_allclose(model.jacobian(0, (0.4, 0.2), 0), [[0.0]],
                                   atol=1e-9)

    def test_analytic_df2_du(self, ex1_model):
        np.testing.assert_allclose(
            ex1_model.jacobian(1, (0.0, 0.0, 1.0), 2), [[10.0 / 7.0]])


class TestFdJacobian:
    def test_identity_field(self):
        jac = fd_jacobian(lambda x: np.asarray(x), (np.array([0.3, -0.2]),), 0)
        np.testing.assert_allclose(jac, np.eye(2), atol=1e-9)

    def test_cubic_term_hand_value(self):
        # d/dx2 of x1 + x2 + x2^3/5 at x2 = 0.3 is 1 + 0.6 * 0.09 = 1.054
        jac = fd_jacobian(lambda x1, x2: np.array([x1[0] + x2[0] + x2[0] ** 3 / 5]),
                          (np.array([0.1]), np.array([0.3])), 1)
        assert abs(jac[0, 0] - 1.054) < 1e-6

    def test_bilinear_scalar_field(self):
        # d/du of x1 (x1 + u + u^3) at (1, 0) is x1 (1 + 3u^2) = 1
        jac = fd_jacobian(
            lambda x1, u: np.array([x1[0] * (x1[0] + u[0] + u[0] ** 3)]),
            (np.array([1.0]), np.array([0.0])), 1)
        assert abs(jac[0, 0] - 1.0) < 1e-7

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            fd_jacobian(lambda x: x, (np.array([1.0]),), 0, h_fd=0.0)


class TestDomainBox:
    def test_bounds_must_be_ordered(self):
        with pytest.raises(ValueError, match="lower < upper"):
            DomainBox([1.0], [0.0])

    def test_origin_requirement(self):
        DomainBox([-1.0], [2.0]).requires_origin()
        with pytest.raises(ValueError, match="origin"):
            DomainBox([0.5], [2.0]).requires_origin()

    def test_scenario_domains_contain_origin(self):
        for name in SCENARIOS:
            build_scenario(name).model.domain.requires_origin()

    def test_out_of_domain_warns_once(self, ex1_model, caplog):
        with caplog.at_level("WARNING", logger="dynastep.model"):
            ex1_model.eval_level(0, (5.0, 0.0))
            ex1_model.eval_level(0, (6.0, 0.0))
        hits = [r for r in caplog.records if "controlled domain" in r.message]
        assert len(hits) == 1


class TestStrictLevels:
    def test_strict_requires_gain(self):
        with pytest.raises(ValueError, match="gain"):
            LevelDynamics(LevelKind.STRICT, lambda x: x, None)

    def test_pure_rejects_gain(self):
        with pytest.raises(ValueError, match="affine"):
            LevelDynamics(LevelKind.PURE, lambda x: x, lambda x: 1.0)

    def test_gain_inverse_identity(self):
        # m = 2 strict level with a state-dependent invertible gain
        def g(x1):
            return np.array([[2.0 + x1[0] ** 2, 0.3], [-0.1, 1.5]])

        lvl = strict_level(lambda x1: np.zeros(2), g)
        model = CascadeModel(2, (lvl, strict_level(
            lambda x1, x2: np.zeros(2), lambda x1, x2: np.eye(2))))
        rng = np.random.default_rng(3)
        for _ in range(20):
            x1 = rng.uniform(-1, 1, 2)
            gm = model.strict_gain(0, (x1,))
            np.testing.assert_allclose(gm @ np.linalg.inv(gm), np.eye(2),
                                       atol=1e-10)

    def test_strict_level_evaluates_affine_form(self):
        lvl = strict_level(lambda x1: x1 ** 2, lambda x1: 2.0)
        model = CascadeModel(1, (lvl, strict_level(
            lambda x1, x2: 0.0, lambda x1, x2: 1.0)))
        np.testing.assert_allclose(model.eval_level(0, (3.0, 0.5)), [10.0])

    def test_strict_last_arg_jacobian_is_gain(self):
        lvl = strict_level(lambda x1: x1 ** 2, lambda x1: 2.0 + x1)
        model = CascadeModel(1, (lvl, strict_level(
            lambda x1, x2: 0.0, lambda x1, x2: 1.0)))
        np.testing.assert_allclose(model.jacobian(0, (0.5, 0.1), 1), [[2.5]])


class TestJacobianAgreement:
    @pytest.mark.parametrize("name", sorted(SCENARIOS))
    def test_analytic_matches_fd_on_domain(self, name):
        model = build_scenario(name).model
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(100):
            for i in range(model.n_levels):
                arity = model.arity(i)
                args = []
                for j in range(arity):
                    block = j if j < arity - 1 else i + 1
                    args.append(model.domain.sample_block(block, model.m, rng, 1)[0])
                for wrt in range(arity):
                    ana = model.jacobian(i, args, wrt)
                    fd = fd_jacobian(lambda *a: model.eval_level(i, a),
                                     args, wrt, 1e-4)
                    worst = max(worst, float(np.max(np.abs(ana - fd))))
        assert worst <= 1e-5


class TestConstruction:
    def test_dimension_must_be_positive_int(self):
        with pytest.raises(ValueError):
            CascadeModel(0, (pure_level(lambda a, b: a),))

    def test_needs_at_least_one_level(self):
        with pytest.raises(ValueError):
            CascadeModel(1, ())

    def test_block_names_must_match_levels(self):
        with pytest.raises(ValueError, match="block name"):
            CascadeModel(1, (pure_level(lambda a, b: a),),
                         block_names=("x1", "x2"))

    def test_domain_size_checked(self):
        with pytest.raises(ValueError, match="domain covers"):
            CascadeModel(1, (pure_level(lambda a, b: a),),
                         domain=DomainBox([-1.0], [1.0]))
