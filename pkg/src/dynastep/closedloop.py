"""Closed-loop assemblies: plant + control law as a flat augmented ODE.

Each assembly packs its augmented state into a flat vector for the
integrators and exposes per-sample telemetry (controls, residuals and
the composite Lyapunov terms).  Supported cascade shapes:

* single pure level            -> stativized terminal control [x1, u]
* pure + pure                  -> fully dynamic law [x1, x2, x2d, u]
  (plus co-integrated reference blocks in tracking mode)
* pure + strict                -> stativized virtual control, explicit u
* strict + strict              -> classical explicit two-step design
* pure + strict + strict       -> mixed three-step design with one
  stativized virtual control and two explicit solves
"""

from __future__ import annotations

import math

import numpy as np

from . import _blocks as bk
from .controller import (
    AugmentedState, ControllerSpec, NonFiniteError, RefSample,
    SecondOrderReference, SingularJacobianError, SingularMatrixError,
    StateRates, _ControlRateKernel, _Level1Kernel, _Level2Kernel, _gate_gain,
)
from .model import CascadeModel, LevelKind

__all__ = ["build_closed_loop", "ClosedLoop"]


def _labels(name, m):
    if m == 1:
        return [name]
    return [f"{name}_{i}" for i in range(1, m + 1)]


def _virtual_label(plant_label):
    # "x2" -> "x2d", "phi" -> "phi_d"
    if plant_label and plant_label[0] == "x" and plant_label[1:].isdigit():
        return plant_label + "d"
    return plant_label + "_d"


class ClosedLoop:
    """Base class: packing, labels and the structured-rate wrapper."""

    def __init__(self, model, spec, block_names, has_ref=False):
        self.model = model
        self.spec = spec
        self.m = model.m
        self.block_names = list(block_names)
        self.has_ref = has_ref
        names = list(self.block_names)
        if has_ref:
            names += ["r", "rdot"]
        self.state_labels = []
        for n in names:
            self.state_labels += _labels(n, self.m)
        self.n_blocks = len(names)
        self.size = self.n_blocks * self.m

    # -- packing ----------------------------------------------------------

    def _pack(self, blocks):
        m = self.m
        if m == 1:
            return np.array(blocks, dtype=float)
        return np.concatenate([np.asarray(b, dtype=float).reshape(m) for b in blocks])

    def _unpack(self, y):
        m = self.m
        if m == 1:
            return [float(v) for v in y]
        return [y[i * m:(i + 1) * m] for i in range(self.n_blocks)]

    # -- reference handling -------------------------------------------------

    def _ref_from_blocks(self, t, blocks):
        if not self.has_ref:
            if self.spec.tracking:
                return self.spec.reference_sample(t)
            return None
        r, rd = blocks[-2], blocks[-1]
        return self.spec.reference.sample_state(r, rd)

    def initial_vector(self, initial):
        m = self.m
        blocks = [bk.to_block(self._initial_block(initial, attr), m)
                  for attr in self._block_attrs()]
        if self.has_ref:
            ref = self.spec.reference
            if initial.ref is not None:
                blocks += [bk.to_block(initial.ref.r, m), bk.to_block(initial.ref.rdot, m)]
            elif isinstance(ref, SecondOrderReference):
                blocks += [bk.to_block(ref.r0, m), bk.to_block(ref.rdot0, m)]
            else:
                raise ValueError("tracking loop needs a co-integrated reference")
        return self._pack(blocks)

    def _initial_block(self, initial, attr):
        v = getattr(initial, attr)
        if v is None:
            raise ValueError(f"initial state needs block '{attr}'")
        return v

    def _block_attrs(self):
        raise NotImplementedError

    # -- public structured wrapper -----------------------------------------

    def state_to_vector(self, state):
        return self.initial_vector(state)

    def structured_rates(self, state):
        y = self.state_to_vector(state)
        dy = self.rhs(state.t, y)
        blocks = self._unpack(dy)
        return self._rates_from_blocks(blocks)

    def rhs(self, t, y):
        raise NotImplementedError

    def telemetry(self, t, y):
        raise NotImplementedError


class SingleLevelLoop(ClosedLoop):
    """One pure level whose actual control is the stativized state."""

    def __init__(self, model, spec):
        super().__init__(model, spec, [model.block_names[0], model.control_name])
        self.level1 = _Level1Kernel(model, spec)
        self.plant_labels = _labels(model.block_names[0], self.m)
        self.control_labels = _labels(model.control_name, self.m)
        self.residual_labels = _labels("h1", self.m)
        self.term_labels = ("V_term1", "V_term2", "V_term3", "V_term4")

    def _block_attrs(self):
        return ("x1", "u")

    def rhs(self, t, y):
        x1, u = self._unpack(y)
        d1 = self.level1.data(x1, u, None)
        return self._pack([d1.F1d, d1.x2d_rate])

    def _rates_from_blocks(self, blocks):
        return StateRates(x1=bk.from_block(blocks[0]), u=bk.from_block(blocks[1]))

    def telemetry(self, t, y):
        x1, u = self._unpack(y)
        d1 = self.level1.data(x1, u, None, want_rate=False)
        t1 = 0.5 * bk.dot(x1, x1)
        t2 = 0.5 * bk.dot(d1.h1, d1.h1)
        out = {}
        _put(out, self.control_labels, u, self.m)
        _put(out, self.residual_labels, d1.h1, self.m)
        _put_terms(out, (t1, t2, 0.0, 0.0))
        return out


class _ScalarPureChain:
    """Inlined scalar (m = 1) evaluation of the two-level dynamic law.

    Performs the same operations as the generic kernels without their
    per-call dispatch, which matters in the tight fixed-step loop; the
    test suite pins agreement between the two paths.  Built only for
    scalar gains, the builtin kappa1 forms, the default cross-term
    target, no residual rescaling and at most a co-integrated reference.
    """

    @staticmethod
    def applicable(model, spec):
        return (
            model.m == 1
            and spec.scaling is None
            and spec.gamma is None
            and isinstance(spec.kappa1, str)
            and (spec.reference is None
                 or isinstance(spec.reference, SecondOrderReference))
        )

    @staticmethod
    def _jac(model, i, wrt, h):
        lvl = model.levels[i]
        if lvl.jacobians is not None and lvl.jacobians[wrt] is not None:
            return lvl.jacobians[wrt]
        fn = lvl.f

        def jac(*args):
            a = list(args)
            x = a[wrt]
            a[wrt] = x + h
            fp = fn(*a)
            a[wrt] = x - h
            fm = fn(*a)
            return (fp - fm) / (2.0 * h)

        return jac

    def __init__(self, model, spec):
        self.f1 = model.levels[0].f
        self.f2 = model.levels[1].f
        h = spec.h_fd
        self.j1_x1 = self._jac(model, 0, 0, h)
        self.j1_x2 = self._jac(model, 0, 1, h)
        self.j2_u = self._jac(model, 1, 2, h)
        self.K1 = spec.K1
        self.K2 = spec.K2
        self.Kv1 = spec.Kv1
        self.Kv2 = spec.Kv2
        self.h = h
        self.det_tol = spec.det_tol
        self.cubic = spec.kappa1 == "cubic"
        self.k2_full = spec.kappa2_variant == "full"
        self.k2_first = spec.kappa2_variant == "first-order"
        self.first_inv = spec.first_order_inverse
        self.xd_full = spec.x2d_dot_variant == "full"
        self.track = spec.tracking
        self.accel = spec.reference.accel if self.track else None

    def _gate(self, d, what):
        if not math.isfinite(d):
            raise NonFiniteError(f"{what} is not finite")
        if abs(d) < self.det_tol:
            raise SingularJacobianError(
                f"{what} is singular (|det| = {abs(d):.3e} < {self.det_tol:.0e})")

    def _l1(self, x1, x2d, r, rd, rdd):
        e = x1 - r if self.track else x1
        F1d = self.f1(x1, x2d)
        if self.cubic:
            kv = -self.K1 * (e * e * e)
            kJ = -3.0 * self.K1 * e * e
        else:
            kv = -self.K1 * e
            kJ = -self.K1
        h1 = F1d - kv
        if self.track:
            h1 -= rd
            tff = kJ * rd - rdd
        else:
            tff = 0.0
        A = self.j1_x2(x1, x2d)
        B = self.j1_x1(x1, x2d) - kJ
        if self.xd_full:
            self._gate(A, "d h1 / d x2d")
            rate = -self.Kv1 * (A * h1) - (B * F1d + e + tff) / A
        else:
            rate = -self.Kv1 * (A * h1)
        return h1, A, B, F1d, e, rate

    def _k2(self, x1, x2, x2d, h1, A, B, F1d, e, rate):
        if self.k2_full:
            G = self.j1_x2(x1, x2)
            self._gate(G, "d f1 / d x2")
            F1s = self.f1(x1, x2)
            delta = F1s - F1d
            gamma = -self.K2 * (G * delta)
            P = self.j1_x1(x1, x2) - self.j1_x1(x1, x2d)
            bracket = e + B * h1 + P * F1s - A * rate
            return gamma - bracket / G, G, delta, F1s
        if self.k2_first:
            load = B * h1 + e
            if self.first_inv:
                self._gate(A, "d h1 / d x2d")
                corr = load / A
            else:
                corr = A * load
            return -self.K2 * (x2 - x2d) - corr + rate, None, None, None
        return -self.K2 * (x2 - x2d) + rate, None, None, None

    def _h2(self, x1, x2, x2d, u, r, rd, rdd):
        h1, A, B, F1d, e, rate = self._l1(x1, x2d, r, rd, rdd)
        k2v = self._k2(x1, x2, x2d, h1, A, B, F1d, e, rate)[0]
        return self.f2(x1, x2, u) - k2v

    def rhs_parts(self, x1, x2, x2d, u, r, rd):
        rdd = self.accel(r, rd) if self.track else 0.0
        h1, A, B, F1d, e, rate = self._l1(x1, x2d, r, rd, rdd)
        k2v, G, delta, F1s = self._k2(x1, x2, x2d, h1, A, B, F1d, e, rate)
        F2 = self.f2(x1, x2, u)
        h2v = F2 - k2v
        D = self.j2_u(x1, x2, u)
        self._gate(D, "d h2 / d u")
        h = self.h
        H2 = self._h2
        dh2_dx1 = (H2(x1 + h, x2, x2d, u, r, rd, rdd)
                   - H2(x1 - h, x2, x2d, u, r, rd, rdd)) / (2.0 * h)
        dh2_dx2d = (H2(x1, x2, x2d + h, u, r, rd, rdd)
                    - H2(x1, x2, x2d - h, u, r, rd, rdd)) / (2.0 * h)
        kp = self._k2(x1, x2 + h, x2d, h1, A, B, F1d, e, rate)[0]
        km = self._k2(x1, x2 - h, x2d, h1, A, B, F1d, e, rate)[0]
        dh2_dx2 = ((self.f2(x1, x2 + h, u) - kp)
                   - (self.f2(x1, x2 - h, u) - km)) / (2.0 * h)
        if self.track:
            acc = self.accel
            d_r = (self._h2(x1, x2, x2d, u, r + h, rd, acc(r + h, rd))
                   - self._h2(x1, x2, x2d, u, r - h, rd, acc(r - h, rd))) / (2.0 * h)
            d_rd = (self._h2(x1, x2, x2d, u, r, rd + h, acc(r, rd + h))
                    - self._h2(x1, x2, x2d, u, r, rd - h, acc(r, rd - h))) / (2.0 * h)
            tau = d_r * rd + d_rd * rdd
        else:
            tau = 0.0
        if self.k2_full:
            w = G * delta
            F1_true = F1s
        else:
            w = x2 - x2d
            F1_true = self.f1(x1, x2)
        bracket = (dh2_dx1 * F1_true + dh2_dx2 * F2 + dh2_dx2d * rate + tau + w)
        u_rate = -self.Kv2 * (D * h2v) - bracket / D
        return F1_true, F2, rate, u_rate, rdd

    def telemetry_parts(self, x1, x2, x2d, u, r, rd):
        rdd = self.accel(r, rd) if self.track else 0.0
        h1, A, B, F1d, e, rate = self._l1(x1, x2d, r, rd, rdd)
        k2v, G, delta, F1s = self._k2(x1, x2, x2d, h1, A, B, F1d, e, rate)
        h2v = self.f2(x1, x2, u) - k2v
        if delta is None:
            z = x2 - x2d
            t3 = 0.5 * z * z
        else:
            t3 = 0.5 * delta * delta
        return h1, h2v, (0.5 * e * e, 0.5 * h1 * h1, t3, 0.5 * h2v * h2v)


class PureChainLoop(ClosedLoop):
    """Two pure levels: both the virtual control and u are states."""

    def __init__(self, model, spec):
        super().__init__(
            model, spec,
            [model.block_names[0], model.block_names[1],
             _virtual_label(model.block_names[1]), model.control_name],
            has_ref=spec.tracking,
        )
        self.kernel = _ControlRateKernel(model, spec)
        self._fast = (_ScalarPureChain(model, spec)
                      if _ScalarPureChain.applicable(model, spec) else None)
        self.plant_labels = (_labels(model.block_names[0], self.m)
                             + _labels(model.block_names[1], self.m))
        self.control_labels = _labels(model.control_name, self.m)
        self.residual_labels = _labels("h1", self.m) + _labels("h2", self.m)
        self.term_labels = ("V_term1", "V_term2", "V_term3", "V_term4")

    def _block_attrs(self):
        return ("x1", "x2", "x2d", "u")

    def rhs(self, t, y):
        if self._fast is not None:
            if self.has_ref:
                x1, x2, x2d, u, r, rd = (float(v) for v in y)
            else:
                x1, x2, x2d, u = (float(v) for v in y)
                r = rd = 0.0
            self.model._domain_diagnostic(0, (x1, x2))
            self.model._domain_diagnostic(1, (x1, x2, u))
            f1v, f2v, xd_rate, u_rate, rdd = self._fast.rhs_parts(
                x1, x2, x2d, u, r, rd)
            if self.has_ref:
                return np.array([f1v, f2v, xd_rate, u_rate, rd, rdd])
            return np.array([f1v, f2v, xd_rate, u_rate])
        blocks = self._unpack(y)
        x1, x2, x2d, u = blocks[:4]
        ref = self._ref_from_blocks(t, blocks)
        d1 = self.kernel.level1.data(x1, x2d, ref)
        u_rate, _, _ = self.kernel.rate(x1, x2, x2d, u, ref, d1=d1)
        f1 = self.model.eval_level_raw(0, (x1, x2))
        f2 = self.model.eval_level_raw(1, (x1, x2, u))
        out = [f1, f2, d1.x2d_rate, u_rate]
        if self.has_ref:
            out += list(self.spec.reference.rates(blocks[-2], blocks[-1]))
        return self._pack(out)

    def _rates_from_blocks(self, blocks):
        ref = None
        if self.has_ref:
            ref = (bk.from_block(blocks[-2]), bk.from_block(blocks[-1]))
        return StateRates(
            x1=bk.from_block(blocks[0]), x2=bk.from_block(blocks[1]),
            x2d=bk.from_block(blocks[2]), u=bk.from_block(blocks[3]), ref=ref,
        )

    def telemetry(self, t, y):
        blocks = self._unpack(y)
        x1, x2, x2d, u = blocks[:4]
        if self._fast is not None:
            r, rd = (blocks[-2], blocks[-1]) if self.has_ref else (0.0, 0.0)
            h1v, h2v, terms = self._fast.telemetry_parts(x1, x2, x2d, u, r, rd)
            out = {self.control_labels[0]: u, self.residual_labels[0]: h1v,
                   self.residual_labels[1]: h2v}
            _put_terms(out, terms)
            return out
        ref = self._ref_from_blocks(t, blocks)
        d1 = self.kernel.level1.data(x1, x2d, ref)
        h2v, _, _, delta = self.kernel.level2.h2(d1, x2, u)
        t1 = 0.5 * bk.dot(d1.e, d1.e)
        t2 = 0.5 * bk.dot(d1.h1, d1.h1)
        if delta is None:
            z = x2 - x2d
            t3 = 0.5 * bk.dot(z, z)
        else:
            t3 = 0.5 * bk.dot(delta, delta)
        t4 = 0.5 * bk.dot(h2v, h2v)
        out = {}
        _put(out, self.control_labels, u, self.m)
        _put(out, self.residual_labels[:self.m], d1.h1, self.m)
        _put(out, self.residual_labels[self.m:], h2v, self.m)
        _put_terms(out, (t1, t2, t3, t4))
        return out


class StrictTerminalLoop(ClosedLoop):
    """Pure first level, strict-affine second level: explicit control."""

    def __init__(self, model, spec):
        super().__init__(
            model, spec,
            [model.block_names[0], model.block_names[1],
             _virtual_label(model.block_names[1])],
        )
        self.kernel = _ControlRateKernel(model, spec)
        self.plant_labels = (_labels(model.block_names[0], self.m)
                             + _labels(model.block_names[1], self.m))
        self.control_labels = _labels(model.control_name, self.m)
        self.residual_labels = _labels("h1", self.m)
        self.term_labels = ("V_term1", "V_term2", "V_term3", "V_term4")

    def _block_attrs(self):
        return ("x1", "x2", "x2d")

    def _control(self, d1, x2):
        kap, G, delta = self.kernel.level2.kappa2(d1, x2)
        f2 = self.model.levels[1].f(d1.x1, x2)
        g2 = _gate_gain(self.model.strict_gain(1, (d1.x1, x2)), self.spec,
                        "input gain g2")
        return bk.solve(g2, kap - f2), g2, f2, delta

    def rhs(self, t, y):
        x1, x2, x2d = self._unpack(y)
        d1 = self.kernel.level1.data(x1, x2d, None)
        u, g2, f2, _ = self._control(d1, x2)
        f1 = self.model.eval_level_raw(0, (x1, x2))
        return self._pack([f1, f2 + bk.mv(g2, u), d1.x2d_rate])

    def _rates_from_blocks(self, blocks):
        return StateRates(x1=bk.from_block(blocks[0]), x2=bk.from_block(blocks[1]),
                          x2d=bk.from_block(blocks[2]))

    def telemetry(self, t, y):
        x1, x2, x2d = self._unpack(y)
        d1 = self.kernel.level1.data(x1, x2d, None)
        u, _, _, delta = self._control(d1, x2)
        t1 = 0.5 * bk.dot(x1, x1)
        t2 = 0.5 * bk.dot(d1.h1, d1.h1)
        if delta is None:
            z = x2 - x2d
            t3 = 0.5 * bk.dot(z, z)
        else:
            t3 = 0.5 * bk.dot(delta, delta)
        out = {}
        _put(out, self.control_labels, u, self.m)
        _put(out, self.residual_labels, d1.h1, self.m)
        _put_terms(out, (t1, t2, t3, 0.0))
        return out


class FullStrictLoop(ClosedLoop):
    """Classical two-step design for strict + strict chains."""

    def __init__(self, model, spec):
        super().__init__(model, spec, [model.block_names[0], model.block_names[1]])
        self.plant_labels = (_labels(model.block_names[0], self.m)
                             + _labels(model.block_names[1], self.m))
        self.control_labels = _labels(model.control_name, self.m)
        self.residual_labels = []
        self.term_labels = ("V_term1", "V_term2", "V_term3", "V_term4")
        self.aux_labels = _labels(_virtual_label(model.block_names[1]), self.m)

    def _block_attrs(self):
        return ("x1", "x2")

    def _x2d(self, x1):
        g1 = self.model.strict_gain(0, (x1,))
        return bk.solve(g1, self.spec.kappa1_value(x1) - self.model.levels[0].f(x1))

    def _law(self, x1, x2):
        spec = self.spec
        g1 = _gate_gain(self.model.strict_gain(0, (x1,)), spec, "input gain g1")
        f1 = self.model.levels[0].f(x1)
        x2d = self._x2d(x1)
        x1_rate = f1 + bk.mv(g1, x2)
        d_x2d = bk.fd_jacobian_block(self._x2d, (x1,), 0, spec.h_fd, self.m)
        x2d_rate = bk.mv(d_x2d, x1_rate)
        kap = -bk.mv(spec.K2, x2 - x2d) - bk.mtv(g1, x1) + x2d_rate
        f2 = self.model.levels[1].f(x1, x2)
        g2 = _gate_gain(self.model.strict_gain(1, (x1, x2)), spec, "input gain g2")
        u = bk.solve(g2, kap - f2)
        return u, x2d, x1_rate, f2 + bk.mv(g2, u)

    def rhs(self, t, y):
        x1, x2 = self._unpack(y)
        _, _, x1_rate, x2_rate = self._law(x1, x2)
        return self._pack([x1_rate, x2_rate])

    def _rates_from_blocks(self, blocks):
        return StateRates(x1=bk.from_block(blocks[0]), x2=bk.from_block(blocks[1]))

    def telemetry(self, t, y):
        x1, x2 = self._unpack(y)
        u, x2d, _, _ = self._law(x1, x2)
        z = x2 - x2d
        out = {}
        _put(out, self.aux_labels, x2d, self.m)
        _put(out, self.control_labels, u, self.m)
        _put_terms(out, (0.5 * bk.dot(x1, x1), 0.0, 0.5 * bk.dot(z, z), 0.0))
        return out


class MixedChainLoop(ClosedLoop):
    """Pure + strict + strict chain: one stativized virtual control,
    explicit solves for the remaining two levels.

    The third-level target cancels the second-level cross term, so the
    composite Lyapunov function gains 0.5 |x3 - x3d|^2 as its last term.
    Requires the full kappa2 variant.
    """

    def __init__(self, model, spec):
        if spec.kappa2_variant != "full":
            raise ValueError("mixed chains support the full kappa2 variant only")
        if spec.K3 is None:
            raise ValueError("mixed chains need the third-level gain K3")
        names = [model.block_names[0], model.block_names[1],
                 model.block_names[2], _virtual_label(model.block_names[1])]
        super().__init__(model, spec, names)
        self.level1 = _Level1Kernel(model, spec)
        self.level2 = _Level2Kernel(model, spec, self.level1)
        self.plant_labels = []
        for nm in model.block_names:
            self.plant_labels += _labels(nm, self.m)
        self.control_labels = _labels(model.control_name, self.m)
        self.residual_labels = _labels("h1", self.m)
        self.aux_labels = _labels(_virtual_label(model.block_names[2]), self.m)
        self.term_labels = ("V_term1", "V_term2", "V_term3", "V_term4")

    def _block_attrs(self):
        return ("x1", "x2", "x3", "x2d")

    def _x3d(self, x1, x2, x2d, d1=None):
        if d1 is None:
            d1 = self.level1.data(x1, x2d, None)
        kap, G, delta = self.level2.kappa2(d1, x2)
        f2 = self.model.levels[1].f(x1, x2)
        g2 = _gate_gain(self.model.strict_gain(1, (x1, x2)), self.spec,
                        "input gain g2")
        return bk.solve(g2, kap - f2), g2, G, delta, d1

    def _assemble(self, x1, x2, x3, x2d):
        spec = self.spec
        model = self.model
        x3d, g2, G, delta, d1 = self._x3d(x1, x2, x2d)
        f1 = model.eval_level_raw(0, (x1, x2))
        f2 = model.levels[1].f(x1, x2)
        x2_rate = f2 + bk.mv(g2, x3)
        rates = (f1, x2_rate, d1.x2d_rate)

        def x3d_fn(v1, v2, vd):
            return self._x3d(v1, v2, vd)[0]

        h = spec.h_fd
        m = self.m
        j1 = bk.fd_jacobian_block(lambda v: x3d_fn(v, x2, x2d), (x1,), 0, h, m)
        # The x2 direction does not flow through the level-1 data.
        j2 = bk.fd_jacobian_block(
            lambda v: self._x3d(x1, v, x2d, d1=d1)[0], (x2,), 0, h, m)
        jd = bk.fd_jacobian_block(lambda v: x3d_fn(x1, x2, v), (x2d,), 0, h, m)
        x3d_rate = bk.mv(j1, f1) + bk.mv(j2, x2_rate) + bk.mv(jd, d1.x2d_rate)

        z = x3 - x3d
        kap3 = -bk.mv(spec.K3, z) - bk.mtv(g2, bk.mtv(G, delta)) + x3d_rate
        f3 = model.levels[2].f(x1, x2, x3)
        g3 = _gate_gain(model.strict_gain(2, (x1, x2, x3)), spec, "input gain g3")
        u = bk.solve(g3, kap3 - f3)
        x3_rate = f3 + bk.mv(g3, u)
        return rates, x3_rate, u, x3d, d1, delta, z

    def rhs(self, t, y):
        x1, x2, x3, x2d = self._unpack(y)
        rates, x3_rate, _, _, _, _, _ = self._assemble(x1, x2, x3, x2d)
        return self._pack([rates[0], rates[1], x3_rate, rates[2]])

    def _rates_from_blocks(self, blocks):
        return StateRates(x1=bk.from_block(blocks[0]), x2=bk.from_block(blocks[1]),
                          x3=bk.from_block(blocks[2]), x2d=bk.from_block(blocks[3]))

    def telemetry(self, t, y):
        x1, x2, x3, x2d = self._unpack(y)
        _, _, u, x3d, d1, delta, z = self._assemble(x1, x2, x3, x2d)
        out = {}
        _put(out, self.aux_labels, x3d, self.m)
        _put(out, self.control_labels, u, self.m)
        _put(out, self.residual_labels, d1.h1, self.m)
        _put_terms(out, (
            0.5 * bk.dot(x1, x1), 0.5 * bk.dot(d1.h1, d1.h1),
            0.5 * bk.dot(delta, delta), 0.5 * bk.dot(z, z),
        ))
        return out


def _put(out, labels, value, m):
    if m == 1:
        out[labels[0]] = value
    else:
        for i, lab in enumerate(labels):
            out[lab] = float(value[i])


def _put_terms(out, terms):
    out["V"] = float(sum(terms))
    for i, tv in enumerate(terms, start=1):
        out[f"V_term{i}"] = float(tv)


def build_closed_loop(model, spec):
    """Assemble the closed loop matching the cascade's level structure."""
    if model.m != spec.m:
        raise ValueError(f"model dimension {model.m} != spec dimension {spec.m}")
    kinds = tuple(l.kind for l in model.levels)
    if spec.tracking and kinds != (LevelKind.PURE, LevelKind.PURE):
        raise ValueError("tracking mode is supported on two pure levels only")
    if kinds == (LevelKind.PURE,):
        return SingleLevelLoop(model, spec)
    if kinds == (LevelKind.PURE, LevelKind.PURE):
        return PureChainLoop(model, spec)
    if kinds == (LevelKind.PURE, LevelKind.STRICT):
        return StrictTerminalLoop(model, spec)
    if kinds == (LevelKind.STRICT, LevelKind.STRICT):
        return FullStrictLoop(model, spec)
    if kinds == (LevelKind.PURE, LevelKind.STRICT, LevelKind.STRICT):
        return MixedChainLoop(model, spec)
    raise ValueError(f"unsupported cascade shape {tuple(k.value for k in kinds)}")
