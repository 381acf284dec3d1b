"""Cascade plant models: per-level vector fields, Jacobians, domain boxes.

A cascade model stacks n levels of equal dimension m.  Level i (0-based)
drives the block x_{i+1} and consumes all upstream blocks plus one
"next" argument, which is the following state block for i < n-1 and the
actual control u for the last level:

    d x_{i+1} / dt = f_i(x_1, ..., x_{i+1}, next)          (pure feedback)
    d x_{i+1} / dt = f_i(x_1, ..., x_{i+1}) + g_i(...) next (strict affine)

Vector fields are supplied as plain callables over blocks (floats for
m = 1, numpy arrays otherwise); there is no symbolic layer.  Analytic
Jacobians are optional per argument block, with a central finite
difference fallback.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _blocks as bk

__all__ = [
    "LevelKind", "LevelDynamics", "CascadeModel", "DomainBox",
    "pure_level", "strict_level", "fd_jacobian",
]

log = logging.getLogger("dynastep.model")

DEFAULT_FD_STEP = 1e-4


class LevelKind(Enum):
    PURE = "pure"
    STRICT = "strict"


def fd_jacobian(field_fn, args, wrt, h_fd=DEFAULT_FD_STEP):
    """Central-difference Jacobian oracle for an m-vector field.

    Parameters
    ----------
    field_fn : callable
        Maps argument blocks to an m-vector (or scalar for m = 1).
    args : sequence
        Point at which to differentiate, one entry per argument block.
    wrt : int
        Index of the argument block to differentiate against.
    h_fd : float
        Step size; the truncation error is O(h_fd^2) for smooth fields.

    Returns
    -------
    numpy.ndarray
        The m x m Jacobian estimate.
    """
    if h_fd <= 0.0:
        raise ValueError("finite-difference step must be positive")
    blocks = [np.asarray(a, dtype=float).reshape(-1) for a in args]
    m = blocks[wrt].size
    out = np.asarray(field_fn(*args), dtype=float).reshape(-1)
    jac = np.empty((out.size, m))
    for j in range(m):
        step = np.zeros(m)
        step[j] = h_fd
        hi = list(blocks)
        hi[wrt] = blocks[wrt] + step
        lo = list(blocks)
        lo[wrt] = blocks[wrt] - step
        fp = np.asarray(field_fn(*_match_arity(hi, args)), dtype=float).reshape(-1)
        fm = np.asarray(field_fn(*_match_arity(lo, args)), dtype=float).reshape(-1)
        jac[:, j] = (fp - fm) / (2.0 * h_fd)
    return jac


def _match_arity(blocks, template):
    # Hand scalars back to scalar-signature callables.
    out = []
    for b, t in zip(blocks, template):
        if np.ndim(t) == 0:
            out.append(float(b[0]) if np.ndim(b) else float(b))
        else:
            out.append(b)
    return out


@dataclass(frozen=True)
class DomainBox:
    """Axis-aligned bounds for the controlled domain.

    Bounds cover the stacked argument blocks (x_1, ..., x_n, u) of the
    full cascade, m components per block.  The box is diagnostic: the
    evaluation routines warn when arguments leave it but never abort,
    since trajectories may transiently exit the controlled region.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape:
            raise ValueError("lower/upper bounds must have equal length")
        if not np.all(lo < hi):
            raise ValueError("domain bounds require lower < upper componentwise")

    def requires_origin(self):
        if not (np.all(self.lower < 0.0) and np.all(self.upper > 0.0)):
            raise ValueError("stabilization domain must contain the origin")

    def block_bounds(self, index, m):
        sl = slice(index * m, (index + 1) * m)
        return self.lower[sl], self.upper[sl]

    def contains_block(self, index, value, m):
        lo, hi = self.block_bounds(index, m)
        if m == 1 and isinstance(value, float):
            return lo[0] <= value <= hi[0]
        v = np.asarray(value, dtype=float).reshape(-1)
        return bool(np.all(v >= lo) and np.all(v <= hi))

    def sample_block(self, index, m, rng, n):
        lo, hi = self.block_bounds(index, m)
        return rng.uniform(lo, hi, size=(n, m))


@dataclass(frozen=True)
class LevelDynamics:
    """One cascade level: a vector field plus optional analytic Jacobians.

    ``jacobians`` is a tuple aligned with the level's argument blocks;
    entries are callables taking the full level argument list (all
    upstream blocks plus the trailing next-state/control argument, for
    strict levels too) and returning the m x m Jacobian of the level
    value w.r.t. that block.  ``None`` entries fall back to central
    finite differences.  For strict levels the Jacobian w.r.t. the
    trailing (affine) argument is always g itself and needs no entry.
    """

    kind: LevelKind
    f: object
    g: object = None
    jacobians: tuple = None

    def __post_init__(self):
        if self.kind is LevelKind.STRICT and self.g is None:
            raise ValueError("strict levels require an input gain field g")
        if self.kind is LevelKind.PURE and self.g is not None:
            raise ValueError("pure levels take no affine input gain")


def pure_level(f, jacobians=None):
    return LevelDynamics(LevelKind.PURE, f, None, tuple(jacobians) if jacobians else None)


def strict_level(f, g, jacobians=None):
    return LevelDynamics(LevelKind.STRICT, f, g, tuple(jacobians) if jacobians else None)


class CascadeModel:
    """Immutable cascade plant of n levels with shared block dimension m.

    The last level consumes the actual control; every other level i
    consumes block i+1 as its virtual control.  Instances are safe for
    concurrent read access; all evaluation is reentrant and side-effect
    free apart from throttled domain diagnostics.
    """

    def __init__(self, m, levels, domain=None, name="", block_names=None,
                 control_name="u"):
        if not isinstance(m, int) or m < 1:
            raise ValueError("block dimension m must be a positive integer")
        levels = tuple(levels)
        if len(levels) < 1:
            raise ValueError("a cascade needs at least one level")
        for lvl in levels:
            if not isinstance(lvl, LevelDynamics):
                raise TypeError("levels must be LevelDynamics instances")
        self.m = m
        self.levels = levels
        self.name = name
        self.control_name = control_name
        if block_names is None:
            block_names = tuple(f"x{i + 1}" for i in range(len(levels)))
        if len(block_names) != len(levels):
            raise ValueError("need one block name per level")
        self.block_names = tuple(block_names)
        if domain is not None:
            expect = (len(levels) + 1) * m
            if domain.lower.size != expect:
                raise ValueError(
                    f"domain covers {domain.lower.size} components, expected {expect}"
                )
        self.domain = domain
        self._domain_warned = set()
        # Flat float bounds for the scalar fast check.
        if domain is not None and m == 1:
            self._scalar_bounds = list(zip(domain.lower, domain.upper))
        else:
            self._scalar_bounds = None

    @property
    def n_levels(self):
        return len(self.levels)

    def arity(self, i):
        """Number of argument blocks of level i (upstream states + next)."""
        return i + 2

    def _check_args(self, i, args):
        if not 0 <= i < self.n_levels:
            raise IndexError(f"level index {i} out of range")
        if len(args) != self.arity(i):
            raise ValueError(
                f"level {i} takes {self.arity(i)} argument blocks, got {len(args)}"
            )

    def _domain_diagnostic(self, i, args):
        if self.domain is None:
            return
        bounds = self._scalar_bounds
        last = len(args) - 1
        for j, a in enumerate(args):
            # Last argument of level i lives in block i+1 (or the control).
            block = j if j < last else i + 1
            if bounds is not None and isinstance(a, float):
                lo, hi = bounds[block]
                if lo <= a <= hi:
                    continue
                inside = False
            else:
                inside = self.domain.contains_block(block, a, self.m)
            if not inside:
                key = (i, block)
                if key not in self._domain_warned:
                    self._domain_warned.add(key)
                    log.warning(
                        "model %s: level %d argument block %d left the "
                        "controlled domain (first occurrence; evaluation continues)",
                        self.name or "<anonymous>", i, block,
                    )

    def eval_level_raw(self, i, args):
        """Evaluate level i on internal blocks without normalization."""
        lvl = self.levels[i]
        self._domain_diagnostic(i, args)
        if lvl.kind is LevelKind.PURE:
            value = lvl.f(*args)
        else:
            value = lvl.f(*args[:-1]) + bk.mv(lvl.g(*args[:-1]), args[-1])
        return value

    def eval_level(self, i, args):
        """Evaluate level i; returns an (m,) array.

        Raises on dimension mismatches.  Arguments outside the domain
        box produce a warning-level diagnostic only.
        """
        self._check_args(i, args)
        blocks = [bk.to_block(a, self.m) for a in args]
        value = self.eval_level_raw(i, blocks)
        out = bk.from_block(value)
        if out.size != self.m:
            raise ValueError(
                f"level {i} returned a length-{out.size} value, expected {self.m}"
            )
        return out

    def jacobian_raw(self, i, args, wrt, h_fd=DEFAULT_FD_STEP):
        """Jacobian of level i w.r.t. argument block ``wrt`` on raw blocks."""
        lvl = self.levels[i]
        if lvl.jacobians is not None and wrt < len(lvl.jacobians):
            jac_fn = lvl.jacobians[wrt]
            if jac_fn is not None:
                return jac_fn(*args)
        if lvl.kind is LevelKind.STRICT and wrt == len(args) - 1:
            return lvl.g(*args[:-1])
        return bk.fd_jacobian_block(
            lambda *a: self.eval_level_raw(i, a), args, wrt, h_fd, self.m
        )

    def jacobian(self, i, args, wrt, h_fd=DEFAULT_FD_STEP):
        """Jacobian of level i w.r.t. argument block ``wrt`` as an (m, m) array.

        Uses the registered analytic callable when present, otherwise a
        central finite difference with step ``h_fd``.  Singularity is
        not checked here; inversion sites gate on the determinant.
        """
        self._check_args(i, args)
        blocks = [bk.to_block(a, self.m) for a in args]
        jac = self.jacobian_raw(i, blocks, wrt, h_fd)
        if self.m == 1:
            return np.array([[jac]], dtype=float)
        return np.asarray(jac, dtype=float)

    def strict_gain(self, i, args):
        """The affine input gain g_i of a strict level, as raw block matrix."""
        lvl = self.levels[i]
        if lvl.kind is not LevelKind.STRICT:
            raise ValueError(f"level {i} is not strict affine")
        return lvl.g(*args)
