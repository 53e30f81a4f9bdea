"""Lorentz-model (hyperboloid) geometry with curvature ``-c``.

Points live on the upper sheet ``{x : <x, x>_L = -1/c, x_time > 0}`` and are
stored as a ``(time, space)`` pair rather than one concatenated vector, since
the time component is always recoverable from the spatial one.

All functions are batched over leading axes and work on plain numpy arrays
or on :class:`~lorentz_st.autodiff.Tensor` values (the curvature may also be
a ``Tensor``, which is how a trainable ``log_c`` enters the loss).
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, UndefinedApertureError

#: Boundary constant of the entailment-cone half-aperture.
K_APERTURE = 0.1


@dataclass(frozen=True)
class Curvature:
    """Curvature ``-c`` parameterized by ``log_c`` so that ``c > 0`` always."""

    log_c: float = 0.0

    @property
    def c(self) -> float:
        return math.exp(self.log_c)

    @classmethod
    def from_c(cls, c: float) -> "Curvature":
        if not c > 0:
            raise ContractViolation(f"curvature magnitude must be positive, got {c}")
        return cls(math.log(c))


@dataclass(frozen=True)
class LorentzPoint:
    """A (possibly batched) point on the hyperboloid of curvature ``-c``."""

    time: object
    space: object
    c: object = 1.0

    @property
    def dim(self) -> int:
        return ad.as_array(self.space).shape[-1]

    def as_vector(self) -> np.ndarray:
        """Concatenated ``[time, space]`` coordinates in ambient Minkowski space."""
        t = ad.as_array(self.time)
        return np.concatenate([t[..., None], ad.as_array(self.space)], axis=-1)

    def constraint_residual(self, relative: bool = False) -> np.ndarray:
        """``c * <x, x>_L + 1``; zero on the manifold.

        With ``relative`` the residual is divided by ``c * (time^2 + |space|^2)``,
        the size of the terms that cancel, which is the scale float64 round-off
        lives on far from the origin.
        """
        c = ad.as_array(self.c)
        res = c * ad.as_array(lorentz_inner(self, self)) + 1.0
        if not relative:
            return res
        t, s = ad.as_array(self.time), ad.as_array(self.space)
        return res / (c * (t * t + np.sum(s * s, axis=-1)))


def _c_of(c) -> object:
    if isinstance(c, Curvature):
        return c.c
    return c


def _split(x) -> tuple[object, object]:
    if isinstance(x, LorentzPoint):
        return x.time, x.space
    time, space = x
    return time, space


def origin(dim: int, c=1.0) -> LorentzPoint:
    c = _c_of(c)
    return LorentzPoint(np.sqrt(1.0 / ad.as_array(c)), np.zeros(dim), c)


def lorentz_inner(x, y):
    """``<x_space, y_space>_E - x_time * y_time``.

    ``x`` and ``y`` are :class:`LorentzPoint` instances or raw ``(time, space)``
    pairs. Leading axes broadcast.
    """
    xt, xs = _split(x)
    yt, ys = _split(y)
    dx, dy = ad.as_array(xs).shape[-1:], ad.as_array(ys).shape[-1:]
    if dx != dy:
        raise ContractViolation(f"spatial dimension mismatch: {dx} vs {dy}")
    return ad.sum(ad.mul(xs, ys), axis=-1) - ad.mul(xt, yt)


def lift(space, c=1.0) -> LorentzPoint:
    """Attach the time component ``sqrt(1/c + ||space||^2)`` to ``space``."""
    c = _c_of(c)
    time = ad.sqrt(ad.div(1.0, c) + ad.sum(ad.square(space), axis=-1))
    return LorentzPoint(time, space, c)


def exp_map_origin(v, c=1.0) -> LorentzPoint:
    """Exponential map at the origin for Euclidean (tangent) vectors ``v``.

    The spatial part is ``sinh(sqrt(c)|v|) / (sqrt(c)|v|) * v``; the removable
    singularity at ``v = 0`` is handled by the series of ``sinh(z)/z``.
    """
    c = _c_of(c)
    z = ad.mul(ad.sqrt(c), ad.norm(v, axis=-1))
    scale = ad.sinhc(z)
    space = ad.mul(ad.expand_dims(scale, -1), v)
    return lift(space, c)


def exp_map(x: LorentzPoint, v: np.ndarray) -> np.ndarray:
    """General exponential map at base point ``x`` for an ambient tangent vector.

    Plain-array only; ``v`` is ``[v_time, v_space]`` with ``<x, v>_L = 0``.
    Used to cross-check :func:`exp_map_origin`.
    """
    c = float(ad.as_array(x.c))
    xv = x.as_vector()
    v = np.asarray(v, dtype=np.float64)
    vv = float(v[1:] @ v[1:] - v[0] * v[0])
    n = math.sqrt(max(vv, 0.0))
    if n == 0.0:
        return xv.copy()
    z = math.sqrt(c) * n
    return math.cosh(z) * xv + math.sinh(z) / z * v


def lorentz_distance(x: LorentzPoint, y: LorentzPoint):
    """Geodesic distance ``sqrt(1/c) * acosh(-c <x, y>_L)``.

    Round-off that pushes the acosh argument below 1 is clamped to 1.
    """
    c = _c_of(x.c)
    arg = ad.clip(ad.mul(ad.neg(c), lorentz_inner(x, y)), lo=1.0)
    return ad.mul(ad.sqrt(ad.div(1.0, c)), ad.acosh(arg))


def pairwise_distance(x: LorentzPoint, y: LorentzPoint):
    """``D[i, j] = d(x_i, y_j)`` for two batches of shape ``(B, d)``."""
    c = _c_of(x.c)
    xt, xs = _split(x)
    yt, ys = _split(y)
    if ad.as_array(xs).shape[-1] != ad.as_array(ys).shape[-1]:
        raise ContractViolation("spatial dimension mismatch")
    inner = ad.matmul(xs, ad.transpose(ys)) - ad.mul(ad.expand_dims(xt, 1), ad.expand_dims(yt, 0))
    arg = ad.clip(ad.mul(ad.neg(c), inner), lo=1.0)
    return ad.mul(ad.sqrt(ad.div(1.0, c)), ad.acosh(arg))


def half_aperture(y: LorentzPoint, K: float = K_APERTURE, strict: bool = True):
    """Half-aperture ``asin(min(1, 2K / (sqrt(c) |y_space|)))`` of the cone at ``y``.

    With ``strict=True`` a parent at the origin raises
    :class:`UndefinedApertureError`. Otherwise it takes the limiting value
    ``pi/2`` so batched losses never abort.
    """
    c = _c_of(y.c)
    n = ad.norm(y.space, axis=-1)
    nd = ad.as_array(n)
    zero = nd == 0
    if strict and np.any(zero):
        raise UndefinedApertureError("half-aperture undefined at the origin (zero spatial norm)")
    denom = ad.mul(ad.sqrt(c), ad.where(zero, 1.0, n))
    arg = ad.where(zero, 1.0, ad.div(2.0 * K, denom))
    return ad.asin(ad.clip(arg, hi=1.0))


# relative size of (c<y,x>)^2 - 1 below which two points count as coincident
_COINCIDENT = 1e-12


def exterior_angle(y: LorentzPoint, x: LorentzPoint, with_flag: bool = False):
    """Exterior angle at parent ``y`` between the cone axis and child ``x``.

    The acos argument is clamped to ``[-1, 1]``. Where ``(c<y, x>_L)^2 - 1`` is
    within round-off of zero (points closer than about 1e-6 geodesic units) or
    ``y`` sits at the origin, the angle is 0 and the returned flag (when
    ``with_flag``) is set.
    """
    c = _c_of(y.c)
    ci = ad.mul(c, lorentz_inner(y, x))
    q = ad.square(ci) - 1.0
    ny = ad.norm(y.space, axis=-1)
    ci_arr = ad.as_array(ci)
    degenerate = (ad.as_array(q) <= _COINCIDENT * np.maximum(1.0, ci_arr * ci_arr)) | (ad.as_array(ny) == 0)
    num = ad.add(x.time, ad.mul(y.time, ci))
    den = ad.mul(ad.where(degenerate, 1.0, ny), ad.sqrt(ad.where(degenerate, 1.0, q)))
    angle = ad.acos(ad.clip(ad.div(num, den), lo=-1.0, hi=1.0))
    angle = ad.where(degenerate, 0.0, angle)
    if with_flag:
        return angle, degenerate
    return angle


def entailment_penalty(parent: LorentzPoint, child: LorentzPoint, K: float = K_APERTURE, strict: bool = True):
    """``max(0, ext(parent, child) - aper(parent))``; zero inside the cone."""
    ext = exterior_angle(parent, child)
    aper = half_aperture(parent, K=K, strict=strict)
    return ad.relu(ad.sub(ext, aper))
