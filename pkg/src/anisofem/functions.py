"""Scalar test functions with analytic first and second derivatives.

All callables take points of shape ``(m, 3)`` and return values ``(m,)``,
gradients ``(m, 3)`` and Hessians ``(m, 3, 3)``.
"""
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass
class ModelFunction:
    value: Callable
    grad: Optional[Callable] = None
    hess: Optional[Callable] = None

    def __call__(self, x):
        return self.value(np.atleast_2d(x))

    def minus_affine(self, coeffs_of):
        """``self - (c0 + c . x)`` where ``coeffs_of(x)`` gives ``(m, 4)`` coefficients."""

        def value(x):
            c = coeffs_of(x)
            return self.value(x) - c[:, 0] - np.einsum("md,md->m", c[:, 1:], x)

        def grad(x):
            return self.grad(x) - coeffs_of(x)[:, 1:]

        return ModelFunction(value, grad, self.hess)

    def partial(self, i, frame=None):
        """Directional derivative along axis ``i`` of ``frame`` (columns), as a function."""
        q = np.eye(3) if frame is None else frame
        d = q[:, i]

        def value(x):
            return self.grad(x) @ d

        def grad(x):
            return self.hess(x) @ d

        return ModelFunction(value, grad, None)


def polynomial_xyz():
    """``x1**2 + x2 x3 + x1 x2 x3``: smooth, nonzero Hessian everywhere."""

    def value(x):
        return x[:, 0] ** 2 + x[:, 1] * x[:, 2] + x[:, 0] * x[:, 1] * x[:, 2]

    def grad(x):
        a, b, c = x.T
        return np.stack([2 * a + b * c, c + a * c, b + a * b], axis=1)

    def hess(x):
        a, b, c = x.T
        h = np.zeros((len(x), 3, 3))
        h[:, 0, 0] = 2
        h[:, 0, 1] = h[:, 1, 0] = c
        h[:, 0, 2] = h[:, 2, 0] = b
        h[:, 1, 2] = h[:, 2, 1] = 1 + a
        return h

    return ModelFunction(value, grad, hess)


def square_x1():
    """``x1**2``."""

    def hess(x):
        h = np.zeros((len(x), 3, 3))
        h[:, 0, 0] = 2.0
        return h

    return ModelFunction(
        lambda x: x[:, 0] ** 2,
        lambda x: np.column_stack([2 * x[:, 0], np.zeros(len(x)), np.zeros(len(x))]),
        hess,
    )


def affine(c0, c):
    c = np.asarray(c, float)
    return ModelFunction(lambda x: c0 + x @ c, lambda x: np.broadcast_to(c, x.shape).copy(),
                         lambda x: np.zeros((len(x), 3, 3)))


def _cutoff(s, radius):
    """``(1 - (s/radius)^2)^3`` on ``s < radius``, zero beyond; C^2 with derivatives."""
    z = np.clip(1.0 - (s / radius) ** 2, 0.0, None)
    inside = s < radius
    val = z**3
    d1 = np.where(inside, -6.0 * s / radius**2 * z**2, 0.0)
    d2 = np.where(inside, -6.0 / radius**2 * z**2 + 24.0 * s**2 / radius**4 * z, 0.0)
    return val, d1, d2


def _radial(x, f, df, ddf, axes):
    """Function of ``s = |x[axes]|`` with derivatives by the chain rule."""
    sub = x[:, axes]
    s = np.linalg.norm(sub, axis=1)
    s_safe = np.where(s > 0, s, 1.0)
    e = sub / s_safe[:, None]
    v, d1, d2 = f(s), df(s), ddf(s)
    g = np.zeros_like(x)
    g[:, axes] = d1[:, None] * e
    h = np.zeros((len(x), 3, 3))
    k = len(axes)
    eye = np.eye(k)
    block = d2[:, None, None] * e[:, :, None] * e[:, None, :] + (d1 / s_safe)[:, None, None] * (
        eye - e[:, :, None] * e[:, None, :])
    h[np.ix_(range(len(x)), axes, axes)] = block
    return v, g, h


def vertex_singular(lam, radius=0.9):
    """``R**lam * chi(R)`` with ``chi`` a smooth cutoff vanishing for ``R >= radius``."""

    @np.errstate(divide="ignore", invalid="ignore")
    def parts(x):
        def f(s):
            return s**lam * _cutoff(s, radius)[0]

        def df(s):
            c, c1, _ = _cutoff(s, radius)
            return lam * s ** (lam - 1) * c + s**lam * c1

        def ddf(s):
            c, c1, c2 = _cutoff(s, radius)
            return (lam * (lam - 1) * s ** (lam - 2) * c + 2 * lam * s ** (lam - 1) * c1
                    + s**lam * c2)

        return _radial(x, f, df, ddf, [0, 1, 2])

    return ModelFunction(lambda x: parts(x)[0], lambda x: parts(x)[1], lambda x: parts(x)[2])


def edge_singular(lam, frame, radius=0.9, slope=0.5):
    """``r**lam * chi(r) * (1 + slope * x3)`` in local coordinates of ``frame``.

    ``frame = (origin, Q)`` with the edge along the third local axis.
    """
    origin, q = frame

    @np.errstate(divide="ignore", invalid="ignore")
    def parts(x):
        y = (x - origin) @ q

        def f(s):
            return s**lam * _cutoff(s, radius)[0]

        def df(s):
            c, c1, _ = _cutoff(s, radius)
            return lam * s ** (lam - 1) * c + s**lam * c1

        def ddf(s):
            c, c1, c2 = _cutoff(s, radius)
            return (lam * (lam - 1) * s ** (lam - 2) * c + 2 * lam * s ** (lam - 1) * c1
                    + s**lam * c2)

        v, g, h = _radial(y, f, df, ddf, [0, 1])
        w = 1.0 + slope * y[:, 2]
        val = v * w
        gl = g * w[:, None]
        gl[:, 2] += v * slope
        hl = h * w[:, None, None]
        hl[:, :2, 2] += g[:, :2] * slope
        hl[:, 2, :2] += g[:, :2] * slope
        # back to global coordinates
        return val, gl @ q.T, np.einsum("ij,mjk,lk->mil", q, hl, q)

    return ModelFunction(lambda x: parts(x)[0], lambda x: parts(x)[1], lambda x: parts(x)[2])


def fichera_source(x, origin=(0.0, 0.0, 0.0)):
    """``1 + R**(-3/2) / ln(R/4)`` with ``R`` the distance to the concave corner."""
    r = np.linalg.norm(np.atleast_2d(x) - np.asarray(origin), axis=1)
    return 1.0 + r**-1.5 / np.log(r / 4.0)


def fichera_source_l2_norm(q=96):
    """``||f||_{L2}`` of :func:`fichera_source` over ``(-1,1)^3 \\ [0,1]^3``.

    By symmetry the integral equals seven times the integral over the unit
    octant cube, and six times the part where ``x3 >= x1 >= x2``.  In spherical coordinates the radial integral of the
    ``R**-3 ln**-2`` term is ``1/ln(4/R)`` in closed form; the remaining
    smooth integrals use Gauss-Legendre rules.
    """
    x, w = np.polynomial.legendre.leggauss(q)
    x, w = 0.5 * (x + 1), 0.5 * w

    def radial(rho):
        # int_0^rho (f(R) R)^2 dR with r = rho t^2 in the cross term
        r = rho[:, None] * x[None, :] ** 2
        cross = (2.0 * rho**1.5)[:, None] * x**2 / np.log(r / 4.0)
        return rho**3 / 3.0 + 2.0 * (cross @ w) + 1.0 / np.log(4.0 / rho)

    # phi in [0, pi/4] covers half of that part (mirror symmetry x1 <-> x2)
    phi = 0.25 * np.pi * x
    total = 0.0
    for p, wp in zip(phi, 0.25 * np.pi * w):
        top = np.arctan(1.0 / np.cos(p))
        theta = top * x
        total += wp * top * np.sum(w * radial(1.0 / np.cos(theta)) * np.sin(theta))
    return float(np.sqrt(7.0 * 3.0 * 2.0 * total))
