import numpy as np
import pytest

from anisofem.functions import (edge_singular, fichera_source, fichera_source_l2_norm, polynomial_xyz, square_x1,
                                vertex_singular)
from anisofem.mesh import build_fichera_macros

FRAME = build_fichera_macros()[0].local_frame()


@pytest.mark.parametrize("make", [polynomial_xyz, square_x1, lambda: vertex_singular(0.454),
                                  lambda: edge_singular(2 / 3, FRAME)])
def test_derivatives_against_finite_differences(make, rng):
    f = make()
    x = rng.uniform(-0.8, 0.8, size=(40, 3))
    x = x[np.linalg.norm(x, axis=1) > 0.1]
    h = 1e-6
    eye = np.eye(3)
    fd_grad = np.stack([(f.value(x + h * e) - f.value(x - h * e)) / (2 * h) for e in eye], axis=1)
    np.testing.assert_allclose(f.grad(x), fd_grad, atol=2e-7 * (1 + np.abs(fd_grad).max()))
    fd_hess = np.stack([(f.grad(x + h * e) - f.grad(x - h * e)) / (2 * h) for e in eye], axis=2)
    np.testing.assert_allclose(f.hess(x), fd_hess, atol=5e-6 * (1 + np.abs(fd_hess).max()))


def test_cutoff_support():
    f = vertex_singular(0.454, radius=0.9)
    x = np.array([[0.95, 0, 0], [0, 0.3, 0.9]])
    assert np.all(f.value(x) == 0) and np.all(f.grad(x) == 0)


def test_minus_affine_and_partial():
    f = polynomial_xyz()
    g = f.minus_affine(lambda x: np.tile([1.0, 2.0, 0.0, 0.0], (len(x), 1)))
    x = np.array([[0.1, 0.2, 0.3]])
    assert g.value(x)[0] == pytest.approx(f.value(x)[0] - 1.0 - 0.2)
    q = np.eye(3)[:, [2, 0, 1]]
    np.testing.assert_allclose(f.partial(0, q).value(x), f.grad(x)[:, 2])


def test_fichera_source_as_written():
    r = np.array([[0.5, 0, 0], [-1.0, 0, 0]])
    np.testing.assert_allclose(fichera_source(r), 1 + np.array([0.5, 1.0]) ** -1.5 / np.log(np.array([0.5, 1.0]) / 4))
    assert fichera_source(np.array([[0.01, 0, 0]]))[0] < 1


def test_fichera_source_norm_against_independent_split():
    from scipy.integrate import dblquad, quad

    rho = 0.25
    # inner 7/8 ball in r = 4 exp(-t); the 1/t**2 tail decays only logarithmically in r
    tail = lambda t: (4 * np.exp(-t)) ** 3 - 2 * (4 * np.exp(-t)) ** 1.5 / t + 1 / t**2
    inner = 7 / 8 * 4 * np.pi * quad(tail, np.log(4 / rho), np.inf, limit=400)[0]
    # outer part: radial integral up to the cube surface, seven identical octants
    g = lambda r: (1 + r**-1.5 / np.log(r / 4)) ** 2 * r**2

    def radial(th, ph):
        d = np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
        return quad(g, rho, 1 / d.max())[0] * np.sin(th)

    outer = 7 * dblquad(radial, 0, np.pi / 2, 0, np.pi / 2, epsabs=1e-10, epsrel=1e-9)[0]
    assert fichera_source_l2_norm() ** 2 == pytest.approx(inner + outer, rel=1e-6)
