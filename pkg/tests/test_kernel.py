"""Kernel-level identities: closed forms against small quadratures, plus the
evaluator contracts the rest of the library leans on."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from mflab.kernel import (
    KernelSingularityError,
    KernelSpec,
    ball_volume,
    eval_f_alpha_eta,
    eval_f_eta,
    eval_g,
    eval_g_eta,
    eval_grad_g,
    flux_constant_quadrature,
    integral_f_eta,
    normalization_constant,
    origin_cell_average,
    ring_average_g,
    sphere_area,
)

SPECS = [
    KernelSpec.log(1),
    KernelSpec.log(2),
    KernelSpec.riesz(1, 0.5),
    KernelSpec.riesz(2, 0.5),
    KernelSpec.riesz(2, 1.3),
    KernelSpec.riesz(3, 1.0),
    KernelSpec.riesz(3, 1.5),
    KernelSpec.riesz(3, 2.5),
]


def g_scalar_ref(spec, r):
    return -math.log(r) if spec.is_log else r ** (-spec.s)


def test_constructor_guards():
    with pytest.raises(ValueError):
        KernelSpec.riesz(3, 0.5)    # below d-2
    with pytest.raises(ValueError):
        KernelSpec.riesz(2, 2.0)    # s >= d
    with pytest.raises(ValueError):
        KernelSpec.riesz(2, 0.0)    # s = 0 is the log member
    with pytest.raises(ValueError):
        KernelSpec.log(3)           # planar/line only


def test_harmonic_flags():
    assert KernelSpec.log(2).k == 0
    assert KernelSpec.riesz(3, 1.0).k == 0
    assert KernelSpec.riesz(3, 1.5).k == 1
    assert KernelSpec.log(1).k == 1


@pytest.mark.parametrize("spec", SPECS, ids=str)
def test_gradient_matches_finite_differences(spec):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, spec.d))
    r = np.sqrt(np.sum(x * x, axis=-1))
    x = x[r > 0.1]
    grad = eval_grad_g(spec, x)
    eps = 1e-6
    for a in range(spec.d):
        dx = np.zeros(spec.d)
        dx[a] = eps
        fd = (eval_g(spec, x + dx) - eval_g(spec, x - dx)) / (2 * eps)
        assert np.max(np.abs(fd - grad[:, a])) < 5e-5


@pytest.mark.parametrize("spec", SPECS, ids=str)
def test_flux_constant_matches_quadrature(spec):
    # c_ds is pinned by the outward flux of -grad g through the unit sphere
    assert abs(flux_constant_quadrature(spec) - spec.c_ds) < 1e-10 * spec.c_ds


def test_flux_constant_closed_values():
    assert abs(KernelSpec.log(2).c_ds - 2 * math.pi) < 1e-14
    assert abs(KernelSpec.riesz(3, 1.0).c_ds - 4 * math.pi) < 1e-13


@pytest.mark.parametrize("spec", SPECS, ids=str)
def test_truncation_decomposition(spec):
    # g = (g truncated at eta) + (remainder supported in the eta-ball)
    eta = 0.37
    r = np.array([0.05, 0.2, eta, 0.5, 1.4])
    x = np.zeros((r.size, spec.d))
    x[:, 0] = r
    g = eval_g(spec, x)
    ge = eval_g_eta(spec, x, eta)
    fe = eval_f_eta(spec, x, eta)
    assert np.allclose(g, ge + fe, rtol=1e-13)
    assert np.all(fe[r >= eta] == 0)
    assert np.all(fe[r < eta] > 0)
    # truncated part is capped at the eta level
    assert np.allclose(ge[r <= eta], g_scalar_ref(spec, eta), rtol=1e-13)


@pytest.mark.parametrize("spec", SPECS, ids=str)
def test_integral_f_eta_vs_quadrature(spec):
    eta = 0.25
    area = sphere_area(spec.d)
    val, _ = integrate.quad(
        lambda r: (g_scalar_ref(spec, r) - g_scalar_ref(spec, eta))
        * area * r ** (spec.d - 1),
        0.0, eta, points=[eta * 1e-6])
    got = integral_f_eta(spec, eta)
    assert abs(got - val) < 1e-9 * max(1.0, abs(val))


@pytest.mark.parametrize("spec", SPECS, ids=str)
def test_integral_f_eta_scaling(spec):
    # riesz remainder mass scales like eta^(d-s); the log one picks up
    # the extra eta^d log-free constant
    e1, e2 = 0.2, 0.4
    v1, v2 = integral_f_eta(spec, e1), integral_f_eta(spec, e2)
    if spec.is_log:
        want = (e2 / e1) ** spec.d
    else:
        want = (e2 / e1) ** (spec.d - spec.s)
    assert abs(v2 / v1 - want) < 1e-12 * want


def test_f_alpha_eta_annular_difference():
    # f_alpha - f_eta = g_eta - g_alpha; finite, supported in the larger ball
    spec = KernelSpec.log(2)
    alpha, eta = 0.5, 0.2
    x = np.array([[0.1, 0.0], [0.3, 0.1], [0.45, 0.0], [0.9, 0.0]])
    got = eval_f_alpha_eta(spec, x, alpha, eta)
    want = eval_f_eta(spec, x, alpha) - eval_f_eta(spec, x, eta)
    assert np.all(np.isfinite(got))
    assert np.allclose(got, want, rtol=1e-13)
    r = np.sqrt(np.sum(x * x, axis=-1))
    assert np.all(got[r >= alpha] == 0)
    assert np.all(got[r < alpha] > 0)
    # inside the smaller radius the difference saturates at g(eta) - g(alpha)
    assert abs(got[0] - (math.log(alpha) - math.log(eta))) < 1e-14
    # swapping radii flips the sign
    swapped = eval_f_alpha_eta(spec, x, eta, alpha)
    assert np.allclose(swapped, -got, rtol=1e-13)


def test_singularity_raises():
    spec = KernelSpec.riesz(2, 0.5)
    with pytest.raises(KernelSingularityError):
        eval_g(spec, np.zeros((1, 2)))


def test_ring_average_vs_quadrature(log2):
    # mean of g over a circle of radius r centered at distance rho
    rho, r = 0.6, 0.25
    def integrand(th):
        y = np.array([rho + r * math.cos(th), r * math.sin(th)])
        return -math.log(np.linalg.norm(y)) / (2 * math.pi)
    want, _ = integrate.quad(integrand, 0, 2 * math.pi, limit=200)
    got = ring_average_g(log2, np.array([rho]), np.array([r]))[0]
    assert abs(got - want) < 1e-10

    spec = KernelSpec.riesz(2, 0.7)
    def integrand2(th):
        y = np.array([rho + r * math.cos(th), r * math.sin(th)])
        return np.linalg.norm(y) ** -0.7 / (2 * math.pi)
    want2, _ = integrate.quad(integrand2, 0, 2 * math.pi, limit=200)
    got2 = ring_average_g(spec, np.array([rho]), np.array([r]))[0]
    assert abs(got2 - want2) < 1e-9


@pytest.mark.parametrize("spec", [KernelSpec.log(2), KernelSpec.riesz(2, 0.5),
                                  KernelSpec.riesz(3, 1.0)], ids=str)
def test_origin_cell_average_vs_subsampling(spec):
    h = 0.1
    q = 400 if spec.d == 2 else 80
    offs = (np.arange(q) + 0.5) / q - 0.5
    sub = np.meshgrid(*([offs * h] * spec.d), indexing="ij")
    pts = np.stack([m.ravel() for m in sub], axis=-1)
    r = np.sqrt(np.sum(pts * pts, axis=-1))
    vals = -np.log(r) if spec.is_log else r ** (-spec.s)
    assert abs(origin_cell_average(spec, h) - np.mean(vals)) < 2e-4 * abs(
        origin_cell_average(spec, h))


def test_geometry_helpers():
    assert abs(sphere_area(2) - 2 * math.pi) < 1e-15
    assert abs(sphere_area(3) - 4 * math.pi) < 1e-14
    assert abs(ball_volume(3) - 4 * math.pi / 3) < 1e-14
    assert abs(ball_volume(1) - 2.0) < 1e-15


def test_normalization_constant_positive():
    for spec in SPECS:
        assert normalization_constant(spec) > 0


@settings(max_examples=60, deadline=None)
@given(r=st.floats(0.01, 5.0), eta=st.floats(0.02, 2.0),
       s=st.floats(0.05, 1.9))
def test_truncation_identity_property(r, eta, s):
    spec = KernelSpec.riesz(2, s)
    x = np.array([[r, 0.0]])
    g = eval_g(spec, x)[0]
    total = eval_g_eta(spec, x, eta)[0] + eval_f_eta(spec, x, eta)[0]
    assert abs(total - g) <= 1e-12 * max(1.0, abs(g))
    # truncated kernel never exceeds the full one and is monotone in eta
    assert eval_g_eta(spec, x, eta)[0] <= g + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 3.0), st.floats(0.05, 3.0))
def test_grad_antisymmetry_property(x0, x1):
    spec = KernelSpec.log(2)
    x = np.array([[x0, x1]])
    assert np.allclose(eval_grad_g(spec, x), -eval_grad_g(spec, -x), rtol=1e-13)
