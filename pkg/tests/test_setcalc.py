import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from koopman_uq import setcalc as sc
from koopman_uq.errors import InstabilityError, NumericalError, ValidationError


def random_stable(rng, N, rho=0.8):
    A = rng.standard_normal((N, N))
    return A * (rho / max(abs(np.linalg.eigvals(A))))


def test_spectral_radius_examples():
    assert sc.spectral_radius(np.diag([0.5, -0.2])) == pytest.approx(0.5)
    th = 0.7
    R = 0.9 * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    assert sc.spectral_radius(R) == pytest.approx(0.9)
    assert sc.spectral_radius(np.eye(3)) == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        sc.spectral_radius(np.ones((2, 3)))


def test_contraction_factor_examples():
    assert sc.contraction_factor(0.5 * np.eye(2), 3) == pytest.approx(0.125)
    nil = np.array([[0, 0.9], [0, 0]])
    assert sc.contraction_factor(nil, 1) == pytest.approx(0.9)
    assert sc.contraction_factor(nil, 2) == 0.0
    with pytest.raises(ValidationError):
        sc.contraction_factor(nil, 0)


@given(st.integers(0, 10_000), st.integers(1, 8))
def test_contraction_submultiplicative(seed, s):
    Phi = np.random.default_rng(seed).standard_normal((4, 4)) * 0.4
    assert sc.contraction_factor(Phi, s) <= sc.inf_norm(Phi) ** s * (1 + 1e-12)


def test_find_s_alpha_examples():
    assert sc.find_s_alpha(0.5 * np.eye(3), 0.1) == (4, pytest.approx(0.0625))
    assert sc.find_s_alpha(np.zeros((2, 2))) == (1, 0.0)
    with pytest.raises(InstabilityError):
        sc.find_s_alpha(np.eye(2))
    with pytest.raises(NumericalError, match="s_max"):
        sc.find_s_alpha(0.99 * np.eye(2), 0.1, s_max=10)
    with pytest.raises(ValidationError):
        sc.find_s_alpha(0.5 * np.eye(2), 1.5)


def test_rpi_examples():
    c = sc.rpi_set(np.zeros((2, 2)), 0.3, 3, 0.0)
    np.testing.assert_allclose(c.interval_hull.radius, [0.3, 0.3])
    c = sc.rpi_set(np.array([[0.5]]), 1.0, 4, 0.0625)
    assert c.interval_hull.radius[0] == pytest.approx(2.0)
    with pytest.raises(ValidationError):
        sc.rpi_set(np.eye(2), 1.0, 2, 1.0)


def test_scalar_exactness():
    s, alpha = sc.find_s_alpha(np.array([[0.5]]), 0.01)
    r = sc.rpi_set(np.array([[0.5]]), 1.0, s, alpha).interval_hull.radius[0]
    assert abs(r - 2.0) <= 0.05 * 2.0


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_hull_and_generators_agree(seed, N):
    rng = np.random.default_rng(seed)
    Phi = random_stable(rng, N)
    s, alpha = sc.find_s_alpha(Phi, 0.2)
    c = sc.rpi_set(Phi, 0.7, s, alpha)
    Z = c.zonotope()
    assert Z.generators.shape == (N, N * s)
    np.testing.assert_allclose(Z.interval_hull().radius, c.interval_hull.radius,
                               rtol=1e-12)
    norms = np.linalg.norm(Z.generators, axis=0).sum()
    assert c.generator_norm_sum == pytest.approx(norms, rel=1e-12)
    assert c.l2_radius == pytest.approx(min(norms, np.linalg.norm(c.interval_hull.radius)))


@given(st.integers(0, 10_000))
def test_l2_radius_bounds_sampled_points(seed):
    rng = np.random.default_rng(seed)
    Phi = random_stable(rng, 3, 0.7)
    c = sc.compute_rpi(Phi, 1.0, 0.1)
    pts = c.zonotope().sample(10_000, rng)
    assert np.linalg.norm(pts, axis=1).max() <= c.l2_radius
    # vertices of the parameter cube reach the corners the samples miss
    G = c.zonotope().generators
    corners = G @ np.sign(rng.standard_normal((G.shape[1], 200)))
    assert np.linalg.norm(corners, axis=0).max() <= c.l2_radius * (1 + 1e-12)


def test_one_step_invariance_of_hull_points():
    """Phi maps points of R into a set that, plus W, stays in the hull."""
    rng = np.random.default_rng(5)
    Phi = random_stable(rng, 3, 0.6)
    c = sc.compute_rpi(Phi, 0.5, 0.1)
    pts = c.zonotope().sample(10_000, rng)
    w = rng.uniform(-0.5, 0.5, size=pts.shape)
    assert c.interval_hull.contains(pts @ Phi.T + w).all()


def test_disturbance_simulation_stays_in_hull():
    rng = np.random.default_rng(11)
    Phi = random_stable(rng, 4, 0.9)
    w_max = 0.2
    c = sc.compute_rpi(Phi, w_max, 0.1)
    for seed in range(10):
        r = np.random.default_rng(seed)
        e = np.zeros(4)
        for _ in range(2000):
            e = Phi @ e + r.uniform(-w_max, w_max, 4)
            assert c.interval_hull.contains(e)


def test_box_set():
    b = sc.BoxSet(np.array([1.0, 2.0]))
    assert b.contains(np.array([0.5, -2.0]))
    assert not b.contains(np.array([1.5, 0.0]))
    np.testing.assert_array_equal(b.contains(np.array([[0, 0], [3, 0]])), [True, False])
    with pytest.raises(ValidationError):
        sc.BoxSet(np.array([-1.0]))


def test_reconstruction_radius():
    c = sc.rpi_set(np.array([[0.0]]), 1.5, 1, 0.0)
    assert sc.reconstruction_radius(0.0, c).radius == 0.0
    assert sc.reconstruction_radius(2.0, c).radius == pytest.approx(3.0)
    with pytest.raises(ValidationError):
        sc.reconstruction_radius(-1.0, c)


def test_persistence(tmp_path):
    c = sc.compute_rpi(np.array([[0.5, 0.1], [0.0, 0.3]]), 0.2)
    p = sc.save_cert(c, tmp_path / "rpi.json", include_generators=True)
    d = json.loads(p.read_text())
    assert len(d["generators"]) == 2
    back = sc.cert_from_dict(d)
    assert back.s == c.s and back.l2_radius == c.l2_radius
    np.testing.assert_array_equal(back.interval_hull.radius, c.interval_hull.radius)
    small = sc.cert_to_dict(c)
    assert "generators" not in small
    with pytest.raises(ValidationError):
        sc.cert_from_dict({"format": "x"})
