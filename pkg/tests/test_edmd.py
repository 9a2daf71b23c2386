import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from koopman_uq import edmd
from koopman_uq.errors import ArtifactIOError, ValidationError


def test_thin_plate_values():
    assert edmd.thin_plate_rbf([0, 0], [0, 0]) == 0.0
    assert edmd.thin_plate_rbf([1, 0], [0, 0]) == 0.0
    assert edmd.thin_plate_rbf([np.e, 0], [0, 0]) == pytest.approx(np.e)
    assert edmd.thin_plate_rbf([0.5, 0], [0, 0]) == pytest.approx(0.5 * np.log(0.5))


@given(st.lists(st.floats(-2, 2), min_size=2, max_size=2))
def test_vectorized_lift_matches_scalar(x):
    rbf = edmd.RbfLifting.random(7, 2, seed=3)
    z = edmd.lift(rbf, np.array(x))
    ref = [edmd.thin_plate_rbf(x, c) for c in rbf.centers] + list(x)
    np.testing.assert_allclose(z, ref, atol=1e-12)


def test_centers_seeded_in_box():
    a = edmd.RbfLifting.random(100, 2, seed=0)
    assert a.centers.shape == (100, 2) and a.lifted_dim == 102
    assert np.all(np.abs(a.centers) <= 1)
    np.testing.assert_array_equal(a.centers, edmd.RbfLifting.random(100, 2, 0).centers)
    with pytest.raises(ValidationError):
        edmd.lift(a, np.zeros(3))


def ridge_oracle(T, R, lam):
    A = np.hstack([R, np.sqrt(lam) * np.eye(R.shape[0])])
    B = np.hstack([T, np.zeros((T.shape[0], R.shape[0]))])
    return np.linalg.lstsq(A.T, B.T, rcond=None)[0].T


def test_fit_matches_ridge_oracle(small_split):
    rbf = edmd.RbfLifting.random(10, 2, seed=1)
    ds = small_split.train
    model = edmd.fit_edmd(ds, rbf)
    Xl, Yl = edmd.lift(rbf, ds.X), edmd.lift(rbf, ds.Y)
    # thin-plate features are badly conditioned, so the oracle solves the same
    # Tikhonov problem as an augmented least-squares system
    M = ridge_oracle(Yl, np.vstack([Xl, ds.U]), 1e-8)
    assert np.linalg.norm(np.hstack([model.A, model.B]) - M) <= 1e-8 * np.linalg.norm(M)
    C = ridge_oracle(ds.X, Xl, 1e-8)
    assert np.linalg.norm(model.C - C) <= 1e-8 * np.linalg.norm(C)
    # state is in the dictionary, so C recovers it essentially exactly
    np.testing.assert_allclose(model.C @ Xl, ds.X, atol=1e-8)


def test_predict_lifts_once(small_split):
    rbf = edmd.RbfLifting.random(10, 2, seed=1)
    model = edmd.fit_edmd(small_split.train, rbf)
    x0 = np.array([0.2, -0.3])
    u = np.array([[0.5], [-0.5]])
    out = edmd.edmd_predict(model, x0, u)
    z = edmd.lift(rbf, x0)
    z2 = model.A @ (model.A @ z + model.B @ u[0]) + model.B @ u[1]
    np.testing.assert_allclose(out[2], model.C @ z2)
    assert out.shape == (3, 2)


def test_persistence(small_split, tmp_path):
    model = edmd.fit_edmd(small_split.train, edmd.RbfLifting.random(5, 2, 0))
    back = edmd.load_model(edmd.save_model(model, tmp_path / "e.json"))
    np.testing.assert_array_equal(back.A, model.A)
    np.testing.assert_array_equal(back.rbf.centers, model.rbf.centers)
    with pytest.raises(ArtifactIOError):
        edmd.load_model(tmp_path / "x.json")
