import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from koopman_uq import autoencoder as ae
from koopman_uq import koopman as kp
from koopman_uq import report as rep
from koopman_uq.dataset import fit_normalizer
from koopman_uq.errors import ValidationError


def make_run(err, r=None):
    truth = np.zeros((len(err), 2))
    return rep.PredictionRun(truth, truth - np.asarray(err, float),
                             np.zeros((len(err) - 1, 1)), r=r)


@pytest.fixture(scope="module")
def models(small_split):
    m = ae.build_autoencoder(2, 10, 5, fit_normalizer(small_split.train), seed=0)
    return m, kp.fit_koopman(m, small_split.train, rho_max=0.99)


def test_rollout_definition(models):
    m, K = models
    x0 = np.array([0.1, -0.2])
    run = rep.rollout_predict(m, K, x0, np.zeros((0, 1)))
    np.testing.assert_allclose(run.predicted_states[0], ae.reconstruct(m, x0))
    run = rep.rollout_predict(m, K, x0, np.array([[0.7]]))
    z1 = K.Phi @ ae.encode(m, x0) + K.Gamma @ [0.7]
    np.testing.assert_allclose(run.predicted_states[1], ae.decode(m, z1))
    np.testing.assert_allclose(run.lifted_pred[1], z1)


def test_metrics_closed_forms():
    t = rep.metrics(make_run(np.zeros((4, 2))))
    np.testing.assert_array_equal(t.me, 0)
    np.testing.assert_array_equal(t.mse, 0)
    t = rep.metrics(make_run([[0.3, 0.0]] * 5))
    np.testing.assert_allclose(t.me, [0.3, 0.0])
    np.testing.assert_allclose(t.mse, [0.09, 0.0])
    with pytest.raises(ValidationError):
        rep.metrics([])


@given(st.lists(st.floats(-2, 2), min_size=4, max_size=30), st.integers(2, 20))
def test_metrics_compose_over_concatenation(vals, cut):
    e = np.array(vals * 2).reshape(-1, 2)
    cut = min(cut, len(e) - 1)
    a, b = make_run(e[:cut]), make_run(e[cut:]) if len(e) - cut > 1 else None
    if b is None:
        return
    ta, tb, tab = rep.metrics(a), rep.metrics(b), rep.metrics([a, b])
    np.testing.assert_allclose(tab.me, np.maximum(ta.me, tb.me))
    w = (ta.n_points * ta.mse + tb.n_points * tb.mse) / (ta.n_points + tb.n_points)
    np.testing.assert_allclose(tab.mse, w, rtol=1e-12, atol=1e-15)
    assert np.all(tab.me ** 2 >= tab.mse - 1e-15)


def test_containment_examples():
    e = [[0, 0], [0, 0], [0.1, 0], [0.5, 0]]
    rpt = rep.containment_report(make_run(e, 1e9))
    assert rpt.fraction == 1.0 and rpt.first_violation is None
    rpt = rep.containment_report(make_run(e, 0.0))
    assert rpt.fraction == 0.5 and rpt.first_violation == 2
    with pytest.raises(ValidationError):
        rep.containment_report(make_run(e))


@given(st.lists(st.floats(0, 1), min_size=3, max_size=20), st.floats(0, 1), st.floats(0, 1))
def test_containment_monotone_in_radius(vals, r1, r2):
    e = np.stack([vals, np.zeros(len(vals))], axis=1)
    lo, hi = sorted((r1, r2))
    assert (rep.containment_report(make_run(e, lo)).fraction
            <= rep.containment_report(make_run(e, hi)).fraction)


def test_premise_is_cumulative():
    run = make_run(np.zeros((5, 2)), 1.0)
    resid = np.array([[0.1], [0.5], [0.1], [0.1]])
    rpt = rep.containment_report(run, resid, 0.2)
    np.testing.assert_array_equal(rpt.premise, [True, True, False, False, False])
    np.testing.assert_array_equal(rpt.step_residual_ok, [True, False, True, True])
    assert rpt.premise_fraction == 0.75


def test_lifted_residuals(models):
    m, K = models
    run = rep.rollout_predict(m, K, [0.1, 0.1], np.zeros((3, 1)))
    res = rep.lifted_residuals(m, K, run)
    Z = ae.encode(m, run.true_states.T)
    assert res.shape == (3, 5)
    np.testing.assert_allclose(res[1], Z[:, 2] - K.Phi @ Z[:, 1])


def test_emit_artifacts(tmp_path):
    run = make_run(np.full((601, 2), 0.1), 0.5)
    rpt = rep.containment_report(run)
    files = rep.emit_artifacts(tmp_path, run, [rep.metrics(run, "m", 1.5)],
                               {"L_star": 1.5}, {"s": 3}, 0.01, rpt)
    rows = list(csv.reader(files["trajectory"].open()))
    assert rows[0] == ["k", "t", "x1", "x2", "x1_hat", "x2_hat", "err2", "r", "inside"]
    assert len(rows) == 602 and rows[1][-1] == "1"
    assert float(rows[1][6]) == pytest.approx(np.sqrt(0.02))
    mrows = list(csv.reader(files["metrics"].open()))
    assert mrows[1][:2] == ["m", "x1"] and float(mrows[1][3]) == pytest.approx(0.01)
    assert json.loads(files["certificate"].read_text()) == {"L_star": 1.5}
    root = ET.fromstring(files["phase_plane"].read_text())
    ellipses = [el for el in root.iter() if el.tag.endswith("ellipse")]
    assert len(ellipses) == 4
    assert "href" not in files["phase_plane"].read_text()


def test_emit_empty(tmp_path):
    files = rep.emit_artifacts(tmp_path, None, [])
    assert files["metrics"].read_text().count("\n") == 1
    assert files["trajectory"].read_text().count("\n") == 1
    ET.fromstring(files["phase_plane"].read_text())
    assert "certificate" not in files


def test_emit_reports_path_on_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        rep.emit_artifacts(blocker / "sub", None, [])
