"""Pipeline stages over a run directory, linked by a hash-based provenance chain.

Every artifact records the SHA-256 of each input artifact and of the config
sections that shaped it. Before a stage reads an artifact it re-hashes that
artifact's inputs; any mismatch means an upstream stage was rerun (or the
config changed) after the artifact was written, and the stage refuses to
continue unless forced.

Run directory layout::

    data/            X.csv U.csv Y.csv dataset.json provenance.json
    ae.json  koopman.json  edmd.json  certificate.json  rpi.json
    metrics.csv  trajectory.csv  phase_plane.svg  evaluation.json
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import autoencoder as aemod
from . import certify as cert
from . import edmd as edmdmod
from . import koopman as kp
from . import report as rep
from . import setcalc
from .config import PipelineConfig, section_hash
from .dataset import SplitDataset, generate_dataset, load_dataset, save_dataset, split
from .dynamics import SimConfig, simulate, square_wave_inputs
from .errors import ArtifactIOError, StaleArtifactError, ValidationError

log = logging.getLogger(__name__)

# artifact -> (path inside the run directory, producing stage, config sections)
ARTIFACTS = {
    "dataset": ("data", "gen-data", ("dynamics",)),
    "ae": ("ae.json", "train-ae", ("split", "ae", "koopman")),
    "koopman": ("koopman.json", "fit-koopman", ("split", "koopman")),
    "edmd": ("edmd.json", "fit-edmd", ("split", "edmd")),
    "certificate": ("certificate.json", "certify", ("certify",)),
    "rpi": ("rpi.json", "rpi", ("koopman",)),
}
DATASET_FILES = ("X.csv", "U.csv", "Y.csv", "dataset.json", "provenance.json")


def _sha256_files(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def artifact_path(out: Path, name: str) -> Path:
    return Path(out) / ARTIFACTS[name][0]


def artifact_hash(out: Path, name: str) -> str:
    p = artifact_path(out, name)
    files = [p / f for f in DATASET_FILES] if name == "dataset" else [p]
    missing = [f for f in files if not f.exists()]
    if missing:
        raise ArtifactIOError(
            f"missing {missing[0]}; run `{ARTIFACTS[name][1]}` first")
    return _sha256_files(files)


def _read_json(path: Path, stage: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}; run `{stage}` first") from exc
    except json.JSONDecodeError as exc:
        raise ArtifactIOError(f"{path} is corrupt; rerun `{stage}`") from exc


def _write_json(path: Path, d: dict) -> Path:
    try:
        path.write_text(json.dumps(d, indent=1) + "\n")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    return path


def read_provenance(out: Path, name: str) -> dict:
    p = artifact_path(out, name)
    stage = ARTIFACTS[name][1]
    if name == "dataset":
        return _read_json(p / "provenance.json", stage)
    d = _read_json(p, stage)
    if "provenance" not in d:
        raise StaleArtifactError(f"{p} has no provenance record; rerun `{stage}`",
                                 stage)
    return d["provenance"]


def _provenance(out: Path, cfg: PipelineConfig, name: str,
                inputs: tuple[str, ...]) -> dict:
    stage, sections = ARTIFACTS[name][1], ARTIFACTS[name][2]
    return {"stage": stage,
            "config_sha256": section_hash(cfg, *sections),
            "inputs": {i: artifact_hash(out, i) for i in inputs}}


def check_artifact(out: Path, cfg: PipelineConfig, name: str) -> None:
    """Raise :class:`StaleArtifactError` if ``name`` no longer matches its
    recorded inputs or the current config."""
    _, stage, sections = ARTIFACTS[name]
    prov = read_provenance(out, name)
    if prov.get("config_sha256") != section_hash(cfg, *sections):
        raise StaleArtifactError(
            f"{artifact_path(out, name)} was produced with different "
            f"{'/'.join(sections)} settings; rerun `{stage}`", stage)
    for dep, h in prov.get("inputs", {}).items():
        if artifact_hash(out, dep) != h:
            raise StaleArtifactError(
                f"{artifact_path(out, name)} was built from an older {dep}; "
                f"rerun `{stage}`", stage)


def check_chain(out: Path, cfg: PipelineConfig, names, force: bool = False) -> None:
    if force:
        return
    for n in names:
        check_artifact(out, cfg, n)


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

def _split(out: Path, cfg: PipelineConfig) -> SplitDataset:
    ds = load_dataset(artifact_path(out, "dataset"))
    return split(ds, cfg.split.ratios, cfg.split.seed)


def gen_data(cfg: PipelineConfig, out: Path) -> Path:
    d = cfg.dynamics
    ds = generate_dataset(d.num_traj, d.steps, SimConfig(dt=d.dt, steps=d.steps),
                          d.seed)
    directory = artifact_path(out, "dataset")
    try:
        save_dataset(ds, directory)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write dataset to {directory}: {exc}") from exc
    _write_json(directory / "provenance.json", _provenance(out, cfg, "dataset", ()))
    log.info("gen-data: %d samples from %d trajectories (%d redrawn)",
             ds.n_samples, d.num_traj, ds.meta.get("rejected", 0))
    return directory


def multistep_selector(cfg: PipelineConfig, sp: SplitDataset):
    """Checkpoint score: fit the lifted model on the training split, then
    take the open-loop rollout MSE over the validation trajectories.

    Returns ``None`` when the config selects by reconstruction error.
    """
    if cfg.ae.select != "multistep" or sp.validation.n_trajectories == 0:
        return None
    k = cfg.koopman

    def score(model: aemod.AEModel) -> float:
        km = kp.fit_koopman(model, sp.train, k.tikhonov, k.rho_max)
        return kp.multistep_mse(model, km, sp.validation)
    return score


def train_ae(cfg: PipelineConfig, out: Path, force: bool = False) -> Path:
    check_chain(out, cfg, ["dataset"], force)
    sp = _split(out, cfg)
    a = cfg.ae
    tc = aemod.TrainConfig(rho=a.rho, epochs=a.epochs, optimizer=a.optimizer,
                           patience=a.patience, seed=a.seed,
                           select_every=a.select_every)
    model = aemod.train_autoencoder(sp, a.hidden_size, a.lifted_dim, tc,
                                    multistep_selector(cfg, sp))
    d = aemod.model_to_dict(model)
    d["provenance"] = _provenance(out, cfg, "ae", ("dataset",))
    log.info("train-ae: hidden %d, validation MSE %.3e", a.hidden_size,
             aemod.reconstruction_mse(model, sp.validation))
    return _write_json(artifact_path(out, "ae"), d)


def load_ae(out: Path) -> aemod.AEModel:
    return aemod.model_from_dict(_read_json(artifact_path(out, "ae"), "train-ae"))


def fit_koopman(cfg: PipelineConfig, out: Path, force: bool = False) -> Path:
    check_chain(out, cfg, ["dataset", "ae"], force)
    sp = _split(out, cfg)
    k = cfg.koopman
    model = kp.fit_koopman(load_ae(out), sp.train, k.tikhonov, k.rho_max)
    d = kp.model_to_dict(model)
    d["provenance"] = _provenance(out, cfg, "koopman", ("dataset", "ae"))
    log.info("fit-koopman: spectral radius %.6f, w_max %.3e",
             setcalc.spectral_radius(model.Phi), model.w_max)
    return _write_json(artifact_path(out, "koopman"), d)


def load_koopman(out: Path) -> kp.KoopmanModel:
    return kp.model_from_dict(_read_json(artifact_path(out, "koopman"), "fit-koopman"))


def fit_edmd(cfg: PipelineConfig, out: Path, force: bool = False) -> Path:
    check_chain(out, cfg, ["dataset"], force)
    e = cfg.edmd
    ds = (load_dataset(artifact_path(out, "dataset")) if e.fit_on == "all"
          else _split(out, cfg).train)
    rbf = edmdmod.RbfLifting.random(e.n_centers, ds.X.shape[0], e.seed)
    model = edmdmod.fit_edmd(ds, rbf, e.tikhonov)
    d = edmdmod.model_to_dict(model)
    d["provenance"] = _provenance(out, cfg, "edmd", ("dataset",))
    return _write_json(artifact_path(out, "edmd"), d)


def load_edmd(out: Path) -> edmdmod.EdmdModel:
    return edmdmod.model_from_dict(_read_json(artifact_path(out, "edmd"), "fit-edmd"))


def run_certify(cfg: PipelineConfig, out: Path, force: bool = False,
                model_path: Path | None = None) -> Path:
    """Certify the decoder at ``model_path`` (default: the run's ``ae.json``).

    Probe points for the empirical lower bound are encodings of randomly
    chosen training states.
    """
    c = cfg.certify
    if model_path is None:
        check_chain(out, cfg, ["dataset", "ae"], force)
        ae = load_ae(out)
        inputs = ("ae", "dataset")
    else:
        check_chain(out, cfg, ["dataset"], force)
        ae = aemod.load_model(model_path)
        inputs = ("dataset",)
    sp = _split(out, cfg)
    rng = np.random.default_rng(c.seed)
    cols = rng.choice(sp.train.n_samples, size=min(c.probe_points, sp.train.n_samples),
                      replace=False)
    probes = aemod.encode(ae, sp.train.X[:, np.sort(cols)])
    lc = cert.certify_decoder(ae, probes, cert.SlopeBounds(c.slope_lo, c.slope_hi),
                              c.pairs, c.seed, c.bisection_rtol, c.inner_iters)
    d = cert.cert_to_dict(lc)
    d["decoder_sha256"] = hashlib.sha256(aemod.dumps(ae).encode()).hexdigest()
    d["hidden_size"] = int(ae.decoder[0].n_out)
    d["provenance"] = _provenance(out, cfg, "certificate", inputs)
    log.info("certify: L* = %.6g (empirical %.6g, spectral %.6g)",
             lc.L_star, lc.empirical_lo, lc.spectral_hi)
    return _write_json(artifact_path(out, "certificate"), d)


def run_rpi(cfg: PipelineConfig, out: Path, force: bool = False) -> Path:
    check_chain(out, cfg, ["dataset", "ae", "koopman"], force)
    model = load_koopman(out)
    k = cfg.koopman
    rc = setcalc.compute_rpi(model.Phi, model.w_max, k.alpha_target, k.s_max)
    d = setcalc.cert_to_dict(rc)
    d["spectral_radius"] = setcalc.spectral_radius(model.Phi)
    d["w_box"] = None if model.w_box is None else model.w_box.tolist()
    d["provenance"] = _provenance(out, cfg, "rpi", ("koopman",))
    log.info("rpi: s = %d, alpha = %.4g, l2 radius %.6g", rc.s, rc.alpha,
             rc.l2_radius)
    return _write_json(artifact_path(out, "rpi"), d)


def _eval_inputs(cfg: PipelineConfig) -> tuple[int, np.ndarray]:
    dt = cfg.dynamics.dt
    K = int(round(cfg.eval.horizon / dt))
    if cfg.eval.input.kind == "square":
        u = square_wave_inputs(K, dt, cfg.eval.input.half_period)
    else:
        u = np.zeros((K, 1))
    return K, u


def _split_runs(sp: SplitDataset, predict, label: str):
    runs = []
    ds = sp.test
    for i in range(ds.n_trajectories):
        tr = ds.trajectory(i)
        truth = np.hstack([tr.X, tr.Y[:, -1:]]).T
        runs.append(rep.PredictionRun(truth, predict(truth[0], tr.U.T), tr.U.T,
                                      label=label))
    return runs


def evaluate(cfg: PipelineConfig, out: Path, force: bool = False) -> dict:
    check_chain(out, cfg, ["dataset", "ae", "koopman", "edmd", "certificate", "rpi"],
                force)
    ae, km, em = load_ae(out), load_koopman(out), load_edmd(out)
    cd = _read_json(artifact_path(out, "certificate"), "certify")
    rc = setcalc.cert_from_dict(_read_json(artifact_path(out, "rpi"), "rpi"))
    L_star = float(cd["L_star"])
    dt = cfg.dynamics.dt
    K, u = _eval_inputs(cfg)
    x0 = np.array(cfg.eval.x0, dtype=float)
    truth = simulate(x0, u, SimConfig(dt=dt, steps=K))

    run = rep.rollout_predict(ae, km, x0, u, truth, label="ae-koopman")
    r = setcalc.reconstruction_radius(L_star, rc).radius
    run = run.with_radius(r)
    edmd_run = rep.PredictionRun(truth, edmdmod.edmd_predict(em, x0, u), u,
                                 label="edmd")
    resid = rep.lifted_residuals(ae, km, run)
    cr = rep.containment_report(run, resid, km.w_max)

    sp = _split(out, cfg)
    ae_test = _split_runs(sp, lambda x, uu: rep.rollout_predict(ae, km, x, uu)
                          .predicted_states, "ae-koopman")
    tables = [rep.metrics(run, "ae-koopman", L_star),
              rep.metrics(edmd_run, "edmd"),
              rep.metrics(ae_test, "ae-koopman/test-split", L_star)]
    if cfg.edmd.fit_on == "train":
        # with fit_on="all" the test trajectories are in-sample for EDMD
        edmd_test = _split_runs(sp, lambda x, uu: edmdmod.edmd_predict(em, x, uu),
                                "edmd")
        tables.append(rep.metrics(edmd_test, "edmd/test-split"))
    rep.emit_artifacts(out, run, tables, dt=dt, report=cr,
                       disk_times=cfg.eval.disk_times)

    summary = {
        "horizon_steps": K,
        "metrics": {t.label: {"ME": t.me.tolist(), "MSE": t.mse.tolist(),
                              "n_points": t.n_points} for t in tables},
        "L_star": L_star,
        "l2_radius": rc.l2_radius,
        "r": r,
        "w_max": km.w_max,
        "containment_fraction": cr.fraction,
        "premise_fraction": cr.premise_fraction,
        "premise_steps": int(cr.premise.sum()),
        "violations_under_premise": cr.violations_under_premise,
        "violations_under_step_premise": cr.violations_under_step_premise,
        "first_violation": cr.first_violation,
        "max_err2": float(cr.err2.max()),
        "provenance": {"stage": "evaluate",
                       "config_sha256": section_hash(cfg, "dynamics", "eval"),
                       "inputs": {n: artifact_hash(out, n) for n in
                                  ("ae", "koopman", "edmd", "certificate", "rpi")}},
    }
    _write_json(Path(out) / "evaluation.json", summary)
    log.info("evaluate: r = %.4g, containment %.3f, premise %.3f",
             r, cr.fraction, cr.premise_fraction)
    return summary


STAGES = {
    "gen-data": lambda cfg, out, force: gen_data(cfg, out),
    "train-ae": train_ae,
    "fit-koopman": fit_koopman,
    "fit-edmd": fit_edmd,
    "certify": run_certify,
    "rpi": run_rpi,
    "evaluate": evaluate,
}


def run_all(cfg: PipelineConfig, out: Path, force: bool = False,
            timings: dict | None = None) -> dict:
    """Run every stage in order; stage wall times go into ``timings``."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactIOError(f"cannot create {out}: {exc}") from exc
    for name, fn in STAGES.items():
        log.info("stage %s", name)
        t0 = time.perf_counter()
        result = fn(cfg, out, force)
        if timings is not None:
            timings[name] = time.perf_counter() - t0
    if not isinstance(result, dict):
        raise ValidationError("evaluate did not return a summary")
    return result
