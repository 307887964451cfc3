import csv
import json

import jsonschema
import numpy as np
import pytest

from n2nsdf.cli import ExperimentConfig, desk_config, load_config, main, read_trace
from n2nsdf.finetune import FinetuneConfig
from n2nsdf.geometry import read_point_cloud
from n2nsdf.metrics import REPORT_SCHEMA
from n2nsdf.prior import PriorConfig, init_prior
from n2nsdf.sdf_net import load_checkpoint

TINY_PRIOR = PriorConfig(epochs=6, embedding_size=4, hidden=16, n_layers=3, samples_per_shape=128, batch_size=64)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = desk_config(
        prior=TINY_PRIOR,
        finetune=FinetuneConfig(iterations=8, K=40, U=40),
        n_points=200,
        resolution=16,
        eval_samples=500,
    )
    (d / "cfg.json").write_text(cfg.to_json())
    return d


def cli(workdir, *args):
    return main([*args, "--config", str(workdir / "cfg.json")])


@pytest.fixture(scope="module")
def pipeline(workdir):
    assert cli(workdir, "make-data", "--out", str(workdir / "data")) == 0
    assert cli(workdir, "train-prior", "--out", str(workdir / "prior")) == 0
    cloud = workdir / "data" / "shape0_noisy.xyz"
    assert cli(workdir, "reconstruct", str(cloud), "--prior", str(workdir / "prior" / "prior.nsdf"),
               "--out", str(workdir / "rec")) == 0
    return workdir


def test_make_data_files(pipeline):
    man = json.loads((pipeline / "data" / "manifest.json").read_text())
    assert man["sigma"] == 0.01 and man["n_points"] == 200
    clean, _ = read_point_cloud(pipeline / "data" / "shape0_clean.xyz")
    noisy, _ = read_point_cloud(pipeline / "data" / "shape0_noisy.xyz")
    assert len(clean) == len(noisy) == 200
    assert 0.005 < np.std(noisy.points - clean.points) < 0.02


def test_sigma_zero_gives_identical_clouds(workdir, tmp_path):
    assert cli(workdir, "make-data", "--out", str(tmp_path), "--set", "sigma=0") == 0
    a = (tmp_path / "shape1_clean.xyz").read_bytes()
    assert a == (tmp_path / "shape1_noisy.xyz").read_bytes()


def test_make_data_deterministic(workdir, tmp_path):
    for name in ("a", "b"):
        assert cli(workdir, "make-data", "--out", str(tmp_path / name), "--seed", "3") == 0
    for f in ("shape0_noisy.xyz", "shape2_clean.xyz", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_config_saved_everywhere(pipeline):
    for sub in ("data", "prior", "rec"):
        saved = ExperimentConfig.from_dict(json.loads((pipeline / sub / "config.json").read_text()))
        assert saved.finetune.iterations == 8


def test_prior_outputs(pipeline):
    man = json.loads((pipeline / "prior" / "manifest.json").read_text())
    assert man["shape_ids"] == ["shape0", "shape1", "shape2"] and man["epochs_done"] == 6
    assert man["alpha"] == 1e-4 and man["schedule"]["decay_every"] == 500
    assert len(read_trace(pipeline / "prior" / "prior_loss.csv")) == 6
    assert man["final_loss"] == read_trace(pipeline / "prior" / "prior_loss.csv")[-1]


def test_zero_epochs_checkpoint_is_init(workdir, tmp_path):
    assert cli(workdir, "train-prior", "--out", str(tmp_path), "--set", "prior.epochs=0") == 0
    ck = load_checkpoint(tmp_path / "prior.nsdf")
    init = init_prior(3, TINY_PRIOR)
    assert np.array_equal(ck.codes, init.codes)
    assert all(np.array_equal(a, b) for a, b in zip(ck.net.params, init.net.params))


def test_resume_continues(pipeline, tmp_path):
    prior = pipeline / "prior" / "prior.nsdf"
    assert cli(pipeline, "train-prior", "--out", str(tmp_path), "--resume", str(prior)) == 0
    first = read_trace(pipeline / "prior" / "prior_loss.csv")
    more = read_trace(tmp_path / "prior_loss.csv")
    assert more[0] < 10 * first[-1]
    assert json.loads((tmp_path / "manifest.json").read_text())["epochs_done"] == 12


def test_reconstruct_outputs(pipeline):
    rec = pipeline / "rec"
    assert (rec / "mesh.obj").exists()
    assert len(read_trace(rec / "finetune_loss.csv")) == 8
    assert load_checkpoint(rec / "finetuned.nsdf").ids == ["finetuned"]


def test_denoise(pipeline, tmp_path):
    cloud = pipeline / "data" / "shape0_noisy.xyz"
    assert cli(pipeline, "denoise", str(cloud), "--checkpoint", str(pipeline / "rec" / "finetuned.nsdf"),
               "--out", str(tmp_path)) == 0
    den, _ = read_point_cloud(tmp_path / "denoised.xyz")
    assert len(den) == 200 and np.all(np.isfinite(den.points))


def test_eval_carries_noise_level(pipeline, tmp_path):
    rc = cli(pipeline, "eval", str(pipeline / "rec" / "mesh.obj"), "--gt", "0",
             "--manifest", str(pipeline / "data" / "manifest.json"), "--out", str(tmp_path))
    assert rc == 0
    rep = json.loads((tmp_path / "metrics.json").read_text())
    jsonschema.validate(rep, REPORT_SCHEMA)
    assert rep["config"]["noise"]["sigma"] == 0.01


def test_eval_mesh_against_itself(workdir, tmp_path):
    from n2nsdf.mesher import extract_isosurface, write_mesh
    from n2nsdf.testkit import sphere_sdf

    mesh = extract_isosurface(lambda p: sphere_sdf(p, 0.3), 16, ((-0.5,) * 3, (0.5,) * 3))
    write_mesh(mesh, tmp_path / "s.obj")
    assert cli(workdir, "eval", str(tmp_path / "s.obj"), "--gt", str(tmp_path / "s.obj"),
               "--out", str(tmp_path / "ev"), "--set", "tau=0.1") == 0
    rep = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    # 500 samples per side are ~0.05 apart, so tau must exceed the spacing
    assert rep["cd_l2"] < 1e-3 and rep["f_score"] > 0.95 and rep["nc"] > 0.95


def test_ablate_single_value(pipeline, tmp_path):
    prior = str(pipeline / "prior" / "prior.nsdf")
    for name in ("a", "b"):
        rc = cli(pipeline, "ablate", "--axis", "scope", "--values", "global", "--prior", prior,
                 "--out", str(tmp_path / name))
        assert rc == 0
    rows = list(csv.DictReader(open(tmp_path / "a" / "ablation_scope.csv")))
    assert len(rows) == 1 and rows[0]["value"] == "global" and rows[0]["status"] in ("ok", "empty-mesh")
    assert (tmp_path / "a" / "ablation_scope.csv").read_bytes() == (tmp_path / "b" / "ablation_scope.csv").read_bytes()


def test_ablate_records_failed_cell(pipeline, tmp_path):
    prior = str(pipeline / "prior" / "prior.nsdf")
    # K larger than the 200-point cloud fails that cell only
    rc = cli(pipeline, "ablate", "--axis", "region-size", "--values", "1000", "30", "--prior", prior,
             "--out", str(tmp_path))
    assert rc == 0
    rows = list(csv.DictReader(open(tmp_path / "ablation_region-size.csv")))
    assert [r["status"] for r in rows][0] == "failed" and "exceeds" in rows[0]["error"]
    assert rows[1]["status"] != "failed"


def test_exit_codes(pipeline, tmp_path, capsys):
    assert main(["frobnicate"]) == 1
    assert cli(pipeline, "ablate", "--axis", "colour", "--out", str(tmp_path)) == 1
    assert cli(pipeline, "make-data", "--out", str(tmp_path), "--set", "nonsense=1") == 1
    # architecture mismatch names both headers
    rc = cli(pipeline, "reconstruct", str(pipeline / "data" / "shape0_noisy.xyz"),
             "--prior", str(pipeline / "prior" / "prior.nsdf"), "--out", str(tmp_path / "r"),
             "--set", "prior.hidden=32")
    err = capsys.readouterr().err
    assert rc == 1 and "checkpoint {" in err and "config {" in err
    (tmp_path / "empty.xyz").write_text("")
    rc = cli(pipeline, "reconstruct", str(tmp_path / "empty.xyz"), "--prior",
             str(pipeline / "prior" / "prior.nsdf"), "--out", str(tmp_path / "r2"))
    assert rc == 3
    assert cli(pipeline, "eval", str(tmp_path / "missing.obj"), "--gt", "0", "--out", str(tmp_path / "e")) == 3


def test_load_config_overrides():
    cfg = load_config(None, 7, ["finetune.iterations=12", "sigma=0.02"])
    assert cfg.finetune.iterations == 12 and cfg.sigma == 0.02
    assert cfg.seed == cfg.prior.seed == cfg.finetune.seed == 7
