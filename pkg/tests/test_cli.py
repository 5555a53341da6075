import json
import re

import numpy as np
import pytest

from carshape import io as fio
from carshape.cli import main
from carshape.metrics import UndefinedMetricError
from carshape.synth import SynthConfig


def _write_cfg(path, **synth):
    fio.write_config(path, fio.PipelineConfig(synth=SynthConfig(**synth)))
    return str(path)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(d / "cfg.json", instance_count=5, pixel_noise_sigma=0.0,
                     confidence_range=(1.0, 1.0), seed=2)
    assert main(["synth", "--config", cfg, "--out", str(d / "ds")]) == 0
    return d


def _args(ds):
    return ["--prior", str(ds / "generator_prior.json"), "--keypoints", str(ds / "keypoints.json"),
            "--intrinsics", str(ds / "intrinsics.json")]


def test_basis_size_zero_is_usage_error(dataset, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["learn-prior", "--annotations", str(dataset / "ds/annotations.json"),
              "--basis-size", "0", "--out", str(dataset / "lp0")])
    assert exc.value.code == 2


def test_learn_prior_reaches_generator_rank(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.json", instance_count=50, seed=5)
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "ds")]) == 0
    assert main(["learn-prior", "--annotations", str(tmp_path / "ds/annotations.json"),
                 "--basis-size", "7", "--out", str(tmp_path / "lp")]) == 0
    rows = (tmp_path / "lp/variance.csv").read_text().splitlines()[1:]
    frac = {int(n): float(f) for n, f in (r.split(",") for r in rows)}
    assert frac[5] >= 0.9999
    assert (tmp_path / "lp/prior.json").exists()
    assert "variance_explained" in capsys.readouterr().out


def test_estimate_pose_summary(dataset, capsys):
    ds = dataset / "ds"
    assert main(["estimate-pose", *_args(ds), "--init", str(ds / "init_poses.json"),
                 "--ground-truth", str(ds / "ground_truth.json"), "--out", str(dataset / "p")]) == 0
    out = capsys.readouterr().out
    assert "5 ok, 0 failed" in out
    med = float(re.search(r"median ([0-9.]+) deg", out).group(1))
    assert med < 5.0


def test_three_keypoints_gives_failure_record(dataset, tmp_path):
    ds = dataset / "ds"
    doc = json.loads((ds / "keypoints.json").read_text())
    first = doc["instances"][0]
    first["keypoints"] = dict(list(first["keypoints"].items())[:3])
    fio.write_json(tmp_path / "k.json", "carshape.keypoints", doc)
    args = _args(ds)
    args[3] = str(tmp_path / "k.json")
    assert main(["estimate-pose", *args, "--out", str(tmp_path)]) == 0
    recs = fio.read_poses(tmp_path / "poses.json")
    assert recs[first["id"]] == {"id": first["id"], "status": "failed", "reason": "insufficient keypoints"}
    assert sum(r["status"] == "ok" for r in recs.values()) == 4


def test_all_failures_give_nonzero_exit(dataset, tmp_path):
    ds = dataset / "ds"
    doc = json.loads((ds / "keypoints.json").read_text())
    for inst in doc["instances"]:
        inst["keypoints"] = dict(list(inst["keypoints"].items())[:2])
    fio.write_json(tmp_path / "k.json", "carshape.keypoints", doc)
    args = _args(ds)
    args[3] = str(tmp_path / "k.json")
    assert main(["estimate-pose", *args, "--out", str(tmp_path)]) == 1


def _truth_poses(ds, path):
    recs = []
    for iid, g in fio.read_ground_truth(ds / "ground_truth.json").items():
        recs.append({"id": iid, "status": "ok", "q": g["q"], "t": g["t"], "weights": [1.0] * 14,
                     "residuals": [0.0] * 14, "iterations": 0, "cost": 0.0})
    fio.write_poses(path, recs)


def test_adjust_shape_noiseless_reprojection(dataset, tmp_path, capsys):
    ds = dataset / "ds"
    _truth_poses(ds, tmp_path / "poses.json")
    assert main(["adjust-shape", *_args(ds), "--poses", str(tmp_path / "poses.json"),
                 "--eta", "1", "1e-4", "1e-4", "1e-4", "1e-4", "--out", str(tmp_path / "a")]) == 0
    finals = [float(m) for m in re.findall(r"reproj \S+ -> (\S+)", capsys.readouterr().out)]
    assert len(finals) == 5
    assert max(finals) < 1e-6


def test_zero_eta_keeps_mean_shape(dataset, tmp_path, prior):
    ds = dataset / "ds"
    _truth_poses(ds, tmp_path / "poses.json")
    assert main(["adjust-shape", *_args(ds), "--poses", str(tmp_path / "poses.json"),
                 "--eta", "0", "0", "0", "0", "0", "--out", str(tmp_path / "a")]) == 0
    for rec in fio.read_reconstructions(tmp_path / "a/reconstructions.json").values():
        assert rec["lambda"] == [0.0] * 5
        np.testing.assert_array_equal(rec["keypoints3d"], prior.mean)
    V, E = fio.read_obj(tmp_path / "a/obj/00000.obj")
    assert len(V) == 14
    assert {tuple(sorted(e)) for e in E.tolist()} == set(prior.topology.edges)


def test_eval_of_ground_truth_is_perfect(dataset, tmp_path, capsys):
    ds = dataset / "ds"
    gt = fio.read_ground_truth(ds / "ground_truth.json")
    K = fio.read_intrinsics(ds / "intrinsics.json")
    from carshape.geometry import project_points
    recs = []
    for iid, g in gt.items():
        pose = fio.pose_from_dict(g)
        recs.append({"id": iid, "status": "ok", **fio.pose_to_dict(pose),
                     "projected": project_points(np.array(g["keypoints3d"]), pose, K)})
    fio.write_poses(tmp_path / "poses.json", recs)
    assert main(["eval", "--pred", str(tmp_path), "--gt", str(ds), "--out", str(tmp_path / "e")]) == 0
    m = json.loads((tmp_path / "e/metrics.json").read_text())
    assert m["aop"] == {"5": 1.0, "15": 1.0, "30": 1.0}
    assert m["apk_mean"] == 1.0
    assert m["mean_abs_angle_error_deg"] == 0.0


def test_eval_empty_intersection(dataset, tmp_path):
    fio.write_poses(tmp_path / "poses.json", [{"id": "nope", "status": "ok", "q": [1, 0, 0, 0],
                                               "t": [0, 0, 5], "projected": [[0, 0]] * 14}])
    assert main(["eval", "--pred", str(tmp_path), "--gt", str(dataset / "ds"),
                 "--out", str(tmp_path / "e")]) == 1
    from carshape.cli import cmd_eval
    with pytest.raises(UndefinedMetricError):
        cmd_eval(tmp_path, dataset / "ds", tmp_path / "e")


def test_synth_zero_instances(tmp_path):
    cfg = _write_cfg(tmp_path / "c.json", instance_count=0)
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "ds")]) == 0
    doc = json.loads((tmp_path / "ds/keypoints.json").read_text())
    assert doc["instances"] == [] and len(doc["keypoint_names"]) == 14
    assert doc["format"] == "carshape.keypoints"


def test_synth_full_occlusion_errors(tmp_path):
    assert main(["synth", "--occlusion", "1", "--count", "2", "--out", str(tmp_path)]) == 1


def test_synth_seed_flag_is_deterministic(tmp_path):
    for run in ("a", "b"):
        assert main(["synth", "--count", "3", "--seed", "7", "--out", str(tmp_path / run)]) == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_config_from_environment(tmp_path, monkeypatch):
    cfg = _write_cfg(tmp_path / "c.json", instance_count=2, seed=1)
    monkeypatch.setenv(fio.CONFIG_ENV, cfg)
    assert main(["synth", "--out", str(tmp_path / "ds")]) == 0
    assert len(fio.read_ground_truth(tmp_path / "ds/ground_truth.json")) == 2


def test_bad_config_exit_code(tmp_path):
    (tmp_path / "c.json").write_text("{")
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2
