import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from carshape import io as fio
from carshape.category import car_category
from carshape.energy import EnergyConfig
from carshape.geometry import Intrinsics, QuatPose
from carshape.pose import irls_pose
from carshape.shape_adjust import shape_adjust
from carshape.synth import SynthConfig


def test_prior_round_trip(tmp_path, prior):
    fio.write_prior(tmp_path / "p.json", prior)
    back = fio.read_prior(tmp_path / "p.json")
    np.testing.assert_array_equal(back.mean, prior.mean)
    np.testing.assert_array_equal(back.basis, prior.basis)
    np.testing.assert_array_equal(back.eigenvalues, prior.eigenvalues)
    np.testing.assert_array_equal(back.dim_priors, prior.dim_priors)
    assert back.sigma2 == prior.sigma2
    assert back.category == prior.category
    assert back.medial_plane == prior.medial_plane
    fio.write_prior(tmp_path / "q.json", back)
    assert (tmp_path / "p.json").read_bytes() == (tmp_path / "q.json").read_bytes()


def test_pose_and_reconstruction_round_trip(tmp_path, prior, noisy_set):
    inst = noisy_set.instances[0]
    K = noisy_set.intrinsics
    pr = irls_pose(prior, inst.observations, K, init=inst.init_pose)
    fio.write_poses(tmp_path / "poses.json", [fio.pose_record(inst.id, pr)])
    back = fio.pose_result_from_record(fio.read_poses(tmp_path / "poses.json")[inst.id])
    assert back.pose == pr.pose
    np.testing.assert_array_equal(back.weights, pr.weights)
    np.testing.assert_array_equal(back.residuals, pr.residuals)
    assert back.cost == pr.cost and back.iterations == pr.iterations

    rec = shape_adjust(prior, inst.observations, pr.pose, K, weights=pr.weights)
    fio.write_reconstructions(tmp_path / "r.json", [fio.reconstruction_record(inst.id, rec)])
    r2 = fio.reconstruction_from_record(fio.read_reconstructions(tmp_path / "r.json")[inst.id])
    np.testing.assert_array_equal(r2.lam.values, rec.lam.values)
    np.testing.assert_array_equal(r2.keypoints3d, rec.keypoints3d)
    assert r2.planes == rec.planes
    assert r2.energy_breakdown == rec.energy_breakdown


def test_config_round_trip(tmp_path):
    cfg = fio.PipelineConfig(basis_size=3, intrinsics=Intrinsics(700.0, 710.0, 600.0, 170.0),
                             energy=EnergyConfig(eta=(1, 0.2, 0.3, 0.4, 0.5), ground_normal=None),
                             synth=SynthConfig(instance_count=7, confidence_range=(0.5, 0.9)))
    fio.write_config(tmp_path / "c.json", cfg)
    back = fio.read_config(tmp_path / "c.json")
    assert back == cfg


def test_detections_round_trip(tmp_path, noisy_set, prior):
    det = fio.DetectionSet(prior.keypoint_names, {i.id: i.observations for i in noisy_set.instances})
    fio.write_detections(tmp_path / "k.json", det)
    back = fio.read_detections(tmp_path / "k.json", prior.keypoint_names)
    assert back.instances == det.instances


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
def test_floats_serialize_exactly(values):
    doc = fio.loads(fio.dumps("carshape.test", {"x": values}), "carshape.test")
    assert [float(v).hex() for v in doc["x"]] == [float(v).hex() for v in values]


def test_rejects_unknown_major_version(tmp_path, prior):
    fio.write_prior(tmp_path / "p.json", prior)
    doc = json.loads((tmp_path / "p.json").read_text())
    doc["format_version"] = "1.7"
    (tmp_path / "minor.json").write_text(json.dumps(doc))
    fio.read_prior(tmp_path / "minor.json")
    doc["format_version"] = "2.0"
    (tmp_path / "major.json").write_text(json.dumps(doc))
    with pytest.raises(fio.FormatError, match="format_version"):
        fio.read_prior(tmp_path / "major.json")


def test_rejects_wrong_kind(tmp_path, prior):
    fio.write_prior(tmp_path / "p.json", prior)
    with pytest.raises(fio.FormatError, match="expected format"):
        fio.read_poses(tmp_path / "p.json")


def test_parse_error_reports_position(tmp_path):
    (tmp_path / "bad.json").write_text('{"format": "carshape.poses",\n "x": }')
    with pytest.raises(fio.FormatError, match=r"bad.json:2:"):
        fio.read_poses(tmp_path / "bad.json")


def test_unknown_keypoint_name_is_schema_error(tmp_path, prior):
    doc = {"keypoint_names": ["wheel_front_left", "spoiler"],
           "instances": [{"id": "a", "keypoints": {"spoiler": {"uv": [1, 2]}}}]}
    fio.write_json(tmp_path / "k.json", "carshape.keypoints", doc)
    with pytest.raises(fio.FormatError, match="spoiler"):
        fio.read_detections(tmp_path / "k.json", prior.keypoint_names)


def test_config_unknown_field(tmp_path):
    fio.write_json(tmp_path / "c.json", "carshape.config", {"irls": {"mu9": 0.1}})
    with pytest.raises(fio.FormatError, match="mu9"):
        fio.read_config(tmp_path / "c.json")


def test_config_checks_referenced_files(tmp_path):
    cfg = fio.PipelineConfig(prior="missing.json")
    with pytest.raises(fio.FormatError, match="does not exist"):
        cfg.check_paths(tmp_path)


def test_obj_round_trip(tmp_path, prior):
    topo = car_category().topology
    fio.write_obj(tmp_path / "w.obj", prior.mean, topo, "mean")
    V, E = fio.read_obj(tmp_path / "w.obj")
    np.testing.assert_array_equal(V, prior.mean)
    assert {tuple(sorted(e)) for e in E.tolist()} == {tuple(sorted(e)) for e in topo.edges}


def test_no_temp_files_left(tmp_path):
    fio.write_json(tmp_path / "a.json", "carshape.test", {})
    assert [p.name for p in tmp_path.iterdir()] == ["a.json"]


def test_pose_dict_round_trip():
    p = QuatPose((0.5, 0.5, -0.5, 0.5), (1.0, 2.0, 3.0))
    assert fio.pose_from_dict(json.loads(json.dumps(fio.pose_to_dict(p)))) == p
