"""File formats: versioned JSON documents and OBJ wireframes.

Every JSON document carries ``format`` (a kind tag) and ``format_version``
(``"major.minor"``).  Readers accept any minor version of a known major.
Floats are written with Python's shortest round-trip repr, so reading back
reproduces every value bit for bit.  Writes are atomic.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .category import Category
from .energy import EnergyConfig
from .geometry import Intrinsics, Plane, QuadMesh, QuatPose
from .pose import IrlsConfig, KeypointObservation, PoseResult
from .shape_adjust import InstanceReconstruction
from .shape_prior import AnnotationSet, EMConfig, LatentCoeffs, ShapePrior
from .synth import SynthConfig, SynthDataset

FORMAT_VERSION = "1.0"
CONFIG_ENV = "CARSHAPE_CONFIG"


class FormatError(ValueError):
    """A file does not parse or does not match its schema."""


# --------------------------------------------------------------------------
# Low-level helpers.

def _clean(x):
    """Convert numpy containers and non-finite floats to JSON-ready values."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if np.isfinite(x) else None
    return x


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps(kind: str, payload: dict) -> str:
    doc = {"format": kind, "format_version": FORMAT_VERSION}
    doc.update(payload)
    return json.dumps(_clean(doc), indent=1, allow_nan=False) + "\n"


def write_json(path, kind: str, payload: dict) -> None:
    atomic_write_text(path, dumps(kind, payload))


def loads(text: str, kind: str, source: str = "<string>") -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{source}: top level must be an object")
    if doc.get("format") != kind:
        raise FormatError(f"{source}: expected format {kind!r}, found {doc.get('format')!r}")
    version = str(doc.get("format_version", ""))
    major = version.split(".")[0]
    if major != FORMAT_VERSION.split(".")[0]:
        raise FormatError(f"{source}: unsupported format_version {version!r} "
                          f"(this reader handles {FORMAT_VERSION.split('.')[0]}.x)")
    return doc


def read_json(path, kind: str) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from None
    return loads(text, kind, str(path))


def _field(doc, key, where):
    try:
        return doc[key]
    except (KeyError, TypeError):
        raise FormatError(f"{where}: missing field {key!r}") from None


def _array(value, shape, where):
    try:
        a = np.array([np.nan if v is None else v for v in np.ravel(np.array(value, dtype=object))],
                     dtype=float).reshape(shape)
    except (TypeError, ValueError):
        raise FormatError(f"{where}: expected numbers with shape {shape}") from None
    return a


# --------------------------------------------------------------------------
# Shape prior.

def prior_to_dict(prior: ShapePrior) -> dict:
    return {
        "category": prior.category.to_dict(),
        "mean": prior.mean,
        "basis": prior.basis,
        "eigenvalues": prior.eigenvalues,
        "sigma2": prior.sigma2,
        "medial_plane": prior.medial_plane.to_dict(),
        "dim_priors": prior.dim_priors,
    }


def prior_from_dict(doc: dict, where: str = "prior") -> ShapePrior:
    try:
        cat = Category.from_dict(_field(doc, "category", where))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}.category: {exc}") from None
    K = cat.size
    ev = _array(_field(doc, "eigenvalues", where), (-1,), f"{where}.eigenvalues")
    try:
        return ShapePrior(
            mean=_array(_field(doc, "mean", where), (K, 3), f"{where}.mean"),
            basis=_array(_field(doc, "basis", where), (ev.size, K, 3), f"{where}.basis"),
            eigenvalues=ev,
            sigma2=float(_field(doc, "sigma2", where)),
            category=cat,
            medial_plane=Plane.from_dict(_field(doc, "medial_plane", where)),
            dim_priors=_array(_field(doc, "dim_priors", where), (3,), f"{where}.dim_priors"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: {exc}") from None


def write_prior(path, prior: ShapePrior) -> None:
    write_json(path, "carshape.prior", prior_to_dict(prior))


def read_prior(path) -> ShapePrior:
    return prior_from_dict(read_json(path, "carshape.prior"), str(path))


# --------------------------------------------------------------------------
# Intrinsics.

def write_intrinsics(path, K: Intrinsics) -> None:
    write_json(path, "carshape.intrinsics", K.to_dict())


def read_intrinsics(path) -> Intrinsics:
    doc = read_json(path, "carshape.intrinsics")
    try:
        return Intrinsics.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# Annotations (prior learning) and detections (inference).

def annotations_to_dict(data: AnnotationSet) -> dict:
    inst = []
    for m, iid in enumerate(data.ids):
        kps = {}
        for k, name in enumerate(data.keypoint_names):
            if data.visible[m, k]:
                kps[name] = [data.coords[m, k, 0], data.coords[m, k, 1], True]
        inst.append({"id": iid, "keypoints": kps})
    return {"keypoint_names": list(data.keypoint_names), "instances": inst}


def annotations_from_dict(doc: dict, where: str = "annotations") -> AnnotationSet:
    names = tuple(_field(doc, "keypoint_names", where))
    index = {n: k for k, n in enumerate(names)}
    instances = _field(doc, "instances", where)
    M, K = len(instances), len(names)
    Y = np.full((M, K, 2), np.nan)
    vis = np.zeros((M, K), dtype=bool)
    ids = []
    for m, inst in enumerate(instances):
        w = f"{where}.instances[{m}]"
        ids.append(str(_field(inst, "id", w)))
        for name, val in _field(inst, "keypoints", w).items():
            if name not in index:
                raise FormatError(f"{w}.keypoints: unknown keypoint name {name!r}")
            if not isinstance(val, (list, tuple)) or len(val) not in (2, 3):
                raise FormatError(f"{w}.keypoints.{name}: expected [u, v] or [u, v, visible]")
            visible = bool(val[2]) if len(val) == 3 else True
            if visible:
                if val[0] is None or val[1] is None:
                    raise FormatError(f"{w}.keypoints.{name}: visible keypoint needs coordinates")
                Y[m, index[name]] = (float(val[0]), float(val[1]))
                vis[m, index[name]] = True
    if len(set(ids)) != len(ids):
        raise FormatError(f"{where}: duplicate instance ids")
    try:
        return AnnotationSet(Y, vis, names, tuple(ids))
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from None


def write_annotations(path, data: AnnotationSet) -> None:
    write_json(path, "carshape.annotations", annotations_to_dict(data))


def read_annotations(path) -> AnnotationSet:
    return annotations_from_dict(read_json(path, "carshape.annotations"), str(path))


@dataclass
class DetectionSet:
    """Per-instance keypoint observations keyed by instance id."""

    keypoint_names: tuple
    instances: dict


def detections_to_dict(det: DetectionSet) -> dict:
    out = []
    for iid, obs in det.instances.items():
        kps = {}
        for o in obs:
            kps[det.keypoint_names[o.index]] = {"uv": list(o.uv), "w_cnn": o.w_cnn, "visible": o.visible}
        out.append({"id": iid, "keypoints": kps})
    return {"keypoint_names": list(det.keypoint_names), "instances": out}


def detections_from_dict(doc: dict, keypoint_names=None, where: str = "keypoints") -> DetectionSet:
    names = tuple(_field(doc, "keypoint_names", where))
    if keypoint_names is not None:
        unknown = [n for n in names if n not in keypoint_names]
        if unknown:
            raise FormatError(f"{where}.keypoint_names: unknown keypoint names {unknown}")
        names_ref = tuple(keypoint_names)
    else:
        names_ref = names
    index = {n: k for k, n in enumerate(names_ref)}
    out = {}
    for m, inst in enumerate(_field(doc, "instances", where)):
        w = f"{where}.instances[{m}]"
        iid = str(_field(inst, "id", w))
        if iid in out:
            raise FormatError(f"{w}: duplicate instance id {iid!r}")
        obs = []
        for name, val in _field(inst, "keypoints", w).items():
            if name not in index:
                raise FormatError(f"{w}.keypoints: unknown keypoint name {name!r}")
            try:
                uv = tuple(np.nan if v is None else float(v) for v in _field(val, "uv", f"{w}.keypoints.{name}"))
                obs.append(KeypointObservation(index[name], uv, float(val.get("w_cnn", 1.0)),
                                               bool(val.get("visible", True))))
            except (TypeError, ValueError, AttributeError) as exc:
                raise FormatError(f"{w}.keypoints.{name}: {exc}") from None
        out[iid] = sorted(obs, key=lambda o: o.index)
    return DetectionSet(names_ref, out)


def write_detections(path, det: DetectionSet) -> None:
    write_json(path, "carshape.keypoints", detections_to_dict(det))


def read_detections(path, keypoint_names=None) -> DetectionSet:
    return detections_from_dict(read_json(path, "carshape.keypoints"), keypoint_names, str(path))


# --------------------------------------------------------------------------
# Pose records.

def pose_to_dict(pose: QuatPose) -> dict:
    return {"q": list(pose.q), "t": list(pose.t)}


def pose_from_dict(d: dict, where: str = "pose") -> QuatPose:
    try:
        return QuatPose(tuple(float(v) for v in d["q"]), tuple(float(v) for v in d["t"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: {exc}") from None


def pose_record(iid: str, res: PoseResult) -> dict:
    return {"id": iid, "status": "ok", **pose_to_dict(res.pose), "weights": res.weights,
            "residuals": res.residuals, "iterations": res.iterations, "cost": res.cost}


def failure_record(iid: str, reason: str) -> dict:
    return {"id": iid, "status": "failed", "reason": reason}


def pose_result_from_record(rec: dict, where: str = "pose") -> PoseResult:
    return PoseResult(pose_from_dict(rec, where),
                      _array(_field(rec, "weights", where), (-1,), f"{where}.weights"),
                      _array(_field(rec, "residuals", where), (-1,), f"{where}.residuals"),
                      int(_field(rec, "iterations", where)), float(_field(rec, "cost", where)))


def write_poses(path, records: list) -> None:
    write_json(path, "carshape.poses", {"instances": records})


def read_poses(path) -> dict:
    doc = read_json(path, "carshape.poses")
    return {str(_field(r, "id", f"{path}.instances[{i}]")): r
            for i, r in enumerate(_field(doc, "instances", str(path)))}


# --------------------------------------------------------------------------
# Reconstructions.

def reconstruction_record(iid: str, rec: InstanceReconstruction) -> dict:
    return {
        "id": iid, "status": "ok",
        "lambda": rec.lam.values,
        "planes": [p.to_dict() for p in rec.planes],
        "keypoints3d": rec.keypoints3d,
        "kp_weights": rec.kp_weights,
        "energy_breakdown": rec.energy_breakdown,
        "initial_breakdown": rec.initial_breakdown,
        "diverged": rec.diverged,
        "rounds": rec.rounds,
    }


def reconstruction_from_record(d: dict, where: str = "reconstruction") -> InstanceReconstruction:
    lam = LatentCoeffs(_array(_field(d, "lambda", where), (-1,), f"{where}.lambda"))
    return InstanceReconstruction(
        lam=lam,
        planes=[Plane.from_dict(p) for p in _field(d, "planes", where)],
        keypoints3d=_array(_field(d, "keypoints3d", where), (-1, 3), f"{where}.keypoints3d"),
        kp_weights=_array(_field(d, "kp_weights", where), (-1,), f"{where}.kp_weights"),
        energy_breakdown=dict(_field(d, "energy_breakdown", where)),
        initial_breakdown=dict(d.get("initial_breakdown", {})),
        diverged=bool(d.get("diverged", False)),
        rounds=int(d.get("rounds", 0)),
    )


def write_reconstructions(path, records: list) -> None:
    write_json(path, "carshape.reconstructions", {"instances": records})


def read_reconstructions(path) -> dict:
    doc = read_json(path, "carshape.reconstructions")
    return {str(r["id"]): r for r in _field(doc, "instances", str(path))}


# --------------------------------------------------------------------------
# Synthetic ground truth.

def ground_truth_record(inst) -> dict:
    return {
        "id": inst.id, **pose_to_dict(inst.pose),
        "init": pose_to_dict(inst.init_pose),
        "lambda": inst.lam, "keypoints3d": inst.shape,
        "bbox": list(inst.bbox), "azimuth": inst.azimuth,
        "outliers": inst.outliers, "occluded": inst.occluded,
    }


def write_ground_truth(path, ds: SynthDataset) -> None:
    write_json(path, "carshape.ground_truth",
               {"generator": ds.config.to_dict(), "instances": [ground_truth_record(i) for i in ds.instances]})


def read_ground_truth(path) -> dict:
    doc = read_json(path, "carshape.ground_truth")
    return {str(r["id"]): r for r in _field(doc, "instances", str(path))}


# --------------------------------------------------------------------------
# OBJ wireframes.

def obj_text(X, topology: QuadMesh, name: str = "") -> str:
    lines = [f"# carshape wireframe {name}".rstrip()]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(X, dtype=float).tolist()]
    lines += [f"l {i + 1} {j + 1}" for i, j in topology.edges]
    return "\n".join(lines) + "\n"


def write_obj(path, X, topology: QuadMesh, name: str = "") -> None:
    atomic_write_text(path, obj_text(X, topology, name))


def read_obj(path):
    """Vertices (n, 3) and 0-based edges (m, 2) from an OBJ with v/l lines."""
    verts, edges = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(v) for v in parts[1:4]])
            elif parts[0] == "l":
                idx = [int(v) - 1 for v in parts[1:]]
                edges.extend(zip(idx[:-1], idx[1:]))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed {parts[0]!r} line") from None
    return np.array(verts).reshape(-1, 3), np.array(edges, dtype=int).reshape(-1, 2)


# --------------------------------------------------------------------------
# Pipeline configuration.

@dataclass
class PipelineConfig:
    """Everything the CLI needs; every section is optional in the file."""

    prior: str | None = None
    annotations: str | None = None
    keypoints: str | None = None
    intrinsics_path: str | None = None
    output_dir: str | None = None
    basis_size: int = 5
    log_level: str = "INFO"
    intrinsics: Intrinsics | None = None
    irls: IrlsConfig = field(default_factory=IrlsConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    em: EMConfig = field(default_factory=EMConfig)

    def __post_init__(self):
        if self.basis_size < 1:
            raise ValueError("basis_size must be at least 1")

    def check_paths(self, base: Path | None = None) -> None:
        for name in ("prior", "annotations", "keypoints", "intrinsics_path"):
            p = getattr(self, name)
            if p is not None and not (Path(base or ".") / p).exists():
                raise FormatError(f"config: {name} file {p!r} does not exist")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)
             if f.name not in ("intrinsics", "irls", "energy", "synth", "em")}
        d["intrinsics"] = self.intrinsics.to_dict() if self.intrinsics else None
        for name in ("irls", "energy", "synth", "em"):
            d[name] = asdict(getattr(self, name))
        return d


_SECTIONS = {"irls": IrlsConfig, "energy": EnergyConfig, "synth": SynthConfig, "em": EMConfig}


def _section(cls, d, where):
    if not isinstance(d, dict):
        raise FormatError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        raise FormatError(f"{where}: unknown fields {extra}")
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{where}: {exc}") from None


def config_from_dict(doc: dict, where: str = "config") -> PipelineConfig:
    doc = {k: v for k, v in doc.items() if k not in ("format", "format_version")}
    known = {f.name for f in fields(PipelineConfig)}
    extra = sorted(set(doc) - known)
    if extra:
        raise FormatError(f"{where}: unknown fields {extra}")
    kw = {}
    for k, v in doc.items():
        if k in _SECTIONS:
            kw[k] = _section(_SECTIONS[k], v, f"{where}.{k}")
        elif k == "intrinsics":
            kw[k] = None if v is None else Intrinsics.from_dict(v)
        else:
            kw[k] = v
    try:
        return PipelineConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{where}: {exc}") from None


def write_config(path, cfg: PipelineConfig) -> None:
    write_json(path, "carshape.config", cfg.to_dict())


def read_config(path) -> PipelineConfig:
    return config_from_dict(read_json(path, "carshape.config"), str(path))
