"""Object-category structure: keypoint names, quad topology and symmetry.

This metadata is supplied, not learned.  The built-in car definition uses
14 keypoints: four wheel centers, two headlights, two taillights, two
side-view mirrors and four rooftop corners.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import QuadMesh

CAR_KEYPOINTS = (
    "wheel_front_left",
    "wheel_front_right",
    "wheel_back_left",
    "wheel_back_right",
    "headlight_left",
    "headlight_right",
    "taillight_left",
    "taillight_right",
    "mirror_left",
    "mirror_right",
    "roof_front_left",
    "roof_front_right",
    "roof_back_left",
    "roof_back_right",
)


@dataclass(frozen=True)
class Category:
    """Known structure of an object class.

    Attributes:
        keypoint_names: ordered names, one per keypoint slot.
        topology: quad mesh over the keypoints (with per-face flags).
        symmetry_pairs: (left, right) index pairs mirrored by the medial plane.
        on_plane: indices lying on the medial plane.
        front, back, top, bottom: index groups that fix the sign of the
            forward and up axes when a reconstruction is canonicalized.
        reference_length: mean keypoint-wireframe length in meters used to
            give an orthographic reconstruction metric scale.
    """

    keypoint_names: tuple
    topology: QuadMesh
    symmetry_pairs: tuple
    on_plane: tuple = ()
    front: tuple = ()
    back: tuple = ()
    top: tuple = ()
    bottom: tuple = ()
    reference_length: float = 1.0

    def __post_init__(self):
        K = len(self.keypoint_names)
        if len(set(self.keypoint_names)) != K:
            raise ValueError("keypoint names must be unique")
        if self.topology.vertex_count != K:
            raise ValueError("topology vertex count does not match keypoint count")
        pairs = tuple((int(l), int(r)) for l, r in self.symmetry_pairs)
        on_plane = tuple(int(i) for i in self.on_plane)
        used = [i for p in pairs for i in p] + list(on_plane)
        if sorted(used) != list(range(K)):
            raise ValueError("symmetry pairs and on-plane indices must partition the keypoints")
        for i, nb in enumerate(self.topology.neighbors):
            if not nb:
                raise ValueError(f"keypoint {self.keypoint_names[i]!r} has no mesh neighbor")
        if not self.reference_length > 0:
            raise ValueError("reference_length must be positive")
        object.__setattr__(self, "symmetry_pairs", pairs)
        object.__setattr__(self, "on_plane", on_plane)
        for name in ("front", "back", "top", "bottom"):
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))

    @property
    def size(self) -> int:
        return len(self.keypoint_names)

    def index(self, name: str) -> int:
        try:
            return self.keypoint_names.index(name)
        except ValueError:
            raise KeyError(f"unknown keypoint name {name!r}") from None

    @property
    def left(self) -> np.ndarray:
        return np.array([l for l, _ in self.symmetry_pairs], dtype=int)

    @property
    def right(self) -> np.ndarray:
        return np.array([r for _, r in self.symmetry_pairs], dtype=int)

    def to_dict(self) -> dict:
        return {
            "keypoint_names": list(self.keypoint_names),
            "faces": [list(f) for f in self.topology.faces],
            "ground_parallel": list(self.topology.ground_parallel),
            "rectangular": list(self.topology.rectangular),
            "symmetry_pairs": [list(p) for p in self.symmetry_pairs],
            "on_plane": list(self.on_plane),
            "front": list(self.front),
            "back": list(self.back),
            "top": list(self.top),
            "bottom": list(self.bottom),
            "reference_length": self.reference_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Category":
        names = tuple(d["keypoint_names"])
        mesh = QuadMesh(len(names), tuple(tuple(f) for f in d["faces"]),
                        tuple(d.get("ground_parallel", ())), tuple(d.get("rectangular", ())))
        return cls(names, mesh, tuple(tuple(p) for p in d["symmetry_pairs"]),
                   tuple(d.get("on_plane", ())), tuple(d.get("front", ())),
                   tuple(d.get("back", ())), tuple(d.get("top", ())),
                   tuple(d.get("bottom", ())), float(d.get("reference_length", 1.0)))


def car_category() -> Category:
    faces = (
        (0, 1, 3, 2),      # wheel centers
        (10, 11, 13, 12),  # roof
        (4, 5, 11, 10),    # front: headlights + front roof corners
        (6, 7, 13, 12),    # back: taillights + back roof corners
        (0, 2, 6, 4),      # left lower side
        (1, 3, 7, 5),      # right lower side
        (8, 10, 12, 6),    # left upper side
        (9, 11, 13, 7),    # right upper side
    )
    mesh = QuadMesh(
        14, faces,
        ground_parallel=(True, False, False, False, False, False, False, False),
        rectangular=(True, True, False, False, False, False, False, False),
    )
    return Category(
        keypoint_names=CAR_KEYPOINTS,
        topology=mesh,
        symmetry_pairs=((0, 1), (2, 3), (4, 5), (6, 7), (8, 9), (10, 11), (12, 13)),
        front=(0, 1, 4, 5),
        back=(2, 3, 6, 7),
        top=(10, 11, 12, 13),
        bottom=(0, 1, 2, 3),
        reference_length=4.0,
    )


def car_mean_shape() -> np.ndarray:
    """Reference sedan wireframe in the canonical frame (meters)."""
    half = {
        "wheel_front": (0.80, 1.30, 0.35),
        "wheel_back": (0.80, -1.30, 0.35),
        "headlight": (0.65, 2.00, 0.70),
        "taillight": (0.70, -2.00, 0.80),
        "mirror": (0.95, 0.60, 1.00),
        "roof_front": (0.65, 0.30, 1.50),
        "roof_back": (0.65, -1.00, 1.50),
    }
    rows = []
    for part in half.values():
        x, y, z = part
        rows.append((-x, y, z))
        rows.append((x, y, z))
    return np.array(rows)
