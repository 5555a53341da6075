"""Vehicle pose and shape from single-image 2D keypoints with a learned shape prior."""
from .category import Category, car_category, car_mean_shape
from .energy import EnergyConfig, EnergyModel, ShapeState, e_dim, e_lap, e_planar, e_reproj, e_sym, e_total
from .geometry import (BehindCameraError, DegenerateInputError, Intrinsics, OrthoCam, Plane, QuadMesh,
                       QuatPose, ortho_project, project, quat_to_rotation)
from .metrics import aop, apk, hausdorff, mean_abs_angle_error
from .pose import (IrlsConfig, KeypointObservation, PoseResult, irls_pose, pnp_weighted,
                   visibility_prior, weight_init, weight_update)
from .shape_adjust import InstanceReconstruction, shape_adjust
from .shape_prior import (AnnotationSet, EMConfig, LatentCoeffs, ShapePrior, instantiate, nrsfm_fit,
                          variance_explained)
from .synth import SynthConfig, default_car_prior, synth_generate

__version__ = "0.1.0"
