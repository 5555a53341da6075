"""Shape-aware adjustment: fit basis coefficients and face planes at a fixed pose."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .energy import EnergyConfig, EnergyModel, ShapeState, mesh_planes
from .geometry import Intrinsics, Plane, QuatPose
from .lm import levenberg_marquardt
from .pose import (IrlsConfig, normalized_errors, observation_arrays, visibility_prior,
                   weight_init, weight_update)
from .shape_prior import LatentCoeffs, ShapePrior, instantiate

log = logging.getLogger(__name__)


@dataclass
class InstanceReconstruction:
    """Result of shape adjustment.

    ``energy_breakdown`` holds the final unweighted term values and the
    weighted total; ``initial_breakdown`` the same at the starting state,
    both under the final keypoint weights.
    """

    lam: LatentCoeffs
    planes: list
    keypoints3d: np.ndarray
    kp_weights: np.ndarray
    energy_breakdown: dict
    initial_breakdown: dict = field(default_factory=dict)
    diverged: bool = False
    rounds: int = 0
    cost_history: list = field(default_factory=list)


def _reproj_errors(model: EnergyModel, X):
    Xc = X @ model.pose.R.T + model.pose.translation
    z = np.maximum(Xc[:, 2], 1e-9)
    K = model.K_cam
    proj = np.stack([(K.fx * Xc[:, 0] + K.skew * Xc[:, 1]) / z + K.cx, K.fy * Xc[:, 1] / z + K.cy], 1)
    return np.linalg.norm(proj - model.uv, axis=1)


def shape_adjust(prior: ShapePrior, obs, pose: QuatPose, K_cam: Intrinsics,
                 config: EnergyConfig | None = None, weights=None,
                 irls: IrlsConfig | None = None) -> InstanceReconstruction:
    """Minimize E_total over (lambda, face planes) with the pose held fixed.

    The first solve starts at lambda = 0 with the faces' best-fit planes of
    the mean shape.  Each of ``config.irls_rounds`` rounds then updates the
    keypoint weights with the pose-stage rule and re-solves from whichever
    of the current state and the starting state is cheaper under the new
    weights.  Only observed, visible keypoints enter the reprojection term.

    Args:
        weights: initial keypoint weights (e.g. the final pose-stage
            weights); by default they are initialized from detector
            confidence and ray-cast visibility at ``pose``.
        irls: hyperparameters of the weight update (pose-stage defaults).
    """
    config = config or EnergyConfig()
    irls = irls or IrlsConfig()
    Kn, N = prior.n_keypoints, prior.n_basis
    uv, w_cnn, vis, present = observation_arrays(obs, Kn)
    active = present & vis & (w_cnn > 0)
    if weights is None:
        w_vis = visibility_prior(prior.mean, prior.topology, pose, irls.v_occ)
        w = weight_init(w_cnn, w_vis, irls.mu0, irls.weight_floor)
    else:
        w = np.clip(np.asarray(weights, dtype=float), irls.weight_floor, 1.0)
    w = np.where(active, w, 0.0)

    start = ShapeState(np.zeros(N), mesh_planes(prior.mean, prior.topology))
    model = EnergyModel(prior, obs, pose, K_cam, w, config)
    state = start
    diverged = False
    history = []
    for rnd in range(config.irls_rounds + 1):
        if rnd > 0:
            X = instantiate(prior, state.lam)
            err = _reproj_errors(model, X)
            e = normalized_errors(err, active, irls.error_floor)
            w_vis = visibility_prior(X, prior.topology, pose, irls.v_occ)
            score = e if irls.literal_update else 1.0 - e
            w = np.where(active, weight_update(w, score, w_vis, irls.mu1, irls.mu2,
                                               irls.weight_floor), 0.0)
            model = EnergyModel(prior, obs, pose, K_cam, w, config)
            if model.total(start)[0] < model.total(state)[0]:
                state = start
        res = levenberg_marquardt(model.residuals, state.vector, config.nls_max_iters, config.nls_tol)
        history.append(res.history)
        diverged |= res.diverged
        state = ShapeState.from_vector(res.x, N)
    if diverged:
        log.warning("shape adjustment: solver stalled with a large gradient; returning best state")
    lam = LatentCoeffs(state.lam)
    return InstanceReconstruction(
        lam=lam,
        planes=[Plane(tuple(p[:3]), p[3]) for p in state.planes],
        keypoints3d=instantiate(prior, lam),
        kp_weights=w,
        energy_breakdown=model.breakdown(state),
        initial_breakdown=model.breakdown(start),
        diverged=diverged,
        rounds=config.irls_rounds,
        cost_history=history,
    )
