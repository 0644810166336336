"""Constant-velocity Kalman filter in (cx, cy, aspect, height) space.

The state is the measurement plus its per-frame velocities. Process and
measurement noise scale with the box height, so the filter behaves the same
for near and far pedestrians.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BoundingBox

CHI2_95_4DOF = 9.4877

_NDIM = 4
_MOTION = np.eye(2 * _NDIM)
_MOTION[:_NDIM, _NDIM:] = np.eye(_NDIM)
_PROJECT = np.eye(_NDIM, 2 * _NDIM)

STD_POSITION = 1.0 / 20
STD_VELOCITY = 1.0 / 160


@dataclass(frozen=True)
class KalmanState:
    mean: np.ndarray
    covariance: np.ndarray

    def box(self) -> BoundingBox:
        return BoundingBox.from_xyah(self.mean[:_NDIM])


def initiate(box: BoundingBox) -> KalmanState:
    if box.area() <= 0:
        raise ValueError("cannot initiate a track from a zero-area box")
    z = box.to_xyah()
    mean = np.concatenate([z, np.zeros(_NDIM)])
    h = z[3]
    std = np.array([
        2 * STD_POSITION * h, 2 * STD_POSITION * h, 1e-2, 2 * STD_POSITION * h,
        10 * STD_VELOCITY * h, 10 * STD_VELOCITY * h, 1e-5, 10 * STD_VELOCITY * h,
    ])
    return KalmanState(mean, np.diag(std ** 2))


def predict(state: KalmanState) -> KalmanState:
    h = state.mean[3]
    std = np.array([
        STD_POSITION * h, STD_POSITION * h, 1e-2, STD_POSITION * h,
        STD_VELOCITY * h, STD_VELOCITY * h, 1e-5, STD_VELOCITY * h,
    ])
    mean = _MOTION @ state.mean
    cov = _MOTION @ state.covariance @ _MOTION.T + np.diag(std ** 2)
    return KalmanState(mean, 0.5 * (cov + cov.T))


def _project(state: KalmanState):
    h = state.mean[3]
    std = np.array([STD_POSITION * h, STD_POSITION * h, 1e-1, STD_POSITION * h])
    mean = _PROJECT @ state.mean
    cov = _PROJECT @ state.covariance @ _PROJECT.T + np.diag(std ** 2)
    return mean, cov


def update(state: KalmanState, box: BoundingBox) -> KalmanState:
    proj_mean, proj_cov = _project(state)
    try:
        chol = np.linalg.cholesky(proj_cov)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("innovation covariance is not positive definite") from exc
    cross = state.covariance @ _PROJECT.T  # (8, 4)
    # gain = cross @ proj_cov^-1, solved through the Cholesky factor
    gain = np.linalg.solve(chol.T, np.linalg.solve(chol, cross.T)).T
    innovation = box.to_xyah() - proj_mean
    mean = state.mean + gain @ innovation
    cov = state.covariance - gain @ proj_cov @ gain.T
    return KalmanState(mean, 0.5 * (cov + cov.T))


def squared_mahalanobis(state: KalmanState, boxes, only_position: bool = True) -> np.ndarray:
    """Squared Mahalanobis distance of each box measurement to the projected state."""
    mean, cov = _project(state)
    z = np.array([b.to_xyah() for b in boxes]).reshape(-1, _NDIM)
    if only_position:
        mean, cov, z = mean[:2], cov[:2, :2], z[:, :2]
    d = z - mean
    chol = np.linalg.cholesky(cov)
    w = np.linalg.solve(chol, d.T)
    return np.sum(w * w, axis=0)


def gate_cost_matrix(costs, states, detections, gate: float = CHI2_95_4DOF,
                     only_position: bool = True) -> np.ndarray:
    """Set cost[i, j] to inf where detection i is implausibly far from state j.

    Rows are detections, columns are trajectory states.
    """
    costs = np.array(costs, dtype=float)
    if costs.shape != (len(detections), len(states)):
        raise ValueError(f"cost shape {costs.shape} does not match "
                         f"{len(detections)} detections x {len(states)} states")
    if np.isinf(gate) or costs.size == 0:
        return costs
    boxes = [d.box if hasattr(d, "box") else d for d in detections]
    for j, st in enumerate(states):
        dist = squared_mahalanobis(st, boxes, only_position)
        costs[dist > gate, j] = np.inf
    return costs
