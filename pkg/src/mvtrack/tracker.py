"""Online tracker with three-stage association and similarity-guided feature fusion.

Per frame:

1. appearance: cosine distance between detections and active/lost
   trajectories, Kalman-gated, assigned with threshold ``kappa1``;
2. IoU: leftover detections vs. leftover *active* trajectories (predicted
   boxes), threshold ``kappa2``;
3. IoU: leftover detections vs. trajectories created in the previous frame
   (unactivated), threshold ``kappa3``.

Matched trajectories fuse the new embedding into their representation with a
weight derived from its agreement with the last ``Q`` embeddings.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import motion
from .assignment import solve_with_threshold
from .core import BoundingBox, Detection, iou_matrix, l2_normalize, normalize_rows


class Status(str, enum.Enum):
    UNACTIVATED = "unactivated"
    ACTIVE = "active"
    LOST = "lost"
    DELETED = "deleted"


ALLOWED_TRANSITIONS = {
    Status.UNACTIVATED: {Status.ACTIVE, Status.DELETED},
    Status.ACTIVE: {Status.ACTIVE, Status.LOST},
    Status.LOST: {Status.LOST, Status.ACTIVE, Status.DELETED},
    Status.DELETED: set(),
}


@dataclass(frozen=True)
class TrackerConfig:
    kappa1: float = 0.3
    kappa2: float = 0.5
    kappa3: float = 0.7
    max_missing: int = 15  # lambda: frames a trajectory may go unmatched before deletion
    memory_length: int = 30  # Q
    beta: str = "adaptive"  # "adaptive" or "fixed:<value>"
    gate_threshold: float = motion.CHI2_95_4DOF
    activate_first_frame: bool = True

    def __post_init__(self):
        for name in ("kappa1", "kappa2", "kappa3"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.max_missing < 1 or self.memory_length < 1:
            raise ValueError("max_missing and memory_length must be >= 1")
        self.fixed_beta  # validates the beta setting

    @property
    def fixed_beta(self) -> float | None:
        if self.beta == "adaptive":
            return None
        if self.beta.startswith("fixed:"):
            b = float(self.beta.split(":", 1)[1])
            if not 0.0 <= b <= 1.0:
                raise ValueError(f"fixed beta must lie in [0, 1], got {b}")
            return b
        raise ValueError(f"beta must be 'adaptive' or 'fixed:<value>', got {self.beta!r}")


PRESETS = {
    "default": {},
    # crowded scenes: stricter appearance and unactivated-trajectory thresholds
    "mot20": {"kappa1": 0.25, "kappa3": 0.5},
}


def preset(name: str, **overrides) -> TrackerConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrackerConfig(**{**PRESETS[name], **overrides})


def adaptive_beta(z_t, memory, q: int) -> float:
    """Fusion weight: mean cosine of ``z_t`` against the last ``q`` embeddings, floored at 0.

    An empty memory gives 1 so the first embedding defines the representation.
    """
    recent = list(memory)[-q:] if q > 0 else []
    if not recent:
        return 1.0
    z = np.asarray(z_t, dtype=float)
    m = normalize_rows(np.asarray(recent, dtype=float))
    zn = l2_normalize(z)[0]
    return float(min(1.0, max(0.0, float(np.mean(m @ zn)))))


def fuse(f_prev, z_t, beta: float) -> np.ndarray:
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    f = (1.0 - beta) * np.asarray(f_prev, dtype=float) + beta * np.asarray(z_t, dtype=float)
    return l2_normalize(f)[0]


@dataclass
class Trajectory:
    id: int
    status: Status
    kalman: motion.KalmanState
    fused: np.ndarray
    memory: deque
    last_box: BoundingBox
    missing_frames: int = 0
    history: list = field(default_factory=list)
    status_log: list = field(default_factory=list)

    def set_status(self, new: Status) -> None:
        if new not in ALLOWED_TRANSITIONS[self.status]:
            raise RuntimeError(f"illegal transition {self.status.value} -> {new.value} "
                               f"for trajectory {self.id}")
        if new != self.status:
            self.status_log.append((self.status, new))
        self.status = new

    def predicted_box(self) -> BoundingBox:
        return self.kalman.box()


@dataclass
class FrameResult:
    frame: int
    step_matches: dict  # step -> list of (detection index, trajectory id)
    created: list  # trajectory ids created this frame
    deleted: list  # trajectory ids deleted this frame
    outputs: list  # (trajectory id, box) of active trajectories

    def all_matches(self):
        return [m for step in (1, 2, 3) for m in self.step_matches.get(step, [])]


class Tracker:
    """One instance per sequence; feed frames in order through :meth:`step`."""

    def __init__(self, config: TrackerConfig | None = None):
        self.config = config or TrackerConfig()
        self.trajectories: list[Trajectory] = []
        self.frame_count = 0
        self._next_id = 1

    @property
    def live(self) -> list[Trajectory]:
        return [t for t in self.trajectories if t.status != Status.DELETED]

    def _beta(self, traj: Trajectory, z) -> float:
        fixed = self.config.fixed_beta
        if fixed is not None:
            return fixed if traj.memory else 1.0
        return adaptive_beta(z, traj.memory, self.config.memory_length)

    def _absorb(self, traj: Trajectory, det: Detection, frame: int) -> None:
        traj.kalman = motion.update(traj.kalman, det.box)
        z = l2_normalize(det.embedding)[0]
        traj.fused = fuse(traj.fused, z, self._beta(traj, z))
        traj.memory.append(z)
        traj.missing_frames = 0
        traj.last_box = det.box
        traj.history.append((frame, det.box))
        traj.set_status(Status.ACTIVE)

    def _spawn(self, det: Detection, frame: int, active: bool) -> Trajectory:
        z = l2_normalize(det.embedding)[0]
        traj = Trajectory(
            id=self._next_id,
            status=Status.ACTIVE if active else Status.UNACTIVATED,
            kalman=motion.initiate(det.box),
            fused=z.copy(),
            memory=deque([z], maxlen=self.config.memory_length),
            last_box=det.box,
            history=[(frame, det.box)],
        )
        self._next_id += 1
        self.trajectories.append(traj)
        return traj

    def step(self, detections, frame: int | None = None) -> FrameResult:
        """Predict every live trajectory, then associate this frame's detections."""
        self.frame_count += 1
        frame = self.frame_count if frame is None else frame
        cfg = self.config
        dets = [d for d in detections if d.box.area() > 0]
        for t in self.live:
            t.kalman = motion.predict(t.kalman)

        pool1 = [t for t in self.live if t.status in (Status.ACTIVE, Status.LOST)]
        unactivated = [t for t in self.live if t.status == Status.UNACTIVATED]
        step_matches = {1: [], 2: [], 3: []}
        matched_tracks: set[int] = set()
        remaining = list(range(len(dets)))

        # Step 1: appearance
        if dets and pool1:
            emb = normalize_rows(np.array([d.embedding for d in dets]))
            reps = np.array([t.fused for t in pool1])
            cost = np.clip(1.0 - emb @ reps.T, 0.0, 2.0)
            cost = motion.gate_cost_matrix(cost, [t.kalman for t in pool1], dets, cfg.gate_threshold)
            res = solve_with_threshold(cost, cfg.kappa1)
            for r, c in res.matches:
                self._absorb(pool1[c], dets[r], frame)
                step_matches[1].append((r, pool1[c].id))
                matched_tracks.add(pool1[c].id)
            remaining = res.unmatched_rows

        # Step 2: IoU against still-unmatched active trajectories
        pool2 = [t for t in pool1 if t.status == Status.ACTIVE and t.id not in matched_tracks]
        if remaining and pool2:
            cost = 1.0 - iou_matrix([dets[i].box for i in remaining],
                                    [t.predicted_box() for t in pool2])
            res = solve_with_threshold(cost, cfg.kappa2)
            for r, c in res.matches:
                self._absorb(pool2[c], dets[remaining[r]], frame)
                step_matches[2].append((remaining[r], pool2[c].id))
                matched_tracks.add(pool2[c].id)
            remaining = [remaining[r] for r in res.unmatched_rows]

        deleted = []
        for t in pool1:
            if t.id in matched_tracks:
                continue
            t.missing_frames += 1
            if t.missing_frames > cfg.max_missing:
                t.set_status(Status.DELETED)
                deleted.append(t.id)
            else:
                t.set_status(Status.LOST)

        # Step 3: IoU against trajectories created in the previous frame
        if remaining and unactivated:
            cost = 1.0 - iou_matrix([dets[i].box for i in remaining],
                                    [t.predicted_box() for t in unactivated])
            res = solve_with_threshold(cost, cfg.kappa3)
            for r, c in res.matches:
                self._absorb(unactivated[c], dets[remaining[r]], frame)
                step_matches[3].append((remaining[r], unactivated[c].id))
                matched_tracks.add(unactivated[c].id)
            remaining = [remaining[r] for r in res.unmatched_rows]
        for t in unactivated:
            if t.id not in matched_tracks:
                t.set_status(Status.DELETED)
                deleted.append(t.id)

        first = self.frame_count == 1 and cfg.activate_first_frame
        created = [self._spawn(dets[i], frame, active=first).id for i in remaining]
        self.trajectories = [t for t in self.trajectories if t.status != Status.DELETED]

        outputs = [(t.id, t.last_box) for t in self.trajectories
                   if t.status == Status.ACTIVE and t.history and t.history[-1][0] == frame]
        return FrameResult(frame, step_matches, created, deleted, outputs)


def associate_frame(detections, trajectories_or_tracker, config: TrackerConfig | None = None,
                    frame: int | None = None) -> FrameResult:
    """Functional entry point: advance ``tracker`` by one frame."""
    tracker = trajectories_or_tracker
    if not isinstance(tracker, Tracker):
        raise TypeError("associate_frame expects a Tracker holding the trajectory state")
    if config is not None and config != tracker.config:
        tracker.config = config
    return tracker.step(detections, frame)


def run_sequence(frames, config: TrackerConfig | None = None) -> dict:
    """Track a whole sequence.

    ``frames`` is a list of detection lists (frame numbers 1..n) or a mapping
    ``{frame: detections}``. Returns ``{frame: [(id, box), ...]}`` for frames
    that produced output.
    """
    tracker = Tracker(config)
    items = sorted(frames.items()) if isinstance(frames, dict) else \
        list(enumerate(frames, start=1))
    out = {}
    for frame, dets in items:
        res = tracker.step(dets, frame)
        if res.outputs:
            out[frame] = res.outputs
    return out


def with_beta(config: TrackerConfig, beta: str) -> TrackerConfig:
    return replace(config, beta=beta)
