"""Deterministic synthetic scenarios standing in for camera frames and a detector.

Agents walk piecewise-linear paths between random waypoints. Every identity
owns a unit latent appearance vector (what an ideal re-id network would
output) and a feature signature painted into a coarse feature map (what a
backbone would produce). Occlusion depth is the agent index: a lower index
is closer to the camera.

All randomness comes from numpy's PCG64 generator seeded with
``[seed, stream, ...]`` sequences, so a config reproduces bit-identically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache

import numpy as np

from .core import BoundingBox, Detection, intersection_area, normalize_rows
from .metrics import FrameBoxes

_LATENT_STREAM = 0
_MOTION_STREAM = 1
_DETECTION_STREAM = 2
_FEATURE_STREAM = 3
_SIGNATURE_STREAM = 4
_POSE_STREAM = 5


@dataclass(frozen=True)
class ScenarioConfig:
    n_identities: int = 10
    n_frames: int = 100
    arena_width: float = 640.0
    arena_height: float = 480.0
    n_waypoints: int = 6
    speed_min: float = 1.0  # px / frame
    speed_max: float = 4.0
    box_height_min: float = 60.0
    box_height_max: float = 140.0
    aspect_min: float = 0.35  # width / height
    aspect_max: float = 0.5
    entry_spread: float = 0.0  # fraction of the sequence over which agents appear
    p_drop: float = 0.0
    sigma_box: float = 0.0
    sigma_emb: float = 0.0
    occlusion: bool = False
    occlusion_drop: float = 0.5  # extra drop probability at zero visibility
    occlusion_mix: float = 1.0  # how strongly an occluder's latent leaks into the embedding
    embed_dim: int = 32
    latent_bound: float = 0.5  # max pairwise cosine between identity latents
    feature_stride: int = 8
    feature_channels: int = 16
    feature_noise: float = 0.1
    feature_profile: float = 0.5  # center-weighting of painted signatures, 0 = flat
    feature_gain_std: float = 0.1
    pose_variation: float = 0.0  # heading-dependent part of the painted signature
    render_features: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("p_drop", "occlusion_drop", "entry_spread"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("sigma_box", "sigma_emb", "feature_noise", "feature_gain_std",
                     "occlusion_mix", "feature_profile", "pose_variation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.speed_min > self.speed_max or self.speed_min < 0:
            raise ValueError("need 0 <= speed_min <= speed_max")
        if self.box_height_max > self.arena_height or self.box_height_min <= 0:
            raise ValueError("box heights must be positive and fit in the arena")
        if self.aspect_max * self.box_height_max > self.arena_width:
            raise ValueError("boxes must fit in the arena")
        if not -1.0 < self.latent_bound < 1.0:
            raise ValueError("latent_bound must lie in (-1, 1)")
        if self.n_waypoints < 2:
            raise ValueError("need at least 2 waypoints")

    def noiseless(self) -> "ScenarioConfig":
        return replace(self, p_drop=0.0, sigma_box=0.0, sigma_emb=0.0, occlusion=False)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return (math.ceil(self.arena_height / self.feature_stride),
                math.ceil(self.arena_width / self.feature_stride), self.feature_channels)


def config_fields() -> dict:
    return {f.name: f for f in fields(ScenarioConfig)}


@dataclass
class SimulatedFrame:
    frame: int  # 1-based
    detections: list
    gt: FrameBoxes
    visibility: dict = field(default_factory=dict)  # gt id -> visible fraction
    headings: dict = field(default_factory=dict)  # gt id -> walking direction (radians)
    feature_map: np.ndarray | None = None


def _rng(cfg: ScenarioConfig, *stream) -> np.random.Generator:
    # Philox: counter-based, specified independently of numpy and platform
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, *stream])))


def bounded_unit_vectors(rng, n: int, dim: int, bound: float, max_tries: int = 10000) -> np.ndarray:
    """``n`` unit vectors whose pairwise cosine similarity is at most ``bound`` (rejection sampling)."""
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not place {n} unit vectors in {dim}-D with cosine <= {bound}")
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(float(v @ u) <= bound for u in out):
            out.append(v)
    return np.array(out)


@lru_cache(maxsize=32)
def identity_latents(cfg: ScenarioConfig) -> np.ndarray:
    """Unit appearance latent per identity, row ``i`` for identity ``i + 1``."""
    out = bounded_unit_vectors(_rng(cfg, _LATENT_STREAM), cfg.n_identities, cfg.embed_dim,
                               cfg.latent_bound)
    out.setflags(write=False)  # cached and shared
    return out


@lru_cache(maxsize=32)
def identity_signatures(cfg: ScenarioConfig) -> np.ndarray:
    """Per-identity feature-map signature (unit, ``feature_channels`` wide)."""
    out = bounded_unit_vectors(_rng(cfg, _SIGNATURE_STREAM), cfg.n_identities,
                               cfg.feature_channels, cfg.latent_bound)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=32)
def identity_pose_vectors(cfg: ScenarioConfig) -> np.ndarray:
    """Two random directions per identity, mixed by heading angle; shape (n, 2, C)."""
    rng = _rng(cfg, _POSE_STREAM)
    v = rng.normal(size=(cfg.n_identities, 2, cfg.feature_channels))
    v /= np.linalg.norm(v, axis=2, keepdims=True)
    v.setflags(write=False)
    return v


def painted_signature(cfg: ScenarioConfig, ident: int, heading: float) -> np.ndarray:
    base = identity_signatures(cfg)[ident - 1]
    if cfg.pose_variation == 0:
        return base
    pose = identity_pose_vectors(cfg)[ident - 1]
    s = base + cfg.pose_variation * (np.cos(heading) * pose[0] + np.sin(heading) * pose[1])
    return s / np.linalg.norm(s)


@dataclass
class _Agent:
    identity: int
    width: float
    height: float
    speed: float
    waypoints: np.ndarray  # (n, 2) center positions
    start: int  # first frame (1-based)


def _agents(cfg: ScenarioConfig) -> list[_Agent]:
    rng = _rng(cfg, _MOTION_STREAM)
    agents = []
    for i in range(cfg.n_identities):
        h = rng.uniform(cfg.box_height_min, cfg.box_height_max)
        w = h * rng.uniform(cfg.aspect_min, cfg.aspect_max)
        lo = np.array([w / 2, h / 2])
        hi = np.array([cfg.arena_width - w / 2, cfg.arena_height - h / 2])
        wps = lo + rng.random((cfg.n_waypoints, 2)) * (hi - lo)
        speed = rng.uniform(cfg.speed_min, cfg.speed_max)
        start = 1 + int(math.floor(rng.random() * cfg.entry_spread * (cfg.n_frames - 1)))
        agents.append(_Agent(i + 1, w, h, speed, wps, start))
    return agents


def _path_position(agent: _Agent, t: float) -> tuple[np.ndarray, float]:
    """Center and heading after walking ``t`` frames along the closed waypoint loop."""
    wps = agent.waypoints
    seg = np.roll(wps, -1, axis=0) - wps
    lengths = np.linalg.norm(seg, axis=1)
    total = lengths.sum()
    if total == 0 or agent.speed == 0:
        return wps[0].copy(), 0.0
    dist = (agent.speed * t) % total
    for p, d, length in zip(wps, seg, lengths):
        if dist <= length and length > 0:
            return p + d * (dist / length), float(np.arctan2(d[1], d[0]))
        dist -= length
    return wps[0].copy(), float(np.arctan2(seg[0, 1], seg[0, 0]))


def _agent_box(agent: _Agent, frame: int) -> tuple[BoundingBox, float]:
    (cx, cy), heading = _path_position(agent, frame - agent.start)
    box = BoundingBox(cx - agent.width / 2, cy - agent.height / 2, agent.width, agent.height)
    return box, heading


def _union_area(rects) -> float:
    """Exact area of a union of (x0, y0, x1, y1) rectangles by coordinate compression."""
    rects = [r for r in rects if r[2] > r[0] and r[3] > r[1]]
    if not rects:
        return 0.0
    xs = sorted({r[0] for r in rects} | {r[2] for r in rects})
    area = 0.0
    for xa, xb in zip(xs[:-1], xs[1:]):
        spans = sorted((r[1], r[3]) for r in rects if r[0] <= xa and r[2] >= xb)
        covered = 0.0
        cur_lo = cur_hi = None
        for lo, hi in spans:
            if cur_hi is None or lo > cur_hi:
                if cur_hi is not None:
                    covered += cur_hi - cur_lo
                cur_lo, cur_hi = lo, hi
            else:
                cur_hi = max(cur_hi, hi)
        if cur_hi is not None:
            covered += cur_hi - cur_lo
        area += covered * (xb - xa)
    return area


def visibility_of(objects) -> dict:
    """Visible fraction of each (id, box); earlier list entries are in front."""
    vis = {}
    for k, (ident, box) in enumerate(objects):
        if box.area() <= 0:
            vis[ident] = 0.0
            continue
        clipped = []
        for _, front in objects[:k]:
            x0, y0 = max(box.left, front.left), max(box.top, front.top)
            x1, y1 = min(box.right, front.right), min(box.bottom, front.bottom)
            clipped.append((x0, y0, x1, y1))
        vis[ident] = max(0.0, 1.0 - _union_area(clipped) / box.area())
    return vis


def occlusion_oracle(frame: SimulatedFrame) -> dict:
    """Visible fraction per gt identity, depth ordered by identity (lower id in front)."""
    return visibility_of(sorted(frame.gt.objects, key=lambda o: o[0]))


def _main_occluder(ident, box, objects):
    best, best_area = None, 0.0
    for other, ob in objects:
        if other >= ident:
            break
        a = intersection_area(box, ob)
        if a > best_area:
            best, best_area = other, a
    return best


def generate_scenario(cfg: ScenarioConfig) -> list[SimulatedFrame]:
    if cfg.n_identities < 1 or cfg.n_frames < 1:
        raise ValueError("scenario needs at least one identity and one frame")
    agents = _agents(cfg)
    latents = identity_latents(cfg)
    frames = []
    for t in range(1, cfg.n_frames + 1):
        placed = [(a.identity, *_agent_box(a, t)) for a in agents if a.start <= t]
        objects = [(i, box) for i, box, _ in placed]
        headings = {i: hd for i, _, hd in placed}
        gt = FrameBoxes(t, objects)
        vis = visibility_of(objects)
        rng = _rng(cfg, _DETECTION_STREAM, t)
        dets = []
        for ident, box in objects:
            v = vis[ident] if cfg.occlusion else 1.0
            p = cfg.p_drop + (1.0 - cfg.p_drop) * cfg.occlusion_drop * (1.0 - v) if cfg.occlusion \
                else cfg.p_drop
            # draw every random number unconditionally so streams stay aligned across configs
            drop_u = rng.random()
            jitter = rng.normal(size=4) * cfg.sigma_box
            noise = rng.normal(size=cfg.embed_dim) * cfg.sigma_emb
            if drop_u < p:
                continue
            emb = latents[ident - 1] + noise
            if cfg.occlusion and v < 1.0:
                occ = _main_occluder(ident, box, objects)
                if occ is not None:
                    emb = emb + cfg.occlusion_mix * (1.0 - v) * (latents[occ - 1] - latents[ident - 1])
            emb = normalize_rows(emb[None])[0]
            if cfg.sigma_box > 0:
                w = max(1.0, box.width + jitter[2])
                h = max(1.0, box.height + jitter[3])
                det_box = BoundingBox(box.left + jitter[0], box.top + jitter[1], w, h)
            else:
                det_box = box
            conf = 0.5 + 0.5 * v if cfg.occlusion else 1.0
            dets.append(Detection(t, det_box, conf, emb, gt_identity=ident))
        frame = SimulatedFrame(t, dets, gt, vis, headings)
        if cfg.render_features:
            frame.feature_map = render_feature_map(frame, cfg)
        frames.append(frame)
    return frames


def render_feature_map(frame: SimulatedFrame, cfg: ScenarioConfig) -> np.ndarray:
    """Background noise plus each agent's signature painted back to front."""
    h, w, c = cfg.feature_shape
    rng = _rng(cfg, _FEATURE_STREAM, frame.frame)
    noise = rng.normal(size=(h, w, c)) * cfg.feature_noise
    gains = 1.0 + rng.normal(size=cfg.n_identities) * cfg.feature_gain_std
    fmap = np.zeros((h, w, c))
    ys = np.arange(h, dtype=float)[:, None]
    xs = np.arange(w, dtype=float)[None, :]
    for ident, box in sorted(frame.gt.objects, key=lambda o: -o[0]):
        b = box.scaled(1.0 / cfg.feature_stride)
        inside = (xs >= b.left) & (xs <= b.right) & (ys >= b.top) & (ys <= b.bottom)
        if not inside.any():
            continue
        cx, cy = b.center
        d2 = ((xs - cx) / max(b.width / 2, 1e-9)) ** 2 + ((ys - cy) / max(b.height / 2, 1e-9)) ** 2
        profile = np.clip(1.0 - cfg.feature_profile * np.minimum(d2, 1.0), 0.0, None)
        sig = painted_signature(cfg, ident, frame.headings.get(ident, 0.0))
        fmap[inside] = (gains[ident - 1] * profile[inside])[:, None] * sig[None, :]
    return fmap + noise


def feature_boxes(frame: SimulatedFrame, cfg: ScenarioConfig):
    """Ground-truth (identity, box) pairs on the feature-map scale."""
    return [(ident, box.scaled(1.0 / cfg.feature_stride)) for ident, box in frame.gt.objects]


def noiseless_config(**overrides) -> ScenarioConfig:
    return ScenarioConfig(**overrides).noiseless()


def to_train_frames(frames, cfg: ScenarioConfig, sequence_key=0):
    """Training input from rendered frames; labels are ``(sequence_key, identity)``."""
    from .mtcl import TrainFrame

    out = []
    for fr in frames:
        fmap = fr.feature_map if fr.feature_map is not None else render_feature_map(fr, cfg)
        objs = feature_boxes(fr, cfg)
        out.append(TrainFrame(fmap, [b for _, b in objs], [(sequence_key, i) for i, _ in objs],
                              fr.frame))
    return out
