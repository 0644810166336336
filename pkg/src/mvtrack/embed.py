"""Learnable view sampling and the projection head, with hand-written backprop.

A target is described by ``n_keypoints`` views. Offsets are regressed
linearly from the feature at the target's center cell, added to a fixed
initial pattern, clamped into the target box, and the feature map is read
bilinearly at each keypoint. Every sampled vector goes through a four-layer
projection head whose third layer output is l2-normalized.

Coordinates are (x, y) on the feature-map grid; feature maps are float
arrays of shape (H, W, C).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import EPS, BoundingBox

PARAM_NAMES = ("offset.W", "proj.W1", "proj.b1", "proj.W2", "proj.b2",
               "proj.W3", "proj.b3", "proj.W4", "proj.b4")


def initial_pattern(n_keypoints: int) -> np.ndarray:
    """Center first, then square rings around it (the 3x3 grid for 9 points)."""
    if n_keypoints < 1:
        raise ValueError("n_keypoints must be >= 1")
    pts = [(0.0, 0.0)]
    ring = 1
    while len(pts) < n_keypoints:
        for dy in range(-ring, ring + 1):
            for dx in range(-ring, ring + 1):
                if max(abs(dx), abs(dy)) == ring:
                    pts.append((float(dx), float(dy)))
        ring += 1
    return np.array(pts[:n_keypoints])


@dataclass
class OffsetHead:
    weight: np.ndarray  # (2 * n_keypoints, C); rows (2i, 2i+1) give (dx, dy) of keypoint i
    pattern: np.ndarray  # (n_keypoints, 2), fixed
    units: str = "pixels"  # "pixels" or "box" (offsets scaled by box width/height)

    def __post_init__(self):
        if self.units not in ("pixels", "box"):
            raise ValueError(f"unknown offset units {self.units!r}")
        if self.weight.shape[0] != 2 * self.pattern.shape[0]:
            raise ValueError("offset weight rows must equal 2 * n_keypoints")

    @property
    def n_keypoints(self) -> int:
        return self.pattern.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


@dataclass
class ProjectionHead:
    weights: list  # four (in, out) matrices
    biases: list  # four (out,) vectors
    normalize_output: bool = True

    def __post_init__(self):
        if len(self.weights) != 4 or len(self.biases) != 4:
            raise ValueError("projection head has exactly 4 fully connected layers")
        for k in range(3):
            if self.weights[k].shape[1] != self.weights[k + 1].shape[0]:
                raise ValueError(f"layer {k + 1} -> {k + 2} dimension mismatch")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shape does not match layer output")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[3].shape[1]


@dataclass
class EmbeddingModel:
    offset: OffsetHead
    proj: ProjectionHead

    def params(self) -> dict:
        """Name -> parameter array. The arrays are live: in-place edits update the model."""
        p = {"offset.W": self.offset.weight}
        for k in range(4):
            p[f"proj.W{k + 1}"] = self.proj.weights[k]
            p[f"proj.b{k + 1}"] = self.proj.biases[k]
        return p

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(
            OffsetHead(self.offset.weight.copy(), self.offset.pattern.copy(), self.offset.units),
            ProjectionHead([w.copy() for w in self.proj.weights],
                           [b.copy() for b in self.proj.biases], self.proj.normalize_output),
        )


def init_model(in_channels: int, n_keypoints: int = 9, hidden=(64, 64), pre_dim: int = 32,
               out_dim: int = 32, rng=None, offset_units: str = "pixels",
               offset_init_std: float = 0.0, pattern=None) -> EmbeddingModel:
    """He-initialized projection head; offset weights default to zero (pure initial pattern)."""
    rng = np.random.default_rng(rng)
    dims = [in_channels, hidden[0], hidden[1], pre_dim, out_dim]
    weights, biases = [], []
    for k in range(4):
        std = np.sqrt(2.0 / dims[k]) if k < 2 else np.sqrt(1.0 / dims[k])
        weights.append(rng.normal(0.0, std, size=(dims[k], dims[k + 1])))
        biases.append(np.zeros(dims[k + 1]))
    pat = initial_pattern(n_keypoints) if pattern is None else np.asarray(pattern, dtype=float)
    w_off = rng.normal(0.0, offset_init_std, size=(2 * n_keypoints, in_channels)) \
        if offset_init_std > 0 else np.zeros((2 * n_keypoints, in_channels))
    return EmbeddingModel(OffsetHead(w_off, pat, offset_units), ProjectionHead(weights, biases))


# -- forward primitives -----------------------------------------------------

def _check_map(fmap) -> np.ndarray:
    fmap = np.asarray(fmap, dtype=float)
    if fmap.ndim != 3:
        raise ValueError(f"feature map must be (H, W, C), got shape {fmap.shape}")
    return fmap


def sample_center_feature(fmap, z) -> np.ndarray:
    fmap = _check_map(fmap)
    x, y = int(z[0]), int(z[1])
    h, w, _ = fmap.shape
    if not (0 <= x < w and 0 <= y < h):
        raise IndexError(f"grid coordinate {(x, y)} outside {w}x{h} map")
    return fmap[y, x].copy()


def center_cell(box: BoundingBox, map_shape) -> tuple[int, int]:
    h, w = map_shape[:2]
    cx, cy = box.center
    x = min(max(int(np.floor(cx + 0.5)), 0), w - 1)
    y = min(max(int(np.floor(cy + 0.5)), 0), h - 1)
    return x, y


def regress_offsets(head: OffsetHead, r, box: BoundingBox | None = None) -> np.ndarray:
    """Offsets of each keypoint from the center cell, shape (n_keypoints, 2)."""
    r = np.asarray(r, dtype=float)
    if r.shape != (head.in_channels,):
        raise ValueError(f"center feature has shape {r.shape}, expected ({head.in_channels},)")
    learned = (head.weight @ r).reshape(-1, 2)
    if head.units == "box":
        if box is None:
            raise ValueError("box-relative offsets need the target box")
        learned = learned * np.array([box.width, box.height])
    return head.pattern + learned


def _bounds(box: BoundingBox, map_shape):
    h, w = map_shape[:2]
    lo = np.array([max(box.left, 0.0), max(box.top, 0.0)])
    hi = np.array([min(box.right, w - 1.0), min(box.bottom, h - 1.0)])
    if (lo > hi).any():
        raise ValueError(f"box {box} does not intersect the {w}x{h} feature map")
    return lo, hi


def clip_keypoints(center, offsets, box: BoundingBox, map_shape=None) -> np.ndarray:
    """Clamp ``center + offsets`` componentwise into the box (edges inclusive).

    With ``map_shape`` the box is first intersected with the map extent.
    """
    center = np.asarray(center, dtype=float)
    offsets = np.asarray(offsets, dtype=float).reshape(-1, 2)
    if map_shape is None:
        lo = np.array([box.left, box.top])
        hi = np.array([box.right, box.bottom])
    else:
        lo, hi = _bounds(box, map_shape)
    return np.clip(center + offsets, lo, hi)


def _bilinear_setup(map_shape, base, frac):
    """Corner indices and weights; ``base`` is the integer part, ``frac`` in [0, 1]."""
    h, w = map_shape[:2]
    x0, y0 = base[:, 0].copy(), base[:, 1].copy()
    fx, fy = frac[:, 0].copy(), frac[:, 1].copy()
    # A coordinate sitting on the last row/column is read as the far corner of the previous cell.
    if w > 1:
        edge = x0 > w - 2
        x0[edge] = w - 2
        fx[edge] = 1.0
    else:
        fx[:] = 0.0
    if h > 1:
        edge = y0 > h - 2
        y0[edge] = h - 2
        fy[edge] = 1.0
    else:
        fy[:] = 0.0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x0, x1, y0, y1, fx, fy


def _bilinear(fmap, x0, x1, y0, y1, fx, fy):
    f00, f01 = fmap[y0, x0], fmap[y0, x1]
    f10, f11 = fmap[y1, x0], fmap[y1, x1]
    wx, wy = fx[:, None], fy[:, None]
    top = (1 - wx) * f00 + wx * f01
    bot = (1 - wx) * f10 + wx * f11
    out = (1 - wy) * top + wy * bot
    d_fx = (1 - wy) * (f01 - f00) + wy * (f11 - f10)
    d_fy = bot - top
    return out, d_fx, d_fy


def bilinear_sample(fmap, coords) -> np.ndarray:
    """Bilinear read at continuous (x, y) coordinates; accepts one point or an (n, 2) array."""
    fmap = _check_map(fmap)
    c = np.asarray(coords, dtype=float)
    single = c.ndim == 1
    c = c.reshape(-1, 2)
    h, w, _ = fmap.shape
    if (c < 0).any() or (c[:, 0] > w - 1).any() or (c[:, 1] > h - 1).any():
        raise ValueError(f"sampling coordinate outside [0, {w - 1}] x [0, {h - 1}]")
    base = np.floor(c).astype(int)
    out, _, _ = _bilinear(fmap, *_bilinear_setup(fmap.shape, base, c - base))
    return out[0] if single else out


def _relu(x):
    return np.maximum(x, 0.0)


def _normalize_rows(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    degenerate = n[:, 0] < EPS
    safe = np.where(degenerate[:, None], 1.0, n)
    return np.where(degenerate[:, None], 0.0, x / safe), safe, degenerate


def _normalize_backward(g, unit, norm, degenerate):
    dx = (g - unit * np.sum(unit * g, axis=1, keepdims=True)) / norm
    dx[degenerate] = 0.0
    return dx


def _project_forward(head: ProjectionHead, x):
    W, b = head.weights, head.biases
    cache = {"x": x}
    a1 = x @ W[0] + b[0]
    h1 = _relu(a1)
    a2 = h1 @ W[1] + b[1]
    h2 = _relu(a2)
    a3 = h2 @ W[2] + b[2]
    n3, s3, deg3 = _normalize_rows(a3)
    y = n3 @ W[3] + b[3]
    cache.update(a1=a1, h1=h1, a2=a2, h2=h2, n3=n3, s3=s3, deg3=deg3, y=y)
    if head.normalize_output:
        out, s4, deg4 = _normalize_rows(y)
        cache.update(out=out, s4=s4, deg4=deg4)
    else:
        out = y
    return out, cache


def _project_backward(head: ProjectionHead, cache, g):
    W = head.weights
    grads = {}
    if head.normalize_output:
        g = _normalize_backward(g, cache["out"], cache["s4"], cache["deg4"])
    grads["proj.W4"] = cache["n3"].T @ g
    grads["proj.b4"] = g.sum(axis=0)
    g = g @ W[3].T
    g = _normalize_backward(g, cache["n3"], cache["s3"], cache["deg3"])
    grads["proj.W3"] = cache["h2"].T @ g
    grads["proj.b3"] = g.sum(axis=0)
    g = (g @ W[2].T) * (cache["a2"] > 0)
    grads["proj.W2"] = cache["h1"].T @ g
    grads["proj.b2"] = g.sum(axis=0)
    g = (g @ W[1].T) * (cache["a1"] > 0)
    grads["proj.W1"] = cache["x"].T @ g
    grads["proj.b1"] = g.sum(axis=0)
    return grads, g @ W[0].T


def project(head: ProjectionHead, v) -> np.ndarray:
    """Appearance vector(s) for sampled feature(s); accepts (C,) or (n, C)."""
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    x = v.reshape(-1, v.shape[-1]) if v.size else v.reshape(0, head.in_dim)
    if x.shape[1] != head.in_dim:
        raise ValueError(f"input dimension {x.shape[1]} != head input {head.in_dim}")
    out, _ = _project_forward(head, x)
    return out[0] if single else out


def project_stage3(head: ProjectionHead, v) -> tuple[np.ndarray, np.ndarray]:
    """Layer-3 activations after normalization and their degenerate flags."""
    x = np.atleast_2d(np.asarray(v, dtype=float))
    _, cache = _project_forward(head, x)
    return cache["n3"], cache["deg3"]


# -- full view pipeline -----------------------------------------------------

@dataclass
class ViewTape:
    """Intermediates of one forward pass, consumed by exactly one backward pass."""

    model: EmbeddingModel
    n_boxes: int
    centers_feat: np.ndarray  # (M, C)
    scales: np.ndarray  # (M, 2)
    inside: np.ndarray  # (M, K, 2) True where the clamp was inactive
    d_fx: np.ndarray  # (M*K, C)
    d_fy: np.ndarray
    edge_x: np.ndarray  # (M*K,) True where the x coordinate has no bilinear slope
    edge_y: np.ndarray
    proj_cache: dict = field(repr=False, default_factory=dict)
    keypoints: np.ndarray = None  # (M, K, 2)
    used: bool = False


def forward_batch(fmap, boxes, model: EmbeddingModel):
    """Views for every box in one feature map.

    Returns ``(views, tape)`` with ``views`` of shape (len(boxes) * K, D),
    grouped box by box.
    """
    fmap = _check_map(fmap)
    head = model.offset
    k = head.n_keypoints
    if fmap.shape[2] != head.in_channels:
        raise ValueError(f"feature map has {fmap.shape[2]} channels, head expects {head.in_channels}")
    m = len(boxes)
    centers = np.zeros((m, 2), dtype=int)
    lo_rel = np.zeros((m, 2))
    hi_rel = np.zeros((m, 2))
    scales = np.ones((m, 2))
    for i, box in enumerate(boxes):
        centers[i] = center_cell(box, fmap.shape)
        lo, hi = _bounds(box, fmap.shape)
        lo_rel[i] = lo - centers[i]
        hi_rel[i] = hi - centers[i]
        if head.units == "box":
            scales[i] = (box.width, box.height)
    r = fmap[centers[:, 1], centers[:, 0]] if m else np.zeros((0, head.in_channels))
    learned = (r @ head.weight.T).reshape(m, k, 2) * scales[:, None, :]
    rel = head.pattern[None] + learned
    lo_b, hi_b = lo_rel[:, None, :], hi_rel[:, None, :]
    inside = (rel >= lo_b) & (rel <= hi_b)
    rel = np.clip(rel, lo_b, hi_b)
    # integer part is carried separately so integer translations are exact
    whole = np.floor(rel)
    base = (centers[:, None, :] + whole.astype(int)).reshape(-1, 2)
    frac = (rel - whole).reshape(-1, 2)
    x0, x1, y0, y1, fx, fy = _bilinear_setup(fmap.shape, base, frac)
    sampled, d_fx, d_fy = _bilinear(fmap, x0, x1, y0, y1, fx, fy)
    views, cache = _project_forward(model.proj, sampled)
    h, w, _ = fmap.shape
    tape = ViewTape(model=model, n_boxes=m, centers_feat=r, scales=scales, inside=inside,
                    d_fx=d_fx, d_fy=d_fy, edge_x=np.full(len(fx), w == 1),
                    edge_y=np.full(len(fy), h == 1), proj_cache=cache,
                    keypoints=(centers[:, None, :] + rel))
    return views, tape


def forward_views(fmap, box: BoundingBox, model: EmbeddingModel):
    """The ``n_keypoints`` appearance vectors of one target plus the tape for backward."""
    return forward_batch(fmap, [box], model)


def backward_views(tape: ViewTape, grad_views) -> dict:
    """Parameter gradients given d(loss)/d(views); the tape is single-use."""
    if tape.used:
        raise RuntimeError("view tape already consumed by a backward pass")
    tape.used = True
    model = tape.model
    g = np.asarray(grad_views, dtype=float)
    grads, g_sampled = _project_backward(model.proj, tape.proj_cache, g)
    gx = np.sum(g_sampled * tape.d_fx, axis=1)
    gy = np.sum(g_sampled * tape.d_fy, axis=1)
    gx[tape.edge_x] = 0.0
    gy[tape.edge_y] = 0.0
    k = model.offset.n_keypoints
    g_rel = np.stack([gx, gy], axis=1).reshape(tape.n_boxes, k, 2)
    g_rel = np.where(tape.inside, g_rel, 0.0) * tape.scales[:, None, :]
    grads["offset.W"] = g_rel.reshape(tape.n_boxes, 2 * k).T @ tape.centers_feat
    return grads


def zero_grads(model: EmbeddingModel) -> dict:
    return {name: np.zeros_like(p) for name, p in model.params().items()}
