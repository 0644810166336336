"""Trajectory contrastive training: center memory bank, losses, Adam and the epoch loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import EPS, BoundingBox, l2_normalize, normalize_rows
from .embed import EmbeddingModel, backward_views, forward_batch, init_model

log = logging.getLogger(__name__)

STRATEGIES = ("hard", "easy", "random", "average")


@dataclass
class TrainConfig:
    alpha: float = 0.2
    tau: float = 0.05
    n_keypoints: int = 9
    learning_rate: float = 1e-4
    lr_decay_epoch: int = 20  # learning rate x lr_decay_factor from this epoch on (0 = never)
    lr_decay_factor: float = 0.1
    epochs: int = 30
    batch_size: int = 8
    update_strategy: str = "hard"
    normalize_centers: bool = True
    exclude_zero_centers: bool = True
    l_det: float = 0.0
    hidden1: int = 64
    hidden2: int = 64
    pre_dim: int = 32
    out_dim: int = 32
    offset_units: str = "pixels"
    objective: str = "mtcl"  # "mtcl" or "ce" (identity-classification baseline)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.update_strategy not in STRATEGIES:
            raise ValueError(f"update_strategy must be one of {STRATEGIES}")
        if self.objective not in ("mtcl", "ce"):
            raise ValueError("objective must be 'mtcl' or 'ce'")
        if self.n_keypoints < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("n_keypoints, batch_size must be >= 1 and epochs >= 0")


# -- memory bank ------------------------------------------------------------

@dataclass
class TrajectoryCenterBank:
    centers: np.ndarray  # (N, D)
    update_counts: np.ndarray  # (N,)

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    def is_zero(self, l: int) -> bool:
        return float(np.linalg.norm(self.centers[l])) < EPS


def init_bank(n_trajectories: int, dim: int) -> TrajectoryCenterBank:
    if n_trajectories < 1 or dim < 1:
        raise ValueError("bank needs n_trajectories >= 1 and dim >= 1")
    return TrajectoryCenterBank(np.zeros((n_trajectories, dim)), np.zeros(n_trajectories, dtype=int))


def select_update_sample(candidates, center, strategy: str = "hard", rng=None) -> np.ndarray:
    """Pick the vector used to move a trajectory center.

    ``hard`` takes the candidate least similar to the center, ``easy`` the most
    similar, ``random`` a uniform pick and ``average`` the normalized mean. A
    zero center (trajectory not seen yet this epoch) takes the first candidate.
    """
    cands = np.atleast_2d(np.asarray(candidates, dtype=float))
    if cands.shape[0] == 0 or np.asarray(candidates).size == 0:
        raise ValueError("no candidate vectors to update the center with")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown update strategy {strategy!r}")
    if len(cands) == 1:
        return cands[0].copy()
    center = np.asarray(center, dtype=float)
    if np.linalg.norm(center) < EPS:
        return cands[0].copy()
    if strategy == "average":
        return l2_normalize(cands.mean(axis=0))[0]
    if strategy == "random":
        rng = np.random.default_rng(rng)
        return cands[int(rng.integers(len(cands)))].copy()
    norms = np.linalg.norm(cands, axis=1) * np.linalg.norm(center)
    sims = np.where(norms < EPS, 0.0, cands @ center / np.where(norms < EPS, 1.0, norms))
    idx = int(np.argmin(sims)) if strategy == "hard" else int(np.argmax(sims))
    return cands[idx].copy()


def update_center(bank: TrajectoryCenterBank, l: int, p_m, alpha: float, normalize: bool = True) -> None:
    """Momentum update ``c <- alpha * c + (1 - alpha) * p``; a zero center is replaced by ``p``."""
    if not 0 <= l < bank.size:
        raise IndexError(f"trajectory index {l} out of range for bank of {bank.size}")
    p_m = np.asarray(p_m, dtype=float)
    if bank.is_zero(l):
        c = p_m.copy()
    else:
        c = alpha * bank.centers[l] + (1.0 - alpha) * p_m
    if normalize:
        c = l2_normalize(c)[0]
    bank.centers[l] = c
    bank.update_counts[l] += 1


# -- losses -----------------------------------------------------------------

def _active_mask(bank: TrajectoryCenterBank, exclude_zero: bool) -> np.ndarray:
    if not exclude_zero:
        return np.ones(bank.size, dtype=bool)
    return np.linalg.norm(bank.centers, axis=1) >= EPS


def info_nce(v, bank: TrajectoryCenterBank, l: int, tau: float, exclude_zero: bool = True) -> float:
    """``-log softmax(v . c / tau)[l]`` over the bank, evaluated with a shifted log-sum-exp."""
    if not 0 <= l < bank.size:
        raise IndexError(f"trajectory index {l} out of range for bank of {bank.size}")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    v = np.asarray(v, dtype=float)
    mask = _active_mask(bank, exclude_zero)
    mask[l] = True
    logits = bank.centers[mask] @ v / tau
    pos = float(bank.centers[l] @ v / tau)
    top = logits.max()
    lse = top + np.log(np.sum(np.exp(logits - top)))
    return float(lse - pos)


def tcl_loss(views, labels, bank: TrajectoryCenterBank, tau: float,
             exclude_zero: bool = True) -> tuple[float, np.ndarray]:
    """Mean InfoNCE over all views and its gradient w.r.t. each view (centers are constants)."""
    views = np.atleast_2d(np.asarray(views, dtype=float))
    labels = np.asarray(labels, dtype=int).reshape(-1)
    n = views.shape[0]
    if n == 0:
        raise ValueError("tcl_loss needs at least one view")
    if labels.shape[0] != n:
        raise ValueError("one label per view required")
    if (labels < 0).any() or (labels >= bank.size).any():
        raise IndexError("view label has no entry in the memory bank")
    mask = np.broadcast_to(_active_mask(bank, exclude_zero), (n, bank.size)).copy()
    mask[np.arange(n), labels] = True
    logits = np.where(mask, views @ bank.centers.T / tau, -np.inf)
    top = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - top)
    z = e.sum(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(z[:, 0])
    pos = logits[np.arange(n), labels]
    per_view = lse - pos
    prob = e / z
    grad = (prob @ bank.centers - bank.centers[labels]) / (tau * n)
    return float(np.mean(per_view)), grad


@dataclass
class UncertaintyWeights:
    eta: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @property
    def eta1(self) -> float:
        return float(self.eta[0])

    @property
    def eta2(self) -> float:
        return float(self.eta[1])


def total_loss(l_det: float, l_tcl: float, w: UncertaintyWeights) -> tuple[float, dict]:
    """Uncertainty-weighted sum and its partials w.r.t. eta1, eta2, l_det, l_tcl."""
    e1, e2 = np.exp(-w.eta[0]), np.exp(-w.eta[1])
    value = 0.5 * (e1 * l_det + e2 * l_tcl + w.eta[0] + w.eta[1])
    partials = {
        "eta1": 0.5 * (1.0 - e1 * l_det),
        "eta2": 0.5 * (1.0 - e2 * l_tcl),
        "l_det": 0.5 * e1,
        "l_tcl": 0.5 * e2,
    }
    return float(value), {k: float(v) for k, v in partials.items()}


def constant_detection_loss(value: float = 0.0) -> Callable[[], float]:
    """Stand-in for the detector loss: a constant with zero gradient."""
    return lambda: float(value)


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- data and training loop ---------------------------------------------------

@dataclass
class TrainFrame:
    """One frame of training input: a feature map and its labeled boxes (feature-map scale)."""

    feature_map: np.ndarray
    boxes: list
    labels: list  # any hashable trajectory key per box
    frame: int = 0


@dataclass
class LossRecord:
    epoch: int
    iteration: int
    l_tcl: float
    l_det: float
    l_total: float
    eta1: float
    eta2: float


@dataclass
class TrainResult:
    model: EmbeddingModel
    weights: UncertaintyWeights
    history: list
    bank: TrajectoryCenterBank
    label_index: dict
    classifier: dict | None = None


def _label_index(sequences) -> dict:
    keys = sorted({lab for seq in sequences for fr in seq for lab in fr.labels})
    return {k: i for i, k in enumerate(keys)}


def _batches(sequences, batch_size: int):
    out = []
    for s, seq in enumerate(sequences):
        for start in range(0, len(seq), batch_size):
            out.append((s, start))
    return out


def new_model(cfg: TrainConfig, in_channels: int) -> EmbeddingModel:
    rng = np.random.default_rng([cfg.seed, 17])
    return init_model(in_channels, cfg.n_keypoints, hidden=(cfg.hidden1, cfg.hidden2),
                      pre_dim=cfg.pre_dim, out_dim=cfg.out_dim, rng=rng,
                      offset_units=cfg.offset_units)


def _batch_views(model, frames, label_index, k):
    views, labels, tapes = [], [], []
    for fr in frames:
        if not fr.boxes:
            continue
        v, tape = forward_batch(fr.feature_map, fr.boxes, model)
        views.append(v)
        labels.extend(np.repeat([label_index[lab] for lab in fr.labels], k))
        tapes.append((tape, len(v)))
    if not views:
        return None, None, []
    return np.vstack(views), np.asarray(labels, dtype=int), tapes


def _accumulate(model, tapes, grad_views):
    grads = {name: np.zeros_like(p) for name, p in model.params().items()}
    row = 0
    for tape, n in tapes:
        g = backward_views(tape, grad_views[row:row + n])
        row += n
        for name, val in g.items():
            grads[name] += val
    return grads


def _lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_decay_epoch and epoch >= cfg.lr_decay_epoch:
        return cfg.learning_rate * cfg.lr_decay_factor
    return cfg.learning_rate


def train(sequences: Sequence[Sequence[TrainFrame]], cfg: TrainConfig,
          model: EmbeddingModel | None = None,
          detection_loss: Callable[[], float] | None = None,
          progress: Callable[[LossRecord], None] | None = None) -> TrainResult:
    """Contrastive training over labeled feature-map sequences.

    Every epoch starts from an all-zero center bank. Each iteration takes
    ``batch_size`` consecutive frames of one sequence, computes the mean
    InfoNCE of all views against the bank, steps Adam on the
    uncertainty-weighted total loss and only then moves the centers of the
    trajectories present in the batch.
    """
    if cfg.objective == "ce":
        return train_ce_baseline(sequences, cfg, model, progress=progress)
    sequences = [list(s) for s in sequences]
    label_index = _label_index(sequences)
    if not label_index:
        raise ValueError("training data has no labeled instances")
    in_channels = next(fr.feature_map.shape[2] for s in sequences for fr in s)
    model = model if model is not None else new_model(cfg, in_channels)
    weights = UncertaintyWeights()
    detection_loss = detection_loss or constant_detection_loss(cfg.l_det)
    k = model.offset.n_keypoints
    rng = np.random.default_rng([cfg.seed, 23])
    adam = AdamState()
    params = dict(model.params())
    params["eta"] = weights.eta
    history: list[LossRecord] = []
    bank = init_bank(len(label_index), model.proj.out_dim)
    batches = _batches(sequences, cfg.batch_size)
    for epoch in range(cfg.epochs):
        bank = init_bank(len(label_index), model.proj.out_dim)
        order = rng.permutation(len(batches))
        lr = _lr(cfg, epoch)
        for it, b in enumerate(order):
            s, start = batches[b]
            frames = sequences[s][start:start + cfg.batch_size]
            views, labels, tapes = _batch_views(model, frames, label_index, k)
            if views is None:
                continue
            l_tcl, g_views = tcl_loss(views, labels, bank, cfg.tau, cfg.exclude_zero_centers)
            l_det = float(detection_loss())
            l_total, partials = total_loss(l_det, l_tcl, weights)
            grads = _accumulate(model, tapes, g_views * partials["l_tcl"])
            grads["eta"] = np.array([partials["eta1"], partials["eta2"]])
            adam_step(params, grads, adam, lr)
            for lab in np.unique(labels):
                cands = views[labels == lab]
                p = select_update_sample(cands, bank.centers[lab], cfg.update_strategy, rng)
                update_center(bank, int(lab), p, cfg.alpha, cfg.normalize_centers)
            rec = LossRecord(epoch, it, l_tcl, l_det, l_total, weights.eta1, weights.eta2)
            history.append(rec)
            if progress:
                progress(rec)
        log.debug("epoch %d mean L_tcl %.5f", epoch,
                  np.mean([r.l_tcl for r in history if r.epoch == epoch] or [0.0]))
    return TrainResult(model, weights, history, bank, label_index)


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    logits = np.atleast_2d(logits)
    top = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - top)
    prob = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(np.mean(-np.log(prob[np.arange(n), labels] + 1e-300)))
    grad = prob.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def train_ce_baseline(sequences, cfg: TrainConfig, model: EmbeddingModel | None = None,
                      progress=None) -> TrainResult:
    """Comparison trainer: one linear identity classifier with softmax cross-entropy."""
    sequences = [list(s) for s in sequences]
    label_index = _label_index(sequences)
    in_channels = next(fr.feature_map.shape[2] for s in sequences for fr in s)
    model = model if model is not None else new_model(cfg, in_channels)
    k = model.offset.n_keypoints
    rng = np.random.default_rng([cfg.seed, 23])
    d = model.proj.out_dim
    classifier = {"cls.W": rng.normal(0, np.sqrt(1.0 / d), size=(d, len(label_index))),
                  "cls.b": np.zeros(len(label_index))}
    weights = UncertaintyWeights()
    params = dict(model.params())
    params.update(classifier)
    params["eta"] = weights.eta
    adam = AdamState()
    history = []
    batches = _batches(sequences, cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(batches))
        lr = _lr(cfg, epoch)
        for it, b in enumerate(order):
            s, start = batches[b]
            views, labels, tapes = _batch_views(model, sequences[s][start:start + cfg.batch_size],
                                                label_index, k)
            if views is None:
                continue
            logits = views @ classifier["cls.W"] + classifier["cls.b"]
            l_id, g_logits = softmax_cross_entropy(logits, labels)
            l_det = cfg.l_det
            l_total, partials = total_loss(l_det, l_id, weights)
            g_logits = g_logits * partials["l_tcl"]
            grads = _accumulate(model, tapes, g_logits @ classifier["cls.W"].T)
            grads["cls.W"] = views.T @ g_logits
            grads["cls.b"] = g_logits.sum(axis=0)
            grads["eta"] = np.array([partials["eta1"], partials["eta2"]])
            adam_step(params, grads, adam, lr)
            rec = LossRecord(epoch, it, l_id, l_det, l_total, weights.eta1, weights.eta2)
            history.append(rec)
            if progress:
                progress(rec)
    return TrainResult(model, weights, history, init_bank(len(label_index), d), label_index,
                       classifier=classifier)


# -- embeddings and separation ------------------------------------------------

def embed_boxes(model: EmbeddingModel, fmap, boxes: Sequence[BoundingBox]) -> np.ndarray:
    """Per-target embedding: the ``n_keypoints`` views concatenated, then l2-normalized."""
    if not boxes:
        return np.zeros((0, model.offset.n_keypoints * model.proj.out_dim))
    views, _ = forward_batch(fmap, list(boxes), model)
    return normalize_rows(views.reshape(len(boxes), -1))


def separation_ratio(embeddings, labels) -> float:
    """Mean intra-identity cosine distance divided by mean inter-identity cosine distance.

    Embeddings must be unit rows. Pair sums come from per-class vector sums, so
    the cost is linear in the number of embeddings.
    """
    e = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels)
    n = len(e)
    total = e.sum(axis=0)
    sum_all = float(total @ total) - n
    pairs_all = n * (n - 1)
    sum_intra = 0.0
    pairs_intra = 0
    for lab in np.unique(labels):
        s = e[labels == lab].sum(axis=0)
        m = int(np.sum(labels == lab))
        sum_intra += float(s @ s) - m
        pairs_intra += m * (m - 1)
    pairs_inter = pairs_all - pairs_intra
    if pairs_intra == 0 or pairs_inter == 0:
        raise ValueError("need at least two identities with two samples each")
    intra = 1.0 - sum_intra / pairs_intra
    inter = 1.0 - (sum_all - sum_intra) / pairs_inter
    return intra / inter
