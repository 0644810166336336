"""Central finite-difference checks for the contrastive loss and the weighted total loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import BoundingBox
from .embed import backward_views, forward_batch, init_model
from .mtcl import TrajectoryCenterBank, UncertaintyWeights, tcl_loss, total_loss

REL_TOL = 1e-4
ABS_FLOOR = 1e-7
STEP = 1e-6


@dataclass
class CheckReport:
    """Worst error per parameter name over all checked configurations."""

    max_rel: dict = field(default_factory=dict)
    max_abs: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)  # (config index, name, index, analytic, numeric)
    n_configs: int = 0
    n_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures

    def record(self, cfg_idx, name, idx, analytic, numeric):
        err = abs(analytic - numeric)
        rel = err / max(abs(analytic), abs(numeric), 1e-300)
        self.max_abs[name] = max(self.max_abs.get(name, 0.0), err)
        # below ABS_FLOOR / REL_TOL the absolute floor is the binding test, so
        # only larger gradients contribute to the reported relative error
        if max(abs(analytic), abs(numeric)) >= ABS_FLOOR / REL_TOL:
            self.max_rel[name] = max(self.max_rel.get(name, 0.0), rel)
        else:
            self.max_rel.setdefault(name, 0.0)
        self.n_checked += 1
        if err > ABS_FLOOR and rel > REL_TOL:
            self.failures.append((cfg_idx, name, idx, analytic, numeric))

    def lines(self) -> list[str]:
        out = [f"configs={self.n_configs} entries={self.n_checked} failures={len(self.failures)}"]
        for name in sorted(self.max_rel):
            out.append(f"{name:10s} max_rel={self.max_rel[name]:.3e} max_abs={self.max_abs[name]:.3e}")
        return out


def random_problem(seed: int):
    """A small random model, feature map, boxes and memory bank.

    Biases are randomized so that no ReLU sits exactly at its kink and no
    normalization sees a zero vector.
    """
    rng = np.random.default_rng([seed, 991])
    c = int(rng.integers(1, 6))
    k = int(rng.integers(1, 5))
    model = init_model(c, k, hidden=tuple(int(h) for h in rng.integers(2, 8, 2)),
                       pre_dim=int(rng.integers(2, 7)), out_dim=int(rng.integers(2, 7)),
                       rng=rng, offset_init_std=0.3)
    for b in model.proj.biases:
        b[:] = rng.normal(0.0, 0.5, b.shape)
    fmap = rng.normal(size=(10, 12, c))
    boxes = [BoundingBox(*rng.uniform(0.5, 5.0, 2), *rng.uniform(2.5, 6.0, 2))
             for _ in range(int(rng.integers(1, 3)))]
    n_traj = int(rng.integers(2, 5))
    centers = rng.normal(size=(n_traj, model.proj.out_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    if n_traj > 2:
        centers[-1] = 0.0  # an untouched center, excluded from the denominator
    bank = TrajectoryCenterBank(centers, np.zeros(n_traj, dtype=int))
    labels = np.repeat(rng.integers(0, 2, len(boxes)), k)
    tau = float(rng.uniform(0.1, 1.0))
    return model, fmap, boxes, bank, labels, tau


def check_tcl(seed: int, report: CheckReport, corrupt: str | None = None) -> None:
    model, fmap, boxes, bank, labels, tau = random_problem(seed)

    def loss():
        v, _ = forward_batch(fmap, boxes, model)
        return tcl_loss(v, labels, bank, tau)[0]

    views, tape = forward_batch(fmap, boxes, model)
    _, g_views = tcl_loss(views, labels, bank, tau)
    grads = backward_views(tape, g_views)
    if corrupt in grads:
        grads[corrupt] = grads[corrupt] * 1.5 + 1e-3
    for name, p in model.params().items():
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + STEP
            lp = loss()
            p[idx] = orig - STEP
            lm = loss()
            p[idx] = orig
            report.record(seed, name, idx, float(grads[name][idx]), (lp - lm) / (2 * STEP))


def check_total(seed: int, report: CheckReport, corrupt: str | None = None) -> None:
    rng = np.random.default_rng([seed, 992])
    l_det, l_tcl = rng.uniform(0.0, 5.0, 2)
    eta = rng.normal(0.0, 1.0, 2)
    _, partials = total_loss(l_det, l_tcl, UncertaintyWeights(eta.copy()))
    if corrupt in partials:
        partials[corrupt] = partials[corrupt] * 1.5 + 1e-3

    def value(d, t, e):
        return total_loss(d, t, UncertaintyWeights(np.asarray(e, dtype=float)))[0]

    for name, fp in (
        ("eta1", lambda h: value(l_det, l_tcl, eta + [h, 0])),
        ("eta2", lambda h: value(l_det, l_tcl, eta + [0, h])),
        ("l_det", lambda h: value(l_det + h, l_tcl, eta)),
        ("l_tcl", lambda h: value(l_det, l_tcl + h, eta)),
    ):
        numeric = (fp(STEP) - fp(-STEP)) / (2 * STEP)
        report.record(seed, name, (), partials[name], numeric)


def run(n_configs: int = 100, seed: int = 0, corrupt: str | None = None) -> CheckReport:
    report = CheckReport(n_configs=n_configs)
    for i in range(n_configs):
        check_tcl(seed * 100003 + i, report, corrupt)
        check_total(seed * 100003 + i, report, corrupt)
    return report
