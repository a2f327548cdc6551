"""Concordance correlation coefficient, as a metric and as a training loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, DimensionError
from .linalg_ad import Node

log = logging.getLogger(__name__)

# below this the CCC denominator is treated as zero (both tracks constant, equal means)
DEGENERATE_EPS = 1e-15

TARGETS = ("valence", "arousal")


@dataclass(frozen=True)
class CccReport:
    rho_c: float
    mu_x: float
    mu_y: float
    var_x: float
    var_y: float
    cov_xy: float
    n: int
    degenerate: bool = False

    def reconstruct(self) -> float:
        """Recompute rho_c from the stored moments."""
        denom = self.var_x + self.var_y + (self.mu_x - self.mu_y) ** 2
        if denom < DEGENERATE_EPS:
            return 0.0
        return 2.0 * self.cov_xy / denom


def _moments(x: np.ndarray, y: np.ndarray):
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    return mx, my, np.mean(dx * dx), np.mean(dy * dy), np.mean(dx * dy)


def ccc(x, y) -> CccReport:
    """Concordance correlation coefficient between two equal-length tracks.

    Uses population (1/N) moments.  When both tracks are constant with equal
    means the coefficient is undefined; it is reported as 0 with
    ``degenerate=True``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise AlignmentError(f"ccc: length mismatch {x.size} vs {y.size}")
    if x.size < 2:
        raise AlignmentError(f"ccc needs at least 2 samples, got {x.size}")
    mx, my, vx, vy, cxy = _moments(x, y)
    denom = vx + vy + (mx - my) ** 2
    if denom < DEGENERATE_EPS:
        return CccReport(0.0, mx, my, vx, vy, cxy, x.size, True)
    rho = 2.0 * cxy / denom
    # rounding can push |rho| a hair past 1 for identical tracks
    rho = float(min(1.0, max(-1.0, rho)))
    return CccReport(rho, float(mx), float(my), float(vx), float(vy), float(cxy), x.size)


def ccc_per_target(pred, gt) -> dict[str, float]:
    """Valence/arousal CCC of two ``N x 2`` arrays (any leading axes are flattened)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    return {t: ccc(pred[:, j], gt[:, j]).rho_c for j, t in enumerate(TARGETS)}


class CccLossNode(Node):
    __slots__ = ("degenerate", "rho")


def ccc_loss(pred: Node, gt) -> CccLossNode:
    """Mean over targets of ``1 - rho_c``.

    ``pred`` has two columns (valence, arousal); leading batch axes are
    flattened so the coefficient is computed over every clip in the batch.
    A target with a degenerate denominator contributes 1.0 and gets no
    gradient; ``degenerate`` on the returned node records which ones did.
    """
    if pred.cols != 2:
        raise DimensionError(f"ccc_loss expects 2 prediction columns, got {pred.cols}")
    p = pred.value.reshape(-1, 2)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if p.shape != g.shape:
        raise AlignmentError(f"ccc_loss: prediction rows {p.shape[0]} vs ground truth rows {g.shape[0]}")
    n = p.shape[0]
    if n < 2:
        raise AlignmentError("ccc_loss needs at least 2 clips")

    grad_p = np.zeros_like(p)
    loss = 0.0
    rhos, flags = [], []
    for j in range(2):
        x, y = p[:, j], g[:, j]
        mx, my, vx, vy, cxy = _moments(x, y)
        denom = vx + vy + (mx - my) ** 2
        if denom < DEGENERATE_EPS:
            flags.append(True)
            rhos.append(0.0)
            loss += 0.5
            log.warning("degenerate CCC denominator for %s; loss term set to 1", TARGETS[j])
            continue
        flags.append(False)
        rho = 2.0 * cxy / denom
        rhos.append(rho)
        loss += 0.5 * (1.0 - rho)
        # d rho / d x_i = 2/N * [ (y_i - my)/D - cov * (2(x_i - mx) + 2(mx - my)) / D^2 ]
        drho = (2.0 / n) * ((y - my) / denom - cxy * (2.0 * (x - mx) + 2.0 * (mx - my)) / denom**2)
        grad_p[:, j] = -0.5 * drho

    out = CccLossNode(np.array([[loss]]), "ccc_loss", (pred,))
    out.degenerate = tuple(flags)
    out.rho = tuple(rhos)
    shape = pred.value.shape

    def _bw(upstream):
        pred.grad = pred.grad + upstream.reshape(()) * grad_p.reshape(shape)

    out._backward = _bw
    return out
