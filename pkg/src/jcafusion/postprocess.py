"""Prediction post-processing: median filter, bias centering, scale matching, annotation shift.

The chain is applied in that order.  Its free parameters (median window and
annotation shift) are chosen by exhaustive grid search on a fitting split;
bias and scale are fitted in closed form for each grid cell.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AlignmentError, ConfigError
from .objective import ccc

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PostprocChain:
    median_window: int = 1
    bias: float = 0.0
    scale: float = 1.0
    shift: int = 0

    def __post_init__(self):
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ConfigError(f"median window must be odd and positive, got {self.median_window}")
        if self.scale <= 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if self.shift < 0:
            raise ConfigError(f"shift must be non-negative, got {self.shift}")

    def apply(self, pred, gt=None, segments: Sequence[int] | None = None):
        """Run the chain on ``pred``.

        Without ``gt`` the shift is not applied and the filtered predictions
        are returned.  With ``gt`` the aligned ``(pred, gt)`` pair is returned.
        Scaling is about the track's own mean.  ``segments`` (lengths summing
        to ``len(pred)``) keeps filtering and shifting inside each sequence.
        """
        y = _per_segment(lambda s: median_filter(s, self.median_window), pred, segments)
        if self.bias != 0.0:
            y = y + self.bias
        if self.scale != 1.0:
            m = y.mean()
            y = m + (y - m) * self.scale
        if gt is None:
            return y
        return _shift_segments(y, np.asarray(gt, dtype=np.float64), self.shift, segments)


def _segments(n: int, segments: Sequence[int] | None) -> list[int]:
    if segments is None:
        return [n]
    segments = [int(s) for s in segments]
    if sum(segments) != n:
        raise AlignmentError(f"segment lengths sum to {sum(segments)}, track has {n} samples")
    return segments


def _per_segment(fn, x, segments):
    x = np.asarray(x, dtype=np.float64)
    out, start = [], 0
    for n in _segments(x.size, segments):
        out.append(fn(x[start:start + n]))
        start += n
    return np.concatenate(out) if len(out) > 1 else out[0]


def _shift_segments(pred, gt, shift, segments):
    if pred.shape != gt.shape:
        raise AlignmentError(f"prediction length {pred.size} vs annotation length {gt.size}")
    ps, gs, start = [], [], 0
    for n in _segments(pred.size, segments):
        p, g = time_shift(pred[start:start + n], gt[start:start + n], shift)
        ps.append(p)
        gs.append(g)
        start += n
    return np.concatenate(ps), np.concatenate(gs)


def median_filter(x, window: int) -> np.ndarray:
    """Sliding median with replicate padding; output has the input's length."""
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"median window must be odd and positive, got {window}")
    x = np.asarray(x, dtype=np.float64).ravel()
    if window == 1 or x.size == 0:
        return x.copy()
    r = window // 2
    padded = np.pad(x, r, mode="edge")
    return np.median(sliding_window_view(padded, window), axis=1)


def center_bias(pred, gt) -> np.ndarray:
    """Shift ``pred`` so its mean equals the mean of ``gt``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.size == 0 or gt.size == 0:
        raise AlignmentError("center_bias needs non-empty tracks")
    return pred + (gt.mean() - pred.mean())


def scale_factor(pred, gt) -> tuple[float, bool]:
    """``(std(gt) / std(pred), degenerate)``; a constant ``pred`` gives ``(1.0, True)``."""
    sp = float(np.std(pred))
    if sp == 0.0:
        return 1.0, True
    return float(np.std(gt)) / sp, False


def scale_match(pred, gt) -> np.ndarray:
    """Rescale deviations of ``pred`` about its mean to the spread of ``gt``."""
    pred = np.asarray(pred, dtype=np.float64)
    s, degenerate = scale_factor(pred, gt)
    if degenerate:
        log.warning("scale_match: constant predictions, scale left at 1")
        return pred.copy()
    m = pred.mean()
    return m + (pred - m) * s


def time_shift(pred, gt, shift: int):
    """Pair ``pred[t]`` with ``gt[t + shift]``; both come back with length ``N - shift``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    n = pred.size
    if gt.size != n:
        raise AlignmentError(f"prediction length {n} vs annotation length {gt.size}")
    if not 0 <= shift < n:
        raise ConfigError(f"shift {shift} must lie in [0, {n})")
    return pred[: n - shift], gt[shift:]


def fit_chain(pred, gt, window: int, shift: int, segments=None) -> tuple[PostprocChain, float]:
    """Fit bias and scale for a fixed (window, shift); return the chain and its CCC."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    y = _per_segment(lambda s: median_filter(s, window), pred, segments)
    bias = float(gt.mean() - y.mean())
    s, _ = scale_factor(y, gt)
    chain = PostprocChain(window, bias, s, shift)
    p, g = chain.apply(pred, gt, segments)
    return chain, ccc(p, g).rho_c


def grid_search_postproc(pred, gt, windows: Sequence[int], shifts: Sequence[int],
                         segments: Sequence[int] | None = None) -> PostprocChain:
    """Exhaustive search over (window, shift); ties go to the smaller window, then shift."""
    if not windows or not shifts:
        raise ConfigError("post-processing grids must be non-empty")
    best, best_ccc = None, -np.inf
    for w in sorted(set(windows)):
        for s in sorted(set(shifts)):
            chain, score = fit_chain(pred, gt, w, s, segments)
            if score > best_ccc:
                best, best_ccc = chain, score
    return best


def default_grids(clips_per_second: float, min_segment: int) -> tuple[list[int], list[int]]:
    """Odd windows spanning 0.4-20 s and shifts spanning 0.04-10 s at the given rate.

    Both grids always contain the identity (window 1, shift 0) and are capped
    so every segment keeps at least two samples.
    """
    max_w = max(1, int(round(20.0 * clips_per_second)))
    min_w = max(1, int(round(0.4 * clips_per_second)))
    max_w = min(max_w, min_segment if min_segment % 2 else min_segment - 1)
    windows = sorted({1} | {w for w in range(min_w, max_w + 1) if w % 2 == 1})
    max_s = min(int(round(10.0 * clips_per_second)), max(min_segment - 2, 0))
    min_s = max(1, int(round(0.04 * clips_per_second)))
    shifts = sorted({0} | set(range(min_s, max_s + 1)))
    return windows, shifts


def save_chains(path, chains: dict) -> None:
    Path(path).write_text(json.dumps({k: asdict(c) for k, c in chains.items()}, indent=2, sort_keys=True) + "\n")


def load_chains(path) -> dict:
    raw = json.loads(Path(path).read_text())
    return {k: PostprocChain(**v) for k, v in raw.items()}
