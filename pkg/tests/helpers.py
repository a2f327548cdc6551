"""Shared helpers: a least-squares oracle that knows the generator's label lag."""
import numpy as np

from jcafusion.dataio import Dataset, gen_synthetic
from jcafusion.objective import ccc_per_target


def _design(split, which, lag):
    cols = []
    if "a" in which:
        cols.append(split.audio[0])
    if "v" in which:
        cols.append(split.visual[0])
    L = split.labels.shape[1]
    F = np.concatenate(cols, -1)[:, : L - lag]
    F = np.concatenate([F, np.ones(F.shape[:-1] + (1,))], -1)
    Y = split.labels[:, lag:]
    return F.reshape(-1, F.shape[-1]), Y.reshape(-1, 2)


def lstsq_oracle(spec, which):
    """Fit arctanh(labels) on lag-aligned features of ``which`` ('a', 'v' or 'av').

    Returns validation CCC per target and their mean.
    """
    records, _ = gen_synthetic(spec)
    ds = Dataset.from_records(records)
    F, Y = _design(ds.train, which, spec.label_lag)
    W = np.linalg.lstsq(F, np.arctanh(np.clip(Y, -0.999999, 0.999999)), rcond=None)[0]
    Fv, Yv = _design(ds.val, which, spec.label_lag)
    scores = ccc_per_target(np.tanh(Fv @ W), Yv)
    return scores, 0.5 * (scores["valence"] + scores["arousal"])


def planted_track(r, shift, seed):
    """Spiky predictions whose window-(2r+1) median is a clean track; labels trail it by ``shift``.

    Short plateaus of length r+1 alternate between high and low levels so a
    wider window smears them; spikes of length r sit inside long plateaus so a
    narrower window keeps them.
    """
    rng = np.random.default_rng(seed)
    long_len = 4 * r + 6
    first = rng.uniform(-0.5, 0.5)
    levels = [first]
    for i in range(8):
        levels.append(rng.uniform(0.4, 0.9) if i % 2 == 0 else rng.uniform(-0.9, -0.4))
        levels.append(rng.uniform(-0.3, 0.3))
    levels += [rng.uniform(0.4, 0.9), first]  # end on a long plateau so the delay keeps the mean
    clean, spiky = [], []
    for j, v in enumerate(levels):
        if j % 2 == 0:
            seg = np.full(long_len, v)
            clean.append(seg.copy())
            start = r + 1 + rng.integers(0, long_len - 3 * r - 2)
            seg[start:start + r] = -0.95 if v > 0 else 0.95
            spiky.append(seg)
        else:
            clean.append(np.full(r + 1, v))
            spiky.append(np.full(r + 1, v))
    clean, pred = np.concatenate(clean), np.concatenate(spiky)
    gt = np.concatenate([np.full(shift, clean[0]), clean[:-shift]])
    return pred, gt, clean
