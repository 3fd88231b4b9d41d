"""Independent oracles shared across test modules.

These stay deliberately dumb: brute-force loops, central finite differences,
dense threshold sweeps. They never call the code paths they check.
"""

from __future__ import annotations

import numpy as np


def fd_gradient(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function of a float64 array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def fd_param_gradient(loss_fn, param, h: float = 1e-4) -> np.ndarray:
    """Central finite differences w.r.t. a float32-stored Param.

    Perturbed values round to float32, so the realized step (read back from
    storage) divides the difference instead of the nominal 2h.
    """
    base = param.value.copy()
    flat_base = base.reshape(-1)
    g = np.zeros(flat_base.size, dtype=np.float64)
    for i in range(flat_base.size):
        vp = flat_base.copy()
        vp[i] = np.float32(np.float64(vp[i]) + h)
        param.assign(vp.reshape(base.shape))
        xp = np.float64(param.value.reshape(-1)[i])
        fp = loss_fn()
        vm = flat_base.copy()
        vm[i] = np.float32(np.float64(vm[i]) - h)
        param.assign(vm.reshape(base.shape))
        xm = np.float64(param.value.reshape(-1)[i])
        fm = loss_fn()
        g[i] = (fp - fm) / (xp - xm)
    param.assign(base)
    return g.reshape(base.shape)


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Elementwise relative error with a scale-aware floor, maximized.

    Components tiny relative to the largest entry are compared absolutely
    against that floor, so a near-zero gradient entry does not blow up the
    ratio."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6 * scale)
    return float(np.max(np.abs(a - b) / denom))


def fft_peak_hz(samples: np.ndarray, rate_hz: int) -> float:
    """Frequency of the dominant spectral peak, by zero-padded FFT argmax."""
    x = np.asarray(samples, dtype=np.float64)
    n = int(2 ** np.ceil(np.log2(max(len(x), 16))) * 4)
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x)), n))
    return float(np.argmax(spec) * rate_hz / n)


def frame_energies(samples: np.ndarray, frame: int) -> np.ndarray:
    """Mean squared amplitude per non-overlapping frame."""
    x = np.asarray(samples, dtype=np.float64)
    n = len(x) // frame
    return np.array([float(np.mean(x[i * frame:(i + 1) * frame] ** 2)) for i in range(n)])


def pairwise_auc(scores_pos, scores_neg) -> float:
    """Mann-Whitney statistic P(s+ > s-) + 0.5 P(s+ = s-) by explicit loops."""
    wins = 0.0
    for sp in scores_pos:
        for sn in scores_neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (len(scores_pos) * len(scores_neg))


def dense_sweep_eer(scores, labels, n_thresholds: int = 100_000) -> float:
    """EER by dense threshold sweep: value of FPR at the |FPR-FNR| minimum."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    ts = np.linspace(0.0, 1.0, n_thresholds)
    fpr = np.array([(neg > t).mean() for t in ts])
    fnr = np.array([(pos <= t).mean() for t in ts])
    i = int(np.argmin(np.abs(fpr - fnr)))
    return float((fpr[i] + fnr[i]) / 2.0)
