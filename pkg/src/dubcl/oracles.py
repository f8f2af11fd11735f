"""Independent reference implementations used to cross-check production code.

Nothing here shares a code path with the modules it verifies: the pair-loss
oracle exponentiates every pair explicitly (no log-sum-exp), the spectrogram
oracle evaluates a dense DFT matrix per frame (no fft), and the finite
difference helper never touches the autodiff graph.
"""

from __future__ import annotations

import math

import numpy as np


def finite_difference_grad(f, x, h=1e-4):
    """Central-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return g


def instance_loss_brute(i, zv, za, tau):
    """Temperature-scaled cross-entropy for instance i, pair set enumerated."""
    b = zv.shape[0]
    pos = math.exp(float(zv[i] @ za[i]) / tau)
    denom = pos
    for j in range(b):
        if j == i:
            continue
        denom += math.exp(float(zv[i] @ za[j]) / tau)
        denom += math.exp(float(zv[j] @ za[i]) / tau)
    return -math.log(pos / denom)


def cross_modal_loss_brute(zvp, zvs, zap, zas, tau):
    b = zvp.shape[0]
    total = 0.0
    for i in range(b):
        total += instance_loss_brute(i, zvp, zas, tau)
        total += instance_loss_brute(i, zvs, zap, tau)
    return 0.5 * total


def within_modal_losses_brute(zvp, zvs, zap, zas, tau):
    b = zvp.shape[0]
    lv = sum(instance_loss_brute(i, zvp, zvs, tau) for i in range(b))
    la = sum(instance_loss_brute(i, zap, zas, tau) for i in range(b))
    return lv, la


def _hz_to_mel(f):
    return 2595.0 * math.log10(1.0 + f / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def dft_mel_spectrogram(wave, n_fft, hop, n_mels, sample_rate, fmin=0.0,
                        fmax=None, db_floor=-80.0):
    """Mel spectrogram in dB via an explicit DFT matrix and per-filter loops."""
    wave = np.asarray(wave, dtype=np.float64)
    if fmax is None:
        fmax = sample_rate / 2.0
    n_frames = (len(wave) - n_fft) // hop + 1
    n_bins = n_fft // 2 + 1

    n = np.arange(n_fft)
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / n_fft)  # periodic Hann
    dft = np.exp(-2j * np.pi * np.outer(np.arange(n_bins), n) / n_fft)

    power = np.zeros((n_bins, n_frames))
    for t in range(n_frames):
        frame = wave[t * hop : t * hop + n_fft] * window
        spec = dft @ frame
        power[:, t] = np.abs(spec) ** 2

    freqs = np.arange(n_bins) * sample_rate / n_fft
    mel_pts = np.array(
        [_mel_to_hz(m) for m in np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)]
    )
    mel_power = np.zeros((n_mels, n_frames))
    for k in range(n_mels):
        lo, mid, hi = mel_pts[k], mel_pts[k + 1], mel_pts[k + 2]
        weights = np.zeros(n_bins)
        for b in range(n_bins):
            f = freqs[b]
            if lo < f <= mid and mid > lo:
                weights[b] = (f - lo) / (mid - lo)
            elif mid < f < hi and hi > mid:
                weights[b] = (hi - f) / (hi - mid)
        weights *= 2.0 / (hi - lo)  # Slaney-style area normalization
        mel_power[k] = weights @ power

    floor = 10.0 ** (db_floor / 10.0)
    return 10.0 * np.log10(np.maximum(mel_power, floor))
