"""Preprocessing: shot filtering, temporal jitter, video scale/crop, mel
spectrograms with dB scaling, and time/frequency masking.

Every function is pure given (input, config, rng state). Augmentation draws
are split from application so batch plans can record them and replay
deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SpectrogramConfig:
    n_fft: int = 256
    hop: int = 128
    n_mels: int = 48
    sample_rate: int = 8000
    fmin: float = 0.0
    fmax: float | None = None
    db_floor: float = -80.0

    def __post_init__(self):
        if not self.n_fft >= self.hop > 0:
            raise ValueError(f"need n_fft >= hop > 0, got {self.n_fft}, {self.hop}")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.fmax is not None and self.fmax > self.sample_rate / 2:
            raise ValueError("fmax above Nyquist")

    @property
    def fmax_hz(self):
        return self.sample_rate / 2.0 if self.fmax is None else self.fmax

    @classmethod
    def desk(cls):
        return cls()

    @classmethod
    def paper_audio(cls):
        return cls(n_fft=1024, hop=501, n_mels=96, sample_rate=48000)

    def n_frames(self, n_samples):
        return (n_samples - self.n_fft) // self.hop + 1


@dataclass(frozen=True)
class AugmentConfig:
    snippet_len_s: float = 3.0
    shot_min_s: float = 3.0
    shot_max_s: float = 12.0
    scale_range: tuple = (32, 40)  # short-side targets, desk analog of 256-320
    crop: tuple = (28, 28)
    frames_per_snippet: int = 8
    time_mask_max_frac: float = 0.5
    freq_mask_max_frac: float = 0.5
    mask_fill: float | None = None  # None -> spectrogram db_floor

    def __post_init__(self):
        for frac in (self.time_mask_max_frac, self.freq_mask_max_frac):
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"mask fraction {frac} outside [0, 1]")
        if self.crop[0] > self.scale_range[0] or self.crop[1] > self.scale_range[0]:
            raise ValueError(
                f"crop {self.crop} does not fit the smallest scaled frame "
                f"{self.scale_range[0]}"
            )


@dataclass
class ClipTensors:
    video: np.ndarray      # (frames, H, W, C) in [0, 1]
    audio_mel: np.ndarray  # (n_mels, frames_t) in dB
    shot_id: int
    language: str
    window_offset_s: float


def _duration(shot):
    if isinstance(shot, dict):
        return shot["duration_s"]
    return shot.duration_s


def filter_shots(shots, min_s=3.0, max_s=12.0):
    """Keep shots with min_s <= duration <= max_s (inclusive), order preserved."""
    return [s for s in shots if min_s <= _duration(s) <= max_s]


def temporal_jitter(duration_s, rng, snippet_len_s=3.0):
    """Two independent uniform window offsets within the shot."""
    slack = duration_s - snippet_len_s
    if slack < 0:
        raise ValueError(
            f"shot of {duration_s:.2f}s too short for a {snippet_len_s}s window"
        )
    if slack == 0:
        return 0.0, 0.0
    return float(rng.uniform(0.0, slack)), float(rng.uniform(0.0, slack))


# -- video ---------------------------------------------------------------------


def draw_video_augment(rng, cfg):
    """(short-side target, crop row, crop col) for one snippet."""
    lo, hi = cfg.scale_range
    target = int(rng.integers(lo, hi + 1))
    oy = int(rng.integers(0, target - cfg.crop[0] + 1))
    ox = int(rng.integers(0, target - cfg.crop[1] + 1))
    return target, oy, ox


def _resize_bilinear(frames, out_h, out_w):
    t, h, w, c = frames.shape
    if (h, w) == (out_h, out_w):
        return frames.astype(np.float64, copy=True)
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :, None]
    f = frames.astype(np.float64)
    top = f[:, y0][:, :, x0] * (1 - wx) + f[:, y0][:, :, x1] * wx
    bot = f[:, y1][:, :, x0] * (1 - wx) + f[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def apply_video_augment(frames, draw, cfg):
    """Scale the short side to the drawn target, then crop; same transform for
    every frame in the window."""
    target, oy, ox = draw
    ch, cw = cfg.crop
    if oy + ch > target or ox + cw > target:
        raise ValueError("crop outside scaled frame")
    scaled = _resize_bilinear(frames, target, target)
    return scaled[:, oy : oy + ch, ox : ox + cw, :]


def video_augment(frames, cfg, rng):
    return apply_video_augment(frames, draw_video_augment(rng, cfg), cfg)


# -- audio ---------------------------------------------------------------------


def hann_window(n):
    # periodic Hann; matches the oracle's closed form
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg):
    """(n_mels, n_fft//2+1) triangular bank, HTK mel scale, area-normalized."""
    n_bins = cfg.n_fft // 2 + 1
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2))
    bank = np.zeros((cfg.n_mels, n_bins))
    for k in range(cfg.n_mels):
        lo, mid, hi = pts[k], pts[k + 1], pts[k + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        tri = np.minimum(rising, falling)
        np.maximum(tri, 0.0, out=tri)
        bank[k] = tri * (2.0 / (hi - lo))
    return bank


def mel_spectrogram(wave, cfg, bank=None):
    """(n_mels, frames_t) in dB: Hann window, power spectrum, mel bank, then
    10*log10 clamped at db_floor. No center padding."""
    wave = np.asarray(wave, dtype=np.float64)
    if len(wave) < cfg.n_fft:
        raise ValueError(f"wave of {len(wave)} samples shorter than n_fft={cfg.n_fft}")
    n_frames = cfg.n_frames(len(wave))
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = wave[idx] * hann_window(cfg.n_fft)[None, :]
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    if bank is None:
        bank = mel_filterbank(cfg)
    mel_power = power @ bank.T  # (frames_t, n_mels)
    floor = 10.0 ** (cfg.db_floor / 10.0)
    return 10.0 * np.log10(np.maximum(mel_power, floor)).T


@dataclass(frozen=True)
class MaskSpans:
    t_start: int
    t_width: int
    f_start: int
    f_width: int


def draw_mask(rng, n_mels, frames_t, cfg):
    """One time-axis and one frequency-axis mask span."""
    tw = int(rng.integers(0, int(cfg.time_mask_max_frac * frames_t) + 1))
    fw = int(rng.integers(0, int(cfg.freq_mask_max_frac * n_mels) + 1))
    t0 = int(rng.integers(0, frames_t - tw + 1))
    f0 = int(rng.integers(0, n_mels - fw + 1))
    return MaskSpans(t_start=t0, t_width=tw, f_start=f0, f_width=fw)


def apply_mask(mel_db, spans, fill):
    out = mel_db.copy()
    out[:, spans.t_start : spans.t_start + spans.t_width] = fill
    out[spans.f_start : spans.f_start + spans.f_width, :] = fill
    return out


def spec_mask(mel_db, rng, cfg, fill=None):
    if fill is None:
        fill = -80.0 if cfg.mask_fill is None else cfg.mask_fill
    n_mels, frames_t = mel_db.shape
    return apply_mask(mel_db, draw_mask(rng, n_mels, frames_t, cfg), fill)


def linear_resample(wave, sr_in, sr_out):
    """Linear-interpolation resampler; only used for the 48 kHz preset check."""
    if sr_in == sr_out:
        return np.asarray(wave, dtype=np.float64).copy()
    n_out = int(round(len(wave) * sr_out / sr_in))
    t_out = np.arange(n_out) * (sr_in / sr_out)
    return np.interp(t_out, np.arange(len(wave)), wave)


def sample_window_frames(n_shot_frames, offset_s, fps, n_window_frames, snippet_len_s=3.0):
    """Uniformly spaced frame indices covering one snippet window."""
    span = snippet_len_s * fps
    start = offset_s * fps
    idx = start + np.arange(n_window_frames) * (span / n_window_frames)
    return np.clip(np.floor(idx).astype(int), 0, n_shot_frames - 1)
