"""Procedural counterfactual-scene corpus: titles -> shots -> one video track
plus one audio track per language, where alternate-language tracks share a
sample-identical background and differ only inside speech segments.

Scene class drives the background band (audio) and the plaid texture
(video); language drives the speech pitch palette and rhythm; keyword id
drives the syllable ordering. Every title's randomness derives from its own
subseed, so titles can be generated in any order or in parallel with
identical output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import signal

from . import blobio

LANGUAGES = ("L0", "L1", "L2", "L3", "L4", "L5", "L6")

# eligibility window applied by the feature pipeline; the generator
# guarantees a minimum number of in-window shots per title
SHOT_MIN_S = 3.0
SHOT_MAX_S = 12.0

MANIFEST_VERSION = 1
PEAK_TARGET = 0.9

# per-language speech voice: fundamental (Hz), syllables/s, harmonic tilt,
# palette permutation over the shared interval ratios
_F0 = (150.0, 185.0, 215.0, 250.0, 295.0, 345.0, 410.0)
_SYL_RATE = (5.0, 6.5, 7.5, 4.0, 8.0, 5.5, 7.0)
_TILT = (0.8, 1.2, 1.0, 1.5, 0.7, 1.1, 0.9)
_RATIOS = (1.0, 1.125, 1.25, 1.5, 1.6875)
_PALETTE_PERM = (
    (0, 1, 2, 3, 4), (4, 3, 2, 1, 0), (2, 0, 4, 1, 3), (1, 4, 0, 3, 2),
    (3, 2, 1, 4, 0), (0, 2, 4, 1, 3), (4, 1, 3, 0, 2),
)

# audio scene signature: background band center ramps with scene class
_BAND_BASE_HZ = 300.0
_BAND_STEP_HZ = 340.0
_BAND_WIDTH_HZ = 250.0
_PING_HZ = 1000.0
_PING_LEN_S = 0.12
_BG_RMS = 0.1

# video geometry of the flash and mouth regions (rows, cols)
_FLASH_REGION = (slice(4, 14), slice(4, 14))
_FLASH_LEN_S = 0.25
_MOUTH_REGION = (slice(24, 29), slice(12, 20))


@dataclass(frozen=True)
class GeneratorConfig:
    n_titles: int = 64
    n_scene_classes: int = 8
    n_keywords: int = 10
    n_languages: int = 7
    multilingual_fraction: float = 0.25
    shots_per_title: tuple = (20, 60)
    duration_range: tuple = (1.0, 16.0)
    fps: int = 8
    frame_size: int = 32
    sample_rate: int = 8000
    speech_gain_db: float = 0.0
    min_eligible_shots: int = 8
    sampler_groups: int = 8

    def validate(self):
        if self.n_scene_classes < 2:
            raise ValueError(f"need >= 2 scene classes, got {self.n_scene_classes}")
        if self.n_keywords < 2:
            raise ValueError(f"need >= 2 keywords, got {self.n_keywords}")
        if self.n_titles < self.sampler_groups:
            raise ValueError(
                f"need >= {self.sampler_groups} titles for {self.sampler_groups} "
                f"batch groups, got {self.n_titles}"
            )
        if not 1 <= self.n_languages <= len(LANGUAGES):
            raise ValueError(f"n_languages must be in [1, {len(LANGUAGES)}]")
        hi_center = _BAND_BASE_HZ + _BAND_STEP_HZ * (self.n_scene_classes - 1)
        if hi_center + _BAND_WIDTH_HZ / 2 >= self.sample_rate / 2:
            raise ValueError("scene-class bands exceed Nyquist; raise sample_rate")

    @property
    def language_universe(self):
        return LANGUAGES[: self.n_languages]


@dataclass(frozen=True)
class TitleStyle:
    hue: tuple           # per-channel texture gain
    phase: tuple         # plaid phase offsets
    drift: float         # texture phase drift per second
    resonance_hz: float  # title-wide acoustic signature band
    speakers: tuple      # per-speaker pitch multipliers


@dataclass(frozen=True)
class SpeechSegment:
    start_s: float
    end_s: float
    keyword_id: int
    speaker_id: int


@dataclass(frozen=True)
class SceneShot:
    shot_id: int
    title_id: int
    duration_s: float
    scene_class: int
    event_times: tuple
    speech_plan: tuple
    background_seed: int


@dataclass(frozen=True)
class TitleSpec:
    title_id: int
    style: TitleStyle
    n_shots: int
    available_languages: tuple  # original language first
    genre_like_tag: int


@dataclass
class AudioTrackSpec:
    shot_id: int
    language: str
    waveform: np.ndarray
    sample_rate: int
    background: np.ndarray | None = None
    speech: np.ndarray | None = None


def strip_speech(track):
    """Background-only version of a track via the generator-retained split."""
    if track.background is None:
        raise ValueError("strip_speech needs the generator-retained background component")
    bg = track.background
    return AudioTrackSpec(
        shot_id=track.shot_id,
        language=track.language,
        waveform=bg.copy(),
        sample_rate=track.sample_rate,
        background=bg.copy(),
        speech=np.zeros_like(bg),
    )


def keyword_pattern(keyword_id, length=6):
    """Deterministic syllable-ordering pattern for one keyword."""
    return tuple((keyword_id * (j + 1) + j * j) % len(_RATIOS) for j in range(length))


def speech_envelope(shot, times):
    """Language-independent amplitude envelope from segment timing alone."""
    env = np.zeros_like(times)
    for seg in shot.speech_plan:
        ramp = min(0.05, (seg.end_s - seg.start_s) / 4)
        up = np.clip((times - seg.start_s) / ramp, 0.0, 1.0)
        down = np.clip((seg.end_s - times) / ramp, 0.0, 1.0)
        env = np.maximum(env, np.minimum(up, down))
    return env


# -- video ---------------------------------------------------------------------


def render_shot_video(shot, style, cfg):
    """(T, H, W, 3) uint8 frames; texture from (scene_class, style), flashes
    at event times, mouth patch tracking the speech envelope."""
    size = cfg.frame_size
    n_frames = int(round(shot.duration_s * cfg.fps))
    t_frames = np.arange(n_frames) / cfg.fps

    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    fx = 1.0 + (shot.scene_class % 4)
    fy = 1.0 + (shot.scene_class // 4) * 1.5
    phase_t = style.drift * t_frames[:, None, None]
    tex = 0.5 + 0.22 * np.sin(
        2 * np.pi * fx * xx / size + style.phase[0] + phase_t
    ) * np.cos(2 * np.pi * fy * yy / size + style.phase[1])

    frames = tex[:, :, :, None] * np.asarray(style.hue)[None, None, None, :]

    flash = np.zeros(n_frames)
    for e in shot.event_times:
        flash += ((t_frames >= e) & (t_frames < e + _FLASH_LEN_S)).astype(float)
    frames[:, _FLASH_REGION[0], _FLASH_REGION[1], :] += 0.35 * np.clip(flash, 0, 1)[
        :, None, None, None
    ]

    env = speech_envelope(shot, t_frames)
    frames[:, _MOUTH_REGION[0], _MOUTH_REGION[1], :] = (
        0.15 + 0.7 * env[:, None, None, None]
    )

    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- audio ---------------------------------------------------------------------


def _render_background(shot, style, cfg):
    sr = cfg.sample_rate
    n = int(round(shot.duration_s * sr))
    rng = np.random.default_rng(shot.background_seed)
    white = rng.standard_normal(n)

    center = _BAND_BASE_HZ + _BAND_STEP_HZ * shot.scene_class
    sos = signal.butter(
        2, [center - _BAND_WIDTH_HZ / 2, center + _BAND_WIDTH_HZ / 2],
        btype="bandpass", fs=sr, output="sos",
    )
    bg = signal.sosfilt(sos, white)

    res = signal.butter(
        2, [style.resonance_hz - 60.0, style.resonance_hz + 60.0],
        btype="bandpass", fs=sr, output="sos",
    )
    bg = bg + 0.3 * signal.sosfilt(res, white)

    ping_t = np.arange(int(_PING_LEN_S * sr)) / sr
    ping = np.sin(2 * np.pi * _PING_HZ * ping_t) * np.exp(-ping_t / 0.03)
    for e in shot.event_times:
        i0 = int(round(e * sr))
        seg = ping[: n - i0]
        bg[i0 : i0 + len(seg)] += 0.8 * seg

    rms = np.sqrt(np.mean(bg**2))
    return bg * (_BG_RMS / max(rms, 1e-12))


def _render_speech(shot, language, style, cfg):
    sr = cfg.sample_rate
    n = int(round(shot.duration_s * sr))
    out = np.zeros(n)
    lang_idx = LANGUAGES.index(language)
    f0 = _F0[lang_idx]
    rate = _SYL_RATE[lang_idx]
    tilt = _TILT[lang_idx]
    perm = _PALETTE_PERM[lang_idx]

    for seg in shot.speech_plan:
        pattern = keyword_pattern(seg.keyword_id)
        mult = style.speakers[seg.speaker_id]
        syl_len = 1.0 / rate
        t0 = seg.start_s
        j = 0
        while t0 < seg.end_s - 0.02:
            dur = min(syl_len, seg.end_s - t0)
            i0 = int(round(t0 * sr))
            i1 = min(int(round((t0 + dur) * sr)), n)
            if i1 <= i0:
                break
            tt = np.arange(i1 - i0) / sr
            freq = f0 * mult * _RATIOS[perm[pattern[j % len(pattern)]]]
            env = np.sin(np.pi * np.arange(i1 - i0) / (i1 - i0)) ** 2
            sig = np.zeros(i1 - i0)
            for h in range(1, 5):
                sig += h**-tilt * np.sin(2 * np.pi * freq * h * tt)
            out[i0:i1] += env * sig
            t0 += syl_len
            j += 1
    return out


def render_shot_tracks(shot, title, cfg):
    """Background plus one speech component per title language, jointly scaled
    so the loudest track peaks at 0.9 and all tracks share the same background
    samples."""
    bg = _render_background(shot, title.style, cfg)
    speeches = {}
    for lang in title.available_languages:
        sp = _render_speech(shot, lang, title.style, cfg)
        active = sp != 0.0
        if active.any():
            sp_rms = np.sqrt(np.mean(sp[active] ** 2))
            target = _BG_RMS * 10.0 ** (cfg.speech_gain_db / 20.0)
            sp = sp * (target / max(sp_rms, 1e-12))
        speeches[lang] = sp

    peak = max(np.abs(bg + sp).max() for sp in speeches.values())
    scale = PEAK_TARGET / max(peak, 1e-12)
    bg = bg * scale
    return bg, {lang: sp * scale for lang, sp in speeches.items()}


def render_shot_audio(shot, language, title, cfg):
    """Single-track render; regenerates the shot's components on the fly."""
    if language not in title.available_languages:
        raise ValueError(
            f"language {language!r} not available for title {title.title_id} "
            f"(has {title.available_languages})"
        )
    bg, speeches = render_shot_tracks(shot, title, cfg)
    sp = speeches[language]
    return AudioTrackSpec(
        shot_id=shot.shot_id,
        language=language,
        waveform=bg + sp,
        sample_rate=cfg.sample_rate,
        background=bg,
        speech=sp,
    )


# -- specs ---------------------------------------------------------------------


def _draw_style(rng):
    hue = 0.45 + 0.55 * rng.random(3)
    n_speakers = int(rng.integers(1, 4))
    return TitleStyle(
        hue=tuple(hue.tolist()),
        phase=tuple((2 * np.pi * rng.random(2)).tolist()),
        drift=float(rng.uniform(0.0, 0.35)),
        resonance_hz=float(rng.uniform(3000.0, 3700.0)),
        speakers=tuple((0.8 + 0.5 * rng.random(n_speakers)).tolist()),
    )


def _draw_duration(rng, cfg, force_eligible):
    lo, hi = cfg.duration_range
    if force_eligible:
        lo_e = max(lo, SHOT_MIN_S)
        hi_e = min(hi, SHOT_MAX_S)
        # conditioned uniform: rejection-sample the plain draw
        for _ in range(1000):
            d = float(rng.uniform(lo, hi))
            if lo_e <= d <= hi_e:
                return d
        return float(rng.uniform(lo_e, hi_e))
    return float(rng.uniform(lo, hi))


def _draw_shot(rng, cfg, shot_id, title, force_eligible):
    duration = _draw_duration(rng, cfg, force_eligible)
    scene_class = int(rng.integers(cfg.n_scene_classes))

    n_events = int(rng.integers(0, max(1, int(duration / 4)) + 1))
    if n_events:
        events = np.unique(rng.uniform(0.2, duration - 0.3, n_events))
        event_times = tuple(float(e) for e in events)
    else:
        event_times = ()

    segments = []
    cursor = float(rng.uniform(0.1, 0.6))
    while cursor + 0.5 < duration:
        seg_len = float(rng.uniform(0.5, 1.2))
        end = min(cursor + seg_len, duration - 0.05)
        if end - cursor >= 0.3:
            segments.append(
                SpeechSegment(
                    start_s=cursor,
                    end_s=end,
                    keyword_id=int(rng.integers(cfg.n_keywords)),
                    speaker_id=int(rng.integers(len(title.style.speakers))),
                )
            )
        cursor = end + float(rng.uniform(0.15, 0.6))

    return SceneShot(
        shot_id=shot_id,
        title_id=title.title_id,
        duration_s=duration,
        scene_class=scene_class,
        event_times=event_times,
        speech_plan=tuple(segments),
        background_seed=int(rng.integers(0, 2**63 - 1)),
    )


def _draw_titles(cfg, seed):
    """Universe-level draws: which titles are multilingual and their languages."""
    root = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    n_multi = int(round(cfg.n_titles * cfg.multilingual_fraction))
    multi_ids = set(root.permutation(cfg.n_titles)[:n_multi].tolist())

    universe = cfg.language_universe
    # extra-track count for multilingual titles, tuned to average ~2.8 tracks
    k_weights = np.array([0.60, 0.20, 0.08, 0.05, 0.04, 0.03])[: max(cfg.n_languages - 1, 1)]
    k_weights = k_weights / k_weights.sum()

    titles = []
    for title_id in range(cfg.n_titles):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, title_id)))
        original = universe[int(rng.integers(len(universe)))]
        langs = [original]
        if title_id in multi_ids and len(universe) > 1:
            n_extra = 1 + int(rng.choice(len(k_weights), p=k_weights))
            n_extra = min(n_extra, len(universe) - 1)
            others = [l for l in universe if l != original]
            extra = rng.choice(len(others), size=n_extra, replace=False)
            langs.extend(others[i] for i in sorted(extra.tolist()))
        titles.append(
            TitleSpec(
                title_id=title_id,
                style=_draw_style(rng),
                n_shots=int(rng.integers(cfg.shots_per_title[0], cfg.shots_per_title[1] + 1)),
                available_languages=tuple(langs),
                genre_like_tag=int(rng.integers(4)),
            )
        )
    return titles


# -- dataset writer --------------------------------------------------------------


class DatasetManifest:
    """Parsed manifest plus windowed readers over the media blobs."""

    def __init__(self, root, payload):
        self.root = Path(root)
        self.version = payload["version"]
        self.seed = payload["seed"]
        self.config = GeneratorConfig(
            **{
                k: tuple(v) if isinstance(v, list) else v
                for k, v in payload["config"].items()
            }
        )
        self.titles = payload["titles"]
        self._shots = {}
        for title in self.titles:
            for shot in title["shots"]:
                self._shots[shot["shot_id"]] = (title, shot)

    @classmethod
    def load(cls, path):
        path = Path(path)
        manifest_file = path / "manifest.json" if path.is_dir() else path
        with open(manifest_file, encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {payload.get('version')}")
        return cls(manifest_file.parent, payload)

    def shot_record(self, shot_id):
        return self._shots[shot_id]

    def shot_ids(self):
        return sorted(self._shots)

    def _media_path(self, media):
        return self.root / media["path"]

    def load_video(self, shot_id):
        _, shot = self.shot_record(shot_id)
        return blobio.read_blob(self._media_path(shot["media"]["video"]))

    def load_video_frames(self, shot_id, start, stop):
        _, shot = self.shot_record(shot_id)
        return blobio.read_rows(self._media_path(shot["media"]["video"]), start, stop)

    def load_background(self, shot_id):
        _, shot = self.shot_record(shot_id)
        return blobio.read_blob(self._media_path(shot["media"]["background"])).astype(np.float64)

    def load_speech(self, shot_id, language):
        _, shot = self.shot_record(shot_id)
        return blobio.read_blob(
            self._media_path(shot["media"]["speech"][language])
        ).astype(np.float64)

    def load_track(self, shot_id, language):
        bg = self.load_background(shot_id)
        sp = self.load_speech(shot_id, language)
        return AudioTrackSpec(
            shot_id=shot_id,
            language=language,
            waveform=bg + sp,
            sample_rate=self.config.sample_rate,
            background=bg,
            speech=sp,
        )

    def load_audio_window(self, shot_id, language, start, n_samples, speech_stripped=False):
        """Waveform window [start, start+n) built from the component blobs."""
        _, shot = self.shot_record(shot_id)
        media = shot["media"]
        bg = blobio.read_rows(self._media_path(media["background"]), start, start + n_samples)
        bg = bg.astype(np.float64)
        if speech_stripped:
            return bg
        sp = blobio.read_rows(
            self._media_path(media["speech"][language]), start, start + n_samples
        )
        return bg + sp.astype(np.float64)


def generate_dataset(cfg, seed, out_dir):
    """Write manifest.json plus per-shot media blobs; fully deterministic."""
    cfg.validate()
    out = Path(out_dir)
    media_dir = out / "media"
    media_dir.mkdir(parents=True, exist_ok=True)

    titles = _draw_titles(cfg, seed)
    title_records = []
    shot_id = 0
    for title in titles:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, title.title_id)))
        tdir = media_dir / f"t{title.title_id:03d}"
        tdir.mkdir(exist_ok=True)
        shot_records = []
        for local_idx in range(title.n_shots):
            shot = _draw_shot(
                rng, cfg, shot_id, title, force_eligible=local_idx < cfg.min_eligible_shots
            )
            shot_id += 1

            video = render_shot_video(shot, title.style, cfg)
            bg, speeches = render_shot_tracks(shot, title, cfg)

            base = f"t{title.title_id:03d}/s{shot.shot_id:05d}"
            video_path = f"media/{base}.video.dclb"
            bg_path = f"media/{base}.bg.dclb"
            blobio.write_blob(out / video_path, video)
            blobio.write_blob(out / bg_path, bg.astype(np.float32))
            speech_media = {}
            for lang, sp in speeches.items():
                sp_path = f"media/{base}.speech.{lang}.dclb"
                blobio.write_blob(out / sp_path, sp.astype(np.float32))
                speech_media[lang] = _media_record(sp_path, "f4", (len(sp),))

            shot_records.append(
                {
                    "shot_id": shot.shot_id,
                    "duration_s": shot.duration_s,
                    "scene_class": shot.scene_class,
                    "event_times": list(shot.event_times),
                    "segments": [
                        [s.start_s, s.end_s, s.keyword_id, s.speaker_id]
                        for s in shot.speech_plan
                    ],
                    "background_seed": shot.background_seed,
                    "media": {
                        "video": _media_record(video_path, "u1", video.shape),
                        "background": _media_record(bg_path, "f4", (len(bg),)),
                        "speech": speech_media,
                    },
                }
            )
        title_records.append(
            {
                "title_id": title.title_id,
                "languages": list(title.available_languages),
                "genre_like_tag": title.genre_like_tag,
                "style": asdict(title.style),
                "shots": shot_records,
            }
        )

    payload = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "config": asdict(cfg),
        "titles": title_records,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return DatasetManifest(out, payload)


def _media_record(path, dtype, shape):
    return {
        "path": path,
        "dtype": dtype,
        "shape": list(int(s) for s in shape),
        "payload_offset": blobio.header_size(len(shape)),
    }


def shot_from_record(record, title_record):
    """Rebuild the SceneShot dataclass from its manifest record."""
    return SceneShot(
        shot_id=record["shot_id"],
        title_id=title_record["title_id"],
        duration_s=record["duration_s"],
        scene_class=record["scene_class"],
        event_times=tuple(record["event_times"]),
        speech_plan=tuple(
            SpeechSegment(start_s=s, end_s=e, keyword_id=k, speaker_id=sp)
            for s, e, k, sp in record["segments"]
        ),
        background_seed=record["background_seed"],
    )
