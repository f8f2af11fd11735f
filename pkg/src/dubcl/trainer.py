"""Self-supervised pretraining loop with per-step loss logging, per-epoch
checkpoints, validation retrieval, and deterministic resume.

Every step's batch randomness derives from (seed, step), so resuming from a
checkpoint replays the identical stream with no rng state to persist. The
run log is line-delimited JSON: one object per optimizer step plus one per
epoch snapshot.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .batching import TitleIndex, sample_batch
from .featurize import (
    AugmentConfig,
    MaskSpans,
    SpectrogramConfig,
    apply_mask,
    apply_video_augment,
    mel_filterbank,
    mel_spectrogram,
    sample_window_frames,
)
from .models import (
    ModelConfig,
    ModelSet,
    apply_checkpoint,
    load_checkpoint,
    restore_optimizer,
    save_checkpoint,
    snapshot,
)
from .objective import EmbeddingBatch, total_loss, within_modal_losses
from .optim import AdamW, LrSchedule, lr_at
from .splits import title_splits
from .synthscenes import DatasetManifest

LOSS_MODES = ("cross_modal", "audio_within_only")
MODEL_PRESETS = {"desk": ModelConfig.desk, "wide": ModelConfig.wide, "tiny": ModelConfig.tiny}


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant_id: str = "A.1"
    dub_augment: bool = False
    lambda_v: float = 0.0
    lambda_a: float = 0.0
    language_subset: tuple | None = None
    require_multilingual: bool = False
    loss_mode: str = "cross_modal"
    strip_speech: bool = False
    init: str | None = None
    epochs: int = 8
    batch_size: int = 64
    groups: int = 8
    base_lr: float = 3e-4
    weight_decay: float = 5e-2
    warmup_epochs: int = 2
    tau: float = 0.07
    seed: int = 1
    steps_per_epoch: int | None = None   # None -> floor(eligible snippets / B)
    model: str = "desk"
    spectrogram: str = "desk"

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode}")
        if self.model not in MODEL_PRESETS:
            raise ValueError(f"unknown model preset {self.model!r}")
        if self.batch_size % self.groups != 0:
            raise ValueError("batch_size must be divisible by groups")

    def to_dict(self):
        d = asdict(self)
        d["language_subset"] = list(self.language_subset) if self.language_subset else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("language_subset") is not None:
            d["language_subset"] = tuple(d["language_subset"])
        return cls(**d)


def spectrogram_preset(name):
    if name == "desk":
        return SpectrogramConfig.desk()
    if name == "paper-audio":
        return SpectrogramConfig.paper_audio()
    raise ValueError(f"unknown spectrogram preset {name!r}")


class BatchAssembler:
    """Turns a BatchPlan into the four model input arrays via windowed reads."""

    def __init__(self, manifest, aug_cfg, spec_cfg, strip_speech=False):
        if spec_cfg.sample_rate != manifest.config.sample_rate:
            raise ValueError(
                f"spectrogram sample rate {spec_cfg.sample_rate} does not match "
                f"dataset sample rate {manifest.config.sample_rate}"
            )
        self.manifest = manifest
        self.aug = aug_cfg
        self.spec = spec_cfg
        self.strip_speech = strip_speech
        self.bank = mel_filterbank(spec_cfg)
        self.fps = manifest.config.fps
        self.sr = manifest.config.sample_rate
        self.n_window_samples = int(round(aug_cfg.snippet_len_s * self.sr))
        self.mel_shape = (spec_cfg.n_mels, spec_cfg.n_frames(self.n_window_samples))
        self.fill = spec_cfg.db_floor if aug_cfg.mask_fill is None else aug_cfg.mask_fill

    def _video_view(self, shot_id, n_frames, offset_s, draw):
        idx = sample_window_frames(
            n_frames, offset_s, self.fps, self.aug.frames_per_snippet, self.aug.snippet_len_s
        )
        rows = self.manifest.load_video_frames(shot_id, int(idx[0]), int(idx[-1]) + 1)
        frames = rows[idx - idx[0]].astype(np.float64) / 255.0
        return apply_video_augment(frames, draw, self.aug)

    def _audio_view(self, shot_id, language, offset_s, spans):
        start = int(round(offset_s * self.sr))
        wave = self.manifest.load_audio_window(
            shot_id, language, start, self.n_window_samples, speech_stripped=self.strip_speech
        )
        mel = mel_spectrogram(wave, self.spec, bank=self.bank)
        return apply_mask(mel, spans, self.fill)

    def assemble(self, plan):
        vid_p, vid_s, mel_p, mel_s = [], [], [], []
        for q in plan.quadruplets:
            _, rec = self.manifest.shot_record(q.shot_id)
            n_frames = rec["media"]["video"]["shape"][0]
            vid_p.append(self._video_view(q.shot_id, n_frames, q.t_p, q.video_p))
            vid_s.append(self._video_view(q.shot_id, n_frames, q.t_s, q.video_s))
            mel_p.append(self._audio_view(q.shot_id, q.lang_p, q.t_p, q.mask_p))
            mel_s.append(self._audio_view(q.shot_id, q.lang_s, q.t_s, q.mask_s))
        return (
            np.stack(vid_p),
            np.stack(vid_s),
            np.stack(mel_p),
            np.stack(mel_s),
        )


def step_rng(seed, step):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3, step)))


def _forward_losses(model, config, views):
    vid_p, vid_s, mel_p, mel_s = views
    za_p = model.project_audio(model.encode_audio(mel_p))
    za_s = model.project_audio(model.encode_audio(mel_s))
    zv_p = model.project_video(model.encode_video(vid_p))
    zv_s = model.project_video(model.encode_video(vid_s))
    batch = EmbeddingBatch(zv_p, zv_s, za_p, za_s, tau=config.tau)
    breakdown = total_loss(batch, config.lambda_v, config.lambda_a)
    if config.loss_mode == "audio_within_only":
        # optimize only the audio view pair; the full breakdown is still
        # computed so every loss component gets logged
        objective = within_modal_losses(batch)[1]
    else:
        objective = breakdown.total
    return objective, breakdown


def _trainable_params(model, config):
    if config.loss_mode == "audio_within_only":
        params = {}
        params.update(model.audio.params)
        params.update(model.head_a.params)
        return params
    return model.params()


def retrieval_recall_at_1(model, manifest, title_ids, aug_cfg, spec_cfg, max_clips=96):
    """Cross-modal v->a retrieval on deterministic center windows."""
    assembler = BatchAssembler(manifest, aug_cfg, spec_cfg)
    clips = []
    for title in manifest.titles:
        if title["title_id"] not in title_ids:
            continue
        for rec in title["shots"]:
            if aug_cfg.shot_min_s <= rec["duration_s"] <= aug_cfg.shot_max_s:
                clips.append((rec, title["languages"][0]))
    clips = clips[:max_clips]
    if len(clips) < 2:
        return float("nan")
    vids, mels = [], []
    no_mask = MaskSpans(0, 0, 0, 0)
    for rec, lang in clips:
        offset = (rec["duration_s"] - aug_cfg.snippet_len_s) / 2.0
        n_frames = rec["media"]["video"]["shape"][0]
        center_crop = (
            aug_cfg.scale_range[0],
            (aug_cfg.scale_range[0] - aug_cfg.crop[0]) // 2,
            (aug_cfg.scale_range[0] - aug_cfg.crop[1]) // 2,
        )
        vids.append(assembler._video_view(rec["shot_id"], n_frames, offset, center_crop))
        mels.append(assembler._audio_view(rec["shot_id"], lang, offset, no_mask))
    zv = model.project_video(model.encode_video(np.stack(vids))).data
    za = model.project_audio(model.encode_audio(np.stack(mels))).data
    sims = zv @ za.T
    hits = (np.argmax(sims, axis=1) == np.arange(len(clips))).mean()
    return float(hits)


@dataclass
class TrainResult:
    final_checkpoint: Path
    runlog: Path
    epoch_checkpoints: list
    total_steps: int
    config: TrainConfig


def pretrain(manifest, config, out_dir, resume_from=None):
    """Run one pretraining variant; returns checkpoint and log paths."""
    if isinstance(manifest, (str, Path)):
        manifest = DatasetManifest.load(manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    aug_cfg = AugmentConfig()
    spec_cfg = spectrogram_preset(config.spectrogram)
    assembler = BatchAssembler(manifest, aug_cfg, spec_cfg, strip_speech=config.strip_speech)

    train_ids, val_ids, _ = title_splits(manifest)
    index = TitleIndex.from_manifest(
        manifest, aug_cfg.shot_min_s, aug_cfg.shot_max_s, title_ids=train_ids
    ).restrict(config.language_subset, config.require_multilingual)
    if index.n_titles < config.groups:
        raise ValueError(
            f"variant {config.variant_id}: only {index.n_titles} eligible titles "
            f"after filters, need {config.groups}"
        )

    steps_per_epoch = config.steps_per_epoch or max(
        1, index.total_snippets // config.batch_size
    )
    total_steps = config.epochs * steps_per_epoch
    # very short runs: keep the cosine leg non-empty
    warmup_steps = min(config.warmup_epochs * steps_per_epoch, total_steps - 1)
    schedule = LrSchedule(
        warmup_steps=warmup_steps,
        total_steps=total_steps,
        peak_lr=config.base_lr,
    )

    model = ModelSet(MODEL_PRESETS[config.model](), seed=config.seed)
    seed_lineage = [config.seed]
    if config.init:
        init_ckpt = load_checkpoint(config.init)
        apply_checkpoint(model, init_ckpt, strict=True)
        seed_lineage = list(init_ckpt.seed_lineage) + [config.seed]

    opt = AdamW(
        _trainable_params(model, config),
        lr=config.base_lr,
        weight_decay=config.weight_decay,
    )

    start_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        apply_checkpoint(model, ckpt, strict=True)
        restore_optimizer(opt.state, ckpt)
        start_step = ckpt.step
        seed_lineage = list(ckpt.seed_lineage)

    runlog_path = out / "runlog.jsonl"
    log_fh = open(runlog_path, "a" if resume_from else "w", encoding="utf-8")

    def log(record):
        log_fh.write(json.dumps(record, sort_keys=True) + "\n")
        log_fh.flush()

    if not resume_from:
        log(
            {
                "kind": "meta",
                "variant_id": config.variant_id,
                "config": config.to_dict(),
                "total_steps": total_steps,
                "steps_per_epoch": steps_per_epoch,
                "seed_lineage": seed_lineage,
                "started_at": time.time(),
            }
        )

    epoch_ckpts = []
    last_good = None
    t_start = time.time()
    for step in range(start_step, total_steps):
        rng = step_rng(config.seed, step)
        plan = sample_batch(
            index,
            config.batch_size,
            config.groups,
            rng,
            config.dub_augment,
            aug_cfg,
            assembler.mel_shape,
            rng_seed=(config.seed, step),
        )
        views = assembler.assemble(plan)
        objective, breakdown = _forward_losses(model, config, views)
        if not np.isfinite(breakdown.total_value):
            log({"kind": "abort", "step": step, "reason": "non-finite loss"})
            log_fh.close()
            raise TrainingAborted(
                f"non-finite loss at step {step}; last good checkpoint: {last_good}"
            )
        opt.zero_grad()
        objective.backward()
        lr = lr_at(schedule, step)
        opt.step(lr=lr)

        log(
            {
                "kind": "step",
                "step": step,
                "lr": lr,
                "loss_cross": breakdown.cross,
                "loss_video": breakdown.within_video,
                "loss_audio": breakdown.within_audio,
                "loss_total": breakdown.total_value,
            }
        )

        if (step + 1) % steps_per_epoch == 0:
            epoch = (step + 1) // steps_per_epoch
            recall = retrieval_recall_at_1(model, manifest, val_ids, aug_cfg, spec_cfg)
            log(
                {
                    "kind": "epoch",
                    "epoch": epoch,
                    "step": step,
                    "val_recall_at_1": recall,
                    "wall_s": time.time() - t_start,
                }
            )
            ckpt_path = out / f"epoch_{epoch:03d}.dclc"
            save_checkpoint(
                ckpt_path,
                snapshot(
                    model,
                    optimizer_state=opt.state,
                    step=step + 1,
                    seed_lineage=seed_lineage,
                    extra={"variant_id": config.variant_id, "epoch": epoch},
                ),
            )
            epoch_ckpts.append(ckpt_path)
            last_good = ckpt_path

    final_path = out / "final.dclc"
    save_checkpoint(
        final_path,
        snapshot(
            model,
            optimizer_state=opt.state,
            step=total_steps,
            seed_lineage=seed_lineage,
            extra={"variant_id": config.variant_id, "epoch": config.epochs},
        ),
    )
    log({"kind": "done", "total_steps": total_steps, "wall_s": time.time() - t_start})
    log_fh.close()
    return TrainResult(
        final_checkpoint=final_path,
        runlog=runlog_path,
        epoch_checkpoints=epoch_ckpts,
        total_steps=total_steps,
        config=config,
    )


def load_runlog(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def _suite_worker(args):
    manifest_path, config_dict, out_dir = args
    config = TrainConfig.from_dict(config_dict)
    try:
        result = pretrain(DatasetManifest.load(manifest_path), config, out_dir)
        return config.variant_id, {
            "status": "ok",
            "checkpoint": str(result.final_checkpoint),
            "runlog": str(result.runlog),
            "epoch_checkpoints": [str(p) for p in result.epoch_checkpoints],
            "total_steps": result.total_steps,
            "config": config.to_dict(),
        }
    except Exception as exc:  # isolate per-variant failures
        return config.variant_id, {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}


def _dependency_waves(configs):
    """Order variants so an init="@other" reference runs after its source."""
    ids = {cfg.variant_id for cfg in configs}
    pending = list(configs)
    done = set()
    waves = []
    while pending:
        wave = []
        for cfg in pending:
            dep = cfg.init[1:] if cfg.init and cfg.init.startswith("@") else None
            if dep is not None and dep not in ids:
                raise ValueError(
                    f"variant {cfg.variant_id!r} references unknown init variant {dep!r}"
                )
            if dep is None or dep in done:
                wave.append(cfg)
        if not wave:
            raise ValueError("circular init references between variants")
        waves.append(wave)
        done.update(cfg.variant_id for cfg in wave)
        pending = [cfg for cfg in pending if cfg.variant_id not in done]
    return waves


def run_variant_suite(manifest_path, configs, out_dir, jobs=1):
    """Train each variant into out_dir/<variant_id>/; failures do not abort
    the suite. init="@other" loads the sibling variant's final checkpoint.
    Emits a machine-readable index.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ordered = list(configs)
    seen = set()
    for cfg in ordered:
        if cfg.variant_id in seen:
            raise ValueError(f"duplicate variant id {cfg.variant_id!r}")
        seen.add(cfg.variant_id)

    results = {}
    for wave in _dependency_waves(ordered):
        jobs_args = []
        for cfg in wave:
            if cfg.init and cfg.init.startswith("@"):
                dep = cfg.init[1:]
                dep_record = results[dep]
                if dep_record["status"] != "ok":
                    results[cfg.variant_id] = {
                        "status": "failed",
                        "error": f"init variant {dep!r} failed",
                    }
                    continue
                cfg = TrainConfig.from_dict(
                    {**cfg.to_dict(), "init": dep_record["checkpoint"]}
                )
            jobs_args.append(
                (str(manifest_path), cfg.to_dict(), str(out / cfg.variant_id.replace(".", "_")))
            )
        if jobs > 1 and len(jobs_args) > 1:
            import multiprocessing as mp

            with mp.get_context("spawn").Pool(processes=min(jobs, len(jobs_args))) as pool:
                for variant_id, record in pool.imap_unordered(_suite_worker, jobs_args):
                    results[variant_id] = record
        else:
            for args in jobs_args:
                variant_id, record = _suite_worker(args)
                results[variant_id] = record

    index = {cfg.variant_id: results[cfg.variant_id] for cfg in ordered}
    index_path = out / "index.json"
    with open(index_path, "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return index_path, index
