"""Frozen-embedding evaluation: backbone extraction, linear/MLP probes on
synthetic downstream tasks, and the cross-language similarity audit.

Extraction rebuilds only the conv backbones from a checkpoint, so projection
heads never exist in memory here. Embeddings come from deterministic center
windows with no masking or crop jitter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .featurize import AugmentConfig, mel_filterbank, mel_spectrogram, sample_window_frames
from .models import ConvEncoder, load_checkpoint
from .optim import AdamW
from .splits import title_splits
from .synthscenes import LANGUAGES
from .tensor import Tensor, logsumexp
from .trainer import spectrogram_preset

TASKS = {
    "SceneCls(audio)": ("audio", "scene_class"),
    "SceneCls(video)": ("video", "scene_class"),
    "LangID(audio)": ("audio", "language"),
    "KeywordCls(audio)": ("audio", "keyword"),
}


@dataclass
class EmbeddingTable:
    modality: str
    vectors: np.ndarray          # (N, d_backbone)
    shot_ids: np.ndarray
    languages: list              # per row; None entries for video rows
    labels: dict                 # name -> (N,) int arrays
    splits: np.ndarray           # row split tags ("train" | "val" | "test")

    def rows(self, split=None, label=None, labeled_only=False):
        mask = np.ones(len(self.vectors), dtype=bool)
        if split is not None:
            mask &= self.splits == split
        if labeled_only and label is not None:
            mask &= self.labels[label] >= 0
        return mask


@dataclass(frozen=True)
class ProbeConfig:
    kind: str = "mlp"  # "linear" | "mlp"
    hidden: int = 64
    epochs: int = 100
    lr: float = 1e-2
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"probe kind must be linear or mlp, got {self.kind!r}")


@dataclass
class TaskResult:
    task: str
    metric: str
    val_by_epoch: list
    selected_epoch: int
    val_metric: float
    test_metric: float
    n_train: int
    n_test: int


@dataclass
class AuditResult:
    same_snippet_mean: float
    random_pair_mean: float
    n_pairs: int

    @property
    def gap(self):
        return self.same_snippet_mean - self.random_pair_mean


class BackboneExtractor:
    """Checkpoint-backed encoders with no projection heads in memory."""

    def __init__(self, checkpoint_path, manifest):
        ckpt = load_checkpoint(checkpoint_path)
        cfg = ckpt.model_config
        rng = np.random.default_rng(0)
        self.video = ConvEncoder(cfg.video, "video", rng)
        self.audio = ConvEncoder(cfg.audio, "audio", rng)
        for enc in (self.video, self.audio):
            for name, tensor in enc.params.items():
                arr = ckpt.params.get(name)
                if arr is None:
                    raise ValueError(f"checkpoint missing backbone parameter '{name}'")
                if tuple(arr.shape) != tuple(tensor.shape):
                    raise ValueError(f"backbone shape mismatch for '{name}'")
                tensor.data[...] = arr
                tensor.requires_grad = False
        self.loaded_names = set(self.video.params) | set(self.audio.params)
        self.manifest = manifest
        self.aug = AugmentConfig()
        self.spec = spectrogram_preset("desk")
        if self.spec.sample_rate != manifest.config.sample_rate:
            self.spec = spectrogram_preset("paper-audio")
            if self.spec.sample_rate != manifest.config.sample_rate:
                raise ValueError("no spectrogram preset matches dataset sample rate")
        self.bank = mel_filterbank(self.spec)

    def _center_window(self, rec):
        return (rec["duration_s"] - self.aug.snippet_len_s) / 2.0

    def _video_clip(self, rec):
        offset = self._center_window(rec)
        fps = self.manifest.config.fps
        n_frames = rec["media"]["video"]["shape"][0]
        idx = sample_window_frames(
            n_frames, offset, fps, self.aug.frames_per_snippet, self.aug.snippet_len_s
        )
        rows = self.manifest.load_video_frames(rec["shot_id"], int(idx[0]), int(idx[-1]) + 1)
        frames = rows[idx - idx[0]].astype(np.float64) / 255.0
        # deterministic center crop at unit scale
        oy = (frames.shape[1] - self.aug.crop[0]) // 2
        ox = (frames.shape[2] - self.aug.crop[1]) // 2
        return frames[:, oy : oy + self.aug.crop[0], ox : ox + self.aug.crop[1], :]

    def _audio_clip(self, rec, language):
        offset = self._center_window(rec)
        sr = self.manifest.config.sample_rate
        start = int(round(offset * sr))
        n = int(round(self.aug.snippet_len_s * sr))
        wave = self.manifest.load_audio_window(rec["shot_id"], language, start, n)
        return mel_spectrogram(wave, self.spec, bank=self.bank)

    def embed_video_batch(self, clips):
        x = Tensor(np.stack(clips).reshape(-1, *clips[0].shape[1:]))
        b, t = len(clips), clips[0].shape[0]
        pooled = self.video.forward_images(x)
        return pooled.data.reshape(b, t, -1).mean(axis=1)

    def embed_audio_batch(self, mels):
        arr = np.stack(mels)
        x = Tensor(((arr * (1.0 / 80.0)) + 1.0)[..., None])
        return self.audio.forward_images(x).data


def _dominant_keyword(rec, offset_s, snippet_len_s):
    best, best_overlap = -1, 0.0
    w0, w1 = offset_s, offset_s + snippet_len_s
    for s, e, keyword, _ in rec["segments"]:
        overlap = min(e, w1) - max(s, w0)
        if overlap > best_overlap:
            best, best_overlap = keyword, overlap
    return best


def extract_embeddings(checkpoint_path, manifest, modality, splits=("train", "val", "test"),
                       chunk=64):
    """EmbeddingTable over every eligible clip of the requested splits; audio
    rows are per track so language tasks see every dub."""
    if modality not in ("audio", "video"):
        raise ValueError(f"modality must be audio or video, got {modality!r}")
    extractor = BackboneExtractor(checkpoint_path, manifest)
    train_ids, val_ids, test_ids = title_splits(manifest)
    tag_of = {}
    for tid in train_ids:
        tag_of[tid] = "train"
    for tid in val_ids:
        tag_of[tid] = "val"
    for tid in test_ids:
        tag_of[tid] = "test"

    rows = []
    for title in manifest.titles:
        tag = tag_of[title["title_id"]]
        if tag not in splits:
            continue
        for rec in title["shots"]:
            if not (extractor.aug.shot_min_s <= rec["duration_s"] <= extractor.aug.shot_max_s):
                continue
            offset = extractor._center_window(rec)
            base_labels = {
                "scene_class": rec["scene_class"],
                "keyword": _dominant_keyword(rec, offset, extractor.aug.snippet_len_s),
                "title_id": title["title_id"],
            }
            if modality == "video":
                rows.append((rec, None, tag, base_labels))
            else:
                for lang in title["languages"]:
                    labels = dict(base_labels)
                    labels["language"] = LANGUAGES.index(lang)
                    rows.append((rec, lang, tag, labels))

    vectors = []
    for i in range(0, len(rows), chunk):
        batch = rows[i : i + chunk]
        if modality == "video":
            clips = [extractor._video_clip(rec) for rec, _, _, _ in batch]
            vectors.append(extractor.embed_video_batch(clips))
        else:
            mels = [extractor._audio_clip(rec, lang) for rec, lang, _, _ in batch]
            vectors.append(extractor.embed_audio_batch(mels))

    label_names = ["scene_class", "keyword", "title_id"] + (
        ["language"] if modality == "audio" else []
    )
    return EmbeddingTable(
        modality=modality,
        vectors=np.concatenate(vectors) if vectors else np.zeros((0, 1)),
        shot_ids=np.array([rec["shot_id"] for rec, _, _, _ in rows]),
        languages=[lang for _, lang, _, _ in rows],
        labels={
            name: np.array([labels[name] for _, _, _, labels in rows]) for name in label_names
        },
        splits=np.array([tag for _, _, tag, _ in rows]),
    )


def _cross_entropy(logits, target_idx):
    lse = logsumexp(logits, axis=1)
    picked = (logits * Tensor(np.eye(logits.shape[1])[target_idx])).sum(axis=1)
    return (lse - picked).mean()


def train_probe(table, task, cfg=ProbeConfig()):
    """Softmax probe on frozen vectors; epoch selected by validation top-1."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(TASKS)}")
    modality, label_name = TASKS[task]
    if table.modality != modality:
        raise ValueError(f"task {task} needs {modality} embeddings, table is {table.modality}")

    label = table.labels[label_name]
    masks = {
        split: table.rows(split=split) & (label >= 0) for split in ("train", "val", "test")
    }
    n_classes = int(label.max()) + 1
    xs = {s: table.vectors[m] for s, m in masks.items()}
    ys = {s: label[m] for s, m in masks.items()}
    for split_name in ("train", "val", "test"):
        if len(np.unique(ys[split_name])) < 2:
            raise ValueError(f"{task}: {split_name} split has < 2 classes")

    mu = xs["train"].mean(axis=0, keepdims=True)
    sd = xs["train"].std(axis=0, keepdims=True) + 1e-8
    xs = {s: (x - mu) / sd for s, x in xs.items()}

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(5,)))
    d = xs["train"].shape[1]
    params = {}
    if cfg.kind == "mlp":
        params["w0"] = Tensor(
            rng.uniform(-1, 1, (d, cfg.hidden)) * np.sqrt(6.0 / d), requires_grad=True
        )
        params["b0"] = Tensor(np.zeros(cfg.hidden), requires_grad=True)
        d_out_in = cfg.hidden
    else:
        d_out_in = d
    params["w1"] = Tensor(
        rng.uniform(-1, 1, (d_out_in, n_classes)) * np.sqrt(6.0 / d_out_in), requires_grad=True
    )
    params["b1"] = Tensor(np.zeros(n_classes), requires_grad=True)

    def forward(x):
        h = Tensor(x)
        if cfg.kind == "mlp":
            h = (h @ params["w0"] + params["b0"]).relu()
        return h @ params["w1"] + params["b1"]

    def accuracy(split):
        logits = forward(xs[split]).data
        return float((np.argmax(logits, axis=1) == ys[split]).mean())

    opt = AdamW(params, lr=cfg.lr, weight_decay=1e-4)
    n_train = len(ys["train"])
    val_curve, test_curve = [], []
    for _ in range(cfg.epochs):
        order = rng.permutation(n_train)
        for i in range(0, n_train, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            loss = _cross_entropy(forward(xs["train"][idx]), ys["train"][idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        val_curve.append(accuracy("val"))
        test_curve.append(accuracy("test"))

    selected = int(np.argmax(val_curve))
    return TaskResult(
        task=task,
        metric="top1",
        val_by_epoch=val_curve,
        selected_epoch=selected,
        val_metric=val_curve[selected],
        test_metric=test_curve[selected],
        n_train=n_train,
        n_test=len(ys["test"]),
    )


def dub_similarity_audit(checkpoint_path, manifest, max_shots=200, seed=0):
    """Mean cosine between backbone embeddings of alternate-language tracks of
    one snippet vs random different-snippet pairs."""
    extractor = BackboneExtractor(checkpoint_path, manifest)
    pairs = []
    for title in manifest.titles:
        if len(title["languages"]) < 2:
            continue
        for rec in title["shots"]:
            if extractor.aug.shot_min_s <= rec["duration_s"] <= extractor.aug.shot_max_s:
                pairs.append((rec, title["languages"][0], title["languages"][1]))
    if not pairs:
        raise ValueError("corpus has no multilingual shots to audit")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(6,)))
    if len(pairs) > max_shots:
        keep = rng.choice(len(pairs), size=max_shots, replace=False)
        pairs = [pairs[i] for i in sorted(keep)]

    mels_a = [extractor._audio_clip(rec, la) for rec, la, _ in pairs]
    mels_b = [extractor._audio_clip(rec, lb) for rec, _, lb in pairs]
    za = extractor.embed_audio_batch(mels_a)
    zb = extractor.embed_audio_batch(mels_b)
    za = za / np.linalg.norm(za, axis=1, keepdims=True)
    zb = zb / np.linalg.norm(zb, axis=1, keepdims=True)
    same = float((za * zb).sum(axis=1).mean())

    shift = rng.integers(1, len(pairs)) if len(pairs) > 1 else 0
    random_mean = float((za * np.roll(zb, shift, axis=0)).sum(axis=1).mean())
    return AuditResult(same_snippet_mean=same, random_pair_mean=random_mean, n_pairs=len(pairs))
