"""Conv encoders, projection heads, and checkpoint persistence.

One weight-shared audio backbone handles every language track. Projection
heads exist only for pretraining; evaluation loads checkpoints backbone-only
(strict=False) so head parameters never reach the probe path.

Checkpoint layout: magic "DCLC", u32 version, u64 metadata length, UTF-8
JSON metadata, then per-parameter records (u32 name length, name, u32 dtype
tag, u32 rank, u64 dims[rank], payload), little-endian, names sorted.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, conv2d, l2_normalize

CKPT_MAGIC = b"DCLC"
CKPT_VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAG_FOR_DTYPE = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int
    channels: tuple = (16, 32, 64)
    kernel: int = 3
    strides: tuple = ((2, 2), (2, 2), (2, 2))  # (sh, sw) per stage

    def __post_init__(self):
        if len(self.strides) != len(self.channels):
            raise ValueError("need one (sh, sw) stride pair per conv stage")

    @property
    def d_backbone(self):
        return self.channels[-1]


@dataclass(frozen=True)
class HeadConfig:
    d_in: int = 64
    d_hidden: int = 64
    d_proj: int = 32


@dataclass(frozen=True)
class ModelConfig:
    video: EncoderConfig = field(default_factory=lambda: EncoderConfig(in_channels=3))
    audio: EncoderConfig = field(
        # stride harder along the (dense) time axis of the mel input
        default_factory=lambda: EncoderConfig(in_channels=1, strides=((2, 4), (2, 2), (2, 2)))
    )
    head: HeadConfig = field(default_factory=HeadConfig)

    @classmethod
    def desk(cls):
        return cls()

    @classmethod
    def wide(cls):
        # structural analog of the deeper-backbone comparison group
        return cls(
            video=EncoderConfig(in_channels=3, channels=(24, 48, 96)),
            audio=EncoderConfig(
                in_channels=1, channels=(24, 48, 96), strides=((2, 4), (2, 2), (2, 2))
            ),
            head=HeadConfig(d_in=96, d_hidden=96, d_proj=32),
        )

    @classmethod
    def tiny(cls):
        # < 5k parameters total; used by gradient-fidelity checks
        return cls(
            video=EncoderConfig(in_channels=1, channels=(2, 3), strides=((2, 2), (2, 2))),
            audio=EncoderConfig(in_channels=1, channels=(2, 3), strides=((2, 2), (2, 2))),
            head=HeadConfig(d_in=3, d_hidden=4, d_proj=3),
        )

    def to_dict(self):
        def enc(e):
            return {
                "in_channels": e.in_channels,
                "channels": list(e.channels),
                "kernel": e.kernel,
                "strides": [list(s) for s in e.strides],
            }

        return {
            "video": enc(self.video),
            "audio": enc(self.audio),
            "head": dict(self.head.__dict__),
        }

    @classmethod
    def from_dict(cls, d):
        def enc(e):
            return EncoderConfig(
                in_channels=e["in_channels"],
                channels=tuple(e["channels"]),
                kernel=e["kernel"],
                strides=tuple(tuple(s) for s in e["strides"]),
            )

        return cls(video=enc(d["video"]), audio=enc(d["audio"]), head=HeadConfig(**d["head"]))


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ConvEncoder:
    """Stack of stride-s valid convolutions with ReLU, spatially mean-pooled
    to a d_backbone vector."""

    def __init__(self, cfg, prefix, rng):
        self.cfg = cfg
        self.prefix = prefix
        self.params = {}
        c_in = cfg.in_channels
        for i, c_out in enumerate(cfg.channels):
            fan_in = c_in * cfg.kernel * cfg.kernel
            w = _kaiming_uniform(rng, (c_out, cfg.kernel, cfg.kernel, c_in), fan_in)
            self.params[f"{prefix}.conv{i}.w"] = Tensor(w, requires_grad=True)
            self.params[f"{prefix}.conv{i}.b"] = Tensor(np.zeros(c_out), requires_grad=True)
            c_in = c_out

    def forward_images(self, x):
        """x: Tensor (N, H, W, C) -> Tensor (N, d_backbone)."""
        n, h, w, c = x.shape
        if c != self.cfg.in_channels:
            raise ValueError(
                f"{self.prefix} encoder expects {self.cfg.in_channels} channels, got {c}"
            )
        out = x
        for i in range(len(self.cfg.channels)):
            wgt = self.params[f"{self.prefix}.conv{i}.w"]
            bias = self.params[f"{self.prefix}.conv{i}.b"]
            out = conv2d(out, wgt, stride=self.cfg.strides[i])
            out = out + bias
            out = out.relu()
        return out.mean(axis=(1, 2))


class ProjectionHead:
    """Two affine layers with ReLU between; output is L2-normalized."""

    def __init__(self, cfg, prefix, rng):
        self.cfg = cfg
        self.prefix = prefix
        self.params = {
            f"{prefix}.fc0.w": Tensor(
                _kaiming_uniform(rng, (cfg.d_in, cfg.d_hidden), cfg.d_in), requires_grad=True
            ),
            f"{prefix}.fc0.b": Tensor(np.zeros(cfg.d_hidden), requires_grad=True),
            f"{prefix}.fc1.w": Tensor(
                _kaiming_uniform(rng, (cfg.d_hidden, cfg.d_proj), cfg.d_hidden),
                requires_grad=True,
            ),
            f"{prefix}.fc1.b": Tensor(np.zeros(cfg.d_proj), requires_grad=True),
        }

    def project(self, z):
        h = z @ self.params[f"{self.prefix}.fc0.w"] + self.params[f"{self.prefix}.fc0.b"]
        h = h.relu() @ self.params[f"{self.prefix}.fc1.w"] + self.params[f"{self.prefix}.fc1.b"]
        return l2_normalize(h, axis=1)


class ModelSet:
    """Video backbone, shared audio backbone, and the two projection heads."""

    def __init__(self, cfg, seed):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(9,)))
        self.video = ConvEncoder(cfg.video, "video", rng)
        self.audio = ConvEncoder(cfg.audio, "audio", rng)
        self.head_v = ProjectionHead(cfg.head, "head_v", rng)
        self.head_a = ProjectionHead(cfg.head, "head_a", rng)

    def params(self, backbone_only=False):
        out = {}
        out.update(self.video.params)
        out.update(self.audio.params)
        if not backbone_only:
            out.update(self.head_v.params)
            out.update(self.head_a.params)
        return out

    def n_parameters(self):
        return sum(int(np.prod(p.shape)) for p in self.params().values())

    def encode_video(self, frames):
        """frames: (B, T, H, W, C) array in [0,1] -> Tensor (B, d_backbone)."""
        arr = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
        if arr.ndim != 5:
            raise ValueError(f"expected (B, T, H, W, C) video batch, got shape {arr.shape}")
        b, t, h, w, c = arr.shape
        x = frames if isinstance(frames, Tensor) else Tensor(arr)
        x = x.reshape(b * t, h, w, c)
        pooled = self.video.forward_images(x)  # (B*T, d)
        return pooled.reshape(b, t, self.cfg.video.d_backbone).mean(axis=1)

    def encode_audio(self, mel):
        """mel: (B, n_mels, frames_t) dB array -> Tensor (B, d_backbone)."""
        arr = mel.data if isinstance(mel, Tensor) else np.asarray(mel)
        if arr.ndim != 3:
            raise ValueError(f"expected (B, n_mels, frames_t) mel batch, got shape {arr.shape}")
        b, n_mels, frames_t = arr.shape
        x = mel if isinstance(mel, Tensor) else Tensor(arr)
        # mel magnitudes are in dB; map roughly into [0, 1] for conv input
        x = (x * (1.0 / 80.0)) + 1.0
        x = x.reshape(b, n_mels, frames_t, 1)
        return self.audio.forward_images(x)

    def project_video(self, z):
        return self.head_v.project(z)

    def project_audio(self, z):
        return self.head_a.project(z)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict                 # name -> float64 ndarray
    optimizer: dict | None = None  # name -> ndarray, plus scalar entries
    step: int = 0
    seed_lineage: tuple = ()
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt, dtype="f8"):
    tag = 0 if dtype == "f8" else 1
    np_dtype = _DTYPE_TAGS[tag]
    meta = {
        "format_version": CKPT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "step": int(ckpt.step),
        "seed_lineage": list(ckpt.seed_lineage),
        "has_optimizer": ckpt.optimizer is not None,
        "extra": ckpt.extra,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    records = [("p/" + name, arr) for name, arr in ckpt.params.items()]
    if ckpt.optimizer is not None:
        records += [("o/" + name, np.asarray(arr)) for name, arr in ckpt.optimizer.items()]
    records.sort(key=lambda kv: kv[0])

    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        for name, arr in records:
            arr = np.ascontiguousarray(arr, dtype=np_dtype)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<II", tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic in {path}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + meta_len:
        raise CheckpointTruncatedError(f"checkpoint metadata truncated in {path}")
    meta = json.loads(blob[16 : 16 + meta_len].decode("utf-8"))

    params = {}
    optimizer = {} if meta.get("has_optimizer") else None
    pos = 16 + meta_len
    while pos < len(blob):
        try:
            (name_len,) = struct.unpack("<I", blob[pos : pos + 4])
            pos += 4
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            tag, rank = struct.unpack("<II", blob[pos : pos + 8])
            pos += 8
            shape = struct.unpack(f"<{rank}Q", blob[pos : pos + 8 * rank])
            pos += 8 * rank
        except struct.error as exc:
            raise CheckpointTruncatedError(f"truncated record header in {path}") from exc
        if tag not in _DTYPE_TAGS:
            raise CheckpointFormatError(f"unknown dtype tag {tag} in {path}")
        np_dtype = _DTYPE_TAGS[tag]
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np_dtype.itemsize
        if pos + nbytes > len(blob):
            raise CheckpointTruncatedError(f"truncated payload for '{name}' in {path}")
        arr = np.frombuffer(blob[pos : pos + nbytes], dtype=np_dtype).reshape(shape)
        pos += nbytes
        arr = arr.astype(np.float64)
        if name.startswith("p/"):
            params[name[2:]] = arr
        elif name.startswith("o/"):
            if optimizer is None:
                optimizer = {}
            optimizer[name[2:]] = arr
        else:
            raise CheckpointFormatError(f"unknown record namespace for '{name}'")

    return Checkpoint(
        model_config=ModelConfig.from_dict(meta["model_config"]),
        params=params,
        optimizer=optimizer,
        step=meta["step"],
        seed_lineage=tuple(meta["seed_lineage"]),
        extra=meta.get("extra", {}),
    )


def apply_checkpoint(model, ckpt, strict=True):
    """Copy checkpoint parameters into a ModelSet.

    strict=True demands an exact name/shape match. strict=False loads the
    intersection, which is how evaluation drops the projection heads.
    """
    target = model.params()
    if strict:
        missing = sorted(set(target) - set(ckpt.params))
        unexpected = sorted(set(ckpt.params) - set(target))
        if missing or unexpected:
            raise CheckpointShapeError(
                f"strict load mismatch: missing {missing}, unexpected {unexpected}"
            )
    loaded = []
    for name, tensor in target.items():
        if name not in ckpt.params:
            continue
        arr = ckpt.params[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointShapeError(
                f"shape mismatch for '{name}': checkpoint {arr.shape}, model {tensor.shape}"
            )
        tensor.data[...] = arr
        loaded.append(name)
    return loaded


def snapshot(model, optimizer_state=None, step=0, seed_lineage=(), extra=None):
    """Checkpoint of the current parameter values (copied)."""
    params = {name: t.data.copy() for name, t in model.params().items()}
    opt = None
    if optimizer_state is not None:
        opt = {}
        for name, arr in optimizer_state.m.items():
            opt[f"m/{name}"] = arr.copy()
        for name, arr in optimizer_state.v.items():
            opt[f"v/{name}"] = arr.copy()
        opt["step_count"] = np.array([optimizer_state.step_count], dtype=np.float64)
    return Checkpoint(
        model_config=model.cfg,
        params=params,
        optimizer=opt,
        step=step,
        seed_lineage=tuple(seed_lineage),
        extra=extra or {},
    )


def restore_optimizer(state, ckpt):
    """Load moment estimates and step count back into an AdamWState."""
    if ckpt.optimizer is None:
        raise CheckpointError("checkpoint carries no optimizer state")
    state.m.clear()
    state.v.clear()
    for name, arr in ckpt.optimizer.items():
        if name == "step_count":
            state.step_count = int(arr[0])
        elif name.startswith("m/"):
            state.m[name[2:]] = arr.copy()
        elif name.startswith("v/"):
            state.v[name[2:]] = arr.copy()
        else:
            raise CheckpointFormatError(f"unknown optimizer record '{name}'")
