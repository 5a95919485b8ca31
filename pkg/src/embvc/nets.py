"""Feature extractor, generator and multi-width discriminator.

Tensors are laid out ``[batch, channel, freq, time]``.  The feature extractor
maps a ``1 x n_mels x window`` scaled mel to a ``1 x 8 x 8`` speaker embedding
plus two time-pooled summaries of its intermediate units; the generator
consumes all three when converting a source window.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointMismatch, InconsistentArch, ShapeMismatch, UnknownWidth

CKPT_MAGIC = b"VCKP"
CKPT_VERSION = 1


def _prod(xs):
    return math.prod(int(x) for x in xs)


@dataclass(frozen=True)
class ArchConfig:
    n_mels: int = 128
    window: int = 64
    embedding_shape: tuple = (8, 8)
    fe_channels: tuple = (32, 64, 128, 1)
    fe_strides: tuple = ((2, 2), (2, 2), (2, 2), (2, 1))
    gated_units: int = 2
    kernel: int = 3
    up_channels: tuple = (128, 128, 64, 32, 16)
    up_strides: tuple = ((1, 2), (2, 1), (2, 2), (2, 2), (2, 1))
    up_modes: tuple = ("subpixel", "subpixel", "transposed", "transposed", "transposed")
    disc_widths: tuple = (32, 64, 128)
    disc_channels: tuple = (16, 32, 64)
    negative_slope: float = 0.2

    def validate(self) -> "ArchConfig":
        eh, ew = self.embedding_shape
        f_prod = _prod(s[0] for s in self.fe_strides)
        t_prod = _prod(s[1] for s in self.fe_strides)
        if len(self.fe_channels) != 4 or len(self.fe_strides) != 4:
            raise InconsistentArch("feature extractor needs exactly four units")
        if f_prod * eh != self.n_mels or t_prod * ew != self.window:
            raise InconsistentArch(
                f"strides ({f_prod} freq, {t_prod} time) do not map "
                f"{self.n_mels}x{self.window} to {eh}x{ew}")
        if self.fe_channels[-1] != 1:
            raise InconsistentArch("embedding must have a single channel")
        if not (len(self.up_channels) == len(self.up_strides) == len(self.up_modes) >= 2):
            raise InconsistentArch("up_channels, up_strides and up_modes must align")
        if (_prod(s[0] for s in self.up_strides) != f_prod
                or _prod(s[1] for s in self.up_strides) != t_prod):
            raise InconsistentArch("upsampling strides must undo the downsampling strides")
        if self.up_strides[0][0] != 1 or self.up_strides[1][0] != self.fe_strides[3][0]:
            raise InconsistentArch("first two upsampling units must land on the F4 / F3 heights")
        if any(m not in ("subpixel", "transposed") for m in self.up_modes):
            raise InconsistentArch(f"unknown upsampling mode in {self.up_modes}")
        if not self.disc_widths:
            raise InconsistentArch("need at least one discriminator width")
        return self

    @property
    def f3_shape(self) -> tuple:
        h = self.embedding_shape[0] * self.fe_strides[3][0]
        return (self.fe_channels[2], h, 1)

    @property
    def f4_shape(self) -> tuple:
        return (self.fe_channels[3], self.embedding_shape[0], 1)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        def tup(v):
            return tuple(tup(x) for x in v) if isinstance(v, (list, tuple)) else v
        return cls(**{k: tup(v) for k, v in d.items() if k in cls.__dataclass_fields__})


def miniature_arch() -> ArchConfig:
    """8-bin, 8-frame architecture used for finite-difference gradient checks."""
    return ArchConfig(
        n_mels=8, window=8, embedding_shape=(2, 2),
        fe_channels=(3, 3, 3, 1), fe_strides=((2, 2), (2, 2), (1, 1), (1, 1)),
        up_channels=(3, 3, 3, 3, 2), up_strides=((1, 2), (1, 1), (2, 2), (2, 1), (1, 1)),
        up_modes=("subpixel", "subpixel", "transposed", "transposed", "transposed"),
        disc_widths=(2, 4, 8), disc_channels=(2, 3),
    ).validate()


def compact_arch() -> ArchConfig:
    """Narrow variant of the default architecture for single-CPU experiments."""
    return ArchConfig(fe_channels=(8, 16, 32, 1), up_channels=(32, 32, 16, 8, 8),
                      disc_channels=(8, 16, 32)).validate()


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

class ConvLayer(nn.Module):
    """conv -> instance norm -> (GLU | leaky ReLU); ``plain`` skips norm and activation."""

    def __init__(self, c_in, c_out, stride=(1, 1), kernel=3, gated=False, plain=False,
                 negative_slope=0.2):
        super().__init__()
        self.gated = gated
        self.plain = plain
        self.negative_slope = negative_slope
        width = 2 * c_out if gated else c_out
        self.conv = nn.Conv2d(c_in, width, kernel, stride=tuple(stride), padding=kernel // 2)
        self.norm = None if plain else nn.InstanceNorm2d(width, affine=True)

    def forward(self, x):
        h = self.conv(x)
        if self.plain:
            return h
        h = self.norm(h)
        if self.gated:
            return F.glu(h, dim=1)
        return F.leaky_relu(h, self.negative_slope)


class DownUnit(nn.Module):
    """Two convolutions; the second one carries the stride."""

    def __init__(self, c_in, c_out, stride, kernel=3, gated=False, final=False, negative_slope=0.2):
        super().__init__()
        self.first = ConvLayer(c_in, c_out, kernel=kernel, gated=gated,
                               negative_slope=negative_slope)
        self.second = ConvLayer(c_out, c_out, stride, kernel=kernel, gated=gated and not final,
                                plain=final, negative_slope=negative_slope)

    def forward(self, x):
        return self.second(self.first(x))


class SubPixelConv(nn.Module):
    """Convolution to ``c_out * rf * rt`` channels followed by an anisotropic pixel shuffle."""

    def __init__(self, c_in, c_out, scale, kernel=3):
        super().__init__()
        self.rf, self.rt = (int(s) for s in scale)
        self.c_out = c_out
        self.conv = nn.Conv2d(c_in, c_out * self.rf * self.rt, kernel, padding=kernel // 2)

    def forward(self, x):
        h = self.conv(x)
        b, _, hh, ww = h.shape
        h = h.view(b, self.c_out, self.rf, self.rt, hh, ww)
        h = h.permute(0, 1, 4, 2, 5, 3).contiguous()
        return h.view(b, self.c_out, hh * self.rf, ww * self.rt)


def _transposed(c_in, c_out, stride, kernel=3):
    k = tuple(2 * s if s > 1 else kernel for s in stride)
    pad = tuple(1 if s > 1 else kernel // 2 for s in stride)
    return nn.ConvTranspose2d(c_in, c_out, k, stride=tuple(stride), padding=pad)


class UpUnit(nn.Module):
    """Upsampling layer (sub-pixel or transposed) then a stride-1 convolution."""

    def __init__(self, c_in, c_mid, c_out, stride, mode, kernel=3, final=False, negative_slope=0.2):
        super().__init__()
        self.negative_slope = negative_slope
        if mode == "subpixel":
            self.up = SubPixelConv(c_in, c_mid, stride, kernel)
        else:
            self.up = _transposed(c_in, c_mid, stride, kernel)
        self.norm = nn.InstanceNorm2d(c_mid, affine=True)
        self.refine = ConvLayer(c_mid, c_out, kernel=kernel, plain=final,
                                negative_slope=negative_slope)

    def forward(self, x):
        h = F.leaky_relu(self.norm(self.up(x)), self.negative_slope)
        return self.refine(h)


def _down_path(arch: ArchConfig) -> nn.ModuleList:
    units = []
    c_in = 1
    for i, (c, s) in enumerate(zip(arch.fe_channels, arch.fe_strides)):
        units.append(DownUnit(c_in, c, s, arch.kernel, gated=i < arch.gated_units,
                              final=i == 3, negative_slope=arch.negative_slope))
        c_in = c
    return nn.ModuleList(units)


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------

@dataclass
class SpeakerEmbedding:
    """Style code plus the time-pooled F3/F4 summaries, without the batch axis."""

    values: np.ndarray
    f3_summary: np.ndarray
    f4_summary: np.ndarray

    @classmethod
    def average(cls, embeddings: Sequence["SpeakerEmbedding"]) -> "SpeakerEmbedding":
        return cls(np.mean([e.values for e in embeddings], axis=0),
                   np.mean([e.f3_summary for e in embeddings], axis=0),
                   np.mean([e.f4_summary for e in embeddings], axis=0))

    def as_tensors(self, dtype=torch.float32, batch: int = 1):
        def t(a):
            return torch.as_tensor(np.asarray(a), dtype=dtype)[None].expand(batch, *a.shape)
        return t(self.values), t(self.f3_summary), t(self.f4_summary)

    def to_dict(self) -> dict:
        return {k: {"shape": list(v.shape), "data": np.asarray(v).ravel().tolist()}
                for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerEmbedding":
        return cls(**{k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                      for k, v in d.items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SpeakerEmbedding":
        return cls.from_dict(json.loads(Path(path).read_text()))


class FeatureExtractor(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.units = _down_path(arch)

    def forward(self, x):
        """Returns ``(embedding, f3_summary, f4_summary)``."""
        h = x
        outs = []
        for unit in self.units:
            h = unit(h)
            outs.append(h)
        f3 = outs[2].mean(dim=3, keepdim=True)
        f4 = outs[3].mean(dim=3, keepdim=True)
        return outs[3], f3, f4


def _tile_time(x, width):
    if x.shape[3] == width:
        return x
    idx = torch.arange(width, device=x.device) % x.shape[3]
    return x.index_select(3, idx)


class Generator(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.down = _down_path(arch)
        c4 = arch.fe_channels[3]
        c3 = arch.fe_channels[2]
        # bottleneck latent + tiled embedding; later units also receive the summaries
        extra = {0: c4, 1: c3}
        c_in = c4 + 1
        ups = []
        n = len(arch.up_channels)
        for i, (c, s, mode) in enumerate(zip(arch.up_channels, arch.up_strides, arch.up_modes)):
            final = i == n - 1
            ups.append(UpUnit(c_in, c, 1 if final else c, s, mode, arch.kernel, final=final,
                              negative_slope=arch.negative_slope))
            c_in = c + extra.get(i, 0)
        self.up = nn.ModuleList(ups)

    def forward(self, x, emb, f3, f4):
        h = x
        for unit in self.down:
            h = unit(h)
        h = torch.cat([h, _tile_time(emb, h.shape[3])], dim=1)
        for i, unit in enumerate(self.up):
            h = unit(h)
            if i == 0:
                h = torch.cat([h, f4.expand(-1, -1, -1, h.shape[3])], dim=1)
            elif i == 1:
                h = torch.cat([h, f3.expand(-1, -1, -1, h.shape[3])], dim=1)
        return torch.tanh(h)


def _conv_out(n, stride):
    return (n - 1) // stride + 1


class PatchClassifier(nn.Module):
    """Strided CNN over one patch width, linear head with ``2N`` logits."""

    def __init__(self, arch: ArchConfig, width: int, n_classes: int):
        super().__init__()
        self.negative_slope = arch.negative_slope
        convs = []
        c_in, h, w = 1, arch.n_mels, width
        for c in arch.disc_channels:
            convs.append(nn.Conv2d(c_in, c, arch.kernel, stride=2, padding=arch.kernel // 2))
            c_in, h, w = c, _conv_out(h, 2), _conv_out(w, 2)
        self.convs = nn.ModuleList(convs)
        self.head = nn.Linear(c_in * h * w, n_classes)

    def forward(self, x):
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), self.negative_slope)
        return self.head(h.flatten(1))


class Discriminator(nn.Module):
    def __init__(self, arch: ArchConfig, n_speakers: int):
        super().__init__()
        self.widths = tuple(int(w) for w in arch.disc_widths)
        self.nets = nn.ModuleDict({str(w): PatchClassifier(arch, w, 2 * n_speakers)
                                   for w in self.widths})

    def logits(self, patch, width: int):
        key = str(int(width))
        if key not in self.nets:
            raise UnknownWidth(f"no discriminator for width {width}; have {self.widths}")
        if patch.shape[-1] != int(width):
            raise ShapeMismatch(f"patch width {patch.shape[-1]} != {width}")
        return self.nets[key](patch)

    def forward(self, patch, width: int):
        return torch.softmax(self.logits(patch, width), dim=-1)


class VoiceConversionGAN(nn.Module):
    """Container for the three networks (the learnable model parameters)."""

    def __init__(self, arch: ArchConfig, n_speakers: int):
        super().__init__()
        self.arch = arch.validate()
        self.n_speakers = int(n_speakers)
        self.fe = FeatureExtractor(arch)
        self.gen = Generator(arch)
        self.disc = Discriminator(arch, n_speakers)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def convert(self, source, target):
        """``G(source, FE(target))`` on batched tensors."""
        return self.gen(source, *self.fe(target))


def _init_weights(model: nn.Module, generator: torch.Generator) -> None:
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            nn.init.zeros_(p)
        elif ".norm." in name and name.endswith("weight"):
            nn.init.ones_(p)
        else:
            fan_in = p[0].numel()
            with torch.no_grad():
                p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype)
                        * math.sqrt(1.0 / fan_in))


def init_params(arch: ArchConfig = ArchConfig(), n_speakers: int = 2, seed: int = 0,
                dtype=torch.float32) -> VoiceConversionGAN:
    """Build and deterministically initialise the three networks."""
    if n_speakers < 1:
        raise ValueError("n_speakers must be >= 1")
    model = VoiceConversionGAN(arch.validate(), n_speakers)
    model.to(dtype)
    _init_weights(model, torch.Generator().manual_seed(int(seed)))
    model.eval()
    return model


def param_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# functional inference API
# --------------------------------------------------------------------------

def _as_batch(window, model: VoiceConversionGAN) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(window) if not torch.is_tensor(window) else window)
    t = t.to(model.dtype)
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[None]
    if t.ndim != 4 or t.shape[1] != 1 or t.shape[2] != model.arch.n_mels:
        raise ShapeMismatch(f"expected [1, {model.arch.n_mels}, W] window, got {tuple(t.shape)}")
    return t


def fe_forward(model: VoiceConversionGAN, window) -> SpeakerEmbedding:
    """Embedding of one ``[n_mels, window]`` scaled-mel window."""
    x = _as_batch(window, model)
    if x.shape[0] != 1 or x.shape[3] != model.arch.window:
        raise ShapeMismatch(f"feature extractor takes exactly 1x{model.arch.n_mels}x"
                            f"{model.arch.window}, got {tuple(x.shape[1:])}")
    with torch.no_grad():
        e, f3, f4 = model.fe(x)
    return SpeakerEmbedding(e[0].double().numpy(), f3[0].double().numpy(), f4[0].double().numpy())


def gen_forward(model: VoiceConversionGAN, source, emb: SpeakerEmbedding) -> np.ndarray:
    """Convert one scaled window; returns an array shaped like ``source`` (``[1, F, W]``)."""
    x = _as_batch(source, model)
    a = model.arch
    t_prod = _prod(s[1] for s in a.fe_strides)
    if x.shape[0] != 1 or x.shape[3] % t_prod:
        raise ShapeMismatch(f"source width must be a multiple of {t_prod}")
    if emb.values.shape != (1, *a.embedding_shape):
        raise ShapeMismatch(f"embedding shape {emb.values.shape} != (1, {a.embedding_shape})")
    with torch.no_grad():
        y = model.gen(x, *emb.as_tensors(model.dtype))
    return y[0].double().numpy()


def disc_forward(model: VoiceConversionGAN, patch, width: int) -> np.ndarray:
    """Class probabilities; index ``2i`` is real-speaker-i, ``2i+1`` fake-speaker-i."""
    x = _as_batch(patch, model)
    with torch.no_grad():
        p = model.disc(x, width)
    return p[0].double().numpy()


# --------------------------------------------------------------------------
# discriminator patches
# --------------------------------------------------------------------------

def reflect_indices(width: int, target: int) -> np.ndarray:
    """Time indices that reflection-pad a ``width``-frame window to ``target`` frames."""
    if target <= width:
        return np.arange(width)
    total = target - width
    left = total // 2
    return np.pad(np.arange(width), (left, total - left), mode="reflect")[:target]


def crop(x: torch.Tensor, width: int, starts) -> torch.Tensor:
    """Batched time crops of ``x`` (``[B, 1, F, W]``); reflection-pads when ``width > W``."""
    W = x.shape[3]
    if width > W:
        idx = torch.as_tensor(reflect_indices(W, width))
        return x.index_select(3, idx)
    starts = np.asarray(starts, dtype=np.int64)
    idx = torch.as_tensor(starts[:, None] + np.arange(width)[None, :])
    return torch.gather(x, 3, idx[:, None, None, :].expand(-1, x.shape[1], x.shape[2], -1))


def draw_starts(rng: np.random.Generator, n: int, window: int, width: int) -> np.ndarray:
    if width >= window:
        return np.zeros(n, dtype=np.int64)
    return rng.integers(0, window - width + 1, size=n)


def patch_power(patches: torch.Tensor) -> torch.Tensor:
    """Mean of ``(v + 1) / 2`` per patch; 0 for silence, 1 for full scale."""
    return ((patches.detach() + 1.0) * 0.5).flatten(1).mean(dim=1)


def extract_patches(window, widths=(32, 64, 128), power_threshold: float = 0.15,
                    rng: np.random.Generator | None = None):
    """One random full-height crop per width, kept only if its power reaches the threshold."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x = torch.as_tensor(np.asarray(window, dtype=np.float64))
    if x.ndim == 2:
        x = x[None]
    x = x[None]
    out = []
    for w in widths:
        p = crop(x, int(w), draw_starts(rng, 1, x.shape[3], int(w)))
        if float(patch_power(p)[0]) >= power_threshold:
            out.append((p[0].numpy(), int(w)))
    return out


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

def _flatten_optimizer(prefix: str, opt: torch.optim.Optimizer, arrays: dict) -> dict:
    sd = opt.state_dict()
    for idx, state in sd["state"].items():
        for key, val in state.items():
            arrays[f"{prefix}/{idx}/{key}"] = torch.as_tensor(val)
    return {"param_groups": sd["param_groups"]}


def _restore_optimizer(prefix: str, meta: dict, arrays: dict, opt: torch.optim.Optimizer):
    state: dict = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = arr
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save_checkpoint(path, model: VoiceConversionGAN, step: int = 0, optimizers: dict | None = None,
                    rng_state: dict | None = None, extra: dict | None = None) -> None:
    """Versioned container: header JSON + little-endian float32 arrays."""
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    opt_meta = {}
    for name, opt in (optimizers or {}).items():
        opt_meta[name] = _flatten_optimizer(f"opt.{name}", opt, arrays)
    index, blobs, offset = [], [], 0
    for name, t in arrays.items():
        a = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({
        "arch": model.arch.to_dict(), "n_speakers": model.n_speakers, "step": int(step),
        "rng_state": rng_state, "optimizers": opt_meta, "extra": extra or {},
        "tensors": index,
    }).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


@dataclass
class Checkpoint:
    model: VoiceConversionGAN
    step: int
    rng_state: dict | None
    optimizer_meta: dict
    arrays: dict
    extra: dict = field(default_factory=dict)

    def restore_optimizers(self, optimizers: dict) -> None:
        for name, opt in optimizers.items():
            if name in self.optimizer_meta:
                _restore_optimizer(f"opt.{name}", self.optimizer_meta[name], self.arrays, opt)


def load_checkpoint(path, expect_arch: ArchConfig | None = None,
                    dtype=torch.float32) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointMismatch(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointMismatch(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen])
    base = 12 + hlen
    arch = ArchConfig.from_dict(header["arch"])
    if expect_arch is not None and arch != expect_arch:
        raise CheckpointMismatch(f"{path}: architecture differs from the configured one")
    arrays = {}
    for entry in header["tensors"]:
        n = _prod(entry["shape"]) if entry["shape"] else 1
        a = np.frombuffer(raw, dtype="<f4", count=n, offset=base + entry["offset"])
        arrays[entry["name"]] = torch.from_numpy(a.reshape(entry["shape"]).copy())
    model = init_params(arch, header["n_speakers"], seed=0, dtype=dtype)
    sd = {k[len("model/"):]: v.to(dtype) for k, v in arrays.items() if k.startswith("model/")}
    try:
        model.load_state_dict(sd)
    except RuntimeError as exc:
        raise CheckpointMismatch(str(exc)) from exc
    return Checkpoint(model, header["step"], header.get("rng_state"), header.get("optimizers", {}),
                      arrays, header.get("extra", {}))
