"""Visual and audio encoders, checkpoints, and parameter counting.

Both encoders map their modality to a 512-d feature. Three scales exist:

* ``desk``  - 4 strided 3x3 conv-BatchNorm-ReLU blocks (32/64/128/256
  channels), global average pool, linear to 512. 128x128 renders, 112 crops.
* ``tiny``  - same shape at half width on 64x64 renders with 56 crops; used
  where a single CPU core has to train many policies.
* ``paper`` - ResNet-18 image backbone and a two-conv-per-stage audio network,
  sized so the full policy lands near 20M parameters.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torchvision

from . import dsp
from .dsp import InvalidInputError

FEATURE_DIM = 512


@dataclass(frozen=True)
class ScaleSpec:
    render_size: tuple[int, int]
    crop: int
    visual_channels: tuple[int, ...]
    audio_channels: tuple[int, ...]


SCALES: dict[str, ScaleSpec] = {
    "tiny": ScaleSpec((64, 64), 56, (16, 32, 64, 128), (8, 16, 32, 64)),
    "desk": ScaleSpec((128, 128), 112, (32, 64, 128, 256), (32, 64, 128, 256)),
    "paper": ScaleSpec((480, 640), 224, (), (64, 128, 256, 512)),
}


class IncompatibleCheckpointError(ValueError):
    pass


@dataclass
class EncoderConfig:
    modality: str  # "visual" | "audio"
    scale: str = "desk"
    feature_dim: int = FEATURE_DIM
    frozen: bool = False
    init: str = "random"  # "random" or a checkpoint directory

    def __post_init__(self):
        if self.modality not in ("visual", "audio"):
            raise InvalidInputError(f"unknown modality {self.modality!r}")
        if self.scale not in SCALES:
            raise InvalidInputError(f"unknown scale {self.scale!r}; expected one of {tuple(SCALES)}")


def conv_stack(in_ch: int, channels, stride: int = 2, convs_per_stage: int = 1) -> nn.Sequential:
    """Stages of conv-BN-ReLU blocks; the first conv of each stage downsamples."""
    layers, c = [], in_ch
    for out in channels:
        for k in range(convs_per_stage):
            layers += [nn.Conv2d(c, out, 3, stride if k == 0 else 1, 1, bias=False),
                       nn.BatchNorm2d(out), nn.ReLU(inplace=True)]
            c = out
    return nn.Sequential(*layers)


class _Freezable(nn.Module):
    """A frozen encoder stays in eval mode so BatchNorm statistics do not drift either."""

    frozen = False

    def train(self, mode: bool = True):
        return super().train(mode and not self.frozen)


class ImageEncoder(_Freezable):
    """[B, 3, crop, crop] floats in [0, 1] -> [B, 512]."""

    def __init__(self, scale: str = "desk", feature_dim: int = FEATURE_DIM):
        super().__init__()
        spec = SCALES[scale]
        self.scale, self.crop = scale, spec.crop
        if scale == "paper":
            backbone = torchvision.models.resnet18(weights=None)
            backbone.fc = nn.Identity()
            self.backbone = backbone
            width = 512
        else:
            self.backbone = nn.Sequential(conv_stack(3, spec.visual_channels),
                                          nn.AdaptiveAvgPool2d(1), nn.Flatten())
            width = spec.visual_channels[-1]
        self.proj = nn.Linear(width, feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.backbone((x - 0.5) / 0.25))


class AudioEncoder(_Freezable):
    """[B, 80, 198] log-mel -> [B, 512]."""

    def __init__(self, scale: str = "desk", feature_dim: int = FEATURE_DIM):
        super().__init__()
        spec = SCALES[scale]
        self.scale = scale
        per_stage = 2 if scale == "paper" else 1
        self.backbone = nn.Sequential(conv_stack(1, spec.audio_channels, convs_per_stage=per_stage),
                                      nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.proj = nn.Linear(spec.audio_channels[-1], feature_dim)

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        return self.proj(self.backbone(spec.unsqueeze(1)))


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    cls = ImageEncoder if cfg.modality == "visual" else AudioEncoder
    enc = cls(cfg.scale, cfg.feature_dim)
    if cfg.init != "random":
        load_checkpoint(enc, cfg.init)
    set_frozen(enc, cfg.frozen)
    return enc


def set_frozen(module: nn.Module, frozen: bool) -> None:
    module.frozen = frozen
    for p in module.parameters():
        p.requires_grad_(not frozen)
    if frozen:
        module.eval()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _first_param(model: nn.Module) -> torch.Tensor:
    return next(model.parameters())


def encode_image(encoder: ImageEncoder, img: np.ndarray) -> np.ndarray:
    """One HxWx3 uint8 image at the crop size -> 512 floats (eval mode)."""
    img = np.asarray(img)
    if img.shape != (encoder.crop, encoder.crop, 3):
        raise InvalidInputError(f"expected image {(encoder.crop, encoder.crop, 3)}, got {img.shape}")
    p = _first_param(encoder)
    x = torch.from_numpy(img).to(p.dtype).permute(2, 0, 1).unsqueeze(0) / 255.0
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        out = encoder(x)[0].numpy()
    encoder.train(was_training)
    return out


def encode_audio(encoder: AudioEncoder, spec: dsp.MelSpectrogram | np.ndarray) -> np.ndarray:
    values = spec.values if isinstance(spec, dsp.MelSpectrogram) else np.asarray(spec)
    expected = (dsp.N_MELS, dsp.frame_count(dsp.CLIP_SAMPLES))
    if values.shape != expected:
        raise InvalidInputError(f"expected spectrogram {expected}, got {values.shape}")
    p = _first_param(encoder)
    x = torch.from_numpy(values).to(p.dtype).unsqueeze(0)
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        out = encoder(x)[0].numpy()
    encoder.train(was_training)
    return out


# -- checkpoints ---------------------------------------------------------------

def fingerprint(state: dict[str, torch.Tensor]) -> str:
    """sha256 over the ordered (name, shape) list."""
    desc = [[name, list(t.shape)] for name, t in state.items()]
    return hashlib.sha256(json.dumps(desc).encode()).hexdigest()


def save_checkpoint(model: nn.Module, path, extra: dict | None = None) -> Path:
    """Write ``tensors.bin`` (raw little-endian arrays, concatenated) and ``manifest.json``."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    entries, offset = [], 0
    with open(d / "tensors.bin", "wb") as fh:
        for name, t in state.items():
            arr = t.detach().cpu().contiguous().numpy()
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = arr.tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"fingerprint": fingerprint(state), "tensors": entries, "extra": extra or {}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def read_manifest(path) -> dict:
    p = Path(path) / "manifest.json"
    if not p.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {p}")
    return json.loads(p.read_text())


def load_state(path) -> dict[str, torch.Tensor]:
    d = Path(path)
    manifest = read_manifest(d)
    blob = (d / "tensors.bin").read_bytes()
    state = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    return state


def load_checkpoint(model: nn.Module, path, prefix: str = "") -> dict:
    """Restore ``model`` from ``path`` (optionally the sub-tree under ``prefix``).

    The frozen flag is a property of the model config, so it is re-applied
    after loading rather than read from the checkpoint.
    """
    manifest = read_manifest(path)
    state = load_state(path)
    if prefix:
        state = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    expected = model.state_dict()
    if fingerprint(state) != fingerprint(expected):
        raise IncompatibleCheckpointError(
            f"{path}: architecture fingerprint mismatch "
            f"({fingerprint(state)[:12]} vs model {fingerprint(expected)[:12]})")
    frozen = getattr(model, "frozen", None)
    model.load_state_dict({k: v.to(expected[k].dtype) for k, v in state.items()})
    if frozen is not None:
        set_frozen(model, frozen)
    return manifest.get("extra", {})


def state_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
