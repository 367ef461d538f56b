"""Encoder pretraining at desk scale.

``avid_style``: cross-modal instance discrimination between 4-frame clips and
2 s audio clips drawn from a procedurally generated corpus of drops, slides
and taps over eight materials (the three task materials plus five that never
occur in the tasks). ``byol_style``: BYOL on task spectrograms only, with two
augmentations (log-domain mixup and random resize-crop).

Both emit an audio-encoder checkpoint in the encoders format; ``avid_style``
also emits the jointly trained visual encoder.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import dsp, simworld as sw
from .datastore import FRAME_OFFSETS, Episode, audio_window, example_count
from .dsp import InvalidInputError, MultiChannelWaveform
from .encoders import SCALES, AudioEncoder, ImageEncoder, save_checkpoint

log = logging.getLogger(__name__)

PROJ_DIM = 128
TEMPERATURE = 0.07
EMA_DECAY = 0.99
CLIP_SECONDS = 2.0
# Frame times within the 2 s clip, matching the policy's frame offsets at 30 Hz.
FRAME_TIMES = tuple(CLIP_SECONDS + off / sw.CONTROL_RATE for off in FRAME_OFFSETS)

MATERIAL_COLORS = {
    "metal_zip": (170, 175, 185),
    "ceramic_edge": (235, 235, 225),
    "tool_slide": (120, 120, 135),
    "wood_knock": (150, 100, 50),
    "glass_tap": (150, 210, 230),
    "rubber_thud": (30, 30, 30),
    "plastic_scrape": (220, 60, 160),
    "sand_pour": (210, 190, 120),
}


# -- corpus --------------------------------------------------------------------

@dataclass
class PretrainCorpus:
    frames: np.ndarray  # [N, 4, H, W, 3] uint8
    spectrograms: np.ndarray  # [N, 80, 198] float32
    meta: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def subset(self, idx) -> "PretrainCorpus":
        idx = np.asarray(idx)
        return PretrainCorpus(self.frames[idx], self.spectrograms[idx], [self.meta[i] for i in idx])


def _object_position(obj: dict, t: float) -> tuple[float, float]:
    """(x, bottom z) of a corpus object at time t."""
    if obj["kind"] == "drop":
        if t >= obj["onset"]:
            return obj["x"], obj["table_z"]
        fall = obj["drop_height"] * (obj["onset"] - t) / obj["fall_time"]
        return obj["x"], obj["table_z"] + min(fall, obj["drop_height"])
    if obj["kind"] == "slide":
        frac = np.clip((t - obj["onset"]) / obj["slide_time"], 0.0, 1.0)
        return obj["x"] + frac * obj["slide_dx"], obj["table_z"]
    return obj["x"], obj["table_z"]


def _tool_position(obj: dict, t: float) -> tuple[float, float]:
    """Tapping tool hovers above the object and touches it at the onset."""
    top = obj["table_z"] + obj["size"]
    dt = abs(t - obj["onset"])
    return obj["x"] + obj["size"] / 2, top + min(0.12, 0.25 * dt)


# Scene colours come from small palettes (the task themes plus a few others).
# Fully random colours would give every pair a unique visual identity that
# the video side can memorise instead of learning what sounds like what.
BACKGROUNDS = tuple(dict.fromkeys([th.background for task in sw.THEMES.values() for th in task.values()]
                                  + [(255, 255, 255), (128, 128, 128)]))
TABLES = tuple(dict.fromkeys([th.table for task in sw.THEMES.values() for th in task.values()]))


def _scene(rng: np.random.Generator) -> tuple[dict, list[dict], list[sw.ContactEvent]]:
    scene = {"background": BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))],
             "table": TABLES[int(rng.integers(len(TABLES)))],
             "table_z": float(rng.uniform(0.02, 0.08))}
    objects, events = [], []
    for _ in range(int(rng.integers(1, 4))):
        material = sw.MATERIAL_NAMES[int(rng.integers(len(sw.MATERIAL_NAMES)))]
        size = float(rng.uniform(0.02, 0.07))
        kind = ("drop", "slide", "tap")[int(rng.integers(3))]
        obj = {"material": material, "size": size, "kind": kind,
               "x": float(rng.uniform(0.05, 0.5)), "table_z": scene["table_z"],
               "onset": float(rng.uniform(0.1, CLIP_SECONDS - 0.1)),
               # Larger objects ring lower.
               "freq_scale": float(np.clip(0.04 / size, 0.6, 1.6))}
        amp = float(rng.uniform(0.2, 0.8))
        if kind == "drop":
            obj.update(drop_height=float(rng.uniform(0.05, 0.15)), fall_time=float(rng.uniform(0.3, 0.8)))
            events.append(sw.ContactEvent(obj["onset"], amp, material, "impact", obj["freq_scale"]))
        elif kind == "slide":
            obj.update(slide_time=float(rng.uniform(0.2, 0.6)), slide_dx=float(rng.uniform(-0.1, 0.1)))
            # Friction for the slide duration: a train of short noise bursts.
            n_bursts = max(1, int(obj["slide_time"] * 20))
            for k in range(n_bursts):
                onset = obj["onset"] + k * obj["slide_time"] / n_bursts
                if onset < CLIP_SECONDS:
                    events.append(sw.ContactEvent(onset, amp * 0.2, material, "friction", obj["freq_scale"]))
        else:
            events.append(sw.ContactEvent(obj["onset"], amp, material, "impact", obj["freq_scale"]))
        objects.append(obj)
    return scene, objects, events


def _friction_envelope(events: list[sw.ContactEvent], n: int, rate: int, duration: float = 0.05):
    """Friction events in the simulator run to the end of the buffer; gate corpus bursts to 50 ms."""
    gate = np.zeros(n)
    for ev in events:
        s = int(round(ev.onset * rate))
        gate[s:s + int(duration * rate)] = 1.0
    return gate


def _render_pair(scene: dict, objects: list[dict], size: tuple[int, int]) -> np.ndarray:
    frames = []
    for t in FRAME_TIMES:
        canvas = sw.Canvas(size[0], size[1], scene["background"])
        canvas.box(sw.X_RANGE[0], sw.Z_RANGE[0], sw.X_RANGE[1], scene["table_z"], scene["table"])
        for obj in objects:
            x, z = _object_position(obj, t)
            canvas.box(x, z, x + obj["size"], z + obj["size"], MATERIAL_COLORS[obj["material"]])
            if obj["kind"] == "tap":
                tx, tz = _tool_position(obj, t)
                canvas.box(tx - 0.004, tz, tx + 0.004, tz + 0.06, sw.GRIPPER_COLOR)
        frames.append(canvas.img)
    return np.stack(frames)


def _pair_audio(objects: list[dict], events: list[sw.ContactEvent], seed: int) -> np.ndarray:
    rate = sw.AUDIO_RATE
    n = int(CLIP_SECONDS * rate)
    impacts = [e for e in events if e.kind == "impact"]
    frictions = [e for e in events if e.kind == "friction"]
    audio = sw.synthesize_contact_audio(impacts, CLIP_SECONDS, seed).samples
    if frictions:
        gated = sw.base_waveform(frictions, CLIP_SECONDS, seed) * _friction_envelope(frictions, n, rate)
        audio = np.clip(audio + gated[None, :], -1.0, 1.0)
    return audio


def generate_pretrain_corpus(n_pairs: int, seed: int = 0, image_size: tuple[int, int] = (128, 128)) -> PretrainCorpus:
    """Deterministic corpus of (4 frames, 2 s log-mel) pairs with per-pair event metadata."""
    if n_pairs < 1:
        raise InvalidInputError(f"n_pairs must be >= 1, got {n_pairs}")
    frames = np.empty((n_pairs, len(FRAME_TIMES), *image_size, 3), dtype=np.uint8)
    specs = np.empty((n_pairs, dsp.N_MELS, dsp.frame_count(dsp.CLIP_SAMPLES)), dtype=np.float32)
    meta = []
    for i in range(n_pairs):
        rng = np.random.default_rng([seed, i])
        scene, objects, events = _scene(rng)
        frames[i] = _render_pair(scene, objects, image_size)
        audio = _pair_audio(objects, events, sw.hash_seed(seed, i))
        specs[i] = dsp.process_clip(MultiChannelWaveform(audio, sw.AUDIO_RATE)).values
        meta.append({"scene": scene, "objects": objects,
                     "events": [{"onset": e.onset, "material": e.material, "kind": e.kind,
                                 "amplitude": e.amplitude} for e in events]})
    return PretrainCorpus(frames, specs, meta)


# -- losses --------------------------------------------------------------------

def _check_unit_rows(x: torch.Tensor, name: str, tol: float = 1e-6) -> None:
    norms = x.norm(dim=1)
    if not torch.all((norms - 1).abs() <= tol):
        raise InvalidInputError(f"{name} rows must be L2-normalized (max deviation "
                                f"{(norms - 1).abs().max().item():.2e})")


def cross_modal_nce_loss(video: torch.Tensor, audio: torch.Tensor, tau: float = TEMPERATURE) -> torch.Tensor:
    """Symmetric InfoNCE over in-batch negatives; the pairing is the identity."""
    if tau <= 0:
        raise InvalidInputError(f"temperature must be > 0, got {tau}")
    if video.shape != audio.shape or video.shape[0] < 2:
        raise InvalidInputError(f"need matching [N>=2, d] batches, got {tuple(video.shape)} and {tuple(audio.shape)}")
    _check_unit_rows(video, "video")
    _check_unit_rows(audio, "audio")
    logits = video @ audio.T / tau
    target = torch.arange(video.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def byol_loss(prediction: torch.Tensor, projection: torch.Tensor) -> torch.Tensor:
    """Per-sample 2 - 2 cos, averaged over the batch."""
    p = F.normalize(prediction, dim=-1)
    z = F.normalize(projection, dim=-1)
    return (2.0 - 2.0 * (p * z).sum(dim=-1)).mean()


# -- networks ------------------------------------------------------------------

def mlp_head(in_dim: int, out_dim: int = PROJ_DIM, hidden: int = 512) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out_dim))


class AVIDModel(nn.Module):
    def __init__(self, scale: str = "desk"):
        super().__init__()
        self.image_encoder = ImageEncoder(scale)
        self.audio_encoder = AudioEncoder(scale)
        self.video_head = mlp_head(len(FRAME_TIMES) * self.image_encoder.proj.out_features)
        self.audio_head = mlp_head(self.audio_encoder.proj.out_features)

    def video_embedding(self, frames: torch.Tensor) -> torch.Tensor:
        b = frames.shape[0]
        feats = self.image_encoder(frames.flatten(0, 1)).view(b, -1)
        return F.normalize(self.video_head(feats), dim=-1)

    def audio_embedding(self, spec: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.audio_head(self.audio_encoder(spec)), dim=-1)


class BYOLOnline(nn.Module):
    def __init__(self, scale: str = "desk"):
        super().__init__()
        self.encoder = AudioEncoder(scale)
        self.projector = mlp_head(self.encoder.proj.out_features)
        self.predictor = mlp_head(PROJ_DIM)

    def project(self, spec: torch.Tensor) -> torch.Tensor:
        return self.projector(self.encoder(spec))

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        return self.predictor(self.project(spec))


@dataclass
class EMAState:
    """Target network tracking the online one; only its ``project`` path is used."""
    network: nn.Module
    m: float = EMA_DECAY

    def __post_init__(self):
        if not 0.0 < self.m < 1.0:
            raise InvalidInputError(f"EMA decay must be in (0, 1), got {self.m}")
        for p in self.network.parameters():
            p.requires_grad_(False)

    @classmethod
    def from_online(cls, online: nn.Module, m: float = EMA_DECAY) -> "EMAState":
        return cls(copy.deepcopy(online), m)

    def project(self, spec: torch.Tensor) -> torch.Tensor:
        return self.network.project(spec)

    @torch.no_grad()
    def update(self, online: nn.Module) -> None:
        targets = dict(self.network.named_parameters())
        for name, p in online.named_parameters():
            if name in targets:
                targets[name].mul_(self.m).add_(p.detach(), alpha=1.0 - self.m)


# -- BYOL augmentations ----------------------------------------------------------

def log_mixup(x: torch.Tensor, memory: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
    """Mix in linear power, return to log: log((1-l) e^x + l e^m)."""
    lam = lam.view(-1, 1, 1).to(x.dtype)
    return torch.log((1 - lam) * torch.exp(x) + lam * torch.exp(memory))


def random_resize_crop(x: torch.Tensor, scales: np.ndarray, offsets: np.ndarray) -> torch.Tensor:
    """Per-sample crop of size (scale_f*F, scale_t*T) resized back to (F, T).

    Scales above 1 crop from a zero-padded canvas. ``offsets`` in [0, 1) place
    the crop within the valid range.
    """
    n, fdim, tdim = x.shape
    out = torch.empty_like(x)
    for i in range(n):
        ch = max(1, int(round(scales[i, 0] * fdim)))
        cw = max(1, int(round(scales[i, 1] * tdim)))
        canvas_h, canvas_w = max(ch, fdim), max(cw, tdim)
        canvas = x.new_zeros(canvas_h, canvas_w)
        top_pad, left_pad = (canvas_h - fdim) // 2, (canvas_w - tdim) // 2
        canvas[top_pad:top_pad + fdim, left_pad:left_pad + tdim] = x[i]
        top = int(offsets[i, 0] * (canvas_h - ch + 1))
        left = int(offsets[i, 1] * (canvas_w - cw + 1))
        crop = canvas[top:top + ch, left:left + cw]
        out[i] = F.interpolate(crop[None, None], size=(fdim, tdim), mode="bilinear", align_corners=False)[0, 0]
    return out


def byol_augment(x: torch.Tensor, memory: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    n = x.shape[0]
    picks = torch.from_numpy(rng.integers(0, memory.shape[0], n))
    lam = torch.from_numpy(rng.uniform(0.0, 0.4, n))
    mixed = log_mixup(x, memory[picks], lam)
    return random_resize_crop(mixed, rng.uniform(0.6, 1.5, (n, 2)), rng.random((n, 2)))


def byol_audio_step(online: BYOLOnline, target: EMAState, batch: torch.Tensor, seed: int,
                    optimizer: torch.optim.Optimizer, memory: torch.Tensor | None = None):
    """One BYOL update; returns (loss, target) with the EMA applied after the optimizer step."""
    if batch.shape[0] < 2:
        raise InvalidInputError("BYOL needs a batch of at least 2 spectrograms")
    rng = np.random.default_rng(seed)
    memory = batch if memory is None else memory
    v1, v2 = byol_augment(batch, memory, rng), byol_augment(batch, memory, rng)
    with torch.no_grad():
        z1, z2 = target.project(v1), target.project(v2)
    loss = 0.5 * (byol_loss(online(v1), z2) + byol_loss(online(v2), z1))
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    target.update(online)
    return loss.item(), target


# -- runs ----------------------------------------------------------------------

@dataclass
class PretrainConfig:
    method: str = "avid_style"
    scale: str = "desk"
    seed: int = 0
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-4
    n_pairs: int = 2000
    n_heldout: int = 64
    tau: float = TEMPERATURE
    spec_noise: float = 0.5  # std of Gaussian noise added to z-scored spectrograms during avid_style training
    ema_decay: float = EMA_DECAY
    proj_dim: int = PROJ_DIM

    def __post_init__(self):
        if self.method not in ("avid_style", "byol_style"):
            raise InvalidInputError(f"unknown pretraining method {self.method!r}")
        if self.scale not in SCALES:
            raise InvalidInputError(f"unknown scale {self.scale!r}")

    @classmethod
    def for_method(cls, method: str, **overrides) -> "PretrainConfig":
        if method == "byol_style":
            base = dict(epochs=100, batch_size=128, lr=3e-4)
        else:
            base = dict(epochs=30, batch_size=64, lr=1e-4)
        base.update(overrides)
        return cls(method=method, **base)


@dataclass
class PretrainLog:
    loss: list[float] = field(default_factory=list)
    retrieval_top1: list[float] = field(default_factory=list)
    chance: float = 0.0
    wall_time: float = 0.0

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))


def _frames_tensor(frames: np.ndarray, crop: int, rng: np.random.Generator | None = None) -> torch.Tensor:
    """Centre crop, or with ``rng`` one random crop per clip (shared by its frames)."""
    h, w = frames.shape[-3:-1]
    if rng is None:
        top, left = (h - crop) // 2, (w - crop) // 2
        x = frames[..., top:top + crop, left:left + crop, :]
    else:
        tops = rng.integers(0, h - crop + 1, len(frames))
        lefts = rng.integers(0, w - crop + 1, len(frames))
        x = np.stack([f[:, t:t + crop, l:l + crop] for f, t, l in zip(frames, tops, lefts)])
    return torch.from_numpy(np.ascontiguousarray(x)).float().div_(255.0).movedim(-1, -3)


@torch.no_grad()
def retrieval_accuracy(model: AVIDModel, corpus: PretrainCorpus, crop: int) -> float:
    """Audio-to-video top-1 accuracy over the whole ``corpus`` as the gallery."""
    model.eval()
    v = model.video_embedding(_frames_tensor(corpus.frames, crop))
    a = model.audio_embedding(torch.from_numpy(corpus.spectrograms))
    hits = (a @ v.T).argmax(dim=1) == torch.arange(len(corpus))
    model.train()
    return hits.float().mean().item()


def pretrain_avid(cfg: PretrainConfig, corpus: PretrainCorpus | None = None,
                  heldout: PretrainCorpus | None = None):
    torch.manual_seed(cfg.seed)
    size = SCALES[cfg.scale].render_size
    crop = SCALES[cfg.scale].crop
    if corpus is None:
        corpus = generate_pretrain_corpus(cfg.n_pairs, cfg.seed, size)
    if heldout is None:
        heldout = generate_pretrain_corpus(cfg.n_heldout, cfg.seed + 1_000_003, size)
    model = AVIDModel(cfg.scale)
    optim = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    plog = PretrainLog(chance=1.0 / len(heldout))
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(corpus))
        total, count = 0.0, 0
        for start in range(0, len(order) - 1, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            if len(idx) < 2:
                continue
            v = model.video_embedding(_frames_tensor(corpus.frames[idx], crop, rng))
            spec = torch.from_numpy(corpus.spectrograms[idx])
            if cfg.spec_noise > 0:
                spec = spec + cfg.spec_noise * torch.from_numpy(
                    rng.standard_normal(spec.shape).astype(np.float32))
            a = model.audio_embedding(spec)
            loss = cross_modal_nce_loss(v, a, cfg.tau)
            optim.zero_grad()
            loss.backward()
            optim.step()
            total += loss.item() * len(idx)
            count += len(idx)
        plog.loss.append(total / count)
        plog.retrieval_top1.append(retrieval_accuracy(model, heldout, crop))
        log.info("avid epoch %d loss %.4f retrieval %.3f", epoch + 1, plog.loss[-1], plog.retrieval_top1[-1])
    plog.wall_time = time.perf_counter() - t0
    return model, plog


def task_spectrograms(episodes: list[Episode], horizon: int = 8) -> np.ndarray:
    """Every BC training window's spectrogram, the in-domain BYOL data."""
    out = []
    for ep in episodes:
        for t in range(example_count(len(ep), horizon)):
            raw = MultiChannelWaveform(audio_window(ep.audio.samples, t), ep.audio.sample_rate)
            out.append(dsp.process_clip(raw).values.astype(np.float32))
    if not out:
        raise InvalidInputError("no task spectrograms: dataset empty or episodes too short")
    return np.stack(out)


def pretrain_byol(cfg: PretrainConfig, spectrograms: np.ndarray):
    torch.manual_seed(cfg.seed)
    online = BYOLOnline(cfg.scale)
    target = EMAState.from_online(online, cfg.ema_decay)
    optim = torch.optim.Adam(online.parameters(), lr=cfg.lr)
    data = torch.from_numpy(np.asarray(spectrograms, dtype=np.float32))
    rng = np.random.default_rng([cfg.seed, 3])
    plog = PretrainLog()
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            if len(idx) < 2:
                continue
            loss, target = byol_audio_step(online, target, data[idx], sw.hash_seed(cfg.seed, step), optim, data)
            total += loss * len(idx)
            count += len(idx)
            step += 1
        plog.loss.append(total / count)
        log.info("byol epoch %d loss %.4f", epoch + 1, plog.loss[-1])
    plog.wall_time = time.perf_counter() - t0
    return online, plog


def run_pretraining(method: str, config: PretrainConfig | None = None, out_dir=None,
                    corpus: PretrainCorpus | None = None, episodes: list[Episode] | None = None):
    """Run one pretraining method; writes ``audio/`` (and ``visual/``) checkpoints plus ``log.json``.

    Returns (out paths dict, PretrainLog). ``byol_style`` needs ``episodes``
    (task demonstrations) for its in-domain spectrograms.
    """
    cfg = config if config is not None else PretrainConfig.for_method(method)
    if cfg.method != method:
        cfg = PretrainConfig(**{**asdict(cfg), "method": method})
    paths = {}
    if method == "avid_style":
        model, plog = pretrain_avid(cfg, corpus)
        encoders = {"audio": model.audio_encoder, "visual": model.image_encoder}
    else:
        if not episodes:
            raise InvalidInputError("byol_style pretraining needs task demonstrations")
        model, plog = pretrain_byol(cfg, task_spectrograms(episodes))
        encoders = {"audio": model.encoder}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, enc in encoders.items():
            paths[name] = save_checkpoint(enc, out / name, {"pretrain_config": asdict(cfg), "modality": name})
        plog.save(out / "log.json")
        (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2))
    return paths, plog, encoders

