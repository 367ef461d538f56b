"""Episode persistence and (observation window, action chunk) example construction.

On-disk layout of one episode::

    episode_0000/
        frames/000000.png ...
        audio.wav            4-channel PCM16 @ 32 kHz
        actions.json         [[dx, dy, dz, da, db, dg], ...]
        meta.json            task, config_id, seed, success, reward
        manifest.json        sha256 of every other file
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import dsp
from .dsp import InvalidInputError, MultiChannelWaveform

CONTROL_RATE = 30
CHUNK_SAMPLES = math.ceil(dsp.RAW_RATE / CONTROL_RATE)
WINDOW_SAMPLES = dsp.RAW_CLIP_SAMPLES  # 2 s of raw audio
FRAME_OFFSETS = (-45, -30, -15, 0)  # control steps, 0.5 s apart
DEFAULT_HORIZON = 8
ACTION_DIM = 6


class EpisodeLoadError(IOError):
    pass


@dataclass
class Episode:
    frames: np.ndarray  # [T, H, W, 3] uint8
    audio: MultiChannelWaveform  # [4, T * CHUNK_SAMPLES]
    actions: np.ndarray  # [T, 6]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(-1, ACTION_DIM)
        if len(self.frames) != len(self.actions):
            raise InvalidInputError(
                f"{len(self.frames)} frames but {len(self.actions)} actions")

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class ObservationWindow:
    images: np.ndarray  # [4, H, W, 3] uint8, oldest first
    audio: MultiChannelWaveform  # [4, 64000]


@dataclass
class ActionChunk:
    actions: np.ndarray  # [H, 6]

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


# -- windowing -----------------------------------------------------------------

def frame_indices(t: int) -> list[int]:
    return [max(t + off, 0) for off in FRAME_OFFSETS]


def audio_window(track: np.ndarray, t: int) -> np.ndarray:
    """The 2 s of audio ending with control step t's chunk, zero-padded on the left."""
    end = (t + 1) * CHUNK_SAMPLES
    start = end - WINDOW_SAMPLES
    out = np.zeros((track.shape[0], WINDOW_SAMPLES))
    src = track[:, max(start, 0):end]
    out[:, WINDOW_SAMPLES - src.shape[1]:] = src
    return out


def observation_window(frames, track: np.ndarray, t: int, rate: int = dsp.RAW_RATE) -> ObservationWindow:
    images = np.stack([frames[i] for i in frame_indices(t)])
    return ObservationWindow(images, MultiChannelWaveform(audio_window(track, t), rate))


def make_examples(e: Episode, H: int = DEFAULT_HORIZON) -> list[tuple[ObservationWindow, ActionChunk]]:
    if H < 1:
        raise InvalidInputError(f"H must be >= 1, got {H}")
    return [(observation_window(e.frames, e.audio.samples, t, e.audio.sample_rate),
             ActionChunk(e.actions[t:t + H].copy()))
            for t in range(len(e) - H + 1)]


def example_count(length: int, H: int) -> int:
    return max(length - H + 1, 0)


class ObservationHistory:
    """Running record of a live episode, windowed the same way as stored demos."""

    def __init__(self):
        self.frames: list[np.ndarray] = []
        self.chunks: list[np.ndarray] = []

    def append(self, obs) -> None:
        self.frames.append(obs.image)
        self.chunks.append(obs.audio_chunk.samples)

    def __len__(self) -> int:
        return len(self.frames)

    def window(self, t: int | None = None) -> ObservationWindow:
        t = len(self.frames) - 1 if t is None else t
        if not 0 <= t < len(self.frames):
            raise InvalidInputError(f"no observation at step {t}")
        first = max(0, t + 1 - math.ceil(WINDOW_SAMPLES / CHUNK_SAMPLES))
        recent = np.concatenate(self.chunks[first:t + 1], axis=1)
        images = np.stack([self.frames[i] for i in frame_indices(t)])
        return ObservationWindow(images, MultiChannelWaveform(audio_window(recent, t - first), dsp.RAW_RATE))


# -- persistence ---------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_episode(e: Episode, directory) -> Path:
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(e.frames):
        Image.fromarray(np.asarray(frame, dtype=np.uint8)).save(d / "frames" / f"{i:06d}.png")
    dsp.write_wav(d / "audio.wav", e.audio)
    (d / "actions.json").write_text(json.dumps(e.actions.tolist()))
    (d / "meta.json").write_text(json.dumps(e.meta, indent=2, sort_keys=True))
    files = sorted(p for p in d.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {p.relative_to(d).as_posix(): _sha256(p) for p in files}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_episode(directory, verify: bool = True) -> Episode:
    d = Path(directory)
    for name in ("meta.json", "actions.json", "audio.wav", "manifest.json"):
        if not (d / name).is_file():
            raise EpisodeLoadError(f"{d}: missing {name}")
    manifest = json.loads((d / "manifest.json").read_text())
    if verify:
        for rel, digest in manifest.items():
            p = d / rel
            if not p.is_file():
                raise EpisodeLoadError(f"{d}: manifest lists missing file {rel}")
            if _sha256(p) != digest:
                raise EpisodeLoadError(f"{d}: checksum mismatch for {rel}")
    frame_files = sorted((d / "frames").glob("*.png"))
    if not frame_files:
        raise EpisodeLoadError(f"{d}: no frames")
    frames = np.stack([np.asarray(Image.open(p).convert("RGB")) for p in frame_files])
    actions = np.array(json.loads((d / "actions.json").read_text()), dtype=np.float64)
    meta = json.loads((d / "meta.json").read_text())
    audio = dsp.read_wav(d / "audio.wav")
    try:
        return Episode(frames, audio, actions, meta)
    except InvalidInputError as exc:
        raise EpisodeLoadError(f"{d}: {exc}") from exc


def save_dataset(episodes: list[Episode], directory, start_index: int = 0) -> list[Path]:
    root = Path(directory)
    return [save_episode(e, root / f"episode_{start_index + i:04d}") for i, e in enumerate(episodes)]


def episode_dirs(directory) -> list[Path]:
    return sorted(p for p in Path(directory).glob("episode_*") if p.is_dir())


def load_dataset(directory, verify: bool = True) -> list[Episode]:
    dirs = episode_dirs(directory)
    if not dirs:
        raise EpisodeLoadError(f"{directory}: no episode_* directories")
    return [load_episode(p, verify) for p in dirs]


def dataset_manifest(directory) -> dict[str, str]:
    """sha256 of every file under ``directory``; equal dicts mean identical datasets."""
    root = Path(directory)
    return {p.relative_to(root).as_posix(): _sha256(p)
            for p in sorted(root.rglob("*")) if p.is_file()}


# -- splitting -----------------------------------------------------------------

def split(dataset: list, val_fraction: float = 0.1, seed: int = 0) -> tuple[list, list]:
    """Episode-level train/validation split."""
    if not 0 < val_fraction < 1:
        raise InvalidInputError(f"val_fraction must be in (0, 1), got {val_fraction}")
    if len(dataset) < 2:
        raise InvalidInputError(f"need at least 2 episodes to split, got {len(dataset)}")
    n_val = min(max(1, math.floor(len(dataset) * val_fraction + 1e-9)), len(dataset) - 1)
    order = np.random.default_rng(seed).permutation(len(dataset))
    val_idx = set(order[:n_val].tolist())
    train = [ep for i, ep in enumerate(dataset) if i not in val_idx]
    val = [ep for i, ep in enumerate(dataset) if i in val_idx]
    return train, val


SCALING_FRACTIONS = (0.5, 1.0, 1.5)


def subsample(dataset: list, fraction: float, seed: int = 0, extra_pool: list | None = None) -> list:
    """Deterministic 50% subset, identity, or 150% superset drawn from ``extra_pool``."""
    if fraction not in SCALING_FRACTIONS:
        raise InvalidInputError(f"fraction must be one of {SCALING_FRACTIONS}, got {fraction}")
    n = len(dataset)
    if fraction == 1.0:
        return list(dataset)
    if fraction == 0.5:
        keep = sorted(np.random.default_rng(seed).permutation(n)[: round(n * 0.5)].tolist())
        return [dataset[i] for i in keep]
    need = round(n * 0.5)
    if extra_pool is None or len(extra_pool) < need:
        have = 0 if extra_pool is None else len(extra_pool)
        raise InvalidInputError(
            f"1.5x scaling needs {need} extra episodes in the extended pool, found {have}")
    return list(dataset) + list(extra_pool[:need])
