"""Behavior-cloning trainer.

Adam at lr 1e-3 with per-epoch cosine annealing to zero over ``max_epochs``,
early stopping on validation loss (patience 15), best-validation checkpoint
selection, and image augmentation applied with probability 0.5: random crop
then colour jitter (brightness, contrast, saturation, hue, in that order).
Audio is never augmented, so spectrograms are computed once per example and
cached.
"""
from __future__ import annotations

import copy
import dataclasses
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import dsp
from .datastore import Episode, example_count, frame_indices, audio_window, split
from .dsp import InvalidInputError
from .encoders import SCALES, load_checkpoint, save_checkpoint, set_frozen
from .policy import ACTION_SCALE, AVPolicy, PolicyConfig, bc_loss, center_crop

log = logging.getLogger(__name__)

METHODS = ("ours", "byol", "scratch", "vision_only", "mlp_ablation", "frozen_audio")
JITTER = {"brightness": 0.3, "contrast": 0.3, "saturation": 0.1, "hue": 0.2}


class TrainingError(RuntimeError):
    pass


class MissingPrerequisiteError(FileNotFoundError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 15
    lr: float = 0.001
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    aug_prob: float = 0.5
    horizon: int = 8
    val_fraction: float = 0.1
    scale: str = "desk"
    seed: int = 0
    method: str = "ours"
    audio_ckpt: str | None = None
    visual_ckpt: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.patience < self.max_epochs:
            raise InvalidInputError("patience must be smaller than max_epochs")
        self.betas = tuple(self.betas)

    @property
    def crop(self) -> int:
        return SCALES[self.scale].crop


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.json").write_text(json.dumps(self.to_dict(), indent=2))
        with open(out / "train_log.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for i, row in enumerate(zip(self.train_loss, self.val_loss, self.lr), start=1):
                w.writerow([i, *row])


def cosine_lr(epoch: int, base_lr: float = 0.001, max_epochs: int = 100) -> float:
    """Learning rate for zero-based ``epoch``: base * (1 + cos(pi * e / E)) / 2."""
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max_epochs))


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# -- augmentation --------------------------------------------------------------

def _gray(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x.unbind(dim=-3)
    return (0.2989 * r + 0.587 * g + 0.114 * b).unsqueeze(-3)


def _rgb_to_hsv(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x.unbind(dim=-3)
    maxc, _ = x.max(dim=-3)
    minc, _ = x.min(dim=-3)
    delta = maxc - minc
    flat = delta == 0
    safe = torch.where(flat, torch.ones_like(delta), delta)
    s = delta / torch.where(maxc == 0, torch.ones_like(maxc), maxc)
    h = torch.where(maxc == r, ((g - b) / safe) % 6.0,
                    torch.where(maxc == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = torch.where(flat, torch.zeros_like(h), h) / 6.0
    return torch.stack([h % 1.0, s, maxc], dim=-3)


def _hsv_to_rgb(x: torch.Tensor) -> torch.Tensor:
    h, s, v = x.unbind(dim=-3)
    k = lambda n: (n + h * 6.0) % 6.0  # noqa: E731
    f = lambda n: v - v * s * torch.clamp(torch.minimum(k(n), 4.0 - k(n)), 0.0, 1.0)  # noqa: E731
    return torch.stack([f(5.0), f(3.0), f(1.0)], dim=-3)


def color_jitter(x: torch.Tensor, brightness, contrast, saturation, hue) -> torch.Tensor:
    """Per-image jitter of float images [N, 3, H, W] in [0, 1]; factors are length-N tensors."""
    view = lambda f: torch.as_tensor(f, dtype=x.dtype).view(-1, 1, 1, 1)  # noqa: E731
    x = (x * view(brightness)).clamp(0, 1)
    mean = _gray(x).mean(dim=(-3, -2, -1), keepdim=True)
    c = view(contrast)
    x = (c * x + (1 - c) * mean).clamp(0, 1)
    s = view(saturation)
    x = (s * x + (1 - s) * _gray(x)).clamp(0, 1)
    shift = torch.as_tensor(hue, dtype=x.dtype)
    if torch.any(shift != 0):
        hsv = _rgb_to_hsv(x)
        h = (hsv[:, 0] + shift.view(-1, 1, 1)) % 1.0
        x = _hsv_to_rgb(torch.stack([h, hsv[:, 1], hsv[:, 2]], dim=1)).clamp(0, 1)
    return x


@dataclass
class AugmentParams:
    apply: bool
    top: int
    left: int
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0


def sample_augment(rng: np.random.Generator, size: tuple[int, int], crop: int, prob: float = 0.5) -> AugmentParams:
    h, w = size
    if h < crop or w < crop:
        raise InvalidInputError(f"image {h}x{w} smaller than crop {crop}")
    if rng.random() >= prob:
        return AugmentParams(False, (h - crop) // 2, (w - crop) // 2)
    return AugmentParams(
        True, int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1)),
        brightness=rng.uniform(1 - JITTER["brightness"], 1 + JITTER["brightness"]),
        contrast=rng.uniform(1 - JITTER["contrast"], 1 + JITTER["contrast"]),
        saturation=rng.uniform(1 - JITTER["saturation"], 1 + JITTER["saturation"]),
        hue=rng.uniform(-JITTER["hue"], JITTER["hue"]))


def apply_augment(images: np.ndarray, params: list[AugmentParams], crop: int) -> torch.Tensor:
    """uint8 [N, k, H, W, 3] -> float [N, k, 3, crop, crop]; the k frames of one window share params."""
    n, k = images.shape[:2]
    crops = np.stack([images[i, :, p.top:p.top + crop, p.left:p.left + crop] for i, p in enumerate(params)])
    x = torch.from_numpy(crops).float().div_(255.0).permute(0, 1, 4, 2, 3)
    idx = [i for i, p in enumerate(params) if p.apply]
    if idx:
        sub = x[idx].flatten(0, 1)
        rep = lambda name: np.repeat([getattr(params[i], name) for i in idx], k)  # noqa: E731
        sub = color_jitter(sub, rep("brightness"), rep("contrast"), rep("saturation"), rep("hue"))
        x[idx] = sub.view(len(idx), k, 3, crop, crop)
    return x


def augment_image(img: np.ndarray, rng: np.random.Generator, crop: int, prob: float = 0.5) -> np.ndarray:
    """Single HxWx3 uint8 image: with probability ``prob`` random crop + jitter, else centre crop."""
    params = sample_augment(rng, img.shape[:2], crop, prob)
    out = apply_augment(img[None, None], [params], crop)[0, 0]
    return np.round(out.permute(1, 2, 0).numpy() * 255.0).astype(np.uint8)


# -- data ----------------------------------------------------------------------

class WindowDataset:
    """Index over (episode, t) examples with cached spectrograms and normalized targets."""

    def __init__(self, episodes: list[Episode], horizon: int, use_audio: bool):
        self.episodes = episodes
        self.horizon = horizon
        self.use_audio = use_audio
        self.index = [(e, t) for e, ep in enumerate(episodes) for t in range(example_count(len(ep), horizon))]
        self._spec: dict[tuple[int, int], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.index)

    def spectrogram(self, e: int, t: int) -> np.ndarray:
        key = (e, t)
        if key not in self._spec:
            ep = self.episodes[e]
            raw = dsp.MultiChannelWaveform(audio_window(ep.audio.samples, t), ep.audio.sample_rate)
            self._spec[key] = dsp.process_clip(raw).values.astype(np.float32)
        return self._spec[key]

    def batch(self, ids, rng: np.random.Generator | None, crop: int, aug_prob: float):
        images, specs, targets, params = [], [], [], []
        for i in ids:
            e, t = self.index[i]
            ep = self.episodes[e]
            frames = ep.frames[frame_indices(t)]
            images.append(frames)
            if rng is not None and aug_prob > 0:
                params.append(sample_augment(rng, frames.shape[1:3], crop, aug_prob))
            else:
                params.append(sample_augment(np.random.default_rng(0), frames.shape[1:3], crop, 0.0))
            targets.append(ep.actions[t:t + self.horizon] / ACTION_SCALE)
            if self.use_audio:
                specs.append(self.spectrogram(e, t))
        x = apply_augment(np.stack(images), params, crop)
        spec = torch.from_numpy(np.stack(specs)) if self.use_audio else None
        y = torch.from_numpy(np.stack(targets)).float()
        return x, spec, y


# -- models per method ---------------------------------------------------------

def policy_config_for(cfg: TrainConfig) -> PolicyConfig:
    return PolicyConfig(scale=cfg.scale, horizon=cfg.horizon,
                        use_audio=cfg.method != "vision_only",
                        fusion="mlp" if cfg.method == "mlp_ablation" else "transformer",
                        audio_frozen=cfg.method == "frozen_audio")


def build_policy(cfg: TrainConfig) -> AVPolicy:
    torch.manual_seed(cfg.seed)
    model = AVPolicy(policy_config_for(cfg))
    needs_pretrained = {"ours": "avid", "mlp_ablation": "avid", "frozen_audio": "avid", "byol": "byol"}
    if cfg.method in needs_pretrained:
        if not cfg.audio_ckpt or not Path(cfg.audio_ckpt, "manifest.json").is_file():
            raise MissingPrerequisiteError(
                f"method {cfg.method!r} needs a {needs_pretrained[cfg.method]} audio checkpoint; "
                f"not found at {cfg.audio_ckpt!r}")
        load_checkpoint(model.audio_encoder, cfg.audio_ckpt)
        set_frozen(model.audio_encoder, cfg.method == "frozen_audio")
    if cfg.visual_ckpt:
        # Shared by every method so that only the audio initialisation differs between them.
        load_checkpoint(model.image_encoder, cfg.visual_ckpt)
    return model


# -- training loop -------------------------------------------------------------

def evaluate_loss(model: AVPolicy, data: WindowDataset, crop: int, batch_size: int) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            ids = range(start, min(start + batch_size, len(data)))
            x, spec, y = data.batch(ids, None, crop, 0.0)
            total += bc_loss(model(x, spec), y).item() * len(ids)
            count += len(ids)
    return total / max(count, 1)


def train(method: str, dataset: list[Episode], cfg: TrainConfig | None = None,
          out_dir=None, val_loss_hook: Callable[[int], float] | None = None,
          validation: list[Episode] | None = None):
    """Train one policy; returns (best-validation model, TrainLog).

    ``val_loss_hook(epoch)`` replaces the measured validation loss (test hook
    for the early-stopping state machine). ``validation`` supplies an explicit
    validation set instead of splitting ``dataset``; pass ``validation=[]`` to
    select on training loss (overfit checks).
    """
    cfg = dataclasses.replace(cfg, method=method) if cfg is not None else TrainConfig(method=method)
    if not dataset:
        raise TrainingError("empty dataset")
    if validation is None:
        train_eps, val_eps = split(dataset, cfg.val_fraction, cfg.seed)
    else:
        train_eps, val_eps = dataset, validation
    model = build_policy(cfg)
    use_audio = model.cfg.use_audio
    train_data = WindowDataset(train_eps, cfg.horizon, use_audio)
    val_data = WindowDataset(val_eps, cfg.horizon, use_audio) if val_eps else None
    if len(train_data) == 0:
        raise TrainingError(f"no training examples: all episodes shorter than H={cfg.horizon}")
    params = [p for p in model.parameters() if p.requires_grad]
    optim = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)
    stopper = EarlyStopping(cfg.patience)
    tlog = TrainLog()
    best_state = copy.deepcopy(model.state_dict())
    rng = np.random.default_rng([cfg.seed, 1])
    t0 = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        lr = cosine_lr(epoch - 1, cfg.lr, cfg.max_epochs)
        for g in optim.param_groups:
            g["lr"] = lr
        model.train()
        order = rng.permutation(len(train_data))
        running = 0.0
        for start in range(0, len(order), cfg.batch_size):
            ids = order[start:start + cfg.batch_size]
            x, spec, y = train_data.batch(ids, rng, cfg.crop, cfg.aug_prob)
            loss = bc_loss(model(x, spec), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {start // cfg.batch_size}")
            optim.zero_grad()
            loss.backward()
            optim.step()
            running += loss.item() * len(ids)
        train_loss = running / len(train_data)
        if val_loss_hook is not None:
            val_loss = float(val_loss_hook(epoch))
        elif val_data is not None and len(val_data):
            val_loss = evaluate_loss(model, val_data, cfg.crop, cfg.batch_size)
        else:
            val_loss = evaluate_loss(model, train_data, cfg.crop, cfg.batch_size)
        tlog.train_loss.append(train_loss)
        tlog.val_loss.append(val_loss)
        tlog.lr.append(lr)
        log.info("epoch %d lr %.2e train %.5f val %.5f", epoch, lr, train_loss, val_loss)
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_state = copy.deepcopy(model.state_dict())
        tlog.stopped_epoch = epoch
        if stop:
            break
    tlog.best_epoch = stopper.best_epoch
    tlog.wall_time = time.perf_counter() - t0
    model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        save_policy(model, Path(out_dir) / "checkpoint", cfg)
        tlog.save(out_dir)
    return model, tlog


def save_policy(model: AVPolicy, path, cfg: TrainConfig | None = None) -> Path:
    extra = {"policy_config": model.cfg.to_dict()}
    if cfg is not None:
        extra["train_config"] = asdict(cfg)
    return save_checkpoint(model, path, extra)


def load_policy(path) -> AVPolicy:
    from .encoders import read_manifest

    extra = read_manifest(path).get("extra", {})
    if "policy_config" not in extra:
        raise InvalidInputError(f"{path}: not a policy checkpoint")
    model = AVPolicy(PolicyConfig(**extra["policy_config"]))
    load_checkpoint(model, path)
    if model.audio_encoder is not None:
        set_frozen(model.audio_encoder, model.cfg.audio_frozen)
    return model.eval()


# -- gradient check ------------------------------------------------------------

def has_active_dropout(model: torch.nn.Module) -> bool:
    return model.training and any(isinstance(m, torch.nn.Dropout) and m.p > 0 for m in model.modules())


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int


class _KinkWatch:
    """Records the sign pattern at every ReLU input during a forward pass."""

    def __init__(self, model: torch.nn.Module):
        self.masks: list[torch.Tensor] = []
        self.handles = [m.register_forward_pre_hook(self._hook) for m in model.modules()
                        if isinstance(m, torch.nn.ReLU)]

    def _hook(self, module, args):
        self.masks.append(args[0] > 0)

    def run(self, fn):
        self.masks = []
        value = fn()
        return value, self.masks

    def close(self):
        for h in self.handles:
            h.remove()


def grad_check(model: torch.nn.Module, inputs, target, eps: float = 1e-5, floor: float = 1e-6,
               per_tensor: int | None = None, seed: int = 0) -> float:
    """Max elementwise relative error between autograd and central differences of bc_loss.

    See :func:`grad_check_detail`.
    """
    return grad_check_detail(model, inputs, target, eps, floor, per_tensor, seed).max_rel_error


def grad_check_detail(model: torch.nn.Module, inputs, target, eps: float = 1e-5, floor: float = 1e-6,
                      per_tensor: int | None = None, seed: int = 0) -> GradCheckResult:
    """Compare autograd against central differences, coordinate by coordinate.

    Relative error is |a - n| / max(|a| + |n|, floor). The floor matters for
    gradients that vanish identically (the attention key bias cannot change a
    softmax): there the central difference is pure rounding noise of order
    1e-16 * loss / eps, and dividing by it would report noise as error.

    A coordinate whose +-eps nudge flips the sign of any ReLU input straddles
    a kink, where the central difference does not estimate the derivative;
    such coordinates are skipped and counted. ``per_tensor`` checks that many
    randomly chosen entries of each parameter tensor instead of all of them
    (for full policies). Run in float64.
    """
    if has_active_dropout(model):
        raise TrainingError("grad_check needs a deterministic graph: put the model in eval mode "
                            "or set dropout to 0")
    inputs = inputs if isinstance(inputs, tuple) else (inputs,)

    def loss_fn():
        return bc_loss(model(*inputs), target)

    def same(a, b):
        return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))

    watch = _KinkWatch(model)
    try:
        model.zero_grad()
        loss, base = watch.run(loss_fn)
        loss.backward()
        rng = np.random.default_rng(seed)
        worst, checked, skipped = 0.0, 0, 0
        with torch.no_grad():
            for p in model.parameters():
                if not p.requires_grad:
                    continue
                analytic = p.grad.detach().clone().view(-1)
                flat = p.data.view(-1)
                idx = range(flat.numel())
                if per_tensor is not None and flat.numel() > per_tensor:
                    idx = sorted(rng.choice(flat.numel(), per_tensor, replace=False).tolist())
                for i in idx:
                    orig = flat[i].item()
                    flat[i] = orig + eps
                    plus, m_plus = watch.run(loss_fn)
                    flat[i] = orig - eps
                    minus, m_minus = watch.run(loss_fn)
                    flat[i] = orig
                    if not (same(base, m_plus) and same(base, m_minus)):
                        skipped += 1
                        continue
                    numeric = (plus.item() - minus.item()) / (2 * eps)
                    a = analytic[i].item()
                    worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), floor))
                    checked += 1
    finally:
        watch.close()
    return GradCheckResult(worst, checked, skipped)
