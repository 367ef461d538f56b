"""Audio-visual fusion policy and quasi open-loop execution.

Four image tokens (oldest first) and, optionally, one audio token each get a
learned slot embedding, pass through a single pre-LayerNorm self-attention
block, and are concatenated into an MLP head that predicts H future actions.

Actions are predicted in normalized units (delta / MAX_DELTA) so that the
loss is on an O(1) scale; :class:`PolicyRunner` converts back.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import dsp
from .datastore import ACTION_DIM, ObservationHistory, ObservationWindow
from .dsp import InvalidInputError
from .encoders import FEATURE_DIM, SCALES, AudioEncoder, ImageEncoder, count_parameters, set_frozen

N_IMAGES = 4
ACTION_SCALE = 0.02


@dataclass
class PolicyConfig:
    scale: str = "desk"
    horizon: int = 8
    use_audio: bool = True
    fusion: str = "transformer"  # or "mlp" for the architecture ablation
    dim: int = FEATURE_DIM
    heads: int = 8
    ffn_ratio: int = 1
    head_hidden: int = 512
    dropout: float = 0.5
    activation: str = "gelu"
    pos_init: str = "normal"  # or "zeros"
    audio_frozen: bool = False

    def __post_init__(self):
        if self.fusion not in ("transformer", "mlp"):
            raise InvalidInputError(f"unknown fusion {self.fusion!r}")
        if self.horizon < 1:
            raise InvalidInputError("horizon must be >= 1")
        if self.scale not in SCALES:
            raise InvalidInputError(f"unknown scale {self.scale!r}")

    @property
    def n_tokens(self) -> int:
        return N_IMAGES + int(self.use_audio)

    def to_dict(self) -> dict:
        return asdict(self)


ACTIVATIONS = {"gelu": nn.GELU, "relu": nn.ReLU}


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise InvalidInputError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.last_weights: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // self.heads), dim=-1)
        self.last_weights = weights.detach()  # [B, heads, queries, keys]
        return self.out((weights @ v).transpose(1, 2).reshape(b, n, d))


class PreLNBlock(nn.Module):
    """x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int = FEATURE_DIM, heads: int = 8, ffn_ratio: int = 1, activation: str = "gelu"):
        super().__init__()
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, dim * ffn_ratio), ACTIVATIONS[activation](),
                                 nn.Linear(dim * ffn_ratio, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise InvalidInputError(f"token dim {x.shape[-1]} != block dim {self.dim}")
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class FusionHead(nn.Module):
    """Token features [B, n, dim] -> normalized action chunk [B, H, 6]."""

    def __init__(self, n_tokens: int, dim: int, heads: int, ffn_ratio: int, hidden: int,
                 horizon: int, dropout: float, activation: str = "gelu", pos_init: str = "normal"):
        super().__init__()
        self.horizon = horizon
        self.pos_embedding = nn.Parameter(torch.zeros(n_tokens, dim))
        if pos_init == "normal":
            nn.init.normal_(self.pos_embedding, std=0.02)
        self.block = PreLNBlock(dim, heads, ffn_ratio, activation)
        self.head = nn.Sequential(
            nn.Linear(n_tokens * dim, hidden), ACTIVATIONS[activation](), nn.Dropout(dropout),
            nn.Linear(hidden, horizon * ACTION_DIM))

    def embed(self, features: torch.Tensor) -> torch.Tensor:
        """Post-attention tokens, concatenated: [B, n * dim]."""
        return self.block(features + self.pos_embedding).flatten(1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(features)).view(-1, self.horizon, ACTION_DIM)


class MLPFusionHead(nn.Module):
    """Concatenated raw features through a 3-layer MLP; no attention, no slot embeddings."""

    def __init__(self, n_tokens: int, dim: int, hidden: int, horizon: int, dropout: float,
                 activation: str = "gelu"):
        super().__init__()
        self.horizon = horizon
        act = ACTIVATIONS[activation]
        self.mlp = nn.Sequential(
            nn.Linear(n_tokens * dim, hidden), act(), nn.Dropout(dropout),
            nn.Linear(hidden, hidden), act(), nn.Dropout(dropout),
            nn.Linear(hidden, horizon * ACTION_DIM))

    def embed(self, features: torch.Tensor) -> torch.Tensor:
        return features.flatten(1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.mlp(features.flatten(1)).view(-1, self.horizon, ACTION_DIM)


def transformer_fusion_params(n_tokens: int, dim: int, ffn_ratio: int, hidden: int, horizon: int) -> int:
    attn = 4 * dim * dim + 4 * dim
    ffn = 2 * dim * dim * ffn_ratio + dim * ffn_ratio + dim
    norms = 4 * dim
    head = n_tokens * dim * hidden + hidden + hidden * horizon * ACTION_DIM + horizon * ACTION_DIM
    return n_tokens * dim + attn + ffn + norms + head


def mlp_fusion_params(n_tokens: int, dim: int, hidden: int, horizon: int) -> int:
    return (n_tokens * dim * hidden + hidden + hidden * hidden + hidden
            + hidden * horizon * ACTION_DIM + horizon * ACTION_DIM)


def matched_mlp_hidden(cfg: PolicyConfig) -> int:
    """Hidden width that gives the MLP head as many parameters as attention + head."""
    target = transformer_fusion_params(cfg.n_tokens, cfg.dim, cfg.ffn_ratio, cfg.head_hidden, cfg.horizon)
    return min(range(16, 8 * cfg.dim),
               key=lambda h: abs(mlp_fusion_params(cfg.n_tokens, cfg.dim, h, cfg.horizon) - target))


class AVPolicy(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg.scale, cfg.dim)
        self.audio_encoder = AudioEncoder(cfg.scale, cfg.dim) if cfg.use_audio else None
        if cfg.fusion == "transformer":
            self.fusion = FusionHead(cfg.n_tokens, cfg.dim, cfg.heads, cfg.ffn_ratio, cfg.head_hidden,
                                     cfg.horizon, cfg.dropout, cfg.activation, cfg.pos_init)
        else:
            self.fusion = MLPFusionHead(cfg.n_tokens, cfg.dim, matched_mlp_hidden(cfg), cfg.horizon,
                                        cfg.dropout, cfg.activation)
        if self.audio_encoder is not None:
            set_frozen(self.audio_encoder, cfg.audio_frozen)

    @property
    def crop(self) -> int:
        return self.image_encoder.crop

    def features(self, images: torch.Tensor, spec: torch.Tensor | None = None) -> torch.Tensor:
        """Raw encoder tokens [B, n, dim]; images [B, 4, 3, crop, crop] in [0, 1]."""
        b = images.shape[0]
        tokens = self.image_encoder(images.flatten(0, 1)).view(b, N_IMAGES, -1)
        if self.audio_encoder is not None:
            if spec is None:
                raise InvalidInputError("audio policy needs a spectrogram")
            tokens = torch.cat([tokens, self.audio_encoder(spec).unsqueeze(1)], dim=1)
        return tokens

    def build_tokens(self, images, spec=None) -> torch.Tensor:
        """Encoder tokens plus slot embeddings (transformer fusion only)."""
        return self.features(images, spec) + self.fusion.pos_embedding

    def embed(self, images, spec=None) -> torch.Tensor:
        return self.fusion.embed(self.features(images, spec))

    def forward(self, images, spec=None) -> torch.Tensor:
        return self.fusion(self.features(images, spec))


def bc_loss(pred, target):
    """Mean over chunk steps and action dims of the squared error."""
    if tuple(pred.shape) != tuple(target.shape):
        raise InvalidInputError(f"prediction shape {tuple(pred.shape)} != target {tuple(target.shape)}")
    if isinstance(pred, torch.Tensor):
        return ((pred - target) ** 2).mean()
    return float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))


# -- inference -----------------------------------------------------------------

def center_crop(images: np.ndarray, crop: int) -> np.ndarray:
    """Centre crop on the trailing H, W, C axes."""
    h, w = images.shape[-3:-1]
    if h < crop or w < crop:
        raise InvalidInputError(f"image {h}x{w} smaller than crop {crop}")
    top, left = (h - crop) // 2, (w - crop) // 2
    return images[..., top:top + crop, left:left + crop, :]


def images_to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """uint8 [..., H, W, 3] -> float [..., 3, H, W] in [0, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(images)).to(dtype) / 255.0
    return t.movedim(-1, -3)


class PolicyRunner:
    """Wraps a trained policy as ``window -> action chunk`` in real action units."""

    def __init__(self, model: AVPolicy, record_embeddings: bool = False):
        self.model = model.eval()
        self.record_embeddings = record_embeddings
        self.embeddings: list[np.ndarray] = []
        self.calls = 0

    @property
    def horizon(self) -> int:
        return self.model.cfg.horizon

    def prepare(self, window: ObservationWindow):
        dtype = next(self.model.parameters()).dtype
        images = images_to_tensor(center_crop(window.images, self.model.crop), dtype).unsqueeze(0)
        spec = None
        if self.model.cfg.use_audio:
            values = dsp.process_clip(window.audio).values
            spec = torch.from_numpy(values).to(dtype).unsqueeze(0)
        return images, spec

    def __call__(self, window: ObservationWindow) -> np.ndarray:
        self.calls += 1
        images, spec = self.prepare(window)
        with torch.no_grad():
            features = self.model.features(images, spec)
            if self.record_embeddings:
                self.embeddings.append(self.model.fusion.embed(features)[0].numpy().copy())
            chunk = self.model.fusion(features)[0].numpy()
        return chunk.astype(np.float64) * ACTION_SCALE


@dataclass
class Trajectory:
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    inference_steps: list = field(default_factory=list)
    success: bool = False
    final_reward: float = 0.0

    @property
    def n_inferences(self) -> int:
        return len(self.inference_steps)

    def __len__(self) -> int:
        return len(self.actions)


def quasi_open_loop_rollout(policy, env, h: int = 2, max_steps: int | None = None,
                            seed: int = 0, horizon: int | None = None) -> Trajectory:
    """Re-plan every ``h`` steps; execute the first ``h`` actions of each chunk.

    ``policy`` maps an :class:`ObservationWindow` to an [H, 6] array in action
    units. Windows are rebuilt from the live history at each re-plan, so an
    inference never sees observations newer than its own time step.
    """
    H = horizon if horizon is not None else getattr(policy, "horizon", None)
    if H is not None and not 1 <= h <= H:
        raise InvalidInputError(f"need 1 <= h <= H, got h={h}, H={H}")
    if h < 1:
        raise InvalidInputError(f"h must be >= 1, got {h}")
    max_steps = max_steps if max_steps is not None else env.cfg.max_steps
    history = ObservationHistory()
    history.append(env.reset(seed))
    traj = Trajectory()
    done, t, info = False, 0, {"success": False}
    reward = 0.0
    while not done and t < max_steps:
        traj.inference_steps.append(t)
        chunk = np.asarray(policy(history.window(t)))
        if H is not None and chunk.shape != (H, ACTION_DIM):
            raise InvalidInputError(f"policy returned chunk {chunk.shape}, expected {(H, ACTION_DIM)}")
        for a in chunk[:h]:
            obs, reward, done, info = env.step(a)
            history.append(obs)
            traj.actions.append(info["applied_action"])
            traj.rewards.append(reward)
            t += 1
            if done or t >= max_steps:
                break
    traj.success = bool(info["success"])
    traj.final_reward = float(reward)
    return traj
