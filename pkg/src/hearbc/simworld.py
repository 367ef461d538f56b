"""Simulated contact-rich manipulation tasks with audible contact state.

Three tasks stand in for the real ones:

* ``zip``   - grab a zipper slider and pull it along its track. Whether the
  gripper actually caught the slider is random and only audible (a metallic
  click); it never shows up in the render.
* ``scoop`` - dig a spoon into a bowl of granular material and tilt it up.
  The bowl floor depth is hidden; hitting it makes a ceramic knock.
* ``flip``  - slide a spatula under an object resting on a table and rotate
  it over. The table height is hidden; scraping the table is audible.

Kinematics are planar (x, z) plus pitch; y, roll and yaw are integrated but
unused. The render is a side view of the workspace.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import dsp
from .dsp import InvalidInputError, MultiChannelWaveform

CONTROL_RATE = 30
AUDIO_RATE = dsp.RAW_RATE
CHUNK_SAMPLES = math.ceil(AUDIO_RATE / CONTROL_RATE)  # 1067
N_MICS = 4
MAX_STEPS = 300
MAX_DELTA = 0.02
SENSOR_NOISE = 1e-3

TASKS = ("flip", "scoop", "zip")
CONFIG_IDS = ("train", "test_a", "test_b")
DEMO_COUNTS = {"flip": 40, "scoop": 60, "zip": 50}

# Visible workspace, metres.
X_RANGE = (0.0, 0.6)
Z_RANGE = (0.0, 0.3)
POSE_LOW = np.array([0.0, 0.0, 0.0, -math.pi, -math.pi, -math.pi])
POSE_HIGH = np.array([0.6, 1.0, 0.3, math.pi, math.pi, math.pi])


class ProtocolError(RuntimeError):
    """Raised when the environment is driven out of order."""


class MisconfiguredEnvironmentError(RuntimeError):
    pass


# -- materials and audio synthesis ---------------------------------------------

@dataclass(frozen=True)
class Material:
    freq: float  # impact ring frequency, Hz
    tau: float  # impact decay constant, s
    band: tuple[float, float]  # friction noise band, Hz
    task: bool = True  # False for materials that only occur in the pretraining corpus


MATERIALS: dict[str, Material] = {
    "metal_zip": Material(3200.0, 0.008, (2500.0, 6000.0)),
    "ceramic_edge": Material(1100.0, 0.025, (800.0, 2000.0)),
    "tool_slide": Material(700.0, 0.010, (500.0, 4000.0)),
    "wood_knock": Material(450.0, 0.012, (200.0, 1200.0), task=False),
    "glass_tap": Material(5200.0, 0.040, (4000.0, 7000.0), task=False),
    "rubber_thud": Material(180.0, 0.006, (100.0, 600.0), task=False),
    "plastic_scrape": Material(2200.0, 0.005, (1500.0, 5000.0), task=False),
    "sand_pour": Material(6000.0, 0.003, (3000.0, 7800.0), task=False),
}
MATERIAL_NAMES = tuple(MATERIALS)
EVENT_KINDS = ("impact", "friction")


@dataclass(frozen=True)
class ContactEvent:
    onset: float  # seconds from chunk start
    amplitude: float
    material: str
    kind: str
    freq_scale: float = 1.0  # pitch multiplier; 1.0 for all task events

    def __post_init__(self):
        if self.amplitude < 0:
            raise InvalidInputError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.onset < 0:
            raise InvalidInputError(f"onset must be >= 0, got {self.onset}")
        if self.material not in MATERIALS:
            raise InvalidInputError(f"unknown material {self.material!r}")
        if self.kind not in EVENT_KINDS:
            raise InvalidInputError(f"unknown event kind {self.kind!r}")


def _event_unit_waveform(ev: ContactEvent, n: int, rate: int, seed: int) -> np.ndarray:
    """Waveform of an event at amplitude 1. Depends only on the event and seed."""
    out = np.zeros(n)
    start = int(round(ev.onset * rate))
    if start >= n:
        return out
    mat = MATERIALS[ev.material]
    t = np.arange(n - start) / rate
    if ev.kind == "impact":
        out[start:] = np.exp(-t / mat.tau) * np.sin(2 * np.pi * mat.freq * ev.freq_scale * t)
        return out
    # Friction: white noise restricted to the material band, unit RMS.
    key = [int(seed) & 0xFFFFFFFF, MATERIAL_NAMES.index(ev.material), int(round(ev.onset * 1e6)),
           int(round(ev.freq_scale * 1e4))]
    noise = np.random.default_rng(key).standard_normal(n - start)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n - start, 1.0 / rate)
    lo, hi = mat.band
    spectrum[(freqs < lo * ev.freq_scale) | (freqs > hi * ev.freq_scale)] = 0.0
    band = np.fft.irfft(spectrum, n=n - start)
    rms = np.sqrt(np.mean(band ** 2))
    if rms > 0:
        out[start:] = band / rms
    return out


def base_waveform(events: list[ContactEvent], duration: float, seed: int,
                  sample_rate: int = AUDIO_RATE) -> np.ndarray:
    """Sum of event waveforms before per-microphone gain, delay, noise and clipping."""
    if duration < 0:
        raise InvalidInputError(f"duration must be >= 0, got {duration}")
    n = int(round(duration * sample_rate))
    total = np.zeros(n)
    for ev in events:
        if ev.onset > duration:
            raise InvalidInputError(f"event onset {ev.onset} outside duration {duration}")
        if ev.amplitude:
            total += ev.amplitude * _event_unit_waveform(ev, n, sample_rate, seed)
    return total


def mic_response(seed: int, n_channels: int = N_MICS, sample_rate: int = AUDIO_RATE):
    """Per-microphone (gains, integer sample delays), fixed by seed."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 7])
    gains = rng.uniform(0.8, 1.2, n_channels)
    delays = np.round(rng.uniform(0.0, 1e-3, n_channels) * sample_rate).astype(int)
    return gains, delays


def synthesize_contact_audio(events: list[ContactEvent], duration: float, seed: int,
                             n_channels: int = N_MICS,
                             sample_rate: int = AUDIO_RATE) -> MultiChannelWaveform:
    base = base_waveform(events, duration, seed, sample_rate)
    gains, delays = mic_response(seed, n_channels, sample_rate)
    noise = np.random.default_rng([int(seed) & 0xFFFFFFFF, 11]).normal(
        0.0, SENSOR_NOISE, (n_channels, base.shape[0]))
    out = np.empty_like(noise)
    for k in range(n_channels):
        shifted = np.zeros_like(base)
        d = min(delays[k], base.shape[0])
        shifted[d:] = base[: base.shape[0] - d]
        out[k] = gains[k] * shifted + noise[k]
    return MultiChannelWaveform(np.clip(out, -1.0, 1.0), sample_rate)


# -- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class Theme:
    background: tuple[int, int, int]
    table: tuple[int, int, int]
    distractors: tuple[tuple[float, float, float, float, tuple[int, int, int]], ...] = ()
    placement_shift: float = 0.0


# Distractor boxes are (x0, z0, x1, z1, rgb) in workspace coordinates.
THEMES: dict[str, dict[str, Theme]] = {
    "zip": {
        "train": Theme((205, 200, 190), (120, 90, 60)),
        "test_a": Theme((60, 90, 140), (90, 90, 90), ((0.48, 0.16, 0.56, 0.26, (200, 60, 60)),), 0.05),
        "test_b": Theme((40, 40, 40), (160, 140, 100), ((0.02, 0.2, 0.08, 0.28, (240, 220, 30)),
                                                        (0.5, 0.02, 0.58, 0.08, (30, 200, 90))), -0.04),
    },
    "scoop": {
        "train": Theme((210, 220, 230), (130, 100, 70)),
        "test_a": Theme((150, 60, 60), (70, 70, 80), ((0.03, 0.18, 0.1, 0.26, (20, 20, 220)),), 0.06),
        "test_b": Theme((30, 60, 30), (180, 170, 150), ((0.45, 0.18, 0.55, 0.24, (250, 250, 250)),), -0.05),
    },
    "flip": {
        "train": Theme((225, 215, 200), (110, 80, 50)),
        "test_a": Theme((90, 50, 120), (60, 60, 60), ((0.45, 0.15, 0.52, 0.25, (250, 140, 0)),), 0.05),
        "test_b": Theme((20, 80, 90), (200, 200, 200), ((0.05, 0.2, 0.12, 0.27, (230, 30, 150)),), -0.04),
    },
}


@dataclass(frozen=True)
class TaskConfig:
    task: str
    config_id: str = "train"
    image_size: tuple[int, int] = (128, 128)
    max_steps: int = MAX_STEPS

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidInputError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.config_id not in CONFIG_IDS:
            raise InvalidInputError(f"unknown config {self.config_id!r}; expected one of {CONFIG_IDS}")
        if self.max_steps < 1:
            raise InvalidInputError("max_steps must be >= 1")

    @property
    def theme(self) -> Theme:
        return THEMES[self.task][self.config_id]


# -- rendering -----------------------------------------------------------------

class Canvas:
    """Side-view raster of the workspace; (x, z) metres to (col, row) pixels."""

    def __init__(self, height: int, width: int, background):
        self.h, self.w = height, width
        self.img = np.empty((height, width, 3), dtype=np.uint8)
        self.img[:] = background

    def col(self, x: float) -> int:
        return int(round((x - X_RANGE[0]) / (X_RANGE[1] - X_RANGE[0]) * (self.w - 1)))

    def row(self, z: float) -> int:
        return int(round((1.0 - (z - Z_RANGE[0]) / (Z_RANGE[1] - Z_RANGE[0])) * (self.h - 1)))

    def box(self, x0, z0, x1, z1, color):
        c0, c1 = sorted((self.col(x0), self.col(x1)))
        r0, r1 = sorted((self.row(z1), self.row(z0)))
        c0, r0 = max(c0, 0), max(r0, 0)
        c1, r1 = min(c1, self.w - 1), min(r1, self.h - 1)
        if c0 <= c1 and r0 <= r1:
            self.img[r0:r1 + 1, c0:c1 + 1] = color

    def segment(self, x, z, angle, length, color, thickness=0.004):
        for s in np.linspace(0.0, length, 8):
            px, pz = x + s * math.cos(angle), z + s * math.sin(angle)
            self.box(px - thickness, pz - thickness, px + thickness, pz + thickness, color)


GRIPPER_COLOR = (40, 40, 40)


def draw_common(canvas: Canvas, theme: Theme, table_z: float):
    canvas.box(X_RANGE[0], Z_RANGE[0], X_RANGE[1], table_z, theme.table)
    for x0, z0, x1, z1, color in theme.distractors:
        canvas.box(x0, z0, x1, z1, color)


def draw_gripper(canvas: Canvas, x: float, z: float):
    canvas.box(x - 0.012, z + 0.004, x + 0.012, z + 0.03, GRIPPER_COLOR)
    canvas.box(x - 0.012, z, x - 0.008, z + 0.03, GRIPPER_COLOR)
    canvas.box(x + 0.008, z, x + 0.012, z + 0.03, GRIPPER_COLOR)


# -- tasks ---------------------------------------------------------------------

@dataclass
class SimState:
    ee_pose: np.ndarray
    time_step: int = 0
    task_state: object = None

    def copy(self) -> "SimState":
        return SimState(self.ee_pose.copy(), self.time_step, self.task_state.copy())


@dataclass
class ZipState:
    track_x0: float
    progress: float = 0.0
    engaged: bool = False
    armed: bool = True  # gripper has been lifted clear since the last grasp attempt

    def copy(self):
        return replace(self)


@dataclass
class ScoopState:
    bowl_x: float
    bottom_z: float
    particles: np.ndarray  # [20, 2] (x, z)
    in_spoon: np.ndarray  # [20] bool
    dip_min_z: float = 1.0
    captured: bool = False

    def copy(self):
        return replace(self, particles=self.particles.copy(), in_spoon=self.in_spoon.copy())


@dataclass
class FlipState:
    obj_x: float
    table_z: float
    orientation: float = 0.0
    tool_under: bool = False

    def copy(self):
        return replace(self)


class ZipTask:
    track_z = 0.06
    length = 0.3
    grasp_radius = 0.02
    grasp_height = 0.005
    release_height = 0.02
    engage_prob = 0.5
    click_amp = 0.6
    friction_gain = 20.0

    def reset(self, rng, theme: Theme) -> tuple[np.ndarray, ZipState]:
        x0 = rng.uniform(0.1, 0.15) + theme.placement_shift
        pose = np.array([x0 + rng.uniform(-0.06, 0.06), 0.5, self.track_z + rng.uniform(0.06, 0.1),
                         0.0, 0.0, 0.0])
        return pose, ZipState(track_x0=x0)

    def slider_x(self, st: ZipState) -> float:
        return st.track_x0 + st.progress * self.length

    def min_z(self, st: ZipState, x: float) -> float:
        on_track = st.track_x0 - 0.03 <= x <= st.track_x0 + self.length + 0.03
        return self.track_z if on_track else 0.0

    def apply(self, state: SimState, action: np.ndarray, rng) -> list[ContactEvent]:
        st: ZipState = state.task_state
        pose = state.ee_pose
        events = []
        if st.engaged:
            new_progress = float(np.clip(st.progress + action[0] / self.length, 0.0, 1.0))
            moved = abs(new_progress - st.progress) * self.length
            st.progress = new_progress
            pose[0] = self.slider_x(st)
            pose[1] += action[1]
            pose[2] = max(pose[2] + action[2], self.min_z(st, pose[0]))
            if moved > 0:
                events.append(ContactEvent(0.0, self.friction_gain * moved, "metal_zip", "friction"))
            if pose[2] > self.track_z + self.release_height:
                st.engaged = False
                st.armed = True
            return events
        pose[:3] += action[:3]
        pose[:3] = np.clip(pose[:3], POSE_LOW[:3], POSE_HIGH[:3])
        pose[2] = max(pose[2], self.min_z(st, pose[0]))
        in_zone = (abs(pose[0] - self.slider_x(st)) < self.grasp_radius
                   and pose[2] <= self.track_z + self.grasp_height)
        if in_zone and st.armed:
            st.armed = False
            if rng.random() < self.engage_prob:
                st.engaged = True
                pose[0] = self.slider_x(st)
                events.append(ContactEvent(0.005, self.click_amp, "metal_zip", "impact"))
        elif pose[2] > self.track_z + self.release_height:
            st.armed = True
        return events

    def reward(self, st: ZipState) -> float:
        return 10.0 * st.progress

    def success(self, st: ZipState) -> bool:
        return st.engaged and st.progress >= 1.0

    def render(self, canvas: Canvas, state: SimState, theme: Theme):
        st: ZipState = state.task_state
        draw_common(canvas, theme, 0.03)
        canvas.box(st.track_x0, self.track_z - 0.008, st.track_x0 + self.length, self.track_z - 0.002,
                   (170, 170, 180))
        canvas.box(st.track_x0 + self.length - 0.004, self.track_z - 0.02,
                   st.track_x0 + self.length + 0.004, self.track_z + 0.01, (200, 30, 30))
        sx = self.slider_x(st)
        canvas.box(sx - 0.01, self.track_z - 0.012, sx + 0.01, self.track_z, (230, 190, 40))
        draw_gripper(canvas, state.ee_pose[0], state.ee_pose[2])


class ScoopTask:
    n_particles = 20
    surface_z = 0.09
    half_width = 0.08
    hover_z = 0.16
    capture_pitch = 0.4
    hold_pitch = 0.3
    knock_gain = 30.0
    slide_gain = 15.0

    def reset(self, rng, theme: Theme):
        bx = rng.uniform(0.28, 0.34) + theme.placement_shift
        depth = rng.uniform(0.03, 0.06)
        px = bx + rng.uniform(-0.06, 0.06, self.n_particles)
        pz = np.full(self.n_particles, self.surface_z)
        st = ScoopState(bowl_x=bx, bottom_z=self.surface_z - depth,
                        particles=np.stack([px, pz], axis=1),
                        in_spoon=np.zeros(self.n_particles, dtype=bool))
        pose = np.array([bx + rng.uniform(-0.05, 0.05), 0.5, self.hover_z + rng.uniform(0.0, 0.04),
                         0.0, 0.0, 0.0])
        return pose, st

    def inside_bowl(self, st: ScoopState, x: float) -> bool:
        return abs(x - st.bowl_x) < self.half_width

    def apply(self, state: SimState, action, rng):
        st: ScoopState = state.task_state
        pose = state.ee_pose
        events = []
        old = pose.copy()
        pose += action
        pose[:] = np.clip(pose, POSE_LOW, POSE_HIGH)
        pose[4] = np.clip(pose[4], -0.2, 1.2)
        floor = st.bottom_z if self.inside_bowl(st, pose[0]) else 0.0
        if pose[2] <= floor:
            if old[2] > floor:
                speed = max(old[2] - floor, 0.01)
                events.append(ContactEvent(0.005, min(self.knock_gain * speed, 1.0),
                                           "ceramic_edge", "impact"))
            pose[2] = floor
        in_material = self.inside_bowl(st, pose[0]) and pose[2] < self.surface_z
        if in_material:
            st.dip_min_z = min(st.dip_min_z, pose[2])
            moved = float(np.hypot(pose[0] - old[0], pose[2] - old[2]))
            if moved > 0:
                events.append(ContactEvent(0.0, self.slide_gain * moved, "tool_slide", "friction"))
            if not st.captured and old[4] < self.capture_pitch <= pose[4]:
                depth_frac = np.clip((self.surface_z - st.dip_min_z) / (self.surface_z - st.bottom_z), 0, 1)
                k = int(round(self.n_particles * depth_frac))
                st.in_spoon[:k] = True
                st.captured = True
        else:
            st.dip_min_z = 1.0
            if st.captured and pose[4] < self.hold_pitch:
                st.in_spoon[:] = False
                st.captured = False
        self._place_particles(st, pose)
        return events

    def _place_particles(self, st: ScoopState, pose):
        idx = np.flatnonzero(st.in_spoon)
        st.particles[idx, 0] = pose[0] + 0.004 * (idx % 5 - 2)
        st.particles[idx, 1] = pose[2] + 0.006 + 0.004 * (idx // 5)
        rest = np.flatnonzero(~st.in_spoon)
        st.particles[rest, 1] = self.surface_z

    def reward(self, st: ScoopState) -> float:
        return float(st.in_spoon.sum())

    def success(self, st: ScoopState) -> bool:
        return st.in_spoon.sum() >= 5

    def finished(self, state: SimState) -> bool:
        st: ScoopState = state.task_state
        return st.captured and state.ee_pose[2] >= self.hover_z

    def render(self, canvas: Canvas, state: SimState, theme: Theme):
        st: ScoopState = state.task_state
        draw_common(canvas, theme, 0.02)
        bx = st.bowl_x
        wall = (235, 235, 225)
        canvas.box(bx - self.half_width - 0.008, 0.02, bx - self.half_width, 0.12, wall)
        canvas.box(bx + self.half_width, 0.02, bx + self.half_width + 0.008, 0.12, wall)
        canvas.box(bx - self.half_width, 0.02, bx + self.half_width, self.surface_z, (150, 110, 60))
        for px, pz in st.particles:
            canvas.box(px - 0.003, pz, px + 0.003, pz + 0.006, (250, 240, 120))
        x, z, pitch = state.ee_pose[0], state.ee_pose[2], state.ee_pose[4]
        canvas.segment(x, z, pitch, 0.035, (120, 120, 130))
        canvas.box(x - 0.004, z, x + 0.004, z + 0.06, GRIPPER_COLOR)


class FlipTask:
    obj_width = 0.08
    obj_height = 0.03
    nominal_table = 0.03
    under_tolerance = 0.004
    hover_z = 0.08
    success_angle = 2.618  # 150 degrees
    turn_gain = 3.0
    slide_gain = 15.0
    knock_gain = 25.0

    def reset(self, rng, theme: Theme):
        ox = rng.uniform(0.33, 0.38) + theme.placement_shift
        table_z = self.nominal_table + rng.uniform(-0.012, 0.012)
        pose = np.array([ox - self.obj_width / 2 - rng.uniform(0.08, 0.12), 0.5,
                         self.hover_z + rng.uniform(0.0, 0.03), 0.0, 0.0, 0.0])
        return pose, FlipState(obj_x=ox, table_z=table_z)

    def apply(self, state: SimState, action, rng):
        st: FlipState = state.task_state
        pose = state.ee_pose
        events = []
        old = pose.copy()
        pose += action
        pose[:] = np.clip(pose, POSE_LOW, POSE_HIGH)
        if pose[2] <= st.table_z:
            pose[2] = st.table_z
            moved = abs(pose[0] - old[0])
            if moved > 0:
                events.append(ContactEvent(0.0, self.slide_gain * moved, "tool_slide", "friction"))
        left = st.obj_x - self.obj_width / 2
        if not st.tool_under and old[0] < left <= pose[0]:
            if pose[2] <= st.table_z + self.under_tolerance:
                st.tool_under = True
            else:
                # Blade hits the side of the object and shoves it.
                events.append(ContactEvent(0.005, min(self.knock_gain * (pose[0] - old[0]), 1.0),
                                           "ceramic_edge", "impact"))
                st.obj_x += pose[0] - left
        if st.tool_under:
            dpitch = pose[4] - old[4]
            if dpitch > 0 and pose[0] >= left:
                st.orientation = float(min(st.orientation + self.turn_gain * dpitch, math.pi))
            if pose[0] < left - 0.01:
                st.tool_under = False
        return events

    def reward(self, st: FlipState) -> float:
        return 1.0 if self.success(st) else 0.0

    def success(self, st: FlipState) -> bool:
        return st.orientation > self.success_angle

    def render(self, canvas: Canvas, state: SimState, theme: Theme):
        st: FlipState = state.task_state
        draw_common(canvas, theme, self.nominal_table)
        frac = st.orientation / math.pi
        top = np.array([200, 120, 40]) * (1 - frac) + np.array([240, 220, 170]) * frac
        bottom = np.array([240, 220, 170]) * (1 - frac) + np.array([200, 120, 40]) * frac
        lift = 0.03 * math.sin(st.orientation)
        x0, x1 = st.obj_x - self.obj_width / 2, st.obj_x + self.obj_width / 2
        base = self.nominal_table + lift
        canvas.box(x0, base, x1, base + self.obj_height / 2, bottom.astype(np.uint8))
        canvas.box(x0, base + self.obj_height / 2, x1, base + self.obj_height, top.astype(np.uint8))
        x, z, pitch = state.ee_pose[0], state.ee_pose[2], state.ee_pose[4]
        canvas.segment(x - 0.05, z, pitch, 0.05, (150, 150, 160), thickness=0.003)
        canvas.box(x - 0.06, z + 0.004, x - 0.05, z + 0.06, GRIPPER_COLOR)


TASK_CLASSES = {"zip": ZipTask, "scoop": ScoopTask, "flip": FlipTask}


# -- environment ---------------------------------------------------------------

@dataclass
class Observation:
    image: np.ndarray  # [H, W, 3] uint8
    audio_chunk: MultiChannelWaveform


def clamp_action(action) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("action contains non-finite values")
    return np.clip(a, -MAX_DELTA, MAX_DELTA)


def _seed_key(*parts) -> list[int]:
    return [int(p) & 0xFFFFFFFF for p in parts]


class ContactEnv:
    """One task instance. Single-threaded; create one per worker."""

    def __init__(self, cfg: TaskConfig):
        self.cfg = cfg
        self.task = TASK_CLASSES[cfg.task]()
        self.state: SimState | None = None
        self.done = True
        self.seed = 0
        self._rng = None

    def reset(self, seed: int = 0) -> Observation:
        self.seed = int(seed)
        self._rng = np.random.default_rng(_seed_key(
            seed, TASKS.index(self.cfg.task), CONFIG_IDS.index(self.cfg.config_id)))
        pose, task_state = self.task.reset(self._rng, self.cfg.theme)
        self.state = SimState(pose, 0, task_state)
        self.done = False
        silent = MultiChannelWaveform(np.zeros((N_MICS, CHUNK_SAMPLES)), AUDIO_RATE)
        return Observation(self.render(), silent)

    def render(self) -> np.ndarray:
        h, w = self.cfg.image_size
        canvas = Canvas(h, w, self.cfg.theme.background)
        self.task.render(canvas, self.state, self.cfg.theme)
        return canvas.img

    def step(self, action) -> tuple[Observation, float, bool, dict]:
        if self.state is None:
            raise ProtocolError("step() called before reset()")
        if self.done:
            raise ProtocolError("step() called on a finished episode; call reset()")
        a = clamp_action(action)
        events = self.task.apply(self.state, a, self._rng)
        self.state.time_step += 1
        audio = synthesize_contact_audio(events, CHUNK_SAMPLES / AUDIO_RATE,
                                         seed=hash_seed(self.seed, self.state.time_step))
        st = self.state.task_state
        success = self.task.success(st)
        finished = success
        if isinstance(self.task, ScoopTask):
            finished = self.task.finished(self.state)
        self.done = finished or self.state.time_step >= self.cfg.max_steps
        reward = self.task.reward(st)
        info = {"events": events, "success": success, "time_step": self.state.time_step,
                "applied_action": a}
        return Observation(self.render(), audio), reward, self.done, info


def hash_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(_seed_key(*parts)).generate_state(1)[0])


# -- scripted experts ----------------------------------------------------------

class ScriptedExpert:
    """Finite-state controller reading the privileged simulator state."""

    def __init__(self, task: str, noise_sigma: float = 0.002, seed: int = 0):
        if task not in TASKS:
            raise InvalidInputError(f"unknown task {task!r}")
        self.task = task
        self.noise_sigma = noise_sigma
        self.rng = np.random.default_rng(_seed_key(seed, 99))
        self.phase = "approach"
        self.counter = 0

    def reset(self, seed: int | None = None):
        if seed is not None:
            self.rng = np.random.default_rng(_seed_key(seed, 99))
        self.phase = "approach"
        self.counter = 0

    def __call__(self, state: SimState) -> np.ndarray:
        action = getattr(self, f"_{self.task}")(state)
        if self.noise_sigma > 0:
            action[:3] += self.rng.normal(0.0, self.noise_sigma, 3)
        return np.clip(action, -MAX_DELTA, MAX_DELTA)

    @staticmethod
    def _toward(delta: float) -> float:
        return float(np.clip(delta, -MAX_DELTA, MAX_DELTA))

    def _zip(self, state: SimState) -> np.ndarray:
        task, st, pose = ZipTask, state.task_state, state.ee_pose
        a = np.zeros(6)
        sx = st.track_x0 + st.progress * task.length
        if self.phase == "approach":
            a[0] = self._toward(sx - pose[0])
            a[2] = self._toward(task.track_z + 0.05 - pose[2])
            if abs(sx - pose[0]) < 0.004:
                self.phase = "descend"
        elif self.phase == "descend":
            a[0] = self._toward(sx - pose[0])
            a[2] = -MAX_DELTA
            if pose[2] <= task.track_z + task.grasp_height:
                self.phase, self.counter = "wait", 0
        elif self.phase == "wait":
            a[2] = self._toward(task.track_z - pose[2])
            self.counter += 1
            if self.counter >= 3:
                self.phase, self.counter = ("pull", 0) if st.engaged else ("lift", 0)
        if self.phase == "pull":
            if st.engaged:
                a[0] = MAX_DELTA
                a[2] = self._toward(task.track_z - pose[2])
            else:
                self.phase, self.counter = "lift", 0
        if self.phase == "lift":
            a[2] = MAX_DELTA
            self.counter += 1
            if self.counter >= 3:
                self.phase = "approach"
        return a

    def _scoop(self, state: SimState) -> np.ndarray:
        task, st, pose = ScoopTask, state.task_state, state.ee_pose
        a = np.zeros(6)
        if self.phase == "approach":
            a[0] = self._toward(st.bowl_x - pose[0])
            a[2] = self._toward(task.hover_z - pose[2])
            if abs(st.bowl_x - pose[0]) < 0.004:
                self.phase = "dig"
        if self.phase == "dig":
            a[2] = -MAX_DELTA
            if pose[2] <= st.bottom_z + 1e-9:
                self.phase = "tilt"
                a[2] = 0.0
        elif self.phase == "tilt":
            a[4] = MAX_DELTA
            if pose[4] >= 0.5:
                self.phase = "lift"
        if self.phase == "lift":
            a[2] = MAX_DELTA
        return a

    def _flip(self, state: SimState) -> np.ndarray:
        task, st, pose = FlipTask, state.task_state, state.ee_pose
        a = np.zeros(6)
        start_x = st.obj_x - task.obj_width / 2 - 0.05
        if self.phase == "approach":
            a[0] = self._toward(start_x - pose[0])
            a[2] = self._toward(task.hover_z - pose[2])
            if abs(start_x - pose[0]) < 0.004:
                self.phase = "lower"
        elif self.phase == "lower":
            a[2] = -MAX_DELTA
            if pose[2] <= st.table_z + 1e-9:
                self.phase = "slide"
                a[2] = 0.0
        elif self.phase == "slide":
            a[0] = MAX_DELTA
            a[2] = -0.002  # keep the blade pressed to the table
            if st.tool_under and pose[0] >= st.obj_x:
                self.phase = "turn"
            elif not st.tool_under and pose[0] >= st.obj_x - task.obj_width / 2:
                self.phase = "approach"
        if self.phase == "turn":
            a[4] = MAX_DELTA
        return a


def scripted_expert(task: str, noise_sigma: float = 0.002, seed: int = 0) -> ScriptedExpert:
    return ScriptedExpert(task, noise_sigma, seed)


def run_expert_episode(cfg: TaskConfig, seed: int, noise_sigma: float = 0.002):
    """Roll out the expert once; returns (frames, audio chunks, actions, reward, success)."""
    env = ContactEnv(cfg)
    expert = ScriptedExpert(cfg.task, noise_sigma, seed)
    obs = env.reset(seed)
    frames, chunks, actions = [], [], []
    done, reward, info = False, 0.0, {"success": False}
    while not done:
        a = expert(env.state)
        frames.append(obs.image)
        chunks.append(obs.audio_chunk.samples)
        obs, reward, done, info = env.step(a)
        actions.append(info["applied_action"])
    return frames, chunks, actions, reward, info["success"]


def collect_demonstrations(task: str, n: int, seed: int = 0, config_id: str = "train",
                           image_size=(128, 128), noise_sigma: float = 0.002,
                           progress: Callable[[int, int], None] | None = None):
    """``n`` successful expert episodes; failed rollouts are discarded."""
    from .datastore import Episode

    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    cfg = TaskConfig(task, config_id, tuple(image_size))
    episodes, failures, attempt = [], 0, 0
    while len(episodes) < n:
        if failures > 2 * n or attempt >= 4 * n:
            raise MisconfiguredEnvironmentError(
                f"expert failed {failures} of {attempt} attempts on {task}/{config_id}")
        ep_seed = hash_seed(seed, attempt)
        frames, chunks, actions, reward, success = run_expert_episode(cfg, ep_seed, noise_sigma)
        attempt += 1
        if not success:
            failures += 1
            continue
        episodes.append(Episode(
            frames=np.stack(frames),
            audio=MultiChannelWaveform(np.concatenate(chunks, axis=1), AUDIO_RATE),
            actions=np.stack(actions),
            meta={"task": task, "config_id": config_id, "seed": int(ep_seed),
                  "success": bool(success), "reward": float(reward)},
        ))
        if progress is not None:
            progress(len(episodes), n)
    return episodes
