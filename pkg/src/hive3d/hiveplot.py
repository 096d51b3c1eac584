"""Render a flow trace as a cumulative sequence of hive-plot frames.

Three axes radiate from the image center: time (210 degrees), country (90)
and source IP (330). Each record is drawn as two anti-aliased segments,
time -> country -> IP, each composited at 50% opacity so overlapping traffic
darkens the image. Frame ``t`` shows every record with timestamp strictly
below ``t * duration / n_frames``; frame 0 is therefore always blank.
"""
import hashlib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from hive3d import _kernels
from hive3d.errors import ContractError
from hive3d.flowsim import COUNTRY_CODES, atomic_write_bytes, ip_to_str

N_FRAMES = 8
ALPHA = 0.5
HALF_WIDTH = 2.0


@lru_cache(maxsize=65536)
def stable_unit(key):
    """Deterministic map of a string to [0, 1) via a 64-bit BLAKE2b digest."""
    digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2.0**64


def _direction(deg):
    rad = np.deg2rad(deg)
    return (float(np.cos(rad)), float(-np.sin(rad)))  # image rows grow downward


@dataclass(frozen=True)
class HiveLayout:
    image_size: tuple = (64, 64)
    angles: tuple = (210.0, 90.0, 330.0)
    axis_length: float = 28.0
    inner_radius: float = 3.0
    origin: tuple = None

    def __post_init__(self):
        if len({a % 360 for a in self.angles}) != 3:
            raise ValueError(f"axis angles must be pairwise distinct, got {self.angles}")
        if self.origin is None:
            h, w = self.image_size
            object.__setattr__(self, "origin", ((w - 1) / 2.0, (h - 1) / 2.0))

    @property
    def axis_time(self):
        return _direction(self.angles[0])

    @property
    def axis_country(self):
        return _direction(self.angles[1])

    @property
    def axis_ip(self):
        return _direction(self.angles[2])

    def point(self, axis, pos):
        dx, dy = (self.axis_time, self.axis_country, self.axis_ip)[axis]
        r = self.inner_radius + pos * (self.axis_length - self.inner_radius)
        return self.origin[0] + r * dx, self.origin[1] + r * dy


@dataclass
class FrameSequence:
    frames: np.ndarray  # (D, H, W) float32 in [0, 1], 1 = background
    label: str
    source_trace: str = ""


def place_on_axes(record, layout, capture_duration):
    """Axis positions in [0, 1] for (time, country, source IP)."""
    time_pos = min(max(record.timestamp / capture_duration, 0.0), 1.0)
    country_pos = stable_unit("country:" + COUNTRY_CODES[record.country])
    ip_pos = stable_unit("ip:" + ip_to_str(record.src_ip))
    return time_pos, country_pos, ip_pos


def draw_record(img, record, layout, capture_duration):
    tp, cp, ip = place_on_axes(record, layout, capture_duration)
    x0, y0 = layout.point(0, tp)
    x1, y1 = layout.point(1, cp)
    x2, y2 = layout.point(2, ip)
    _kernels.stroke_segment(img, x0, y0, x1, y1, HALF_WIDTH, ALPHA)
    _kernels.stroke_segment(img, x1, y1, x2, y2, HALF_WIDTH, ALPHA)


def render_sequence(trace, layout=None, label="", capture_duration=8.0, n_frames=N_FRAMES, source=""):
    layout = layout or HiveLayout()
    stamps = [r.timestamp for r in trace]
    if any(b < a for a, b in zip(stamps, stamps[1:])):
        raise ContractError("trace must be sorted by timestamp")
    img = np.ones(layout.image_size, dtype=np.float32)
    frames = np.empty((n_frames,) + tuple(layout.image_size), dtype=np.float32)
    step = capture_duration / n_frames
    i = 0
    for t in range(n_frames):
        cutoff = t * step
        while i < len(trace) and trace[i].timestamp < cutoff:
            draw_record(img, trace[i], layout, capture_duration)
            i += 1
        frames[t] = img
    return FrameSequence(frames, label, source)


def to_tensor(seq):
    """(C=1, D, H, W) float32 array of the sequence, depth ordered t0..t7."""
    return seq.frames[None].astype(np.float32, copy=True)


def to_pgm_bytes(frames):
    """Binary PGM (P5) with the frames tiled left to right."""
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    tiled = np.concatenate(list(frames), axis=1)
    pix = np.clip(np.rint(tiled * 255.0), 0, 255).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode() + pix.tobytes()


def write_pgm(frames, path):
    atomic_write_bytes(Path(path), to_pgm_bytes(frames))
