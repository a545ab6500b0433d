"""Synthetic video scenes and the raw frame container.

Scenes are textured-noise backgrounds with solid-color rectangles moving at
integer velocities, bouncing off the frame bounds. Ground-truth boxes are
exact by construction. Moving-camera mode pans a viewport across an enlarged
static background while objects follow their static-mode trajectories, so
image-space boxes are the static-mode boxes shifted by -t * camera_velocity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .masks import BBox, FrameAnnotation

FRAME_MAGIC = b"MVDF"
FRAME_VERSION = 1

_PALETTE = ((230, 40, 40), (40, 200, 60), (60, 80, 235), (235, 200, 40))


@dataclass(frozen=True)
class SceneObject:
    """A solid rectangle: top-left position, size, velocity, color, class."""

    top: int
    left: int
    height: int
    width: int
    vy: int = 0
    vx: int = 0
    color: tuple = (230, 40, 40)
    class_id: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("object must be at least 1x1 pixels")


@dataclass(frozen=True)
class SyntheticScene:
    frame_height: int
    frame_width: int
    objects: tuple
    num_frames: int
    texture_seed: int = 0
    camera_velocity: tuple = (0, 0)  # (vy, vx) pixels/frame

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        for i, obj in enumerate(self.objects):
            if obj.height > self.frame_height or obj.width > self.frame_width:
                raise ValueError(
                    f"object {i} ({obj.height}x{obj.width}) is larger than the "
                    f"{self.frame_height}x{self.frame_width} frame"
                )
            if not (0 <= obj.top <= self.frame_height - obj.height
                    and 0 <= obj.left <= self.frame_width - obj.width):
                raise ValueError(f"object {i} starts outside the frame")


def _bounce(pos: int, vel: int, size: int, bound: int):
    """Advance one axis by one frame, reflecting at [0, bound - size]."""
    hi = bound - size
    pos += vel
    while pos < 0 or pos > hi:
        if pos < 0:
            pos = -pos
            vel = -vel
        if pos > hi:
            pos = 2 * hi - pos
            vel = -vel
    return pos, vel


def object_track(obj: SceneObject, num_frames: int, frame_height: int, frame_width: int):
    """Static-mode (top, left) positions for each frame."""
    top, left, vy, vx = obj.top, obj.left, obj.vy, obj.vx
    track = [(top, left)]
    for _ in range(num_frames - 1):
        top, vy = _bounce(top, vy, obj.height, frame_height)
        left, vx = _bounce(left, vx, obj.width, frame_width)
        track.append((top, left))
    return track


def generate(scene: SyntheticScene, seed: int = 0):
    """Render the scene deterministically.

    Returns (frames, annotations): frames is a (T, H, W, 3) uint8 array,
    annotations one FrameAnnotation per frame with exact boxes and class ids.
    The background texture is drawn from a stream seeded by both the scene's
    texture_seed and the call's seed.
    """
    T, H, W = scene.num_frames, scene.frame_height, scene.frame_width
    cam_vy, cam_vx = scene.camera_velocity
    off_y0 = max(0, -(T - 1) * cam_vy)
    off_x0 = max(0, -(T - 1) * cam_vx)
    canvas_h = H + (T - 1) * abs(cam_vy)
    canvas_w = W + (T - 1) * abs(cam_vx)
    rng = np.random.default_rng([scene.texture_seed, seed])
    world = rng.integers(96, 160, size=(canvas_h, canvas_w, 3), dtype=np.uint8)
    tracks = [object_track(obj, T, H, W) for obj in scene.objects]

    frames = np.empty((T, H, W, 3), dtype=np.uint8)
    annotations = []
    for t in range(T):
        oy = off_y0 + t * cam_vy
        ox = off_x0 + t * cam_vx
        canvas = world.copy()
        boxes, classes = [], []
        for i, (obj, track) in enumerate(zip(scene.objects, tracks)):
            top, left = track[t]
            wy, wx = top + off_y0, left + off_x0
            canvas[wy:wy + obj.height, wx:wx + obj.width] = obj.color
            x1, y1 = left - t * cam_vx, top - t * cam_vy
            if not (0 <= x1 and x1 + obj.width <= W and 0 <= y1 and y1 + obj.height <= H):
                raise ValueError(
                    f"frame {t}: object {i} leaves the frame under camera motion; "
                    "enlarge the placement margins"
                )
            boxes.append(BBox(x1, y1, x1 + obj.width, y1 + obj.height))
            classes.append(obj.class_id)
        frames[t] = canvas[oy:oy + H, ox:ox + W]
        annotations.append(FrameAnnotation(t, tuple(boxes), tuple(classes)))
    return frames, annotations


def make_random_scene(seed: int, frame_size=(128, 128), num_frames: int = 16,
                      num_objects: int = 2, camera_velocity=(0, 0),
                      max_speed: int = 3) -> SyntheticScene:
    """Random non-overlapping objects with margins that survive camera drift."""
    H, W = frame_size
    rng = np.random.default_rng(seed)
    drift_y = (num_frames - 1) * abs(camera_velocity[0])
    drift_x = (num_frames - 1) * abs(camera_velocity[1])
    objects = []
    occupied = []
    attempts = 0
    while len(objects) < num_objects and attempts < 200:
        attempts += 1
        h = int(rng.integers(24, 37))
        w = int(rng.integers(24, 37))
        if H - h - 2 * drift_y <= drift_y or W - w - 2 * drift_x <= drift_x:
            raise ValueError("camera drift leaves no room for objects")
        top = int(rng.integers(drift_y, H - h - drift_y + 1))
        left = int(rng.integers(drift_x, W - w - drift_x + 1))
        box = BBox(left, top, left + w, top + h)
        if any(iou_overlap(box, other) for other in occupied):
            continue
        vy = int(rng.integers(-max_speed, max_speed + 1))
        vx = int(rng.integers(-max_speed, max_speed + 1))
        if vy == 0 and vx == 0:
            vx = max_speed
        color = _PALETTE[len(objects) % len(_PALETTE)]
        objects.append(SceneObject(top, left, h, w, vy, vx, color, len(objects) % len(_PALETTE)))
        occupied.append(box)
    if len(objects) < num_objects:
        raise ValueError("could not place the requested number of objects")
    return SyntheticScene(H, W, tuple(objects), num_frames,
                          texture_seed=seed, camera_velocity=tuple(camera_velocity))


def iou_overlap(a: BBox, b: BBox) -> bool:
    return min(a.x2, b.x2) > max(a.x1, b.x1) and min(a.y2, b.y2) > max(a.y1, b.y1)


# ---------------------------------------------------------------------------
# Frame container: magic "MVDF", u32 version, u32 W, u32 H, u32 frame count,
# then per frame H*W*3 bytes of row-major RGB.
# ---------------------------------------------------------------------------

def save_frames(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype=np.uint8)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError("frames must have shape (T, H, W, 3)")
    t, h, w, _ = frames.shape
    with open(path, "wb") as f:
        f.write(FRAME_MAGIC)
        f.write(struct.pack("<4I", FRAME_VERSION, w, h, t))
        f.write(frames.tobytes(order="C"))


def load_frames(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FRAME_MAGIC:
            raise ValueError(f"{path}: not a frame container")
        version, w, h, t = struct.unpack("<4I", f.read(16))
        if version != FRAME_VERSION:
            raise ValueError(f"{path}: unsupported frame container version {version}")
        data = f.read(t * h * w * 3)
    if len(data) != t * h * w * 3:
        raise ValueError(f"{path}: truncated frame container")
    return np.frombuffer(data, dtype=np.uint8).reshape(t, h, w, 3).copy()
