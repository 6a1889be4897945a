"""Orthographic side-view rasterizer for the ball-catching scene.

The camera frames x in [-3, 9] m and y in [0, 8] m. Backdrops are procedural
textures evaluated in world coordinates and box-filtered over a supersampled
grid, so fine detail such as brick mortar survives at 16x16 as shading.
Images are channel-first (3 x H x W) with values in [0, 1].
"""

from __future__ import annotations

import functools
import re

import numpy as np

X_RANGE = (-3.0, 9.0)
Y_RANGE = (0.0, 8.0)
BALL_RADIUS = 0.25
ROBOT_WIDTH = 0.5
ROBOT_HEIGHT = 0.3
BALL_RGB = np.array([1.0, 0.92, 0.15])
ROBOT_RGB = np.array([0.1, 0.35, 1.0])
SUPERSAMPLE = 4

TEST_TEXTURES = tuple(f"test-{k}" for k in range(1, 8))


class TextureError(ValueError):
    pass


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic per-lattice-cell uniform values in [0, 1)."""
    h = (ix.astype(np.int64) * 73856093) ^ (iy.astype(np.int64) * 19349663) ^ (seed * 83492791)
    h = (h ^ (h >> 13)) * 1274126177
    h = h ^ (h >> 16)
    return (h & 0xFFFFFF) / float(0x1000000)


def _value_noise(x: np.ndarray, y: np.ndarray, scale: float, seed: int) -> np.ndarray:
    gx, gy = x / scale, y / scale
    ix, iy = np.floor(gx), np.floor(gy)
    fx, fy = gx - ix, gy - iy
    fx, fy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
    c00, c10 = _hash01(ix, iy, seed), _hash01(ix + 1, iy, seed)
    c01, c11 = _hash01(ix, iy + 1, seed), _hash01(ix + 1, iy + 1, seed)
    return (c00 * (1 - fx) + c10 * fx) * (1 - fy) + (c01 * (1 - fx) + c11 * fx) * fy


def _mix(a, b, w):
    return a * (1 - w[..., None]) + np.asarray(b) * w[..., None]


def _bricks(x, y, brick_rgb, mortar_rgb, seed, w=1.5, h=0.75, mortar=0.12, jitter=0.08):
    row = np.floor(y / h)
    xs = x + 0.5 * w * (row % 2)
    col = np.floor(xs / w)
    in_mortar = ((xs - col * w) < mortar) | ((y - row * h) < mortar)
    shade = 1.0 + jitter * (2 * _hash01(col, row, seed) - 1)
    brick = np.clip(np.asarray(brick_rgb) * shade[..., None], 0, 1)
    return np.where(in_mortar[..., None], np.asarray(mortar_rgb), brick)


def _stripes(x, period, a, b):
    return np.where(((x / period) % 1.0 < 0.5)[..., None], np.asarray(a), np.asarray(b)) * np.ones(x.shape + (1,))


def _texture_rgb(texture: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if texture == "training":
        return _bricks(x, y, (0.66, 0.16, 0.11), (0.74, 0.71, 0.66), seed=1)
    if texture == "test-1":
        return _stripes(x, 1.2, (0.12, 0.25, 0.75), (0.92, 0.92, 0.95))
    if texture == "test-2":
        check = ((np.floor(x) + np.floor(y)) % 2).astype(bool)
        return np.where(check[..., None], np.array([0.15, 0.6, 0.2]), np.array([0.05, 0.12, 0.05]))
    if texture == "test-3":
        n = _value_noise(x, y, 1.3, seed=3)
        return _mix(np.broadcast_to(np.array([0.45, 0.15, 0.55]), x.shape + (3,)), (0.1, 0.7, 0.65), n)
    if texture == "test-4":
        return _bricks(x, y, (0.15, 0.25, 0.7), (0.8, 0.8, 0.82), seed=4)
    if texture == "test-5":
        return _stripes(x + y, 1.0, (0.95, 0.8, 0.15), (0.85, 0.45, 0.05))
    if texture == "test-6":
        n = _value_noise(x, y, 0.35, seed=6)
        return np.repeat(n[..., None], 3, axis=-1) * 0.9 + 0.05
    if texture == "test-7":
        # same hue family as the training bricks, different pattern
        check = ((np.floor((x + y) / 0.9) + np.floor((x - y) / 0.9)) % 2).astype(bool)
        return np.where(check[..., None], np.array([0.8, 0.2, 0.15]), np.array([0.45, 0.05, 0.05]))
    m = re.fullmatch(r"procedural-(\d+)", texture)
    if m:
        seed = int(m.group(1))
        rng = np.random.default_rng(seed)
        hue = rng.uniform(0.1, 0.9, size=3)
        mortar = rng.uniform(0.3, 1.0, size=3)
        return _bricks(x, y, hue, mortar, seed=seed + 11, w=rng.uniform(0.8, 2.0), h=rng.uniform(0.4, 1.0))
    raise TextureError(f"unknown backdrop texture {texture!r}")


def validate_texture(texture: str) -> str:
    if texture == "training" or texture in TEST_TEXTURES or re.fullmatch(r"procedural-\d+", texture):
        return texture
    raise TextureError(f"unknown backdrop texture {texture!r}; use training, test-1..test-7 or procedural-<seed>")


def _sample_points(size: int, ss: int):
    """World x (columns) and y (rows, top first) of the supersampled grid."""
    n = size * ss
    xs = X_RANGE[0] + (np.arange(n) + 0.5) * (X_RANGE[1] - X_RANGE[0]) / n
    ys = Y_RANGE[1] - (np.arange(n) + 0.5) * (Y_RANGE[1] - Y_RANGE[0]) / n
    return xs, ys


def _box_filter(a: np.ndarray, size: int, ss: int) -> np.ndarray:
    lead = a.shape[:-2]
    return a.reshape(*lead, size, ss, size, ss).mean(axis=(-3, -1))


@functools.lru_cache(maxsize=64)
def _backdrop_cached(texture: str, size: int) -> np.ndarray:
    xs, ys = _sample_points(size, SUPERSAMPLE)
    X, Y = np.meshgrid(xs, ys)
    rgb = _texture_rgb(validate_texture(texture), X, Y)  # H*ss x W*ss x 3
    img = _box_filter(np.moveaxis(rgb, -1, 0), size, SUPERSAMPLE)
    img.setflags(write=False)
    return img


def render_backdrop(texture: str, size: int) -> np.ndarray:
    return _backdrop_cached(texture, size)


def _interval_overlap(lo, hi, edges_lo, edges_hi):
    return np.clip(np.minimum(hi[..., None], edges_hi) - np.maximum(lo[..., None], edges_lo), 0.0, None)


def ball_coverage(bx: np.ndarray, by: np.ndarray, size: int) -> np.ndarray:
    """Fraction of each pixel covered by the ball disc, shape N x H x W."""
    xs, ys = _sample_points(size, SUPERSAMPLE)
    dx2 = (xs[None, :] - bx[:, None]) ** 2
    dy2 = (ys[None, :] - by[:, None]) ** 2
    inside = (dy2[:, :, None] + dx2[:, None, :]) <= BALL_RADIUS**2
    return _box_filter(inside.astype(np.float64), size, SUPERSAMPLE)


def robot_coverage(d: np.ndarray, size: int) -> np.ndarray:
    """Exact area fraction of each pixel covered by the robot rectangle, N x H x W."""
    pw = (X_RANGE[1] - X_RANGE[0]) / size
    ph = (Y_RANGE[1] - Y_RANGE[0]) / size
    col_lo = X_RANGE[0] + np.arange(size) * pw
    row_hi = Y_RANGE[1] - np.arange(size) * ph
    fx = _interval_overlap(d - ROBOT_WIDTH / 2, d + ROBOT_WIDTH / 2, col_lo, col_lo + pw) / pw
    fy = _interval_overlap(np.zeros_like(d), np.full_like(d, ROBOT_HEIGHT), row_hi - ph, row_hi) / ph
    return fy[:, :, None] * fx[:, None, :]


def render_scene(states: np.ndarray, texture: str, size: int, noise: np.ndarray | None = None, sigma: float = 0.0) -> np.ndarray:
    """Render ``N x 5`` ball-catch states to ``N x 3 x size x size`` images.

    ``noise`` holds standard-normal draws of the output shape; it is scaled by
    ``sigma``, added per channel, and the result clipped to [0, 1].
    """
    if size not in (16, 32, 64):
        raise ValueError(f"image size must be 16, 32 or 64, got {size}")
    states = np.atleast_2d(states)
    img = np.broadcast_to(render_backdrop(texture, size), (states.shape[0], 3, size, size))
    cb = ball_coverage(states[:, 1], states[:, 2], size)[:, None]
    img = img * (1 - cb) + BALL_RGB[None, :, None, None] * cb
    cr = robot_coverage(states[:, 0], size)[:, None]
    img = img * (1 - cr) + ROBOT_RGB[None, :, None, None] * cr
    if sigma > 0.0:
        if noise is None:
            raise ValueError("pixel noise requested without noise draws")
        img = np.clip(img + sigma * noise, 0.0, 1.0)
    return img


def to_ppm(image: np.ndarray) -> bytes:
    """Binary P6 encoding of a 3 x H x W image in [0, 1]."""
    hwc = np.moveaxis(np.asarray(image), 0, -1)
    h, w, _ = hwc.shape
    pixels = np.round(np.clip(hwc, 0.0, 1.0) * 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_ppm(buf: bytes) -> np.ndarray:
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(buf) and not buf[end : end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = int(fields[1]), int(fields[2])
    # exactly one whitespace byte separates the header from the pixels
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos + 1).reshape(h, w, 3)
    return np.moveaxis(data / 255.0, -1, 0)
