"""
Ground-truth density maps

Pixel (row i, col j) has its centre at (j, i). Each annotation point contributes a
Gaussian evaluated at pixel centres within radius 4 sigma, clipped to the image and
renormalized to unit mass, so a map always integrates to its point count.

CKDM layout (little-endian): b"CKDM", version u32, H u32, W u32, float64 payload row-major.
"""

import io
import logging
import math
import struct
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from services.errors import UsageError
from services.tools.io_tools import atomic_write_bytes

logger = logging.getLogger(__name__)

KERNEL_RADIUS = 4.0
MIN_SIGMA = 1.0
FALLBACK_SIGMA = 15.0

CKDM_MAGIC = b"CKDM"
CKDM_VERSION = 1
CKDM_HEADER = struct.Struct('<4sIII')


def _check_shape(shape) -> Tuple[int, int]:
    height, width = (int(v) for v in shape)
    if height < 1 or width < 1:
        raise UsageError(f"image shape must be positive, got {height}x{width}")
    return height, width


def clamp_points(points, shape) -> np.ndarray:
    """Clamp (col, row) points into the image, warning when any moved"""
    height, width = _check_shape(shape)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    clamped = np.column_stack([np.clip(points[:, 0], 0, width - 1), np.clip(points[:, 1], 0, height - 1)])
    moved = int(np.count_nonzero(np.any(clamped != points, axis=1)))
    if moved:
        logger.warning("⚠️ DENSITY: %d annotation points outside the %dx%d image were clamped", moved, height, width)
    return clamped


def _stamp(grid: np.ndarray, col: float, row: float, sigma: float):
    height, width = grid.shape
    radius = KERNEL_RADIUS * sigma
    c0, c1 = max(0, math.floor(col - radius)), min(width - 1, math.ceil(col + radius))
    r0, r1 = max(0, math.floor(row - radius)), min(height - 1, math.ceil(row + radius))

    dx = np.arange(c0, c1 + 1, dtype=np.float64) - col
    dy = np.arange(r0, r1 + 1, dtype=np.float64) - row
    dist2 = dy[:, None] ** 2 + dx[None, :] ** 2
    kernel = np.exp(-dist2 / (2.0 * sigma * sigma))
    kernel[dist2 > radius * radius] = 0.0
    grid[r0:r1 + 1, c0:c1 + 1] += kernel / kernel.sum()


def _render(points: np.ndarray, sigmas: np.ndarray, shape) -> np.ndarray:
    grid = np.zeros(shape, dtype=np.float64)
    for (col, row), sigma in zip(points, sigmas):
        _stamp(grid, col, row, float(sigma))
    return grid


def fixed_kernel_density(points, shape, sigma: float = FALLBACK_SIGMA) -> np.ndarray:
    if not sigma > 0:
        raise UsageError(f"sigma must be positive, got {sigma}")
    points = clamp_points(points, shape)
    return _render(points, np.full(len(points), float(sigma)), _check_shape(shape))


def adaptive_sigmas(points, beta: float = 0.3, k: int = 3) -> np.ndarray:
    """sigma_i = beta * mean distance to the k nearest other points, floored at MIN_SIGMA"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) < k + 1:
        raise UsageError(f"adaptive kernels with k={k} need at least {k + 1} points, got {len(points)}")
    distances, _ = cKDTree(points).query(points, k=k + 1)
    # column 0 is the point itself (or a coincident twin, also at distance 0)
    mean_distance = distances[:, 1:].mean(axis=1)
    return np.maximum(beta * mean_distance, MIN_SIGMA)


def adaptive_kernel_density(points, shape, beta: float = 0.3, k: int = 3,
                            fallback_sigma: float = FALLBACK_SIGMA) -> np.ndarray:
    if not beta > 0:
        raise UsageError(f"beta must be positive, got {beta}")
    if k < 1:
        raise UsageError(f"k must be at least 1, got {k}")
    points = clamp_points(points, shape)
    if len(points) < k + 1:
        if len(points):
            logger.warning("⚠️ DENSITY: %d points is too few for k=%d neighbours, using fixed sigma %g",
                           len(points), k, fallback_sigma)
        return fixed_kernel_density(points, shape, fallback_sigma)
    return _render(points, adaptive_sigmas(points, beta, k), _check_shape(shape))


def sum_pool_to(grid, target_h: int, target_w: int) -> np.ndarray:
    """Block sums down to target_h x target_w; mass is preserved"""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise UsageError(f"sum_pool_to expects a 2-D map, got shape {grid.shape}")
    height, width = grid.shape
    if target_h < 1 or target_w < 1 or height % target_h or width % target_w:
        raise UsageError(f"cannot sum-pool a {height}x{width} map to {target_h}x{target_w}")
    return grid.reshape(target_h, height // target_h, target_w, width // target_w).sum(axis=(1, 3))


# CKDM container

def encode_density(grid) -> bytes:
    grid = np.ascontiguousarray(grid, dtype='<f8')
    if grid.ndim != 2:
        raise UsageError(f"density map must be 2-D, got shape {grid.shape}")
    return CKDM_HEADER.pack(CKDM_MAGIC, CKDM_VERSION, *grid.shape) + grid.tobytes(order='C')


def decode_density(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(payload) < CKDM_HEADER.size:
        raise UsageError(f"{source}: too short for a CKDM header")
    magic, version, height, width = CKDM_HEADER.unpack_from(payload)
    if magic != CKDM_MAGIC:
        raise UsageError(f"{source}: not a CKDM density map (bad magic)")
    if version != CKDM_VERSION:
        raise UsageError(f"{source}: unsupported CKDM version {version}")
    expected = CKDM_HEADER.size + 8 * height * width
    if len(payload) != expected:
        raise UsageError(f"{source}: expected {expected} bytes for {height}x{width}, got {len(payload)}")
    return np.frombuffer(payload, dtype='<f8', offset=CKDM_HEADER.size).astype(np.float64).reshape(height, width)


def write_density(path, grid) -> Path:
    return atomic_write_bytes(path, encode_density(grid))


def read_density(path) -> np.ndarray:
    path = Path(path)
    return decode_density(path.read_bytes(), source=str(path))


def render_pgm(grid, path) -> Path:
    """8-bit grayscale rendering scaled so the densest pixel is white"""
    grid = np.asarray(grid, dtype=np.float64)
    peak = grid.max() if grid.size else 0.0
    levels = np.zeros(grid.shape, dtype=np.uint8) if peak <= 0 else \
        np.round(np.clip(grid / peak, 0.0, 1.0) * 255.0).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(levels).save(buffer, format='PPM')
    return atomic_write_bytes(path, buffer.getvalue())
