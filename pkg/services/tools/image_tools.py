"""
Image helpers
Images are float64 arrays shaped C x H x W with values in [0, 1]. Only PPM (colour) and
PGM (grayscale) files are read or written.
"""

import io
import logging
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import zoom

from services.errors import UsageError
from services.tools.io_tools import atomic_write_bytes

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = ('.ppm', '.pgm')

MAX_HEIGHT = 768
MAX_WIDTH = 1024
SIZE_MULTIPLE = 32


def _check_suffix(path: Path):
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise UsageError(f"{path}: only .ppm and .pgm images are supported")


def read_image(path) -> np.ndarray:
    path = Path(path)
    _check_suffix(path)
    with Image.open(path) as img:
        if img.mode not in ('L', 'RGB'):
            img = img.convert('RGB')
        pixels = np.asarray(img, dtype=np.float64) / 255.0
    if pixels.ndim == 2:
        return pixels[None, :, :]
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


def write_image(path, image: np.ndarray) -> Path:
    """Write a 1-channel image as PGM or a 3-channel image as PPM"""
    path = Path(path)
    _check_suffix(path)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise UsageError(f"expected a 1 x H x W or 3 x H x W image, got shape {image.shape}")
    levels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    img = Image.fromarray(levels[0]) if levels.shape[0] == 1 else Image.fromarray(levels.transpose(1, 2, 0))
    buffer = io.BytesIO()
    img.save(buffer, format='PPM')
    return atomic_write_bytes(path, buffer.getvalue())


def match_channels(image: np.ndarray, channels: int) -> np.ndarray:
    """Repeat a grayscale plane or average colour planes to reach the requested channel count"""
    if image.shape[0] == channels:
        return image
    if image.shape[0] == 1:
        return np.repeat(image, channels, axis=0)
    if channels == 1:
        return image.mean(axis=0, keepdims=True)
    raise UsageError(f"cannot turn a {image.shape[0]}-channel image into {channels} channels")


def _fit_to_multiple(image: np.ndarray, points: np.ndarray, multiple: int) -> Tuple[np.ndarray, np.ndarray]:
    """Centre-crop each side down to a multiple, or zero-pad sides smaller than one multiple"""
    _, height, width = image.shape
    target_h = max(multiple, height // multiple * multiple)
    target_w = max(multiple, width // multiple * multiple)

    top = max(0, (height - target_h) // 2)
    left = max(0, (width - target_w) // 2)
    image = image[:, top:top + min(height, target_h), left:left + min(width, target_w)]
    points = points - np.array([left, top], dtype=np.float64)

    pad_h, pad_w = target_h - image.shape[1], target_w - image.shape[2]
    if pad_h or pad_w:
        image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)))

    inside = (points[:, 0] >= 0) & (points[:, 0] < target_w) & (points[:, 1] >= 0) & (points[:, 1] < target_h)
    dropped = int(np.count_nonzero(~inside))
    if dropped:
        logger.debug("✂️ IMAGES: crop to %dx%d dropped %d points", target_h, target_w, dropped)
    return np.ascontiguousarray(image), points[inside]


def resize_with_cap(image: np.ndarray, points, max_h: int = MAX_HEIGHT, max_w: int = MAX_WIDTH,
                    multiple: int = SIZE_MULTIPLE) -> Tuple[np.ndarray, np.ndarray]:
    """
    Shrink (never enlarge) to fit max_h x max_w keeping the aspect ratio, then centre-crop
    to multiples of `multiple`. Points follow the image.
    """
    if max_h < 1 or max_w < 1 or multiple < 1:
        raise UsageError("resize caps and multiple must be positive")
    image = np.asarray(image, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    _, height, width = image.shape

    scale = min(1.0, max_h / height, max_w / width)
    if scale < 1.0:
        new_h = max(1, int(round(height * scale)))
        new_w = max(1, int(round(width * scale)))
        image = zoom(image, (1.0, new_h / height, new_w / width), order=1, mode='nearest', grid_mode=True)
        points = points * scale
        logger.debug("🔧 IMAGES: resized %dx%d to %dx%d", height, width, new_h, new_w)

    return _fit_to_multiple(image, points, multiple)


def flip_horizontal(image: np.ndarray, points) -> Tuple[np.ndarray, np.ndarray]:
    width = image.shape[-1]
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2).copy()
    points[:, 0] = (width - 1) - points[:, 0]
    return np.ascontiguousarray(image[..., ::-1]), points


def random_flip(image: np.ndarray, points, probability: float, rng: np.random.Generator):
    """Mirror with the given probability; returns (image, points, flipped)"""
    if not 0.0 <= probability <= 1.0:
        raise UsageError(f"flip probability must be in [0, 1], got {probability}")
    if rng.random() < probability:
        flipped_image, flipped_points = flip_horizontal(image, points)
        return flipped_image, flipped_points, True
    return image, np.asarray(points, dtype=np.float64).reshape(-1, 2), False
