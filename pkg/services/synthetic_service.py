"""
Synthetic Service
Generates small datasets on disk whose crowd statistics follow a requested regime

Regimes:
    scale-var  objects spread over the whole image with box sizes spanning 2 to 60 px
    isolated   a tight crowd in one corner plus a few objects far away, near-constant box sizes
    mixed      the isolated layout with scale-var box sizes
"""

import logging
from pathlib import Path
from typing import List, Tuple

import numpy as np

from crowdkit_config import crowdkit_config
from services.dataset_service import SplitAssignment, write_manifest
from services.errors import UsageError
from services.tools.annotation_tools import PEOPLE_CATEGORIES, VEHICLE_CATEGORIES
from services.tools.image_tools import write_image
from services.tools.io_tools import atomic_write_csv, format_real

logger = logging.getLogger(__name__)

REGIMES = ('scale-var', 'isolated', 'mixed')

SMALL_SIZE, LARGE_SIZE = 2.0, 60.0
CROWD_SIZE = 12.0
CROWD_SPACING = 4.0
MAX_ISOLATED = 3


class SyntheticService:
    def __init__(self, height: int = 64, width: int = 64, mode: str = 'vehicle'):
        if height < 32 or width < 32:
            raise UsageError(f"synthetic images must be at least 32x32, got {height}x{width}")
        if mode not in ('people', 'vehicle'):
            raise UsageError(f"mode must be people or vehicle, got {mode!r}")
        self.height = height
        self.width = width
        self.mode = mode
        self.category = PEOPLE_CATEGORIES[0] if mode == 'people' else VEHICLE_CATEGORIES[0]

    # Layouts

    def _spread_layout(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Square jittered grid filled row by row over the whole image"""
        side = max(1, int(np.ceil(np.sqrt(n))))
        lines = max(1, int(np.ceil(n / side)))
        step = min(self.height / lines, self.width / side)
        top = (self.height - lines * step) / 2.0
        left = (self.width - side * step) / 2.0
        cells = np.arange(n)
        jitter = rng.uniform(-0.2, 0.2, (n, 2)) * step
        cols = left + (cells % side + 0.5) * step + jitter[:, 0]
        rows = top + (cells // side + 0.5) * step + jitter[:, 1]
        return np.column_stack([np.clip(cols, 0, self.width - 1), np.clip(rows, 0, self.height - 1)])

    def _isolated_layout(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Crowd grid in the top-left corner and up to three objects in a row along the bottom edge"""
        isolated = min(MAX_ISOLATED, max(1, n // 5)) if n > 3 else 0
        crowd = n - isolated

        side = max(1, int(np.ceil(np.sqrt(crowd))))
        index = np.arange(crowd)
        jitter = rng.uniform(-0.1, 0.1, (crowd, 2)) * CROWD_SPACING
        cols = 4.0 + (index % side) * CROWD_SPACING + jitter[:, 0]
        rows = 4.0 + (index // side) * CROWD_SPACING + jitter[:, 1]
        points = [np.column_stack([cols, rows])]

        gap = max(12, int(0.3 * min(self.height, self.width)))
        margin = 6.0
        far_cols = self.width - margin - gap * np.arange(isolated)
        far_rows = np.full(isolated, self.height - margin)
        points.append(np.column_stack([far_cols, far_rows]))

        layout = np.vstack(points)
        return np.column_stack([np.clip(layout[:, 0], 0, self.width - 1), np.clip(layout[:, 1], 0, self.height - 1)])

    @staticmethod
    def _spread_sizes(n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.permutation(np.geomspace(SMALL_SIZE, LARGE_SIZE, n)) if n > 1 else np.full(n, CROWD_SIZE)

    @staticmethod
    def _steady_sizes(n: int, rng: np.random.Generator) -> np.ndarray:
        return CROWD_SIZE * rng.uniform(0.95, 1.05, n)

    def layout(self, n: int, regime: str, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """(points as col,row; box sizes) for one image"""
        if regime == 'scale-var':
            return self._spread_layout(n, rng), self._spread_sizes(n, rng)
        if regime == 'isolated':
            return self._isolated_layout(n, rng), self._steady_sizes(n, rng)
        if regime == 'mixed':
            return self._isolated_layout(n, rng), self._spread_sizes(n, rng)
        raise UsageError(f"regime must be one of {', '.join(REGIMES)}, got {regime!r}")

    # Rendering

    def render(self, points: np.ndarray, sizes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Gaussian blobs on a dark noisy background, 3 x H x W in [0, 1]"""
        image = 0.1 + 0.02 * rng.standard_normal((3, self.height, self.width))
        rows = np.arange(self.height, dtype=np.float64)[:, None]
        cols = np.arange(self.width, dtype=np.float64)[None, :]
        for (col, row), size in zip(points, sizes):
            spread = max(1.0, size / 4.0)
            blob = np.exp(-((rows - row) ** 2 + (cols - col) ** 2) / (2.0 * spread * spread))
            colour = rng.uniform(0.5, 1.0, 3)
            image += colour[:, None, None] * blob[None]
        return np.clip(image, 0.0, 1.0)

    def annotation_rows(self, points: np.ndarray, sizes: np.ndarray) -> List[Tuple[str, ...]]:
        """Detection-layout rows whose conversion gives back the points"""
        rows = []
        for (col, row), size in zip(points, sizes):
            left = col - size / 2.0
            top = row if self.mode == 'people' else row - size / 2.0
            rows.append((format_real(left), format_real(top), format_real(size), format_real(size),
                         '1', str(self.category), '0', '0'))
        return rows

    def make_synthetic(self, out_dir, count: int, min_points: int = 5, max_points: int = 30,
                       regime: str = 'scale-var', seed=None) -> List[SplitAssignment]:
        """Write images/, annotations/ and a manifest listing every image under 'train'"""
        if regime not in REGIMES:
            raise UsageError(f"regime must be one of {', '.join(REGIMES)}, got {regime!r}")
        if count < 0 or min_points < 1 or max_points < min_points:
            raise UsageError(f"need count >= 0 and 1 <= min_points <= max_points, got "
                             f"{count}, {min_points}, {max_points}")
        seed = crowdkit_config.seed if seed is None else seed
        out_dir = Path(out_dir)
        rng = np.random.default_rng(seed)

        assignments = []
        for index in range(count):
            stem = f"synth_{index:04d}"
            n = int(rng.integers(min_points, max_points + 1))
            points, sizes = self.layout(n, regime, rng)
            write_image(out_dir / 'images' / f"{stem}.ppm", self.render(points, sizes, rng))
            atomic_write_csv(out_dir / 'annotations' / f"{stem}.txt", None, self.annotation_rows(points, sizes))
            assignments.append(SplitAssignment(f"images/{stem}.ppm", 'train', len(points)))

        write_manifest(out_dir / 'manifest.csv', assignments)
        logger.info("✅ SYNTH: wrote %d %s images (%d-%d points, %s) to %s",
                    count, regime, min_points, max_points, self.mode, out_dir)
        return assignments
