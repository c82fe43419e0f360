"""
Density Service
Ground-truth density generation and rendering with configured kernel defaults
"""

import logging
from pathlib import Path
from typing import List, Optional

import numpy as np

from crowdkit_config import crowdkit_config
from services.errors import UsageError
from services.tools.density_tools import (
    adaptive_kernel_density, fixed_kernel_density, read_density, render_pgm, write_density,
)

logger = logging.getLogger(__name__)

METHODS = ('fixed', 'adaptive')


class DensityService:
    def __init__(self, method: str = 'fixed', sigma: Optional[float] = None,
                 beta: Optional[float] = None, k: Optional[int] = None):
        if method not in METHODS:
            raise UsageError(f"density method must be one of {', '.join(METHODS)}, got {method!r}")
        self.method = method
        self.sigma = crowdkit_config.sigma if sigma is None else sigma
        self.beta = crowdkit_config.adaptive_beta if beta is None else beta
        self.k = crowdkit_config.adaptive_k if k is None else k
        if self.sigma <= 0 or self.beta <= 0 or self.k < 1:
            raise UsageError("sigma and beta must be positive and k at least 1")

    def generate(self, points, shape) -> np.ndarray:
        if self.method == 'fixed':
            return fixed_kernel_density(points, shape, self.sigma)
        return adaptive_kernel_density(points, shape, self.beta, self.k, fallback_sigma=self.sigma)

    def generate_for_dataset(self, dataset, out_dir) -> List[Path]:
        """One CKDM map per sample, named after the image stem"""
        out_dir = Path(out_dir)
        written = []
        for sample in dataset.load_samples():
            grid = self.generate(sample.points, dataset.image_size(sample.name))
            written.append(write_density(out_dir / f"{sample.name}.ckdm", grid))
        logger.info("✅ DENSITY: wrote %d %s density maps to %s", len(written), self.method, out_dir)
        return written

    @staticmethod
    def render(in_path, out_path) -> Path:
        grid = read_density(in_path)
        path = render_pgm(grid, out_path)
        logger.info("🖼️ DENSITY: rendered %s (mass %.4f) to %s", in_path, grid.sum(), path)
        return path
