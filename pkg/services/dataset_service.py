"""
Dataset Service
Reads a counting dataset laid out on disk, converts detection boxes to points, filters and splits samples

Layout:
    images/<stem>.ppm|.pgm
    annotations/<stem>.txt|.csv   detection boxes (optional when points/ exists)
    points/<stem>.csv             "col,row" counting points (optional)
    manifest.csv                  "image_path,split,point_count"
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from crowdkit_config import crowdkit_config
from services.errors import AnnotationParseError, UsageError
from services.tools.annotation_tools import (
    BBoxRecord, CONVERSION_MODES, convert_records, read_annotations, read_points, records_for_mode, write_points,
)
from services.tools.image_tools import IMAGE_SUFFIXES
from services.tools.io_tools import atomic_write_csv, atomic_write_json

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
DEFAULT_RATIOS = (0.8, 0.1, 0.1)
MIN_COUNT = 10
MANIFEST_HEADER = ('image_path', 'split', 'point_count')
ANNOTATION_SUFFIXES = ('.txt', '.csv')


@dataclass
class CountingSample:
    name: str
    image_path: str
    points: np.ndarray
    category_group: str
    records: Optional[List[BBoxRecord]] = None
    split: Optional[str] = None

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class SplitAssignment:
    image_path: str
    split: str
    point_count: int


@dataclass
class DatasetTotals:
    images: int
    average_height: float
    average_width: float
    max_count: int
    min_count: int
    total_count: int
    per_split: Dict[str, int] = field(default_factory=dict)

    def to_dict(self):
        return {
            'images': self.images,
            'average_resolution': [self.average_height, self.average_width],
            'max_count': self.max_count,
            'min_count': self.min_count,
            'total_count': self.total_count,
            'per_split': dict(self.per_split),
        }


def _check_ratios(ratios: Sequence[float]) -> Tuple[float, float, float]:
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise UsageError(f"ratios must be three non-negative numbers (train,val,test), got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-6:
        raise UsageError(f"ratios must sum to 1, got {sum(ratios)}")
    return tuple(float(r) for r in ratios)


def filter_and_split(samples: Sequence[CountingSample], min_count: int = MIN_COUNT,
                     ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0) -> List[SplitAssignment]:
    """
    Drop samples with fewer than `min_count` points, shuffle the rest with `seed` and cut
    floor-sized val and test sets; the remainder goes to train. Assignments come back in
    image-path order.
    """
    train_ratio, val_ratio, test_ratio = _check_ratios(ratios)
    if min_count < 0:
        raise UsageError(f"min_count must be non-negative, got {min_count}")

    kept = sorted((s for s in samples if s.count >= min_count), key=lambda s: s.image_path)
    dropped = len(samples) - len(kept)
    if dropped:
        logger.info("🔍 DATASET: dropped %d of %d samples with fewer than %d points", dropped, len(samples), min_count)
    if not kept:
        raise UsageError(f"no samples left after filtering with min_count={min_count}")

    total = len(kept)
    n_val = int(np.floor(total * val_ratio + 1e-9))
    n_test = int(np.floor(total * test_ratio + 1e-9))
    order = np.random.default_rng(seed).permutation(total)

    split_of = {}
    for rank, index in enumerate(order):
        if rank < n_val:
            split_of[index] = 'val'
        elif rank < n_val + n_test:
            split_of[index] = 'test'
        else:
            split_of[index] = 'train'

    assignments = [SplitAssignment(s.image_path, split_of[i], s.count) for i, s in enumerate(kept)]
    sizes = {name: sum(a.split == name for a in assignments) for name in SPLITS}
    logger.info("✅ DATASET: split %d samples into train=%d val=%d test=%d",
                total, sizes['train'], sizes['val'], sizes['test'])
    return assignments


def write_manifest(path, assignments: Sequence[SplitAssignment]) -> Path:
    rows = [(a.image_path, a.split, a.point_count) for a in assignments]
    return atomic_write_csv(path, MANIFEST_HEADER, rows)


def read_manifest(path) -> List[SplitAssignment]:
    path = Path(path)
    assignments = []
    with path.open('r', encoding='utf-8', newline='') as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            return assignments
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise AnnotationParseError(path, 1, f"expected header {','.join(MANIFEST_HEADER)}")
        for line_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 or row[1] not in SPLITS:
                raise AnnotationParseError(path, line_number, "expected image_path,split,point_count")
            try:
                assignments.append(SplitAssignment(row[0], row[1], int(row[2])))
            except ValueError as e:
                raise AnnotationParseError(path, line_number, str(e))
    return assignments


class DatasetService:
    def __init__(self, root, mode: str = 'people'):
        if mode not in CONVERSION_MODES:
            raise UsageError(f"mode must be one of {', '.join(CONVERSION_MODES)}, got {mode!r}")
        self.root = Path(root)
        self.mode = mode
        self.images_dir = self.root / 'images'
        self.annotations_dir = self.root / 'annotations'
        self.points_dir = self.root / 'points'
        self.manifest_path = self.root / 'manifest.csv'

    def list_stems(self) -> List[str]:
        if not self.images_dir.is_dir():
            raise FileNotFoundError(f"no images directory in {self.root}")
        return sorted(p.stem for p in self.images_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)

    def image_path(self, stem: str) -> Path:
        for suffix in IMAGE_SUFFIXES:
            candidate = self.images_dir / f"{stem}{suffix}"
            if candidate.exists():
                return candidate
        raise FileNotFoundError(f"no .ppm or .pgm image for '{stem}' in {self.images_dir}")

    def relative_image_path(self, stem: str) -> str:
        return self.image_path(stem).relative_to(self.root).as_posix()

    def stem_of(self, image_path: str) -> str:
        return Path(image_path).stem

    def annotation_path(self, stem: str) -> Optional[Path]:
        for suffix in ANNOTATION_SUFFIXES:
            candidate = self.annotations_dir / f"{stem}{suffix}"
            if candidate.exists():
                return candidate
        return None

    def load_records(self, stem: str) -> Optional[List[BBoxRecord]]:
        """Boxes of the configured category group, or None without an annotation file"""
        path = self.annotation_path(stem)
        if path is None:
            return None
        return records_for_mode(read_annotations(path), self.mode)

    def load_points(self, stem: str, records: Optional[List[BBoxRecord]] = None) -> np.ndarray:
        points_path = self.points_dir / f"{stem}.csv"
        if points_path.exists():
            return read_points(points_path)
        if records is None:
            records = self.load_records(stem)
        if records is None:
            raise UsageError(f"'{stem}' has neither a points file nor an annotation file")
        return convert_records(records, self.mode)

    def load_sample(self, stem: str) -> CountingSample:
        records = self.load_records(stem)
        return CountingSample(
            name=stem,
            image_path=self.relative_image_path(stem),
            points=self.load_points(stem, records),
            category_group=self.mode,
            records=records,
        )

    def load_samples(self, split: Optional[str] = None, manifest_path=None) -> List[CountingSample]:
        """All samples in stem order, or those a manifest lists (optionally one split of it)"""
        if split is not None and split not in SPLITS:
            raise UsageError(f"split must be one of {', '.join(SPLITS)}, got {split!r}")

        manifest_path = Path(manifest_path) if manifest_path else self.manifest_path
        if split is None and manifest_path == self.manifest_path and not manifest_path.exists():
            return [self.load_sample(stem) for stem in self.list_stems()]

        if not manifest_path.exists():
            raise FileNotFoundError(f"manifest not found: {manifest_path}")
        samples = []
        for assignment in read_manifest(manifest_path):
            if split is not None and assignment.split != split:
                continue
            sample = self.load_sample(self.stem_of(assignment.image_path))
            sample.split = assignment.split
            samples.append(sample)
        return samples

    def convert_all(self) -> int:
        """Write points/<stem>.csv for every annotated image"""
        written = 0
        for stem in self.list_stems():
            records = self.load_records(stem)
            if records is None:
                continue
            write_points(self.points_dir / f"{stem}.csv", convert_records(records, self.mode))
            written += 1
        logger.info("✅ DATASET: converted %d annotation files (%s)", written, self.mode)
        return written

    def image_size(self, stem: str) -> Tuple[int, int]:
        with Image.open(self.image_path(stem)) as img:
            width, height = img.size
        return height, width

    def dataset_totals(self, samples: Sequence[CountingSample]) -> DatasetTotals:
        """Image count, average resolution and object counts of a sample set"""
        if not samples:
            raise UsageError("dataset_totals needs at least one sample")
        sizes = np.array([self.image_size(s.name) for s in samples], dtype=np.float64)
        counts = [s.count for s in samples]
        per_split = {}
        for sample in samples:
            if sample.split:
                per_split[sample.split] = per_split.get(sample.split, 0) + 1
        totals = DatasetTotals(
            images=len(samples),
            average_height=float(sizes[:, 0].mean()),
            average_width=float(sizes[:, 1].mean()),
            max_count=int(max(counts)),
            min_count=int(min(counts)),
            total_count=int(sum(counts)),
            per_split=per_split,
        )
        logger.info("📊 DATASET: %d images, average %.1fx%.1f, counts min=%d max=%d total=%d (%s)",
                    totals.images, totals.average_height, totals.average_width,
                    totals.min_count, totals.max_count, totals.total_count, self.mode)
        return totals

    def split(self, out_dir=None, min_count: int = MIN_COUNT, ratios: Sequence[float] = DEFAULT_RATIOS,
              seed: Optional[int] = None) -> List[SplitAssignment]:
        """Filter, split, and write manifest.csv plus totals.json"""
        seed = crowdkit_config.seed if seed is None else seed
        out_dir = Path(out_dir) if out_dir else self.root
        samples = [self.load_sample(stem) for stem in self.list_stems()]
        assignments = filter_and_split(samples, min_count, ratios, seed)

        split_of = {a.image_path: a.split for a in assignments}
        kept = [s for s in samples if s.image_path in split_of]
        for sample in kept:
            sample.split = split_of[sample.image_path]
        totals = self.dataset_totals(kept)

        write_manifest(out_dir / 'manifest.csv', assignments)
        atomic_write_json(out_dir / 'totals.json', totals.to_dict())
        return assignments
