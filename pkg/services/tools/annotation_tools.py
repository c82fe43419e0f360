"""
Detection annotations and counting points

Annotation lines follow the VisDrone detection layout:
    bb_left,bb_top,bb_width,bb_height,score,category,truncation,occlusion
Points files hold one "col,row" pair per line, real-valued pixel coordinates.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np

from services.errors import AnnotationParseError, UsageError
from services.tools.io_tools import atomic_write_csv, format_real

logger = logging.getLogger(__name__)

# Category groups kept by each conversion
PEOPLE_CATEGORIES = (0, 1)
VEHICLE_CATEGORIES = (4, 5, 6, 9)

CONVERSION_MODES = ('people', 'vehicle')

MIN_FIELDS = 6


@dataclass(frozen=True)
class BBoxRecord:
    bb_left: float
    bb_top: float
    bb_width: float
    bb_height: float
    category: int
    score: int = 0
    truncation: int = 0
    occlusion: int = 0

    @property
    def scale(self) -> float:
        """Object scale: mean of box width and height"""
        return (self.bb_width + self.bb_height) / 2.0


def _to_int(raw: str) -> int:
    value = float(raw)
    if not value.is_integer():
        raise ValueError(f"expected an integer, got {raw!r}")
    return int(value)


def parse_annotation_line(line: str, path="<input>", line_number: int = 0) -> Optional[BBoxRecord]:
    """One record, or None for a blank line"""
    text = line.strip()
    if not text:
        return None

    parts = [part.strip() for part in text.split(',')]
    # some releases end every line with a comma
    while parts and parts[-1] == '':
        parts.pop()
    if len(parts) < MIN_FIELDS:
        raise AnnotationParseError(path, line_number, f"expected at least {MIN_FIELDS} fields, got {len(parts)}")

    try:
        left, top, width, height = (float(p) for p in parts[:4])
        score = _to_int(parts[4])
        category = _to_int(parts[5])
        truncation = _to_int(parts[6]) if len(parts) > 6 else 0
        occlusion = _to_int(parts[7]) if len(parts) > 7 else 0
    except ValueError as e:
        raise AnnotationParseError(path, line_number, str(e))

    if not all(np.isfinite([left, top, width, height])):
        raise AnnotationParseError(path, line_number, "box coordinates must be finite")

    return BBoxRecord(left, top, width, height, category, score, truncation, occlusion)


def parse_annotations(lines: Iterable[str], path="<input>") -> List[BBoxRecord]:
    records = []
    skipped = 0
    for line_number, line in enumerate(lines, start=1):
        record = parse_annotation_line(line, path, line_number)
        if record is None:
            continue
        if record.bb_width <= 0 or record.bb_height <= 0:
            skipped += 1
            logger.warning("⚠️ ANNOTATIONS: %s:%d skipped, box size %gx%g is not positive",
                           path, line_number, record.bb_width, record.bb_height)
            continue
        records.append(record)
    if skipped:
        logger.warning("⚠️ ANNOTATIONS: %s: %d degenerate boxes skipped", path, skipped)
    return records


def read_annotations(path) -> List[BBoxRecord]:
    path = Path(path)
    with path.open('r', encoding='utf-8') as handle:
        return parse_annotations(handle, path)


# Point conversion

def _keep(records: Iterable[BBoxRecord], categories) -> List[BBoxRecord]:
    return [r for r in records if r.category in categories]


def convert_people(records: Iterable[BBoxRecord]) -> np.ndarray:
    """Head point (bb_left + bb_width/2, bb_top) of every pedestrian/people box"""
    kept = _keep(records, PEOPLE_CATEGORIES)
    return np.array([(r.bb_left + r.bb_width / 2.0, r.bb_top) for r in kept], dtype=np.float64).reshape(-1, 2)


def convert_vehicle(records: Iterable[BBoxRecord]) -> np.ndarray:
    """Box centre of every car/van/truck/bus box"""
    kept = _keep(records, VEHICLE_CATEGORIES)
    return np.array([(r.bb_left + r.bb_width / 2.0, r.bb_top + r.bb_height / 2.0) for r in kept],
                    dtype=np.float64).reshape(-1, 2)


def convert_records(records: Iterable[BBoxRecord], mode: str) -> np.ndarray:
    if mode == 'people':
        return convert_people(records)
    if mode == 'vehicle':
        return convert_vehicle(records)
    raise UsageError(f"conversion mode must be one of {', '.join(CONVERSION_MODES)}, got {mode!r}")


def records_for_mode(records: Iterable[BBoxRecord], mode: str) -> List[BBoxRecord]:
    """The records a conversion keeps, in input order"""
    if mode not in CONVERSION_MODES:
        raise UsageError(f"conversion mode must be one of {', '.join(CONVERSION_MODES)}, got {mode!r}")
    return _keep(records, PEOPLE_CATEGORIES if mode == 'people' else VEHICLE_CATEGORIES)


# Points files

def write_points(path, points: np.ndarray) -> Path:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return atomic_write_csv(path, None, [(format_real(c), format_real(r)) for c, r in points])


def read_points(path) -> np.ndarray:
    path = Path(path)
    rows = []
    with path.open('r', encoding='utf-8', newline='') as handle:
        for line_number, row in enumerate(csv.reader(handle), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if line_number == 1 and row[0].strip().lower() == 'col':
                continue
            if len(row) < 2:
                raise AnnotationParseError(path, line_number, "expected 'col,row'")
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError as e:
                raise AnnotationParseError(path, line_number, str(e))
    return np.array(rows, dtype=np.float64).reshape(-1, 2)
