"""
Stats Service
Per-image CV / DVI analysis over a dataset, report files and difficulty-bucket manifests
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

from tqdm import tqdm

from crowdkit_config import crowdkit_config
from services.dataset_service import CountingSample, SplitAssignment, write_manifest
from services.errors import UsageError
from services.tools.io_tools import atomic_write_csv, atomic_write_json, format_real
from services.tools.stats_tools import (
    CV_BUCKET_EDGES, DVI_BUCKET_EDGES, CrowdStatsReport, KMEANS_RESTARTS, analyze_image, bucket_label,
    summarize_buckets,
)

logger = logging.getLogger(__name__)

SUMMARY_HEADER = ('image', 'object_count', 'scale_mean', 'scale_std', 'cv', 'cv_bucket', 'dvi', 'dvi_bucket', 'flag')


class StatsService:
    def __init__(self, threads: Optional[int] = None, restarts: int = KMEANS_RESTARTS):
        self.threads = crowdkit_config.threads if threads is None else threads
        self.restarts = restarts
        if self.threads < 1:
            raise UsageError(f"threads must be at least 1, got {self.threads}")

    def analyze_samples(self, samples: List[CountingSample], seed: int = 0) -> List[CrowdStatsReport]:
        """Reports in the order of `samples`; samples without boxes are skipped"""
        usable = []
        for sample in samples:
            if not sample.records:
                logger.warning("⚠️ STATS: %s has no box annotations, skipped", sample.name)
                continue
            usable.append(sample)

        def analyze(sample):
            return analyze_image(sample.name, sample.points, sample.records, seed=seed, restarts=self.restarts)

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            reports = list(tqdm(pool.map(analyze, usable), total=len(usable), desc='stats',
                                disable=not crowdkit_config.progress))

        flagged = sum(r.flag is not None for r in reports)
        logger.info("✅ STATS: analyzed %d images (%d flagged without DVI)", len(reports), flagged)
        return reports

    @staticmethod
    def write_reports(reports: List[CrowdStatsReport], out_dir) -> Path:
        """<image>.json per report, summary.csv and buckets.json"""
        out_dir = Path(out_dir)
        for report in reports:
            atomic_write_json(out_dir / f"{report.image}.json", report.to_dict())

        rows = []
        for r in reports:
            rows.append((
                r.image, r.object_count, format_real(r.scale_mean), format_real(r.scale_std), format_real(r.cv),
                r.cv_bucket, '' if r.dvi is None else format_real(r.dvi),
                '' if r.dvi_bucket is None else r.dvi_bucket, r.flag or '',
            ))
        summary = atomic_write_csv(out_dir / 'summary.csv', SUMMARY_HEADER, rows)

        counts = summarize_buckets(reports)
        atomic_write_json(out_dir / 'buckets.json', {
            'cv': {bucket_label(CV_BUCKET_EDGES, b): n for b, n in counts['cv'].items()},
            'dvi': {bucket_label(DVI_BUCKET_EDGES, b): n for b, n in counts['dvi'].items()},
        })
        logger.info("💾 STATS: wrote %d reports and %s", len(reports), summary)
        return summary

    @staticmethod
    def bucket_assignments(reports: List[CrowdStatsReport],
                           samples: List[CountingSample]) -> Dict[str, Dict[int, List[SplitAssignment]]]:
        by_name = {s.name: s for s in samples}
        groups = {
            'cv': {b: [] for b in range(len(CV_BUCKET_EDGES) + 1)},
            'dvi': {b: [] for b in range(len(DVI_BUCKET_EDGES) + 1)},
        }
        for report in reports:
            sample = by_name[report.image]
            entry = SplitAssignment(sample.image_path, sample.split or 'test', sample.count)
            groups['cv'][report.cv_bucket].append(entry)
            if report.dvi_bucket is not None:
                groups['dvi'][report.dvi_bucket].append(entry)
        return groups

    def write_bucket_manifests(self, reports: List[CrowdStatsReport], samples: List[CountingSample],
                               out_dir) -> List[Path]:
        """cv_bucket_<b>.csv (five levels) and dvi_bucket_<b>.csv (four levels) in manifest format"""
        out_dir = Path(out_dir)
        written = []
        for kind, groups in self.bucket_assignments(reports, samples).items():
            for bucket, entries in groups.items():
                written.append(write_manifest(out_dir / f"{kind}_bucket_{bucket}.csv", entries))
                logger.info("📁 STATS: %s bucket %d %s holds %d images", kind.upper(), bucket,
                            bucket_label(CV_BUCKET_EDGES if kind == 'cv' else DVI_BUCKET_EDGES, bucket),
                            len(entries))
        return written
