#!/usr/bin/env python3
"""
crowdkit command line
Annotation conversion, density maps, crowd statistics, splits, training, evaluation and synthetic data
"""

import argparse
import logging
import sys
from functools import wraps
from pathlib import Path

from crowdkit_config import crowdkit_config
from services.dataset_service import DEFAULT_RATIOS, MIN_COUNT, SPLITS, DatasetService
from services.density_service import METHODS, DensityService
from services.errors import CrowdkitError
from services.network.config import VARIANTS, ModelConfig
from services.network.sacanet import build_model, load_weights
from services.stats_service import StatsService
from services.synthetic_service import REGIMES, SyntheticService
from services.tools.annotation_tools import CONVERSION_MODES, convert_records, read_annotations, read_points, write_points
from services.tools.density_tools import write_density
from services.tools.image_tools import read_image
from services.tools.stats_tools import KMEANS_RESTARTS
from services.training_service import TrainingService

logger = logging.getLogger('crowdkit')

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


class CliParser(argparse.ArgumentParser):
    """Usage errors exit with the validation code"""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def cli_command(f):
    """Decorator mapping failures to exit codes"""
    @wraps(f)
    def decorated(args):
        try:
            f(args)
            return EXIT_OK
        except (CrowdkitError, ValueError) as e:
            print(f"❌ {args.command}: {e}", file=sys.stderr)
            return EXIT_VALIDATION
        except OSError as e:
            print(f"❌ {args.command}: {e}", file=sys.stderr)
            return EXIT_IO
    return decorated


# Flag types

def positive_int(raw):
    value = int(raw)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {raw}")
    return value


def non_negative_int(raw):
    value = int(raw)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {raw}")
    return value


def positive_float(raw):
    value = float(raw)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {raw}")
    return value


def probability(raw):
    value = float(raw)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a probability in [0, 1], got {raw}")
    return value


def ratios(raw):
    try:
        values = tuple(float(part) for part in raw.split(','))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected train,val,test ratios like 0.8,0.1,0.1, got {raw}")
    if len(values) != 3 or any(v < 0 for v in values) or abs(sum(values) - 1.0) > 1e-6:
        raise argparse.ArgumentTypeError(f"ratios must be three non-negative numbers summing to 1, got {raw}")
    return values


# Handlers

@cli_command
def run_convert(args):
    if args.dataset:
        DatasetService(args.dataset, args.mode).convert_all()
        return
    if not (args.input and args.output):
        raise ValueError("convert needs --in and --out, or --dataset")
    points = convert_records(read_annotations(args.input), args.mode)
    write_points(args.output, points)
    logger.info("✅ CONVERT: %d %s points written to %s", len(points), args.mode, args.output)


@cli_command
def run_density(args):
    service = DensityService(args.method, sigma=args.sigma, beta=args.beta, k=args.k)
    if args.dataset:
        service.generate_for_dataset(DatasetService(args.dataset, args.mode), args.output)
        return

    if not args.points:
        raise ValueError("density needs --points, or --dataset")
    if args.image:
        shape = read_image(args.image).shape[1:]
    elif args.height and args.width:
        shape = (args.height, args.width)
    else:
        raise ValueError("density needs --image or both --height and --width")
    grid = service.generate(read_points(args.points), shape)
    write_density(args.output, grid)
    if args.render:
        service.render(args.output, args.render)
    logger.info("✅ DENSITY: %dx%d map with mass %.6f written to %s", shape[0], shape[1], grid.sum(), args.output)


def _seed(args):
    return crowdkit_config.seed if args.seed is None else args.seed


@cli_command
def run_stats(args):
    dataset = DatasetService(args.dataset, args.mode)
    samples = dataset.load_samples(split=args.split)
    service = StatsService(restarts=args.restarts)
    reports = service.analyze_samples(samples, seed=_seed(args))
    service.write_reports(reports, args.output)


@cli_command
def run_buckets(args):
    dataset = DatasetService(args.dataset, args.mode)
    samples = dataset.load_samples(split=args.split)
    service = StatsService(restarts=args.restarts)
    reports = service.analyze_samples(samples, seed=_seed(args))
    service.write_bucket_manifests(reports, samples, args.output)


@cli_command
def run_split(args):
    DatasetService(args.dataset, args.mode).split(
        out_dir=args.output, min_count=args.min_count, ratios=args.ratios, seed=_seed(args))


def _model_config(args, seed):
    if args.config:
        return ModelConfig.from_file(args.config)
    return ModelConfig(channel_scale=args.channel_scale, variant=args.variant, seed=seed,
                       attention_cap=crowdkit_config.attention_cap).validate()


@cli_command
def run_train(args):
    seed = _seed(args)
    model = build_model(_model_config(args, seed))
    if args.init_weights:
        load_weights(model, args.init_weights, stem_only=args.stem_only)

    service = TrainingService(model, DensityService(args.method, sigma=args.sigma))
    examples = service.load_examples(DatasetService(args.dataset, args.mode), split=args.split)
    service.fit(examples, args.output, epochs=args.epochs, batch_size=args.batch_size, seed=seed, lr=args.lr,
                clip_norm=args.clip_norm, flip_probability=args.flip, max_steps=args.max_steps,
                calibrate=not args.init_weights or args.stem_only)


@cli_command
def run_eval(args):
    weights = Path(args.weights)
    config_path = Path(args.config) if args.config else weights.parent / 'model.cfg'
    model = load_weights(build_model(ModelConfig.from_file(config_path)), weights)

    dataset = DatasetService(args.dataset, args.mode)
    service = TrainingService(model, DensityService(args.method, sigma=args.sigma))
    examples = service.load_examples(dataset, split=args.split, manifest_path=args.manifest)

    buckets = None
    if not args.no_breakdown:
        samples = dataset.load_samples(split=args.split, manifest_path=args.manifest)
        reports = StatsService().analyze_samples(samples, seed=_seed(args))
        buckets = {r.image: (r.cv_bucket, r.dvi_bucket) for r in reports}

    report = service.run_evaluation(examples, out_path=args.output, buckets=buckets)
    print(report.format_table())


@cli_command
def run_render(args):
    DensityService.render(args.input, args.output)


@cli_command
def run_synth(args):
    SyntheticService(height=args.height, width=args.width, mode=args.mode).make_synthetic(
        args.output, args.count, min_points=args.min_points, max_points=args.max_points,
        regime=args.regime, seed=_seed(args))


# Parser

def _add_seed(parser):
    parser.add_argument('--seed', type=int, default=None, help='random seed (default: CROWDKIT_SEED)')


def _add_dataset(parser, required=True):
    parser.add_argument('--dataset', required=required, help='dataset directory (images/, annotations/, points/)')
    parser.add_argument('--mode', choices=CONVERSION_MODES, default='people',
                        help='category group: people (head points) or vehicle (box centres)')


def _add_kernel(parser):
    parser.add_argument('--method', choices=METHODS, default='fixed', help='ground-truth kernel')
    parser.add_argument('--sigma', type=positive_float, default=None, help='fixed kernel sigma (default: CROWDKIT_SIGMA)')


def build_parser() -> CliParser:
    parser = CliParser(prog='crowdkit', description='Scale-aware crowd counting toolkit')
    commands = parser.add_subparsers(dest='command', metavar='<command>')

    p = commands.add_parser('convert', help='detection boxes to counting points')
    p.add_argument('--mode', choices=CONVERSION_MODES, default='people')
    p.add_argument('--in', dest='input', help='annotation file')
    p.add_argument('--out', dest='output', help='points CSV to write')
    p.add_argument('--dataset', help='convert every annotation file of a dataset into points/')
    p.set_defaults(handler=run_convert)

    p = commands.add_parser('density', help='ground-truth density map (CKDM)')
    _add_dataset(p, required=False)
    _add_kernel(p)
    p.add_argument('--points', help='points CSV')
    p.add_argument('--image', help='image whose size the map takes')
    p.add_argument('--height', type=positive_int)
    p.add_argument('--width', type=positive_int)
    p.add_argument('--beta', type=positive_float, default=None, help='adaptive kernel beta')
    p.add_argument('--k', type=positive_int, default=None, help='adaptive kernel neighbours')
    p.add_argument('--out', dest='output', required=True, help='CKDM file, or a directory with --dataset')
    p.add_argument('--render', help='also write a PGM rendering here')
    p.set_defaults(handler=run_density)

    for name, handler, help_text in (('stats', run_stats, 'per-image CV / DVI reports'),
                                     ('buckets', run_buckets, 'CV and DVI bucket manifests')):
        p = commands.add_parser(name, help=help_text)
        _add_dataset(p)
        p.add_argument('--split', choices=SPLITS, default='test' if name == 'buckets' else None,
                       help='restrict to one split of manifest.csv')
        p.add_argument('--restarts', type=positive_int, default=KMEANS_RESTARTS, help='k-means restarts')
        p.add_argument('--out', dest='output', required=True, help='output directory')
        _add_seed(p)
        p.set_defaults(handler=handler)

    p = commands.add_parser('split', help='filter by count and split into train/val/test')
    _add_dataset(p)
    p.add_argument('--min-count', type=non_negative_int, default=MIN_COUNT)
    p.add_argument('--ratios', type=ratios, default=DEFAULT_RATIOS, help='train,val,test (default 0.8,0.1,0.1)')
    p.add_argument('--out', dest='output', default=None, help='directory for manifest.csv (default: dataset)')
    _add_seed(p)
    p.set_defaults(handler=run_split)

    p = commands.add_parser('train', help='train a model')
    _add_dataset(p)
    _add_kernel(p)
    p.add_argument('--config', help='model config file (key=value)')
    p.add_argument('--variant', choices=VARIANTS, default='full')
    p.add_argument('--channel-scale', default='1/8', help='width multiplier for every layer')
    p.add_argument('--split', choices=SPLITS, default=None)
    p.add_argument('--epochs', type=non_negative_int, default=1)
    p.add_argument('--batch-size', type=positive_int, default=1)
    p.add_argument('--lr', type=positive_float, default=1e-4)
    p.add_argument('--clip-norm', type=positive_float, default=None)
    p.add_argument('--flip', type=probability, default=0.0, help='horizontal flip probability')
    p.add_argument('--max-steps', type=positive_int, default=None)
    p.add_argument('--init-weights', help='CKWT file to start from')
    p.add_argument('--stem-only', action='store_true', help='take only stem.* weights from --init-weights')
    p.add_argument('--out', dest='output', required=True, help='output directory')
    _add_seed(p)
    p.set_defaults(handler=run_train)

    p = commands.add_parser('eval', help='MAE / MSE with a per-bucket breakdown')
    _add_dataset(p)
    _add_kernel(p)
    p.add_argument('--weights', required=True, help='CKWT weights')
    p.add_argument('--config', help='model config (default: model.cfg next to the weights)')
    p.add_argument('--split', choices=SPLITS, default=None)
    p.add_argument('--manifest', help='evaluate the images listed here, e.g. a bucket manifest')
    p.add_argument('--no-breakdown', action='store_true', help='skip the CV / DVI bucket table')
    p.add_argument('--out', dest='output', default=None, help='JSON report path')
    _add_seed(p)
    p.set_defaults(handler=run_eval)

    p = commands.add_parser('render', help='CKDM density map to PGM')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--out', dest='output', required=True)
    p.set_defaults(handler=run_render)

    p = commands.add_parser('synth', help='generate a synthetic dataset')
    p.add_argument('--out', dest='output', required=True)
    p.add_argument('--count', type=non_negative_int, default=20)
    p.add_argument('--min-points', type=positive_int, default=5)
    p.add_argument('--max-points', type=positive_int, default=30)
    p.add_argument('--regime', choices=REGIMES, default='scale-var')
    p.add_argument('--height', type=positive_int, default=64)
    p.add_argument('--width', type=positive_int, default=64)
    p.add_argument('--mode', choices=CONVERSION_MODES, default='vehicle')
    _add_seed(p)
    p.set_defaults(handler=run_synth)

    return parser


def configure_logging():
    logging.basicConfig(level=crowdkit_config.log_level, stream=sys.stderr,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')


def dispatch(argv) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_VALIDATION
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_VALIDATION if e.code is None else int(e.code)
    if not getattr(args, 'handler', None):
        parser.print_usage(sys.stderr)
        return EXIT_VALIDATION

    try:
        crowdkit_config.validate()
    except CrowdkitError as e:
        print(f"❌ config: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    configure_logging()
    return args.handler(args)


if __name__ == '__main__':
    sys.exit(dispatch(sys.argv[1:]))
