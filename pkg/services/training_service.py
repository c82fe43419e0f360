"""
Training Service
Euclidean-loss training with Adam and MAE / MSE evaluation of counts

Ground truth is rendered at full resolution and sum-pooled to the model's 1/8 output grid,
so the pooled map still integrates to the image's point count.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from crowdkit_config import crowdkit_config
from services.density_service import DensityService
from services.engine import functional as F
from services.engine.tensor import Tensor, no_grad
from services.errors import NumericalError, TrainingDivergedError, UsageError
from services.network.sacanet import SacaModel, predict_count, save_weights
from services.tools.density_tools import sum_pool_to
from services.tools.image_tools import match_channels, random_flip, read_image, resize_with_cap
from services.tools.io_tools import atomic_write_csv, atomic_write_json, format_real
from services.tools.stats_tools import CV_BUCKET_EDGES, DVI_BUCKET_EDGES, bucket_label

logger = logging.getLogger(__name__)

OUTPUT_STRIDE = 8


# Loss and optimizer

def euclidean_loss(pred: Tensor, gt) -> Tensor:
    """(1/N) * sum((pred - gt)^2) with N the number of map pixels over the whole batch"""
    gt = gt if isinstance(gt, Tensor) else Tensor(gt)
    if pred.shape != gt.shape:
        raise UsageError(f"loss shapes differ: prediction {pred.shape}, ground truth {gt.shape}")
    residual = F.sub(pred, gt)
    return F.reduce_mean(F.mul(residual, residual))


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.epsilon <= 0:
            raise UsageError("Adam needs lr >= 0, betas in [0, 1) and a positive epsilon")


def adam_step(params: Iterable[Tuple[str, Tensor]], grads: Mapping[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update; parameters without a gradient are left alone"""
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, tensor in params:
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != tensor.shape:
            raise UsageError(f"gradient for '{name}' has shape {grad.shape}, parameter is {tensor.shape}")
        m = state.first.get(name)
        v = state.second.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        elif m.shape != tensor.shape:
            raise UsageError(f"Adam moments for '{name}' have shape {m.shape}, parameter is {tensor.shape}")

        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first[name], state.second[name] = m, v
        tensor.data = tensor.data - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
    return state


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm; returns the norm before clipping"""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


# Examples

@dataclass
class TrainingExample:
    name: str
    image: np.ndarray
    points: np.ndarray
    density: np.ndarray

    @property
    def count(self) -> int:
        return len(self.points)


def make_example(name: str, image: np.ndarray, points, density_service: DensityService,
                 input_channels: int = 3, multiple: int = 32, max_h: int = 768, max_w: int = 1024) -> TrainingExample:
    """Resize under the cap, crop to the model's multiple and pool ground truth to the output grid"""
    image, points = resize_with_cap(image, points, max_h=max_h, max_w=max_w, multiple=multiple)
    image = match_channels(image, input_channels)
    _, height, width = image.shape
    full = density_service.generate(points, (height, width))
    pooled = sum_pool_to(full, height // OUTPUT_STRIDE, width // OUTPUT_STRIDE)
    return TrainingExample(name=name, image=image, points=points, density=pooled)


def _batches(examples: Sequence[TrainingExample], order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield [examples[i] for i in order[start:start + batch_size]]


def _stack(images: List[np.ndarray], maps: List[np.ndarray]):
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise UsageError(f"batch mixes image shapes {sorted(shapes)}; use batch_size 1 or equal-sized images")
    return Tensor(np.stack(images)), np.stack(maps)[:, None, :, :]


# Training

@dataclass
class TrainingLog:
    losses: List[Tuple[int, float]] = field(default_factory=list)
    epoch_mae: List[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.losses)


def calibrate_head(model: SacaModel, examples: Sequence[TrainingExample]) -> Tuple[float, float]:
    """
    Rescale the 1x1 density head so its pre-activation over the examples has the
    ground truth's per-pixel mean and standard deviation. Returns (gain, bias).
    """
    if not examples:
        raise UsageError("head calibration needs at least one example")
    weight, bias = model.params['output.weight'], model.params['output.bias']
    kernel = weight.data[0, :, 0, 0]
    with no_grad():
        raw = np.concatenate([
            np.tensordot(kernel, model.head_inputs(Tensor(e.image[None])).data[0], axes=1).ravel()
            for e in examples])
    target = np.concatenate([e.density.ravel() for e in examples])

    spread = raw.std()
    gain = float(target.std() / spread) if spread > 0 and target.std() > 0 else 1.0
    offset = float(target.mean() - gain * raw.mean())
    weight.data = weight.data * gain
    bias.data = np.array([offset])
    if not np.all(np.isfinite(weight.data)) or not np.isfinite(offset):
        raise NumericalError("head calibration produced non-finite weights")
    logger.info("🎚️ TRAINER: calibrated density head on %d examples, gain %.4f, bias %.6f",
                len(examples), gain, offset)
    return gain, offset


def train(model: SacaModel, examples: Sequence[TrainingExample], epochs: int, batch_size: int = 1, seed: int = 0,
          state: Optional[AdamState] = None, clip_norm: Optional[float] = None, flip_probability: float = 0.0,
          checkpoint_dir=None, max_steps: Optional[int] = None, progress: bool = False,
          calibrate: bool = True) -> TrainingLog:
    """
    Shuffled mini-batch training, one Adam step per batch.

    With `calibrate`, a fresh optimizer state and at least one epoch, the density head is first
    matched to the ground truth statistics (see calibrate_head); pass False when resuming from
    trained weights.

    Loss is logged per step, training-set MAE per epoch, and with `checkpoint_dir` the
    weights land in epoch_<n>.ckwt after every epoch. A non-finite loss aborts with the step number.
    """
    if epochs < 0 or batch_size < 1:
        raise UsageError(f"epochs must be >= 0 and batch_size >= 1, got {epochs} and {batch_size}")
    if epochs and not examples:
        raise UsageError("training needs at least one example")
    if not 0.0 <= flip_probability <= 1.0:
        raise UsageError(f"flip probability must be in [0, 1], got {flip_probability}")
    if clip_norm is not None and clip_norm <= 0:
        raise UsageError(f"clip_norm must be positive, got {clip_norm}")

    state = state or AdamState()
    rng = np.random.default_rng(seed)
    log = TrainingLog()
    params = model.parameters()

    if calibrate and epochs and state.step == 0:
        try:
            calibrate_head(model, examples)
        except NumericalError as e:
            raise TrainingDivergedError(0, f"non-finite values while calibrating the head ({e})")

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(examples))
        batches = list(_batches(examples, order, batch_size))
        for batch in tqdm(batches, desc=f"epoch {epoch}", disable=not progress):
            if max_steps is not None and log.steps >= max_steps:
                break
            step = log.steps + 1

            images, maps = [], []
            for example in batch:
                image, density = example.image, example.density
                if flip_probability:
                    image, _, flipped = random_flip(image, example.points, flip_probability, rng)
                    if flipped:
                        density = density[:, ::-1]
                images.append(image)
                maps.append(density)
            inputs, targets = _stack(images, maps)

            model.zero_grad()
            try:
                loss = euclidean_loss(model(inputs), targets)
                loss.backward()
            except NumericalError as e:
                raise TrainingDivergedError(step, f"non-finite values during the step ({e})")
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(step, f"loss is {value}")

            grads = {name: tensor.grad for name, tensor in params if tensor.grad is not None}
            if clip_norm is not None:
                clip_gradients(grads, clip_norm)
            adam_step(params, grads, state)
            log.losses.append((step, value))
            logger.debug("🔁 TRAINER: step %d loss %.6e", step, value)

        report = evaluate(model, examples, threads=1)
        log.epoch_mae.append(report.mae)
        logger.info("✅ TRAINER: epoch %d done after %d steps, training MAE %.4f", epoch, log.steps, report.mae)
        if checkpoint_dir is not None:
            save_weights(model, Path(checkpoint_dir) / f"epoch_{epoch:03d}.ckwt")
        if max_steps is not None and log.steps >= max_steps:
            break

    return log


def write_training_log(path, log: TrainingLog) -> Path:
    return atomic_write_csv(path, ('step', 'loss'), [(step, format_real(loss)) for step, loss in log.losses])


# Evaluation

def count_errors(ground_truth: Sequence[float], predicted: Sequence[float]) -> Tuple[float, float]:
    """MAE and MSE, where MSE is the root of the mean squared count error"""
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if ground_truth.size == 0:
        raise UsageError("cannot evaluate an empty dataset")
    if ground_truth.shape != predicted.shape:
        raise UsageError(f"{ground_truth.size} ground-truth counts but {predicted.size} predictions")
    errors = predicted - ground_truth
    return float(np.mean(np.abs(errors))), float(np.sqrt(np.mean(errors * errors)))


@dataclass
class EvalReport:
    images: List[str]
    ground_truth: List[float]
    predicted: List[float]
    mae: float
    mse: float
    breakdown: Dict[str, Dict[int, Dict[str, float]]] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            'mae': self.mae,
            'mse': self.mse,
            'images': [
                {'image': name, 'ground_truth_count': gt, 'predicted_count': pred}
                for name, gt, pred in zip(self.images, self.ground_truth, self.predicted)
            ],
            'breakdown': {
                kind: {str(bucket): values for bucket, values in groups.items()}
                for kind, groups in self.breakdown.items()
            },
        }

    def format_table(self) -> str:
        lines = [f"images {len(self.images)}  MAE {self.mae:.4f}  MSE {self.mse:.4f}"]
        for kind, edges in (('cv', CV_BUCKET_EDGES), ('dvi', DVI_BUCKET_EDGES)):
            groups = self.breakdown.get(kind)
            if not groups:
                continue
            lines.append(f"{kind.upper():<4}{'range':<12}{'images':>8}{'MAE':>12}{'MSE':>12}")
            for bucket, values in sorted(groups.items()):
                if values['images']:
                    mae, mse = f"{values['mae']:.4f}", f"{values['mse']:.4f}"
                else:
                    mae = mse = '-'
                lines.append(f"{bucket:<4}{bucket_label(edges, bucket):<12}{values['images']:>8}{mae:>12}{mse:>12}")
        return "\n".join(lines)


def _breakdown(names: List[str], gt: List[float], pred: List[float],
               buckets: Mapping[str, Tuple[Optional[int], Optional[int]]]) -> Dict[str, Dict[int, Dict[str, float]]]:
    result = {}
    for position, (kind, edges) in enumerate((('cv', CV_BUCKET_EDGES), ('dvi', DVI_BUCKET_EDGES))):
        groups = {}
        for bucket in range(len(edges) + 1):
            members = [i for i, name in enumerate(names)
                       if name in buckets and buckets[name][position] == bucket]
            entry = {'images': len(members)}
            if members:
                entry['mae'], entry['mse'] = count_errors([gt[i] for i in members], [pred[i] for i in members])
            groups[bucket] = entry
        result[kind] = groups
    return result


def evaluate(model: SacaModel, examples: Sequence[TrainingExample], threads: Optional[int] = None,
             buckets: Optional[Mapping[str, Tuple[Optional[int], Optional[int]]]] = None) -> EvalReport:
    """Counts for every example in parallel, merged in input order; `buckets` maps image name to (cv, dvi) bucket"""
    if not examples:
        raise UsageError("cannot evaluate an empty dataset")
    threads = crowdkit_config.threads if threads is None else threads

    def predict(example: TrainingExample) -> float:
        with no_grad():
            return float(predict_count(model(Tensor(example.image[None])))[0])

    if threads == 1:
        predicted = [predict(e) for e in examples]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            predicted = list(pool.map(predict, examples))

    names = [e.name for e in examples]
    ground_truth = [float(e.count) for e in examples]
    mae, mse = count_errors(ground_truth, predicted)
    report = EvalReport(names, ground_truth, predicted, mae, mse)
    if buckets:
        report.breakdown = _breakdown(names, ground_truth, predicted, buckets)
    return report


class TrainingService:
    def __init__(self, model: SacaModel, density_service: Optional[DensityService] = None):
        self.model = model
        self.density_service = density_service or DensityService()
        self.threads = crowdkit_config.threads
        self.progress = crowdkit_config.progress

    def load_examples(self, dataset, split: Optional[str] = None, manifest_path=None) -> List[TrainingExample]:
        config = self.model.config
        examples = []
        for sample in dataset.load_samples(split=split, manifest_path=manifest_path):
            image = read_image(dataset.image_path(sample.name))
            examples.append(make_example(sample.name, image, sample.points, self.density_service,
                                         input_channels=config.input_channels, multiple=config.input_multiple))
        logger.info("📥 TRAINER: loaded %d examples%s", len(examples), f" ({split})" if split else "")
        return examples

    def fit(self, examples: Sequence[TrainingExample], out_dir, epochs: int, batch_size: int = 1, seed: int = 0,
            lr: float = 1e-4, clip_norm: Optional[float] = None, flip_probability: float = 0.0,
            max_steps: Optional[int] = None, calibrate: bool = True) -> TrainingLog:
        """Train, then write training_log.csv, model.cfg and final weights to out_dir"""
        out_dir = Path(out_dir)
        log = train(self.model, examples, epochs, batch_size=batch_size, seed=seed, state=AdamState(lr=lr),
                    clip_norm=clip_norm, flip_probability=flip_probability, checkpoint_dir=out_dir / 'checkpoints',
                    max_steps=max_steps, progress=self.progress, calibrate=calibrate)
        write_training_log(out_dir / 'training_log.csv', log)
        self.model.config.to_file(out_dir / 'model.cfg')
        save_weights(self.model, out_dir / 'weights.ckwt')
        logger.info("✅ TRAINER: finished %d steps, artifacts in %s", log.steps, out_dir)
        return log

    def run_evaluation(self, examples: Sequence[TrainingExample], out_path=None,
                       buckets: Optional[Mapping[str, Tuple[Optional[int], Optional[int]]]] = None) -> EvalReport:
        report = evaluate(self.model, examples, threads=self.threads, buckets=buckets)
        if out_path is not None:
            atomic_write_json(out_path, report.to_dict())
        logger.info("📈 TRAINER: evaluated %d images, MAE %.4f MSE %.4f", len(examples), report.mae, report.mse)
        return report
