"""
Loss, Adam, count errors, training loop and evaluation
"""

import numpy as np
import pytest

from services.dataset_service import DatasetService
from services.density_service import DensityService
from services.engine.tensor import Tensor
from services.errors import TrainingDivergedError, UsageError
from services.network.sacanet import build_model
from services.synthetic_service import SyntheticService
from services.training_service import (
    AdamState, TrainingExample, TrainingService, adam_step, calibrate_head, clip_gradients, count_errors,
    euclidean_loss, evaluate, make_example, train, write_training_log,
)


@pytest.fixture
def examples(isolated_dataset, tiny_config):
    service = TrainingService(build_model(tiny_config), DensityService('fixed', sigma=2))
    return service.load_examples(DatasetService(isolated_dataset, mode='vehicle'))


def snapshot(model):
    return {name: tensor.data.copy() for name, tensor in model.parameters()}


class TestLoss:
    def test_mean_over_pixels(self):
        pred = Tensor(np.array([[[[1.0, 0.0], [0.0, 0.0]]]]))
        assert euclidean_loss(pred, np.zeros((1, 1, 2, 2))).item() == pytest.approx(0.25)

    def test_zero_when_equal(self, rng):
        gt = rng.uniform(size=(2, 1, 3, 3))
        assert euclidean_loss(Tensor(gt.copy()), gt).item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            euclidean_loss(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)))


class TestAdam:
    def test_first_step_moves_by_lr(self):
        param = ('w', Tensor(np.array([1.0]), requires_grad=True))
        adam_step([param], {'w': np.array([1.0])}, AdamState(lr=0.1))
        assert param[1].data[0] == pytest.approx(0.9, abs=1e-6)

    def test_zero_gradient_and_zero_lr_leave_weights(self):
        param = ('w', Tensor(np.array([1.0, -2.0]), requires_grad=True))
        adam_step([param], {'w': np.zeros(2)}, AdamState(lr=0.1))
        adam_step([param], {'w': np.ones(2)}, AdamState(lr=0.0))
        np.testing.assert_array_equal(param[1].data, [1.0, -2.0])

    def test_reversed_gradient_reverses_direction(self):
        param = ('w', Tensor(np.array([0.0]), requires_grad=True))
        state = AdamState(lr=0.1)
        adam_step([param], {'w': np.array([1.0])}, state)
        after_first = param[1].data[0]
        adam_step([param], {'w': np.array([-1.0])}, state)
        assert after_first < param[1].data[0] < 0.0
        assert state.step == 2

    def test_parameter_without_gradient_is_skipped(self):
        param = ('w', Tensor(np.array([3.0]), requires_grad=True))
        adam_step([param], {}, AdamState(lr=0.1))
        assert param[1].data[0] == 3.0

    def test_invalid_hyperparameters(self):
        with pytest.raises(UsageError):
            AdamState(beta1=1.0)

    def test_clip_gradients(self):
        grads = {'a': np.array([3.0]), 'b': np.array([4.0])}
        assert clip_gradients(grads, 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose([grads['a'][0], grads['b'][0]], [0.6, 0.8])


class TestCountErrors:
    def test_equal_errors(self):
        assert count_errors([10, 20], [13, 17]) == pytest.approx((3.0, 3.0))

    def test_root_mean_square(self):
        mae, mse = count_errors([10, 10], [12, 6])
        assert mae == pytest.approx(3.0)
        assert mse == pytest.approx(np.sqrt(10.0))

    def test_empty(self):
        with pytest.raises(UsageError):
            count_errors([], [])


class TestExamples:
    def test_ground_truth_is_pooled_to_the_output_grid(self, examples):
        for example in examples:
            assert example.image.shape == (3, 64, 64)
            assert example.density.shape == (8, 8)
            assert example.density.sum() == pytest.approx(example.count, abs=1e-6)

    def test_large_image_is_capped(self, rng):
        example = make_example('big', rng.uniform(size=(1, 96, 128)), [(64.0, 48.0)], DensityService(sigma=2),
                               max_h=48, max_w=64)
        assert example.image.shape == (3, 32, 64)
        assert example.density.shape == (4, 8)


class TestTraining:
    def test_zero_epochs_leave_the_model(self, tiny_config, examples):
        model = build_model(tiny_config)
        before = snapshot(model)
        log = train(model, examples, epochs=0)
        assert log.steps == 0
        for name, data in snapshot(model).items():
            np.testing.assert_array_equal(data, before[name])

    def test_same_seed_same_run(self, tiny_config, examples):
        logs = [train(build_model(tiny_config), examples, epochs=1, batch_size=2, seed=5, flip_probability=0.5)
                for _ in range(2)]
        assert logs[0].losses == logs[1].losses
        assert logs[0].steps == 2

    def test_loss_goes_down_on_one_image(self, tiny_config, examples):
        model = build_model(tiny_config)
        model.params['output.bias'].data = np.array([0.1])
        log = train(model, examples[:1], epochs=12, state=AdamState(lr=1e-3), calibrate=False)
        assert log.losses[-1][1] < log.losses[0][1]

    def test_max_steps_and_checkpoints(self, tiny_config, examples, tmp_path):
        log = train(build_model(tiny_config), examples, epochs=3, max_steps=5, checkpoint_dir=tmp_path)
        assert log.steps == 5
        assert sorted(p.name for p in tmp_path.iterdir()) == ['epoch_001.ckwt', 'epoch_002.ckwt']
        lines = write_training_log(tmp_path / 'log.csv', log).read_text().splitlines()
        assert lines[0] == 'step,loss'
        assert len(lines) == 6

    def test_non_finite_weights_abort(self, tiny_config, examples):
        model = build_model(tiny_config)
        model.params['output.bias'].data = np.array([np.nan])
        with pytest.raises(TrainingDivergedError) as info:
            train(model, examples, epochs=1, calibrate=False)
        assert info.value.step == 1

    def test_needs_examples(self, tiny_config):
        with pytest.raises(UsageError):
            train(build_model(tiny_config), [], epochs=1)

    def test_full_flip_probability_trains_on_mirrored_examples(self, tiny_config, examples):
        example = examples[0]
        mirrored = TrainingExample(name=example.name, image=np.ascontiguousarray(example.image[..., ::-1]),
                                   points=example.points, density=example.density[:, ::-1])
        flipped = train(build_model(tiny_config), [example], epochs=2, flip_probability=1.0, calibrate=False)
        direct = train(build_model(tiny_config), [mirrored], epochs=2, calibrate=False)
        assert flipped.losses == direct.losses

    def test_bad_flip_probability(self, tiny_config, examples):
        with pytest.raises(UsageError):
            train(build_model(tiny_config), examples, epochs=1, flip_probability=1.5)


def head_preactivation(model, examples):
    weight = model.params['output.weight'].data[0, :, 0, 0]
    bias = model.params['output.bias'].data[0]
    return np.concatenate([
        (np.tensordot(weight, model.head_inputs(Tensor(e.image[None])).data[0], axes=1) + bias).ravel()
        for e in examples])


class TestCalibration:
    def test_head_matches_ground_truth_moments(self, tiny_config, examples):
        model = build_model(tiny_config)
        gain, _ = calibrate_head(model, examples)
        target = np.concatenate([e.density.ravel() for e in examples])
        raw = head_preactivation(model, examples)
        assert gain > 0
        assert raw.mean() == pytest.approx(target.mean(), abs=1e-9)
        assert raw.std() == pytest.approx(target.std(), rel=1e-6)

    def test_only_the_head_changes(self, tiny_config, examples):
        model = build_model(tiny_config)
        before = snapshot(model)
        calibrate_head(model, examples)
        changed = {name for name, data in snapshot(model).items() if not np.array_equal(data, before[name])}
        assert changed <= {'output.weight', 'output.bias'}
        assert 'output.bias' in changed

    def test_runs_before_the_first_step_only_when_asked(self, tiny_config, examples):
        calibrated, plain = build_model(tiny_config), build_model(tiny_config)
        train(calibrated, examples, epochs=1, max_steps=0)
        train(plain, examples, epochs=1, max_steps=0, calibrate=False)
        assert not np.array_equal(calibrated.params['output.weight'].data, plain.params['output.weight'].data)
        assert plain.params['output.bias'].data[0] == 0.0

    def test_resumed_optimizer_skips_it(self, tiny_config, examples):
        model = build_model(tiny_config)
        train(model, examples, epochs=1, max_steps=0, state=AdamState(step=7))
        assert model.params['output.bias'].data[0] == 0.0

    def test_non_finite_features_abort_before_training(self, tiny_config, examples):
        model = build_model(tiny_config)
        model.params['backend.conv2.weight'].data[:] = np.nan
        with pytest.raises(TrainingDivergedError) as info:
            train(model, examples, epochs=1)
        assert info.value.step == 0

    def test_needs_examples(self, tiny_config):
        with pytest.raises(UsageError):
            calibrate_head(build_model(tiny_config), [])


class TestEvaluate:
    def test_threads_do_not_change_the_result(self, tiny_config, examples):
        model = build_model(tiny_config)
        single = evaluate(model, examples, threads=1)
        pooled = evaluate(model, examples, threads=3)
        assert single.predicted == pooled.predicted
        assert single.ground_truth == [float(e.count) for e in examples]

    def test_bucket_breakdown(self, tiny_config, examples):
        buckets = {e.name: (0 if i < 2 else 4, 1) for i, e in enumerate(examples)}
        report = evaluate(build_model(tiny_config), examples, threads=1, buckets=buckets)
        assert report.breakdown['cv'][0]['images'] == 2
        assert report.breakdown['cv'][4]['images'] == 2
        assert report.breakdown['cv'][2] == {'images': 0}
        assert report.breakdown['dvi'][1]['mae'] == pytest.approx(report.mae)
        table = report.format_table()
        assert 'MAE' in table
        assert '[0.8,inf)' in table
        assert report.to_dict()['breakdown']['dvi']['1']['images'] == 4

    def test_run_evaluation_writes_json(self, tiny_config, examples, tmp_path):
        service = TrainingService(build_model(tiny_config))
        report = service.run_evaluation(examples, tmp_path / 'eval.json')
        assert (tmp_path / 'eval.json').exists()
        assert len(report.images) == 4


class TestFit:
    def test_writes_artifacts(self, tiny_config, examples, tmp_path):
        service = TrainingService(build_model(tiny_config))
        service.fit(examples, tmp_path, epochs=1, max_steps=2)
        for name in ('training_log.csv', 'model.cfg', 'weights.ckwt', 'checkpoints/epoch_001.ckwt'):
            assert (tmp_path / name).exists()

    def test_reruns_are_byte_identical(self, tiny_config, examples, tmp_path):
        for name in ('a', 'b'):
            TrainingService(build_model(tiny_config)).fit(examples, tmp_path / name, epochs=1, seed=2,
                                                          max_steps=3, flip_probability=0.5)
        for artifact in ('weights.ckwt', 'training_log.csv', 'model.cfg'):
            assert (tmp_path / 'a' / artifact).read_bytes() == (tmp_path / 'b' / artifact).read_bytes()


@pytest.mark.slow
def test_toy_model_fits_twenty_synthetic_images(toy_config, tmp_path):
    SyntheticService(mode='vehicle').make_synthetic(tmp_path, 20, min_points=5, max_points=30, regime='isolated',
                                                    seed=0)
    service = TrainingService(build_model(toy_config), DensityService('fixed', sigma=2))
    examples = service.load_examples(DatasetService(tmp_path, mode='vehicle'))
    assert len(examples) == 20

    log = train(service.model, examples, epochs=25, batch_size=1, state=AdamState(lr=1e-4), max_steps=500)
    assert log.steps == 500
    assert evaluate(service.model, examples, threads=1).mae < 1.0

    windows = np.array([value for _, value in log.losses]).reshape(10, 50).mean(axis=1)
    assert np.polyfit(np.arange(10), windows, 1)[0] < 0
    assert windows[-1] < windows[0]
