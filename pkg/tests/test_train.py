import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtcnet import model as mdl
from mtcnet.data import SynthSceneSpec, synthetic_samples
from mtcnet.errors import NaNLossError
from mtcnet.groundtruth import CountRange
from mtcnet.tensor import Tensor
from mtcnet.train import (DEFAULT_LAMBDAS, TrainConfig, ablation, count_from_density, cross_validate,
                          evaluate, kfold_indices, lambda_sweep, mae, mse_metric, sgd_step, train,
                          write_history_csv)


@pytest.fixture(scope="module")
def tiny():
    return synthetic_samples(SynthSceneSpec(size=64, head_count=(3, 12), seed=5), 3)


def test_metric_examples():
    pairs = [(10, 12), (20, 16)]
    assert mae(pairs) == pytest.approx(3.0)
    assert mse_metric(pairs) == pytest.approx(math.sqrt(10))
    with pytest.raises(ValueError):
        mae([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1e4), st.floats(0, 1e4)), min_size=1, max_size=30))
def test_rmse_dominates_mae(pairs):
    assert mse_metric(pairs) >= mae(pairs) - 1e-9 * max(1.0, mae(pairs))


def test_eval_on_own_ground_truth(tiny):
    pairs = [(count_from_density(s.density), s.count) for s in tiny]
    assert mae(pairs) == pytest.approx(0.0, abs=1e-9)


def test_sgd_step_example():
    params = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    params["w"].grad = np.array([0.5])
    sgd_step(params, 0.1)
    assert params["w"].data[0] == pytest.approx(0.95)
    assert params["w"].grad is None


def test_sgd_step_stateless_and_zero_lr():
    a = {"w": Tensor(np.array([2.0, -1.0]), requires_grad=True)}
    b = {"w": Tensor(np.array([2.0, -1.0]), requires_grad=True)}
    for params in (a, b):
        for _ in range(2):
            params["w"].grad = np.array([0.25, 4.0])
            sgd_step(params, 0.01)
    np.testing.assert_array_equal(a["w"].data, b["w"].data)
    c = {"w": Tensor(np.array([3.0]), requires_grad=True)}
    c["w"].grad = np.array([1.0])
    sgd_step(c, 0.0)
    assert c["w"].data[0] == 3.0


def test_config_validation():
    cfg = TrainConfig.from_dict({"lambda": 0.01, "epochs": 3})
    assert cfg.lam == 0.01 and cfg.to_dict()["lambda"] == 0.01
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"momentum": 0.9})
    for bad in ({"learning_rate": 0}, {"lam": -1.0}, {"batch_size": 0}, {"preset": "nope"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_training_deterministic(tiny, tmp_path):
    cfg = TrainConfig(epochs=1, seed=3)
    a, b = train(tiny, cfg), train(tiny, cfg)
    assert a.history == b.history
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    path = tmp_path / "loss.csv"
    write_history_csv(a.history, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["step", "L1", "L2", "L_total"]
    assert len(rows) == 1 + len(tiny)
    assert float(rows[1][3]) == a.history[0][3]


def test_lambda_zero_keeps_classifier(tiny):
    init = mdl.build("desk", seed=0)
    result = train(tiny, TrainConfig(epochs=1, lam=0.0), params=init.copy())
    for name in init.names_in("classifier"):
        np.testing.assert_array_equal(result.params[name].data, init[name].data)
    assert not np.array_equal(result.params["backend.output.weight"].data,
                              init["backend.output.weight"].data)


def test_aux_only_keeps_density_head(tiny):
    init = mdl.build("desk", seed=0)
    result = train(tiny, TrainConfig(epochs=1), params=init.copy(), mode="aux")
    for name in init.names_in("x1", "backend"):
        np.testing.assert_array_equal(result.params[name].data, init[name].data)
    assert not np.array_equal(result.params["classifier.dense3.weight"].data,
                              init["classifier.dense3.weight"].data)


def test_main_only_keeps_classifier(tiny):
    init = mdl.build("desk", seed=0)
    result = train(tiny, TrainConfig(epochs=1, lam=0.5), params=init.copy(), mode="main")
    for name in init.names_in("classifier"):
        np.testing.assert_array_equal(result.params[name].data, init[name].data)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(tiny):
    with pytest.raises(NaNLossError):
        train(tiny, TrainConfig(epochs=3, learning_rate=10.0))


def test_evaluate_accuracy_field(tiny):
    params = mdl.build("desk")
    report = evaluate(params, tiny, CountRange(0, 20))
    assert 0.0 <= report.accuracy <= 1.0
    assert len(report.pairs) == len(tiny)
    assert report.mse >= report.mae
    assert evaluate(params, tiny).accuracy is None


def test_sweep_and_ablation_shapes(tiny):
    cfg = TrainConfig(epochs=1)
    table = lambda_sweep(tiny[:2], cfg, lambdas=(1.0, 0.0))
    assert [r[0] for r in table.rows] == [1.0, 0.0]
    assert "lambda=1" in table.to_text()
    with pytest.raises(ValueError):
        lambda_sweep(tiny, cfg, lambdas=(1.0,))
    assert DEFAULT_LAMBDAS == (1.0, 1e-1, 1e-2, 1e-3, 1e-4)
    report = ablation(tiny[:2], cfg)
    assert list(report.arms) == ["main_standalone", "aux_standalone", "mtl"]
    assert "reference" in report.to_text()


def test_kfold():
    folds = kfold_indices(10, 3, seed=1)
    assert sorted(np.concatenate(folds).tolist()) == list(range(10))
    with pytest.raises(ValueError):
        kfold_indices(2, 3)


def test_cross_validate_runs(tiny):
    out = cross_validate(tiny, TrainConfig(epochs=1), folds=3)
    assert len(out["folds"]) == 3 and math.isfinite(out["mae"])
