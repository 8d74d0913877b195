import numpy as np
import pytest

from geossl import experiments as ex
from geossl.synthdata import DatasetSpec, gen_dataset


@pytest.fixture(scope="module")
def tiny():
    spec = DatasetSpec(train_per_class=1, test_per_class=1, points=64, dense_points=256,
                       transfer=False)
    return gen_dataset(spec)[:2]


def test_summarize_mean_and_sample_std():
    rows = [{"g": "a", "v": 1.0}, {"g": "b", "v": 5.0}, {"g": "a", "v": 3.0}]
    out = ex.summarize(rows, ("g",), "v")
    assert [r["g"] for r in out] == ["a", "b"]
    assert out[0]["mean"] == 2.0 and out[0]["std"] == pytest.approx(np.sqrt(2.0))
    assert out[1]["n"] == 1 and out[1]["std"] == 0.0


def test_noisy_copy_seeded(tiny):
    _, test = tiny
    a = ex.noisy_copy(test, 0.01, 3)
    b = ex.noisy_copy(test, 0.01, 3)
    c = ex.noisy_copy(test, 0.01, 4)
    np.testing.assert_array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)
    assert np.std(a.points - test.points) == pytest.approx(0.01, rel=0.2)
    np.testing.assert_array_equal(ex.noisy_copy(test, 0.0, 3).points, test.points)
    # labels stay those of the clean surface
    assert a.labels is test.labels


def _square(x):
    return x * x


def test_run_cells_keeps_order_with_workers():
    assert ex.run_cells(_square, [3, 1, 2], workers=2) == [9, 1, 4]
    assert ex.run_cells(_square, [3, 1, 2]) == [9, 1, 4]


def test_noise_rejects_bad_inputs(tiny):
    from geossl.config import ModelConfig, TrainConfig
    train, test = tiny
    cfg, tcfg = ModelConfig(), TrainConfig(epochs=1)
    with pytest.raises(ValueError, match="sigma"):
        ex.noise_robustness(train, test, cfg, tcfg, sigma=-1.0)
    with pytest.raises(ValueError, match="geopl_transfer"):
        ex.noise_robustness(train, test, cfg, tcfg, gt_source="geopl_transfer")
