import csv
import json

import numpy as np
import pytest

from liteseg.data import SyntheticShapesDataset
from liteseg.model import PRESETS, build_model
from liteseg.train import TrainConfig, TrainingDivergedError, evaluate_dataset, make_dataset, train, write_curve

SMALL = TrainConfig(batch_size=2)


@pytest.fixture(scope="module")
def dataset():
    return SyntheticShapesDataset(seed=0, num_samples=16)


def _run(dataset, iters, cfg=SMALL, seed=0):
    model = build_model(cfg.model, seed=seed)
    return train(model, dataset, iters, cfg, seed=seed)


class TestTrain:
    def test_zero_iterations_leave_model_unchanged(self, dataset):
        fresh = build_model(PRESETS["tiny"], seed=0).state_dict()
        result = _run(dataset, 0)
        assert result.curve == []
        for k, v in result.model.state_dict().items():
            assert v.tobytes() == fresh[k].tobytes()

    def test_same_seed_reproduces_bitwise(self, dataset):
        a, b = _run(dataset, 4), _run(dataset, 4)
        assert [p.loss for p in a.curve] == [p.loss for p in b.curve]
        for (k, va), vb in zip(a.model.state_dict().items(), b.model.state_dict().values()):
            assert va.tobytes() == vb.tobytes(), k

    def test_worker_count_does_not_change_results(self, dataset, monkeypatch):
        monkeypatch.delenv("LITESEG_THREADS", raising=False)
        one = _run(dataset, 3, TrainConfig(batch_size=4, workers=1))
        many = _run(dataset, 3, TrainConfig(batch_size=4, workers=4))
        assert [p.loss for p in one.curve] == [p.loss for p in many.curve]

    def test_different_seed_differs(self, dataset):
        assert [p.loss for p in _run(dataset, 2).curve] != [p.loss for p in _run(dataset, 2, seed=1).curve]

    def test_curve_follows_schedule(self, dataset):
        cfg = TrainConfig(batch_size=2, warmup_iters=2, base_lr=0.01)
        result = _run(dataset, 5, cfg)
        assert [p.iteration for p in result.curve] == list(range(5))
        assert result.curve[0].lr == pytest.approx(0.001)
        assert result.curve[2].lr == pytest.approx(0.01)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_iteration(self, dataset):
        cfg = TrainConfig(batch_size=2, base_lr=1e12, warmup_iters=0)
        with pytest.raises(TrainingDivergedError) as info:
            _run(dataset, 20, cfg)
        assert info.value.iteration >= 1

    def test_on_step_callback(self, dataset):
        seen = []
        train(build_model(PRESETS["tiny"]), dataset, 2, SMALL, on_step=seen.append)
        assert [p.iteration for p in seen] == [0, 1]


class TestTrainConfig:
    def test_defaults_match_desk_setup(self):
        cfg = TrainConfig()
        assert (cfg.iters, cfg.batch_size, cfg.seed) == (500, 8, 0)
        assert cfg.model == PRESETS["tiny"]
        assert cfg.schedule().warmup_iters == 5

    def test_json_round_trip(self, tmp_path):
        cfg = TrainConfig(iters=20, batch_size=3, model=PRESETS["tiny"])
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert TrainConfig.load(path) == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"iterations": 5})

    def test_nested_sections(self):
        cfg = TrainConfig.from_dict({"model": {"preset": "tiny", "attention": "none"},
                                     "ohem": {"prob_threshold": 0.5}, "augment": {"crop": [32, 64]}})
        assert cfg.model.attention.value == "none"
        assert cfg.ohem.prob_threshold == 0.5
        assert cfg.augment.crop == (32, 64)

    def test_dataset_kinds(self, tmp_path):
        assert len(make_dataset({"kind": "synthetic", "num_samples": 3})) == 3
        with pytest.raises(ValueError):
            make_dataset({"kind": "video"})


def test_curve_csv(tmp_path, dataset):
    result = _run(dataset, 3)
    path = tmp_path / "curve.csv"
    write_curve(path, result.curve)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["iter", "lr", "loss"]
    assert [float(r[2]) for r in rows[1:]] == [p.loss for p in result.curve]


def test_evaluate_dataset_counts_every_pixel(dataset):
    cm = evaluate_dataset(build_model(PRESETS["tiny"]), dataset, 4)
    assert cm.total == len(dataset) * 64 * 128
    assert np.all(cm.counts >= 0)
