import math
import struct

import numpy as np
import pytest

from pabn.audit import toy_episode
from pabn.autodiff import AdamState, adam_step, backward
from pabn.data import EpisodeSpec, SplitConfig, split_classes
from pabn.model import AlignMode, ArchConfig, episode_forward, episode_loss, init_params
from pabn.train import (
    CheckpointError,
    EvalReport,
    NonFiniteLossError,
    TrainConfig,
    calibrate_batch_norm,
    classify_episode,
    confidence_interval,
    episode_accuracy,
    evaluate,
    format_pm,
    load_checkpoint,
    save_checkpoint,
    train,
    write_log,
)

SMALL = ArchConfig(channels=4, image_size=8, hidden=(8, 4))
SPEC = EpisodeSpec(5, 1, 3)


@pytest.fixture(scope="module")
def split(bench_index):
    return split_classes(bench_index, SplitConfig(30, 10, seed=7))


def small_cfg(**kw):
    base = dict(spec=SPEC, align=AlignMode("loss1", 0.5), n_episodes=3, seed=11, arch=SMALL, log_interval=1)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(lr=0), dict(n_episodes=0), dict(log_interval=0)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.spec.ways, cfg.spec.shots, cfg.spec.queries) == (5, 1, 15)
        assert cfg.lr == 0.001


class TestTrain:
    def test_single_episode(self, split):
        result = train(small_cfg(n_episodes=1), split[0])
        assert result.checkpoint.adam.t == 1
        assert result.checkpoint.episode == 1
        assert len(result.log) == 1

    def test_log_interval(self, split):
        result = train(small_cfg(n_episodes=5, log_interval=2), split[0])
        assert [row[0] for row in result.log] == [2, 4, 5]

    def test_bitwise_determinism(self, split, tmp_path):
        a = train(small_cfg(checkpoint_path=str(tmp_path / "a.pabn")), split[0])
        b = train(small_cfg(checkpoint_path=str(tmp_path / "b.pabn")), split[0])
        assert (tmp_path / "a.pabn").read_bytes() == (tmp_path / "b.pabn").read_bytes()
        assert a.log == b.log

    def test_resume_matches_uninterrupted(self, split, tmp_path):
        whole = train(small_cfg(n_episodes=4), split[0])
        half = train(small_cfg(n_episodes=2), split[0])
        save_checkpoint(half.checkpoint, tmp_path / "half.pabn")
        rest = train(small_cfg(n_episodes=2), split[0], resume=load_checkpoint(tmp_path / "half.pabn"))
        save_checkpoint(whole.checkpoint, tmp_path / "whole.pabn")
        save_checkpoint(rest.checkpoint, tmp_path / "rest.pabn")
        assert (tmp_path / "whole.pabn").read_bytes() == (tmp_path / "rest.pabn").read_bytes()
        assert whole.log[2:] == rest.log

    def test_non_finite_loss_reports_episode(self, split):
        params = init_params(SMALL, np.random.default_rng(0))
        params["comparator.fc3.bias"].data[:] = np.nan
        with pytest.raises(NonFiniteLossError) as info:
            train(small_cfg(), split[0], params=params)
        assert info.value.episode == 1
        assert len(info.value.plan.class_names) == 5

    def test_repeated_episode_loss_drops(self):
        rng = np.random.default_rng(0)
        params = init_params(SMALL, rng)
        ep = toy_episode(rng, ways=3, shots=1, queries=2, size=8)
        state = AdamState()
        align = AlignMode("none")
        losses = []
        for _ in range(201):
            scores, pen = episode_forward(ep, params, align)
            loss = episode_loss(scores, ep.query_labels, pen, align.weight)
            losses.append(loss.item())
            params.zero_grad()
            backward(loss)
            adam_step(params.tensors, params.grads(), state)
        assert losses[200] < losses[0]

    def test_lambda_zero_matches_none(self, split):
        a = train(small_cfg(align=AlignMode("loss2", 0.0)), split[0])
        b = train(small_cfg(align=AlignMode("none")), split[0])
        assert [r[1] for r in a.log] == [r[1] for r in b.log]

    def test_write_log(self, tmp_path):
        write_log([(1, 0.5, 0.0), (2, 0.25, 0.125)], tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines == ["episode,loss,align_penalty", "1,0.5,0.0", "2,0.25,0.125"]


class TestClassify:
    def test_one_hot(self):
        labels = np.array([2, 0, 1, 1])
        scores = np.eye(3)[labels]
        np.testing.assert_array_equal(classify_episode(scores), labels)
        assert episode_accuracy(scores, labels) == 1.0

    def test_constant_scores_pick_first(self):
        np.testing.assert_array_equal(classify_episode(np.full((4, 5), 0.3)), 0)

    def test_against_loop_count(self):
        rng = np.random.default_rng(0)
        scores = rng.uniform(size=(75, 5))
        labels = rng.integers(0, 5, 75)
        correct = 0
        for row, label in zip(scores, labels):
            best = 0
            for k in range(1, 5):
                if row[k] > row[best]:
                    best = k
            correct += best == label
        assert episode_accuracy(scores, labels) == correct / 75


class TestStatistics:
    def test_zero_variance(self):
        assert confidence_interval([0.5, 0.5, 0.5]) == (0.5, 0.0)

    def test_two_episodes(self):
        mean, hw = confidence_interval([0.0, 1.0])
        assert mean == 0.5
        assert abs(hw - 1.96 * math.sqrt(0.5) / math.sqrt(2)) <= 1e-12
        assert abs(hw - 0.98) <= 1e-3

    def test_single_episode_rejected(self):
        with pytest.raises(ValueError):
            confidence_interval([0.4])

    def test_format(self):
        assert format_pm(0.6671, 0.0043) == "66.71±0.43"

    def test_report_dict(self):
        report = EvalReport.from_accuracies([0.2, 0.4], SPEC, seed=3)
        d = report.to_dict()
        assert d["n_episodes"] == 2 and d["seed"] == 3 and d["ci_over"] == "episodes"
        assert d["spec"] == {"ways": 5, "shots": 1, "queries": 3}
        assert d["mean"] == pytest.approx(0.3)


def calibrated(arch, index, seed=0, zero=False):
    params = init_params(arch, np.random.default_rng(seed), zero_comparator=zero)
    calibrate_batch_norm(params, index, SPEC, seed=seed)
    return params


class TestEvaluate:
    def test_untrained_requires_statistics(self, split):
        params = init_params(SMALL, np.random.default_rng(0))
        with pytest.raises(RuntimeError, match="running statistics"):
            evaluate(params, split[1], SPEC, 2)

    def test_rejects_single_episode(self, split):
        with pytest.raises(ValueError, match="n_episodes"):
            evaluate(calibrated(SMALL, split[1]), split[1], SPEC, 1)

    def test_constant_scores_give_chance(self, split):
        report = evaluate(calibrated(SMALL, split[1], zero=True), split[1], EpisodeSpec(5, 1, 15), 1000)
        assert abs(report.mean - 0.2) <= 0.04
        assert all(0 <= a <= 1 for a in report.accuracies)
        assert report.mean == pytest.approx(np.mean(report.accuracies), abs=1e-12)

    def test_half_width_scaling(self):
        base = np.random.default_rng(0).uniform(size=200)
        _, small = confidence_interval(base)
        _, large = confidence_interval(np.tile(base, 4))
        # same spread, four times the episodes: half-width shrinks by ~2
        expected = 2 * math.sqrt((800 - 1) / (4 * (200 - 1)))
        assert small / large == pytest.approx(expected, rel=1e-12)
        assert abs(small / large / 2 - 1) <= 0.15

    def test_deterministic(self, split):
        params = calibrated(SMALL, split[1], seed=2)
        a = evaluate(params, split[1], SPEC, 20, seed=9)
        b = evaluate(params, split[1], SPEC, 20, seed=9)
        assert a.to_dict() == b.to_dict()

    def test_calibration_leaves_parameters(self, split):
        params = init_params(SMALL, np.random.default_rng(0))
        before = {k: t.data.copy() for k, t in params.tensors.items()}
        calibrate_batch_norm(params, split[1], SPEC)
        for k, t in params.tensors.items():
            np.testing.assert_array_equal(t.data, before[k])
        assert all(s.count == 1 for s in params.bn_stats)


class TestCheckpoint:
    @pytest.fixture
    def trained(self, split, tmp_path):
        result = train(small_cfg(n_episodes=2), split[0])
        path = tmp_path / "model.pabn"
        save_checkpoint(result.checkpoint, path)
        return result.checkpoint, path

    def test_round_trip(self, trained):
        ckpt, path = trained
        loaded = load_checkpoint(path)
        assert loaded.arch == ckpt.arch and loaded.episode == ckpt.episode
        assert loaded.rng_state == ckpt.rng_state
        for k, v in ckpt.tensors.items():
            assert loaded.tensors[k].dtype == np.asarray(v).dtype
            assert loaded.tensors[k].tobytes() == np.asarray(v).tobytes()
        assert loaded.adam.t == ckpt.adam.t and loaded.adam.lr == ckpt.adam.lr
        for k in ckpt.adam.m:
            assert loaded.adam.m[k].tobytes() == ckpt.adam.m[k].tobytes()
            assert loaded.adam.v[k].tobytes() == ckpt.adam.v[k].tobytes()

    def test_resave_identical(self, trained, tmp_path):
        _, path = trained
        save_checkpoint(load_checkpoint(path), tmp_path / "again.pabn")
        assert (tmp_path / "again.pabn").read_bytes() == path.read_bytes()

    def test_evaluation_unchanged(self, trained, split):
        ckpt, path = trained
        a = evaluate(ckpt, split[1], SPEC, 10, seed=4)
        b = evaluate(load_checkpoint(path), split[1], SPEC, 10, seed=4)
        assert a.to_dict() == b.to_dict()

    def test_other_spec_accepted(self, trained, split):
        _, path = trained
        report = evaluate(load_checkpoint(path), split[1], EpisodeSpec(5, 5, 15), 2)
        assert report.spec.shots == 5

    def test_bad_magic(self, trained):
        _, path = trained
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(CheckpointError, match="bad magic"):
            load_checkpoint(path)

    def test_version_mismatch(self, trained):
        _, path = trained
        buf = path.read_bytes()
        path.write_bytes(buf[:4] + struct.pack("<I", 99) + buf[8:])
        with pytest.raises(CheckpointError, match="version mismatch"):
            load_checkpoint(path)

    def test_truncated(self, trained):
        _, path = trained
        path.write_bytes(path.read_bytes()[:-40])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes(self, trained):
        _, path = trained
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_tensor_count_mismatch(self, trained):
        _, path = trained
        buf = path.read_bytes()
        (n,) = struct.unpack("<I", buf[8:12])
        off = 12 + n
        (count,) = struct.unpack("<I", buf[off:off + 4])
        path.write_bytes(buf[:off] + struct.pack("<I", count - 1) + buf[off + 4:])
        with pytest.raises(CheckpointError, match="tensor-count mismatch"):
            load_checkpoint(path)

    def test_architecture_mismatch(self, trained):
        _, path = trained
        with pytest.raises(CheckpointError, match="architecture mismatch"):
            load_checkpoint(path, ArchConfig(channels=8, image_size=8, hidden=(8, 4)))
        assert load_checkpoint(path, SMALL).arch == SMALL

    def test_params_restore(self, trained):
        ckpt, _ = trained
        params = ckpt.params()
        for k, t in params.tensors.items():
            np.testing.assert_array_equal(t.data, ckpt.tensors[k])
        assert params.bn_stats[0].count == int(ckpt.tensors["encoder.0.bn.num_batches"])
