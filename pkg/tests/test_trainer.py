"""Target building, optimizer math, batch sampling, short training runs."""

import numpy as np
import pytest

from seedet import tensor as T
from seedet.boxes import assign_label_codes, encode_array
from seedet.config import RunConfig
from seedet.data import NoduleAnnotation, Volume
from seedet.phantom import PhantomConfig, make_phantom_dataset
from seedet.tensor import Tensor
from seedet.trainer import (
    SGD,
    anchors_for_grid,
    annotations_to_boxes,
    build_network,
    build_targets,
    detect_volume,
    load_dataset,
    loss_for_batch,
    restore,
    sample_batch,
    split_outputs,
    train,
)


@pytest.fixture(autouse=True)
def fresh_tape():
    T.clear_tape()
    yield
    T.clear_tape()


def desk(**overrides):
    base = dict(train_patch=32, eval_patch=48, eval_overlap=16, batch_size=2, epochs=1)
    base.update(overrides)
    return RunConfig.desk_scale(**base)


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantoms")
    cfg = PhantomConfig(
        dims=(48, 48, 48), n_volumes=3, diameter_min=5.0, diameter_max=12.0, seed=3
    )
    make_phantom_dataset(cfg, out)
    return out


class TestBuildTargets:
    def test_label_layout_matches_flat_anchor_order(self):
        cfg = desk()
        grid = (4, 4, 4)
        anchors = anchors_for_grid(grid, cfg)
        anns = [NoduleAnnotation("s", 6.0, 10.0, 2.0, 9.0)]
        labels, _ = build_targets(anns, grid, cfg)
        codes = assign_label_codes(
            anchors, annotations_to_boxes(anns), cfg.iou_pos, cfg.iou_neg, True
        )
        flat_want = np.where(codes >= 0, 1, np.where(codes == -1, 0, -1))
        # [A, Z, Y, X] unrolled as (z, y, x, slot) must equal the flat codes
        np.testing.assert_array_equal(labels.transpose(1, 2, 3, 0).ravel(), flat_want)

    def test_positive_anchor_carries_encoded_offsets(self):
        cfg = desk()
        grid = (4, 4, 4)
        anchors = anchors_for_grid(grid, cfg)
        anns = [NoduleAnnotation("s", 6.0, 10.0, 2.0, 9.0)]
        labels, targets = build_targets(anns, grid, cfg)
        codes = assign_label_codes(
            anchors, annotations_to_boxes(anns), cfg.iou_pos, cfg.iou_neg, True
        )
        pos = np.flatnonzero(codes >= 0)
        assert pos.size >= 1
        gt = annotations_to_boxes(anns)
        want = encode_array(gt[codes[pos]], anchors[pos])
        a = len(cfg.anchor_sizes)
        for row, k in enumerate(pos):
            cell, slot = divmod(k, a)
            z, y, x = np.unravel_index(cell, grid)
            np.testing.assert_allclose(targets[slot, :, z, y, x], want[row], atol=1e-12)

    def test_no_annotations_all_negative(self):
        labels, targets = build_targets([], (4, 4, 4), desk())
        assert labels.shape == (3, 4, 4, 4)
        assert targets.shape == (3, 4, 4, 4, 4)
        assert np.all(labels == 0)
        assert np.all(targets == 0.0)

    def test_forced_matching_guarantees_a_positive(self):
        # even a tiny nodule (IoU below the positive threshold everywhere)
        # must claim its single best anchor
        cfg = desk()
        anns = [NoduleAnnotation("s", 17.0, 17.0, 17.0, 4.0)]
        labels, _ = build_targets(anns, (8, 8, 8), cfg)
        assert (labels == 1).sum() >= 1

    def test_forced_matching_can_be_disabled(self):
        cfg = desk(force_closest_match=False)
        anns = [NoduleAnnotation("s", 17.0, 17.0, 17.0, 4.0)]
        labels, _ = build_targets(anns, (8, 8, 8), cfg)
        assert (labels == 1).sum() == 0


class TestSplitOutputs:
    def test_channel_math(self):
        r = np.random.default_rng(0)
        out = Tensor(r.standard_normal((2, 15, 3, 3, 3)))
        prob, deltas = split_outputs(out, 3)
        assert prob.data.shape == (2, 3, 3, 3, 3)
        assert deltas.data.shape == (2, 3, 4, 3, 3, 3)
        for a in range(3):
            np.testing.assert_array_equal(prob.data[:, a], out.data[:, a * 5])
            for k in range(4):
                np.testing.assert_array_equal(
                    deltas.data[:, a, k], out.data[:, a * 5 + 1 + k]
                )

    def test_wrong_channel_count_rejected(self):
        with pytest.raises(ValueError, match="channels"):
            split_outputs(Tensor(np.zeros((1, 14, 2, 2, 2))), 3)


class TestSGD:
    def test_hand_computed_two_steps(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD([("p", p)], lr=0.1, momentum=0.9, weight_decay=0.0)
        p.grad[...] = 0.5
        opt.step()
        np.testing.assert_allclose(p.data, [0.95])  # v=0.5, p=1-0.05
        p.grad[...] = 0.5
        opt.step()
        np.testing.assert_allclose(p.data, [0.855])  # v=0.95, p=0.95-0.095

    def test_weight_decay_enters_the_velocity(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = SGD([("p", p)], lr=0.1, momentum=0.0, weight_decay=0.5)
        p.grad[...] = 0.0
        opt.step()
        # v = 0 + 0 + 0.5*2 = 1, p = 2 - 0.1
        np.testing.assert_allclose(p.data, [1.9])

    def test_velocity_state_round_trip(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        a = SGD([("p", p)], lr=0.1, momentum=0.9)
        p.grad[...] = 1.0
        a.step()
        b = SGD([("p", p)], lr=0.1, momentum=0.9)
        b.load_state_dict(a.state_dict())
        np.testing.assert_array_equal(b.velocity["p"], a.velocity["p"])


class TestDataset:
    def test_load_preprocesses_and_groups(self, phantom_dir):
        cfg = desk()
        records = load_dataset(phantom_dir, cfg)
        assert [r.volume.scan_id for r in records] == ["scan000", "scan001", "scan002"]
        for rec in records:
            assert rec.volume.data.dtype == np.float32
            assert rec.volume.data.min() >= 0.0 and rec.volume.data.max() <= 1.0
            for a in rec.annotations:
                assert a.scan_id == rec.volume.scan_id

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope", desk())

    def test_empty_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="no .vol3"):
            load_dataset(tmp_path, desk())


class TestSampleBatch:
    def test_shapes(self, phantom_dir):
        cfg = desk()
        records = load_dataset(phantom_dir, cfg)
        x, labels, targets = sample_batch(records, 0, cfg)
        assert x.shape == (2, 1, 32, 32, 32)
        assert labels.shape == (2, 3, 8, 8, 8)
        assert targets.shape == (2, 3, 4, 8, 8, 8)
        assert x.dtype == np.float32

    def test_deterministic_per_step(self, phantom_dir):
        cfg = desk()
        records = load_dataset(phantom_dir, cfg)
        a = sample_batch(records, 5, cfg)
        b = sample_batch(records, 5, cfg)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)

    def test_steps_differ(self, phantom_dir):
        cfg = desk()
        records = load_dataset(phantom_dir, cfg)
        a = sample_batch(records, 0, cfg)
        b = sample_batch(records, 1, cfg)
        assert not np.array_equal(a[0], b[0])

    def test_nodule_bias_yields_positives(self, phantom_dir):
        cfg = desk(nodule_patch_prob=1.0, augment_enabled=False)
        records = load_dataset(phantom_dir, cfg)
        pos = 0
        for step in range(5):
            _, labels, _ = sample_batch(records, step, cfg)
            pos += int((labels == 1).sum())
        assert pos >= 5  # every patch contains a nodule, forced match fires


class TestLossForBatch:
    def test_gradients_reach_the_stem(self, phantom_dir):
        cfg = desk(batch_size=1)
        records = load_dataset(phantom_dir, cfg)
        net = build_network(cfg.network, seed=0, dtype=np.float32)
        net.train()
        x, labels, targets = sample_batch(records, 0, cfg)
        loss, breakdown = loss_for_batch(net, x, labels, targets, cfg, 0)
        assert np.isfinite(breakdown.total)
        T.backward(loss)
        assert np.abs(net.stem.weight.grad).sum() > 0
        assert np.abs(net.head.bias.grad).sum() > 0


class TestTrainRuns:
    def test_short_run_writes_artifacts(self, phantom_dir, tmp_path):
        cfg = desk(epochs=1, checkpoint_every=1)
        ckpt = tmp_path / "model.ckpt"
        log = tmp_path / "loss.csv"
        result = train(cfg, phantom_dir, str(ckpt), str(log))
        assert result.steps == 2  # ceil(3/2) * 1 epoch
        assert ckpt.exists()
        assert (tmp_path / "model.ckpt.step1").exists()
        lines = log.read_text().strip().splitlines()
        assert lines[0] == "step,cls,reg,total,n_pos,n_neg"
        assert len(lines) == 3
        for (step, b), line in zip(result.loss_log, lines[1:]):
            cols = line.split(",")
            assert int(cols[0]) == step
            assert float(cols[3]) == b.total
        assert np.isfinite(result.final_loss)

    def test_two_runs_bit_identical(self, phantom_dir, tmp_path):
        cfg = desk(epochs=1)
        outs = []
        for tag in ("a", "b"):
            ckpt = tmp_path / f"{tag}.ckpt"
            log = tmp_path / f"{tag}.csv"
            train(cfg, phantom_dir, str(ckpt), str(log))
            outs.append((ckpt.read_bytes(), log.read_text()))
        assert outs[0][0] == outs[1][0]
        assert outs[0][1] == outs[1][1]

    def test_restore_round_trip(self, phantom_dir, tmp_path):
        cfg = desk(epochs=1)
        ckpt = tmp_path / "model.ckpt"
        train(cfg, phantom_dir, str(ckpt))
        net, cfg_back, ck = restore(ckpt)
        assert cfg_back == cfg
        assert ck.step == 2
        assert ck.meta["rng_state"]["scheme"] == "derived-streams"
        state = net.state_dict()
        for name, arr in ck.params.items():
            np.testing.assert_array_equal(state[name], arr.astype(state[name].dtype))

    def test_max_steps_caps_training(self, phantom_dir, tmp_path):
        cfg = desk(epochs=50)
        result = train(cfg, phantom_dir, max_steps=1)
        assert result.steps == 1


class TestDetectVolume:
    def test_candidates_are_valid(self, phantom_dir):
        cfg = desk(prob_threshold=0.0, max_candidates_per_scan=20)
        records = load_dataset(phantom_dir, cfg)
        net = build_network(cfg.network, seed=0, dtype=np.float32)
        # push batch-norm buffers off their init so eval mode is exercised
        net.train()
        x, _, _ = sample_batch(records, 0, cfg)
        with T.no_grad():
            net.forward(Tensor(x))
        T.clear_tape()
        cands = detect_volume(net, records[0].volume, cfg, preprocessed=True)
        assert 0 < len(cands) <= 20
        probs = [c.probability for c in cands]
        assert probs == sorted(probs, reverse=True)
        for c in cands:
            assert c.scan_id == "scan000"
            assert 0 <= c.x <= 47 and 0 <= c.y <= 47 and 0 <= c.z <= 47

    def test_high_threshold_gives_empty_list(self, phantom_dir):
        cfg = desk(prob_threshold=1.1)
        records = load_dataset(phantom_dir, cfg)
        net = build_network(cfg.network, seed=0, dtype=np.float32)
        assert detect_volume(net, records[0].volume, cfg, preprocessed=True) == []
