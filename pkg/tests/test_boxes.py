"""Box geometry, anchor grids, assignment and NMS."""

import numpy as np
import pytest

from seedet.boxes import (
    AnchorLabel,
    Box3,
    assign_label_codes,
    assign_labels,
    boxes_to_array,
    decode_array,
    decode_box,
    encode_array,
    encode_box,
    generate_anchor_array,
    generate_anchors,
    iou,
    iou_matrix,
    nms,
    nms_array,
)

from reference_impls import cube_iou_reference, nms_reference


class TestIoU:
    def test_disjoint_boxes(self):
        assert iou(Box3(0, 0, 0, 1), Box3(10, 0, 0, 1)) == 0.0

    def test_identical_boxes(self):
        b = Box3(3.0, 4.0, 5.0, 2.5)
        assert iou(b, b) == 1.0

    def test_concentric_half_side_is_exactly_one_eighth(self):
        # sides 5 and 10: intersection 125, union 1000
        assert iou(Box3(0, 0, 0, 2.5), Box3(0, 0, 0, 5.0)) == 0.125

    def test_symmetry_and_range(self):
        r = np.random.default_rng(0)
        for _ in range(200):
            a = Box3(*r.uniform(0, 20, 3), r.uniform(0.5, 6))
            b = Box3(*r.uniform(0, 20, 3), r.uniform(0.5, 6))
            v = iou(a, b)
            assert 0.0 <= v <= 1.0
            assert v == iou(b, a)

    def test_matches_interval_reference(self):
        r = np.random.default_rng(1)
        for _ in range(300):
            a = np.append(r.uniform(0, 15, 3), r.uniform(0.5, 5))
            b = np.append(r.uniform(0, 15, 3), r.uniform(0.5, 5))
            got = iou_matrix(a, b)[0, 0]
            want = cube_iou_reference(a, b)
            assert abs(got - want) < 1e-12

    def test_touching_faces_share_no_volume(self):
        assert iou(Box3(0, 0, 0, 1), Box3(2, 0, 0, 1)) == 0.0

    def test_radius_must_be_positive(self):
        with pytest.raises(ValueError):
            Box3(0, 0, 0, 0.0)


class TestEncodeDecode:
    def test_round_trip_1000_random_pairs(self):
        r = np.random.default_rng(7)
        worst = 0.0
        for _ in range(1000):
            anchor = Box3(*r.uniform(5, 120, 3), r.uniform(1.0, 15.0))
            gt = Box3(*r.uniform(5, 120, 3), r.uniform(1.0, 15.0))
            rec = decode_box(anchor, encode_box(gt, anchor))
            worst = max(
                worst,
                abs(rec.cx - gt.cx),
                abs(rec.cy - gt.cy),
                abs(rec.cz - gt.cz),
                abs(rec.r - gt.r),
            )
        assert worst < 1e-9

    def test_zero_offsets_reproduce_the_anchor(self):
        a = Box3(10, 20, 30, 4)
        d = decode_box(a, (0.0, 0.0, 0.0, 0.0))
        assert (d.cx, d.cy, d.cz, d.r) == (10, 20, 30, 4)

    def test_known_encoding(self):
        # gt shifted by one radius in x, double the size
        a = Box3(10.0, 10.0, 10.0, 2.0)
        g = Box3(12.0, 10.0, 10.0, 4.0)
        dx, dy, dz, dr = encode_box(g, a)
        assert (dx, dy, dz) == (1.0, 0.0, 0.0)
        assert abs(dr - np.log(2.0)) < 1e-15

    def test_array_paths_match_scalar_paths(self):
        r = np.random.default_rng(8)
        anchors = np.column_stack([r.uniform(5, 100, (50, 3)), r.uniform(1, 10, 50)])
        gts = np.column_stack([r.uniform(5, 100, (50, 3)), r.uniform(1, 10, 50)])
        enc = encode_array(gts, anchors)
        for i in range(50):
            want = encode_box(Box3(*gts[i]), Box3(*anchors[i]))
            np.testing.assert_allclose(enc[i], want, rtol=1e-14)
        dec = decode_array(anchors, enc)
        np.testing.assert_allclose(dec, gts, rtol=1e-12)


class TestAnchors:
    def test_grid_order_slot_fastest(self):
        arr = generate_anchor_array((2, 2, 2), 4, [5.0, 10.0])
        assert arr.shape == (16, 4)
        # first two anchors: same cell, two sizes
        np.testing.assert_allclose(arr[0], [2.0, 2.0, 2.0, 2.5])
        np.testing.assert_allclose(arr[1], [2.0, 2.0, 2.0, 5.0])
        # third anchor: x advanced by one stride cell
        np.testing.assert_allclose(arr[2], [6.0, 2.0, 2.0, 2.5])
        # index ((z*Gy + y)*Gx + x)*A + slot for (z=1, y=0, x=1, slot=1)
        k = ((1 * 2 + 0) * 2 + 1) * 2 + 1
        np.testing.assert_allclose(arr[k], [6.0, 2.0, 6.0, 5.0])

    def test_anchor_centers_sit_at_cell_centers(self):
        arr = generate_anchor_array((3, 3, 3), 4, [10.0])
        cx = np.unique(arr[:, 0])
        np.testing.assert_allclose(cx, [2.0, 6.0, 10.0])

    def test_box_list_matches_array(self):
        boxes = generate_anchors((2, 3, 2), 4, [5.0, 10.0, 20.0])
        arr = generate_anchor_array((2, 3, 2), 4, [5.0, 10.0, 20.0])
        assert len(boxes) == arr.shape[0] == 2 * 3 * 2 * 3
        got = boxes_to_array(boxes)
        np.testing.assert_array_equal(got, arr)


class TestAssignment:
    def test_thresholds_partition_anchors(self):
        anchors = generate_anchor_array((8, 8, 8), 4, [5.0, 10.0, 20.0])
        gts = np.array([[16.0, 16.0, 16.0, 5.0]])
        codes = assign_label_codes(anchors, gts, 0.5, 0.02, force_closest=False)
        ious = iou_matrix(anchors, gts)[:, 0]
        np.testing.assert_array_equal(codes == 0, ious > 0.5)
        np.testing.assert_array_equal(codes == -1, ious < 0.02)
        np.testing.assert_array_equal(codes == -2, (ious >= 0.02) & (ious <= 0.5))

    def test_forced_match_rescues_unmatched_gt(self):
        anchors = generate_anchor_array((8, 8, 8), 4, [5.0, 10.0, 20.0])
        # a nodule off every anchor center, small enough that no anchor
        # clears the positive threshold
        gts = np.array([[13.8, 14.2, 13.9, 1.6]])
        plain = assign_label_codes(anchors, gts, 0.5, 0.02, force_closest=False)
        assert (plain >= 0).sum() == 0
        forced = assign_label_codes(anchors, gts, 0.5, 0.02, force_closest=True)
        assert (forced >= 0).sum() == 1
        winner = int(np.flatnonzero(forced >= 0)[0])
        ious = iou_matrix(anchors, gts)[:, 0]
        assert ious[winner] == ious.max()

    def test_forced_match_collision_goes_to_next_best(self):
        # two gts whose best anchor is the same one
        anchors = np.array(
            [[10.0, 10.0, 10.0, 3.0], [14.0, 10.0, 10.0, 3.0], [40.0, 40.0, 40.0, 3.0]]
        )
        gts = np.array([[11.0, 10.0, 10.0, 3.0], [11.5, 10.0, 10.0, 3.0]])
        codes = assign_label_codes(anchors, gts, 0.9, 0.02, force_closest=True)
        # gt 0 takes anchor 0 (its argmax); gt 1 must fall to anchor 1
        assert codes[0] == 0
        assert codes[1] == 1

    def test_no_gts_makes_everything_negative(self):
        anchors = generate_anchor_array((4, 4, 4), 4, [5.0])
        codes = assign_label_codes(anchors, np.zeros((0, 4)), 0.5, 0.02)
        assert (codes == -1).all()

    def test_label_objects_mirror_codes(self):
        anchors = generate_anchors((4, 4, 4), 4, [5.0, 10.0])
        gts = [Box3(8.0, 8.0, 8.0, 5.0)]
        labels = assign_labels(anchors, gts)
        codes = assign_label_codes(boxes_to_array(anchors), boxes_to_array(gts))
        for lab, code in zip(labels, codes):
            if code >= 0:
                assert lab == AnchorLabel("positive", int(code))
            elif code == -1:
                assert lab.kind == "negative"
            else:
                assert lab.kind == "ignored"


class TestNMS:
    def test_matches_exhaustive_reference_on_200_scenes(self):
        r = np.random.default_rng(2024)
        for scene in range(200):
            n = int(r.integers(1, 21))
            boxes = np.column_stack(
                [r.uniform(0, 40, (n, 3)), r.uniform(1.0, 8.0, n)]
            )
            probs = r.uniform(0.01, 1.0, n)
            if scene % 5 == 0 and n >= 3:
                probs[2] = probs[0]  # exercise the tie rule
            got = nms_array(boxes, probs, 0.1)
            want = nms_reference(boxes, probs, 0.1)
            assert got == want, f"scene {scene}: {got} != {want}"

    def test_keeps_highest_probability_of_overlapping_pair(self):
        a = Box3(10, 10, 10, 3)
        b = Box3(11, 10, 10, 3)
        kept = nms([a, b], [0.4, 0.9], 0.1)
        assert kept == [1]

    def test_non_overlapping_all_survive_sorted_by_prob(self):
        boxes = [Box3(10, 10, 10, 2), Box3(40, 40, 40, 2), Box3(70, 70, 70, 2)]
        kept = nms(boxes, [0.2, 0.9, 0.5], 0.1)
        assert kept == [1, 2, 0]

    def test_tie_prefers_lower_index(self):
        a = Box3(10, 10, 10, 3)
        b = Box3(10.5, 10, 10, 3)
        kept = nms([a, b], [0.7, 0.7], 0.1)
        assert kept == [0]

    def test_empty_input(self):
        assert nms([], [], 0.1) == []
