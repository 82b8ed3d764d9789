import numpy as np
import pytest

from sebre.geometry import (
    GeometryError,
    boxes_from_masks,
    decode_deltas,
    denormalize_boxes,
    encode_deltas,
    generate_anchors,
    iou_matrix,
    nms,
    sanitize_boxes,
)


def brute_force_iou(a, b):
    """All-pairs IoU by direct area arithmetic, one pair at a time."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    out = np.zeros((len(a), len(b)))
    for i, (ay1, ax1, ay2, ax2) in enumerate(a):
        for j, (by1, bx1, by2, bx2) in enumerate(b):
            ih = max(0.0, min(ay2, by2) - max(ay1, by1))
            iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
            inter = ih * iw
            union = (ay2 - ay1) * (ax2 - ax1) + (by2 - by1) * (bx2 - bx1) - inter
            out[i, j] = inter / union if union > 0 else 0.0
    return out


def brute_force_nms(boxes, scores, threshold, cap=None):
    """Exhaustive greedy suppression: repeatedly take the best live box."""
    boxes = np.asarray(boxes, dtype=float)
    scores = np.asarray(scores, dtype=float)
    alive = list(range(len(boxes)))
    keep = []
    while alive and (cap is None or len(keep) < cap):
        best = min(alive, key=lambda i: (-scores[i], i))
        keep.append(best)
        alive = [
            i
            for i in alive
            if i != best and brute_force_iou(boxes[best], boxes[i])[0, 0] <= threshold
        ]
    return keep


def random_boxes(rng, n, extent=100.0):
    y1 = rng.uniform(0, extent * 0.8, n)
    x1 = rng.uniform(0, extent * 0.8, n)
    h = rng.uniform(1.0, extent * 0.5, n)
    w = rng.uniform(1.0, extent * 0.5, n)
    return np.stack([y1, x1, y1 + h, x1 + w], axis=1)


class TestIou:
    def test_identical(self):
        assert iou_matrix([[0, 0, 10, 10]], [[0, 0, 10, 10]])[0, 0] == 1.0

    def test_disjoint(self):
        assert iou_matrix([[0, 0, 10, 10]], [[20, 20, 30, 30]])[0, 0] == 0.0

    def test_partial_overlap(self):
        # inter 50, union 150
        got = iou_matrix([[0, 0, 10, 10]], [[5, 0, 15, 10]])[0, 0]
        assert got == pytest.approx(1.0 / 3.0, abs=1e-4)

    def test_zero_area_union_convention(self):
        assert iou_matrix([[0, 0, 0, 0]], [[0, 0, 0, 0]])[0, 0] == 0.0

    def test_malformed_box_rejected(self):
        with pytest.raises(GeometryError):
            iou_matrix([[0, 0, -1, 10]], [[0, 0, 10, 10]])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        a = random_boxes(rng, 7)
        b = random_boxes(rng, 5)
        np.testing.assert_allclose(iou_matrix(a, b), brute_force_iou(a, b), atol=1e-12)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(1)
        a = random_boxes(rng, 10)
        m = iou_matrix(a, a)
        np.testing.assert_allclose(m, m.T)
        assert np.all(m >= 0) and np.all(m <= 1)
        np.testing.assert_allclose(np.diag(m), 1.0)


class TestDeltas:
    def test_identity(self):
        box = np.array([[3.0, 4.0, 13.0, 24.0]])
        np.testing.assert_allclose(encode_deltas(box, box), 0.0, atol=1e-12)

    def test_hand_evaluated(self):
        got = encode_deltas([[0, 0, 10, 10]], [[0, 0, 10, 20]])[0]
        np.testing.assert_allclose(got, [0.0, 0.5, 0.0, np.log(2)], atol=1e-12)

    def test_decode_inverse_of_encode_example(self):
        got = decode_deltas([[0, 0, 10, 10]], [[0.0, 0.5, 0.0, np.log(2)]])[0]
        np.testing.assert_allclose(got, [0, 0, 10, 20], atol=1e-5)

    def test_zero_delta_is_identity(self):
        box = np.array([[1.0, 2.0, 7.0, 11.0]])
        np.testing.assert_allclose(decode_deltas(box, np.zeros((1, 4))), box)

    def test_round_trip_random_pairs(self):
        rng = np.random.default_rng(7)
        anchors = random_boxes(rng, 1000)
        targets = random_boxes(rng, 1000)
        decoded = decode_deltas(anchors, encode_deltas(anchors, targets))
        rel = np.abs(decoded - targets) / np.maximum(np.abs(targets), 1.0)
        assert rel.max() <= 1e-5

    def test_clamp_bounds_width(self):
        anchor = np.array([[0, 0, 10, 10]])
        wide = decode_deltas(anchor, [[0, 0, 0, 50.0]])[0]
        assert wide[3] - wide[1] <= 10.0 * 1000.0 / 16.0 + 1e-6

    def test_zero_extent_anchor_rejected(self):
        with pytest.raises(GeometryError):
            encode_deltas([[0, 0, 0, 10]], [[0, 0, 10, 10]])
        with pytest.raises(GeometryError):
            decode_deltas([[0, 0, 0, 10]], [[0, 0, 0, 0]])


class TestNms:
    def test_single_box_kept(self):
        keep = nms([[0, 0, 10, 10]], [0.7], 0.5)
        assert keep.tolist() == [0]

    def test_duplicate_suppressed(self):
        keep = nms([[0, 0, 10, 10], [0, 0, 10, 10]], [0.9, 0.8], 0.5)
        assert keep.tolist() == [0]

    def test_empty_input(self):
        assert nms(np.zeros((0, 4)), [], 0.5).size == 0

    def test_cap(self):
        boxes = [[i * 20, 0, i * 20 + 10, 10] for i in range(5)]
        keep = nms(boxes, [0.9, 0.8, 0.7, 0.6, 0.5], 0.5, cap=3)
        assert keep.tolist() == [0, 1, 2]

    def test_tie_broken_by_lower_index(self):
        boxes = [[0, 0, 10, 10], [100, 100, 110, 110]]
        keep = nms(boxes, [0.5, 0.5], 0.5)
        assert keep.tolist() == [0, 1]

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(42)
        for trial in range(1000):
            n = int(rng.integers(1, 13))
            boxes = random_boxes(rng, n, extent=40.0)
            scores = rng.uniform(0, 1, n)
            threshold = float(rng.uniform(0.1, 0.9))
            got = nms(boxes, scores, threshold).tolist()
            want = brute_force_nms(boxes, scores, threshold)
            assert got == want, f"trial {trial}: {got} != {want}"


class TestAnchors:
    def test_count_formula(self):
        anchors = generate_anchors([(4, 4)], [8], [32], [0.5, 1.0, 2.0])
        assert len(anchors) == 4 * 4 * 3

    def test_multi_level_count(self):
        shapes = [(16, 16), (8, 8), (4, 4)]
        anchors = generate_anchors(shapes, [4, 8, 16], [16, 32, 64], [0.5, 1.0])
        assert len(anchors) == sum(h * w * 2 for h, w in shapes)
        assert np.bincount(anchors.level).tolist() == [512, 128, 32]

    def test_square_anchor(self):
        anchors = generate_anchors([(1, 1)], [16], [32], [1.0])
        box = anchors.boxes[0]
        assert box[2] - box[0] == pytest.approx(32.0)
        assert box[3] - box[1] == pytest.approx(32.0)
        # centered on the cell center (0.5 * stride)
        assert (box[0] + box[2]) / 2 == pytest.approx(8.0)

    def test_area_preserving_aspect(self):
        anchors = generate_anchors([(1, 1)], [16], [32], [2.0])
        h = anchors.boxes[0, 2] - anchors.boxes[0, 0]
        w = anchors.boxes[0, 3] - anchors.boxes[0, 1]
        assert h * w == pytest.approx(1024.0, rel=1e-4)
        assert h / w == pytest.approx(2.0, rel=1e-4)

    def test_ordering_level_major_row_major_ratio_minor(self):
        anchors = generate_anchors([(2, 2)], [10], [10], [1.0, 4.0])
        # first two anchors share cell (0, 0) and differ only in ratio
        c0 = (anchors.boxes[0][:2] + anchors.boxes[0][2:]) / 2
        c1 = (anchors.boxes[1][:2] + anchors.boxes[1][2:]) / 2
        np.testing.assert_allclose(c0, c1)
        # third anchor moves one cell to the right (x grows first, row-major)
        c2 = (anchors.boxes[2][:2] + anchors.boxes[2][2:]) / 2
        assert c2[1] > c0[1] and c2[0] == pytest.approx(c0[0])

    def test_mismatched_levels_rejected(self):
        with pytest.raises(GeometryError):
            generate_anchors([(4, 4)], [8, 16], [32], [1.0])


class TestSanitize:
    def test_interior_box_unchanged(self):
        box = np.array([[1.0, 2.0, 5.0, 6.0]])
        np.testing.assert_allclose(sanitize_boxes(box, 10, 10), box)

    def test_clamp(self):
        got = sanitize_boxes([[-5, -5, 20, 20]], 10, 10)[0]
        np.testing.assert_allclose(got, [0, 0, 10, 10])

    def test_normalize(self):
        got = sanitize_boxes([[0, 0, 10, 10]], 20, 40, normalize=True)[0]
        np.testing.assert_allclose(got, [0, 0, 0.5, 0.25])

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        boxes = random_boxes(rng, 20, extent=30.0) - 5.0
        once = sanitize_boxes(boxes, 20, 20)
        twice = sanitize_boxes(once, 20, 20)
        np.testing.assert_array_equal(once, twice)
        normed = sanitize_boxes(boxes, 20, 20, normalize=True)
        np.testing.assert_array_equal(
            normed, sanitize_boxes(denormalize_boxes(normed, 20, 20), 20, 20, normalize=True)
        )

    def test_bad_extent_rejected(self):
        with pytest.raises(GeometryError):
            sanitize_boxes([[0, 0, 1, 1]], 0, 10)


class TestBoxesFromMasks:
    def test_tight_box(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:5, 3:7] = True
        np.testing.assert_array_equal(boxes_from_masks(mask[None])[0], [2, 3, 5, 7])

    def test_single_pixel(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[1, 2] = True
        np.testing.assert_array_equal(boxes_from_masks(mask[None])[0], [1, 2, 2, 3])

    def test_empty_mask(self):
        np.testing.assert_array_equal(
            boxes_from_masks(np.zeros((1, 4, 4), dtype=bool))[0], [0, 0, 0, 0]
        )
