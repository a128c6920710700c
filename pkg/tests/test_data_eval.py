"""Dataset generation/augmentation invariants and AP evaluation tests."""

import numpy as np
import pytest

from agglodet.anchors import Box
from agglodet.data import (DataConfig, Sample, augment, generate_dataset,
                           load_dataset, write_dataset)
from agglodet.errors import ConfigurationError
from agglodet.evaluate import PRCurve, evaluate_ap, write_pr_curve
from agglodet.images import read_ppm, write_ppm
from agglodet.inference import DetectionSet
from agglodet.tensor import Tensor


def dset(boxes, scores, image_id=0):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return DetectionSet(boxes[order], scores[order], image_id)


def sample_with(faces, buckets=None, image_id=0, size=64):
    faces = [Box(*f) if not isinstance(f, Box) else f for f in faces]
    cfg = DataConfig(image_size=size)
    if buckets is None:
        buckets = [cfg.bucket_of(f.side) for f in faces]
    return Sample(Tensor(np.zeros((3, size, size), dtype=np.float32)),
                  faces, buckets, image_id)


def ap_reference(dets_per_image, gts_per_image, iou_thr=0.5):
    """Loop-based AP oracle: explicit greedy matching plus direct area
    computation under the monotone envelope."""
    def iou(a, b):
        iw = min(a[2], b[2]) - max(a[0], b[0])
        ih = min(a[3], b[3]) - max(a[1], b[1])
        if iw <= 0 or ih <= 0:
            return 0.0
        inter = iw * ih
        return inter / ((a[2] - a[0]) * (a[3] - a[1]) +
                        (b[2] - b[0]) * (b[3] - b[1]) - inter)

    pool = []
    for img, (boxes, scores) in enumerate(dets_per_image):
        for k, (b, s) in enumerate(zip(boxes, scores)):
            pool.append((s, img, k, b))
    pool.sort(key=lambda t: (-t[0], t[1], t[2]))
    matched = {img: [False] * len(g) for img, g in enumerate(gts_per_image)}
    npos = sum(len(g) for g in gts_per_image)
    tp = fp = 0
    recalls, precisions = [], []
    for s, img, k, box in pool:
        gts = gts_per_image[img]
        best, best_iou = -1, iou_thr
        for gi, g in enumerate(gts):
            o = iou(box, g)
            if o >= best_iou and (best == -1 or o > best_iou):
                best, best_iou = gi, o
        if best >= 0 and not matched[img][best]:
            matched[img][best] = True
            tp += 1
        else:
            fp += 1
        recalls.append(tp / npos)
        precisions.append(tp / (tp + fp))
    # direct area under the envelope
    area = 0.0
    prev_r = 0.0
    for i, r in enumerate(recalls):
        if r > prev_r:
            env = max(precisions[i:])
            area += (r - prev_r) * env
            prev_r = r
    return area


class TestGeneration:
    def test_same_seed_identical(self):
        a = generate_dataset(11, 4)
        b = generate_dataset(11, 4)
        for sa, sb in zip(a, b):
            assert sa.image.data.tobytes() == sb.image.data.tobytes()
            assert [f.as_array().tolist() for f in sa.faces] == \
                   [f.as_array().tolist() for f in sb.faces]

    def test_different_seed_differs(self):
        a = generate_dataset(1, 2)
        b = generate_dataset(2, 2)
        assert a[0].image.data.tobytes() != b[0].image.data.tobytes()

    def test_boxes_satisfy_invariants(self):
        for s in generate_dataset(3, 20):
            size = s.image.shape[-1]
            for f in s.faces:
                assert f.xmax > f.xmin and f.ymax > f.ymin
                assert 0 <= f.xmin and f.xmax <= size
                assert 0 <= f.ymin and f.ymax <= size
            assert len(s.buckets) == len(s.faces)

    def test_every_scale_bucket_nonempty_over_many_faces(self):
        # log-uniform sides over [4, 128] must populate every anchor-scale
        # bucket: count faces whose side falls nearest each scale
        scales = np.array([4, 8, 16, 32, 64, 128], dtype=float)
        counts = np.zeros(6, dtype=int)
        total = 0
        for s in generate_dataset(5, 220):
            for f in s.faces:
                counts[np.argmin(np.abs(np.log(f.side) - np.log(scales)))] += 1
                total += 1
        assert total >= 800
        assert np.all(counts > 0)

    def test_values_in_unit_range(self):
        for s in generate_dataset(7, 5):
            assert s.image.data.min() >= 0.0
            assert s.image.data.max() <= 1.0


class TestAugment:
    def test_full_crop_no_flip_is_resize_only(self):
        cfg = DataConfig(image_size=64, crop_scale_range=(1.0, 1.0),
                         flip_probability=0.0, brightness_jitter=0.0,
                         contrast_jitter=0.0)
        src = generate_dataset(9, 1, DataConfig(image_size=64))[0]
        out = augment(src, np.random.default_rng(0), cfg)
        np.testing.assert_allclose(out.image.data, src.image.data, atol=1e-6)
        for fa, fb in zip(out.faces, src.faces):
            np.testing.assert_allclose(fa.as_array(), fb.as_array(), atol=1e-9)

    def test_flip_reflection_identity(self):
        size = 64
        cfg = DataConfig(image_size=size, crop_scale_range=(1.0, 1.0),
                         flip_probability=1.0, brightness_jitter=0.0,
                         contrast_jitter=0.0)
        src = sample_with([(10, 20, 30, 44)], size=size)
        out = augment(src, np.random.default_rng(0), cfg)
        f = out.faces[0]
        assert f.xmin == pytest.approx(size - 30)
        assert f.xmax == pytest.approx(size - 10)
        assert f.ymin == pytest.approx(20)
        assert f.ymax == pytest.approx(44)

    def test_property_sweep_invariants(self):
        cfg = DataConfig(image_size=64)
        base = generate_dataset(13, 10, DataConfig(image_size=64))
        rng = np.random.default_rng(99)
        for _ in range(300):
            src = base[int(rng.integers(0, len(base)))]
            out = augment(src, rng, cfg)
            assert out.image.shape == (3, 64, 64)
            assert out.image.data.min() >= 0.0 and out.image.data.max() <= 1.0
            assert len(out.faces) <= len(src.faces)
            assert len(out.buckets) == len(out.faces)
            for f in out.faces:
                assert f.xmax > f.xmin and f.ymax > f.ymin
                assert 0 <= f.xmin and f.xmax <= 64 + 1e-6
                assert 0 <= f.ymin and f.ymax <= 64 + 1e-6


class TestDatasetIO:
    def test_ppm_round_trip_exact_for_quantized(self, tmp_path):
        rng = np.random.default_rng(0)
        img = np.round(rng.random((3, 8, 10)) * 255) / 255.0
        path = tmp_path / "x.ppm"
        write_ppm(path, img.astype(np.float32))
        back = read_ppm(path)
        np.testing.assert_allclose(back, img, atol=1e-6)

    def test_dataset_round_trip(self, tmp_path):
        samples = generate_dataset(21, 3, DataConfig(image_size=64))
        write_dataset(tmp_path / "ds", samples)
        loaded = load_dataset(tmp_path / "ds", DataConfig(image_size=64))
        assert len(loaded) == 3
        for a, b in zip(samples, loaded):
            assert len(a.faces) == len(b.faces)
            for fa, fb in zip(a.faces, b.faces):
                np.testing.assert_allclose(fa.as_array(), fb.as_array(), atol=1e-3)
            # pixel data round-trips through 8-bit quantization
            np.testing.assert_allclose(a.image.data, b.image.data, atol=1 / 255 + 1e-6)
        assert a.buckets == b.buckets


class TestEvaluateAp:
    def test_single_tp_gives_ap_one(self):
        s = sample_with([(10, 10, 20, 20)])
        det = dset([(11, 11, 21, 21)], [0.7])  # IoU ~0.68
        curve = evaluate_ap([det], [s])
        assert curve.ap == pytest.approx(1.0)

    def test_tp_then_fp_keeps_ap_one(self):
        s = sample_with([(10, 10, 20, 20)])
        det = dset([(10, 10, 20, 20), (40, 40, 50, 50)], [0.9, 0.8])
        curve = evaluate_ap([det], [s])
        np.testing.assert_allclose(curve.precisions, [1.0, 0.5])
        np.testing.assert_allclose(curve.recalls, [1.0, 1.0])
        assert curve.ap == pytest.approx(1.0)

    def test_duplicate_detection_is_fp(self):
        s = sample_with([(10, 10, 20, 20)])
        det = dset([(10, 10, 20, 20), (10.5, 10.5, 20.5, 20.5)], [0.9, 0.8])
        curve = evaluate_ap([det], [s])
        np.testing.assert_allclose(curve.precisions, [1.0, 0.5])

    def test_empty_gt_reports_absent(self):
        s = sample_with([])
        det = dset([(0, 0, 5, 5)], [0.9])
        assert evaluate_ap([det], [s]) is None

    def test_bucket_restriction_and_ignore(self):
        # hard face (side 10) + easy face (side 80); evaluating the hard
        # bucket must ignore a detection on the easy face entirely
        s = sample_with([(0, 0, 10, 10), (20, 20, 100, 100)], size=128)
        assert s.buckets == ["hard", "easy"]
        det = dset([(20, 20, 100, 100), (0, 0, 10, 10)], [0.95, 0.9])
        curve = evaluate_ap([det], [s], bucket="hard")
        assert curve.n_gt == 1
        # easy hit was ignored: one counted detection, a TP
        np.testing.assert_allclose(curve.recalls, [1.0])
        np.testing.assert_allclose(curve.precisions, [1.0])
        assert curve.ap == pytest.approx(1.0)

    def test_monotone_recall_and_ap_bounds(self):
        rng = np.random.default_rng(5)
        samples, dets = [], []
        for img in range(4):
            faces = [(x, x, x + 12, x + 12) for x in rng.uniform(0, 40, 3)]
            samples.append(sample_with(faces, image_id=img))
            boxes = rng.uniform(0, 50, (6, 2))
            boxes = np.hstack([boxes, boxes + rng.uniform(5, 15, (6, 2))])
            dets.append(dset(boxes, rng.random(6), image_id=img))
        curve = evaluate_ap(dets, samples)
        assert np.all(np.diff(curve.recalls) >= 0)
        assert 0.0 <= curve.ap <= 1.0

    def test_adding_top_scoring_tp_never_decreases_ap(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            faces = [(x, x, x + 10, x + 10) for x in rng.uniform(0, 50, 4)]
            s = sample_with(faces, size=128)
            boxes = rng.uniform(0, 60, (5, 2))
            boxes = np.hstack([boxes, boxes + 8])
            scores = rng.random(5) * 0.8
            base = evaluate_ap([dset(boxes, scores)], [s])
            # add an exact hit on face 0 with top score
            boxes2 = np.vstack([np.array(faces[0]), boxes])
            scores2 = np.concatenate([[0.99], scores])
            better = evaluate_ap([dset(boxes2, scores2)], [s])
            assert better.ap >= base.ap - 1e-12

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_reference_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n_images = int(rng.integers(1, 4))
        samples, dets, ref_dets, ref_gts = [], [], [], []
        for img in range(n_images):
            nf = int(rng.integers(1, 5))
            faces = []
            for _ in range(nf):
                x, y = rng.uniform(0, 40, 2)
                w, h = rng.uniform(6, 20, 2)
                faces.append((x, y, x + w, y + h))
            samples.append(sample_with(faces, image_id=img))
            nd = int(rng.integers(0, 8))
            boxes = []
            for _ in range(nd):
                if faces and rng.random() < 0.5:
                    fx = faces[int(rng.integers(0, nf))]
                    jitter = rng.uniform(-2, 2, 4)
                    boxes.append(np.array(fx) + jitter)
                else:
                    x, y = rng.uniform(0, 40, 2)
                    w, h = rng.uniform(4, 18, 2)
                    boxes.append(np.array([x, y, x + w, y + h]))
            scores = rng.random(nd)
            if nd:
                d = dset(boxes, scores, image_id=img)
            else:
                d = DetectionSet(np.zeros((0, 4)), np.zeros(0), img)
            dets.append(d)
            ref_dets.append((d.boxes, d.scores))
            ref_gts.append([np.array(f) for f in faces])
        got = evaluate_ap(dets, samples)
        want = ap_reference(ref_dets, ref_gts)
        assert got.ap == pytest.approx(want, abs=1e-9)

    def test_unknown_bucket_rejected(self):
        with pytest.raises(ConfigurationError, match="bucket"):
            evaluate_ap([], [sample_with([(0, 0, 4, 4)])], bucket="extreme")

    def test_pr_curve_file(self, tmp_path):
        s = sample_with([(10, 10, 20, 20)])
        curve = evaluate_ap([dset([(10, 10, 20, 20)], [0.9])], [s])
        path = tmp_path / "pr.txt"
        write_pr_curve(path, curve)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# ap 1.0")
        assert lines[1] == "1.000000 1.000000"
