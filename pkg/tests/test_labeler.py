import math

import numpy as np
import pytest
from scipy import ndimage

from wsag import heatmaps
from wsag.backends import DetectionBox, MockBackend
from wsag.labeler import (ExoPairIndex, build_pair_index, generate_initial_label, load_labels, object_patchmask,
                          pair_score, read_label, read_provenance, sample_partner, write_label)


class Exploding:
    backend_id = "exploding"

    def detect(self, *a, **k):
        raise AssertionError("backend must not be called")

    segment_box = detect


class Silent:
    backend_id = "silent"

    def detect(self, *a, **k):
        return []


class TestInitialLabel:
    def test_support_matches_part(self, index, mapping, mock):
        r = heatmaps.blur_radius(1.0)
        square = np.ones((2 * r + 1, 2 * r + 1), bool)
        for s in index.select("ego", "train")[:12]:
            heat, prov = generate_initial_label(s, mapping, mock, mock)
            part = index.fixture[s.id].part_mask
            assert heatmaps.is_heatmap(heat)
            assert not prov.degenerate and prov.query == mapping(s.object, s.affordance)
            assert np.all(heat[part] > 0)
            assert np.all(heat[~ndimage.binary_dilation(part, square)] == 0)

    def test_adversarial_segmenter_is_inverted(self, index, mapping, mock):
        adv = MockBackend.from_index(index, adversarial=True)
        s = index.select("ego", "train")[0]
        good, _ = generate_initial_label(s, mapping, mock, mock)
        fixed, prov = generate_initial_label(s, mapping, adv, adv)
        assert prov.inverted == [True]
        np.testing.assert_array_equal(fixed, good)

    def test_decoy_box_filtered(self, index, mapping, mock):
        decoy = MockBackend.from_index(index, decoy=True)
        s = index.select("ego", "train")[2]
        heat, prov = generate_initial_label(s, mapping, decoy, decoy)
        assert len(prov.boxes) == 2 and len(prov.kept) == 1
        np.testing.assert_array_equal(heat, generate_initial_label(s, mapping, mock, mock)[0])

    def test_missing_mapping_checked_first(self, index):
        from wsag.data import PartMapping
        s = index.select("ego", "train")[0]
        with pytest.raises(KeyError):
            generate_initial_label(s, PartMapping(), Exploding(), Exploding())

    def test_no_detection_falls_back(self, index, mapping):
        s = index.select("ego", "train")[0]
        heat, prov = generate_initial_label(s, mapping, Silent(), Silent())
        assert prov.degenerate
        np.testing.assert_allclose(heat, heatmaps.uniform(heat.shape))

    def test_exo_rejected(self, index, mapping, mock):
        with pytest.raises(ValueError):
            generate_initial_label(index.select("exo")[0], mapping, mock, mock)

    def test_write_and_load(self, tmp_path, index, mapping, mock):
        s = index.select("ego", "train")[0]
        heat, prov = generate_initial_label(s, mapping, mock, mock)
        write_label(tmp_path, s.id, heat, prov.to_json())
        back = read_label(tmp_path, s.id)
        assert heatmaps.is_heatmap(back)
        np.testing.assert_allclose(back, heat, atol=heat.max() / 100)
        assert read_provenance(tmp_path, s.id)["query"] == prov.query
        with pytest.raises(FileNotFoundError, match="missing label files"):
            load_labels(tmp_path, [s.id, "Seen/nothing/here"])


class TestPatchMask:
    def test_full_box(self):
        m = object_patchmask(DetectionBox(0, 0, 224, 224, 1), (224, 224), (14, 14))
        assert m.sum() == 196

    def test_inside_one_patch(self):
        m = object_patchmask(DetectionBox(20, 36, 28, 44, 1), (224, 224), (14, 14))
        assert m.sum() == 1 and m[2, 1] == 1

    def test_nine_cells(self):
        m = object_patchmask(DetectionBox(8, 8, 40, 40, 1), (224, 224), (14, 14))
        expected = np.zeros((14, 14), np.uint8)
        expected[0:3, 0:3] = 1
        np.testing.assert_array_equal(m, expected)


class TestPairScore:
    def test_identical(self, rng):
        f = rng.normal(size=(4, 3, 3))
        m = (rng.random((3, 3)) > 0.3).astype(float)
        m[0, 0] = 1
        assert pair_score(f, m, f, m) == pytest.approx(1.0)

    def test_antiparallel(self, rng):
        f = rng.normal(size=(4, 3, 3))
        m = np.ones((3, 3))
        assert pair_score(f, m, -f, m) == pytest.approx(-1.0)

    def test_hand_computed(self):
        ego = np.array([[[1.0, 2.0], [0.0, 4.0]], [[0.0, 1.0], [3.0, 0.0]]])  # d=2, 2x2
        exo = np.array([[[2.0, 0.0], [1.0, 1.0]], [[1.0, 1.0], [0.0, 5.0]]])
        m_ego = np.array([[1, 1], [0, 0]])
        m_exo = np.array([[1, 0], [0, 1]])
        u = np.array([(1 + 2) / 2, (0 + 1) / 2])  # ego pooled (1.5, 0.5)
        v = np.array([(2 + 1) / 2, (1 + 5) / 2])  # exo pooled (1.5, 3.0)
        expected = (u[0] * v[0] + u[1] * v[1]) / (math.hypot(*u) * math.hypot(*v))
        assert pair_score(ego, m_ego, exo, m_exo) == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(0.70710678, abs=1e-8)

    def test_empty_mask(self, rng):
        f = rng.normal(size=(2, 2, 2))
        with pytest.raises(ValueError, match="empty pooling region"):
            pair_score(f, np.zeros((2, 2)), f, np.ones((2, 2)))


def _pair_inputs(index, rng, d=6, g=3):
    ego, exo = index.select("ego", "train"), index.select("exo", "train")
    feats = {s.id: rng.normal(size=(d, g, g)) for s in ego + exo}
    masks = {s.id: np.ones((g, g)) for s in ego + exo}
    return ego, exo, feats, masks


class TestPairIndex:
    def test_small_pool_keeps_all_sorted(self, index, rng):
        ego, exo, feats, masks = _pair_inputs(index, rng)
        cls = ego[0].cls
        three = [s for s in exo if s.cls == cls][:3]
        idx = build_pair_index([ego[0]], three, feats, masks, pool_size=10)
        scores = [sc for _, sc in idx[ego[0].id]]
        assert len(scores) == 3 and scores == sorted(scores, reverse=True)

    def test_top1(self, index, rng):
        ego, exo, feats, masks = _pair_inputs(index, rng)
        idx = build_pair_index(ego, exo, feats, masks, pool_size=1)
        for e in ego:
            cands = [x for x in exo if x.cls == e.cls]
            best = max(cands, key=lambda x: pair_score(feats[e.id], masks[e.id], feats[x.id], masks[x.id]))
            assert idx[e.id][0][0] == best.id and len(idx[e.id]) == 1

    def test_same_class_only(self, index, rng):
        ego, exo, feats, masks = _pair_inputs(index, rng)
        idx = build_pair_index(ego, exo, feats, masks)
        for e in ego:
            assert all(index[x].cls == e.cls for x, _ in idx[e.id])
            assert all(-1 <= sc <= 1 for _, sc in idx[e.id])

    def test_missing_class(self, index, rng):
        ego, exo, feats, masks = _pair_inputs(index, rng)
        with pytest.raises(ValueError, match="no exocentric partners"):
            build_pair_index(ego, [x for x in exo if x.cls != ego[0].cls], feats, masks)

    def test_tsv_round_trip(self, tmp_path, index, rng):
        ego, exo, feats, masks = _pair_inputs(index, rng)
        idx = build_pair_index(ego, exo, feats, masks)
        idx.save(tmp_path / "pairs.tsv")
        assert ExoPairIndex.load(tmp_path / "pairs.tsv") == idx


class TestSamplePartner:
    def test_pool_of_one(self, rng):
        idx = ExoPairIndex({"e": [("x", 0.5)]})
        assert {sample_partner(idx, "e", rng) for _ in range(20)} == {"x"}

    def test_reproducible(self):
        idx = ExoPairIndex({"e": [(f"x{i}", 0.0) for i in range(10)]})
        r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
        assert [sample_partner(idx, "e", r1) for _ in range(50)] == [sample_partner(idx, "e", r2) for _ in range(50)]

    def test_uniform(self):
        idx = ExoPairIndex({"e": [(f"x{i}", 0.0) for i in range(10)]})
        r = np.random.default_rng(0)
        n = 10_000
        draws = [sample_partner(idx, "e", r) for _ in range(n)]
        sigma = math.sqrt(n * 0.1 * 0.9)
        for i in range(10):
            assert abs(draws.count(f"x{i}") - n * 0.1) < 3 * sigma
