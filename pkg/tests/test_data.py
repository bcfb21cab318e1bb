import numpy as np
import pytest
from scipy import ndimage

from wsag import heatmaps
from wsag._io import write_png
from wsag.data import (DatasetIndex, PartMapping, Sample, example_mapping_path, generate_fixture, load_dataset,
                       load_part_mapping, write_dataset)
from wsag.heatmaps import DegenerateHeatmapError


def _img(rng, size=64):
    return rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)


class TestPartMapping:
    def test_bundled_examples(self):
        m = load_part_mapping(example_mapping_path())
        assert m("knife", "hold") == "handle of the knife"
        assert m("bottle", "open") == "cap of the bottle"
        assert m("drum", "beat") == "the drumhead of the drum"

    def test_duplicate_rejected_with_line(self, tmp_path):
        p = tmp_path / "map.tsv"
        p.write_text("cup\thold\thandle of the cup\n# note\ncup\thold\trim of the cup\n")
        with pytest.raises(ValueError, match=r"map.tsv:3: duplicate"):
            load_part_mapping(p)

    def test_empty_part_rejected(self, tmp_path):
        p = tmp_path / "map.tsv"
        p.write_text("cup\thold\t \n")
        with pytest.raises(ValueError, match="empty part"):
            load_part_mapping(p)

    def test_missing_entry(self):
        with pytest.raises(KeyError):
            PartMapping()("cup", "hold")

    def test_text_round_trip(self, tmp_path, mapping):
        p = tmp_path / "m.tsv"
        p.write_text(mapping.to_text())
        assert load_part_mapping(p) == mapping


class TestSample:
    def test_small_image_rejected(self, rng):
        with pytest.raises(ValueError, match="smaller than"):
            Sample("a", _img(rng, 32), "ego", "cup", "hold", "train")

    def test_bad_view(self, rng):
        with pytest.raises(ValueError):
            Sample("a", _img(rng), "side", "cup", "hold", "train")

    def test_empty_labels(self, rng):
        with pytest.raises(ValueError):
            Sample("a", _img(rng), "ego", "", "hold", "train")


class TestLoadDataset:
    def test_counts(self, tmp_path, rng):
        for view in ("egocentric", "exocentric"):
            for i in range(2):
                write_png(tmp_path / "Seen/trainset" / view / "hold/cup" / f"cup_{i}.png", _img(rng))
        idx = load_dataset(tmp_path, "train")
        assert len(idx) == 4 and idx.gt_heatmaps == {}
        assert sorted(s.view for s in idx.samples) == ["ego", "ego", "exo", "exo"]
        assert all(s.object == "cup" and s.affordance == "hold" for s in idx.samples)

    def test_zero_ground_truth(self, tmp_path, rng):
        write_png(tmp_path / "Seen/testset/egocentric/hold/cup/cup_0.png", _img(rng))
        write_png(tmp_path / "Seen/testset/GT/hold/cup/cup_0.png", np.zeros((64, 64), np.uint8))
        with pytest.raises(DegenerateHeatmapError, match="degenerate ground truth"):
            load_dataset(tmp_path, "test")

    def test_unparseable_paths_skipped(self, tmp_path, rng):
        write_png(tmp_path / "Seen/trainset/egocentric/hold/cup/cup_0.png", _img(rng))
        write_png(tmp_path / "Seen/trainset/egocentric/stray.png", _img(rng))
        (tmp_path / "Seen/trainset/egocentric/hold/cup/notes.txt").write_text("x")
        idx = load_dataset(tmp_path, "train")
        assert len(idx) == 1
        assert idx.report.n_skipped == 2

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope", "train")

    def test_two_loads_equal(self, tmp_path, rng):
        write_png(tmp_path / "Seen/trainset/egocentric/hold/cup/cup_0.png", _img(rng))
        a, b = load_dataset(tmp_path, "train"), load_dataset(tmp_path, "train")
        assert [s.id for s in a.samples] == [s.id for s in b.samples]
        assert all(np.array_equal(x.image, y.image) for x, y in zip(a.samples, b.samples))


class TestFixture:
    def test_deterministic(self):
        a, ma = generate_fixture(seed=3, n_ego=2, n_exo=2, n_test=1)
        b, mb = generate_fixture(seed=3, n_ego=2, n_exo=2, n_test=1)
        assert ma == mb
        assert [s.id for s in a.samples] == [s.id for s in b.samples]
        assert all(np.array_equal(x.image, y.image) for x, y in zip(a.samples, b.samples))
        assert all(np.array_equal(a.fixture[k].part_mask, b.fixture[k].part_mask) for k in a.fixture)

    def test_class_count(self, index):
        assert len(index.classes()) == 8

    def test_mapping_total(self, index, mapping):
        for o, a in index.classes():
            assert mapping(o, a)

    def test_gt_support_is_dilated_part(self, index):
        r = heatmaps.blur_radius(2.0)
        square = np.ones((2 * r + 1, 2 * r + 1), bool)
        for sid, gt in index.gt_heatmaps.items():
            part = index.fixture[sid].full_part_mask
            assert heatmaps.is_heatmap(gt)
            assert np.all(gt[part] > 0)
            assert np.all(gt[~ndimage.binary_dilation(part, square)] == 0)

    def test_occluder_hides_most_of_part(self, index):
        for s in index.select("exo"):
            rec = index.fixture[s.id]
            hidden = (rec.full_part_mask & rec.occluder_mask).sum() / rec.full_part_mask.sum()
            assert hidden >= 0.6

    def test_round_trip(self, tmp_path):
        idx, mapping = generate_fixture(seed=7, n_ego=2, n_exo=2, n_test=2)
        write_dataset(idx, tmp_path, mapping)
        loaded = load_dataset(tmp_path, "train").merge(load_dataset(tmp_path, "test"))
        assert sorted(s.id for s in loaded.samples) == sorted(s.id for s in idx.samples)
        for s in idx.samples:
            t = loaded[s.id]
            assert (t.view, t.object, t.affordance, t.split) == (s.view, s.object, s.affordance, s.split)
            assert np.array_equal(t.image, s.image)
        assert sorted(loaded.gt_heatmaps) == sorted(idx.gt_heatmaps)
        for sid, gt in idx.gt_heatmaps.items():
            # ground truth goes through 8-bit storage
            np.testing.assert_allclose(loaded.gt_heatmaps[sid], gt, atol=gt.max() / 255 + 1e-9)
        assert set(loaded.fixture) == set(idx.fixture)

    def test_duplicate_ids_rejected(self, index):
        s = index.samples[0]
        with pytest.raises(ValueError, match="unique"):
            DatasetIndex([s, s])
