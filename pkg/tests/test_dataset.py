import json

import numpy as np
import pytest

from iface_sentinel.dataset import (
    AnnotationSet,
    DatasetError,
    class_summary,
    histogram_from_areas,
    load_annotations,
    load_predictions,
    parse_annotations,
    save_annotations,
    save_predictions,
    scale_histogram,
)
from iface_sentinel.fixtures import (
    FixtureError,
    FixtureSpec,
    PAPER_INTERFACE_COUNTS,
    make_fixture,
    paper_shaped_fixture,
    rect_rle,
)
from iface_sentinel.geometry import BBox, box_mask, iou, rle_decode, rle_encode


def minimal_doc(**over):
    doc = {
        "version": "ctg2-spec/1",
        "images": [{"id": 1, "width": 16, "height": 12, "split": "val"}],
        "categories": [
            {"id": 1, "name": "beaker", "kind": "vessel"},
            {"id": 2, "name": "G/L", "kind": "interface", "interface_type": "G/L"},
        ],
        "annotations": [],
    }
    doc.update(over)
    return doc


def write(tmp_path, doc, name="ann.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


class TestLoad:
    def test_minimal(self, tmp_path):
        ann = load_annotations(write(tmp_path, minimal_doc()))
        assert ann.instances == ()
        assert ann.images[0].split == "val"

    def test_unknown_category(self, tmp_path):
        doc = minimal_doc(annotations=[
            {"id": 1, "image_id": 1, "category_id": 9, "segmentation": {"polygon": [[0, 0], [4, 0], [4, 4]]}}
        ])
        with pytest.raises(DatasetError, match=r"annotations\[0\]\.category_id"):
            load_annotations(write(tmp_path, doc))

    @pytest.mark.parametrize(
        "mutate, field",
        [
            (lambda d: d.pop("version"), "version"),
            (lambda d: d.update(version="ctg2-spec/0"), "version"),
            (lambda d: d["images"][0].pop("width"), r"images\[0\]\.width"),
            (lambda d: d["images"][0].update(width="16"), r"images\[0\]\.width"),
            (lambda d: d["categories"][1].pop("interface_type"), r"categories\[1\]"),
            (lambda d: d["categories"][0].update(kind="bottle"), r"categories\[0\]"),
            (lambda d: d["categories"].append({"id": 1, "name": "x", "kind": "vessel"}), r"categories\[2\]\.id"),
        ],
    )
    def test_schema_errors_name_field(self, tmp_path, mutate, field):
        doc = minimal_doc()
        mutate(doc)
        with pytest.raises(DatasetError, match=field):
            load_annotations(write(tmp_path, doc))

    def test_segmentation_variants(self, tmp_path):
        full = rle_encode(box_mask(BBox(2, 2, 6, 5), 16, 12)).to_json()
        doc = minimal_doc(annotations=[
            {"id": 1, "image_id": 1, "category_id": 1, "segmentation": {"polygon": [[0, 0], [4, 0], [4, 4], [0, 4]]}},
            {"id": 2, "image_id": 1, "category_id": 2, "segmentation": {"rle": full}, "vessel_ref": 1},
            {"id": 3, "image_id": 1, "category_id": 1,
             "segmentation": {"polygon": [[[0, 0], [2, 0], [2, 2]], [[8, 8], [10, 8], [10, 10], [8, 10]]]}},
        ])
        ann = load_annotations(write(tmp_path, doc))
        assert ann.instances[0].area == 16
        assert ann.instances[1].bbox == BBox(2, 2, 6, 5)
        assert ann.instances[2].area == 4 + 3
        # roundtrip through the writer
        p = tmp_path / "again.json"
        save_annotations(ann, p)
        again = load_annotations(p)
        assert [g.rle for g in again.instances] == [g.rle for g in ann.instances]

    @pytest.mark.parametrize(
        "ann, msg",
        [
            ({"segmentation": {"polygon": [[20, 20], [30, 20], [30, 30]]}}, "empty"),
            ({"segmentation": {"rle": {"w": 4, "h": 4, "runs": [16]}}}, "size"),
            ({"segmentation": {"rle": {"w": 16, "h": 12, "runs": [5]}}}, "run sum"),
            ({"segmentation": {"box": []}}, "segmentation"),
            ({"image_id": 4}, "image_id"),
            ({"vessel_ref": 99}, "vessel_ref"),
        ],
    )
    def test_instance_errors(self, tmp_path, ann, msg):
        base = {"id": 1, "image_id": 1, "category_id": 2, "segmentation": {"polygon": [[0, 0], [4, 0], [4, 4]]}}
        base.update(ann)
        with pytest.raises(DatasetError, match=msg):
            load_annotations(write(tmp_path, minimal_doc(annotations=[base])))

    def test_vessel_ref_must_be_vessel(self, tmp_path):
        poly = {"polygon": [[0, 0], [4, 0], [4, 4]]}
        doc = minimal_doc(annotations=[
            {"id": 1, "image_id": 1, "category_id": 2, "segmentation": poly},
            {"id": 2, "image_id": 1, "category_id": 2, "segmentation": poly, "vessel_ref": 1},
        ])
        with pytest.raises(DatasetError, match="not a vessel"):
            load_annotations(write(tmp_path, doc))

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{nope")
        with pytest.raises(DatasetError, match="invalid JSON"):
            load_annotations(p)

    def test_predictions(self, tmp_path):
        ann = parse_annotations(minimal_doc())
        rle = rle_encode(box_mask(BBox(0, 0, 3, 3), 16, 12)).to_json()
        p = write(tmp_path, [{"image_id": 1, "category_id": 2, "rle": rle, "score": 0.5, "color_attr": "colored"}], "p.json")
        preds = load_predictions(p, ann)
        assert preds[0].mask.count() == 9 and preds[0].color_attr == "colored"
        save_predictions(preds, tmp_path / "p2.json")
        assert load_predictions(tmp_path / "p2.json", ann) == preds
        for bad, msg in [
            ({"score": 1.5}, "score"),
            ({"image_id": 3}, "image_id"),
            ({"category_id": 7}, "category_id"),
            ({"color_attr": "red"}, "color_attr"),
            ({"rle": {"w": 16, "h": 12, "runs": [192]}}, "empty"),
        ]:
            rec = {"image_id": 1, "category_id": 2, "rle": rle, "score": 0.5}
            rec.update(bad)
            with pytest.raises(DatasetError, match=msg):
                load_predictions(write(tmp_path, [rec], "q.json"), ann)


class TestStatistics:
    def test_paper_fractions(self):
        h = histogram_from_areas([1] * 2108 + [1024] * 5926 + [9216] * 10424)
        f = h.fractions()
        assert (h.small, h.medium, h.large) == (2108, 5926, 10424)
        assert f["small"] * 100 == pytest.approx(11.42, abs=0.01)
        assert f["medium"] * 100 == pytest.approx(32.11, abs=0.01)
        assert f["large"] * 100 == pytest.approx(56.47, abs=0.01)
        assert sum(f.values()) == pytest.approx(1.0, abs=1e-12)

    def test_bin_edges(self):
        h = histogram_from_areas([1023, 1024, 9215, 9216])
        assert (h.small, h.medium, h.large) == (1, 2, 1)

    def test_single_pixel(self, tmp_path):
        doc = minimal_doc(annotations=[
            {"id": 1, "image_id": 1, "category_id": 1, "segmentation": {"polygon": [[0, 0], [1, 0], [1, 1], [0, 1]]}}
        ])
        f = scale_histogram(parse_annotations(doc)).fractions()
        assert f == {"small": 1.0, "medium": 0.0, "large": 0.0}

    def test_empty(self):
        ann = AnnotationSet((), ())
        s = class_summary(ann)
        assert s.n_images == s.n_instances == s.max_instances_per_image == 0
        assert s.mean_instances_per_image == 0.0
        assert set(s.per_interface_type.values()) == {0}
        assert scale_histogram(ann).fractions() == {"small": 0.0, "medium": 0.0, "large": 0.0}

    def test_histogram_matches_recount(self):
        fx = make_fixture(FixtureSpec(n_images=30), seed=4)
        h = scale_histogram(fx.annotations)
        areas = [int(g.mask.bits.sum()) for g in fx.annotations.instances]
        assert h.small == sum(a < 1024 for a in areas)
        assert h.medium == sum(1024 <= a < 9216 for a in areas)
        assert h.large == sum(a >= 9216 for a in areas)

    def test_paper_shaped_summary(self):
        ann = paper_shaped_fixture()
        s = class_summary(ann)
        assert s.per_interface_type == {"G/L": 3637, "L/L": 327, "L/S": 852, "G/S": 477, "S/S": 7}
        assert s.images_per_split == {"train": 2939, "val": 729}
        assert s.n_images == 3668 and s.n_categories == 30 and s.n_instances == 18458
        assert s.max_instances_per_image == 112
        assert s.mean_instances_per_image == pytest.approx(5.03, abs=0.01)
        h = scale_histogram(ann)
        assert (h.small, h.medium, h.large) == (2108, 5926, 10424)
        ss = next(c for c in ann.categories if c.interface_type == "S/S")
        assert ss.rare and s.rare_categories == (ss.id,)

    def test_summary_matches_generator(self):
        fx = make_fixture(FixtureSpec(n_images=25), seed=9)
        s = class_summary(fx.annotations)
        expected = {}
        for g in fx.annotations.instances:
            expected[g.category_id] = expected.get(g.category_id, 0) + 1
        assert {k: v for k, v in s.per_category.items() if v} == expected
        assert s.images_per_split == {"train": 20, "val": 5}


class TestFixture:
    def test_rect_rle(self):
        for box in [BBox(0, 0, 5, 3), BBox(2, 1, 5, 4), BBox(0, 0, 8, 6), BBox(3, 5, 8, 6), BBox(0, 2, 8, 4)]:
            assert rle_decode(rect_rle(8, 6, box)) == box_mask(box, 8, 6)

    def test_determinism(self, tmp_path):
        for k in range(2):
            fx = make_fixture(FixtureSpec(n_images=8), seed=17)
            save_annotations(fx.annotations, tmp_path / f"a{k}.json")
            save_predictions(fx.predictions, tmp_path / f"p{k}.json")
        assert (tmp_path / "a0.json").read_bytes() == (tmp_path / "a1.json").read_bytes()
        assert (tmp_path / "p0.json").read_bytes() == (tmp_path / "p1.json").read_bytes()

    def test_generated_file_loads(self, tmp_path):
        fx = make_fixture(FixtureSpec(n_images=50), seed=2)
        save_annotations(fx.annotations, tmp_path / "a.json")
        ann = load_annotations(tmp_path / "a.json")
        assert len(ann.instances) == len(fx.annotations.instances)
        save_predictions(fx.predictions, tmp_path / "p.json")
        assert len(load_predictions(tmp_path / "p.json", ann)) == len(fx.predictions)

    def test_exact_iou_request(self):
        spec = FixtureSpec(
            n_images=1, vessels_per_image=(1, 1), interfaces_per_vessel=(0, 0),
            p_detect=1.0, iou_range=(0.62, 0.62), false_positives_per_image=(0, 0),
        )
        fx = make_fixture(spec, seed=0)
        (gt,) = fx.annotations.instances
        (entry,) = fx.ledger
        assert entry.iou == 0.62
        assert iou(gt.mask, fx.predictions[0].mask) == 0.62

    def test_ledger_ious_are_pixel_exact(self):
        fx = make_fixture(FixtureSpec(n_images=10), seed=1)
        by_id = fx.annotations.instance_by_id
        for e in fx.ledger:
            if e.gt_id is not None:
                assert iou(by_id[e.gt_id].mask, fx.predictions[e.pred_index].mask) == pytest.approx(e.iou, abs=1e-12)

    def test_vessel_ref_populated(self):
        fx = make_fixture(FixtureSpec(n_images=3, interfaces_per_vessel=(1, 1)), seed=3)
        ann = fx.annotations
        ifaces = [g for g in ann.instances if ann.category_by_id[g.category_id].kind == "interface"]
        assert ifaces and all(g.vessel_ref is not None for g in ifaces)
        for g in ifaces:
            assert ann.category_by_id[ann.instance_by_id[g.vessel_ref].category_id].kind == "vessel"

    @pytest.mark.parametrize(
        "kw", [dict(vessels_per_image=(40, 40)), dict(vessels_per_image=(3, 1)), dict(interfaces_per_vessel=(0, 60))]
    )
    def test_infeasible(self, kw):
        with pytest.raises(FixtureError):
            make_fixture(FixtureSpec(**kw), seed=0)


def test_paper_counts_constant():
    assert sum(PAPER_INTERFACE_COUNTS.values()) == 5300
    assert np.isclose(3637 / 5300, 0.6862, atol=1e-4)
