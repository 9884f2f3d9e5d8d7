import json

import jsonschema
import numpy as np
import pytest

from medpatchnet.backbone import Backbone, BackboneConfig
from medpatchnet.data import SyntheticSpec, generate
from medpatchnet.evaluation import (
    METRICS,
    REPORT_SCHEMA,
    ci_violations,
    evaluate,
    image_probabilities,
    saliency_maps,
)
from medpatchnet.patches import PatchGridSpec, predict
from medpatchnet.saliency import ShiftSpec, gradcam, shifted_saliency

SPEC = SyntheticSpec(image_side=16, marker_side=4, blob_radius=(2.0, 3.0), ridge_length=(4.0, 6.0), texture_side=(3, 4))
GRID = PatchGridSpec(16, 4)


@pytest.fixture(scope="module")
def setup():
    model = Backbone.build(BackboneConfig(num_classes=4, input_side=4, stage_channels=(4, 6)), seed=0)
    return model, generate(SPEC, 40, 0, "valid"), generate(SPEC, 40, 0, "test")


@pytest.fixture(scope="module")
def report(setup):
    model, valid, test = setup
    return evaluate(model, GRID, valid, test, SPEC.class_names, "patch_raw", ShiftSpec(2), n_bootstrap=100, seed=3)


def test_report_validates_against_schema(report):
    jsonschema.validate(json.loads(report.to_json()), REPORT_SCHEMA)


def test_cis_contain_points(report):
    d = report.to_dict()
    assert ci_violations(d) == []
    assert any("ci_lo" in c["auroc"] for c in d["classes"])


def test_report_is_reproducible(setup, report):
    model, valid, test = setup
    again = evaluate(model, GRID, valid, test, SPEC.class_names, "patch_raw", ShiftSpec(2), n_bootstrap=100, seed=3)
    assert again.to_json() == report.to_json()
    assert again.format_table() == report.format_table()


def test_table_has_class_rows_and_mean(report):
    lines = report.format_table().splitlines()
    body = [ln for ln in lines[1:] if not set(ln) <= {"-"}]
    assert body[0].startswith("Class")
    assert [ln.split()[0] for ln in body[1:]] == list(SPEC.class_names) + ["Mean"]


def test_raw_and_scaled_share_classification(setup, report):
    model, valid, test = setup
    scaled = evaluate(model, GRID, valid, test, SPEC.class_names, "patch_scaled", ShiftSpec(2), n_bootstrap=100, seed=3)
    for a, b in zip(report.classes, scaled.classes):
        for m in ("auroc", "sensitivity", "specificity", "accuracy"):
            assert a[m] == b[m]


def test_zero_bootstrap_omits_ci_fields(setup):
    model, valid, test = setup
    r = evaluate(model, GRID, valid, test, SPEC.class_names, n_bootstrap=0)
    d = r.to_dict()
    jsonschema.validate(d, REPORT_SCHEMA)
    for row in d["classes"] + [d["mean"]]:
        for m in METRICS:
            assert set(row[m]) == {"point"}
    assert "[" not in r.format_table()


def test_mean_row_is_class_average(report):
    for m in METRICS:
        vals = [c[m]["point"] for c in report.classes if c[m]["point"] is not None]
        assert report.mean[m]["point"] == pytest.approx(np.mean(vals))


def test_tp_only_at_least_all_cases(report):
    for c in report.classes:
        if c["miou_tp"]["point"] is not None:
            assert c["miou_tp"]["point"] >= c["miou_all"]["point"]


def test_hit_rate_matches_direct_count(setup, report):
    model, valid, test = setup
    for c in range(4):
        hits = []
        for s in test:
            if s.labels[c]:
                v = shifted_saliency(s.image, model, GRID, ShiftSpec(2), c, False).values
                r, q = np.unravel_index(np.argmax(v), v.shape)
                hits.append(s.masks[c][r, q])
        assert report.classes[c]["hit_rate"]["point"] == pytest.approx(np.mean(hits), abs=1e-15)


def test_probabilities_and_maps(setup):
    model, _, test = setup
    imgs = np.stack([s.image for s in test[:3]])
    probs = image_probabilities(imgs, model, GRID)
    for i in range(3):
        assert np.array_equal(probs[i], predict(imgs[i], model, GRID).probabilities)
    maps = saliency_maps(imgs, model, GRID, "patch_scaled", ShiftSpec(4), chunk=2)
    assert maps.shape == (3, 4, 16, 16)
    with pytest.raises(ValueError, match="method"):
        saliency_maps(imgs, model, GRID, "lrp", ShiftSpec(4))
    with pytest.raises(ValueError, match="P=1"):
        saliency_maps(imgs, model, GRID, "gradcam", ShiftSpec(4))


def test_gradcam_method_on_full_image_model(setup):
    _, valid, test = setup
    full = Backbone.build(BackboneConfig(num_classes=4, input_side=16, stage_channels=(4, 6)), seed=1)
    grid = PatchGridSpec(16, 1)
    maps = saliency_maps(np.stack([s.image for s in test[:2]]), full, grid, "gradcam", ShiftSpec(16))
    for c in range(4):
        assert np.array_equal(maps[0, c], gradcam(test[0].image, full, c).values)
    r = evaluate(full, grid, valid, test, SPEC.class_names, "gradcam", n_bootstrap=20)
    jsonschema.validate(r.to_dict(), REPORT_SCHEMA)


def test_class_name_count_checked(setup):
    model, valid, test = setup
    with pytest.raises(ValueError, match="class names"):
        evaluate(model, GRID, valid, test, ["a"], n_bootstrap=0)
