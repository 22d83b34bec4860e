import json

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nrsfm.robust import robust_reconstruct
from nrsfm.serialize import (
    cameras_from_dict,
    dumps,
    format_xyz,
    ground_truth_from_dict,
    ground_truth_to_dict,
    reconstruction_to_dict,
    rle_decode,
    rle_encode,
    write_manifest,
)
from nrsfm.synth import SceneConfig, make_benchmark


@settings(max_examples=50, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 6), st.integers(1, 6))))
def test_rle_round_trip(mask):
    doc = rle_encode(mask)
    assert np.array_equal(rle_decode(doc), mask)
    assert sum(doc["runs"]) == mask.size


def test_rle_starts_with_false_run():
    assert rle_encode(np.array([[True, True, False]]))["runs"] == [0, 2, 1]


def test_ground_truth_round_trip():
    W, gt = make_benchmark(SceneConfig(frames=8, noise_sigma=1, outlier_ratio=0.1, seed=3))
    back = ground_truth_from_dict(json.loads(dumps(ground_truth_to_dict(gt))))
    assert np.array_equal(back.shapes, gt.shapes)
    assert np.array_equal(back.outlier_mask, gt.outlier_mask)
    np.testing.assert_allclose(back.clean_tracking.values, gt.clean_tracking.values, rtol=1e-14, atol=1e-10)
    assert back.config == gt.config


def test_reconstruction_document():
    W, gt = make_benchmark(SceneConfig(frames=20))
    rec = robust_reconstruct(W, 2)
    doc = json.loads(dumps(reconstruction_to_dict(rec, 2)))
    assert doc["format_version"] == 1 and doc["bases_count"] == 2
    assert len(doc["cameras"]) == 20 and len(doc["shapes"]) == 20
    cams = cameras_from_dict(doc)
    assert np.array_equal(cams[3].rotation, rec.euclidean.motions[3].rotation)


def test_xyz_lines():
    text = format_xyz(np.array([[1.0, 2.0], [0.5, 0.0], [-1.0, 3.25]]))
    assert text == "1.0 0.5 -1.0\n2.0 0.0 3.25\n"


def test_manifest_is_reproducible(tmp_path):
    out = tmp_path / "a.txt"
    out.write_text("x")
    m1 = write_manifest(tmp_path / "m.json", ["cmd"], {"a": 1}, [0], "0.1", outputs=[out])
    first = (tmp_path / "m.json").read_bytes()
    write_manifest(tmp_path / "m.json", ["cmd"], {"a": 1}, [0], "0.1", outputs=[out])
    assert (tmp_path / "m.json").read_bytes() == first
    assert list(m1["outputs"]) == ["a.txt"]
