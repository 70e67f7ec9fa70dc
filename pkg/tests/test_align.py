import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lightcnn.align import (
    TEST_SPEC,
    TRAIN_SPEC,
    AlignmentError,
    Landmarks5,
    ManifestRecord,
    NormSpec,
    SimilarityTransform,
    align_face,
    compute_alignment,
    load_image,
    parse_manifest_line,
    read_manifest,
    save_image,
    to_gray,
    warp,
    write_manifest,
)
from lightcnn.tensor import make_rng

# eyes level at y=48, midpoints 48 px apart, eye midpoint at (72, 48)
CANONICAL = Landmarks5([(52, 48), (92, 48), (72, 72), (58, 96), (86, 96)])
IDENTITY = SimilarityTransform(0.0, 1.0, (0.0, 0.0))


def _targets(spec):
    return np.array([spec.size / 2, spec.ec_y]), np.array([spec.size / 2, spec.ec_y + spec.ec_mc_y])


def test_table_specs():
    assert (TRAIN_SPEC.size, TRAIN_SPEC.ec_mc_y, TRAIN_SPEC.ec_y) == (144, 48, 48)
    assert (TEST_SPEC.size, TEST_SPEC.ec_mc_y, TEST_SPEC.ec_y) == (128, 48, 40)


def test_canonical_gives_identity():
    t = compute_alignment(CANONICAL, TRAIN_SPEC)
    np.testing.assert_allclose(t.matrix, np.eye(3), atol=1e-9)


def test_round_trip_known_similarity():
    known = SimilarityTransform(math.radians(17), 1.3, (11.0, -7.0))
    moved = Landmarks5(known.apply(CANONICAL.as_array()))
    t = compute_alignment(moved, TRAIN_SPEC)
    np.testing.assert_allclose(t.apply(moved.as_array()), CANONICAL.as_array(), atol=1e-6)
    np.testing.assert_allclose(t.matrix, known.inverse().matrix, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.floats(-1.2, 1.2), st.floats(0.3, 4.0), st.floats(-200, 200), st.floats(-200, 200),
       st.sampled_from(["train", "test"]))
def test_alignment_invariants(angle, scale, tx, ty, which):
    spec = TRAIN_SPEC if which == "train" else TEST_SPEC
    lm = Landmarks5(SimilarityTransform(angle, scale, (tx, ty)).apply(CANONICAL.as_array()))
    t = compute_alignment(lm, spec)
    out = t.apply(lm.as_array())
    eye_mid, mouth_mid = (out[0] + out[1]) / 2, (out[3] + out[4]) / 2
    assert abs(out[0, 1] - out[1, 1]) < 1e-6
    assert abs(np.hypot(*(mouth_mid - eye_mid)) - spec.ec_mc_y) < 1e-6
    np.testing.assert_allclose(eye_mid, _targets(spec)[0], atol=1e-6)


def test_inverse_composes_to_identity():
    t = SimilarityTransform(0.4, 2.5, (3.0, -9.0))
    np.testing.assert_allclose(t.inverse().matrix @ t.matrix, np.eye(3), atol=1e-12)


class TestWarp:
    def test_identity_bit_exact(self):
        img = make_rng(0).integers(0, 256, (150, 160)).astype(np.float64)
        np.testing.assert_array_equal(warp(img, IDENTITY, 144), img[:144, :144])

    def test_all_white_identity(self):
        out = warp(np.full((144, 144), 255.0), IDENTITY, 144)
        assert np.all(out == 255.0)

    def test_integer_translation(self):
        img = make_rng(1).random((40, 40))
        out = warp(img, SimilarityTransform(0.0, 1.0, (3.0, 5.0)), 40)
        np.testing.assert_array_equal(out[5:, 3:], img[:35, :37])
        assert np.all(out[:5] == 0) and np.all(out[:, :3] == 0)

    def test_bilinear_half_pixel(self):
        img = np.array([[0.0, 2.0], [4.0, 6.0]])
        out = warp(img, SimilarityTransform(0.0, 1.0, (0.5, 0.5)), 2)
        # output (1, 1) samples input (0.5, 0.5): mean of four pixels
        assert out[1, 1] == pytest.approx(3.0)

    def test_rejects_colour(self):
        with pytest.raises(AlignmentError):
            warp(np.zeros((4, 4, 3)), IDENTITY, 4)


@pytest.mark.parametrize("spec", [TRAIN_SPEC, TEST_SPEC])
def test_warped_landmarks_hit_targets(spec):
    """Draw bright dots at the landmarks, warp, and locate them again."""
    known = SimilarityTransform(math.radians(-9), 1.6, (30.0, 12.0))
    lm = Landmarks5(known.apply(CANONICAL.as_array()))
    img = np.zeros((300, 300))
    yy, xx = np.mgrid[0:300, 0:300]
    for x, y in lm.as_array():
        img += np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * 2.0 ** 2))
    out, t, moved = align_face(img, lm, spec)
    assert out.shape == (spec.size, spec.size)
    eye_t, mouth_t = _targets(spec)
    p = moved.as_array()
    assert np.linalg.norm((p[0] + p[1]) / 2 - eye_t) < 0.5
    assert np.linalg.norm((p[3] + p[4]) / 2 - mouth_t) < 0.5
    # the image content agrees with the analytic landmark positions
    oy, ox = np.mgrid[0:spec.size, 0:spec.size]
    for x, y in p:
        win = (np.abs(ox - x) <= 4) & (np.abs(oy - y) <= 4)
        w = out * win
        cx, cy = (w * ox).sum() / w.sum(), (w * oy).sum() / w.sum()
        assert math.hypot(cx - x, cy - y) < 0.5


class TestErrors:
    def test_coincident_eyes(self):
        with pytest.raises(AlignmentError, match="eye"):
            Landmarks5([(1, 1), (1, 1), (2, 2), (0, 5), (2, 5)])

    def test_degenerate_scale(self):
        lm = Landmarks5([(0, 0), (10, 0), (5, 3), (0, 0), (10, 0)])
        with pytest.raises(AlignmentError, match="coincide"):
            compute_alignment(lm, TRAIN_SPEC)

    def test_bad_spec(self):
        with pytest.raises(AlignmentError):
            NormSpec(64, 40, 30)


def test_gray_weights():
    px = np.array([[[10.0, 20.0, 30.0]]])
    assert to_gray(px)[0, 0] == pytest.approx(0.299 * 10 + 0.587 * 20 + 0.114 * 30)


class TestManifest:
    def test_round_trip(self, tmp_path):
        recs = [ManifestRecord("a.png", 3, CANONICAL), ManifestRecord("dir/b.png", 0, CANONICAL)]
        path = tmp_path / "m.tsv"
        write_manifest(path, recs)
        path.write_text("# comment\n\n" + path.read_text())
        assert read_manifest(path) == recs

    def test_malformed_line(self):
        with pytest.raises(ValueError, match="line 4"):
            parse_manifest_line("a.png\t1\t2\t3", 4)
        with pytest.raises(ValueError, match="line 2"):
            parse_manifest_line("a.png\tx" + "\t1" * 10, 2)

    def test_image_io(self, tmp_path):
        img = make_rng(0).integers(0, 256, (20, 30)).astype(np.float64)
        save_image(tmp_path / "x.png", img)
        np.testing.assert_array_equal(load_image(tmp_path / "x.png"), img)
        np.save(tmp_path / "y.npy", img)
        np.testing.assert_array_equal(load_image(tmp_path / "y.npy"), img)
