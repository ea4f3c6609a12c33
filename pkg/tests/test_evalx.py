import numpy as np
import pytest

from unimlvg import evalx, scenesim
from unimlvg.errors import EvaluationError, ValidationError
from unimlvg.evalx import AcceptanceBands, EvalReport

REPORT_KEYS = [
    "psnr_mean", "seam_err", "seam_err_gt", "flicker", "flicker_gt", "box_centroid_err",
    "box_miss_rate", "attribute_luminance_ratio", "attribute_luminance_delta", "config_hash",
]


@pytest.fixture(scope="module")
def clip(world, frames):
    rig = world.rig(frames=range(4))
    return frames[:4], rig, scenesim.export_annotations(world, rig)


def test_psnr_reference_values():
    a = np.zeros((1, 1, 2, 2, 3))
    assert evalx.psnr(a, a) == evalx.PSNR_CAP
    assert evalx.psnr(a, a + 0.1) == pytest.approx(20.0)
    with pytest.raises(ValidationError):
        evalx.psnr(a, np.zeros((1, 1, 2, 3, 3)))


def test_flicker_of_a_ramp():
    video = np.stack([np.full((2, 3, 3, 3), 0.1 * t) for t in range(4)])
    assert evalx.flicker(video) == pytest.approx(0.1)
    assert evalx.frame_flicker(video) == pytest.approx([0.1, 0.1, 0.1])
    assert evalx.flicker(video, per_view=True).shape == (2,)
    with pytest.raises(ValidationError):
        evalx.flicker(video[:1])
    with pytest.raises(EvaluationError):
        evalx.flicker(video * np.nan)


def test_seam_ground_truth_is_small_and_permutation_is_large(clip):
    frames, rig, _ = clip
    gt = evalx.seam_consistency(frames, rig)
    assert gt < 0.02
    # non-cyclic view orders break adjacency; a cyclic shift would not, the cameras share one centre
    for perm in ([1, 0, 2, 3, 4, 5], [0, 2, 1, 3, 5, 4], [5, 4, 3, 2, 1, 0]):
        assert evalx.seam_consistency(frames[:, perm], rig) > 3 * gt


def test_seam_pairs_project_to_the_same_ground_point(rig):
    sp = evalx.seam_correspondences(rig, 0, 48, 80)
    assert len(sp.view_a) > 0
    assert set(zip(sp.view_a.tolist(), sp.view_b.tolist())) <= {(v, (v + 1) % 6) for v in range(6)} | {((v + 1) % 6, v) for v in range(6)}


def test_bilinear_matches_pixel_centres():
    img = np.random.default_rng(0).random((4, 5, 3))
    uv = np.array([[2.5, 1.5], [3.0, 1.5]])
    out = evalx.bilinear(img, uv)
    assert np.allclose(out[0], img[1, 2])
    assert np.allclose(out[1], (img[1, 2] + img[1, 3]) / 2)


def test_centroids_on_ground_truth(clip):
    frames, rig, ann = clip
    res = evalx.box_centroid_adherence(frames, ann.boxes, ann.colors, rig)
    assert res.expected > 0 and res.miss_rate == 0.0 and res.error_px < 2.0
    blank = evalx.box_centroid_adherence(np.zeros_like(frames), ann.boxes, ann.colors, rig)
    assert blank.miss_rate == 1.0 and blank.detections == 0


def test_centroids_at_night(night_world):
    rig = night_world.rig(frames=range(2))
    frames = scenesim.render_clip(night_world, rig)
    ann = scenesim.export_annotations(night_world, rig)
    res = evalx.box_centroid_adherence(frames, ann.boxes, ann.colors, rig, night=[True, True])
    assert res.miss_rate == 0.0 and res.error_px < 2.0


def test_night_edit_ratio_equals_palette_factor(world, night_world):
    rig = world.rig(frames=range(2))
    day = scenesim.render_clip(world, rig)
    night = scenesim.render_clip(night_world, night_world.rig(frames=range(2)))
    mask = evalx.ground_mask(rig, scenesim.export_annotations(world, rig).boxes, 48, 80)
    assert mask.any() and not mask[..., :10, :].any()  # the sky rows never count
    ratio = evalx.attribute_edit_check(day, night, mask)
    assert ratio == pytest.approx(scenesim.NIGHT_FACTOR, rel=1e-5)
    lo, hi = AcceptanceBands().luminance_band
    assert lo <= ratio <= hi


def test_report_schema_is_stable():
    r = EvalReport(psnr_mean=21.5, flicker=0.01, config_hash="abc")
    text = r.to_text()
    assert [line.split(":")[0] for line in text.splitlines()] == REPORT_KEYS
    assert "seam_err: n/a" in text
    assert EvalReport.from_text(text) == EvalReport(psnr_mean=21.5, flicker=0.01, config_hash="abc")
    with pytest.raises(ValidationError):
        EvalReport.from_text("fid: 3.0\n")
    with pytest.raises(EvaluationError):
        EvalReport(flicker=float("nan")).check_values()


def test_bands():
    good = EvalReport(psnr_mean=25, seam_err=0.01, seam_err_gt=0.005, flicker=0.01, flicker_gt=0.006,
                      box_centroid_err=2.0, box_miss_rate=0.1, attribute_luminance_ratio=0.35)
    assert AcceptanceBands().failures(good) == []
    bad = EvalReport(psnr_mean=15, seam_err=0.1, seam_err_gt=0.005, box_miss_rate=0.5, attribute_luminance_ratio=0.9)
    assert len(AcceptanceBands().failures(bad)) == 4


def test_evaluate_on_ground_truth(clip):
    frames, rig, ann = clip
    r = evalx.evaluate(frames, frames, rig, ann.boxes, ann.colors, config_hash="h")
    assert r.psnr_mean == evalx.PSNR_CAP and r.seam_err == r.seam_err_gt and r.flicker == r.flicker_gt
    assert AcceptanceBands().failures(r) == []
