"""Desk-scale video metrics: PSNR, cross-view seam agreement, flicker, box
centroid adherence and ground luminance for attribute edits."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .errors import EvaluationError, ValidationError
from .geometry import UnifiedRig, project_points
from .scenesim import NIGHT_FACTOR, _rays, box_corners, cast_boxes, ground_plane, intersect_ground

PSNR_CAP = 99.0
COLOR_TAU = 0.15
MIN_VISIBLE = 4  # pixels of an actor that must be unoccluded for it to be expected
LUMA = np.array([0.299, 0.587, 0.114])


def _check_video(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 5 or x.shape[-1] != 3:
        raise ValidationError(f"{name} must be (T, V, H, W, 3), got {x.shape}")
    if not np.isfinite(x).all():
        raise EvaluationError(f"{name} has non-finite values")
    return x


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical inputs give the 99 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def flicker(video: np.ndarray, per_view: bool = False):
    """Mean absolute difference between consecutive frames (overall or per view)."""
    x = _check_video(video, "video")
    if x.shape[0] < 2:
        raise ValidationError("flicker needs at least two frames")
    d = np.abs(np.diff(x, axis=0))
    return d.mean(axis=(0, 2, 3, 4)) if per_view else float(d.mean())


def frame_flicker(video: np.ndarray) -> np.ndarray:
    """Per transition t -> t+1 mean absolute difference, shape (T-1,)."""
    x = _check_video(video, "video")
    return np.abs(np.diff(x, axis=0)).mean(axis=(1, 2, 3, 4))


# -- seams ----------------------------------------------------------------------------------


def bilinear(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample (H, W, c) at continuous pixel coordinates (pixel centres at +0.5)."""
    H, W = img.shape[:2]
    x = np.clip(uv[:, 0] - 0.5, 0, W - 1)
    y = np.clip(uv[:, 1] - 0.5, 0, H - 1)
    x0 = np.minimum(np.floor(x).astype(int), W - 2)
    y0 = np.minimum(np.floor(y).astype(int), H - 2)
    fx, fy = (x - x0)[:, None], (y - y0)[:, None]
    top = img[y0, x0] * (1 - fx) + img[y0, x0 + 1] * fx
    bot = img[y0 + 1, x0] * (1 - fx) + img[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


@dataclass
class SeamPairs:
    """Ground correspondences between adjacent views for one frame."""

    view_a: np.ndarray
    pix_a: np.ndarray  # (n, 2) integer pixel (col, row) in view a
    view_b: np.ndarray
    uv_b: np.ndarray  # (n, 2) continuous coordinates in view b


def seam_correspondences(rig: UnifiedRig, t: int, height: int, width: int, columns: int = 4, max_range: float = 60.0) -> SeamPairs:
    """Boundary-column pixels whose ground point lands inside the neighbouring view."""
    V = rig.num_views
    plane = ground_plane(rig)
    rows = np.arange(height)
    va, pa, vb, ub = [], [], [], []
    for a in range(V):
        cols = np.r_[np.arange(columns), np.arange(width - columns, width)]
        cc, rr = np.meshgrid(cols, rows)
        pix = np.stack([cc.ravel(), rr.ravel()], axis=1)
        o, d = _rays(rig, t, a, pix + 0.5)
        lam = intersect_ground(o[None], d, plane)
        ok = np.isfinite(lam) & (lam < max_range)
        pts = o + lam[ok, None] * d[ok]
        for b in {(a - 1) % V, (a + 1) % V} - {a}:
            uv, depth = project_points(pts, rig, t, b)
            inside = (depth > 0) & (uv[:, 0] >= 0.5) & (uv[:, 0] <= width - 0.5) & (uv[:, 1] >= 0.5) & (uv[:, 1] <= height - 0.5)
            n = int(inside.sum())
            va.append(np.full(n, a))
            pa.append(pix[ok][inside])
            vb.append(np.full(n, b))
            ub.append(uv[inside])
    if not va or sum(len(x) for x in va) == 0:
        return SeamPairs(np.zeros(0, int), np.zeros((0, 2), int), np.zeros(0, int), np.zeros((0, 2)))
    return SeamPairs(np.concatenate(va), np.concatenate(pa), np.concatenate(vb), np.concatenate(ub))


def seam_consistency(video: np.ndarray, rig: UnifiedRig, columns: int = 4) -> float:
    """Mean |pixel_A - pixel_B| over ground points seen by adjacent views' boundary columns."""
    x = _check_video(video, "video")
    T, V, H, W, _ = x.shape
    if (T, V) != (rig.num_frames, rig.num_views):
        raise ValidationError(f"video is {T}x{V} frame-views but the rig has {rig.num_frames}x{rig.num_views}")
    total, count = 0.0, 0
    for t in range(T):
        sp = seam_correspondences(rig, t, H, W, columns)
        for a, b in set(zip(sp.view_a.tolist(), sp.view_b.tolist())):
            sel = (sp.view_a == a) & (sp.view_b == b)
            ca = x[t, a][sp.pix_a[sel, 1], sp.pix_a[sel, 0]]
            cb = bilinear(x[t, b], sp.uv_b[sel])
            total += float(np.abs(ca - cb).sum())
            count += ca.size
    if count == 0:
        raise ValidationError("the rig's adjacent views share no ground overlap")
    return total / count


# -- boxes ----------------------------------------------------------------------------------


@dataclass
class CentroidResult:
    error_px: float  # mean over detections (nan when nothing detected)
    miss_rate: float  # misses / in-frustum actors
    detections: int
    expected: int


def in_frustum(box: np.ndarray, rig: UnifiedRig, t: int, v: int, height: int, width: int, near: float = 0.5) -> bool:
    uv, depth = project_points(box_corners(box), rig, t, v)
    return bool(
        (depth > near).all() and (uv[:, 0] >= 0).all() and (uv[:, 0] <= width).all() and (uv[:, 1] >= 0).all() and (uv[:, 1] <= height).all()
    )


def visible_pixels(boxes: np.ndarray, rig: UnifiedRig, t: int, v: int, height: int, width: int) -> np.ndarray:
    """Per box, the number of pixel centres whose nearest hit is that box."""
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    uu, vv = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    o, d = _rays(rig, t, v, np.stack([uu, vv], axis=-1).reshape(-1, 2))
    _, idx, _ = cast_boxes(o, d, boxes)
    return np.bincount(idx[idx >= 0], minlength=len(boxes))


def box_centroid_adherence(
    video: np.ndarray,
    boxes: np.ndarray,
    colors: np.ndarray,
    rig: UnifiedRig,
    night: Optional[Sequence[bool]] = None,
    tau: float = COLOR_TAU,
) -> CentroidResult:
    """Centroid of pixels near each actor's colour vs its projected 3-D box centre.

    ``boxes`` is (T, N, 7) in the rig's unified frame and ``colors`` (N, 3).
    Only actors whose whole box projects inside the image and that keep at
    least :data:`MIN_VISIBLE` unoccluded pixels are scored. Night
    frames are brightened by the renderer's night factor before colours are
    compared, so ``tau`` means the same thing at any time of day.
    """
    x = _check_video(video, "video")
    T, V, H, W, _ = x.shape
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.shape[:1] != (T,) or boxes.shape[1] != len(colors):
        raise ValidationError("boxes must be (T, N, 7) with one colour per actor")
    errs, expected = [], 0
    for t in range(T):
        scale = NIGHT_FACTOR if night is not None and night[t] else 1.0
        for v in range(V):
            img = x[t, v]
            seen = visible_pixels(boxes[t], rig, t, v, H, W)
            for n in range(boxes.shape[1]):
                if seen[n] < MIN_VISIBLE or not in_frustum(boxes[t, n], rig, t, v, H, W):
                    continue
                expected += 1
                dist = np.linalg.norm(img / scale - colors[n], axis=-1)
                rr, cc = np.nonzero(dist < tau)
                if rr.size == 0:
                    continue
                centroid = np.array([cc.mean() + 0.5, rr.mean() + 0.5])
                uv, _ = project_points(boxes[t, n, None, :3], rig, t, v)
                errs.append(float(np.linalg.norm(centroid - uv[0])))
    if expected == 0:
        return CentroidResult(float("nan"), 0.0, 0, 0)
    err = float(np.mean(errs)) if errs else float("nan")
    return CentroidResult(err, 1.0 - len(errs) / expected, len(errs), expected)


# -- attribute edits -------------------------------------------------------------------------


def ground_mask(rig: UnifiedRig, boxes: Optional[np.ndarray], height: int, width: int, max_range: float = 60.0) -> np.ndarray:
    """(T, V, H, W) true where the pixel-centre ray meets the ground before any box."""
    T, V = rig.num_frames, rig.num_views
    plane = ground_plane(rig)
    uu, vv = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    uv = np.stack([uu, vv], axis=-1).reshape(-1, 2)
    out = np.zeros((T, V, height, width), dtype=bool)
    for t in range(T):
        for v in range(V):
            o, d = _rays(rig, t, v, uv)
            lam = intersect_ground(o[None], d, plane)
            hit = np.isfinite(lam) & (lam < max_range)
            if boxes is not None and len(boxes[t]):
                lam_b, _, _ = cast_boxes(o, d, boxes[t])
                hit &= lam < lam_b
            out[t, v] = hit.reshape(height, width)
    return out


def luminance(video: np.ndarray) -> np.ndarray:
    return np.asarray(video, dtype=np.float64) @ LUMA


def attribute_edit_check(video_orig: np.ndarray, video_edit: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Ratio of mean ground luminance, edited over original."""
    a = _check_video(video_orig, "original")
    b = _check_video(video_edit, "edited")
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    m = np.ones(a.shape[:4], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != a.shape[:4] or not m.any():
        raise ValidationError("ground mask must be (T, V, H, W) and select at least one pixel")
    la = luminance(a)[m].mean()
    if la <= 0:
        raise EvaluationError("original ground luminance is zero")
    return float(luminance(b)[m].mean() / la)


# -- reports ---------------------------------------------------------------------------------


@dataclass
class EvalReport:
    psnr_mean: Optional[float] = None
    seam_err: Optional[float] = None
    seam_err_gt: Optional[float] = None
    flicker: Optional[float] = None
    flicker_gt: Optional[float] = None
    box_centroid_err: Optional[float] = None
    box_miss_rate: Optional[float] = None
    attribute_luminance_ratio: Optional[float] = None
    attribute_luminance_delta: Optional[float] = None  # |ratio - 1|
    config_hash: str = ""

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                s = "n/a"
            elif isinstance(v, float):
                s = f"{v:.6f}"
            else:
                s = str(v)
            lines.append(f"{f.name}: {s}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kw = {}
        names = {f.name: f for f in fields(cls)}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, _, v = line.partition(":")
            k, v = k.strip(), v.strip()
            if k not in names:
                raise ValidationError(f"unknown report key {k!r}")
            kw[k] = None if v == "n/a" else (v if k == "config_hash" else float(v))
        return cls(**kw)

    def check_values(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not (np.isfinite(v) and v >= 0):
                raise EvaluationError(f"{f.name} = {v} is not a finite non-negative number")


@dataclass
class AcceptanceBands:
    psnr_min: float = 20.0
    seam_factor: float = 3.0
    flicker_factor: float = 2.0
    centroid_max: float = 4.0
    miss_max: float = 0.2
    luminance_band: tuple[float, float] = (0.2, 0.6)

    def failures(self, r: EvalReport) -> list[str]:
        out = []
        if r.psnr_mean is not None and r.psnr_mean < self.psnr_min:
            out.append(f"psnr_mean {r.psnr_mean:.3f} < {self.psnr_min}")
        if r.seam_err is not None and r.seam_err_gt is not None and r.seam_err > self.seam_factor * r.seam_err_gt:
            out.append(f"seam_err {r.seam_err:.4f} > {self.seam_factor} x GT {r.seam_err_gt:.4f}")
        if r.flicker is not None and r.flicker_gt is not None and r.flicker > self.flicker_factor * r.flicker_gt:
            out.append(f"flicker {r.flicker:.4f} > {self.flicker_factor} x GT {r.flicker_gt:.4f}")
        if r.box_centroid_err is not None and not r.box_centroid_err <= self.centroid_max:
            out.append(f"box_centroid_err {r.box_centroid_err:.3f} > {self.centroid_max}")
        if r.box_miss_rate is not None and r.box_miss_rate > self.miss_max:
            out.append(f"box_miss_rate {r.box_miss_rate:.3f} > {self.miss_max}")
        if r.attribute_luminance_ratio is not None:
            lo, hi = self.luminance_band
            if not lo <= r.attribute_luminance_ratio <= hi:
                out.append(f"attribute_luminance_ratio {r.attribute_luminance_ratio:.3f} outside [{lo}, {hi}]")
        return out


def evaluate(
    gen: np.ndarray,
    gt: np.ndarray,
    rig: Optional[UnifiedRig] = None,
    boxes: Optional[np.ndarray] = None,
    colors: Optional[np.ndarray] = None,
    night: Optional[Sequence[bool]] = None,
    config_hash: str = "",
) -> EvalReport:
    """Report comparing a generated (T, V, H, W, 3) video in [0, 1] to ground truth."""
    g, r = _check_video(gen, "generated"), _check_video(gt, "ground truth")
    if g.shape != r.shape:
        raise ValidationError(f"shape mismatch: {g.shape} vs {r.shape}")
    rep = EvalReport(psnr_mean=psnr(g, r), config_hash=config_hash)
    if g.shape[0] >= 2:
        rep.flicker, rep.flicker_gt = flicker(g), flicker(r)
    if rig is not None:
        rep.seam_err, rep.seam_err_gt = seam_consistency(g, rig), seam_consistency(r, rig)
        if boxes is not None and colors is not None:
            res = box_centroid_adherence(g, boxes, colors, rig, night)
            if res.expected:
                rep.box_miss_rate = res.miss_rate
                rep.box_centroid_err = res.error_px if res.detections else None
    return rep
