"""Local conditions (box and lane images, image adapter), global attribute
tokens, and condition dropout for classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError, ValidationError, VocabularyError
from .geometry import UnifiedRig, pixel_grid, ray_maps
from .scenesim import PALETTE, TIMES, VIEW_NAMES, WEATHERS, _rays, cast_boxes, export_annotations

LANE_COLOR = np.array([1.0, 1.0, 1.0])
FACE_SHADE = 0.6
NEAR_PLANE = 0.1

FAMILIES = ("boxes", "hdmap", "global", "rays")


# -- sparse condition images ------------------------------------------------------


def project_boxes(
    boxes: np.ndarray,
    rig: UnifiedRig,
    t: int,
    v: int,
    height: int,
    width: int,
    colors: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Identity-coloured box image: shaded visible faces plus full-colour edges.

    Depth order comes from nearest-hit ray casting through each pixel centre,
    so a nearer box always wins shared pixels and boxes behind the camera
    never appear. Edges are the visible silhouette and face boundaries.
    """
    img = np.zeros((height, width, 3), dtype=np.float32)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    if len(boxes) == 0:
        return img
    if colors is None:
        colors = PALETTE[np.arange(len(boxes)) % len(PALETTE)]
    o, d = _rays(rig, t, v, pixel_grid(height, width)[..., :2].reshape(-1, 2))
    _, idx, face = cast_boxes(o, d, boxes)
    idx = idx.reshape(height, width)
    face = face.reshape(height, width)
    key = np.where(idx >= 0, idx * 8 + face, -1)
    pad = np.pad(key, 1, mode="edge")
    edge = np.zeros_like(key, dtype=bool)
    for dy, dx in ((0, 1), (2, 1), (1, 0), (1, 2)):
        edge |= pad[dy : dy + height, dx : dx + width] != key
    hit = idx >= 0
    col = np.asarray(colors, dtype=np.float64)[np.where(hit, idx, 0)]
    shade = np.where(edge, 1.0, FACE_SHADE)[..., None]
    img[hit] = (col * shade)[hit]
    return img


def _clip_segment(a: np.ndarray, b: np.ndarray, near: float):
    """Clip camera-space segments (N, 3) to z >= near; returns kept (a, b)."""
    za, zb = a[:, 2], b[:, 2]
    keep = (za >= near) | (zb >= near)
    a, b, za, zb = a[keep], b[keep], za[keep], zb[keep]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (near - za) / (zb - za)
    p = a + s[:, None] * (b - a)  # the segment's crossing of the near plane
    return np.where((za < near)[:, None], p, a), np.where((zb < near)[:, None], p, b)


def rasterize_hdmap(
    lanes: Sequence[np.ndarray],
    rig: UnifiedRig,
    t: int,
    v: int,
    height: int,
    width: int,
    color: np.ndarray = LANE_COLOR,
) -> np.ndarray:
    """Lane polylines drawn 1 px wide after clipping to the near plane."""
    img = np.zeros((height, width, 3), dtype=np.float32)
    rig._check(t, v)
    m = rig.extrinsics[t, v]
    kk = rig.intrinsics[v].matrix()
    segs_a, segs_b = [], []
    for line in lanes:
        line = np.asarray(line, dtype=np.float64)
        if len(line) < 2:
            continue
        cam = (line - m[:3, 3]) @ m[:3, :3]
        segs_a.append(cam[:-1])
        segs_b.append(cam[1:])
    if not segs_a:
        return img
    a, b = _clip_segment(np.concatenate(segs_a), np.concatenate(segs_b), NEAR_PLANE)
    if len(a) == 0:
        return img
    pa = (a @ kk.T)[:, :2] / a[:, 2:3]
    pb = (b @ kk.T)[:, :2] / b[:, 2:3]
    # discard segments entirely off one side of the image
    lo, hi = np.minimum(pa, pb), np.maximum(pa, pb)
    vis = (hi[:, 0] >= 0) & (lo[:, 0] < width) & (hi[:, 1] >= 0) & (lo[:, 1] < height)
    pa, pb = pa[vis], pb[vis]
    if len(pa) == 0:
        return img
    length = np.linalg.norm(pb - pa, axis=1)
    n = np.minimum(np.ceil(length / 0.5).astype(np.int64) + 1, 4000)
    seg = np.repeat(np.arange(len(pa)), n)
    start = np.cumsum(n) - n
    frac = (np.arange(n.sum()) - np.repeat(start, n)) / np.maximum(np.repeat(n, n) - 1, 1)
    pts = pa[seg] + frac[:, None] * (pb[seg] - pa[seg])
    u = np.floor(pts[:, 0]).astype(np.int64)
    w = np.floor(pts[:, 1]).astype(np.int64)
    ok = (u >= 0) & (u < width) & (w >= 0) & (w < height)
    img[w[ok], u[ok]] = color
    return img


@dataclass
class ConditionImages:
    boxes_img: np.ndarray  # (T, V, H, W, 3)
    hdmap_img: np.ndarray  # (T, V, H, W, 3)


def condition_images(annotations, rig: UnifiedRig, height: int, width: int) -> ConditionImages:
    T, V = rig.num_frames, rig.num_views
    boxes = np.zeros((T, V, height, width, 3), dtype=np.float32)
    hdmap = np.zeros_like(boxes)
    for t in range(T):
        for v in range(V):
            boxes[t, v] = project_boxes(annotations.boxes[t], rig, t, v, height, width, annotations.colors)
            hdmap[t, v] = rasterize_hdmap(annotations.lanes, rig, t, v, height, width)
    return ConditionImages(boxes, hdmap)


# -- adapter ------------------------------------------------------------------------


class Adapter(nn.Module):
    """Strided conv stack over the 6-channel condition image.

    The first layer folds each ``patch x patch`` block into channels and mixes
    them linearly; ``first_act=None`` keeps it linear. Level ``i`` is taken
    after ``i`` stride-2 stages, projected to the model width and resized
    bilinearly back to the patch grid.
    """

    def __init__(self, width: int, patch: int, levels: int = 4, hidden: int = 64, first_act: Optional[str] = "silu"):
        super().__init__()
        self.patch = patch
        self.levels = levels
        self.first = nn.Conv2d(6 * patch * patch, hidden, 1)
        self.first_act = first_act
        self.down = nn.ModuleList(nn.Conv2d(hidden, hidden, 3, stride=2, padding=1) for _ in range(levels - 1))
        self.proj = nn.ModuleList(nn.Conv2d(hidden, width, 1) for _ in range(levels))

    def forward(self, cond: torch.Tensor) -> list[torch.Tensor]:
        """``(..., H, W, 6)`` -> ``levels`` maps of shape ``(..., H/p, W/p, C)``."""
        if cond.shape[-1] != 6:
            raise DimensionError(f"adapter expects 6 condition channels, got {cond.shape[-1]}")
        *lead, H, W, _ = cond.shape
        x = cond.reshape(-1, H, W, 6).permute(0, 3, 1, 2)
        x = F.pixel_unshuffle(x, self.patch)
        h = self.first(x)
        if self.first_act == "silu":
            h = F.silu(h)
        grid = h.shape[-2:]
        feats = [self.proj[0](h)]
        for i, conv in enumerate(self.down):
            h = F.silu(conv(h))
            f = self.proj[i + 1](h)
            feats.append(F.interpolate(f, size=grid, mode="bilinear", align_corners=False))
        return [f.permute(0, 2, 3, 1).reshape(*lead, *grid, -1) for f in feats]


def adapter_forward(cond: ConditionImages | torch.Tensor, adapter: Adapter) -> list[torch.Tensor]:
    if isinstance(cond, ConditionImages):
        cond = torch.from_numpy(np.concatenate([cond.boxes_img, cond.hdmap_img], axis=-1))
    return adapter(cond.to(adapter.first.weight.dtype))


# -- global tokens --------------------------------------------------------------------

NULL_TOKEN = "<null>"


class Vocabulary:
    def __init__(self, words: Sequence[str] | None = None):
        words = list(words) if words is not None else default_words()
        if words[0] != NULL_TOKEN:
            words = [NULL_TOKEN] + [w for w in words if w != NULL_TOKEN]
        if len(set(words)) != len(words):
            raise ValidationError("duplicate vocabulary entries")
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise VocabularyError(f"unknown token {word!r}") from None

    def decode(self, idx: int) -> str:
        if not 0 <= idx < len(self.words):
            raise VocabularyError(f"token id {idx} outside vocabulary of {len(self.words)}")
        return self.words[idx]

    def encode_sequence(self, words: Sequence[str], length: int) -> list[int]:
        if len(words) > length:
            raise ValidationError(f"{len(words)} tokens exceed the slot count {length}")
        return [self.encode(w) for w in words] + [0] * (length - len(words))


def default_words() -> list[str]:
    return [NULL_TOKEN, *VIEW_NAMES, *TIMES, *WEATHERS, *(f"vehicles_{i}" for i in range(9))]


class TokenEmbedder(nn.Module):
    """Lookup plus a learned per-slot offset; the null id embeds to zeros."""

    def __init__(self, vocab_size: int, width: int, length: int):
        super().__init__()
        self.table = nn.Embedding(vocab_size, width, padding_idx=0)
        nn.init.normal_(self.table.weight, std=0.5)
        with torch.no_grad():
            self.table.weight[0].zero_()
        self.pos = nn.Parameter(torch.randn(length, width) * 0.02)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.shape[-1] != self.pos.shape[0]:
            raise DimensionError(f"expected {self.pos.shape[0]} token slots, got {ids.shape[-1]}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.table.num_embeddings):
            raise VocabularyError("token id outside the vocabulary")
        valid = (ids != 0).unsqueeze(-1).to(self.pos.dtype)
        return self.table(ids) + self.pos * valid


def embed_global(tokens: torch.Tensor, table: TokenEmbedder) -> torch.Tensor:
    return table(tokens)


# -- condition bundles and dropout ------------------------------------------------------


@dataclass
class Conditions:
    """Model-ready conditions for a batch, shaped ``(B, T, V, ...)``.

    ``None`` fields and zeroed fields both mean "null". Rays are nulled by
    ``ray_keep`` (per sample) because the encoder of an all-zero ray is not
    zero.
    """

    boxes: Optional[torch.Tensor] = None  # (B, T, V, H, W, 3)
    hdmap: Optional[torch.Tensor] = None  # (B, T, V, H, W, 3)
    tokens: Optional[torch.Tensor] = None  # (B, T, V, L) int64
    ray_origins: Optional[torch.Tensor] = None  # (B, T, V, H, W, 3)
    ray_dirs: Optional[torch.Tensor] = None
    ray_keep: Optional[torch.Tensor] = None  # (B,)

    def map(self, fn) -> "Conditions":
        return Conditions(**{f.name: (None if getattr(self, f.name) is None else fn(getattr(self, f.name))) for f in fields(self)})

    def null(self) -> "Conditions":
        """The unconditional branch: every family replaced by its null value."""
        return Conditions(
            boxes=None if self.boxes is None else torch.zeros_like(self.boxes),
            hdmap=None if self.hdmap is None else torch.zeros_like(self.hdmap),
            tokens=None if self.tokens is None else torch.zeros_like(self.tokens),
            ray_origins=self.ray_origins,
            ray_dirs=self.ray_dirs,
            ray_keep=None if self.ray_origins is None else torch.zeros(self.ray_origins.shape[0]),
        )

    def with_tokens(self, tokens: torch.Tensor) -> "Conditions":
        return replace(self, tokens=tokens)


def drop_conditions(
    conds: Conditions,
    rate: float,
    rng: np.random.Generator,
    independent: bool = True,
) -> tuple[Conditions, np.ndarray]:
    """Null each condition family per sample with probability ``rate``.

    Returns the new conditions and the ``(B, 4)`` boolean drop matrix in
    :data:`FAMILIES` order. ``independent=False`` drops all families together.
    """
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"drop rate must lie in [0, 1), got {rate}")
    B = _batch_size(conds)
    if independent:
        drop = rng.random((B, len(FAMILIES))) < rate
    else:
        drop = np.repeat(rng.random((B, 1)) < rate, len(FAMILIES), axis=1)
    if not drop.any():
        return conds, drop

    def keep(i: int, x: torch.Tensor) -> torch.Tensor:
        k = torch.from_numpy(~drop[:, i]).to(x.dtype if x.is_floating_point() else torch.int64)
        return x * k.view(-1, *([1] * (x.dim() - 1)))

    out = Conditions(
        boxes=None if conds.boxes is None else keep(0, conds.boxes),
        hdmap=None if conds.hdmap is None else keep(1, conds.hdmap),
        tokens=None if conds.tokens is None else keep(2, conds.tokens),
        ray_origins=conds.ray_origins,
        ray_dirs=conds.ray_dirs,
        ray_keep=None if conds.ray_origins is None else keep(3, _ray_keep(conds)),
    )
    return out, drop


def _ray_keep(conds: Conditions) -> torch.Tensor:
    if conds.ray_keep is not None:
        return conds.ray_keep
    return torch.ones(conds.ray_origins.shape[0])


def _batch_size(conds: Conditions) -> int:
    for f in fields(conds):
        x = getattr(conds, f.name)
        if x is not None:
            return x.shape[0]
    raise ValidationError("empty condition bundle")


def parse_attribute_override(text: str) -> dict[str, str]:
    """``"night"``, ``"snowy"`` or ``"night,snowy"`` -> ``{"time": ..., "weather": ...}`` (partial)."""
    out: dict[str, str] = {}
    for word in (w.strip() for w in text.split(",")):
        if word in TIMES and "time" not in out:
            out["time"] = word
        elif word in WEATHERS and "weather" not in out:
            out["weather"] = word
        else:
            raise VocabularyError(f"{word!r} is not a time-of-day or weather token (or repeats one)")
    return out


def encode_tokens(
    words: Sequence[Sequence[Sequence[str]]],
    vocab: Vocabulary,
    length: int,
    override: Optional[dict] = None,
) -> torch.Tensor:
    """Per-slot word lists ``[t][v] -> [view, time, weather, count]`` to ids ``(T, V, L)``.

    ``override`` replaces the time and/or weather word in every slot (editing).
    """
    if override:
        unknown = set(override) - {"time", "weather"}
        if unknown:
            raise ValidationError(f"unknown override keys {sorted(unknown)}")
        tm, wx = override.get("time"), override.get("weather")
        if tm is not None and tm not in TIMES or wx is not None and wx not in WEATHERS:
            raise VocabularyError(f"bad attribute override {override}")
        words = [[[w[0], tm or w[1], wx or w[2], *w[3:]] for w in row] for row in words]
    return torch.tensor([[vocab.encode_sequence(w, length) for w in row] for row in words], dtype=torch.long)


def clip_conditions(
    world,
    rig: UnifiedRig,
    vocab: Optional[Vocabulary] = None,
    text_len: int = 8,
    override: Optional[dict] = None,
) -> Conditions:
    """Every condition family for one clip, unbatched: fields are ``(T, V, ...)``."""
    H, W = world.spec.height, world.spec.width
    ann = export_annotations(world, rig)
    imgs = condition_images(ann, rig, H, W)
    origins, dirs = ray_maps(rig, H, W)
    return Conditions(
        boxes=torch.from_numpy(imgs.boxes_img),
        hdmap=torch.from_numpy(imgs.hdmap_img),
        tokens=encode_tokens(ann.tokens, vocab or Vocabulary(), text_len, override),
        ray_origins=torch.from_numpy(origins.astype(np.float32)),
        ray_dirs=torch.from_numpy(dirs.astype(np.float32)),
    )


def stack_conditions(items: Sequence[Conditions]) -> Conditions:
    """Batch unbatched bundles along a new leading axis; ``ray_keep`` starts at ones."""
    out = {}
    for f in fields(Conditions):
        vals = [getattr(c, f.name) for c in items]
        if f.name == "ray_keep":
            continue
        if any(v is None for v in vals):
            if not all(v is None for v in vals):
                raise ValidationError(f"condition family {f.name!r} present in only some items")
            out[f.name] = None
        else:
            out[f.name] = torch.stack(vals)
    if out["ray_origins"] is not None:
        out["ray_keep"] = torch.ones(len(items))
    return Conditions(**out)
