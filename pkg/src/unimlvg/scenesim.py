"""Deterministic synthetic driving worlds.

A world is a constant-curvature road (straight when the curvature is 0)
with solid lane boundaries, cars driving along lanes, optional cars parked
on the shoulders, an ego vehicle following the middle lane and a ring of
cameras. Frames are rendered by casting each pixel's ray against the actor
boxes and the ground plane.

World frame: x forward (at frame 0), y left, z up, ground at z = 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import container
from .errors import GenerationError, ValidationError
from .geometry import (
    CameraIntrinsics,
    UnifiedRig,
    build_unified_rig,
    camera_mount,
    pixel_grid,
    pose_matrix,
    rot_z,
)
from .numerics import rng_stream

TIMES = ("day", "night")
WEATHERS = ("sunny", "rainy", "snowy")
VIEW_NAMES = ("front", "front_left", "back_left", "back", "back_right", "front_right")

# Saturated identity colours; pairwise distance >= 0.5 so they stay separable at night.
PALETTE = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.5, 0.0],
        [0.5, 0.0, 1.0],
    ]
)

NIGHT_FACTOR = 0.35
SKY_HORIZON = np.array([0.75, 0.85, 0.95])
SKY_ZENITH = np.array([0.40, 0.58, 0.90])
ROAD = np.array([0.42, 0.42, 0.44])
GRASS = np.array([0.32, 0.48, 0.26])
STRIPE = np.array([0.95, 0.95, 0.95])
RAIN_SKY = np.array([0.55, 0.57, 0.60])
SNOW_SKY = np.array([0.80, 0.82, 0.85])
SNOW = np.array([0.93, 0.94, 0.96])

ACTOR_SIZES = ((4.4, 1.9, 1.6), (4.8, 2.0, 1.8), (5.6, 2.2, 2.4))

KIND_SKY, KIND_GROUND, KIND_ACTOR = 0, 1, 2


@dataclass
class SceneSpec:
    n_actors: int = 4
    static_actors: int = 0  # of n_actors, parked on the shoulders
    horizon: int = 8
    n_views: int = 6
    height: int = 48
    width: int = 80
    n_lanes: int = 3
    lane_width: float = 3.5
    curvature: Optional[float] = None  # None -> drawn per scene
    ego_speed: tuple[float, float] = (1.0, 2.5)  # metres per frame
    attributes: Optional[tuple[str, str]] = None  # (time, weather); None -> drawn
    attribute_switch: Optional[tuple[int, str, str]] = None  # (frame, time, weather)
    focal: float = 56.0
    camera_height: float = 1.6
    stripe_width: float = 0.3
    dash: Optional[tuple[float, float]] = (3.0, 6.0)  # interior lane lines: painted, gap (m); None -> solid
    supersample: int = 2

    def validate(self) -> None:
        if self.n_actors < 0 or not 0 <= self.static_actors <= self.n_actors:
            raise GenerationError("actor counts must satisfy 0 <= static_actors <= n_actors")
        if self.horizon < 1:
            raise GenerationError("horizon must be >= 1")
        if not 1 <= self.n_views <= len(VIEW_NAMES):
            raise GenerationError(f"n_views must be in [1, {len(VIEW_NAMES)}]")
        if self.n_actors > len(PALETTE):
            raise GenerationError(f"at most {len(PALETTE)} actors have distinct identity colours")
        for attr in [self.attributes, self.attribute_switch and self.attribute_switch[1:]]:
            if attr and (attr[0] not in TIMES or attr[1] not in WEATHERS):
                raise GenerationError(f"unknown attribute pair {attr}")


@dataclass
class Actor:
    actor_id: int
    extent: tuple[float, float, float]  # length, width, height (m)
    color_id: int
    lane_offset: float
    s0: float
    speed: float  # metres per frame along the road

    @property
    def color(self) -> np.ndarray:
        return PALETTE[self.color_id]


@dataclass
class SceneWorld:
    seed: int
    spec: SceneSpec
    curvature: float
    ego_offset: float
    ego_speed: float
    actors: list[Actor]
    attributes: list[tuple[str, str]]  # per frame
    intrinsics: list[CameraIntrinsics] = field(default_factory=list)
    mounts: np.ndarray = field(default_factory=lambda: np.zeros((0, 4, 4)))

    @property
    def horizon(self) -> int:
        return self.spec.horizon

    @property
    def lane_boundaries(self) -> list[float]:
        n, w = self.spec.n_lanes, self.spec.lane_width
        return [(k - n / 2) * w for k in range(n + 1)]

    # -- road geometry ------------------------------------------------------
    def road_point(self, s, d):
        """World xy and heading for arc length ``s`` and left offset ``d``."""
        s = np.asarray(s, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        k = self.curvature
        head = k * s
        if abs(k) < 1e-12:
            x, y = s, np.zeros_like(s)
        else:
            x, y = np.sin(head) / k, (1.0 - np.cos(head)) / k
        return x - d * np.sin(head), y + d * np.cos(head), head

    def lateral_offset(self, x, y):
        """Signed left offset from the road centre line for world points."""
        k = self.curvature
        if abs(k) < 1e-12:
            return np.asarray(y, dtype=np.float64)
        r = np.hypot(x, y - 1.0 / k)
        return math.copysign(1.0, k) * (1.0 / abs(k) - r)

    def arc_length(self, x, y):
        """Arc length along the road centre line of the foot point of world points."""
        k = self.curvature
        if abs(k) < 1e-12:
            return np.asarray(x, dtype=np.float64)
        return np.arctan2(k * np.asarray(x), 1.0 - k * np.asarray(y)) / k

    def painted(self, x, y) -> np.ndarray:
        """True where a world ground point lies on a lane marking."""
        d = self.lateral_offset(x, y)
        bounds = np.array(self.lane_boundaries)
        gap = np.abs(d[..., None] - bounds)
        near = gap.min(axis=-1) < self.spec.stripe_width / 2
        if self.spec.dash is None:
            return near
        interior = (gap.argmin(axis=-1) > 0) & (gap.argmin(axis=-1) < len(bounds) - 1)
        paint, skip = self.spec.dash
        on = np.mod(self.arc_length(x, y), paint + skip) < paint
        return near & (~interior | on)

    def ego_pose(self, t: int) -> np.ndarray:
        x, y, h = self.road_point(self.ego_speed * t, self.ego_offset)
        return pose_matrix(rot_z(float(h)), np.array([float(x), float(y), 0.0]))

    def ego_poses(self, frames: Sequence[int] | None = None) -> np.ndarray:
        frames = range(self.horizon) if frames is None else frames
        return np.stack([self.ego_pose(t) for t in frames])

    def actor_box_world(self, actor: Actor, t: int) -> tuple[np.ndarray, float]:
        x, y, h = self.road_point(actor.s0 + actor.speed * t, actor.lane_offset)
        return np.array([float(x), float(y), actor.extent[2] / 2]), float(h)

    def lane_polylines(self, s_range=(-60.0, 160.0), step: float = 2.0) -> list[np.ndarray]:
        s = np.arange(s_range[0], s_range[1] + 1e-9, step)
        out = []
        for d in self.lane_boundaries:
            x, y, _ = self.road_point(s, d)
            out.append(np.stack([x, y, np.zeros_like(x)], axis=-1))
        return out

    def rig(self, frames: Sequence[int] | None = None, views: Sequence[int] | None = None) -> UnifiedRig:
        """Unified rig anchored at the first listed frame's front camera."""
        frames = list(range(self.horizon)) if frames is None else list(frames)
        views = list(range(self.spec.n_views)) if views is None else list(views)
        if any(not 0 <= f < self.horizon for f in frames):
            raise ValidationError("frame outside the scene horizon")
        rig = build_unified_rig(
            [self.intrinsics[v] for v in views],
            self.ego_poses(frames),
            self.mounts[views],
            front_view=views.index(0) if 0 in views else 0,
        )
        rig.frame_ids = frames
        rig.view_ids = views
        return rig


def default_intrinsics(spec: SceneSpec) -> CameraIntrinsics:
    return CameraIntrinsics(spec.focal, spec.focal, spec.width / 2, spec.height / 2)


def default_mounts(spec: SceneSpec) -> np.ndarray:
    """Co-located cameras at 60 degree yaw spacing, view 0 looking forward."""
    pos = (1.0, 0.0, spec.camera_height)
    return np.stack([camera_mount(math.radians(60.0 * v), pos) for v in range(spec.n_views)])


def _identity_color(actor_id: int, used: set[int]) -> int:
    # hash-to-colour with linear rehash on collision
    h = (actor_id * 2654435761) & 0xFFFFFFFF
    c = h % len(PALETTE)
    while c in used:
        c = (c + 1) % len(PALETTE)
    return c


def generate_scene(seed: int, spec: SceneSpec | None = None) -> SceneWorld:
    spec = spec or SceneSpec()
    spec.validate()
    rng = rng_stream(seed, "scene")

    if spec.curvature is None:
        curv = 0.0 if rng.random() < 0.5 else float(rng.choice([-1, 1]) * rng.uniform(0.005, 0.02))
    else:
        curv = float(spec.curvature)
    ego_speed = float(rng.uniform(*spec.ego_speed))
    if spec.attributes is None:
        attrs = (TIMES[int(rng.integers(2))], WEATHERS[int(rng.integers(3))])
    else:
        attrs = tuple(spec.attributes)
    attributes = [attrs] * spec.horizon
    if spec.attribute_switch is not None:
        f0, tm, wx = spec.attribute_switch
        attributes = [attrs if t < f0 else (tm, wx) for t in range(spec.horizon)]

    n, w = spec.n_lanes, spec.lane_width
    ego_lane = n // 2
    lane_centres = [(k + 0.5 - n / 2) * w for k in range(n)]
    ego_offset = lane_centres[ego_lane]
    shoulders = [-(n / 2) * w - 1.5, (n / 2) * w + 1.5]
    slot_s = np.arange(-30.0, 60.0, 10.0)

    lane_speed = [ego_speed if k == ego_lane else float(rng.uniform(0.5, 1.5) * ego_speed) for k in range(n)]
    moving_slots = [(k, s) for k in range(n) for s in slot_s if not (k == ego_lane and abs(s) < 15.0)]
    static_slots = [(side, s) for side in range(2) for s in slot_s]
    n_static = spec.static_actors
    n_moving = spec.n_actors - n_static
    if n_moving > len(moving_slots) or n_static > len(static_slots):
        raise GenerationError(
            f"lane capacity exceeded: {n_moving} moving / {n_static} parked actors for "
            f"{len(moving_slots)} / {len(static_slots)} slots"
        )

    ids = rng.choice(np.arange(1, 10_000), size=spec.n_actors, replace=False)
    used: set[int] = set()
    actors: list[Actor] = []
    picks_m = rng.permutation(len(moving_slots))[:n_moving]
    picks_s = rng.permutation(len(static_slots))[:n_static]
    placements = [(lane_centres[moving_slots[i][0]], moving_slots[i][1], lane_speed[moving_slots[i][0]]) for i in picks_m]
    placements += [(shoulders[static_slots[i][0]], static_slots[i][1], 0.0) for i in picks_s]
    for aid, (d, s0, speed) in zip(ids, placements):
        size = ACTOR_SIZES[int(rng.integers(len(ACTOR_SIZES)))]
        c = _identity_color(int(aid), used)
        used.add(c)
        jitter = float(rng.uniform(-2.0, 2.0))
        actors.append(Actor(int(aid), tuple(size), c, float(d), float(s0 + jitter), float(speed)))

    intr = default_intrinsics(spec)
    return SceneWorld(
        seed=seed,
        spec=spec,
        curvature=curv,
        ego_offset=ego_offset,
        ego_speed=ego_speed,
        actors=actors,
        attributes=attributes,
        intrinsics=[intr] * spec.n_views,
        mounts=default_mounts(spec),
    )


# -- boxes in the unified frame ---------------------------------------------


def box_axes(yaw: float) -> np.ndarray:
    """Columns: box length, width (left) and height (up) axes in unified coords.

    Valid for the level rigs produced here, where unified -y is world up and
    ``yaw`` is the heading relative to the unified forward axis, CCW from above.
    """
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[-s, -c, 0.0], [0.0, 0.0, -1.0], [c, -s, 0.0]])


def box_corners(box: np.ndarray) -> np.ndarray:
    """(8, 3) corners of a ``[cx, cy, cz, l, w, h, yaw]`` box."""
    centre, ext, yaw = box[:3], box[3:6], box[6]
    signs = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], dtype=np.float64)
    return centre + (signs * ext / 2) @ box_axes(yaw).T


BOX_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8) if bin(a ^ b).count("1") == 1]


def world_boxes(world: SceneWorld, rig: UnifiedRig, t: int) -> np.ndarray:
    """(N, 7) actor boxes at rig frame ``t`` in the rig's unified frame."""
    ft = _frame_id(rig, t)
    m = rig.to_unified
    yaw0 = math.atan2(-m[0, 0], m[2, 0]) if m is not None else 0.0  # heading of world +x in unified
    out = np.zeros((len(world.actors), 7))
    for i, a in enumerate(world.actors):
        c, h = world.actor_box_world(a, ft)
        out[i, :3] = rig.world_to_unified(c)
        out[i, 3:6] = a.extent
        out[i, 6] = h + yaw0
    return out


def _frame_id(rig: UnifiedRig, t: int) -> int:
    return rig.frame_ids[t] if rig.frame_ids is not None else t


def _view_id(rig: UnifiedRig, v: int) -> int:
    return rig.view_ids[v] if rig.view_ids is not None else v


def cast_boxes(origin: np.ndarray, dirs: np.ndarray, boxes: np.ndarray):
    """Nearest-hit ray/box intersection.

    Returns ``(depth, index, face)`` per ray; ``index`` is -1 on a miss and
    ``face`` encodes the entry slab as ``2 * axis + (0 | 1)``.
    """
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    idx = np.full(n, -1, dtype=np.int64)
    face = np.full(n, -1, dtype=np.int64)
    for i, b in enumerate(boxes):
        ax = box_axes(b[6])
        p = (origin - b[:3]) @ ax  # ray origin in box coords
        q = dirs @ ax
        half = b[3:6] / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - p) / q
            t2 = (half - p) / q
        t1 = np.where(q == 0, np.where(np.abs(p) <= half, -np.inf, np.inf), t1)
        t2 = np.where(q == 0, np.where(np.abs(p) <= half, np.inf, -np.inf), t2)
        lo, hi = np.minimum(t1, t2), np.maximum(t1, t2)
        t_near = lo.max(axis=1)
        t_far = hi.min(axis=1)
        hit = (t_near <= t_far) & (t_near > 1e-6)
        closer = hit & (t_near < best)
        best[closer] = t_near[closer]
        idx[closer] = i
        ax_id = lo.argmax(axis=1)
        side = (t1[np.arange(n), ax_id] > t2[np.arange(n), ax_id]).astype(np.int64)
        face[closer] = (2 * ax_id + side)[closer]
    return best, idx, face


def ground_plane(rig: UnifiedRig) -> tuple[np.ndarray, float]:
    """Unified-frame ground plane ``n . x + c = 0`` with ``n`` pointing up."""
    m = rig.to_unified
    if m is None:
        raise ValidationError("rig has no world anchor; ground plane unknown")
    n = m[:3, :3] @ np.array([0.0, 0.0, 1.0])
    return n, float(-n @ m[:3, 3])


def intersect_ground(origin: np.ndarray, dirs: np.ndarray, plane) -> np.ndarray:
    n, c = plane
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = -(origin @ n + c) / denom
    return np.where((denom < -1e-9) & (lam > 0), lam, np.inf)


def _palette_for(attr: tuple[str, str]):
    time, weather = attr
    sky_h, sky_z, road, grass = SKY_HORIZON, SKY_ZENITH, ROAD, GRASS
    if weather == "rainy":
        sky_h = sky_z = RAIN_SKY
        road, grass = ROAD * 0.7, GRASS * 0.8
    elif weather == "snowy":
        sky_h = sky_z = SNOW_SKY
        road, grass = 0.4 * ROAD + 0.6 * SNOW, 0.4 * GRASS + 0.6 * SNOW
    scale = NIGHT_FACTOR if time == "night" else 1.0
    return sky_h, sky_z, road, grass, scale


def render_rays(world: SceneWorld, rig: UnifiedRig, t: int, origin: np.ndarray, dirs: np.ndarray):
    """Colours (N, 3) and hit kinds for unified-frame rays at rig frame ``t``."""
    ft = _frame_id(rig, t)
    sky_h, sky_z, road, grass, scale = _palette_for(world.attributes[ft])
    plane = ground_plane(rig)
    lam_g = intersect_ground(origin, dirs, plane)
    boxes = world_boxes(world, rig, t)
    lam_b, idx, _ = cast_boxes(origin, dirs, boxes)

    elev = np.clip(dirs @ plane[0], 0.0, 1.0)
    w = np.clip(elev / 0.5, 0.0, 1.0)[:, None]
    col = (1 - w) * sky_h + w * sky_z
    kind = np.full(dirs.shape[0], KIND_SKY)

    g = np.isfinite(lam_g) & (lam_g < lam_b)
    if g.any():
        pts_u = origin + lam_g[g, None] * dirs[g]
        m = rig.to_unified
        pts_w = (pts_u - m[:3, 3]) @ m[:3, :3]
        d = world.lateral_offset(pts_w[:, 0], pts_w[:, 1])
        bounds = np.array(world.lane_boundaries)
        stripe = world.painted(pts_w[:, 0], pts_w[:, 1])
        on_road = np.abs(d) <= bounds.max()
        gc = np.where(on_road[:, None], road, grass)
        gc = np.where(stripe[:, None], STRIPE, gc)
        col[g] = gc
        kind[g] = KIND_GROUND
    a = idx >= 0
    a &= ~g
    if a.any():
        col[a] = np.array([world.actors[i].color for i in idx[a]])
        kind[a] = KIND_ACTOR
    return col * scale, kind, idx


def _rays(rig: UnifiedRig, t: int, v: int, uv: np.ndarray):
    m = rig.extrinsics[t, v]
    k_inv = rig.intrinsics[v].inverse()
    hom = np.concatenate([uv, np.ones((*uv.shape[:-1], 1))], axis=-1)
    d = hom @ (m[:3, :3] @ k_inv).T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return m[:3, 3].copy(), d


def render_frame(world: SceneWorld, rig: UnifiedRig, t: int, v: int, supersample: int | None = None) -> np.ndarray:
    """(H, W, 3) image in [0, 1] for rig frame ``t`` and view ``v``."""
    spec = world.spec
    H, W = spec.height, spec.width
    s = spec.supersample if supersample is None else supersample
    if not 0 <= _frame_id(rig, t) < world.horizon:
        raise ValidationError("frame beyond the scene horizon")
    offs = (np.arange(s) + 0.5) / s
    uu, vv = np.meshgrid(np.arange(W), np.arange(H))
    acc = np.zeros((H, W, 3))
    for oy in offs:
        for ox in offs:
            uv = np.stack([uu + ox, vv + oy], axis=-1).reshape(-1, 2)
            o, d = _rays(rig, t, v, uv)
            col, _, _ = render_rays(world, rig, t, o, d)
            acc += col.reshape(H, W, 3)
    return (acc / (s * s)).astype(np.float32)


def render_clip(world: SceneWorld, rig: UnifiedRig) -> np.ndarray:
    T, V = rig.num_frames, rig.num_views
    return np.stack([np.stack([render_frame(world, rig, t, v) for v in range(V)]) for t in range(T)])


def actor_id_map(world: SceneWorld, rig: UnifiedRig, t: int, v: int) -> np.ndarray:
    """(H, W) index of the actor seen through each pixel centre, -1 elsewhere."""
    H, W = world.spec.height, world.spec.width
    o, d = _rays(rig, t, v, pixel_grid(H, W)[..., :2].reshape(-1, 2))
    _, kind, idx = render_rays(world, rig, t, o, d)
    return np.where(kind == KIND_ACTOR, idx, -1).reshape(H, W)


# -- annotations --------------------------------------------------------------


@dataclass
class Annotations:
    boxes: np.ndarray  # (T, N, 7) unified-frame [cx, cy, cz, l, w, h, yaw]
    actor_ids: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3) identity colours
    lanes: list[np.ndarray]  # unified-frame polylines (M_i, 3)
    tokens: list[list[list[str]]]  # [t][v] -> token strings


def visible_count(boxes: np.ndarray, rig: UnifiedRig, t: int, v: int, height: int, width: int) -> int:
    from .geometry import project_points

    if len(boxes) == 0:
        return 0
    uv, depth = project_points(boxes[:, :3], rig, t, v)
    inside = (depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < width) & (uv[:, 1] >= 0) & (uv[:, 1] < height)
    return int(inside.sum())


def export_annotations(world: SceneWorld, rig: UnifiedRig) -> Annotations:
    T, V = rig.num_frames, rig.num_views
    boxes = np.stack([world_boxes(world, rig, t) for t in range(T)]) if world.actors else np.zeros((T, 0, 7))
    lanes = [rig.world_to_unified(p) for p in world.lane_polylines()]
    tokens = []
    for t in range(T):
        row = []
        ft = _frame_id(rig, t)
        for v in range(V):
            n = visible_count(boxes[t], rig, t, v, world.spec.height, world.spec.width)
            time, weather = world.attributes[ft]
            row.append([VIEW_NAMES[_view_id(rig, v)], time, weather, f"vehicles_{min(n, 8)}"])
        tokens.append(row)
    return Annotations(
        boxes=boxes,
        actor_ids=np.array([a.actor_id for a in world.actors], dtype=np.int64),
        colors=np.array([a.color for a in world.actors]).reshape(-1, 3),
        lanes=lanes,
        tokens=tokens,
    )


# -- dataset I/O ----------------------------------------------------------------


def world_to_meta(world: SceneWorld) -> dict:
    return {
        "seed": world.seed,
        "spec": asdict(world.spec),
        "curvature": world.curvature,
        "ego_offset": world.ego_offset,
        "ego_speed": world.ego_speed,
        "actors": [asdict(a) for a in world.actors],
        "attributes": [list(a) for a in world.attributes],
        "rig": {
            "intrinsics": [k.to_dict() for k in world.intrinsics],
            "mounts": world.mounts.tolist(),
            "view_names": list(VIEW_NAMES[: world.spec.n_views]),
        },
        "ego_trajectory": world.ego_poses().tolist(),
        "lanes": [p.tolist() for p in world.lane_polylines()],
    }


def world_from_meta(meta: dict) -> SceneWorld:
    spec_d = dict(meta["spec"])
    for key in ("ego_speed", "attributes", "attribute_switch", "dash"):
        if spec_d.get(key) is not None:
            spec_d[key] = tuple(spec_d[key])
    spec = SceneSpec(**spec_d)
    return SceneWorld(
        seed=meta["seed"],
        spec=spec,
        curvature=meta["curvature"],
        ego_offset=meta["ego_offset"],
        ego_speed=meta["ego_speed"],
        actors=[Actor(**{**a, "extent": tuple(a["extent"])}) for a in meta["actors"]],
        attributes=[tuple(a) for a in meta["attributes"]],
        intrinsics=[CameraIntrinsics(**k) for k in meta["rig"]["intrinsics"]],
        mounts=np.array(meta["rig"]["mounts"]),
    )


def write_scene(directory: str | Path, world: SceneWorld, frames: np.ndarray | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if frames is None:
        frames = render_clip(world, world.rig())
    (d / "meta").write_text(json.dumps(world_to_meta(world), indent=1, sort_keys=True) + "\n")
    container.save(d / "frames.bin", {"frames": frames.astype(np.float32)})


def read_scene(directory: str | Path) -> tuple[SceneWorld, np.ndarray]:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta").read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"no scene at {d}") from exc
    return world_from_meta(meta), container.load(d / "frames.bin")["frames"]


def scene_seed(dataset_seed: int, index: int) -> int:
    return int(rng_stream(dataset_seed, f"scene-{index}").integers(0, 2**63 - 1))


def write_dataset(
    directory: str | Path,
    seed: int,
    n_scenes: int,
    spec: SceneSpec | None = None,
    attributes: Sequence[tuple[str, str]] | None = None,
) -> list[Path]:
    """Render ``n_scenes`` worlds under ``directory`` with a manifest file.

    ``attributes`` (time, weather) pairs are cycled over the scenes; without
    them each scene draws its own.
    """
    spec = spec or SceneSpec()
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_scenes):
        s = spec if not attributes else replace(spec, attributes=tuple(attributes[i % len(attributes)]))
        world = generate_scene(scene_seed(seed, i), s)
        p = root / f"scene_{i:04d}"
        write_scene(p, world)
        paths.append(p)
    manifest = {"seed": seed, "scenes": [p.name for p in paths], "spec": asdict(spec)}
    if attributes:
        manifest["attributes"] = [list(a) for a in attributes]
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return paths


def read_dataset(directory: str | Path) -> list[tuple[SceneWorld, np.ndarray]]:
    root = Path(directory)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"no dataset manifest in {root}") from exc
    return [read_scene(root / name) for name in manifest["scenes"]]
