"""Guided Euler sampling of the rectified flow and window-by-window rollout."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import container
from .conditioning import Conditions, Vocabulary, clip_conditions, stack_conditions
from .errors import NumericError, ValidationError
from .numerics import normal, rng_stream


@dataclass
class SampleConfig:
    steps: int = 50
    cfg_scale: float = 3.0
    seed: int = 0
    window: int = 8  # frames per window (T)
    k_ref: int = 3
    n_windows: int = 1

    def validate(self) -> None:
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValidationError("cfg_scale must be >= 0")
        if not 0 <= self.k_ref < self.window:
            raise ValidationError("k_ref must satisfy 0 <= k_ref < window")
        if self.n_windows < 1:
            raise ValidationError("n_windows must be >= 1")


def cfg_velocity(v_cond: torch.Tensor, v_uncond: torch.Tensor, s: float) -> torch.Tensor:
    """``v_uncond + s (v_cond - v_uncond)``, exact at s = 0 and s = 1."""
    if v_cond.shape != v_uncond.shape:
        raise ValidationError("conditional and unconditional velocities differ in shape")
    if s == 1:
        return v_cond
    if s == 0:
        return v_uncond
    return v_uncond + s * (v_cond - v_uncond)


def _concat(a: Conditions, b: Conditions) -> Conditions:
    out = {}
    for name in ("boxes", "hdmap", "tokens", "ray_origins", "ray_dirs", "ray_keep"):
        x, y = getattr(a, name), getattr(b, name)
        if name == "ray_keep" and a.ray_origins is not None:
            B = a.ray_origins.shape[0]
            x = x if x is not None else torch.ones(B)
            y = y if y is not None else torch.ones(B)
        out[name] = None if x is None else torch.cat([x, y])
    return Conditions(**out)


def guided_velocity(model, z, t, conds: Optional[Conditions], s: float, **kw) -> torch.Tensor:
    if conds is None or s == 1:
        return model(z, t, conds, **kw)
    if s == 0:
        return model(z, t, conds.null(), **kw)
    both = model(torch.cat([z, z]), torch.cat([t, t]), _concat(conds, conds.null()), **_double(kw))
    v_c, v_u = both.chunk(2)
    return cfg_velocity(v_c, v_u, s)


def _double(kw: dict) -> dict:
    out = dict(kw)
    if out.get("view_mask") is not None:
        out["view_mask"] = torch.cat([out["view_mask"]] * 2)
    dt = out.get("drop_temporal")
    if isinstance(dt, torch.Tensor) and dt.dim() == 1:
        out["drop_temporal"] = torch.cat([dt, dt])
    return out


@torch.no_grad()
def euler_sample(
    model: Callable,
    conds: Optional[Conditions],
    shape: Sequence[int],
    cfg: SampleConfig,
    refs: Optional[torch.Tensor] = None,
    M: Optional[torch.Tensor] = None,
    label: str = "sample",
    view_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Integrate the flow from noise (t=1) to data (t=0) with ``cfg.steps`` Euler steps.

    ``shape`` is (B, T, V, H, W, 3). Reference slots (``M`` true, (B, T, V))
    hold the clean frames from ``refs`` throughout. Noise comes from the
    stream ``(cfg.seed, label)``.
    """
    cfg.validate()
    shape = tuple(shape)
    B, T, V = shape[:3]
    eps = normal(rng_stream(cfg.seed, label), shape)
    if M is None:
        M = torch.zeros(B, T, V, dtype=torch.bool)
    M = M.to(torch.bool)
    if M.any() and refs is None:
        raise ValidationError("reference slots given without reference frames")
    hold = M.reshape(B, T, V, 1, 1, 1)
    z = torch.where(hold, refs, eps) if refs is not None else eps
    if hasattr(model, "eval"):
        model.eval()
    for i in range(cfg.steps, 0, -1):
        t = torch.full((B, T, V), i / cfg.steps).masked_fill(M, 0.0)
        v = guided_velocity(model, z, t, conds, cfg.cfg_scale, view_mask=view_mask)
        z = z + v / cfg.steps
        if refs is not None:
            z = torch.where(hold, refs, z)
        if not torch.isfinite(z).all():
            raise NumericError(f"non-finite sampler state at step {cfg.steps - i + 1} of {cfg.steps}")
    return z


# -- rollout -------------------------------------------------------------------------------


class SceneConditionStream:
    """Conditions for any window of a simulated scene, re-anchored at the window start."""

    def __init__(self, world, override: Optional[dict] = None, text_len: int = 8):
        self.world = world
        self.override = override
        self.text_len = text_len
        self.vocab = Vocabulary()

    @property
    def length(self) -> int:
        return self.world.horizon

    def window(self, start: int, length: int) -> Conditions:
        if start < 0 or start + length > self.length:
            raise ValidationError(f"condition stream of {self.length} frames cannot supply [{start}, {start + length})")
        rig = self.world.rig(frames=range(start, start + length))
        return clip_conditions(self.world, rig, self.vocab, self.text_len, self.override)


def rollout_length(cfg: SampleConfig, with_refs: bool) -> int:
    T, k, n = cfg.window, cfg.k_ref, cfg.n_windows
    return k + n * (T - k) if with_refs else T + (n - 1) * (T - k)


def window_label(w: int) -> str:
    # Window 0 shares the plain sampler's noise so a one-window rollout equals a sample.
    return "sample" if w == 0 else f"sample/window{w}"


def window_start(w: int, cfg: SampleConfig) -> int:
    # Window w covers frames [w (T - k), w (T - k) + T) in both modes.
    return w * (cfg.window - cfg.k_ref)


@dataclass
class Rollout:
    video: torch.Tensor  # (N, V, H, W, 3) model space
    origin: list[tuple[int, int]]  # per output frame: (window, local index); window -1 marks given refs
    window_starts: list[int] = field(default_factory=list)

    @property
    def boundaries(self) -> list[int]:
        """Output indices whose frame is the first newly generated frame of a window > 0."""
        out = []
        for i, (w, j) in enumerate(self.origin):
            if w > 0 and i > 0 and self.origin[i - 1][0] != w:
                out.append(i)
        return out


@torch.no_grad()
def autoregressive_rollout(
    model: Callable,
    stream,
    cfg: SampleConfig,
    refs: Optional[torch.Tensor] = None,
    height: int = 48,
    width: int = 80,
) -> Rollout:
    """Generate ``cfg.n_windows`` windows, each conditioned on the last ``k_ref`` frames.

    ``refs`` (k_ref, V, H, W, 3) seeds window 0; without it window 0 is plain
    video generation. Reference frames are emitted exactly once.
    """
    cfg.validate()
    T, k = cfg.window, cfg.k_ref
    need = window_start(cfg.n_windows - 1, cfg) + T
    if stream.length < need:
        raise ValidationError(f"condition stream has {stream.length} frames, rollout needs {need}")
    frames: list[torch.Tensor] = []
    origin: list[tuple[int, int]] = []
    starts = []
    if refs is not None:
        if refs.shape[0] != k:
            raise ValidationError(f"expected {k} reference frames, got {refs.shape[0]}")
        frames.extend(refs)
        origin.extend((-1, j) for j in range(k))
    for w in range(cfg.n_windows):
        s = window_start(w, cfg)
        starts.append(s)
        conds = stack_conditions([stream.window(s, T)])
        V = conds.boxes.shape[2]
        shape = (1, T, V, height, width, 3)
        M = torch.zeros(1, T, V, dtype=torch.bool)
        clean = None
        if w > 0 or refs is not None:
            M[:, :k] = True
            clean = torch.zeros(shape)
            clean[0, :k] = torch.stack(frames[-k:])
        z = euler_sample(model, conds, shape, cfg, clean, M, label=window_label(w))
        first_new = k if M.any() else 0
        for j in range(first_new, T):
            frames.append(z[0, j])
            origin.append((w, j))
    return Rollout(torch.stack(frames), origin, starts)


# -- outputs -------------------------------------------------------------------------------


def dump_frames(video: np.ndarray, directory, prefix: str = "") -> list[Path]:
    """One portable-pixmap file per (t, v) from a (T, V, H, W, 3) video in [0, 1]."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = []
    img8 = (np.clip(video, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    for t in range(img8.shape[0]):
        for v in range(img8.shape[1]):
            p = d / f"{prefix}t{t:03d}_v{v}.ppm"
            Image.fromarray(img8[t, v]).save(p)
            out.append(p)
    return out


def save_video(path, video: np.ndarray, meta: Optional[dict] = None) -> None:
    arrays = {"video": np.asarray(video, dtype=np.float32)}
    arrays["meta"] = np.frombuffer(json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8)
    container.save(path, arrays)


def load_video(path) -> tuple[np.ndarray, dict]:
    arrays = container.load(path)
    if "video" not in arrays:
        raise ValidationError(f"{path} holds no video")
    meta = json.loads(arrays["meta"].tobytes().decode()) if "meta" in arrays else {}
    return arrays["video"], meta
