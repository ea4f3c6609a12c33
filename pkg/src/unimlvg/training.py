"""Multi-task masking, the masked rectified-flow objective, clip batches and
the staged training loop."""

from __future__ import annotations

import enum
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .conditioning import Conditions, Vocabulary, clip_conditions, drop_conditions, stack_conditions
from .errors import NumericError, ValidationError
from .model import UniMLVG
from .numerics import normal, rng_stream

log = logging.getLogger(__name__)


class TaskKind(enum.IntEnum):
    VP = 0  # video prediction: first k_ref frames are references
    IP = 1  # VP with each reference slot dropped with probability 1/2
    VG = 2  # video generation, no references
    IG = 3  # image generation: no references, temporal sub-blocks dropped


RATIO_PRESETS = {
    "default": (0.7, 0.1, 0.1, 0.1),
    "vp_only": (1.0, 0.0, 0.0, 0.0),
    "vp_ip": (0.7, 0.3, 0.0, 0.0),
    "vp_vg": (0.9, 0.0, 0.1, 0.0),
    "vp_ig": (0.9, 0.0, 0.0, 0.1),
}

IP_KEEP = 0.5


def check_ratios(ratios: Sequence[float]) -> np.ndarray:
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (len(TaskKind),) or (r < 0).any() or abs(r.sum() - 1.0) > 1e-9:
        raise ValidationError(f"task ratios must be {len(TaskKind)} non-negative numbers summing to 1, got {list(ratios)}")
    return r


def sample_task(rng: np.random.Generator, ratios: Sequence[float]) -> TaskKind:
    return TaskKind(int(rng.choice(len(TaskKind), p=check_ratios(ratios))))


def sample_tasks(rng: np.random.Generator, ratios: Sequence[float], n: int) -> np.ndarray:
    return rng.choice(len(TaskKind), size=n, p=check_ratios(ratios))


def build_mask(task: TaskKind, T: int, V: int, k_ref: int, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Reference mask ``M`` (T, V) with 1 at reference slots, and the drop-temporal flag."""
    if not 0 <= k_ref < T:
        raise ValidationError(f"k_ref must satisfy 0 <= k_ref < T, got k_ref={k_ref}, T={T}")
    M = np.zeros((T, V), dtype=bool)
    if task in (TaskKind.VP, TaskKind.IP):
        M[:k_ref] = True
        if task == TaskKind.IP:
            M[:k_ref] &= rng.random((k_ref, V)) < IP_KEEP
    return M, task == TaskKind.IG


def rf_interpolate(z0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """``(1 - t) z0 + t eps``; ``t`` broadcasts from the left (e.g. (B, T, V))."""
    t = t.reshape(*t.shape, *([1] * (z0.dim() - t.dim())))
    return (1 - t) * z0 + t * eps


def velocity_target(z0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return z0 - eps


def masked_rf_loss(
    v_pred: torch.Tensor,
    z0: torch.Tensor,
    eps: torch.Tensor,
    M: torch.Tensor,
    view_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean squared velocity error over non-reference slots of unmasked views.

    Shapes: videos (B, T, V, H, W, c), ``M`` (B, T, V), ``view_mask`` (B, V).
    The mean divides by the number of contributing elements.
    """
    if v_pred.shape != z0.shape or z0.shape != eps.shape:
        raise ValidationError("prediction, data and noise shapes differ")
    w = 1.0 - M.to(v_pred.dtype)
    if view_mask is not None:
        w = w * view_mask.to(v_pred.dtype)[:, None, :]
    per_slot = v_pred[0, 0, 0].numel()
    count = w.sum() * per_slot
    if count == 0:
        raise ValidationError("every element is masked; the loss is undefined")
    w = w.reshape(*w.shape, 1, 1, 1)
    return ((v_pred - velocity_target(z0, eps)) ** 2 * w).sum() / count


def sample_timesteps(rng: np.random.Generator, n: int, kind: str = "uniform") -> np.ndarray:
    """Per-sample timesteps on (0, 1]."""
    if kind == "uniform":
        return 1.0 - rng.random(n)
    if kind == "logit_normal":
        return np.clip(1.0 / (1.0 + np.exp(-rng.standard_normal(n))), 1e-6, 1.0)
    raise ValidationError(f"unknown timestep distribution {kind!r}")


# -- stages -------------------------------------------------------------------------------


@dataclass(frozen=True)
class StagePlan:
    groups: frozenset
    bypass_crossview: bool = False
    single_view: bool = False
    images: bool = False


STAGES = {
    # Stand-in for pretrained image weights: the per-slot backbone and the
    # condition encoders learn single images; the axis sub-blocks are skipped.
    0: StagePlan(frozenset({"backbone", "adapter", "ray", "tokens"}), images=True),
    1: StagePlan(frozenset({"temporal", "gates_temporal"}), bypass_crossview=True, single_view=True),
    2: StagePlan(frozenset({"temporal", "gates_temporal", "crossview", "gates_crossview", "adapter", "ray", "tokens"})),
    3: StagePlan(frozenset({"backbone", "temporal", "gates_temporal", "crossview", "gates_crossview", "adapter", "ray", "tokens"})),
}


def stage_schedule(stage: int) -> StagePlan:
    try:
        return STAGES[int(stage)]
    except (KeyError, ValueError):
        raise ValidationError(f"unknown stage {stage!r}; expected one of {sorted(STAGES)}") from None


def apply_stage(model: UniMLVG, stage: int) -> list[torch.nn.Parameter]:
    """Set ``requires_grad`` per the stage and return the trainable parameters."""
    plan = stage_schedule(stage)
    model.bypass_crossview = plan.bypass_crossview
    params = []
    for name, p in model.named_parameters():
        on = model.param_group(name) in plan.groups
        p.requires_grad_(on)
        if on:
            params.append(p)
    return params


# -- clips and batches ---------------------------------------------------------------------


@dataclass
class Clip:
    video: torch.Tensor  # (T, V, H, W, 3) in [-1, 1]
    conds: Conditions  # unbatched
    scene: int
    start: int


def to_model_space(frames) -> torch.Tensor:
    return torch.as_tensor(np.asarray(frames, dtype=np.float32)) * 2.0 - 1.0


def to_pixel_space(z: torch.Tensor) -> np.ndarray:
    return ((z.detach().float() + 1.0) / 2.0).clamp(0.0, 1.0).numpy()


def make_clip(world, frames: np.ndarray, start: int, length: int, scene: int = 0, text_len: int = 8, vocab=None) -> Clip:
    if start < 0 or start + length > frames.shape[0]:
        raise ValidationError(f"clip [{start}, {start + length}) outside a {frames.shape[0]}-frame scene")
    rig = world.rig(frames=range(start, start + length))
    conds = clip_conditions(world, rig, vocab, text_len)
    return Clip(to_model_space(frames[start : start + length]), conds, scene, start)


def clip_starts(horizon: int, length: int, stride: int) -> list[int]:
    if length > horizon:
        raise ValidationError(f"clip length {length} exceeds the scene horizon {horizon}")
    return list(range(0, horizon - length + 1, stride))


def single_view(clip: Clip, view: int = 0) -> Clip:
    """The clip restricted to one camera."""
    sel = lambda x: x[:, view : view + 1]  # noqa: E731
    return Clip(sel(clip.video), clip.conds.map(sel), clip.scene, clip.start)


def select_views(clip: Clip, views: Sequence[int]) -> Clip:
    """The clip restricted to the listed cameras, in the listed order."""
    V = clip.video.shape[1]
    if any(not 0 <= v < V for v in views):
        raise ValidationError(f"view indices {list(views)} outside a {V}-view clip")
    idx = torch.as_tensor(list(views), dtype=torch.long)
    sel = lambda x: x.index_select(1, idx.to(x.device)) if isinstance(x, torch.Tensor) else x[:, list(views)]  # noqa: E731
    return Clip(sel(clip.video), clip.conds.map(sel), clip.scene, clip.start)


def build_clips(scenes, length: int, stride: int, text_len: int = 8) -> list[Clip]:
    """All clips of ``length`` frames at multiples of ``stride`` from (world, frames) pairs."""
    vocab = Vocabulary()
    out = []
    for i, (world, frames) in enumerate(scenes):
        for s in clip_starts(frames.shape[0], length, stride):
            out.append(make_clip(world, frames, s, length, i, text_len, vocab))
    return out


@dataclass
class Batch:
    z0: torch.Tensor  # (B, T, V, H, W, 3)
    conds: Conditions
    M: torch.Tensor  # (B, T, V) bool
    t: torch.Tensor  # (B, T, V), 0 at reference slots
    eps: torch.Tensor
    drop_temporal: torch.Tensor  # (B,) bool
    tasks: list[TaskKind]
    view_mask: Optional[torch.Tensor] = None
    skip_axes: bool = False


@dataclass
class TrainConfig:
    stage: int = 3
    steps: int = 100
    batch_size: int = 1
    lr: float = 8e-5
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    ratios: tuple[float, ...] = RATIO_PRESETS["default"]
    k_ref: int = 3
    drop_rate: float = 0.2
    timesteps: str = "uniform"
    grad_clip: float = 1.0
    image_batch: int = 16  # frame-views per step in image pretraining
    seed: int = 0

    def validate(self) -> None:
        stage_schedule(self.stage)
        check_ratios(self.ratios)
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.steps < 0 or self.batch_size < 1 or self.image_batch < 1:
            raise ValidationError("steps, batch_size and image_batch must be positive")
        if not 0 <= self.drop_rate < 1:
            raise ValidationError("drop rate must lie in [0, 1)")


def _index(conds: Conditions, fn) -> Conditions:
    return conds.map(fn)


def assemble_batch(clips: Sequence[Clip], cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """Draw a batch for ``cfg.stage``: clip choice, task, masks, timesteps, noise and dropout."""
    plan = stage_schedule(cfg.stage)
    if not clips:
        raise ValidationError("no training clips")
    if plan.images:
        B = cfg.image_batch
        picks = rng.integers(len(clips), size=B)
        T0, V0 = clips[0].video.shape[:2]
        ts, vs = rng.integers(T0, size=B), rng.integers(V0, size=B)
        z0 = torch.stack([clips[c].video[t, v][None, None] for c, t, v in zip(picks, ts, vs)])
        conds = stack_conditions(
            [_index(clips[c].conds, lambda x, t=t, v=v: x[t : t + 1, v : v + 1]) for c, t, v in zip(picks, ts, vs)]
        )
        tasks = [TaskKind.IG] * B
        M = torch.zeros(B, 1, 1, dtype=torch.bool)
        drop = torch.ones(B, dtype=torch.bool)
    else:
        B = cfg.batch_size
        picks = rng.integers(len(clips), size=B)
        z0 = torch.stack([clips[c].video for c in picks])
        conds = stack_conditions([clips[c].conds for c in picks])
        T, V = z0.shape[1:3]
        tasks, masks, drops = [], [], []
        for _ in range(B):
            task = sample_task(rng, cfg.ratios)
            m, d = build_mask(task, T, V, cfg.k_ref, rng)
            tasks.append(task)
            masks.append(m)
            drops.append(d)
        M = torch.from_numpy(np.stack(masks))
        drop = torch.tensor(drops)
    conds, _ = drop_conditions(conds, cfg.drop_rate, rng)
    tt = torch.from_numpy(sample_timesteps(rng, B, cfg.timesteps).astype(np.float32))
    t = tt[:, None, None].expand(M.shape).masked_fill(M, 0.0).contiguous()
    eps = normal(rng, tuple(z0.shape))
    return Batch(z0, conds, M, t, eps, drop, tasks, skip_axes=plan.images)


def batch_loss(model: UniMLVG, batch: Batch) -> torch.Tensor:
    z_t = rf_interpolate(batch.z0, batch.eps, batch.t)
    v = model(z_t, batch.t, batch.conds, view_mask=batch.view_mask, drop_temporal=batch.drop_temporal, skip_axes=batch.skip_axes)
    return masked_rf_loss(v, batch.z0, batch.eps, batch.M, batch.view_mask)


# -- loop ------------------------------------------------------------------------------------


@dataclass
class LogEntry:
    step: int
    stage: int
    task: str
    loss: float

    def line(self) -> str:
        return f"{self.step} {self.stage} {self.task} {self.loss:.6f}"


def task_label(tasks: Sequence[TaskKind]) -> str:
    return "+".join(sorted({t.name for t in tasks}))


class Trainer:
    """Single-threaded optimizer over the stage's trainable parameters.

    Every step draws its batch from a stream keyed on (seed, stage, step), so
    a run is reproducible and can resume mid-way.
    """

    def __init__(self, model: UniMLVG, clips: Sequence[Clip], cfg: TrainConfig):
        cfg.validate()
        plan = stage_schedule(cfg.stage)
        if plan.single_view and any(c.video.shape[1] != 1 for c in clips):
            raise ValidationError(f"stage {cfg.stage} requires single-view (V=1) clips")
        self.model = model
        self.clips = list(clips)
        self.cfg = cfg
        self.params = apply_stage(model, cfg.stage)
        self.opt = torch.optim.AdamW(self.params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
        self.step_count = 0
        self.history: list[LogEntry] = []

    def batch_for(self, step: int) -> Batch:
        return assemble_batch(self.clips, self.cfg, rng_stream(self.cfg.seed, f"train/stage{self.cfg.stage}/step{step}"))

    def train_step(self) -> LogEntry:
        step = self.step_count
        batch = self.batch_for(step)
        self.model.train()
        loss = batch_loss(self.model, batch)
        if not torch.isfinite(loss):
            raise NumericError(
                f"non-finite loss at stage {self.cfg.stage} step {step} "
                f"(batch stream seed={self.cfg.seed}, label=train/stage{self.cfg.stage}/step{step})"
            )
        # A batch can miss every trainable parameter (an IG batch in stage I
        # drops the temporal blocks); it is logged but updates nothing.
        if loss.requires_grad:
            self.opt.zero_grad(set_to_none=True)
            loss.backward()
            if self.cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(self.params, self.cfg.grad_clip)
            self.opt.step()
        self.step_count += 1
        entry = LogEntry(step, self.cfg.stage, task_label(batch.tasks), float(loss.detach()))
        self.history.append(entry)
        return entry

    def optimizer_arrays(self) -> dict[str, np.ndarray]:
        """AdamW moments and step counters as ``opt/<param index>/<key>`` arrays."""
        out = {"opt/step_count": np.array([self.step_count], dtype=np.int64)}
        for i, p in enumerate(self.params):
            for key, val in self.opt.state.get(p, {}).items():
                out[f"opt/{i}/{key}"] = val.detach().cpu().numpy().astype(np.float32).reshape(val.shape)
        return out

    def load_optimizer_arrays(self, arrays: dict) -> None:
        """Restore what :meth:`optimizer_arrays` wrote (keys with or without the ``opt/`` prefix)."""
        arrays = {k.removeprefix("opt/"): v for k, v in arrays.items()}
        state = {}
        for key, val in arrays.items():
            if key == "step_count":
                continue
            i, _, name = key.partition("/")
            if not i.isdigit() or int(i) >= len(self.params):
                raise ValidationError(f"optimizer state {key!r} does not match this stage's parameters")
            p = self.params[int(i)]
            t = torch.from_numpy(np.array(val))
            if name != "step" and tuple(t.shape) != tuple(p.shape):
                raise ValidationError(f"optimizer state {key!r} has shape {tuple(t.shape)}, parameter {tuple(p.shape)}")
            state.setdefault(p, {})[name] = t
        for p, st in state.items():
            self.opt.state[p] = st
        if "step_count" in arrays:
            self.step_count = int(np.asarray(arrays["step_count"]).reshape(-1)[0])

    def run(self, steps: Optional[int] = None, callback: Optional[Callable[[LogEntry], None]] = None) -> list[LogEntry]:
        n = self.cfg.steps if steps is None else steps
        t0 = time.time()
        for _ in range(n):
            entry = self.train_step()
            if callback is not None:
                callback(entry)
            if entry.step % 100 == 0:
                log.info("stage %d step %d loss %.5f (%.1fs)", entry.stage, entry.step, entry.loss, time.time() - t0)
        return self.history[-n:] if n else []


@torch.no_grad()
def probe_loss(model: UniMLVG, clips: Sequence[Clip], cfg: TrainConfig, n_batches: int = 8, seed: int = 12345) -> float:
    """Training objective on a fixed set of batches (same draws every call)."""
    model.eval()
    plan = stage_schedule(cfg.stage)
    model.bypass_crossview = plan.bypass_crossview
    total = 0.0
    for i in range(n_batches):
        batch = assemble_batch(clips, cfg, rng_stream(seed, f"probe/{i}"))
        total += float(batch_loss(model, batch))
    return total / n_batches


def write_loss_log(path, entries: Sequence[LogEntry], append: bool = False) -> None:
    fresh = not append or not os.path.exists(path)
    with open(path, "w" if fresh else "a") as fh:
        if fresh:
            fh.write("# step stage task loss\n")
        for e in entries:
            fh.write(e.line() + "\n")


def stage_clips(clips: Sequence[Clip], stage: int) -> list[Clip]:
    """Clips in the form a stage trains on: every camera as its own clip for single-view stages."""
    if not stage_schedule(stage).single_view:
        return list(clips)
    return [single_view(c, v) for c in clips for v in range(c.video.shape[1])]


@dataclass
class PipelineResult:
    history: list[LogEntry]
    probe_start: float  # fixed-batch objective of the final stage, before the first video stage
    probe_end: float

    @property
    def loss_ratio(self) -> float:
        return self.probe_end / self.probe_start


def train_pipeline(
    model: UniMLVG,
    clips: Sequence[Clip],
    configs: Sequence[TrainConfig],
    callback: Optional[Callable[[LogEntry], None]] = None,
    probe_batches: int = 8,
) -> PipelineResult:
    """Run the given stages in order on one model.

    The loss ratio compares the last stage's objective on fixed probe batches
    before the first video stage (after any image pretraining) and at the end.
    """
    if not configs:
        raise ValidationError("no stages to run")
    final = configs[-1]
    history: list[LogEntry] = []
    start = None
    for cfg in configs:
        if start is None and not stage_schedule(cfg.stage).images:
            start = probe_loss(model, clips, final, probe_batches)
        trainer = Trainer(model, stage_clips(clips, cfg.stage), cfg)
        history.extend(trainer.run(cfg.steps, callback))
    if start is None:
        start = probe_loss(model, clips, final, probe_batches)
    end = probe_loss(model, clips, final, probe_batches)
    apply_stage(model, final.stage)
    return PipelineResult(history, start, end)
