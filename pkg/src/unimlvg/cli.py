"""Command-line entry point: ``unimlvg <command> ...``.

Exit codes: 0 ok, 2 validation error, 3 numeric failure, 4 acceptance failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import container, evalx, scenesim
from .conditioning import parse_attribute_override, stack_conditions
from .config import RunConfig, from_mapping, load_config
from .errors import AcceptanceError, UniMLVGError, ValidationError
from .model import UniMLVG, load_checkpoint, save_checkpoint
from .sampling import (
    SampleConfig,
    SceneConditionStream,
    autoregressive_rollout,
    dump_frames,
    euler_sample,
    load_video,
    save_video,
)
from .training import (
    STAGES,
    Trainer,
    build_clips,
    select_views,
    stage_schedule,
    to_model_space,
    to_pixel_space,
    write_loss_log,
)

log = logging.getLogger("unimlvg")


# -- helpers ------------------------------------------------------------------------------


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or ())


def _announce(cfg: RunConfig) -> str:
    h = cfg.digest()
    print(f"config_hash: {h}")
    return h


def _scene_spec(cfg: RunConfig) -> scenesim.SceneSpec:
    return scenesim.SceneSpec(horizon=cfg.data.horizon, n_actors=cfg.data.n_actors)


def _load_scene(data: str, index: int):
    root = Path(data)
    try:
        names = json.loads((root / "manifest.json").read_text())["scenes"]
    except FileNotFoundError as exc:
        raise ValidationError(f"no dataset manifest in {root}") from exc
    if not 0 <= index < len(names):
        raise ValidationError(f"scene index {index} outside a dataset of {len(names)} scenes")
    return scenesim.read_scene(root / names[index])


def _model_from_ckpt(path: str, cfg_path: Optional[str], overrides: Sequence[str]) -> tuple[UniMLVG, RunConfig, dict]:
    meta = json.loads(container.load(path)["meta"].tobytes().decode())
    run = from_mapping(meta.get("run") or {"model": meta["model"]})
    if cfg_path is not None or overrides:
        asked = load_config(cfg_path, overrides)
        if asked.model.to_dict() != run.model.to_dict():
            raise ValidationError("model section of the config does not match the checkpoint")
        run = RunConfig(model=run.model, train=asked.train, sample=asked.sample, data=asked.data)
    model, meta = load_checkpoint(path)
    return model, run, meta


def _sample_cfg(run: RunConfig, args) -> SampleConfig:
    s = run.sample
    cfg = SampleConfig(
        steps=args.steps if args.steps is not None else s.steps,
        cfg_scale=args.cfg_scale if args.cfg_scale is not None else s.cfg_scale,
        seed=args.seed if args.seed is not None else s.seed,
        window=s.window,
        k_ref=s.k_ref,
        n_windows=getattr(args, "windows", None) or s.n_windows,
    )
    cfg.validate()
    return cfg


def _write_outputs(out: Path, video: np.ndarray, meta: dict, gt: Optional[np.ndarray] = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_video(out / "video.bin", video, meta)
    dump_frames(video, out / "frames")
    if gt is not None:
        save_video(out / "gt.bin", gt, {"source": "simulator"})
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    _announce(cfg)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ValidationError(f"{out} exists and is not empty; pass --force to overwrite")
        for p in out.glob("scene_*"):
            shutil.rmtree(p)
    seed = cfg.data.seed if args.seed is None else args.seed
    n = cfg.data.scenes if args.scenes is None else args.scenes
    if n < 0:
        raise ValidationError("--scenes must be >= 0")
    attrs = [tuple(a) for a in cfg.data.attributes] if cfg.data.attributes else None
    paths = scenesim.write_dataset(out, seed, n, _scene_spec(cfg), attrs)
    print(f"wrote {len(paths)} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    run = _config(args)
    h = _announce(run)
    stage = args.stage
    stage_schedule(stage)
    scenes = scenesim.read_dataset(args.data)
    clips = build_clips(scenes, run.data.clip_length, run.data.clip_stride, run.model.text_len)
    if run.data.views is not None:
        clips = [select_views(c, run.data.views) for c in clips]
    opt_state = None
    if args.resume:
        meta = json.loads(container.load(args.resume)["meta"].tobytes().decode())
        if meta.get("config_hash") != h:
            raise ValidationError(f"config hash mismatch on resume: checkpoint {meta.get('config_hash')} vs run {h}")
        if meta.get("stage") != stage:
            raise ValidationError(f"checkpoint is from stage {meta.get('stage')}, not {stage}")
        model, meta = load_checkpoint(args.resume)
        opt_state = {k[4:]: v for k, v in container.load(args.resume).items() if k.startswith("opt/")}
    elif args.init:
        model, _ = load_checkpoint(args.init)
        if model.cfg.to_dict() != run.model.to_dict():
            raise ValidationError("the --init checkpoint was built with a different [model] section")
    else:
        torch.manual_seed(run.train.seed)
        model = UniMLVG(run.model)
    tcfg = run.train.stage_config(stage, args.steps)
    trainer = Trainer(model, clips, tcfg)
    if opt_state:
        trainer.load_optimizer_arrays(opt_state)
    remaining = max(0, tcfg.steps - trainer.step_count)
    entries = trainer.run(remaining)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        out,
        model,
        {"run": run.to_dict(), "stage": stage, "step": trainer.step_count},
        config_hash=h,
        arrays=trainer.optimizer_arrays(),
    )
    log_path = Path(args.log) if args.log else out.with_suffix(".loss.txt")
    write_loss_log(log_path, trainer.history, append=bool(args.resume))
    if entries:
        print(f"stage {stage}: {len(entries)} steps, last loss {entries[-1].loss:.6f}")
    print(f"checkpoint: {out}")
    return 0


def _render_gt(world, frames: np.ndarray, start: int, length: int) -> np.ndarray:
    if start < 0 or start + length > frames.shape[0]:
        raise ValidationError(f"frames [{start}, {start + length}) outside a {frames.shape[0]}-frame scene")
    return frames[start : start + length]


def _sample_once(model, run, world, frames, start, scfg, override, refs_mode):
    T = scfg.window
    stream = SceneConditionStream(world, override, run.model.text_len)
    conds = stack_conditions([stream.window(start, T)])
    V = conds.boxes.shape[2]
    shape = (1, T, V, run.model.height, run.model.width, 3)
    M = refs = None
    if refs_mode == "gt":
        M = torch.zeros(1, T, V, dtype=torch.bool)
        M[:, : scfg.k_ref] = True
        refs = torch.zeros(shape)
        refs[0, : scfg.k_ref] = to_model_space(frames[start : start + scfg.k_ref])
    z = euler_sample(model, conds, shape, scfg, refs, M)
    return to_pixel_space(z[0])


def cmd_sample(args) -> int:
    model, run, _ = _model_from_ckpt(args.ckpt, args.config, args.set or ())
    h = _announce(run)
    scfg = _sample_cfg(run, args)
    world, frames = _load_scene(args.data, args.scene)
    override = parse_attribute_override(args.attr_override) if args.attr_override else None
    video = _sample_once(model, run, world, frames, args.start, scfg, override, args.refs)
    gt = _render_gt(world, frames, args.start, scfg.window)
    meta = {"config_hash": h, "scene": args.scene, "start": args.start, "seed": scfg.seed, "steps": scfg.steps,
            "cfg_scale": scfg.cfg_scale, "refs": args.refs, "attr_override": override}
    _write_outputs(Path(args.out), video, meta, gt)
    print(f"video: {Path(args.out) / 'video.bin'}")
    return 0


def cmd_rollout(args) -> int:
    model, run, _ = _model_from_ckpt(args.ckpt, args.config, args.set or ())
    h = _announce(run)
    scfg = _sample_cfg(run, args)
    world, frames = _load_scene(args.data, args.scene)
    override = parse_attribute_override(args.attr_override) if args.attr_override else None
    stream = SceneConditionStream(world, override, run.model.text_len)
    refs = to_model_space(frames[: scfg.k_ref]) if args.refs == "gt" else None
    ro = autoregressive_rollout(model, stream, scfg, refs, run.model.height, run.model.width)
    video = to_pixel_space(ro.video)
    meta = {"config_hash": h, "scene": args.scene, "seed": scfg.seed, "windows": scfg.n_windows, "refs": args.refs,
            "origin": ro.origin, "window_starts": ro.window_starts, "boundaries": ro.boundaries, "attr_override": override}
    _write_outputs(Path(args.out), video, meta, frames[: video.shape[0]])
    print(f"rollout: {video.shape[0]} frames -> {Path(args.out) / 'video.bin'}")
    return 0


def cmd_edit(args) -> int:
    model, run, _ = _model_from_ckpt(args.ckpt, args.config, args.set or ())
    h = _announce(run)
    override = parse_attribute_override(args.attr_override)
    scfg = _sample_cfg(run, args)
    world, frames = _load_scene(args.data, args.scene)
    orig = _sample_once(model, run, world, frames, args.start, scfg, None, args.refs)
    edit = _sample_once(model, run, world, frames, args.start, scfg, override, args.refs)
    rig = world.rig(frames=range(args.start, args.start + scfg.window))
    ann = scenesim.export_annotations(world, rig)
    mask = evalx.ground_mask(rig, ann.boxes, run.model.height, run.model.width)
    ratio = evalx.attribute_edit_check(orig, edit, mask)
    report = evalx.EvalReport(attribute_luminance_ratio=ratio, attribute_luminance_delta=abs(ratio - 1.0), config_hash=h)
    out = Path(args.out)
    meta = {"config_hash": h, "scene": args.scene, "start": args.start, "seed": scfg.seed, "attr_override": override,
            "scene_attributes": [list(a) for a in world.attributes[args.start : args.start + scfg.window]]}
    _write_outputs(out / "original", orig, meta)
    _write_outputs(out / "edited", edit, meta)
    (out / "report.txt").write_text(report.to_text() + f"# attr_override: {json.dumps(override, sort_keys=True)}\n")
    print(report.to_text(), end="")
    return 0


def cmd_eval(args) -> int:
    run = _config(args)
    h = _announce(run)
    gen, _ = load_video(args.gen)
    gt, _ = load_video(args.gt)
    if gen.shape != gt.shape:
        raise ValidationError(f"generated video {gen.shape} and ground truth {gt.shape} differ in shape")
    rig = boxes = colors = night = None
    if args.data is not None:
        world, _ = _load_scene(args.data, args.scene)
        rig = world.rig(frames=range(args.start, args.start + gen.shape[0]))
        ann = scenesim.export_annotations(world, rig)
        boxes, colors = ann.boxes, ann.colors
        night = [a[0] == "night" for a in world.attributes[args.start : args.start + gen.shape[0]]]
    report = evalx.evaluate(gen, gt, rig, boxes, colors, night, config_hash=h)
    report.check_values()
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    failures = evalx.AcceptanceBands().failures(report)
    if failures:
        raise AcceptanceError("; ".join(failures))
    return 0


def cmd_dump_conds(args) -> int:
    run = _config(args)
    _announce(run)
    world, _ = _load_scene(args.data, args.scene)
    length = args.length or run.data.clip_length
    stream = SceneConditionStream(world, None, run.model.text_len)
    conds = stream.window(args.start, length)
    out = Path(args.out)
    dump_frames(conds.boxes.numpy(), out / "boxes")
    dump_frames(conds.hdmap.numpy(), out / "hdmap")
    container.save(out / "rays.bin", {"origins": conds.ray_origins.numpy(), "directions": conds.ray_dirs.numpy()})
    rig = world.rig(frames=range(args.start, args.start + length))
    ann = scenesim.export_annotations(world, rig)
    lines = [f"t{t:03d}_v{v}: {' '.join(ws)}" for t, row in enumerate(ann.tokens) for v, ws in enumerate(row)]
    (out / "tokens.txt").write_text("\n".join(lines) + "\n")
    print(f"conditions for frames [{args.start}, {args.start + length}) -> {out}")
    return 0


# -- parser ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unimlvg", description="Multi-view driving video diffusion at desk scale.")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML run config")
            sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    common(g)
    g.add_argument("--seed", type=int)
    g.add_argument("--scenes", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one stage")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--stage", type=int, required=True, choices=sorted(STAGES))
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--init", help="start from this checkpoint's weights (e.g. the previous stage)")
    t.add_argument("--resume", help="continue this stage from a checkpoint (config hash must match)")
    t.add_argument("--steps", type=int)
    t.add_argument("--log", help="loss log path (default: <out>.loss.txt)")
    t.set_defaults(func=cmd_train)

    def sampling(sp):
        common(sp)
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--scene", type=int, default=0)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--cfg-scale", type=float)
        sp.add_argument("--refs", choices=("none", "gt"), default="none", help="window 0 references")
        sp.add_argument("--out", required=True)

    s = sub.add_parser("sample", help="sample one window")
    sampling(s)
    s.add_argument("--start", type=int, default=0)
    s.add_argument("--attr-override")
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("rollout", help="autoregressive multi-window generation")
    sampling(r)
    r.add_argument("--windows", type=int)
    r.add_argument("--attr-override")
    r.set_defaults(func=cmd_rollout)

    e = sub.add_parser("edit", help="resample with overridden time/weather tokens")
    sampling(e)
    e.add_argument("--start", type=int, default=0)
    e.add_argument("--attr-override", required=True)
    e.set_defaults(func=cmd_edit)

    v = sub.add_parser("eval", help="score a generated video against ground truth")
    common(v)
    v.add_argument("--gen", required=True)
    v.add_argument("--gt", required=True)
    v.add_argument("--out")
    v.add_argument("--data", help="dataset for geometry-aware metrics")
    v.add_argument("--scene", type=int, default=0)
    v.add_argument("--start", type=int, default=0)
    v.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump-conds", help="write condition images, tokens and ray maps")
    common(d)
    d.add_argument("--data", required=True)
    d.add_argument("--scene", type=int, default=0)
    d.add_argument("--start", type=int, default=0)
    d.add_argument("--length", type=int)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_conds)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except UniMLVGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
