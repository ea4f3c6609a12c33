"""The multi-view video denoiser.

Tokens are laid out ``(B, T, V, h, w, C)``. Each block runs

    backbone (per frame-view joint attention with text, AdaLN)
    -> + adapter level (at injection sites)
    -> cross-view attention (sequence over V), gated
    -> temporal attention (sequence over T), gated

and the final layer maps tokens back to a pixel-space velocity. Ray features
are added once, right after the patch embedding.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from einops import rearrange
from torch import nn

from . import container
from .conditioning import Adapter, Conditions, TokenEmbedder, Vocabulary
from .errors import DimensionError, ValidationError
from .geometry import RayEncoder
from .numerics import MASK_NEG, attention, gelu, layer_norm, sigmoid_gate

GATE_INIT = 2.0

GROUPS = ("backbone", "temporal", "gates_temporal", "crossview", "gates_crossview", "adapter", "ray", "tokens")


@dataclass
class ModelConfig:
    height: int = 48
    width: int = 80
    patch: int = 4
    hidden: int = 96
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    text_width: int = 32
    text_len: int = 8
    vocab_size: int = len(Vocabulary())
    max_frames: int = 64
    max_views: int = 8
    ray_freqs: int = 8
    ray_hidden: int = 64
    origin_scale: float = 50.0
    adapter_hidden: int = 64
    adapter_levels: int = 4
    injection_sites: tuple[int, ...] = (0, 1, 2, 3)
    order: tuple[str, ...] = ("crossview", "temporal")
    zero_init: bool = True
    # "velocity": the head outputs v directly. "data": the head outputs a clean
    # estimate x0 and v = (x0 - z_t) / max(t, t_floor). "preconditioned": the
    # head outputs a unit-variance residual F and v = c_skip(t) z_t + c_out(t) F
    # (see ``precondition``).
    prediction: str = "velocity"
    t_floor: float = 0.05
    sigma_data: float = 0.5

    def validate(self) -> None:
        if self.height % self.patch or self.width % self.patch:
            raise DimensionError(f"{self.height}x{self.width} not divisible by patch {self.patch}")
        if self.hidden % self.heads:
            raise DimensionError("hidden width must divide into heads")
        if len(self.injection_sites) != self.adapter_levels:
            raise ValidationError("adapter level count must equal the number of injection sites")
        if any(not 0 <= s < self.depth for s in self.injection_sites):
            raise ValidationError("injection site outside the block range")
        if self.prediction not in ("velocity", "data", "preconditioned"):
            raise ValidationError(f"unknown prediction target {self.prediction!r}")
        if not 0 < self.t_floor <= 1:
            raise ValidationError("t_floor must lie in (0, 1]")
        if sorted(self.order) != ["crossview", "temporal"]:
            raise ValidationError(f"bad sub-block order {self.order}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["injection_sites"] = list(self.injection_sites)
        d["order"] = list(self.order)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("injection_sites", "order"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def sincos_table(n: int, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Fixed sinusoidal encodings, shape (n, dim)."""
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(dim // 2, dtype=torch.float64)[None]
    ang = pos / base ** (2 * i / dim)
    out = torch.zeros(n, dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(ang)
    out[:, 1::2] = torch.cos(ang)
    return out.float()


def sincos_2d(h: int, w: int, dim: int) -> torch.Tensor:
    half = dim // 2
    ey = sincos_table(h, half)[:, None, :].expand(h, w, half)
    ex = sincos_table(w, dim - half)[None, :, :].expand(h, w, dim - half)
    return torch.cat([ey, ex], dim=-1)


def timestep_features(t: torch.Tensor, dim: int = 128, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half).to(t.dtype)
    args = (t * 1000.0)[..., None] * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


def gated_fuse(z_in: torch.Tensor, f_out: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """``sigmoid(alpha) * z_in + (1 - sigmoid(alpha)) * f_out``."""
    return sigmoid_gate(z_in, f_out, alpha)


# -- patch embedding -------------------------------------------------------------------


def patchify(video: torch.Tensor, p: int) -> torch.Tensor:
    """``(..., H, W, c)`` -> ``(..., H/p, W/p, p*p*c)`` without mixing."""
    H, W = video.shape[-3], video.shape[-2]
    if H % p or W % p:
        raise DimensionError(f"{H}x{W} not divisible by patch {p}")
    return rearrange(video, "... (h p1) (w p2) c -> ... h w (p1 p2 c)", p1=p, p2=p)


def unpatchify(tokens: torch.Tensor, p: int, channels: int = 3) -> torch.Tensor:
    return rearrange(tokens, "... h w (p1 p2 c) -> ... (h p1) (w p2) c", p1=p, p2=p, c=channels)


class PatchEmbed(nn.Module):
    def __init__(self, patch: int, width: int, channels: int = 3):
        super().__init__()
        self.patch = patch
        self.proj = nn.Linear(patch * patch * channels, width)

    def forward(self, video: torch.Tensor) -> torch.Tensor:
        return self.proj(patchify(video, self.patch))


class FinalLayer(nn.Module):
    def __init__(self, width: int, patch: int, channels: int = 3):
        super().__init__()
        self.patch = patch
        self.channels = channels
        self.ada = nn.Linear(width, 2 * width)
        self.linear = nn.Linear(width, patch * patch * channels)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        shift, scale = self.ada(nn.functional.silu(y)).chunk(2, dim=-1)
        x = modulate(layer_norm(x), shift[..., None, None, :], scale[..., None, None, :])
        return unpatchify(self.linear(x), self.patch, self.channels)


# -- blocks ---------------------------------------------------------------------------------


class Mlp(nn.Module):
    def __init__(self, width: int, ratio: float):
        super().__init__()
        inner = int(width * ratio)
        self.fc1 = nn.Linear(width, inner)
        self.fc2 = nn.Linear(inner, width)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class JointBlock(nn.Module):
    """AdaLN-modulated joint attention over one frame-view's latent and text tokens.

    The latent and text streams have their own projections and MLPs and share
    one attention. Nothing crosses frame-view slots here.
    """

    def __init__(self, width: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.heads = heads
        self.ada_x = nn.Linear(width, 6 * width)
        self.ada_c = nn.Linear(width, 6 * width)
        self.qkv_x = nn.Linear(width, 3 * width)
        self.qkv_c = nn.Linear(width, 3 * width)
        self.out_x = nn.Linear(width, width)
        self.out_c = nn.Linear(width, width)
        self.mlp_x = Mlp(width, mlp_ratio)
        self.mlp_c = Mlp(width, mlp_ratio)

    def forward(self, x, c, y, text_valid):
        """x: (N, S, C) latent, c: (N, L, C) text, y: (N, C), text_valid: (N, L) bool."""
        S = x.shape[1]
        sy = nn.functional.silu(y)[:, None, :]
        mx = self.ada_x(sy).chunk(6, dim=-1)
        mc = self.ada_c(sy).chunk(6, dim=-1)

        hx = modulate(layer_norm(x), mx[0], mx[1])
        hc = modulate(layer_norm(c), mc[0], mc[1])
        qx, kx, vx = self.qkv_x(hx).chunk(3, dim=-1)
        qc, kc, vc = self.qkv_c(hc).chunk(3, dim=-1)
        q = torch.cat([qx, qc], dim=1)
        k = torch.cat([kx, kc], dim=1)
        v = torch.cat([vx, vc], dim=1)
        key_ok = torch.cat([torch.ones(x.shape[0], S, dtype=torch.bool), text_valid], dim=1)
        mask = torch.zeros(key_ok.shape, dtype=x.dtype).masked_fill(~key_ok, MASK_NEG)[:, None, :]
        a = attention(q, k, v, mask, self.heads)
        x = x + mx[2] * self.out_x(a[:, :S])
        c = c + mc[2] * self.out_c(a[:, S:])
        x = x + mx[5] * self.mlp_x(modulate(layer_norm(x), mx[3], mx[4]))
        c = c + mc[5] * self.mlp_c(modulate(layer_norm(c), mc[3], mc[4]))
        return x, c


class AxisAttention(nn.Module):
    """Self-attention along one token axis (frames or views), fused by a gate.

    ``F(z) = z + Proj(Attn(LN(z + pos)))``; the output is
    ``sigmoid(alpha) * z + (1 - sigmoid(alpha)) * F(z)``.
    """

    def __init__(self, width: int, heads: int, max_len: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)
        self.alpha = nn.Parameter(torch.tensor(GATE_INIT))
        self.register_buffer("pos", sincos_table(max_len, width), persistent=False)

    def branch(self, seq: torch.Tensor, key_valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        """seq: (N, L, C) -> F(seq)."""
        L = seq.shape[1]
        if L > self.pos.shape[0]:
            raise DimensionError(f"sequence of {L} exceeds positional table of {self.pos.shape[0]}")
        h = self.norm(seq + self.pos[:L].to(seq.dtype))
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        mask = None
        if key_valid is not None:
            mask = torch.zeros(key_valid.shape, dtype=seq.dtype).masked_fill(~key_valid, MASK_NEG)[:, None, :]
        return seq + self.out(attention(q, k, v, mask, self.heads))


class TemporalBlock(AxisAttention):
    def forward(self, z: torch.Tensor) -> torch.Tensor:
        B, T, V, h, w, C = z.shape
        seq = rearrange(z, "b t v h w c -> (b v h w) t c")
        out = self.branch(seq)
        out = rearrange(out, "(b v h w) t c -> b t v h w c", b=B, v=V, h=h, w=w)
        return gated_fuse(z, out, self.alpha)


class CrossViewBlock(AxisAttention):
    def forward(self, z: torch.Tensor, view_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        B, T, V, h, w, C = z.shape
        seq = rearrange(z, "b t v h w c -> (b t h w) v c")
        valid = None
        if view_mask is not None:
            vm = view_mask.to(torch.bool)
            if not vm.any(dim=1).all():
                raise ValidationError("every view of a sample is masked")
            valid = vm.repeat_interleave(T * h * w, dim=0)
        out = self.branch(seq, valid)
        out = rearrange(out, "(b t h w) v c -> b t v h w c", b=B, t=T, h=h, w=w)
        fused = gated_fuse(z, out, self.alpha)
        if view_mask is not None:
            keep = view_mask.to(torch.bool)[:, None, :, None, None, None]
            fused = torch.where(keep, fused, z)
        return fused


class UniMLVGBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.backbone = JointBlock(cfg.hidden, cfg.heads, cfg.mlp_ratio)
        self.crossview = CrossViewBlock(cfg.hidden, cfg.heads, cfg.max_views)
        self.temporal = TemporalBlock(cfg.hidden, cfg.heads, cfg.max_frames)


# -- the network ----------------------------------------------------------------------------


class UniMLVG(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        C = cfg.hidden
        h, w = cfg.grid
        self.patch_embed = PatchEmbed(cfg.patch, C)
        self.register_buffer("spatial_pos", sincos_2d(h, w, C), persistent=False)
        self.t_embed = nn.Sequential(nn.Linear(128, C), nn.SiLU(), nn.Linear(C, C))
        self.context_embed = nn.Linear(cfg.text_width, C)
        self.pooled_embed = nn.Linear(cfg.text_width, C)
        self.blocks = nn.ModuleList(UniMLVGBlock(cfg) for _ in range(cfg.depth))
        self.final = FinalLayer(C, cfg.patch)
        self.tokens = TokenEmbedder(cfg.vocab_size, cfg.text_width, cfg.text_len)
        self.adapter = Adapter(C, cfg.patch, cfg.adapter_levels, cfg.adapter_hidden)
        self.ray = RayEncoder(C, cfg.patch, cfg.ray_freqs, cfg.ray_hidden, cfg.origin_scale)
        self.bypass_crossview = False
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        for blk in self.blocks:
            for sub in (blk.temporal, blk.crossview):
                nn.init.normal_(sub.out.weight, std=0.02)
        nn.init.normal_(self.t_embed[0].weight, std=0.02)
        nn.init.normal_(self.t_embed[2].weight, std=0.02)
        if self.cfg.zero_init:
            for blk in self.blocks:
                nn.init.zeros_(blk.backbone.ada_x.weight)
                nn.init.zeros_(blk.backbone.ada_c.weight)
            nn.init.zeros_(self.final.ada.weight)
            nn.init.zeros_(self.final.linear.weight)
        else:
            for blk in self.blocks:
                for lin in (blk.backbone.ada_x, blk.backbone.ada_c):
                    nn.init.normal_(lin.weight, std=0.02)
                    nn.init.normal_(lin.bias, std=0.1)

    # parameter groups for staged training
    def param_group(self, name: str) -> str:
        if name.startswith("tokens."):
            return "tokens"
        if name.startswith("adapter."):
            return "adapter"
        if name.startswith("ray."):
            return "ray"
        parts = name.split(".")
        if parts[0] == "blocks" and parts[2] in ("temporal", "crossview"):
            sub = parts[2]
            return f"gates_{sub}" if parts[3] == "alpha" else sub
        return "backbone"

    def grouped_parameters(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        out: dict[str, list] = {g: [] for g in GROUPS}
        for name, p in self.named_parameters():
            out[self.param_group(name)].append((name, p))
        return out

    # forward pieces
    def embed_conditions(self, conds: Optional[Conditions], shape):
        """Adapter levels, ray features, text tokens and pooled text for a batch."""
        B, T, V = shape
        cfg = self.cfg
        h, w = cfg.grid
        dtype = self.patch_embed.proj.weight.dtype
        conds = conds or Conditions()
        levels = None
        if conds.boxes is not None or conds.hdmap is not None:
            zeros = torch.zeros(B, T, V, cfg.height, cfg.width, 3, dtype=dtype)
            boxes = conds.boxes if conds.boxes is not None else zeros
            hdmap = conds.hdmap if conds.hdmap is not None else zeros
            levels = self.adapter(torch.cat([boxes, hdmap], dim=-1).to(dtype))
        rays = None
        if conds.ray_origins is not None:
            rays = self.ray(conds.ray_origins.to(dtype), conds.ray_dirs.to(dtype))
            if conds.ray_keep is not None:
                rays = rays * conds.ray_keep.to(dtype).view(B, 1, 1, 1, 1, 1)
        if conds.tokens is not None:
            ids = conds.tokens.long()
        else:
            ids = torch.zeros(B, T, V, cfg.text_len, dtype=torch.long)
        emb = self.tokens(ids).to(dtype)  # (B, T, V, L, Ct)
        text_valid = ids != 0
        pooled = emb.mean(dim=-2)
        return levels, rays, emb, text_valid, pooled

    def forward(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        conds: Optional[Conditions] = None,
        view_mask: Optional[torch.Tensor] = None,
        drop_temporal=False,
        skip_axes: bool = False,
    ) -> torch.Tensor:
        """Velocity for a noisy clip.

        z_t: (B, T, V, H, W, 3); t: (B, T, V) per-slot timesteps (0 at
        reference slots); view_mask: (B, V); drop_temporal: bool or (B,)
        bool. ``skip_axes`` runs the backbone alone (no cross-view/temporal).
        """
        if z_t.dim() != 6:
            raise DimensionError("z_t must be (B, T, V, H, W, 3)")
        B, T, V, H, W, _ = z_t.shape
        cfg = self.cfg
        if (H, W) != (cfg.height, cfg.width):
            raise DimensionError(f"model built for {cfg.height}x{cfg.width}, got {H}x{W}")
        if t.shape != (B, T, V):
            raise DimensionError(f"timesteps must be (B, T, V), got {tuple(t.shape)}")
        h, w = cfg.grid
        C = cfg.hidden

        levels, rays, emb, text_valid, pooled = self.embed_conditions(conds, (B, T, V))
        x = self.patch_embed(z_t) + self.spatial_pos.to(z_t.dtype)
        if rays is not None:
            x = x + rays
        y = self.t_embed(timestep_features(t.to(z_t.dtype))) + self.pooled_embed(pooled)
        c = self.context_embed(emb)

        drop = torch.as_tensor(drop_temporal, dtype=torch.bool).expand(B)
        level_at = {site: i for i, site in enumerate(cfg.injection_sites)}

        xf = x.reshape(B * T * V, h * w, C)
        cf = c.reshape(B * T * V, cfg.text_len, C)
        yf = y.reshape(B * T * V, C)
        tv = text_valid.reshape(B * T * V, cfg.text_len)
        for i, blk in enumerate(self.blocks):
            xf, cf = blk.backbone(xf, cf, yf, tv)
            z = xf.reshape(B, T, V, h, w, C)
            if i in level_at and levels is not None:
                z = z + levels[level_at[i]]
            if not skip_axes:
                for name in cfg.order:
                    if name == "crossview":
                        if not self.bypass_crossview:
                            z = blk.crossview(z, view_mask)
                    elif name == "temporal" and not bool(drop.all()):
                        zt = blk.temporal(z)
                        z = zt if not drop.any() else torch.where(drop.view(B, 1, 1, 1, 1, 1), z, zt)
            xf = z.reshape(B * T * V, h * w, C)
        z = xf.reshape(B, T, V, h, w, C)
        out = self.final(z, y)
        if cfg.prediction == "data":
            denom = t.to(out.dtype).clamp(min=cfg.t_floor).reshape(B, T, V, 1, 1, 1)
            out = (out - z_t) / denom
        elif cfg.prediction == "preconditioned":
            c_skip, c_out = precondition(t.to(out.dtype).reshape(B, T, V, 1, 1, 1), cfg.sigma_data)
            out = c_skip * z_t + c_out * out
        return out


def precondition(t: torch.Tensor, sigma: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Velocity skip and output scales for data of standard deviation ``sigma``.

    With z_t = (1 - t) z0 + t eps, c_skip z_t is the best linear estimate of
    v = z0 - eps and c_out the std of what remains, so the network's target
    has unit variance at every t and no error is amplified near t = 0.
    """
    var = (1 - t) ** 2 * sigma**2 + t**2
    return ((1 - t) * sigma**2 - t) / var, sigma / var.sqrt()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# -- checkpoints --------------------------------------------------------------------------------


def save_checkpoint(
    path, model: UniMLVG, extra: Optional[dict] = None, config_hash: str = "", arrays: Optional[dict] = None
) -> None:
    """Parameters under ``param/``, a JSON ``meta`` record and any extra named ``arrays``."""
    arrays = {**(arrays or {}), **{f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}}
    meta = {"model": model.cfg.to_dict(), "config_hash": config_hash, **(extra or {})}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    container.save(path, arrays)


def read_checkpoint_meta(path) -> dict:
    arrays = container.load(path)
    return json.loads(arrays["meta"].tobytes().decode())


def load_checkpoint(path, expect_hash: Optional[str] = None) -> tuple[UniMLVG, dict]:
    arrays = container.load(path)
    if "meta" not in arrays:
        raise ValidationError(f"{path} has no meta array")
    meta = json.loads(arrays["meta"].tobytes().decode())
    if expect_hash is not None and meta.get("config_hash") != expect_hash:
        raise ValidationError(f"config hash mismatch: checkpoint {meta.get('config_hash')!r} vs run {expect_hash!r}")
    model = UniMLVG(ModelConfig.from_dict(meta["model"]))
    state = model.state_dict()
    loaded = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
    if set(loaded) != set(state):
        raise ValidationError("checkpoint parameter names do not match the model")
    for k, v in loaded.items():
        if tuple(v.shape) != tuple(state[k].shape):
            raise ValidationError(f"shape mismatch for {k}: {v.shape} vs {tuple(state[k].shape)}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in loaded.items()})
    return model, meta
