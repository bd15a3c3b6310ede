"""Networks: conditional generator, self-supervised patch discriminator,
MI critic and patch projector."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import Field

from .config import StrictModel


class ModelConfig(StrictModel):
    in_channels: int = Field(1, ge=1)
    ngf: int = Field(32, ge=1)
    n_down: int = Field(2, ge=0)
    n_blocks: int = Field(6, ge=0)
    ndf: int = Field(32, ge=1)
    d_layers: int = Field(3, ge=2)
    d_max_mult: int = Field(8, ge=1)
    d_time_cond: bool = True
    dec_width: int = Field(32, ge=2)
    emb_dim: int = Field(64, ge=2)
    z_dim: int = Field(64, ge=1)
    critic_width: int = Field(32, ge=1)
    critic_down: int = Field(3, ge=1)
    critic_bound: float | None = Field(10.0, gt=0)  # |E| <= bound via a scaled tanh; None leaves it open
    proj_dim: int = Field(256, ge=1)
    n_nce_layers: int = Field(4, ge=1)
    num_patches: int = Field(256, ge=2)
    nce_temperature: float = Field(0.07, gt=0)


# ---------------------------------------------------------------------------
# conditioning


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, shape ``(N, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


def _step_tensor(t, batch: int, device) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        t = t.to(device=device, dtype=torch.long).reshape(-1)
        return t.expand(batch) if t.numel() == 1 else t
    return torch.full((batch,), int(t), dtype=torch.long, device=device)


class TimeEmbed(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.LeakyReLU(0.2), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        ref = self.mlp[0].weight
        return self.mlp(timestep_embedding(t, self.dim).to(dtype=ref.dtype, device=ref.device))


class AdaptiveNorm(nn.Module):
    """Instance norm whose scale/shift are predicted from a conditioning vector."""

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.style = nn.Linear(cond_dim, 2 * channels)

    def forward(self, x, cond):
        gamma, beta = self.style(cond)[:, :, None, None].chunk(2, dim=1)
        return self.norm(x) * (1 + gamma) + beta


class ConvNormAct(nn.Module):
    def __init__(self, cin, cout, kernel, stride, cond_dim, reflect_pad=0, padding=0):
        super().__init__()
        self.pad = nn.ReflectionPad2d(reflect_pad) if reflect_pad else nn.Identity()
        self.conv = nn.Conv2d(cin, cout, kernel, stride, padding)
        self.norm = AdaptiveNorm(cout, cond_dim)

    def forward(self, x, cond):
        return F.relu(self.norm(self.conv(self.pad(x)), cond))


class ResBlockCond(nn.Module):
    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3)
        self.norm1 = AdaptiveNorm(channels, cond_dim)
        self.conv2 = nn.Conv2d(channels, channels, 3)
        self.norm2 = AdaptiveNorm(channels, cond_dim)

    def forward(self, x, cond):
        h = F.relu(self.norm1(self.conv1(F.pad(x, (1, 1, 1, 1), mode="reflect")), cond))
        h = self.norm2(self.conv2(F.pad(h, (1, 1, 1, 1), mode="reflect")), cond)
        return x + h


class UpNormAct(nn.Module):
    def __init__(self, cin, cout, cond_dim):
        super().__init__()
        self.conv = nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1)
        self.norm = AdaptiveNorm(cout, cond_dim)

    def forward(self, x, cond):
        return F.relu(self.norm(self.conv(x), cond))


# ---------------------------------------------------------------------------
# generator


class Generator(nn.Module):
    """Encoder / residual trunk / decoder mapper conditioned on step and latent z.

    The step index and latent are embedded, summed, and injected through
    adaptive instance norm in every encoder, trunk and decoder layer.
    """

    def __init__(self, cfg: ModelConfig, max_step: int):
        super().__init__()
        self.cfg = cfg
        self.max_step = max_step
        self.z_dim = cfg.z_dim
        cond = cfg.emb_dim
        self.time_embed = TimeEmbed(cond)
        self.z_embed = nn.Sequential(nn.Linear(cfg.z_dim, cond), nn.LeakyReLU(0.2), nn.Linear(cond, cond))

        ngf = cfg.ngf
        self.stem = ConvNormAct(cfg.in_channels, ngf, 7, 1, cond, reflect_pad=3)
        self.downs = nn.ModuleList()
        ch = ngf
        for _ in range(cfg.n_down):
            self.downs.append(ConvNormAct(ch, ch * 2, 3, 2, cond, padding=1))
            ch *= 2
        self.blocks = nn.ModuleList(ResBlockCond(ch, cond) for _ in range(cfg.n_blocks))
        self.ups = nn.ModuleList()
        for _ in range(cfg.n_down):
            self.ups.append(UpNormAct(ch, ch // 2, cond))
            ch //= 2
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(ch, cfg.in_channels, 7))

        n_feats = 1 + cfg.n_down + cfg.n_blocks
        picks = np.linspace(0, n_feats - 1, min(cfg.n_nce_layers, n_feats))
        self.nce_layers = sorted({int(round(v)) for v in picks})
        widths = [ngf] + [ngf * 2 ** (i + 1) for i in range(cfg.n_down)] + [ngf * 2 ** cfg.n_down] * cfg.n_blocks
        self.feature_channels = [widths[i] for i in self.nce_layers]

    @property
    def final_layer(self) -> nn.Conv2d:
        return self.head[1]

    def _cond(self, x, t, z):
        steps = _step_tensor(t, x.shape[0], x.device)
        if (steps < 0).any() or (steps > self.max_step).any():
            raise ValueError(f"step index {steps.tolist()} outside [0, {self.max_step}]")
        if z is None:
            z = torch.zeros(x.shape[0], self.z_dim, dtype=x.dtype, device=x.device)
        return self.time_embed(steps) + self.z_embed(z.to(x.dtype))

    def _trunk(self, x, cond, layers=None):
        stop = max(layers) if layers else None
        feats = []
        h = self.stem(x, cond)
        feats.append(h)
        for m in list(self.downs) + list(self.blocks):
            if stop is not None and len(feats) > stop:
                break
            h = m(h, cond)
            feats.append(h)
        if layers is not None:
            return h, [feats[i] for i in layers]
        return h, None

    def forward(self, x, t, z=None):
        cond = self._cond(x, t, z)
        h, _ = self._trunk(x, cond)
        for m in self.ups:
            h = m(h, cond)
        return torch.tanh(self.head(h))

    def encode(self, x, t, z=None, layers=None):
        """Encoder/trunk activations at ``layers`` (default: the patchNCE layers)."""
        cond = self._cond(x, t, z)
        _, feats = self._trunk(x, cond, self.nce_layers if layers is None else layers)
        return feats


# ---------------------------------------------------------------------------
# discriminator


class TimeBias(nn.Module):
    """Per-channel bias from the step embedding (spatially constant)."""

    def __init__(self, cond_dim, channels):
        super().__init__()
        self.proj = nn.Linear(cond_dim, channels)

    def forward(self, h, cond):
        if cond is None:
            return h
        return h + self.proj(cond)[:, :, None, None]


class Decoder(nn.Module):
    """Four time-conditioned conv layers; the first ``n_up`` each upsample x2."""

    def __init__(self, cin, width, cond_dim, n_up, out_channels=1):
        super().__init__()
        if not 0 <= n_up <= 4:
            raise ValueError("decoder supports 0..4 upsampling stages")
        self.n_up = n_up
        chans = [cin, width, width, max(width // 2, 1), out_channels]
        self.convs = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 3, padding=1) for i in range(4))
        self.biases = nn.ModuleList(TimeBias(cond_dim, chans[i + 1]) for i in range(4))

    def forward(self, h, cond):
        for i, (conv, tb) in enumerate(zip(self.convs, self.biases)):
            if i < self.n_up:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = tb(conv(h), cond)
            h = torch.tanh(h) if i == 3 else F.leaky_relu(h, 0.2)
        return h


class PatchDiscriminator(nn.Module):
    """Markovian discriminator with optional resize/crop reconstruction decoders.

    ``d_layers`` stride-2 convolutions are followed by one stride-1 conv and a
    one-channel score head (kernel 4 everywhere). With 3 layers the receptive
    field is 70 px and a 256 px input yields a 30x30 score map. No
    normalization layer is used, so each score depends only on its receptive
    field.
    """

    def __init__(self, cfg: ModelConfig, max_step: int, ssl_decoders: bool = True):
        super().__init__()
        self.cfg = cfg
        self.max_step = max_step
        self.time_cond = cfg.d_time_cond
        cond = cfg.emb_dim
        self.time_embed = TimeEmbed(cond)
        ndf, cap = cfg.ndf, cfg.d_max_mult
        chans = [cfg.in_channels] + [ndf * min(2 ** i, cap) for i in range(cfg.d_layers)]
        self.convs = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 4, 2, 1) for i in range(cfg.d_layers))
        self.tbias = nn.ModuleList(TimeBias(cond, c) for c in chans[1:])
        c_last = ndf * min(2 ** cfg.d_layers, cap)
        self.conv_s1 = nn.Conv2d(chans[-1], c_last, 4, 1, 1)
        self.tbias_s1 = TimeBias(cond, c_last)
        self.score = nn.Conv2d(c_last, 1, 4, 1, 1)
        self.stride_final = 2 ** cfg.d_layers
        self.stride_crop = 2 ** (cfg.d_layers - 1)
        self.ssl = ssl_decoders
        if ssl_decoders:
            # resize target is half the canvas; crop target keeps input resolution
            self.dec_resize = Decoder(chans[-1], cfg.dec_width, cond, cfg.d_layers - 1)
            self.dec_crop = Decoder(chans[-2], cfg.dec_width, cond, cfg.d_layers - 1)

    def _cond(self, x, t):
        if not self.time_cond:
            return None
        steps = _step_tensor(t, x.shape[0], x.device)
        if (steps < 0).any() or (steps > self.max_step).any():
            raise ValueError(f"step index {steps.tolist()} outside [0, {self.max_step}]")
        return self.time_embed(steps)

    def forward(self, x, t):
        cond = self._cond(x, t)
        h = x
        feats = []
        for conv, tb in zip(self.convs, self.tbias):
            h = F.leaky_relu(tb(conv(h), cond), 0.2)
            feats.append(h)
        h = F.leaky_relu(self.tbias_s1(self.conv_s1(h), cond), 0.2)
        features = {"crop": feats[-2], "resize": feats[-1], "cond": cond}
        return self.score(h), features

    def decode_resize(self, features):
        if not self.ssl:
            raise RuntimeError("discriminator was built without decoders")
        return self.dec_resize(features["resize"], features["cond"])

    def decode_crop(self, features, crop_box):
        if not self.ssl:
            raise RuntimeError("discriminator was built without decoders")
        f = features["crop"]
        s = self.stride_crop
        top, left, h, w = check_crop_box(crop_box, (f.shape[-2] * s, f.shape[-1] * s), s)
        f = f[..., top // s:(top + h) // s, left // s:(left + w) // s]
        return self.dec_crop(f, features["cond"])


def check_crop_box(crop_box, canvas, align: int = 1):
    top, left, h, w = (int(v) for v in crop_box)
    H, W = canvas
    if h <= 0 or w <= 0 or top < 0 or left < 0 or top + h > H or left + w > W:
        raise ValueError(f"crop box {crop_box} out of bounds for canvas {canvas}")
    if any(v % align for v in (top, left, h, w)):
        raise ValueError(f"crop box {crop_box} must be aligned to multiples of {align}")
    return top, left, h, w


def resize_target(x: torch.Tensor, size=None) -> torch.Tensor:
    """Bilinear down-sample of the discriminator input (half canvas by default)."""
    if size is None:
        size = (x.shape[-2] // 2, x.shape[-1] // 2)
    if tuple(size) == tuple(x.shape[-2:]):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def crop_target(x: torch.Tensor, crop_box) -> torch.Tensor:
    top, left, h, w = check_crop_box(crop_box, x.shape[-2:])
    return x[..., top:top + h, left:left + w]


def random_crop_box(canvas, align: int, gen: torch.Generator | None = None):
    """Random square of side canvas/2 on the ``align`` grid."""
    H, W = canvas
    side = min(H, W) // 2 // align * align
    ny, nx = (H - side) // align + 1, (W - side) // align + 1
    iy = int(torch.randint(0, ny, (1,), generator=gen))
    ix = int(torch.randint(0, nx, (1,), generator=gen))
    return (iy * align, ix * align, side, side)


def receptive_field(d: PatchDiscriminator):
    """(rf, jump, start) of the score map: score (i, j) covers input rows
    ``start + i*jump`` .. ``start + i*jump + rf - 1`` (same for columns)."""
    rf, jump, start = 1, 1, 0.0
    layers = list(d.convs) + [d.conv_s1, d.score]
    for conv in layers:
        k, s, p = conv.kernel_size[0], conv.stride[0], conv.padding[0]
        start = start - p * jump
        rf = rf + (k - 1) * jump
        jump = jump * s
    return rf, jump, int(start)


# ---------------------------------------------------------------------------
# MI critic and projector


class MICritic(nn.Module):
    """Scalar statistics network on (intermediate, endpoint, masked endpoint).

    Stride-2 3x3 convolutions, global mean pooling, then a two-layer head. A
    missing masked image is fed as zeros. On 1x1 inputs the convolutions reduce
    to dense layers, so the same network doubles as a plain MLP critic.

    When image pairs are easy to tell apart the DV objective has no finite
    optimum, so the output is squashed to ``bound * tanh(score / bound)``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.critic_width
        chans = [3 * cfg.in_channels] + [w * min(2 ** i, 4) for i in range(cfg.critic_down)]
        self.convs = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 3, 2, 1) for i in range(cfg.critic_down))
        self.head = nn.Sequential(nn.Linear(chans[-1], w), nn.LeakyReLU(0.2), nn.Linear(w, 1))
        self.bound = cfg.critic_bound

    def forward(self, x_t, x_end, masked=None):
        if x_t.shape != x_end.shape:
            raise ValueError(f"shape mismatch {tuple(x_t.shape)} vs {tuple(x_end.shape)}")
        if masked is None:
            masked = torch.zeros_like(x_end)
        h = torch.cat([x_t, x_end, masked], dim=1)
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        score = self.head(h.mean(dim=(2, 3))).squeeze(1)
        if self.bound is not None:
            score = self.bound * torch.tanh(score / self.bound)
        return score


class PatchProjector(nn.Module):
    """Per-layer two-layer MLP mapping sampled features to unit-norm embeddings."""

    def __init__(self, channels: list[int], dim: int = 256):
        super().__init__()
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(c, dim), nn.ReLU(), nn.Linear(dim, dim)) for c in channels)

    def forward(self, feats_by_layer, locations):
        return sample_patch_embeddings(feats_by_layer, locations, self)


def sample_patch_embeddings(feats_by_layer, locations, projector: PatchProjector):
    """Gather features at flat ``locations`` per layer and project.

    Returns one ``(N, P, dim)`` tensor per layer with L2-normalized rows.
    """
    if len(feats_by_layer) != len(locations) or len(locations) != len(projector.mlps):
        raise ValueError("need one location set per feature layer and projector head")
    out = []
    for feat, loc, mlp in zip(feats_by_layer, locations, projector.mlps):
        n, c, h, w = feat.shape
        loc = torch.as_tensor(loc, dtype=torch.long, device=feat.device)
        if loc.numel() and (loc.min() < 0 or loc.max() >= h * w):
            raise IndexError(f"location outside the {h}x{w} feature grid")
        flat = feat.flatten(2).transpose(1, 2)  # N, HW, C
        picked = flat[:, loc]  # N, P, C
        emb = mlp(picked)
        out.append(emb / emb.norm(dim=-1, keepdim=True).clamp_min(1e-7))
    return out


# ---------------------------------------------------------------------------
# bundle


@dataclass
class ModelBundle:
    generator: Generator
    discriminator: PatchDiscriminator
    critic: MICritic | None
    projector: PatchProjector
    canvas: tuple[int, int] | None = None

    def networks(self) -> dict[str, nn.Module]:
        nets = {"generator": self.generator, "discriminator": self.discriminator, "projector": self.projector}
        if self.critic is not None:
            nets["critic"] = self.critic
        return nets

    def to(self, *args, **kwargs) -> "ModelBundle":
        for net in self.networks().values():
            net.to(*args, **kwargs)
        return self

    def train(self, mode: bool = True) -> "ModelBundle":
        for net in self.networks().values():
            net.train(mode)
        return self

    def eval(self) -> "ModelBundle":
        return self.train(False)


def build_bundle(cfg: ModelConfig, max_step: int, with_critic: bool = True,
                 ssl_decoders: bool = True, seed: int | None = None) -> ModelBundle:
    if seed is not None:
        torch.manual_seed(seed)
    g = Generator(cfg, max_step)
    d = PatchDiscriminator(cfg, max_step, ssl_decoders=ssl_decoders)
    e = MICritic(cfg) if with_critic else None
    f = PatchProjector(g.feature_channels, cfg.proj_dim)
    bundle = ModelBundle(g, d, e, f)
    for net in bundle.networks().values():
        init_weights(net)
    return bundle


def init_weights(net: nn.Module, gain: float = 0.02) -> None:
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def count_parameters(obj) -> int | dict[str, int]:
    """Trainable parameter count of a module, or per network for a bundle."""
    if isinstance(obj, ModelBundle):
        return {name: count_parameters(net) for name, net in obj.networks().items()}
    return sum(p.numel() for p in obj.parameters() if p.requires_grad)
