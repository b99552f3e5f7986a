"""The restoration network.

Blurry LR frames and intra-exposure voxels are fused by reciprocal
cross-modal attention (event features deblur frame features, frame features
lend scene context to event features); inter-frame voxels and optical flow
jointly condition deformable alignment inside a bidirectional recurrent
propagation; aligned features are pixel-shuffled to HR on top of a bicubic
skip.

Initialization contract: every learned residual branch ends in a
zero-initialized layer (attention output/value projections, MLP tails, flow
prediction heads, DCN offset predictor, fusion tails, final reconstruction
conv), so a freshly built model reproduces per-frame bicubic upsampling
exactly. The DCN modulation predictor starts near-saturated (bias
``DCN_MASK_BIAS``) so deformable aggregation begins as a plain convolution.
"""

from __future__ import annotations

import contextlib
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from evdvsr.config import ModelConfig
from evdvsr.errors import InvalidInputError
from evdvsr.resize import upsample_frame

DCN_MASK_BIAS = 12.0

# Fault-injection hooks for the self-check suite. Never set outside tests.
_ACTIVE_FAULTS: set[str] = set()
KNOWN_FAULTS = ("dcn-clamp",)


@contextlib.contextmanager
def inject_fault(name: str):
    if name not in KNOWN_FAULTS:
        raise InvalidInputError(f"unknown fault {name!r}")
    _ACTIVE_FAULTS.add(name)
    try:
        yield
    finally:
        _ACTIVE_FAULTS.discard(name)


def zero_init(module: nn.Module) -> nn.Module:
    """Zero a conv/linear layer so its residual branch starts inert."""
    nn.init.zeros_(module.weight)
    if module.bias is not None:
        nn.init.zeros_(module.bias)
    return module


def bilinear_sample(feat: torch.Tensor, cx: torch.Tensor, cy: torch.Tensor,
                    padding: str = "border") -> torch.Tensor:
    """Sample feat (M, C, H, W) at pixel coords cx/cy (M, Ho, Wo).

    Pure tensor-op implementation: exact at integer coordinates (no
    normalized-grid round-trip), differentiable w.r.t. both the features and
    the coordinates, and dtype-agnostic. ``padding`` is ``border`` (clamped
    coordinates) or ``zeros`` (out-of-bounds reads contribute zero).
    """
    m, c, h, w = feat.shape
    if padding == "border":
        cx = cx.clamp(0, w - 1)
        cy = cy.clamp(0, h - 1)
    x0 = torch.floor(cx)
    y0 = torch.floor(cy)
    fx = cx - x0
    fy = cy - y0

    flat = feat.reshape(m, c, h * w)

    def corner(ix, iy):
        if padding == "zeros":
            valid = (ix >= 0) & (ix <= w - 1) & (iy >= 0) & (iy <= h - 1)
        ixc = ix.clamp(0, w - 1).long()
        iyc = iy.clamp(0, h - 1).long()
        lin = (iyc * w + ixc).reshape(m, 1, -1).expand(m, c, -1)
        vals = flat.gather(2, lin).reshape(m, c, *ix.shape[-2:])
        if padding == "zeros":
            vals = vals * valid.to(feat.dtype).unsqueeze(1)
        return vals

    w00 = ((1 - fy) * (1 - fx)).unsqueeze(1)
    w01 = ((1 - fy) * fx).unsqueeze(1)
    w10 = (fy * (1 - fx)).unsqueeze(1)
    w11 = (fy * fx).unsqueeze(1)
    return (w00 * corner(x0, y0) + w01 * corner(x0 + 1, y0)
            + w10 * corner(x0, y0 + 1) + w11 * corner(x0 + 1, y0 + 1))


def backward_warp(feature: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Warp a feature map by sampling at (x + dx, y + dy), border-clamped."""
    if flow.shape[0] != feature.shape[0] or flow.shape[1] != 2 \
            or flow.shape[-2:] != feature.shape[-2:]:
        raise InvalidInputError("flow must be (N, 2, H, W) matching the feature")
    n, _, h, w = feature.shape
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=feature.dtype, device=feature.device),
        torch.arange(w, dtype=feature.dtype, device=feature.device),
        indexing="ij")
    cx = xs.unsqueeze(0) + flow[:, 0]
    cy = ys.unsqueeze(0) + flow[:, 1]
    return bilinear_sample(feature, cx, cy, padding="border")


def deform_conv(feat: torch.Tensor, off_x: torch.Tensor, off_y: torch.Tensor,
                mask: torch.Tensor, weight: torch.Tensor,
                bias: torch.Tensor | None) -> torch.Tensor:
    """Modulated 3x3 deformable convolution (stride 1, zero padding).

    ``off_x``/``off_y`` are (N, G, 9, H, W) per-group per-tap displacements
    added to the standard sampling grid; ``mask`` is (N, G, 9, H, W).
    Out-of-bounds samples read zero, matching a zero-padded convolution, so
    zero offsets with unit masks reduce to ``conv2d(feat, weight, padding=1)``.
    """
    n, c, h, w = feat.shape
    g = off_x.shape[1]
    cg = c // g
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=feat.dtype, device=feat.device),
        torch.arange(w, dtype=feat.dtype, device=feat.device),
        indexing="ij")
    taps_y = torch.tensor([-1, -1, -1, 0, 0, 0, 1, 1, 1],
                          dtype=feat.dtype, device=feat.device)
    taps_x = torch.tensor([-1, 0, 1, -1, 0, 1, -1, 0, 1],
                          dtype=feat.dtype, device=feat.device)
    cx = xs + taps_x.view(1, 1, 9, 1, 1) + off_x
    cy = ys + taps_y.view(1, 1, 9, 1, 1) + off_y

    rep = feat.reshape(n, g, 1, cg, h, w).expand(n, g, 9, cg, h, w)
    rep = rep.reshape(n * g * 9, cg, h, w)
    sampled = bilinear_sample(rep, cx.reshape(n * g * 9, h, w),
                              cy.reshape(n * g * 9, h, w), padding="zeros")
    sampled = sampled.reshape(n, g, 9, cg, h, w) * mask.unsqueeze(3)
    # reorder to channel-major (c, tap) pairs matching weight.view(Cout, C*9)
    sampled = sampled.permute(0, 1, 3, 2, 4, 5).reshape(n, c * 9, h, w)
    return F.conv2d(sampled, weight.reshape(weight.shape[0], c * 9, 1, 1), bias)


class ResidualBlock(nn.Module):
    """3x3 conv pair with a zero-initialized learnable residual scale."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.scale = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return x + self.scale * self.conv2(
            F.leaky_relu(self.conv1(x), 0.1))


class FeatureExtractor(nn.Module):
    """Stem projection followed by a stack of residual blocks."""

    def __init__(self, in_channels: int, channels: int, num_blocks: int = 5):
        super().__init__()
        self.in_channels = in_channels
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, channels, 3, padding=1),
            nn.LeakyReLU(0.1))
        self.blocks = nn.Sequential(
            *[ResidualBlock(channels) for _ in range(num_blocks)])

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise InvalidInputError(
                f"extractor expects {self.in_channels} input channels, "
                f"got {x.shape[1]}")
        return self.blocks(self.stem(x))


def _channel_attention(q, k, v, heads: int, scale: float):
    """Transposed attention over the channel axis; returns (out, attn)."""
    n, c, h, w = q.shape
    d = c // heads
    qh = q.reshape(n, heads, d, h * w)
    kh = k.reshape(n, heads, d, h * w)
    vh = v.reshape(n, heads, d, h * w)
    attn = torch.softmax(torch.matmul(qh, kh.transpose(-1, -2)) * scale, dim=-1)
    out = torch.matmul(attn, vh).reshape(n, c, h, w)
    return out, attn


class ChannelAttentionBlock(nn.Module):
    """Multi-head channel self-attention with a zero-initialized output
    projection, so the block starts as the identity."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise InvalidInputError("channels must divide by attention heads")
        self.heads = heads
        self.scale = 1.0 / math.sqrt(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = zero_init(nn.Conv2d(channels, channels, 1))

    def forward(self, x, return_attn: bool = False):
        q, k, v = self.qkv(x).chunk(3, dim=1)
        out, attn = _channel_attention(q, k, v, self.heads, self.scale)
        y = x + self.proj(out)
        return (y, attn) if return_attn else y


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel vector at each spatial position."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        y = x.permute(0, 2, 3, 1)
        y = F.layer_norm(y, (x.shape[1],), self.weight, self.bias)
        return y.permute(0, 3, 1, 2)


class CrossModalAttention(nn.Module):
    """QKV channel attention between two modalities plus a pre-norm MLP.

    Query comes from the feature being refined; keys/values from the other
    modality. The value projection and the MLP tail are zero-initialized, so
    the module returns the query feature unchanged at init.
    """

    def __init__(self, channels: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.heads = heads
        self.scale = 1.0 / math.sqrt(channels)
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Conv2d(channels, channels, 1)
        self.to_v = zero_init(nn.Conv2d(channels, channels, 1))
        self.norm = ChannelLayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, channels * mlp_ratio, 1),
            nn.GELU(),
            zero_init(nn.Conv2d(channels * mlp_ratio, channels, 1)))

    def forward(self, query_feat, kv_feat, return_attn: bool = False):
        if query_feat.shape != kv_feat.shape:
            raise InvalidInputError("cross-modal attention needs equal shapes")
        out, attn = _channel_attention(
            self.to_q(query_feat), self.to_k(kv_feat), self.to_v(kv_feat),
            self.heads, self.scale)
        x = query_feat + out
        x = x + self.mlp(self.norm(x))
        return (x, attn) if return_attn else x


class RFDModule(nn.Module):
    """Reciprocal feature deblurring.

    Both features pass a channel attention block; frame context then enhances
    the event feature (i->e), and the enhanced event feature deblurs the frame
    feature (e->i). ``order`` swaps the sequence; ``use_i2e=False`` bypasses
    the enhancement step and conditions e->i on the raw event feature.
    """

    def __init__(self, channels: int, heads: int, order: str = "ie_then_ei",
                 use_i2e: bool = True):
        super().__init__()
        self.order = order
        self.use_i2e = use_i2e
        self.cab_frame = ChannelAttentionBlock(channels, heads)
        self.cab_event = ChannelAttentionBlock(channels, heads)
        self.attn_i2e = CrossModalAttention(channels, heads)
        self.attn_e2i = CrossModalAttention(channels, heads)

    def forward(self, frame_feat, event_feat):
        if frame_feat.shape != event_feat.shape:
            raise InvalidInputError("RFD inputs must share a shape")
        ci = self.cab_frame(frame_feat)
        ce = self.cab_event(event_feat)
        if self.order == "ie_then_ei":
            ce2 = self.attn_i2e(ce, ci) if self.use_i2e else ce
            ci2 = self.attn_e2i(ci, ce2)
        else:
            ci2 = self.attn_e2i(ci, ce)
            ce2 = self.attn_i2e(ce, ci2) if self.use_i2e else ce
        return ci2, ce2


class FlowNet(nn.Module):
    """Compact 3-level coarse-to-fine residual flow estimator.

    Each level predicts a residual on the x2-upsampled coarser flow from the
    reference frame, the flow-warped other frame, and the flow itself. The
    prediction heads are zero-initialized: a fresh network estimates zero
    flow everywhere. Output is (N, 2, H, W) as (dx, dy), mapping frame_t
    coordinates into frame_ref.
    """

    LEVELS = 3

    def __init__(self, mid_channels: int = 16):
        super().__init__()
        def level_net():
            return nn.Sequential(
                nn.Conv2d(8, mid_channels, 3, padding=1),
                nn.LeakyReLU(0.1),
                nn.Conv2d(mid_channels, mid_channels, 3, padding=1),
                nn.LeakyReLU(0.1),
                zero_init(nn.Conv2d(mid_channels, 2, 3, padding=1)))
        self.levels = nn.ModuleList([level_net() for _ in range(self.LEVELS)])

    def forward(self, frame_t, frame_ref):
        if frame_t.shape != frame_ref.shape:
            raise InvalidInputError("flow estimation needs equal frame shapes")
        if frame_t.shape[-2] % 4 or frame_t.shape[-1] % 4:
            raise InvalidInputError("flow pyramid needs H, W divisible by 4")
        pyr_t = [frame_t]
        pyr_r = [frame_ref]
        for _ in range(self.LEVELS - 1):
            pyr_t.append(F.avg_pool2d(pyr_t[-1], 2))
            pyr_r.append(F.avg_pool2d(pyr_r[-1], 2))
        flow = None
        for lvl in range(self.LEVELS - 1, -1, -1):
            a, b = pyr_t[lvl], pyr_r[lvl]
            if flow is None:
                flow = torch.zeros(a.shape[0], 2, a.shape[2], a.shape[3],
                                   dtype=a.dtype, device=a.device)
            else:
                flow = 2.0 * F.interpolate(flow, scale_factor=2,
                                           mode="bilinear", align_corners=False)
            warped = backward_warp(b, flow)
            flow = flow + self.levels[lvl](torch.cat([a, warped, flow], dim=1))
        return flow


class EGABlock(nn.Module):
    """Event-guided alignment: channel-similarity modulation of the hidden
    state by inter-frame event features.

    Scores average 1/C, so the modulation is rescaled by C: a uniform score
    map leaves the hidden state unchanged.
    """

    def __init__(self, channels: int, in_channels: int | None = None):
        super().__init__()
        self.channels = channels
        self.proj_voxel = nn.Conv2d(in_channels or channels, channels, 1)
        self.proj_hidden = nn.Conv2d(channels, channels, 1)

    def forward(self, h_prev, inter_feat, return_scores: bool = False):
        if h_prev.shape[-2:] != inter_feat.shape[-2:]:
            raise InvalidInputError("EGA inputs must align spatially")
        v = self.proj_voxel(inter_feat)
        scores = torch.softmax(v * self.proj_hidden(h_prev), dim=1)
        out = h_prev * (self.channels * scores) + v
        return (out, scores) if return_scores else out


class HDAModule(nn.Module):
    """Hybrid deformable alignment.

    Builds the condition pool (event-aligned hidden state, flow-warped hidden
    state, both RFD features, and the flow), predicts per-group DCN offset
    residuals (clamped, added to the flow) and modulation masks, and
    deformably aggregates the previous hidden state.
    """

    def __init__(self, channels: int, groups: int, offset_clamp: float,
                 use_ega: bool = True, use_fga: bool = True,
                 inter_channels: int | None = None):
        super().__init__()
        if channels % groups:
            raise InvalidInputError("channels must divide by dcn_groups")
        self.channels = channels
        self.groups = groups
        self.offset_clamp = float(offset_clamp)
        self.use_ega = use_ega
        self.use_fga = use_fga
        self.ega = EGABlock(channels, inter_channels) if use_ega else None
        pool = channels * 2 + 2 + (channels if use_ega else 0) \
            + (channels if use_fga else 0)
        self.cond = nn.Sequential(
            nn.Conv2d(pool, channels, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.LeakyReLU(0.1))
        self.offset_conv = zero_init(
            nn.Conv2d(channels, groups * 9 * 2, 3, padding=1))
        self.mask_conv = nn.Conv2d(channels, groups * 9, 3, padding=1)
        nn.init.zeros_(self.mask_conv.weight)
        nn.init.constant_(self.mask_conv.bias, DCN_MASK_BIAS)
        self.dcn_weight = nn.Parameter(torch.empty(channels, channels, 3, 3))
        nn.init.kaiming_uniform_(self.dcn_weight, a=math.sqrt(5))
        self.dcn_bias = nn.Parameter(torch.zeros(channels))

    def forward(self, h_prev, inter_feat, flow, event_feat, frame_feat,
                return_offsets: bool = False):
        n, c, h, w = h_prev.shape
        if c != self.channels:
            raise InvalidInputError("hidden state channel mismatch")
        if flow is None:
            flow = torch.zeros(n, 2, h, w, dtype=h_prev.dtype,
                               device=h_prev.device)
        for t in (inter_feat, flow, event_feat, frame_feat):
            if t.shape[-2:] != (h, w):
                raise InvalidInputError("HDA inputs must align spatially")
        if not self.use_fga:
            flow = torch.zeros_like(flow)

        pool = []
        if self.use_ega:
            pool.append(self.ega(h_prev, inter_feat))
        if self.use_fga:
            pool.append(backward_warp(h_prev, flow))
        pool.extend([event_feat, frame_feat, flow])
        x = self.cond(torch.cat(pool, dim=1))

        res = self.offset_conv(x).reshape(n, self.groups, 9, 2, h, w)
        if "dcn-clamp" not in _ACTIVE_FAULTS:
            res = res.clamp(-self.offset_clamp, self.offset_clamp)
        off_x = flow[:, 0].reshape(n, 1, 1, h, w) + res[:, :, :, 0]
        off_y = flow[:, 1].reshape(n, 1, 1, h, w) + res[:, :, :, 1]
        mask = torch.sigmoid(self.mask_conv(x)).reshape(n, self.groups, 9, h, w)
        out = deform_conv(h_prev, off_x, off_y, mask,
                          self.dcn_weight, self.dcn_bias)
        if return_offsets:
            return out, {"off_x": off_x, "off_y": off_y, "flow": flow,
                         "mask": mask}
        return out


class FusionBlock(nn.Module):
    """Residual fusion of current-frame features with an aligned hidden
    state; the tail conv is zero-initialized (identity at init)."""

    def __init__(self, channels: int, extra_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels + extra_channels, channels, 3,
                               padding=1)
        self.conv2 = zero_init(nn.Conv2d(channels, channels, 3, padding=1))

    def forward(self, base, extra):
        return base + self.conv2(
            F.leaky_relu(self.conv1(torch.cat([base, extra], dim=1)), 0.1))


class Upsampler(nn.Module):
    """Pixel-shuffle reconstruction on top of a bicubic skip."""

    def __init__(self, channels: int, scale: int, hr_channels: int = 16):
        super().__init__()
        if scale not in (2, 4):
            raise InvalidInputError("upsampling scale must be 2 or 4")
        self.scale = scale
        stages = []
        ch = channels
        for i in range(int(math.log2(scale))):
            out_ch = channels if i == 0 and scale == 4 else hr_channels
            stages += [nn.Conv2d(ch, out_ch * 4, 3, padding=1),
                       nn.PixelShuffle(2),
                       nn.LeakyReLU(0.1)]
            ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.conv_last = zero_init(nn.Conv2d(ch, 3, 3, padding=1))

    def forward(self, feat, frame):
        if frame.shape[-2:] != feat.shape[-2:]:
            raise InvalidInputError("feature and frame must share LR geometry")
        return self.conv_last(self.stages(feat)) \
            + upsample_frame(frame, self.scale)


class EvDeblurVSR(nn.Module):
    """Full network: extraction -> RFD -> bidirectional HDA propagation ->
    pixel-shuffle reconstruction."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        c = cfg.channels
        self.frame_extractor = FeatureExtractor(3, c, cfg.residual_blocks)
        self.intra_extractor = FeatureExtractor(cfg.voxel_bins, c,
                                                cfg.residual_blocks)
        self.inter_extractor = FeatureExtractor(cfg.voxel_bins, c,
                                                cfg.residual_blocks)
        self.rfd = RFDModule(c, cfg.attention_heads, cfg.rfd_order,
                             cfg.use_rfd_i2e)
        self.flownet = FlowNet() if cfg.use_fga else None
        self.hda_backward = HDAModule(c, cfg.dcn_groups, cfg.dcn_offset_clamp,
                                      cfg.use_ega, cfg.use_fga)
        self.hda_forward = HDAModule(c, cfg.dcn_groups, cfg.dcn_offset_clamp,
                                     cfg.use_ega, cfg.use_fga)
        self.fuse_backward = FusionBlock(c, c)
        self.fuse_forward = FusionBlock(c, c)
        self.out_fuse = nn.Sequential(nn.Conv2d(2 * c, c, 1),
                                      nn.LeakyReLU(0.1))
        self.upsampler = Upsampler(c, cfg.scale)

    def _check_inputs(self, frames, intra, fwd, bwd):
        if frames.dim() != 5 or frames.shape[2] != 3:
            raise InvalidInputError("frames must be (N, T, 3, H, W)")
        n, t = frames.shape[:2]
        b = self.config.voxel_bins
        if intra.shape != (n, t, b, *frames.shape[-2:]):
            raise InvalidInputError("intra voxels inconsistent with config")
        want = (n, max(t - 1, 0), b, *frames.shape[-2:])
        if tuple(fwd.shape) != want or tuple(bwd.shape) != want:
            raise InvalidInputError("inter voxels must be (N, T-1, B, H, W)")
        if self.config.use_fga and (frames.shape[-2] % 4 or frames.shape[-1] % 4):
            raise InvalidInputError("flow pyramid needs H, W divisible by 4")

    def propagate(self, frame_feats, event_feats, fwd_voxels, bwd_voxels,
                  frames, return_internals: bool = False):
        """Bidirectional recurrent alignment.

        The backward sweep runs first (anti-causal); the forward sweep is
        causal in its own hidden state; each frame's output fuses both branch
        features, which is where backward information reaches the forward
        result.
        """
        t_len = len(frame_feats)
        if len(event_feats) != t_len:
            raise InvalidInputError("feature sequences must share a length")
        if fwd_voxels.shape[1] != max(t_len - 1, 0) \
                or bwd_voxels.shape[1] != max(t_len - 1, 0):
            raise InvalidInputError("need T-1 inter voxel grids per direction")
        use_flow = self.flownet is not None

        inter_b = [self.inter_extractor(bwd_voxels[:, i])
                   for i in range(t_len - 1)]
        inter_f = [self.inter_extractor(fwd_voxels[:, i])
                   for i in range(t_len - 1)]

        zeros = torch.zeros_like(frame_feats[0])
        out_b: list = [None] * t_len
        h = None
        flows_b = [None] * t_len
        for t in range(t_len - 1, -1, -1):
            if t == t_len - 1:
                aligned = zeros
            else:
                flow = self.flownet(frames[:, t], frames[:, t + 1]) \
                    if use_flow else None
                flows_b[t] = flow
                aligned = self.hda_backward(h, inter_b[t], flow,
                                            event_feats[t], frame_feats[t])
            h = self.fuse_backward(frame_feats[t], aligned)
            out_b[t] = h

        out_f: list = [None] * t_len
        h = None
        flows_f = [None] * t_len
        for t in range(t_len):
            if t == 0:
                aligned = zeros
            else:
                flow = self.flownet(frames[:, t], frames[:, t - 1]) \
                    if use_flow else None
                flows_f[t] = flow
                aligned = self.hda_forward(h, inter_f[t - 1], flow,
                                           event_feats[t], frame_feats[t])
            h = self.fuse_forward(frame_feats[t], aligned)
            out_f[t] = h

        fused = [self.out_fuse(torch.cat([out_b[t], out_f[t]], dim=1))
                 for t in range(t_len)]
        if return_internals:
            return fused, {"backward": out_b, "forward": out_f,
                           "flows_backward": flows_b, "flows_forward": flows_f}
        return fused

    def forward(self, frames, intra_voxels, fwd_voxels, bwd_voxels):
        """Restore T sharp HR frames from (N, T, ...) batched inputs."""
        self._check_inputs(frames, intra_voxels, fwd_voxels, bwd_voxels)
        cfg = self.config
        if not cfg.use_intra:
            intra_voxels = torch.zeros_like(intra_voxels)
        if not cfg.use_inter:
            fwd_voxels = torch.zeros_like(fwd_voxels)
            bwd_voxels = torch.zeros_like(bwd_voxels)
        t_len = frames.shape[1]
        frame_feats, event_feats = [], []
        for t in range(t_len):
            fi = self.frame_extractor(frames[:, t])
            fe = self.intra_extractor(intra_voxels[:, t])
            fi, fe = self.rfd(fi, fe)
            frame_feats.append(fi)
            event_feats.append(fe)
        fused = self.propagate(frame_feats, event_feats, fwd_voxels,
                               bwd_voxels, frames)
        out = [self.upsampler(fused[t], frames[:, t]) for t in range(t_len)]
        return torch.stack(out, dim=1)

    @torch.no_grad()
    def forward_sample(self, sample):
        """Run one :class:`~evdvsr.events.SequenceSample`; returns numpy HR frames."""
        from evdvsr.data import sample_to_tensors
        tensors = sample_to_tensors(sample)
        if sample.scale != self.config.scale:
            raise InvalidInputError("sample scale does not match the model")
        out = self.forward(tensors["frames"], tensors["intra"],
                           tensors["fwd"], tensors["bwd"])
        return out[0].cpu().numpy()
