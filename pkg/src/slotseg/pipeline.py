"""Slot refinement pipeline over a multi-scale feature pyramid.

A toy convolutional backbone produces 4 feature maps at strides 4/8/16/32.
Stages run coarse to fine; each stage applies a configured number of
refinement modules to the panoptic slots, where one module is a per-frame
block (self-attention, retriever over spatial features, feed-forward, all
with residual adds followed by layer norm) and then a cross-frame block
over the concatenation of every frame's slots. Between stages the coarse
feature map is upsampled, concatenated with the next finer pyramid level
and projected back down by a pointwise convolution.

Inputs whose sides are not multiples of 32 are zero-padded at the
bottom/right for the pyramid and the final stride-4 map is cropped back,
so the strict backbone contract and arbitrary (divisible by 4) frame
sizes coexist.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .params import ParameterStore
from .retriever import Retriever, RetrieverConfig
from .tensor import Tensor, get_default_dtype

STRIDES = (4, 8, 16, 32)


@dataclass
class StageSchedule:
    """Per-stage module counts in processing order (coarsest scale first)."""

    counts: tuple[int, int, int, int] = (1, 2, 2, 2)
    ffn_hidden: int = 256

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        if len(self.counts) != 4 or any(c < 0 for c in self.counts):
            raise ConfigError(f"schedule needs 4 non-negative counts, got {self.counts}")
        if self.ffn_hidden <= 0:
            raise ConfigError(f"ffn_hidden must be positive, got {self.ffn_hidden}")

    @property
    def total_modules(self) -> int:
        return sum(self.counts)


_pos_cache: dict = {}


def position_embedding(h: int, w: int, c: int) -> np.ndarray:
    """Fixed 2-D sinusoidal embedding, flattened to (h*w, c).

    Half the channels encode the row coordinate, half the column, each as
    interleaved sin/cos over a geometric frequency ladder (temperature
    10000), with coordinates normalized to (0, 2*pi].
    """
    if c % 4 != 0:
        raise ConfigError(f"position embedding needs channels divisible by 4, got {c}")
    dtype = get_default_dtype()
    key = (h, w, c, np.dtype(dtype).name)
    if key in _pos_cache:
        return _pos_cache[key]
    half = c // 2
    dim_t = 10000.0 ** (2 * (np.arange(half) // 2) / half)
    ys = (np.arange(h, dtype=np.float64) + 1.0) / h * 2 * np.pi
    xs = (np.arange(w, dtype=np.float64) + 1.0) / w * 2 * np.pi
    py = ys[:, None] / dim_t[None, :]
    px = xs[:, None] / dim_t[None, :]
    py = np.stack([np.sin(py[:, 0::2]), np.cos(py[:, 1::2])], axis=2).reshape(h, half)
    px = np.stack([np.sin(px[:, 0::2]), np.cos(px[:, 1::2])], axis=2).reshape(w, half)
    emb = np.concatenate([
        np.repeat(py[:, None, :], w, axis=1),
        np.repeat(px[None, :, :], h, axis=0),
    ], axis=2).reshape(h * w, c).astype(dtype)
    _pos_cache[key] = emb
    return emb


@dataclass
class AttentionRecord:
    stage: int
    module: int
    frame: int
    h: int
    w: int
    attn: np.ndarray  # (h*w, num_slots)


@dataclass
class PipelineRecorder:
    """Execution trace plus raw attention matrices for export/inspection."""

    events: list = field(default_factory=list)
    attention: list = field(default_factory=list)

    def event(self, *args) -> None:
        self.events.append(tuple(args))

    def record_attention(self, stage, module, frame, h, w, attn) -> None:
        self.attention.append(AttentionRecord(stage, module, frame, h, w, np.asarray(attn, dtype=np.float32)))


class FeedForward:
    def __init__(self, store, name, c, hidden):
        self.w1 = store.parameter(f"{name}.w1", (c, hidden), init="kaiming", fan_in=c)
        self.b1 = store.parameter(f"{name}.b1", (hidden,), init="zeros")
        self.w2 = store.parameter(f"{name}.w2", (hidden, c), init="kaiming", fan_in=hidden)
        self.b2 = store.parameter(f"{name}.b2", (c,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(ops.gelu(ops.linear(x, self.w1, self.b1)), self.w2, self.b2)


class LayerNorm:
    def __init__(self, store, name, c):
        self.gain = store.parameter(f"{name}.gain", (c,), init="ones")
        self.bias = store.parameter(f"{name}.bias", (c,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias)


class SelfAttention:
    """Standard single-head dot-product attention over slot rows."""

    def __init__(self, store, name, c):
        self.c = c
        self.wq = store.parameter(f"{name}.wq", (c, c), init="kaiming", fan_in=c)
        self.bq = store.parameter(f"{name}.bq", (c,), init="zeros")
        self.wk = store.parameter(f"{name}.wk", (c, c), init="kaiming", fan_in=c)
        self.bk = store.parameter(f"{name}.bk", (c,), init="zeros")
        self.wv = store.parameter(f"{name}.wv", (c, c), init="kaiming", fan_in=c)
        self.bv = store.parameter(f"{name}.bv", (c,), init="zeros")
        self.wo = store.parameter(f"{name}.wo", (c, c), init="kaiming", fan_in=c)
        self.bo = store.parameter(f"{name}.bo", (c,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        q = ops.linear(x, self.wq, self.bq)
        k = ops.linear(x, self.wk, self.bk)
        v = ops.linear(x, self.wv, self.bv)
        scores = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / np.sqrt(self.c))
        attn = ops.softmax(scores, axis=1)
        return ops.linear(ops.matmul(attn, v), self.wo, self.bo)


class FrameRefineBlock:
    """Per-frame slot refinement against one frame's spatial features.

    slots -> slots + SA(slots), LN; -> + RE(slots, feat + pos, feat), LN;
    -> + FFN(slots), LN. The position embedding enters only the key path.
    """

    def __init__(self, store, name, c, hidden, retriever_cfg: RetrieverConfig):
        self.sa = SelfAttention(store, f"{name}.sa", c)
        self.re = Retriever(store, f"{name}.re", retriever_cfg)
        self.ffn = FeedForward(store, f"{name}.ffn", c, hidden)
        self.ln1 = LayerNorm(store, f"{name}.ln1", c)
        self.ln2 = LayerNorm(store, f"{name}.ln2", c)
        self.ln3 = LayerNorm(store, f"{name}.ln3", c)

    def __call__(self, slots, feat, pos, recorder=None, ctx=(0, 0, 0), hw=None):
        s = self.ln1(ops.add(slots, self.sa(slots)))
        attended, attn = self.re(s, ops.add(feat, pos), feat)
        if recorder is not None:
            stage, module, frame = ctx
            recorder.record_attention(stage, module, frame, hw[0], hw[1], attn.numpy())
        s = self.ln2(ops.add(s, attended))
        return self.ln3(ops.add(s, self.ffn(s)))


class CrossFrameBlock:
    """Cross-frame slot alignment over the concatenated slot matrix.

    cat -> cat + RE(cat, cat, cat), LN; -> + FFN, LN; output is the
    pre-block concatenation plus the refined matrix (no trailing norm),
    split back per frame. Parameters depend only on the channel width, so
    any frame count runs through the same weights.
    """

    def __init__(self, store, name, c, hidden, retriever_cfg: RetrieverConfig):
        self.re = Retriever(store, f"{name}.re", retriever_cfg)
        self.ffn = FeedForward(store, f"{name}.ffn", c, hidden)
        self.ln1 = LayerNorm(store, f"{name}.ln1", c)
        self.ln2 = LayerNorm(store, f"{name}.ln2", c)

    def __call__(self, per_frame_slots: list[Tensor]) -> list[Tensor]:
        counts = {(s.shape[0], s.shape[1]) for s in per_frame_slots}
        if len(counts) != 1:
            raise ShapeError(f"frames disagree on slot shape: {sorted(counts)}")
        cat = ops.concat(per_frame_slots, axis=0) if len(per_frame_slots) > 1 else per_frame_slots[0]
        attended, _ = self.re(cat, cat, cat)
        refined = self.ln1(ops.add(cat, attended))
        refined = self.ln2(ops.add(refined, self.ffn(refined)))
        out = ops.add(cat, refined)
        n = per_frame_slots[0].shape[0]
        return [ops.narrow(out, 0, i * n, n) for i in range(len(per_frame_slots))]


class FuseBlock:
    """Upsample the coarser map 2x, concat channels with the finer map, 1x1 conv."""

    def __init__(self, store, name, c):
        self.w = store.parameter(f"{name}.w", (2 * c, c), init="kaiming", fan_in=2 * c)
        self.b = store.parameter(f"{name}.b", (c,), init="zeros")

    def __call__(self, low: Tensor, high: Tensor) -> Tensor:
        lh, lw = low.shape[0], low.shape[1]
        if high.shape[0] != 2 * lh or high.shape[1] != 2 * lw:
            raise ShapeError(f"fuse expects exact 2x resolution step, got {low.shape} -> {high.shape}")
        if low.shape[2] != high.shape[2]:
            raise ShapeError(f"fuse channel mismatch: {low.shape} vs {high.shape}")
        up = ops.bilinear_upsample_2x(low)
        return ops.conv2d_1x1(ops.concat([up, high], axis=2), self.w, self.b)


class ToyBackbone:
    """Stride-2 3x3 conv + gelu trunk with pointwise projections per scale."""

    def __init__(self, store, name, c):
        self.c = c
        self.convs = []
        widths = [3, c, c, c, c, c]
        for i in range(5):
            w = store.parameter(f"{name}.conv{i}.w", (3, 3, widths[i], widths[i + 1]),
                                init="kaiming", fan_in=9 * widths[i])
            b = store.parameter(f"{name}.conv{i}.b", (widths[i + 1],), init="zeros")
            self.convs.append((w, b))
        self.projs = []
        for s in STRIDES:
            w = store.parameter(f"{name}.proj{s}.w", (c, c), init="kaiming", fan_in=c)
            b = store.parameter(f"{name}.proj{s}.b", (c,), init="zeros")
            self.projs.append((w, b))

    def __call__(self, frame: Tensor) -> list[Tensor]:
        h, w = frame.shape[0], frame.shape[1]
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise ShapeError(f"backbone expects HxWx3 input, got {frame.shape}")
        if h % 32 != 0 or w % 32 != 0:
            raise ShapeError(f"backbone input dims must be divisible by 32, got {h}x{w}")
        x = frame
        maps = []
        for i, (cw, cb) in enumerate(self.convs):
            x = ops.gelu(ops.conv2d_3x3(x, cw, cb, stride=2))
            if i >= 1:
                pw, pb = self.projs[i - 1]
                maps.append(ops.conv2d_1x1(x, pw, pb))
        return maps  # strides 4, 8, 16, 32


class SlotPipeline:
    """Owns the learnable slots, backbone, fuse bridges, and refinement modules."""

    def __init__(self, store: ParameterStore, num_slots: int, channels: int,
                 schedule: StageSchedule | None = None,
                 softmax_dim: str = "slot", use_output_projection: bool = False,
                 logit_scale: float = 1.0, video_retriever: bool = True):
        if num_slots <= 0:
            raise ConfigError(f"num_slots must be positive, got {num_slots}")
        self.num_slots = num_slots
        self.channels = channels
        self.schedule = schedule or StageSchedule()
        self.video_retriever = video_retriever
        retriever_cfg = RetrieverConfig(channels=channels, softmax_dim=softmax_dim,
                                        use_output_projection=use_output_projection,
                                        logit_scale=logit_scale)
        self.slots = store.parameter("slots", (num_slots, channels), init="normal0.02")
        self.backbone = ToyBackbone(store, "backbone", channels)
        self.fuses = [FuseBlock(store, f"fuse{i}", channels) for i in range(3)]
        self.frame_blocks = []
        self.cross_blocks = []
        module = 0
        for stage, count in enumerate(self.schedule.counts):
            for _ in range(count):
                self.frame_blocks.append(
                    FrameRefineBlock(store, f"mod{module}.frame", channels,
                                     self.schedule.ffn_hidden, retriever_cfg))
                self.cross_blocks.append(
                    CrossFrameBlock(store, f"mod{module}.cross", channels,
                                    self.schedule.ffn_hidden, retriever_cfg))
                module += 1

    def run(self, frames: list[Tensor], recorder: PipelineRecorder | None = None):
        """Refine slots over all stages; returns (per-frame slots, per-frame stride-4 maps).

        The returned maps are flattened (D x C) with D = (H/4)*(W/4) of the
        original frame, cropped if internal padding was applied.
        """
        if not frames:
            raise ShapeError("need at least one frame")
        h, w = frames[0].shape[0], frames[0].shape[1]
        for f in frames:
            if f.shape != frames[0].shape:
                raise ShapeError(f"frames disagree on shape: {f.shape} vs {frames[0].shape}")
        if h % 4 != 0 or w % 4 != 0:
            raise ShapeError(f"frame dims must be divisible by 4, got {h}x{w}")
        pad_h = (-h) % 32
        pad_w = (-w) % 32
        padded = [ops.pad2d(f, pad_h, pad_w) if pad_h or pad_w else f for f in frames]

        pyramids = [self.backbone(f) for f in padded]  # [frame][scale] fine->coarse
        num_frames = len(frames)
        slots = [self.slots for _ in range(num_frames)]
        module = 0
        current = [pyr[3] for pyr in pyramids]  # coarsest maps
        for stage in range(4):
            if stage > 0:
                fine = [pyr[3 - stage] for pyr in pyramids]
                fused = []
                for t in range(num_frames):
                    fused.append(self.fuses[stage - 1](current[t], fine[t]))
                    if recorder is not None:
                        recorder.event("fuse", stage, current[t].shape[:2], fused[-1].shape[:2])
                current = fused
            sh, sw = current[0].shape[0], current[0].shape[1]
            if recorder is not None:
                recorder.event("stage", stage, (sh, sw))
            pos = Tensor(position_embedding(sh, sw, self.channels))
            flat = [ops.reshape(m, (sh * sw, self.channels)) for m in current]
            for _ in range(self.schedule.counts[stage]):
                for t in range(num_frames):
                    slots[t] = self.frame_blocks[module](
                        slots[t], flat[t], pos, recorder=recorder,
                        ctx=(stage, module, t), hw=(sh, sw))
                    if recorder is not None:
                        recorder.event("frame_refine", stage, module, t)
                if self.video_retriever:
                    slots = self.cross_blocks[module](slots)
                    if recorder is not None:
                        recorder.event("cross_refine", stage, module)
                module += 1

        maps4 = []
        for t in range(num_frames):
            m = current[t]
            if pad_h or pad_w:
                m = ops.narrow(m, 0, 0, h // 4)
                m = ops.narrow(m, 1, 0, w // 4)
            maps4.append(ops.reshape(m, ((h // 4) * (w // 4), self.channels)))
        return slots, maps4


def stage_attention_entropy(recorder: PipelineRecorder) -> dict[int, float]:
    """Mean per-pixel entropy of slot attention, grouped by stage."""
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for rec in recorder.attention:
        a = np.clip(rec.attn.astype(np.float64), 1e-12, 1.0)
        ent = -(a * np.log(a)).sum(axis=1)
        sums[rec.stage] = sums.get(rec.stage, 0.0) + float(ent.sum())
        counts[rec.stage] = counts.get(rec.stage, 0) + ent.size
    return {s: sums[s] / counts[s] for s in sorted(sums)}
