"""Retriever attention: slot-dimension softmax competition over features.

Given query slots Q (L_q x C) and target features K, V (D_v x C), three
linear projections map everything into a common space, correlation scores
are M = K_proj @ Q_proj^T, and the softmax runs across the slot axis so
slots compete for each feature vector. The attended output is A^T @ V_proj.
No temperature scaling and no output projection by default; both exist as
ablation knobs.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import ops
from .errors import ConfigError, ShapeError
from .params import ParameterStore
from .tensor import Tensor

SOFTMAX_SLOT = "slot"
SOFTMAX_SPATIAL = "spatial"


@dataclass
class RetrieverConfig:
    channels: int
    softmax_dim: str = SOFTMAX_SLOT
    use_output_projection: bool = False
    logit_scale: float = 1.0

    def __post_init__(self):
        if self.channels <= 0:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.softmax_dim not in (SOFTMAX_SLOT, SOFTMAX_SPATIAL):
            raise ConfigError(f"softmax_dim must be 'slot' or 'spatial', got {self.softmax_dim!r}")


class Retriever:
    """Owns the three projection weights (plus optional output projection)."""

    def __init__(self, store: ParameterStore, name: str, cfg: RetrieverConfig):
        self.cfg = cfg
        c = cfg.channels
        self.wq = store.parameter(f"{name}.wq", (c, c), init="kaiming", fan_in=c)
        self.bq = store.parameter(f"{name}.bq", (c,), init="zeros")
        self.wk = store.parameter(f"{name}.wk", (c, c), init="kaiming", fan_in=c)
        self.bk = store.parameter(f"{name}.bk", (c,), init="zeros")
        self.wv = store.parameter(f"{name}.wv", (c, c), init="kaiming", fan_in=c)
        self.bv = store.parameter(f"{name}.bv", (c,), init="zeros")
        if cfg.use_output_projection:
            self.wo = store.parameter(f"{name}.wo", (c, c), init="kaiming", fan_in=c)
            self.bo = store.parameter(f"{name}.bo", (c,), init="zeros")
        else:
            self.wo = self.bo = None

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
        return retrieve(q, k, v, self.cfg,
                        self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
                        self.wo, self.bo)


def retrieve(q: Tensor, k: Tensor, v: Tensor, cfg: RetrieverConfig,
             wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor, wv: Tensor, bv: Tensor,
             wo: Tensor | None = None, bo: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Run the attention primitive; returns (output L_q x C, attention D_v x L_q).

    The attention matrix A normalizes over the slot axis (columns) in the
    default configuration, so each spatial row distributes unit mass across
    slots; the spatial variant normalizes each column over rows instead.
    """
    if q.ndim != 2 or q.shape[0] == 0:
        raise ShapeError(f"query must be a non-empty matrix, got shape {q.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key/value row mismatch: {k.shape} vs {v.shape}")
    c = cfg.channels
    if q.shape[1] != c or k.shape[1] != c or v.shape[1] != c:
        raise ShapeError(f"channel mismatch: expected {c}, got Q {q.shape}, K {k.shape}, V {v.shape}")

    q_proj = ops.linear(q, wq, bq)
    k_proj = ops.linear(k, wk, bk)
    v_proj = ops.linear(v, wv, bv)

    m = ops.matmul(k_proj, ops.transpose(q_proj))
    if cfg.logit_scale != 1.0:
        m = ops.scale(m, cfg.logit_scale)
    axis = 1 if cfg.softmax_dim == SOFTMAX_SLOT else 0
    attn = ops.softmax(m, axis=axis)
    out = ops.matmul(ops.transpose(attn), v_proj)
    if wo is not None:
        out = ops.linear(out, wo, bo)
    return out, attn
