"""Cross-time attention module for motion-enhanced feature refinement.

Given T per-frame feature maps, the module refines each frame by attending
from it (queries) to every other frame (keys/values) over spatial positions,
gating the attention summary with a learned per-position confidence, fusing
it back with the original features through a local convolution, and
averaging the per-pair refinements. Output shapes equal input shapes, so the
module drops between any two layers of a segmentation backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import (BatchNormState, Tensor, batch_norm, concat, conv_nd,
                     matmul, mul, relu, reshape, scale, sigmoid, slice_axis,
                     softmax, transpose)

# Attention is quadratic in position count; the module is meant for coarse
# (deep) layers, so refuse grids that would silently allocate huge matrices.
MAX_POSITIONS = 4096


@dataclass(frozen=True)
class TamConfig:
    """Hyperparameters of one attention module instance."""

    channels: int
    d_embed: int
    heads: int = 4
    spatial_rank: int = 2

    def __post_init__(self):
        if self.spatial_rank not in (2, 3):
            raise ValidationError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        if self.heads < 1:
            raise ValidationError(f"heads must be >= 1, got {self.heads}")
        if self.d_embed < self.heads:
            raise ValidationError(f"d_embed ({self.d_embed}) must be >= heads ({self.heads})")
        if self.d_embed % self.heads:
            raise ValidationError(f"d_embed ({self.d_embed}) must be divisible by "
                                  f"heads ({self.heads})")
        if self.channels < 1:
            raise ValidationError("channels must be positive")

    @property
    def head_width(self) -> int:
        return self.d_embed // self.heads


@dataclass
class FeatureStack:
    """Ordered per-frame feature maps, each (C, *spatial), sharing one shape."""

    frames: list[Tensor]
    frame_times: list[float] | None = None

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValidationError(f"a feature stack needs T >= 2 frames, got {len(self.frames)}")
        shape = self.frames[0].shape
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise ShapeError(f"frame {i} shape {f.shape} differs from frame 0 "
                                 f"shape {shape}")
        if self.frame_times is not None and len(self.frame_times) != len(self.frames):
            raise ValidationError("frame_times length must match frame count")

    def __len__(self) -> int:
        return len(self.frames)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                  requires_grad=True)


@dataclass
class TamParams:
    """Learnable weights of one attention module instance.

    Query/key/value and output maps are position-wise (1x1) convolutions; the
    residual fusion is a 3x3 (3x3x3 in 3D) convolution followed by batch
    norm, so the fusion carries no bias of its own.
    """

    config: TamConfig
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_g: Tensor
    b_g: Tensor
    w_r: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    w_o: Tensor
    bn_state: BatchNormState = field(default=None)  # type: ignore[assignment]

    @staticmethod
    def initialize(config: TamConfig, rng: np.random.Generator,
                   dtype=np.float32) -> "TamParams":
        c, d, rank = config.channels, config.d_embed, config.spatial_rank
        one = (1,) * rank
        k_fuse = (3,) * rank
        fuse_fan = (c + d) * 3 ** rank

        def proj():
            return (_uniform(rng, (d, c) + one, c, dtype),
                    _uniform(rng, (d,), c, dtype))

        w_q, b_q = proj()
        w_k, b_k = proj()
        w_v, b_v = proj()
        return TamParams(
            config=config,
            w_q=w_q, b_q=b_q, w_k=w_k, b_k=b_k, w_v=w_v, b_v=b_v,
            w_g=_uniform(rng, (d, d) + one, d, dtype),
            b_g=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
            w_r=_uniform(rng, (c, c + d) + k_fuse, fuse_fan, dtype),
            bn_gamma=Tensor(np.ones(c, dtype=dtype), requires_grad=True),
            bn_beta=Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
            w_o=_uniform(rng, (c, c) + one, c, dtype),
            bn_state=BatchNormState(c, dtype=dtype),
        )

    def named_tensors(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "b_q": self.b_q, "w_k": self.w_k, "b_k": self.b_k,
                "w_v": self.w_v, "b_v": self.b_v, "w_g": self.w_g, "b_g": self.b_g,
                "w_r": self.w_r, "bn_gamma": self.bn_gamma, "bn_beta": self.bn_beta,
                "w_o": self.w_o}

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_tensors().values())

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.named_tensors().items()}
        out["bn_running_mean"] = self.bn_state.running_mean
        out["bn_running_var"] = self.bn_state.running_var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.named_tensors().items():
            if arrays[name].shape != t.shape:
                raise ShapeError(f"checkpoint tensor {name} has shape "
                                 f"{arrays[name].shape}, expected {t.shape}")
            t.data = np.ascontiguousarray(arrays[name].astype(t.dtype))
        self.bn_state.running_mean = arrays["bn_running_mean"].astype(
            self.bn_state.running_mean.dtype)
        self.bn_state.running_var = arrays["bn_running_var"].astype(
            self.bn_state.running_var.dtype)

    def save(self, directory) -> None:
        """Write the parameters as a TNSR bundle; the config rides in the manifest."""
        from .tnsr import write_bundle
        write_bundle(directory, self.to_arrays(),
                     meta={"module": "tam",
                           "config": {"channels": self.config.channels,
                                      "d_embed": self.config.d_embed,
                                      "heads": self.config.heads,
                                      "spatial_rank": self.config.spatial_rank}})

    @staticmethod
    def load(directory) -> "TamParams":
        """Rebuild a parameter set from a bundle written by :meth:`save`."""
        from .tnsr import read_bundle
        arrays, meta = read_bundle(directory)
        if meta.get("module") != "tam":
            raise ValidationError(f"{directory} does not hold attention parameters")
        cfg = TamConfig(**meta["config"])
        params = TamParams.initialize(cfg, np.random.default_rng(0),
                                      dtype=arrays["w_q"].dtype)
        params.load_arrays(arrays)
        return params


# -- the four stages ---------------------------------------------------------


def project_qkv(f_t: Tensor, params: TamParams) -> tuple[Tensor, Tensor, Tensor]:
    """Position-wise query/key/value projections, flattened to (d_embed, N)."""
    cfg = params.config
    if f_t.shape[0] != cfg.channels:
        raise ShapeError(f"feature map has {f_t.shape[0]} channels, "
                         f"config expects {cfg.channels}")
    n = int(np.prod(f_t.shape[1:]))
    q = reshape(conv_nd(f_t, params.w_q, params.b_q), (cfg.d_embed, n))
    k = reshape(conv_nd(f_t, params.w_k, params.b_k), (cfg.d_embed, n))
    v = reshape(conv_nd(f_t, params.w_v, params.b_v), (cfg.d_embed, n))
    return q, k, v


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(d_embed, N) -> (heads, d_embed/heads, N); contiguous row blocks become heads."""
    d, n = x.shape
    if d % heads:
        raise ShapeError(f"embedding width {d} not divisible by {heads} heads")
    return reshape(x, (heads, d // heads, n))


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`."""
    h, w, n = x.shape
    return reshape(x, (h * w, n))


def attention_logits(q: Tensor, k: Tensor) -> Tensor:
    """Scaled dot-product logits between all query and key positions.

    ``q`` and ``k`` are single-head (width, N) maps; entry (p, r) is the
    match between query position p and key position r, scaled by
    1/sqrt(width).
    """
    if q.shape[0] != k.shape[0]:
        raise ShapeError(f"query width {q.shape[0]} != key width {k.shape[0]}")
    return scale(matmul(transpose(q), k), 1.0 / math.sqrt(q.shape[0]))


def cross_time_attention(q_i: Tensor, k_j: Tensor, v_j: Tensor) -> Tensor:
    """Single-head attention from frame i's queries onto frame j's keys/values.

    Softmax normalizes over key positions, so each query position holds a
    convex combination of frame j's value columns. Returns (width, N).
    """
    weights = softmax(attention_logits(q_i, k_j), axis=1)
    return transpose(matmul(weights, transpose(v_j)))


def multi_head_attention(q_i: Tensor, k_j: Tensor, v_j: Tensor,
                         heads: int) -> Tensor:
    """Per-head attention, concatenated back to the full embedding width."""
    qh = split_heads(q_i, heads)
    kh = split_heads(k_j, heads)
    vh = split_heads(v_j, heads)
    width = q_i.shape[0] // heads
    outs = []
    for h in range(heads):
        def head(x):
            return reshape(slice_axis(x, 0, h, h + 1), (width, x.shape[2]))
        outs.append(cross_time_attention(head(qh), head(kh), head(vh)))
    return concat(outs, axis=0) if heads > 1 else outs[0]


def gate_and_fuse(f_i: Tensor, a_multi: Tensor, params: TamParams,
                  training: bool = False) -> Tensor:
    """Self-gate the attention summary and fuse it back with the source frame.

    ``a_multi`` is the multi-head attention output restored to spatial layout
    (d_embed, *spatial). The sigmoid gate assigns a per-position confidence;
    the gated summary is concatenated onto ``f_i`` along channels and reduced
    back to C channels by the fusion convolution, batch norm, then ReLU.
    """
    if f_i.shape[1:] != a_multi.shape[1:]:
        raise ShapeError(f"spatial extents differ: frame {f_i.shape[1:]} vs "
                         f"attention {a_multi.shape[1:]}")
    gate = sigmoid(conv_nd(a_multi, params.w_g, params.b_g))
    gated = mul(a_multi, gate)
    combined = concat([f_i, gated], axis=0)
    fused = conv_nd(combined, params.w_r)
    return relu(batch_norm(fused, params.bn_gamma, params.bn_beta,
                           params.bn_state, training))


def tam_forward(stack: FeatureStack, params: TamParams,
                training: bool = False) -> FeatureStack:
    """Refine every frame of ``stack`` with cross-time attention.

    For each target frame i, attention is computed against every other frame
    j, gated and fused to a per-pair refinement; the refinements are averaged
    over the T-1 contributing frames and passed through the output projection.
    Output frames keep their input shapes.
    """
    cfg = params.config
    t = len(stack)
    spatial = stack.frames[0].shape[1:]
    if len(spatial) != cfg.spatial_rank:
        raise ShapeError(f"stack has spatial rank {len(spatial)}, "
                         f"config expects {cfg.spatial_rank}")
    n = int(np.prod(spatial))
    if n > MAX_POSITIONS:
        raise ValidationError(
            f"attention over {n} positions exceeds the {MAX_POSITIONS} guard; "
            "insert the module at a coarser layer")

    projections = [project_qkv(f, params) for f in stack.frames]
    refined = []
    for i in range(t):
        q_i = projections[i][0]
        pair_sum = None
        for j in range(t):
            if j == i:
                continue
            _, k_j, v_j = projections[j]
            a_multi = multi_head_attention(q_i, k_j, v_j, cfg.heads)
            a_spatial = reshape(a_multi, (cfg.d_embed,) + spatial)
            fused = gate_and_fuse(stack.frames[i], a_spatial, params, training)
            pair_sum = fused if pair_sum is None else pair_sum + fused
        avg = scale(pair_sum, 1.0 / (t - 1))
        refined.append(conv_nd(avg, params.w_o))
    return FeatureStack(frames=refined, frame_times=stack.frame_times)
