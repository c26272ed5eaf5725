"""Closed-form compute and parameter accounting for every architecture variant.

MACs are multiply-accumulates; FLOPs = 2 * MACs throughout. Convolution and
matrix-multiply work is the counted cost; pooling, normalization, activation,
and upsampling traffic appears in a separate informational elementwise column
and never enters the totals. The layer walk here mirrors the runtime models
exactly, so an instrumented forward pass must reproduce the MAC totals to the
digit (see ``tensor.count_macs``).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

from .attention import TamConfig
from .errors import ValidationError
from .unet import CONFIGURATIONS, BackboneConfig


def _prod(xs) -> int:
    out = 1
    for x in xs:
        out *= int(x)
    return out


@dataclass(frozen=True)
class CostRow:
    """One accounted layer application (already multiplied by frame/pair counts)."""

    name: str
    macs: int = 0
    params: int = 0
    elementwise: int = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs


@dataclass
class CostReport:
    label: str
    rows: list[CostRow] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_elementwise(self) -> int:
        return sum(r.elementwise for r in self.rows)

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"{self.label}\n")
        buf.write(f"{'layer':<38} {'MACs':>14} {'FLOPs':>14} {'params':>10} "
                  f"{'elemwise':>10}\n")
        for r in self.rows:
            buf.write(f"{r.name:<38} {r.macs:>14} {r.flops:>14} {r.params:>10} "
                      f"{r.elementwise:>10}\n")
        buf.write(f"{'total':<38} {self.total_macs:>14} {self.total_flops:>14} "
                  f"{self.total_params:>10} {self.total_elementwise:>10}\n")
        return buf.getvalue()

    def to_json_dict(self) -> dict:
        return {
            "label": self.label,
            "rows": [{"name": r.name, "macs": r.macs, "flops": r.flops,
                      "params": r.params, "elementwise": r.elementwise}
                     for r in self.rows],
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
            "total_params": self.total_params,
            "total_elementwise": self.total_elementwise,
        }


def conv_cost(kernel, c_in: int, c_out: int, out_spatial,
              bias: bool = False) -> tuple[int, int]:
    """(MACs, params) of one convolution producing ``out_spatial``.

    MACs = prod(kernel) * c_in * c_out * prod(out_spatial); a bias adds
    c_out parameters and no MACs.
    """
    if isinstance(kernel, int):
        kernel = (kernel,) * len(tuple(out_spatial))
    k = _prod(kernel)
    macs = k * c_in * c_out * _prod(out_spatial)
    params = k * c_in * c_out + (c_out if bias else 0)
    return macs, params


def attention_pair_macs(n: int, d_embed: int) -> int:
    """MACs of one ordered frame pair's attention: logits plus weighted values.

    Splitting into heads does not change the sum: H * 2 * n^2 * (d/H).
    """
    return 2 * n * n * d_embed


def attention_cost(d_embed: int, n: int, heads: int, t: int) -> int:
    """Total attention MACs over all T*(T-1) ordered frame pairs.

    T=1 is legal and costs nothing: there are no pairs to attend over.
    """
    if t < 1:
        raise ValidationError("attention cost needs T >= 1")
    if heads < 1 or d_embed % heads != 0:
        raise ValidationError(
            f"d_embed {d_embed} must divide evenly into {heads} heads")
    return t * (t - 1) * attention_pair_macs(n, d_embed)


def tam_rows(cfg: TamConfig, spatial, t: int, prefix: str = "tam") -> list[CostRow]:
    """Cost rows for one attention module applied to a T-frame stack.

    At T=1 the pair count is zero, leaving only the projection overhead.
    """
    if t < 1:
        raise ValidationError("attention cost needs T >= 1")
    n = _prod(spatial)
    pairs = t * (t - 1)
    c, d = cfg.channels, cfg.d_embed
    one = (1,) * len(tuple(spatial))
    rows = []
    for name in ("w_q", "w_k", "w_v"):
        macs, params = conv_cost(one, c, d, spatial, bias=True)
        rows.append(CostRow(f"{prefix}.{name}", macs * t, params))
    rows.append(CostRow(f"{prefix}.attention",
                        attention_pair_macs(n, d) * pairs, 0))
    g_macs, g_params = conv_cost(one, d, d, spatial, bias=True)
    rows.append(CostRow(f"{prefix}.gate", g_macs * pairs, g_params,
                        elementwise=2 * d * n * pairs))
    r_macs, r_params = conv_cost(3, c + d, c, spatial, bias=False)
    rows.append(CostRow(f"{prefix}.fuse", r_macs * pairs, r_params))
    rows.append(CostRow(f"{prefix}.fuse_bn", 0, 2 * c,
                        elementwise=2 * c * n * pairs))
    o_macs, o_params = conv_cost(one, c, c, spatial, bias=False)
    rows.append(CostRow(f"{prefix}.w_o", o_macs * t, o_params))
    return rows


def _level_spatial(input_spatial, lvl: int):
    return tuple(n >> lvl for n in input_spatial)


def backbone_rows(config: BackboneConfig, input_spatial, t: int) -> list[CostRow]:
    """Cost rows of the per-frame backbone, mirroring its forward pass."""
    ch = config.channels
    rows = []
    for lvl in range(config.levels):
        s = _level_spatial(input_spatial, lvl)
        n = _prod(s)
        c_in = config.in_channels if lvl == 0 else ch[lvl - 1]
        if lvl > 0:
            rows.append(CostRow(f"enc{lvl + 1}.pool", elementwise=t * c_in
                                * _prod(_level_spatial(input_spatial, lvl - 1))))
        for unit, ci in (("a", c_in), ("b", ch[lvl])):
            macs, params = conv_cost(3, ci, ch[lvl], s, bias=False)
            rows.append(CostRow(f"enc{lvl + 1}.{unit}.conv", macs * t, params))
            rows.append(CostRow(f"enc{lvl + 1}.{unit}.bn_relu", 0, 2 * ch[lvl],
                                elementwise=3 * t * ch[lvl] * n))
        slot = f"E{lvl + 1}"
        if slot in config.insertion_set:
            rows.extend(tam_rows(config.tam_config(slot), s, t,
                                 prefix=f"tam.{slot}"))
    for lvl in range(config.levels - 2, -1, -1):
        s = _level_spatial(input_spatial, lvl)
        n = _prod(s)
        macs, params = conv_cost(3, ch[lvl + 1], ch[lvl], s, bias=True)
        rows.append(CostRow(f"dec{lvl + 1}.up.conv", macs * t, params,
                            elementwise=t * ch[lvl + 1] * n))
        slot = f"D{lvl + 1}"
        if slot in config.insertion_set:
            rows.extend(tam_rows(config.tam_config(slot), s, t,
                                 prefix=f"tam.{slot}"))
        for unit, ci in (("a", 2 * ch[lvl]), ("b", ch[lvl])):
            macs, params = conv_cost(3, ci, ch[lvl], s, bias=False)
            rows.append(CostRow(f"dec{lvl + 1}.{unit}.conv", macs * t, params))
            rows.append(CostRow(f"dec{lvl + 1}.{unit}.bn_relu", 0, 2 * ch[lvl],
                                elementwise=3 * t * ch[lvl] * n))
    one = (1,) * len(tuple(input_spatial))
    macs, params = conv_cost(one, ch[0], config.classes, input_spatial, bias=True)
    rows.append(CostRow("head.conv", macs * t, params))
    return rows


def time_conv_rows(config: BackboneConfig, input_spatial, t: int) -> list[CostRow]:
    """Cost rows of the time-as-channel baseline (3x3x3 kernels, one volume)."""
    if len(tuple(input_spatial)) != 2:
        raise ValidationError("time-as-channel baseline supports 2D data only")
    ch = config.channels
    rows = []
    for lvl in range(config.levels):
        s = (t,) + _level_spatial(input_spatial, lvl)
        n = _prod(s)
        c_in = config.in_channels if lvl == 0 else ch[lvl - 1]
        if lvl > 0:
            rows.append(CostRow(f"enc{lvl + 1}.pool", elementwise=c_in
                                * _prod((t,) + _level_spatial(input_spatial,
                                                              lvl - 1))))
        for unit, ci in (("a", c_in), ("b", ch[lvl])):
            macs, params = conv_cost(3, ci, ch[lvl], s, bias=False)
            rows.append(CostRow(f"enc{lvl + 1}.{unit}.conv", macs, params))
            rows.append(CostRow(f"enc{lvl + 1}.{unit}.bn_relu", 0, 2 * ch[lvl],
                                elementwise=3 * ch[lvl] * n))
    for lvl in range(config.levels - 2, -1, -1):
        s = (t,) + _level_spatial(input_spatial, lvl)
        n = _prod(s)
        macs, params = conv_cost(3, ch[lvl + 1], ch[lvl], s, bias=True)
        rows.append(CostRow(f"dec{lvl + 1}.up.conv", macs, params,
                            elementwise=ch[lvl + 1] * n))
        for unit, ci in (("a", 2 * ch[lvl]), ("b", ch[lvl])):
            macs, params = conv_cost(3, ci, ch[lvl], s, bias=False)
            rows.append(CostRow(f"dec{lvl + 1}.{unit}.conv", macs, params))
            rows.append(CostRow(f"dec{lvl + 1}.{unit}.bn_relu", 0, 2 * ch[lvl],
                                elementwise=3 * ch[lvl] * n))
    macs, params = conv_cost(1, ch[0], config.classes, (t,) + tuple(input_spatial),
                             bias=True)
    rows.append(CostRow("head.conv", macs, params))
    return rows


def configuration_report(config_id: str, base: BackboneConfig, input_spatial,
                         t: int) -> CostReport:
    """Full cost report for one named configuration at the given scale."""
    if config_id not in CONFIGURATIONS:
        raise ValidationError(f"unknown configuration {config_id!r}; "
                              f"choose from {sorted(CONFIGURATIONS)}")
    entry = CONFIGURATIONS[config_id]
    label = f"{config_id} @ input {tuple(input_spatial)}, T={t}"
    if entry.time_conv:
        return CostReport(label, time_conv_rows(base, input_spatial, t))
    cfg = BackboneConfig(
        spatial_rank=base.spatial_rank, levels=base.levels,
        channels=base.channels, in_channels=base.in_channels,
        classes=base.classes, insertion_set=entry.slots,
        heads=base.heads, d_embed=base.d_embed)
    return CostReport(label, backbone_rows(cfg, input_spatial, t))


# a full-size operating point for headline comparisons
FULL_SCALE = BackboneConfig(channels=(64, 128, 256, 512, 1024))
FULL_INPUT = (256, 256)
FULL_FRAMES = 2


def tam_vs_time_conv(t: int, levels: int, k: int = 3) -> dict:
    """Attention-vs-time-kernel break-even: attention is cheaper when
    T^2 < levels * k^2 * (k - 1) under the leading-term proportionality."""
    lhs = t * t
    rhs = levels * k * k * (k - 1)
    return {"t_squared": lhs, "conv_overhead_factor": rhs,
            "attention_cheaper": lhs < rhs}


def compare_architectures(config_ids: list[str], base: BackboneConfig,
                          input_spatial, t: int) -> str:
    """Side-by-side totals for several configurations, cheapest first."""
    reports = [configuration_report(cid, base, input_spatial, t)
               for cid in config_ids]
    order = sorted(range(len(reports)), key=lambda i: reports[i].total_flops)
    buf = io.StringIO()
    buf.write(f"{'config':<8} {'MACs':>16} {'FLOPs':>16} {'params':>12}\n")
    for i in order:
        rep = reports[i]
        buf.write(f"{config_ids[i]:<8} {rep.total_macs:>16} "
                  f"{rep.total_flops:>16} {rep.total_params:>12}\n")
    be = tam_vs_time_conv(t, base.levels)
    buf.write(f"\nattention vs time kernels at T={t}: T^2 = {be['t_squared']} "
              f"vs L*k^2*(k-1) = {be['conv_overhead_factor']} -> "
              f"{'attention cheaper' if be['attention_cheaper'] else 'time kernels cheaper'}\n")
    return buf.getvalue()
