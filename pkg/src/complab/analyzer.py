"""Static analysis of network specs.

Parameter counts follow one convention throughout: ``kh*kw*cin*cout`` per conv
(no biases) plus ``2*cout`` per batch-normalised conv for gamma and beta.
Running statistics are buffers, not parameters.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .model import block_shape
from .netspec import INPUT, NetSpec


class AnalysisError(ValueError):
    pass


@dataclass
class BlockInfo:
    name: str
    kind: str
    params: int
    out_shape: tuple[int, int, int]
    receptive_field: int
    receptive_field_raw: int
    jump: int


@dataclass
class Lint:
    rule: str
    block: str
    message: str
    severity: str = "error"


@dataclass
class FatParams:
    """Inputs of the fat-shattering expression; all must be positive."""

    B: float
    A: float
    c: float
    l: int
    lam: float


@dataclass
class AnalysisReport:
    name: str
    input_shape: tuple[int, int, int]
    per_block: list[BlockInfo]
    lints: list[Lint] = field(default_factory=list)
    reduction_rate: float = 0.0
    bounds: dict | None = None

    @property
    def total_params(self) -> int:
        return sum(b.params for b in self.per_block)

    @property
    def total_params_k(self) -> int:
        return round(self.total_params / 1000)

    @property
    def errors(self) -> list[Lint]:
        return [x for x in self.lints if x.severity == "error"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_params"] = self.total_params
        d["total_params_k"] = self.total_params_k
        d["reductions"] = [b.name for b in self.per_block if b.kind in ("max_pool", "strided_conv")]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        rows = [("block", "kind", "params", "out_shape", "rf", "jump")]
        for b in self.per_block:
            rf = str(b.receptive_field) if b.receptive_field == b.receptive_field_raw \
                else f"{b.receptive_field} ({b.receptive_field_raw})"
            rows.append((b.name, b.kind, f"{b.params:,}", "x".join(map(str, b.out_shape)), rf, str(b.jump)))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * wd for wd in widths))
        lines.append(f"total params: {self.total_params:,} ({self.total_params_k}K)")
        lines.append(f"reduction rate: {self.reduction_rate:.3f}")
        for lint in self.lints:
            lines.append(f"[{lint.severity}] {lint.rule} {lint.block}: {lint.message}")
        if self.bounds:
            for k, v in self.bounds.items():
                lines.append(f"{k}: {v:.6g}")
        return "\n".join(lines)


def _kind(block) -> str:
    if block.kind == "conv_composition" and block.stride > 1:
        return "strided_conv"
    return block.kind


def block_params(block, in_channels: int, bn: bool = True) -> int:
    if block.kind != "conv_composition":
        return 0
    total, cin = 0, in_channels
    for _ in range(block.repeat):
        total += block.kernel * block.kernel * cin * block.out_channels
        if block.with_bn_relu and bn:
            total += 2 * block.out_channels
        cin = block.out_channels
    return total


def trace_shapes(spec: NetSpec, input_shape=None) -> dict[str, tuple[int, int, int]]:
    shapes = {INPUT: tuple(input_shape or spec.input_shape)}
    for block in spec.topological():
        try:
            shapes[block.name] = block_shape(block, [shapes[i] for i in block.inputs])
        except ValueError as exc:
            raise AnalysisError(str(exc)) from None
    return shapes


def count_params(spec: NetSpec, bn: bool = True) -> tuple[dict[str, int], int]:
    """Per-block parameter counts and their total."""
    shapes = trace_shapes(spec)
    per = {b.name: block_params(b, shapes[b.inputs[0]][2], bn) for b in spec.topological()}
    return per, sum(per.values())


def rf_step(r: int, j: int, kernel: int, stride: int) -> tuple[int, int]:
    """One application of ``r += (k - 1) * j``; ``j *= s``."""
    return r + (kernel - 1) * j, j * stride


def receptive_field(spec: NetSpec) -> dict[str, tuple[int, int]]:
    """Receptive field size and jump after every block, starting from r=j=1."""
    rj = {INPUT: (1, 1)}
    for block in spec.topological():
        ins = [rj[i] for i in block.inputs]
        r, j = max(x[0] for x in ins), max(x[1] for x in ins)
        if block.kind == "conv_composition":
            r, j = rf_step(r, j, block.kernel, block.stride)
            for _ in range(block.repeat - 1):
                r, j = rf_step(r, j, block.kernel, 1)
        elif block.kind == "max_pool":
            r, j = rf_step(r, j, 2, 2)
        rj[block.name] = (r, j)
    return rj


def audit_reduction(spec: NetSpec) -> tuple[list[Lint], float]:
    """Lint spatial reductions against the composition rules.

    Returns the findings and the reduction rate (reductions per stride-1 conv).
    """
    lints: list[Lint] = []
    # per block: (stride-1 convs since last reduction, residual seen in that run)
    run = {INPUT: (0, False)}
    reductions = stride1 = 0
    for block in spec.topological():
        ins = [run[i] for i in block.inputs]
        convs = max(x[0] for x in ins)
        residual = any(x[1] for x in ins) or block.kind == "residual_add"
        if block.is_reduction:
            reductions += 1
            if convs < 1:
                lints.append(Lint("RULE-MIN-CONV", block.name,
                                  "spatial reduction without a stride-1 convolution since the previous one"))
            if block.kind == "max_pool":
                lints.append(Lint("RULE-POOL-INFO", block.name,
                                  "max pooling is a lossy non-linear projection; a stride-2 conv loses less",
                                  severity="info"))
            extra = block.repeat - 1 if block.kind == "conv_composition" else 0
            stride1 += extra
            run[block.name] = (extra, False)
            continue
        if block.kind == "conv_composition":
            stride1 += block.repeat
            convs += block.repeat
            if convs > 4 and not residual:
                lints.append(Lint("RULE-MAX-COMP", block.name,
                                  f"{convs} stride-1 convolutions between reductions without a residual link"))
        run[block.name] = (convs, residual)
    rate = reductions / stride1 if stride1 else math.inf if reductions else 0.0
    return lints, rate


def vc_bound(w: int, l: int) -> float:
    """Capacity expression ``w*l*ln(w) + w*l**2`` (constants dropped, natural log)."""
    if w <= 0:
        return 0.0
    return w * l * math.log(w) + w * l * l


def fat_shattering_bound(p: FatParams) -> float:
    """``B**2 * (c*A)**(l*(l+1)) / lam**(2*(l-1))`` with constants dropped."""
    if p.lam <= 0:
        raise ValueError(f"margin must be positive, got {p.lam}")
    if min(p.B, p.A, p.c, p.l) <= 0:
        raise ValueError("B, A, c and l must be positive")
    return p.B ** 2 * (p.c * p.A) ** (p.l * (p.l + 1)) / p.lam ** (2 * (p.l - 1))


def conv_depth(spec: NetSpec) -> int:
    """Longest chain of convolutions through the DAG."""
    depth = {INPUT: 0}
    for b in spec.topological():
        d = max(depth[i] for i in b.inputs)
        depth[b.name] = d + (b.repeat if b.kind == "conv_composition" else 0)
    return depth[spec.output]


def analyze(spec: NetSpec, fat: FatParams | None = None, bn: bool = True) -> AnalysisReport:
    shapes = trace_shapes(spec)
    per, _ = count_params(spec, bn)
    rj = receptive_field(spec)
    h, w, _ = spec.input_shape
    infos = []
    for b in spec.topological():
        r, j = rj[b.name]
        infos.append(BlockInfo(name=b.name, kind=_kind(b), params=per[b.name], out_shape=shapes[b.name],
                               receptive_field=min(r, max(h, w)), receptive_field_raw=r, jump=j))
    lints, rate = audit_reduction(spec)
    report = AnalysisReport(name=spec.name, input_shape=tuple(spec.input_shape), per_block=infos,
                            lints=lints, reduction_rate=rate)
    layers = conv_depth(spec)
    report.bounds = {"vc_capacity_expression": vc_bound(report.total_params, layers)}
    if fat is not None:
        report.bounds["fat_shattering_expression"] = fat_shattering_bound(fat)
    return report
