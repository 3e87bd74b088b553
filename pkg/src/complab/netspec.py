"""Declarative network descriptions and their text format.

A spec file is UTF-8 text, one statement per line; ``#`` starts a comment::

    name design1
    input 28 x 28 x 3
    block1: 1 x conv3x3, 1, 64
    block2: max_pool
    block7_1: dropout 0.5
    block9: 1 x conv1x1, 1, 10, linear
    block2_1: 1 x conv1x1, 2, 128 <- block1
    block3_1: block2_1 + block3

Conv compositions follow ``repeat x convKxK, stride, channels``; ``repeat``
and ``stride`` may be omitted (``conv3x3, 64``) and default to 1. The stride
applies to the first conv of a composition. A trailing ``linear`` drops the
BN+ReLU that otherwise follows every conv. Each block reads the previous
line's block unless ``<- name`` says otherwise; the first block reads
``input``. ``a + b`` is an elementwise residual sum.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from importlib import resources

BLOCK_KINDS = ("conv_composition", "max_pool", "dropout", "residual_add")
INPUT = "input"


class SpecError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Block:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    repeat: int = 1
    kernel: int = 1
    stride: int = 1
    out_channels: int = 0
    with_bn_relu: bool = True
    rate: float = 0.5

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise SpecError(f"unknown block kind {self.kind!r}")
        if self.kind == "conv_composition":
            if self.repeat < 1 or self.kernel < 1 or self.out_channels < 1:
                raise SpecError(f"{self.name}: repeat, kernel and channels must be positive")
            if self.stride not in (1, 2):
                raise SpecError(f"{self.name}: stride must be 1 or 2, got {self.stride}")
        if self.kind == "residual_add" and len(self.inputs) != 2:
            raise SpecError(f"{self.name}: residual_add takes exactly two inputs")

    @property
    def is_reduction(self) -> bool:
        return self.kind == "max_pool" or (self.kind == "conv_composition" and self.stride > 1)


@dataclass
class NetSpec:
    name: str
    input_shape: tuple[int, int, int] = (28, 28, 3)
    blocks: list[Block] = field(default_factory=list)

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    @property
    def output(self) -> str:
        if not self.blocks:
            return INPUT
        consumed = {i for b in self.blocks for i in b.inputs}
        sinks = [b.name for b in self.blocks if b.name not in consumed]
        return sinks[-1]

    def topological(self) -> list[Block]:
        return toposort(self.blocks)

    def scaled(self, divisor: int) -> "NetSpec":
        """Divide every conv width by ``divisor``, except the final logits block."""
        if divisor == 1:
            return replace(self, blocks=list(self.blocks))
        out = self.output
        blocks = []
        for b in self.blocks:
            if b.kind == "conv_composition" and b.name != out:
                if b.out_channels % divisor:
                    raise SpecError(f"{b.name}: {b.out_channels} channels not divisible by {divisor}")
                b = replace(b, out_channels=b.out_channels // divisor)
            blocks.append(b)
        return NetSpec(name=self.name, input_shape=self.input_shape, blocks=blocks)


def toposort(blocks: list[Block]) -> list[Block]:
    """Kahn's algorithm, ties broken by declaration order."""
    names = {b.name for b in blocks}
    pending = {b.name: {i for i in b.inputs if i != INPUT} for b in blocks}
    for b in blocks:
        for i in pending[b.name]:
            if i not in names:
                raise SpecError(f"{b.name}: unknown input {i!r}")
    order, done = [], set()
    while len(order) < len(blocks):
        ready = [b for b in blocks if b.name not in done and pending[b.name] <= done]
        if not ready:
            cyc = sorted(n for n in pending if n not in done)
            raise SpecError(f"wiring is not a DAG; cycle among {cyc}")
        order.append(ready[0])
        done.add(ready[0].name)
    return order


# --------------------------------------------------------------------------
# text format
# --------------------------------------------------------------------------

_NAME = r"[A-Za-z_][A-Za-z0-9_]*"
_CONV = re.compile(
    r"^(?:(?P<repeat>\d+)\s*x\s*)?conv\s*(?P<k1>\d+)\s*x\s*(?P<k2>\d+)\s*,"
    r"(?:\s*(?P<stride>\d+)\s*,)?\s*(?P<ch>\d+)\s*(?P<linear>,\s*linear)?$"
)
_ADD = re.compile(rf"^(?P<a>{_NAME})\s*\+\s*(?P<b>{_NAME})$")
_DROP = re.compile(r"^dropout(?:\s+(?P<rate>[0-9.]+))?$")
_INPUT = re.compile(r"^input\s+(\d+)\s*x\s*(\d+)\s*x\s*(\d+)$")


def parse_spec(text: str) -> NetSpec:
    name, shape = "unnamed", (28, 28, 3)
    blocks: list[Block] = []
    lines: dict[str, int] = {}
    prev = INPUT
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("name ") or line.startswith("name:"):
            name = line[5:].strip()
            continue
        m = _INPUT.match(line.replace(":", " ", 1) if line.startswith("input:") else line)
        if m:
            shape = tuple(int(g) for g in m.groups())
            continue
        head, sep, body = line.partition(":")
        bname = head.strip()
        if not sep or not re.fullmatch(_NAME, bname):
            raise SpecError(f"expected 'name: block', got {raw.strip()!r}", lineno)
        if bname in lines or bname == INPUT:
            raise SpecError(f"duplicate block name {bname!r}", lineno)
        body, arrow, src = body.partition("<-")
        body = body.strip()
        srcs = tuple(s.strip() for s in src.split(",")) if arrow else (prev,)
        try:
            blocks.append(_parse_body(bname, body, srcs, lineno))
        except SpecError as exc:
            if exc.line is None:
                raise SpecError(str(exc), lineno) from None
            raise
        lines[bname] = lineno
        prev = bname
    if not blocks:
        raise SpecError("spec has no blocks")
    try:
        toposort(blocks)
    except SpecError as exc:
        bad = next((b for b in blocks if b.name in str(exc)), blocks[-1])
        raise SpecError(str(exc), lines[bad.name]) from None
    consumed = {i for b in blocks for i in b.inputs}
    sinks = [b.name for b in blocks if b.name not in consumed]
    if len(sinks) != 1:
        raise SpecError(f"spec must have a single output block, found {sinks}", lines[sinks[-1]])
    return NetSpec(name=name, input_shape=shape, blocks=blocks)


def _parse_body(name: str, body: str, srcs: tuple[str, ...], lineno: int) -> Block:
    norm = re.sub(r"\s+", " ", body)
    m = _CONV.match(norm)
    if m:
        if m["k1"] != m["k2"]:
            raise SpecError("only square kernels are supported", lineno)
        return Block(name=name, kind="conv_composition", inputs=srcs, repeat=int(m["repeat"] or 1),
                     kernel=int(m["k1"]), stride=int(m["stride"] or 1), out_channels=int(m["ch"]),
                     with_bn_relu=m["linear"] is None)
    if norm in ("max_pool", "maxpool"):
        return Block(name=name, kind="max_pool", inputs=srcs)
    m = _DROP.match(norm)
    if m:
        return Block(name=name, kind="dropout", inputs=srcs, rate=float(m["rate"] or 0.5))
    m = _ADD.match(norm)
    if m:
        return Block(name=name, kind="residual_add", inputs=(m["a"], m["b"]))
    raise SpecError(f"unknown block kind in {body!r}", lineno)


def render_spec(spec: NetSpec) -> str:
    h, w, c = spec.input_shape
    out = [f"name {spec.name}", f"input {h} x {w} x {c}"]
    prev = INPUT
    for b in spec.blocks:
        if b.kind == "conv_composition":
            body = f"{b.repeat} x conv{b.kernel}x{b.kernel}, {b.stride}, {b.out_channels}"
            if not b.with_bn_relu:
                body += ", linear"
        elif b.kind == "max_pool":
            body = "max_pool"
        elif b.kind == "dropout":
            body = f"dropout {b.rate:g}"
        else:
            body = f"{b.inputs[0]} + {b.inputs[1]}"
        if b.kind != "residual_add" and b.inputs != (prev,):
            body += " <- " + ", ".join(b.inputs)
        out.append(f"{b.name}: {body}")
        prev = b.name
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# built-in designs
# --------------------------------------------------------------------------

DESIGN_NAMES = ("design1", "design1_conv", "design1_conv_stride", "design2", "design3", "design4")


def design_text(name: str) -> str:
    if name not in DESIGN_NAMES:
        raise KeyError(f"unknown design {name!r}; valid names: {', '.join(DESIGN_NAMES)}")
    return resources.files("complab").joinpath("designs", f"{name}.net").read_text(encoding="utf-8")


def builtin_design(name: str) -> NetSpec:
    return parse_spec(design_text(name))


def load_spec(name_or_path: str) -> NetSpec:
    """Builtin design name, or a path to a spec file."""
    if name_or_path in DESIGN_NAMES:
        return builtin_design(name_or_path)
    with open(name_or_path, encoding="utf-8") as fh:
        return parse_spec(fh.read())
