"""Executable models built from a :class:`~complab.netspec.NetSpec`."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .netspec import INPUT, Block, NetSpec


class BuildError(ValueError):
    pass


def block_shape(block: Block, in_shapes: list[tuple[int, int, int]]) -> tuple[int, int, int]:
    """Output ``(h, w, c)`` of one block given its input shapes."""
    h, w, c = in_shapes[0]
    if block.kind == "conv_composition":
        pad = conv_padding(block.stride)
        ho = L.conv_output_size(h, block.kernel, block.stride, pad)
        wo = L.conv_output_size(w, block.kernel, block.stride, pad)
        if ho < 1 or wo < 1:
            raise BuildError(f"{block.name}: {h}x{w} input collapses to nothing")
        return ho, wo, block.out_channels
    if block.kind == "max_pool":
        if h < 2 or w < 2:
            raise BuildError(f"{block.name}: cannot pool a {h}x{w} map")
        return h // 2, w // 2, c
    if block.kind == "dropout":
        return h, w, c
    a, b = in_shapes
    if a != b:
        raise BuildError(
            f"{block.name}: residual inputs {block.inputs[0]} {a} and {block.inputs[1]} {b} differ")
    return a


def conv_padding(stride: int) -> str:
    # stride-2 reductions floor odd extents, like 2x2 pooling
    return "same" if stride == 1 else "same_floor"


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

class Conv:
    def __init__(self, kernel: np.ndarray, stride: int):
        self.kernel, self.stride, self.padding = kernel, stride, conv_padding(stride)
        self.grad = np.zeros_like(kernel)

    def params(self):
        return [(self.kernel, self.grad)]

    def forward(self, x, mode, rng):
        self.x = x
        y, self.cols = L.conv2d_forward(x, self.kernel, self.stride, self.padding, return_columns=True)
        if mode == "eval":
            self.x = self.cols = None
        return y

    def backward(self, dy):
        g = L.conv2d_backward(self.x, self.kernel, self.stride, self.padding, dy, columns=self.cols)
        self.grad += g.d_params[0]
        self.x = self.cols = None
        return g.d_input


class BatchNorm:
    def __init__(self, channels, dtype):
        self.state = L.BatchNormState.create(channels, dtype=dtype)
        self.d_gamma = np.zeros_like(self.state.gamma)
        self.d_beta = np.zeros_like(self.state.beta)

    def params(self):
        return [(self.state.gamma, self.d_gamma), (self.state.beta, self.d_beta)]

    def forward(self, x, mode, rng):
        y, self.cache = L.batchnorm_forward(x, self.state, mode)
        return y

    def backward(self, dy):
        g = L.batchnorm_backward(self.cache, self.state, dy)
        self.d_gamma += g.d_params[0]
        self.d_beta += g.d_params[1]
        self.cache = None
        return g.d_input


class ReLU:
    def params(self):
        return []

    def forward(self, x, mode, rng):
        self.x = x
        return L.relu(x)

    def backward(self, dy):
        dx = L.relu_backward(self.x, dy)
        self.x = None
        return dx


class MaxPool:
    def params(self):
        return []

    def forward(self, x, mode, rng):
        y, self.idx = L.maxpool2d(x)
        return y

    def backward(self, dy):
        return L.maxpool2d_backward(self.idx, dy)


class Dropout:
    def __init__(self, rate):
        self.rate = rate

    def params(self):
        return []

    def forward(self, x, mode, rng):
        y, self.mask = L.dropout(x, self.rate, rng, mode)
        return y

    def backward(self, dy):
        return L.dropout_backward(self.mask, dy)


# --------------------------------------------------------------------------
# graph
# --------------------------------------------------------------------------

@dataclass
class Node:
    block: Block
    ops: list = field(default_factory=list)
    out_shape: tuple = ()

    @property
    def name(self):
        return self.block.name


class Model:
    """Blocks in topological order; the last node's output is pooled to logits.

    If the output map is larger than 1x1 it is spatially averaged. The logits
    block is a linear 1x1 conv, so this equals averaging before that block.
    """

    def __init__(self, spec: NetSpec, nodes: list[Node]):
        self.spec = spec
        self.nodes = nodes
        self.output = spec.output
        self.activations: dict[str, np.ndarray] = {}

    def parameters(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [p for n in self.nodes for op in n.ops for p in op.params()]

    def zero_grad(self):
        for _, g in self.parameters():
            g[...] = 0

    def forward(self, x: np.ndarray, mode: str = "eval", rng: np.random.Generator | None = None,
                keep: bool = False) -> np.ndarray:
        acts = {INPUT: x}
        for node in self.nodes:
            ins = [acts[i] for i in node.block.inputs]
            y = ins[0] + ins[1] if node.block.kind == "residual_add" else ins[0]
            for op in node.ops:
                y = op.forward(y, mode, rng)
            acts[node.name] = y
        out = acts[self.output]
        self._pre_pool_shape = out.shape
        if keep:
            self.activations = acts
        if out.ndim == 4:
            out = out.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype)
        return out

    def backward(self, d_logits: np.ndarray) -> np.ndarray:
        n, h, w, c = self._pre_pool_shape
        grads = {self.output: np.broadcast_to(d_logits[:, None, None, :] / (h * w), (n, h, w, c))}
        for node in reversed(self.nodes):
            dy = grads.pop(node.name)
            for op in reversed(node.ops):
                dy = op.backward(dy)
            for i in node.block.inputs:
                grads[i] = grads[i] + dy if i in grads else dy
        return grads[INPUT]

    def num_params(self) -> int:
        return sum(p.size for p, _ in self.parameters())

    def state_arrays(self) -> list[np.ndarray]:
        """Parameters plus BN running statistics, for snapshots."""
        out = []
        for n in self.nodes:
            for op in n.ops:
                if isinstance(op, BatchNorm):
                    out += [op.state.gamma, op.state.beta, op.state.running_mean, op.state.running_var]
                elif isinstance(op, Conv):
                    out.append(op.kernel)
        return out

    def load_state(self, arrays) -> None:
        """Copy a :meth:`state_arrays` snapshot back in place."""
        mine = self.state_arrays()
        arrays = list(arrays)
        if len(arrays) != len(mine):
            raise ValueError(f"snapshot has {len(arrays)} arrays, model has {len(mine)}")
        for dst, src in zip(mine, arrays):
            if dst.shape != src.shape:
                raise ValueError(f"snapshot array of shape {src.shape} does not fit {dst.shape}")
            dst[...] = src


def build_model(spec: NetSpec, init_rng: np.random.Generator, bn_enabled: bool = True,
                dropout_enabled: bool = True, dtype=np.float32) -> Model:
    """Instantiate weights for ``spec``.

    Every conv is followed by BN then ReLU unless its block is marked
    ``linear``; with ``bn_enabled=False`` only the ReLU remains. Convs carry
    no bias. With ``dropout_enabled=False`` dropout blocks become identities.
    """
    shapes = {INPUT: tuple(spec.input_shape)}
    nodes = []
    for block in spec.topological():
        ins = [shapes[i] for i in block.inputs]
        out_shape = block_shape(block, ins)
        node = Node(block=block, out_shape=out_shape)
        if block.kind == "conv_composition":
            cin = ins[0][2]
            for r in range(block.repeat):
                k = L.he_normal((block.kernel, block.kernel, cin, block.out_channels), init_rng, dtype)
                node.ops.append(Conv(k, block.stride if r == 0 else 1))
                if block.with_bn_relu:
                    if bn_enabled:
                        node.ops.append(BatchNorm(block.out_channels, dtype))
                    node.ops.append(ReLU())
                cin = block.out_channels
        elif block.kind == "max_pool":
            node.ops.append(MaxPool())
        elif block.kind == "dropout" and dropout_enabled:
            node.ops.append(Dropout(block.rate))
        shapes[block.name] = out_shape
        nodes.append(node)
    return Model(spec, nodes)
