"""Composite layers for the codec and rectifier: convolutions with managed
parameters, residual blocks, grouped residual blocks, layer-norm,
multi-head self-attention over spatial positions, and the Adam optimizer.

Weights initialize uniform in +-1/sqrt(fan-in); biases start at zero.  A
layer flagged ``zero_init`` starts with all-zero weights so its output is
exactly zero (used by the rectifier's exit projection).
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "Module", "Conv2d", "ConvTranspose2d", "LayerNorm", "ResBlock",
    "GroupedResBlocks", "MultiHeadAttention", "Adam",
]


class Module:
    """Parameter container; children register in declaration order."""

    def __init__(self):
        self._params: list[Tensor] = []
        self._children: list[Module] = []

    def _register(self, child: "Module") -> "Module":
        self._children.append(child)
        return child

    def _param(self, data, name: str) -> Tensor:
        p = T.parameter(data, name)
        self._params.append(p)
        return p

    def parameters(self) -> list[Tensor]:
        out = list(self._params)
        for c in self._children:
            out.extend(c.parameters())
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, in_c: int, out_c: int, k: int, rng: np.random.Generator,
                 name: str, stride: int = 1, padding: int = 0,
                 zero_init: bool = False):
        super().__init__()
        self.stride, self.padding = stride, padding
        w = np.zeros((out_c, in_c, k, k)) if zero_init else \
            _uniform_init(rng, (out_c, in_c, k, k), in_c * k * k)
        self.w = self._param(w, f"{name}.w")
        self.b = self._param(np.zeros(out_c), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_c: int, out_c: int, k: int, rng: np.random.Generator,
                 name: str, stride: int = 1, padding: int = 0,
                 output_padding: int = 0):
        super().__init__()
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        w = _uniform_init(rng, (in_c, out_c, k, k), in_c * k * k)
        self.w = self._param(w, f"{name}.w")
        self.b = self._param(np.zeros(out_c), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.w, self.b, stride=self.stride,
                                  padding=self.padding,
                                  output_padding=self.output_padding)


class LayerNorm(Module):
    """Channel-axis normalization per spatial position, with affine params."""

    def __init__(self, channels: int, name: str, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = self._param(np.ones((1, channels, 1, 1)), f"{name}.gain")
        self.bias = self._param(np.zeros((1, channels, 1, 1)), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.mul(T.layer_norm(x, eps=self.eps), self.gain), self.bias)


class ResBlock(Module):
    """conv3x3 -> leaky-relu -> conv3x3, plus identity skip."""

    def __init__(self, channels: int, rng: np.random.Generator, name: str):
        super().__init__()
        self.channels = channels
        self.conv1 = self._register(Conv2d(channels, channels, 3, rng,
                                           f"{name}.conv1", padding=1))
        self.conv2 = self._register(Conv2d(channels, channels, 3, rng,
                                           f"{name}.conv2", padding=1))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"res-block expects {self.channels} channels, "
                             f"got {x.shape[1]}")
        return T.add(x, self.conv2(T.leaky_relu(self.conv1(x))))


class GroupedResBlocks(Module):
    """G independent ResBlocks over channel groups of width d."""

    def __init__(self, groups: int, d: int, rng: np.random.Generator, name: str):
        super().__init__()
        self.groups, self.d = groups, d
        self.blocks = [self._register(ResBlock(d, rng, f"{name}.g{i}"))
                       for i in range(groups)]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.groups * self.d:
            raise ShapeError(f"grouped res-blocks expect {self.groups * self.d} "
                             f"channels, got {x.shape[1]}")
        outs = [blk(T.channel_slice(x, i * self.d, (i + 1) * self.d))
                for i, blk in enumerate(self.blocks)]
        return T.concat(outs, axis=1)


class MultiHeadAttention(Module):
    """Layer-norm then scaled dot-product self-attention over spatial positions.

    Positions flatten row-major (height then width).  Q/K/V project the
    ``channels`` input down to heads*head_dim; the output projection maps
    back up to ``channels``, so output shape equals input shape.
    """

    def __init__(self, channels: int, heads: int, head_dim: int,
                 rng: np.random.Generator, name: str):
        super().__init__()
        if heads < 1 or head_dim < 1:
            raise ShapeError(f"attention needs positive heads/head_dim, "
                             f"got {heads}, {head_dim}")
        self.channels, self.heads, self.head_dim = channels, heads, head_dim
        inner = heads * head_dim
        self.norm = self._register(LayerNorm(channels, f"{name}.norm"))
        self.wq = self._param(_uniform_init(rng, (channels, inner), channels), f"{name}.wq")
        self.wk = self._param(_uniform_init(rng, (channels, inner), channels), f"{name}.wk")
        self.wv = self._param(_uniform_init(rng, (channels, inner), channels), f"{name}.wv")
        self.wo = self._param(_uniform_init(rng, (inner, channels), inner), f"{name}.wo")

    def _heads_view(self, z: Tensor, n: int, s: int) -> Tensor:
        # (N, S, H*d) -> (N*H, S, d)
        z = T.reshape(z, (n, s, self.heads, self.head_dim))
        z = T.transpose(z, (0, 2, 1, 3))
        return T.reshape(z, (n * self.heads, s, self.head_dim))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (output, attention weights (N*H, S, S))."""
        if x.data.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"attention expects (N,{self.channels},H,W), "
                             f"got {x.shape}")
        n, c, h, w = x.shape
        s = h * w
        seq = T.reshape(T.transpose(self.norm(x), (0, 2, 3, 1)), (n, s, c))
        q = self._heads_view(T.matmul(seq, self.wq), n, s)
        k = self._heads_view(T.matmul(seq, self.wk), n, s)
        v = self._heads_view(T.matmul(seq, self.wv), n, s)
        scores = T.scalar_mul(T.matmul(q, T.transpose(k, (0, 2, 1))),
                              1.0 / math.sqrt(self.head_dim))
        attn = T.softmax(scores)
        ctx = T.matmul(attn, v)  # (N*H, S, d)
        ctx = T.reshape(ctx, (n, self.heads, s, self.head_dim))
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)),
                        (n, s, self.heads * self.head_dim))
        out = T.matmul(ctx, self.wo)  # (N, S, C)
        out = T.transpose(T.reshape(out, (n, h, w, c)), (0, 3, 1, 2))
        return out, attn

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)[0]


class Adam(Module):
    """Bias-corrected Adam over an explicit parameter list.

    A non-finite gradient aborts the run naming the offending parameter;
    missing gradients are treated as zero (moments still decay).
    """

    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__()
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                name = p.name or f"param[{i}]"
                raise FloatingPointError(f"non-finite gradient in {name} "
                                         f"at step {self.step_count}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self) -> dict:
        return {"step": self.step_count,
                "m": [a.copy() for a in self.m],
                "v": [a.copy() for a in self.v]}

    def load_state_dict(self, state: dict):
        if len(state["m"]) != len(self.params):
            raise ValueError("optimizer state does not match parameter count")
        self.step_count = int(state["step"])
        self.m = [np.array(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in state["v"]]
