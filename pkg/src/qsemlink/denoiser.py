"""Conditional U-Net noise predictor.

Conditioning enters as extra input channels (the noisy one-hot map is
concatenated with the noisy image); each residual block receives the
sinusoidal timestep embedding through a per-block projection. The network
is organized as an explicit, ordered block list so the quantizer can
calibrate block by block and re-execute the model blockwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import RngStream
from .diffusion import DenoiserOutput
from .tensor import Tensor

__all__ = ["DenoiserConfig", "Block", "BlockGraph", "DenoiserNet", "time_embedding", "enumerate_blocks"]


@dataclass
class DenoiserConfig:
    in_channels: int = 3
    cond_channels: int = 6
    base_width: int = 32
    depth: int = 2
    time_embed_dim: int = 64
    null_cond_prob: float = 0.2

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.base_width % _norm_groups(self.base_width):
            raise ValueError("base_width must be a multiple of the group-norm group count")

    def widths(self) -> list[int]:
        return [self.base_width * (2**i) for i in range(self.depth)]

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "cond_channels": self.cond_channels,
            "base_width": self.base_width,
            "depth": self.depth,
            "time_embed_dim": self.time_embed_dim,
            "null_cond_prob": self.null_cond_prob,
        }

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        return DenoiserConfig(**d)


def _norm_groups(channels: int) -> int:
    return 8 if channels >= 8 else channels


def time_embedding(t, dim: int) -> np.ndarray:
    """Interleaved sinusoidal embedding: entry 2i = sin(t w_i), 2i+1 = cos(t w_i)."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    tarr = np.asarray(t, dtype=np.float64)
    single = tarr.ndim == 0
    tarr = np.atleast_1d(tarr)
    i = np.arange(dim // 2, dtype=np.float64)
    omega = np.power(10000.0, -2.0 * i / dim)
    args = tarr[:, None] * omega[None, :]
    out = np.empty((tarr.size, dim), dtype=np.float32)
    out[:, 0::2] = np.sin(args)
    out[:, 1::2] = np.cos(args)
    return out[0] if single else out


@dataclass
class Block:
    """One calibration unit: a named parameter group plus its forward rule."""

    name: str
    kind: str  # input_conv | res | res_concat | output_conv
    param_names: list[str]
    concat_input: bool
    # incoming channel widths; two entries (up, skip) for concat blocks
    branch_channels: list[int]
    out_channels: int
    # spatial scale of the block's output relative to the input image (2**-k)
    scale: int


@dataclass
class BlockGraph:
    blocks: list[Block]

    def __iter__(self):
        return iter(self.blocks)

    def by_name(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)


class DenoiserNet:
    """eps/variance predictor over (noisy image, timestep, conditioning map)."""

    def __init__(self, config: DenoiserConfig, stream: RngStream | None = None):
        self.config = config
        self.in_channels = config.in_channels
        self.params: dict[str, Tensor] = {}
        self._blocks: list[Block] = []
        self._build(stream)

    # -- construction --------------------------------------------------------

    def _add_param(self, name: str, shape, init: str, stream: RngStream | None) -> str:
        if init == "ones":
            data = np.ones(shape, dtype=np.float32)
        elif init == "he" and stream is not None:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
            data = stream.normal(shape) * np.float32(np.sqrt(2.0 / fan_in))
        else:
            data = np.zeros(shape, dtype=np.float32)
        self.params[name] = Tensor(data, requires_grad=True)
        return name

    def _add_conv(self, prefix: str, cin: int, cout: int, k: int, stream, zero: bool = False) -> list[str]:
        names = [
            self._add_param(f"{prefix}.w", (cout, cin, k, k), "zeros" if zero else "he", stream),
            self._add_param(f"{prefix}.b", (cout,), "zeros", stream),
        ]
        return names

    def _add_linear(self, prefix: str, nin: int, nout: int, stream) -> list[str]:
        return [
            self._add_param(f"{prefix}.w", (nin, nout), "he", stream),
            self._add_param(f"{prefix}.b", (nout,), "zeros", stream),
        ]

    def _add_norm(self, prefix: str, c: int, stream) -> list[str]:
        return [
            self._add_param(f"{prefix}.gamma", (c,), "ones", stream),
            self._add_param(f"{prefix}.beta", (c,), "zeros", stream),
        ]

    def _add_res_params(self, prefix: str, cin: int, cout: int, stream) -> list[str]:
        names: list[str] = []
        names += self._add_norm(f"{prefix}.gn1", cin, stream)
        names += self._add_conv(f"{prefix}.conv1", cin, cout, 3, stream)
        names += self._add_linear(f"{prefix}.temb", self.config.time_embed_dim, cout, stream)
        names += self._add_norm(f"{prefix}.gn2", cout, stream)
        names += self._add_conv(f"{prefix}.conv2", cout, cout, 3, stream)
        if cin != cout:
            names += self._add_conv(f"{prefix}.skip", cin, cout, 1, stream)
        return names

    def _build(self, stream: RngStream | None):
        cfg = self.config
        widths = cfg.widths()
        cin0 = cfg.in_channels + cfg.cond_channels
        names = self._add_conv("input_conv", cin0, cfg.base_width, 3, stream)
        self._blocks.append(Block("input_conv", "input_conv", names, False, [cin0], cfg.base_width, 0))

        prev = cfg.base_width
        for i, w in enumerate(widths):
            names = self._add_res_params(f"down{i}", prev, w, stream)
            self._blocks.append(Block(f"down{i}", "res", names, False, [prev], w, i))
            prev = w

        names = self._add_res_params("mid", prev, prev, stream)
        self._blocks.append(Block("mid", "res", names, False, [prev], prev, cfg.depth))

        for i in reversed(range(cfg.depth)):
            skip_w = widths[i]
            cin = prev + skip_w
            cout = widths[i]
            names = self._add_res_params(f"up{i}", cin, cout, stream)
            self._blocks.append(Block(f"up{i}", "res_concat", names, True, [prev, skip_w], cout, i))
            prev = cout

        names = self._add_norm("out_norm", prev, stream)
        names += self._add_conv("out_conv", prev, 2 * cfg.in_channels, 3, stream, zero=True)
        self._blocks.append(Block("output_conv", "output_conv", names, False, [prev], 2 * cfg.in_channels, 0))

    # -- parameter access ------------------------------------------------------

    def param_count(self) -> int:
        return sum(p.numel for p in self.params.values())

    def weight_tensor_names(self) -> list[str]:
        """Conv/linear kernels, in block order; the quantization targets."""
        names: list[str] = []
        for b in self._blocks:
            names += [n for n in b.param_names if n.endswith(".w")]
        return names

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"checkpoint missing parameter {k}")
            p.copy_(state[k])

    # -- forward ----------------------------------------------------------------

    def _p(self, name: str, override) -> Tensor:
        if override is not None and name in override:
            return override[name]
        return self.params[name]

    def _res_apply(self, prefix: str, x: Tensor, temb: Tensor, cin: int, cout: int, override) -> Tensor:
        p = lambda n: self._p(f"{prefix}.{n}", override)
        h = T.group_norm(x, p("gn1.gamma"), p("gn1.beta"), groups=_norm_groups(cin))
        h = T.conv2d(T.silu(h), p("conv1.w"), p("conv1.b"))
        proj = T.linear(T.silu(temb), p("temb.w"), p("temb.b"))
        h = h + T.reshape(proj, (proj.shape[0], cout, 1, 1))
        h = T.group_norm(h, p("gn2.gamma"), p("gn2.beta"), groups=_norm_groups(cout))
        h = T.conv2d(T.silu(h), p("conv2.w"), p("conv2.b"))
        if cin != cout:
            x = T.conv2d(x, p("skip.w"), p("skip.b"))
        return h + x

    def block_apply(self, block: Block, inputs: list[Tensor], temb: Tensor | None, override=None) -> Tensor:
        """Run one block on explicit inputs (the calibration entry point)."""
        if block.kind == "input_conv":
            return T.conv2d(inputs[0], self._p("input_conv.w", override), self._p("input_conv.b", override))
        if block.kind == "res":
            return self._res_apply(block.name, inputs[0], temb, block.branch_channels[0], block.out_channels, override)
        if block.kind == "res_concat":
            x = T.concat_channels(inputs)
            cin = sum(block.branch_channels)
            return self._res_apply(block.name, x, temb, cin, block.out_channels, override)
        if block.kind == "output_conv":
            h = T.group_norm(
                inputs[0],
                self._p("out_norm.gamma", override),
                self._p("out_norm.beta", override),
                groups=_norm_groups(block.branch_channels[0]),
            )
            return T.conv2d(T.silu(h), self._p("out_conv.w", override), self._p("out_conv.b", override))
        raise ValueError(f"unknown block kind {block.kind}")

    def time_features(self, t, batch: int) -> Tensor:
        """Raw sinusoidal features; each block applies its own projection."""
        emb = time_embedding(t, self.config.time_embed_dim)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (batch, emb.size)).copy()
        elif emb.shape[0] != batch:
            raise T.ShapeMismatchError("time_features", "t batch differs from x batch", (batch,), emb.shape)
        return Tensor(emb)

    def forward(self, x, t, y, params=None, block_hook=None, input_filter=None) -> DenoiserOutput:
        cfg = self.config
        x = x if isinstance(x, Tensor) else Tensor(x)
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        n, _, hgt, wid = x.shape
        if y is None:
            y = Tensor(np.zeros((n, cfg.cond_channels, hgt, wid), dtype=np.float32))
        else:
            y = y if isinstance(y, Tensor) else Tensor(y)
            if y.ndim == 3:
                y = T.reshape(y, (1,) + y.shape)
                if n > 1:
                    y = Tensor(np.repeat(y.data, n, axis=0))
            if y.shape[0] != n or y.shape[2:] != (hgt, wid):
                raise T.ShapeMismatchError("denoiser", "conditioning map does not match image", x.shape, y.shape)
        if x.shape[1] != cfg.in_channels or y.shape[1] != cfg.cond_channels:
            raise T.ShapeMismatchError("denoiser", "channel counts do not match config", x.shape, y.shape)

        temb = self.time_features(t, n)
        h = T.concat_channels([x, y])
        skips: list[Tensor] = []
        for block in self._blocks:
            if block.kind == "input_conv":
                inputs = [h]
            elif block.name.startswith("down"):
                inputs = [h]
            elif block.name == "mid":
                inputs = [h]
            elif block.kind == "res_concat":
                inputs = [T.nearest_upsample2(h), skips.pop()]
            else:  # output_conv
                inputs = [h]
            if input_filter is not None:
                inputs = input_filter(block, inputs)
            out = self.block_apply(block, inputs, temb, params)
            if block_hook is not None:
                block_hook(block, inputs, temb, out)
            if block.name.startswith("down"):
                skips.append(out)
                out = T.avg_pool2(out)
            h = out

        eps_hat = T.narrow(h, 1, 0, cfg.in_channels)
        v_hat = T.sigmoid(T.narrow(h, 1, cfg.in_channels, cfg.in_channels))
        if single:
            eps_hat = T.reshape(eps_hat, eps_hat.shape[1:])
            v_hat = T.reshape(v_hat, v_hat.shape[1:])
        return DenoiserOutput(eps_hat, v_hat)

    __call__ = forward

    # -- structure metadata ------------------------------------------------------

    def layer_specs(self, height: int, width: int) -> list[dict]:
        """Analytic per-layer table for FLOPs accounting at a given input size."""
        cfg = self.config
        specs: list[dict] = []

        def res_specs(prefix, cin, cout, h, w):
            out = [
                {"name": f"{prefix}.gn1", "kind": "norm", "elems": cin * h * w},
                {"name": f"{prefix}.silu1", "kind": "act", "elems": cin * h * w},
                {"name": f"{prefix}.conv1", "kind": "conv", "cin": cin, "cout": cout, "k": 3, "h": h, "w": w},
                {"name": f"{prefix}.temb", "kind": "linear", "nin": cfg.time_embed_dim, "nout": cout},
                {"name": f"{prefix}.gn2", "kind": "norm", "elems": cout * h * w},
                {"name": f"{prefix}.silu2", "kind": "act", "elems": cout * h * w},
                {"name": f"{prefix}.conv2", "kind": "conv", "cin": cout, "cout": cout, "k": 3, "h": h, "w": w},
            ]
            if cin != cout:
                out.append({"name": f"{prefix}.skip", "kind": "conv", "cin": cin, "cout": cout, "k": 1, "h": h, "w": w})
            return out

        for block in self._blocks:
            h = height >> block.scale
            w = width >> block.scale
            if block.kind == "input_conv":
                specs.append(
                    {"name": "input_conv", "kind": "conv", "cin": block.branch_channels[0], "cout": block.out_channels, "k": 3, "h": h, "w": w}
                )
            elif block.kind in ("res", "res_concat"):
                specs += res_specs(block.name, sum(block.branch_channels), block.out_channels, h, w)
            else:
                c = block.branch_channels[0]
                specs.append({"name": "out_norm", "kind": "norm", "elems": c * h * w})
                specs.append({"name": "out_silu", "kind": "act", "elems": c * h * w})
                specs.append({"name": "out_conv", "kind": "conv", "cin": c, "cout": block.out_channels, "k": 3, "h": h, "w": w})
        return specs


def enumerate_blocks(model: DenoiserNet) -> BlockGraph:
    """Deterministic block list; concat-shortcut blocks are flagged."""
    return BlockGraph(list(model._blocks))
