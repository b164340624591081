"""Layers and the toy segmentation network built from factorized residual blocks.

Layers follow a cache-passing protocol: ``forward(x, ctx)`` returns the
output and whatever the backward needs, ``backward(dy, cache)`` returns the
input adjoint and accumulates parameter gradients. Caches are explicit so
one network can be run for several domains before any backward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import deform as D
from .ops import (
    NormStatistics,
    batch_normalize,
    batch_normalize_backward,
    conv2d,
    conv2d_backward,
    relu,
    relu_backward,
)
from .tensor import Tensor

REGULAR = "regular"
BLOCK_VARIANTS = (REGULAR, D.DC, D.RDC, D.FRDC)


@dataclass
class Context:
    """Per-call state: which statistics the norm layers read and update."""

    stats: Dict[str, NormStatistics]
    mode: str = "train"
    momentum: float = 0.9


def xavier_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    cout, cin, kh, kw = shape
    limit = np.sqrt(6.0 / ((cin + cout) * kh * kw))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    def parameters(self) -> List[Tensor]:
        return []

    def norm_layers(self) -> List["BatchNorm"]:
        return []


class Conv(Layer):
    def __init__(self, name, cin, cout, kh, kw, rng=None, stride=1, dilation=1, padding=None,
                 zero_init=False, offset=False):
        self.stride, self.dilation = stride, dilation
        self.padding = padding if padding is not None else (dilation * (kh // 2), dilation * (kw // 2))
        shape = (cout, cin, kh, kw)
        w = np.zeros(shape) if zero_init else xavier_uniform(rng, shape)
        self.weight = Tensor(w, f"{name}.weight", {"decay": True, "offset": offset})
        self.bias = Tensor(np.zeros(cout), f"{name}.bias", {"decay": False, "offset": offset})

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, ctx):
        return conv2d(x, self.weight.data, self.bias.data, self.stride, self.dilation, self.padding), x

    def backward(self, dy, x):
        dx, dw, db = conv2d_backward(dy, x, self.weight.data, self.stride, self.dilation, self.padding)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class DeformConv(Layer):
    """A deformable-family convolution with its own zero-initialized offset branch."""

    def __init__(self, name, variant, cin, cout, kh, kw, rng, dilation=1):
        self.variant = variant
        self.geometry = D.KernelGeometry(kh, kw, dilation)
        self.weight = Tensor(xavier_uniform(rng, (cout, cin, kh, kw)), f"{name}.weight",
                             {"decay": True, "offset": False})
        self.bias = Tensor(np.zeros(cout), f"{name}.bias", {"decay": False, "offset": False})
        spec = D.make_offset_layer(cin, self.geometry, variant)
        self.offset_weight = Tensor(spec.weight, f"{name}.offset.weight", {"decay": True, "offset": True})
        self.offset_bias = Tensor(spec.bias, f"{name}.offset.bias", {"decay": False, "offset": True})
        self.offset_padding = spec.padding
        self.last_offsets: Optional[np.ndarray] = None

    def parameters(self):
        return [self.weight, self.bias, self.offset_weight, self.offset_bias]

    def forward(self, x, ctx):
        off = conv2d(x, self.offset_weight.data, self.offset_bias.data, 1, self.geometry.dilation,
                     self.offset_padding)
        self.last_offsets = off
        y, cache = D.deform_forward(x, self.weight.data, self.bias.data, off, self.geometry, self.variant)
        return y, cache

    def backward(self, dy, cache):
        dx, dw, db, doff = D.deform_backward(dy, cache)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        dx2, dow, dob = conv2d_backward(doff, cache.x, self.offset_weight.data, 1, self.geometry.dilation,
                                        self.offset_padding)
        self.offset_weight.accumulate(dow)
        self.offset_bias.accumulate(dob)
        return dx + dx2


class BatchNorm(Layer):
    def __init__(self, name, channels):
        self.name = name
        self.channels = channels
        self.scale = Tensor(np.ones(channels), f"{name}.scale", {"decay": False, "offset": False})
        self.shift = Tensor(np.zeros(channels), f"{name}.shift", {"decay": False, "offset": False})

    def parameters(self):
        return [self.scale, self.shift]

    def norm_layers(self):
        return [self]

    def forward(self, x, ctx):
        if self.name not in ctx.stats:
            raise KeyError(f"no statistics for norm layer {self.name!r}")
        return batch_normalize(x, ctx.stats[self.name], self.scale.data, self.shift.data,
                               ctx.mode, ctx.momentum)

    def backward(self, dy, cache):
        dx, ds, dt = batch_normalize_backward(dy, cache)
        self.scale.accumulate(ds)
        self.shift.accumulate(dt)
        return dx


class ReLU(Layer):
    def forward(self, x, ctx):
        return relu(x), x

    def backward(self, dy, x):
        return relu_backward(dy, x)


class Chain(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def norm_layers(self):
        return [n for layer in self.layers for n in layer.norm_layers()]

    def forward(self, x, ctx):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, ctx)
            caches.append(c)
        return x, caches

    def backward(self, dy, caches):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(dy, c)
        return dy


class Downsampler(Chain):
    """Stride-2 3x3 convolution, norm, activation."""

    def __init__(self, name, cin, cout, rng):
        super().__init__([Conv(f"{name}.conv", cin, cout, 3, 3, rng, stride=2, padding=1),
                          BatchNorm(f"{name}.bn", cout), ReLU()])
        self.out_channels = cout


class NonBottleneck1D(Layer):
    """Residual block of two factorized (3x1, 1x3) pairs, norm after every conv.

    The second pair is dilated. Deformable variants replace the first pair.
    """

    def __init__(self, name, channels, dilation, variant, rng):
        if variant not in BLOCK_VARIANTS:
            raise ValueError(f"unknown block variant {variant!r}; expected one of {BLOCK_VARIANTS}")
        self.variant = variant

        def first(tag, kh, kw):
            if variant == REGULAR:
                return Conv(f"{name}.{tag}", channels, channels, kh, kw, rng)
            return DeformConv(f"{name}.{tag}", variant, channels, channels, kh, kw, rng)

        self.body = Chain([
            first("conv3x1_1", 3, 1), BatchNorm(f"{name}.bn1", channels), ReLU(),
            first("conv1x3_1", 1, 3), BatchNorm(f"{name}.bn2", channels), ReLU(),
            Conv(f"{name}.conv3x1_2", channels, channels, 3, 1, rng, dilation=dilation),
            BatchNorm(f"{name}.bn3", channels), ReLU(),
            Conv(f"{name}.conv1x3_2", channels, channels, 1, 3, rng, dilation=dilation),
            BatchNorm(f"{name}.bn4", channels),
        ])

    def parameters(self):
        return self.body.parameters()

    def norm_layers(self):
        return self.body.norm_layers()

    def deform_layers(self) -> List[DeformConv]:
        return [l for l in self.body.layers if isinstance(l, DeformConv)]

    def forward(self, x, ctx):
        h, caches = self.body.forward(x, ctx)
        s = h + x
        return relu(s), (caches, s)

    def backward(self, dy, cache):
        caches, s = cache
        ds = relu_backward(dy, s)
        return self.body.backward(ds, caches) + ds


class Upsample(Layer):
    """Non-overlapping transposed convolution (kernel = stride = factor)."""

    def __init__(self, name, cin, cout, factor, rng):
        self.factor = factor
        limit = np.sqrt(6.0 / ((cin + cout) * factor * factor))
        self.weight = Tensor(rng.uniform(-limit, limit, (cin, cout, factor, factor)), f"{name}.weight",
                             {"decay": True, "offset": False})
        self.bias = Tensor(np.zeros(cout), f"{name}.bias", {"decay": False, "offset": False})

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, ctx):
        n, _, h, w = x.shape
        f = self.factor
        y = np.einsum("nchw,coab->nohawb", x, self.weight.data, optimize=True)
        y = y.reshape(n, -1, h * f, w * f) + self.bias.data[None, :, None, None]
        return y, x

    def backward(self, dy, x):
        n, _, h, w = x.shape
        f = self.factor
        d = dy.reshape(n, dy.shape[1], h, f, w, f)
        self.weight.accumulate(np.einsum("nchw,nohawb->coab", x, d, optimize=True))
        self.bias.accumulate(dy.sum(axis=(0, 2, 3)))
        return np.einsum("nohawb,coab->nchw", d, self.weight.data, optimize=True)


# ---------------------------------------------------------------------------
# toy network
# ---------------------------------------------------------------------------

@dataclass
class ToyNetConfig:
    """``blocks`` holds ``("down", out_channels)`` or ``("nb", variant, dilation)`` entries."""

    blocks: List[Tuple] = field(default_factory=list)
    in_channels: int = 3
    num_classes: int = 4
    domains: Tuple[int, ...] = (0,)
    aux_channels: int = 128
    seed: int = 0

    def validate(self):
        seen_down = False
        for blk in self.blocks:
            if blk[0] == "down":
                if int(blk[1]) < 1:
                    raise ValueError(f"downsampler needs positive channels, got {blk[1]}")
                seen_down = True
            elif blk[0] == "nb":
                if blk[1] not in BLOCK_VARIANTS:
                    raise ValueError(f"unknown block variant {blk[1]!r}; expected one of {BLOCK_VARIANTS}")
                if blk[1] != REGULAR and not seen_down:
                    raise ValueError(f"{blk[1]} block placed before any downsampler; deformable variants "
                                     "belong in the deeper blocks")
                if int(blk[2]) < 1:
                    raise ValueError(f"dilation must be positive, got {blk[2]}")
            else:
                raise ValueError(f"unknown block kind {blk[0]!r}")
        if len(set(self.domains)) != len(self.domains) or not self.domains:
            raise ValueError(f"domains must be distinct and nonempty, got {self.domains}")

    def blocks_string(self) -> str:
        return ",".join(":".join(str(v) for v in blk) for blk in self.blocks)

    @staticmethod
    def parse_blocks(text: str) -> List[Tuple]:
        blocks = []
        for item in filter(None, (t.strip() for t in text.split(","))):
            parts = item.split(":")
            if parts[0] == "down" and len(parts) == 2:
                blocks.append(("down", int(parts[1])))
            elif parts[0] == "nb" and len(parts) == 3:
                variant = parts[1] if parts[1] == REGULAR else parts[1].upper()
                blocks.append(("nb", variant, int(parts[2])))
            else:
                raise ValueError(f"cannot parse block {item!r}; use down:C or nb:VARIANT:DILATION")
        return blocks


class ToyNet:
    """Shared encoder + auxiliary trunk, with unshared per-domain classifiers."""

    def __init__(self, config: ToyNetConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        enc = []
        ch = config.in_channels
        factor = 1
        for i, blk in enumerate(config.blocks):
            if blk[0] == "down":
                enc.append(Downsampler(f"enc{i}", ch, int(blk[1]), rng))
                ch = int(blk[1])
                factor *= 2
            else:
                enc.append(NonBottleneck1D(f"enc{i}", ch, int(blk[2]), blk[1], rng))
        self.encoder = Chain(enc)
        self.factor = factor
        self.encoder_channels = ch
        self.aux_trunk = Chain([Conv("aux.conv", ch, config.aux_channels, 1, 1, rng),
                                    BatchNorm("aux.bn", config.aux_channels), ReLU()])
        self.heads, self.aux_heads = {}, {}
        # interleaved so a domain's heads do not depend on how many domains follow it
        for d in config.domains:
            self.heads[d] = Upsample(f"head{d}", ch, config.num_classes, factor, rng)
            self.aux_heads[d] = Upsample(f"auxhead{d}", config.aux_channels, config.num_classes, factor, rng)

    def parameters(self) -> List[Tensor]:
        ps = self.encoder.parameters() + self.aux_trunk.parameters()
        for d in self.config.domains:
            ps += self.heads[d].parameters() + self.aux_heads[d].parameters()
        return ps

    def named_parameters(self) -> Dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def norm_layers(self) -> List[BatchNorm]:
        return self.encoder.norm_layers() + self.aux_trunk.norm_layers()

    def deform_layers(self) -> List[DeformConv]:
        out = []
        for layer in self.encoder.layers:
            if isinstance(layer, NonBottleneck1D):
                out += layer.deform_layers()
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x, domain, ctx: Context):
        if domain not in self.heads:
            raise KeyError(f"network has no classifier for domain {domain!r}")
        if x.shape[2] % self.factor or x.shape[3] % self.factor:
            raise ValueError(f"input extents {x.shape[2:]} must be divisible by {self.factor}")
        feat, c_enc = self.encoder.forward(x, ctx)
        logits, c_head = self.heads[domain].forward(feat, ctx)
        a, c_aux = self.aux_trunk.forward(feat, ctx)
        aux_logits, c_auxhead = self.aux_heads[domain].forward(a, ctx)
        return logits, aux_logits, (domain, c_enc, c_head, c_aux, c_auxhead)

    def backward(self, cache, dlogits=None, daux=None):
        domain, c_enc, c_head, c_aux, c_auxhead = cache
        dfeat = 0.0
        if dlogits is not None:
            dfeat = dfeat + self.heads[domain].backward(dlogits, c_head)
        if daux is not None:
            da = self.aux_heads[domain].backward(daux, c_auxhead)
            dfeat = dfeat + self.aux_trunk.backward(da, c_aux)
        if isinstance(dfeat, float):
            return None
        return self.encoder.backward(dfeat, c_enc)
