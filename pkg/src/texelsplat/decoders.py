"""Motion-aware convolutional decoders and the tensor machinery behind them.

A minimal NCHW-free (single frame, CHW) conv framework with explicit
reverse-mode gradients: 3x3 convolutions (stride 1 or 2), leaky rectifier,
nearest-neighbor upsampling, channel concatenation, and dense layers. On top
of it: a U-Net translating position/normal textures into raw Gaussian
parameter maps, and a small MLP turning the root translation into a global
appearance feature vector.

Weight layout conventions: conv weights are (out_ch, in_ch, k, k); dense
weights are (out_dim, in_dim). All math is float64; checkpoints are float32.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .core_math import InvalidInputError

__all__ = [
    "ConvNetSpec",
    "UNet",
    "GlobalFeatureMLP",
    "positional_encoding",
    "write_weights",
    "read_weights",
    "GEO_OUT_CHANNELS",
    "APP_OUT_CHANNELS",
]

WEIGHTS_MAGIC = b"ASHW"
WEIGHTS_VERSION = 1

GEO_OUT_CHANNELS = 11  # 3 offset + 3 scale + 4 rotation + 1 opacity
APP_OUT_CHANNELS = 48
LEAKY_SLOPE = 0.2


def _fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# layers


class Conv2d:
    """3x3 same-padding convolution; stride 2 halves the spatial size."""

    def __init__(self, in_ch, out_ch, stride=1, ksize=3, rng=None, zero_init=False):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.stride = stride
        self.ksize = ksize
        self.pad = ksize // 2
        fan_in = in_ch * ksize * ksize
        if zero_init:
            self.weight = np.zeros((out_ch, in_ch, ksize, ksize))
            self.bias = np.zeros(out_ch)
        else:
            self.weight = _fan_in_uniform(rng, (out_ch, in_ch, ksize, ksize), fan_in)
            # nonzero bias keeps pre-activations off the rectifier kink in the
            # all-zero texture regions outside the UV coverage mask
            self.bias = _fan_in_uniform(rng, (out_ch,), fan_in)
        self.g_weight = np.zeros_like(self.weight)
        self.g_bias = np.zeros_like(self.bias)
        self._cache = None

    def _im2col(self, x):
        c, h, w = x.shape
        k, s, p = self.ksize, self.stride, self.pad
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        xp = np.pad(x, ((0, 0), (p, p), (p, p)))
        cols = np.empty((c, k, k, ho, wo))
        for ki in range(k):
            for kj in range(k):
                cols[:, ki, kj] = xp[:, ki : ki + s * ho : s, kj : kj + s * wo : s]
        return cols.reshape(c * k * k, ho * wo), ho, wo

    def forward(self, x):
        cols, ho, wo = self._im2col(x)
        wmat = self.weight.reshape(self.out_ch, -1)
        y = wmat @ cols + self.bias[:, None]
        self._cache = (x.shape, cols)
        return y.reshape(self.out_ch, ho, wo)

    def backward(self, gy):
        (xshape, cols) = self._cache
        c, h, w = xshape
        k, s, p = self.ksize, self.stride, self.pad
        ho, wo = gy.shape[1], gy.shape[2]
        gy_mat = gy.reshape(self.out_ch, -1)
        self.g_weight += (gy_mat @ cols.T).reshape(self.weight.shape)
        self.g_bias += gy_mat.sum(axis=1)
        gcols = (self.weight.reshape(self.out_ch, -1).T @ gy_mat).reshape(c, k, k, ho, wo)
        gxp = np.zeros((c, h + 2 * p, w + 2 * p))
        for ki in range(k):
            for kj in range(k):
                gxp[:, ki : ki + s * ho : s, kj : kj + s * wo : s] += gcols[:, ki, kj]
        return gxp[:, p : p + h, p : p + w]

    def params(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def grads(self, prefix):
        return {f"{prefix}.weight": self.g_weight, f"{prefix}.bias": self.g_bias}


class LeakyReLU:
    def __init__(self, slope=LEAKY_SLOPE):
        self.slope = slope
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, gy):
        return np.where(self._mask, gy, self.slope * gy)


class Upsample2x:
    def forward(self, x):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, gy):
        c, h, w = gy.shape
        return gy.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


class Dense:
    def __init__(self, in_dim, out_dim, rng=None, zero_init=False):
        if zero_init:
            self.weight = np.zeros((out_dim, in_dim))
            self.bias = np.zeros(out_dim)
        else:
            self.weight = _fan_in_uniform(rng, (out_dim, in_dim), in_dim)
            self.bias = _fan_in_uniform(rng, (out_dim,), in_dim)
        self.g_weight = np.zeros_like(self.weight)
        self.g_bias = np.zeros_like(self.bias)
        self._x = None

    def forward(self, x):
        self._x = x
        return self.weight @ x + self.bias

    def backward(self, gy):
        self.g_weight += np.outer(gy, self._x)
        self.g_bias += gy
        return self.weight.T @ gy

    def params(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def grads(self, prefix):
        return {f"{prefix}.weight": self.g_weight, f"{prefix}.bias": self.g_bias}


# ---------------------------------------------------------------------------
# U-Net


@dataclass(frozen=True)
class ConvNetSpec:
    """U-Net shape: L encoder/decoder levels with skip connections.

    Channel count at level l is base_channels * multipliers[l]; multipliers
    defaults to powers of two. ``bottleneck_extra`` input channels are
    concatenated at the bottleneck (the appearance decoder's global feature).
    """

    levels: int = 3
    base_channels: int = 16
    in_channels: int = 6
    out_channels: int = GEO_OUT_CHANNELS
    multipliers: tuple = None
    bottleneck_extra: int = 0

    def __post_init__(self):
        if self.multipliers is None:
            object.__setattr__(self, "multipliers", tuple(2**i for i in range(self.levels + 1)))
        if len(self.multipliers) != self.levels + 1:
            raise InvalidInputError("need one channel multiplier per level, plus the bottleneck")

    def channels(self, level):
        return self.base_channels * self.multipliers[level]

    def validate_resolution(self, resolution):
        if resolution % (2**self.levels) != 0:
            raise InvalidInputError(
                f"input size {resolution} is not divisible by 2^{self.levels}"
            )

    def receptive_field_radius(self) -> int:
        """Radius (input texels) outside which one input cannot affect an output."""
        radius, jump = 0, 1
        radius += jump  # stem 3x3
        for _ in range(self.levels):
            radius += jump  # strided conv reads a 3x3 window at the current jump
            jump *= 2
            radius += jump  # level conv
        radius += jump  # bottleneck conv
        for _ in range(self.levels):
            jump //= 2
            radius += 2 * jump  # two decoder convs per level
        radius += jump  # head conv
        return radius

    @classmethod
    def desk(cls, in_channels=6, out_channels=GEO_OUT_CHANNELS, bottleneck_extra=0):
        return cls(levels=3, base_channels=16, in_channels=in_channels,
                   out_channels=out_channels, bottleneck_extra=bottleneck_extra)

    @classmethod
    def production(cls, in_channels=6, out_channels=GEO_OUT_CHANNELS, bottleneck_extra=0):
        return cls(levels=5, base_channels=32, in_channels=in_channels,
                   out_channels=out_channels, bottleneck_extra=bottleneck_extra)


class UNet:
    """Encoder-decoder with skips; output spatial size equals the input's.

    Topology per level: stride-2 conv down, one conv per encoder level,
    nearest-neighbor upsample + conv + skip-concat + conv on the way up.
    The output head is zero-initialized so an untrained net predicts zero raw
    maps (the template surface after activations).
    """

    def __init__(self, spec: ConvNetSpec, rng=None):
        rng = rng or np.random.default_rng(0)
        self.spec = spec
        ch = [spec.channels(i) for i in range(spec.levels + 1)]
        self.stem = Conv2d(spec.in_channels, ch[0], rng=rng)
        self.stem_act = LeakyReLU()
        self.downs, self.enc_convs = [], []
        for l in range(1, spec.levels + 1):
            self.downs.append(Conv2d(ch[l - 1], ch[l], stride=2, rng=rng))
            self.enc_convs.append(Conv2d(ch[l], ch[l], rng=rng))
        self.bottleneck = Conv2d(ch[-1] + spec.bottleneck_extra, ch[-1], rng=rng)
        self.ups, self.dec_convs1, self.dec_convs2 = [], [], []
        for l in range(spec.levels, 0, -1):
            self.ups.append(Upsample2x())
            self.dec_convs1.append(Conv2d(ch[l], ch[l - 1], rng=rng))
            self.dec_convs2.append(Conv2d(2 * ch[l - 1], ch[l - 1], rng=rng))
        self.head = Conv2d(ch[0], spec.out_channels, zero_init=True)
        self._acts = []

    def _conv_layers(self):
        yield "stem", self.stem
        for i, (d, e) in enumerate(zip(self.downs, self.enc_convs)):
            yield f"down{i}", d
            yield f"enc{i}", e
        yield "bottleneck", self.bottleneck
        for i, (c1, c2) in enumerate(zip(self.dec_convs1, self.dec_convs2)):
            yield f"dec{i}a", c1
            yield f"dec{i}b", c2
        yield "head", self.head

    def parameters(self) -> OrderedDict:
        out = OrderedDict()
        for name, layer in self._conv_layers():
            out.update(layer.params(name))
        return out

    def gradients(self) -> OrderedDict:
        out = OrderedDict()
        for name, layer in self._conv_layers():
            out.update(layer.grads(name))
        return out

    def zero_grad(self):
        for _, layer in self._conv_layers():
            layer.g_weight[:] = 0.0
            layer.g_bias[:] = 0.0

    def load_state(self, state: dict):
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise InvalidInputError(f"checkpoint is missing tensors: {sorted(missing)[:4]}")
        for name, arr in params.items():
            incoming = np.asarray(state[name], dtype=np.float64)
            if incoming.shape != arr.shape:
                raise InvalidInputError(
                    f"tensor {name} has shape {incoming.shape}, expected {arr.shape}"
                )
            arr[:] = incoming

    def forward(self, x, global_feature=None):
        """x: (in_channels, R, R); returns (out_channels, R, R)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.spec.in_channels:
            raise InvalidInputError(
                f"expected {self.spec.in_channels} input channels, got {x.shape[0]}"
            )
        self.spec.validate_resolution(x.shape[1])
        acts = {}
        h = self.stem_act.forward(self.stem.forward(x))
        skips = [h]
        enc_acts = []
        for down, conv in zip(self.downs, self.enc_convs):
            a1 = LeakyReLU()
            a2 = LeakyReLU()
            h = a1.forward(down.forward(h))
            h = a2.forward(conv.forward(h))
            enc_acts.append((a1, a2))
            skips.append(h)
        skips.pop()  # bottleneck input is not its own skip

        if self.spec.bottleneck_extra:
            if global_feature is None:
                raise InvalidInputError("this decoder requires a global feature vector")
            gf = np.asarray(global_feature, dtype=np.float64)
            if gf.shape != (self.spec.bottleneck_extra,):
                raise InvalidInputError(
                    f"global feature must have {self.spec.bottleneck_extra} entries"
                )
            gf_map = np.broadcast_to(gf[:, None, None], (len(gf),) + h.shape[1:])
            h = np.concatenate([h, gf_map], axis=0)
        bott_act = LeakyReLU()
        h = bott_act.forward(self.bottleneck.forward(h))

        dec_acts = []
        for up, c1, c2, skip in zip(self.ups, self.dec_convs1, self.dec_convs2, reversed(skips)):
            a1 = LeakyReLU()
            a2 = LeakyReLU()
            h = a1.forward(c1.forward(up.forward(h)))
            h = np.concatenate([h, skip], axis=0)
            h = a2.forward(c2.forward(h))
            dec_acts.append((a1, a2))
        out = self.head.forward(h)
        self._acts = {"enc": enc_acts, "bott": bott_act, "dec": dec_acts}
        return out

    def backward(self, g_out):
        """Returns (g_input, g_global_feature or None); accumulates weight grads."""
        acts = self._acts
        levels = self.spec.levels
        g = self.head.backward(np.asarray(g_out, dtype=np.float64))
        # forward decoder step i consumed skips[levels - 1 - i]
        g_skip = [None] * levels
        for step in range(levels - 1, -1, -1):
            a1, a2 = acts["dec"][step]
            g = self.dec_convs2[step].backward(a2.backward(g))
            half = g.shape[0] // 2
            g, gs = g[:half], g[half:]
            g_skip[levels - 1 - step] = gs
            g = self.ups[step].backward(self.dec_convs1[step].backward(a1.backward(g)))
        g = acts["bott"].backward(g)
        g = self.bottleneck.backward(g)
        g_gf = None
        if self.spec.bottleneck_extra:
            split = g.shape[0] - self.spec.bottleneck_extra
            g, g_gf_map = g[:split], g[split:]
            g_gf = g_gf_map.sum(axis=(1, 2))
        # encoder levels deepest-first; the deepest output feeds only the bottleneck
        for l in range(levels, 0, -1):
            if l < levels:
                g = g + g_skip[l]
            a1, a2 = acts["enc"][l - 1]
            g = self.downs[l - 1].backward(
                a1.backward(self.enc_convs[l - 1].backward(a2.backward(g)))
            )
        g = g + g_skip[0]
        g = self.stem.backward(self.stem_act.backward(g))
        return g, g_gf


# ---------------------------------------------------------------------------
# global feature MLP

PE_FREQUENCIES = 4


def positional_encoding(p, freqs=PE_FREQUENCIES):
    """(x, y, z, sin(2^k p), cos(2^k p) for k < freqs), length 3 + 6*freqs."""
    p = np.asarray(p, dtype=np.float64)
    parts = [p]
    for k in range(freqs):
        parts.append(np.sin(2.0**k * p))
        parts.append(np.cos(2.0**k * p))
    return np.concatenate(parts)


def positional_encoding_backward(p, g_enc, freqs=PE_FREQUENCIES):
    p = np.asarray(p, dtype=np.float64)
    g = g_enc[:3].copy()
    for k in range(freqs):
        f = 2.0**k
        s = g_enc[3 + 6 * k : 6 + 6 * k]
        c = g_enc[6 + 6 * k : 9 + 6 * k]
        g += s * f * np.cos(f * p) - c * f * np.sin(f * p)
    return g


class GlobalFeatureMLP:
    """Root translation -> 16-dim appearance feature via a 3-layer MLP."""

    WIDTH = 32
    OUT_DIM = 16

    def __init__(self, rng=None, freqs=PE_FREQUENCIES):
        rng = rng or np.random.default_rng(0)
        self.freqs = freqs
        in_dim = 3 + 6 * freqs
        self.layers = [
            Dense(in_dim, self.WIDTH, rng=rng),
            Dense(self.WIDTH, self.WIDTH, rng=rng),
            Dense(self.WIDTH, self.OUT_DIM, rng=rng),
        ]
        self.acts = [LeakyReLU(), LeakyReLU()]
        self._p = None

    def parameter_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def parameters(self) -> OrderedDict:
        out = OrderedDict()
        for i, l in enumerate(self.layers):
            out.update(l.params(f"mlp{i}"))
        return out

    def gradients(self) -> OrderedDict:
        out = OrderedDict()
        for i, l in enumerate(self.layers):
            out.update(l.grads(f"mlp{i}"))
        return out

    def zero_grad(self):
        for l in self.layers:
            l.g_weight[:] = 0.0
            l.g_bias[:] = 0.0

    def load_state(self, state: dict):
        for name, arr in self.parameters().items():
            if name not in state:
                raise InvalidInputError(f"checkpoint is missing tensor {name}")
            arr[:] = np.asarray(state[name], dtype=np.float64).reshape(arr.shape)

    def forward(self, root_translation):
        self._p = np.asarray(root_translation, dtype=np.float64)
        h = positional_encoding(self._p, self.freqs)
        h = self.acts[0].forward(self.layers[0].forward(h))
        h = self.acts[1].forward(self.layers[1].forward(h))
        return self.layers[2].forward(h)

    def backward(self, g_out):
        g = self.layers[2].backward(np.asarray(g_out, dtype=np.float64))
        g = self.layers[1].backward(self.acts[1].backward(g))
        g = self.layers[0].backward(self.acts[0].backward(g))
        return positional_encoding_backward(self._p, g, self.freqs)


# ---------------------------------------------------------------------------
# checkpoint container


def write_weights(path, tensors: dict) -> None:
    """ASHW container: name-prefixed float32 tensors with shapes."""
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", WEIGHTS_VERSION, len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            arr = np.asarray(arr)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_weights(path) -> OrderedDict:
    out = OrderedDict()
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != WEIGHTS_MAGIC:
            raise InvalidInputError(f"bad weights magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != WEIGHTS_VERSION:
            raise InvalidInputError(
                f"unsupported weights version {version}, this build reads version {WEIGHTS_VERSION}"
            )
        for _ in range(count):
            raw = fh.read(2)
            if len(raw) != 2:
                raise InvalidInputError("truncated weights file")
            (name_len,) = struct.unpack("<H", raw)
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            payload = fh.read(4 * n)
            if len(payload) != 4 * n:
                raise InvalidInputError("truncated weights file")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    return out
