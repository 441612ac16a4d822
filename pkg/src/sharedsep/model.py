"""Shared encoder and per-source decoders for magnitude spectrogram separation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .errors import InvalidInputError
from .tensor import (
    Tensor,
    batch_norm,
    concat_channels,
    conv2d,
    leaky_relu,
    nn_upsample2x,
    relu,
)

SOURCES = ("vocals", "drums", "bass", "other")
LEAKY_SLOPE = 0.1


@dataclass(frozen=True)
class WidthProfile:
    """Feature-map counts of a network.

    ``encoder_stage_channels`` lists the input convolution followed by one
    entry per downsampling stage. ``decoder_stage_channels`` lists one entry
    per upsampling stage followed by the width of the final convolution.
    """

    name: str
    encoder_stage_channels: tuple[int, ...]
    decoder_stage_channels: tuple[int, ...]

    def __post_init__(self):
        enc, dec = self.encoder_stage_channels, self.decoder_stage_channels
        if len(enc) < 2:
            raise InvalidInputError("a profile needs an input convolution and at least one stage")
        if len(dec) != len(enc):
            raise InvalidInputError(
                f"profile {self.name!r}: {len(enc) - 1} encoder stages need {len(enc)} decoder widths, got {len(dec)}"
            )
        if min(enc + dec) < 1:
            raise InvalidInputError(f"profile {self.name!r}: all channel counts must be >= 1")

    @property
    def n_stages(self) -> int:
        return len(self.encoder_stage_channels) - 1

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "encoder_stage_channels": list(self.encoder_stage_channels),
            "decoder_stage_channels": list(self.decoder_stage_channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WidthProfile":
        return cls(d["name"], tuple(d["encoder_stage_channels"]), tuple(d["decoder_stage_channels"]))


PROFILES = {
    "base": WidthProfile("base", (16, 16, 32, 64, 128, 256), (128, 64, 32, 16, 16, 16)),
    "encoder+": WidthProfile("encoder+", (32, 32, 32, 64, 128, 256), (128, 64, 32, 16, 16, 16)),
    "desk": WidthProfile("desk", (4, 4, 8, 16, 32, 64), (32, 16, 8, 4, 4, 4)),
}

DEFAULT_IO_SHAPES = {
    "base": (2, 128, 1025),
    "encoder+": (2, 128, 1025),
    "desk": (2, 32, 129),
}


def get_profile(name: str) -> WidthProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise InvalidInputError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


class Conv2d:
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, *, rng, dtype=np.float32, trainable=True):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.kernel = (kh, kw)
        self.stride = (stride, stride) if isinstance(stride, int) else tuple(stride)
        self.padding = (padding, padding) if isinstance(padding, int) else tuple(padding)
        fan_in = in_ch * kh * kw
        gain = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2))
        bound = gain * math.sqrt(3.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, kh, kw)).astype(dtype)
        self.weight = Tensor(w, requires_grad=trainable)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=trainable)

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise InvalidInputError(f"expected {self.in_channels} input channels, got {c}")
        return (
            self.out_channels,
            _conv_out(h, self.kernel[0], self.stride[0], self.padding[0]),
            _conv_out(w, self.kernel[1], self.stride[1], self.padding[1]),
        )

    def describe(self) -> str:
        (kh, kw), (sh, _), (ph, _) = self.kernel, self.stride, self.padding
        return f"k({kh}x{kw}), s{sh}, p{ph}"

    def named_tensors(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def named_buffers(self):
        return iter(())


class BatchNorm2d:
    def __init__(self, channels, *, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum, self.eps = momentum, eps
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )

    def named_tensors(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var


class ConvBlock:
    """Convolution, batch normalization and LeakyReLU."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, *, rng, dtype, layer_type="Conv"):
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, padding, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)
        self.layer_type = layer_type

    def __call__(self, x):
        return leaky_relu(self.bn(self.conv(x)), LEAKY_SLOPE)

    def output_shape(self, shape):
        return self.conv.output_shape(shape)

    def describe(self):
        return self.conv.describe()

    def modules(self):
        yield "conv", self.conv
        yield "bn", self.bn


class _Module:
    """Name-addressable container of layers with parameters and buffers."""

    def modules(self) -> Iterable[tuple[str, object]]:
        raise NotImplementedError

    def named_tensors(self):
        for prefix, mod in self.modules():
            subs = mod.modules() if hasattr(mod, "modules") else [("", mod)]
            for sub_name, sub in subs:
                stem = f"{prefix}.{sub_name}" if sub_name else prefix
                for name, t in sub.named_tensors():
                    yield f"{stem}.{name}", t

    def named_buffers(self):
        for prefix, mod in self.modules():
            subs = mod.modules() if hasattr(mod, "modules") else [("", mod)]
            for sub_name, sub in subs:
                stem = f"{prefix}.{sub_name}" if sub_name else prefix
                for name, b in sub.named_buffers():
                    yield f"{stem}.{name}", b

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def set_training(self, flag: bool):
        for _, mod in self.modules():
            subs = mod.modules() if hasattr(mod, "modules") else [("", mod)]
            for _, sub in subs:
                if isinstance(sub, BatchNorm2d):
                    sub.training = flag


class Encoder(_Module):
    def __init__(self, profile: WidthProfile, in_channels: int, *, rng, dtype=np.float32):
        self.profile = profile
        enc = profile.encoder_stage_channels
        self.input_conv = ConvBlock(in_channels, enc[0], (5, 6), 1, 2, rng=rng, dtype=dtype)
        self.stages = []
        for s in range(1, len(enc)):
            down = ConvBlock(enc[s - 1], enc[s], 4, 2, 1, rng=rng, dtype=dtype, layer_type="Downsample")
            conv = ConvBlock(enc[s], enc[s], 3, 1, 1, rng=rng, dtype=dtype)
            self.stages.append((down, conv))

    def modules(self):
        yield "input", self.input_conv
        for i, (down, conv) in enumerate(self.stages, start=1):
            yield f"down{i}", down
            yield f"conv{i}", conv

    def __call__(self, x: Tensor, trace: Callable | None = None) -> list[Tensor]:
        """Return the feature pyramid, highest resolution first; the last entry is the bottleneck."""
        h = self.input_conv(x)
        if trace:
            trace("input", h)
        pyramid = [h]
        for i, (down, conv) in enumerate(self.stages, start=1):
            h = down(h)
            if trace:
                trace(f"down{i}", h)
            h = conv(h)
            if trace:
                trace(f"conv{i}", h)
            pyramid.append(h)
        return pyramid

    def layer_rows(self, in_shape):
        rows = [("Input", "-", tuple(in_shape))]
        shape = self.input_conv.output_shape(in_shape)
        rows.append(("Conv", self.input_conv.describe(), shape))
        pyramid = [shape]
        for down, conv in self.stages:
            shape = down.output_shape(shape)
            rows.append(("Downsample", down.describe(), shape))
            shape = conv.output_shape(shape)
            rows.append(("Conv", conv.describe(), shape))
            pyramid.append(shape)
        return rows, pyramid


class Decoder(_Module):
    def __init__(self, source_id: str, profile: WidthProfile, out_channels: int, *, rng,
                 dtype=np.float32, fm_avg: str = "fixed", encoder_channels=None):
        self.source_id = source_id
        enc = tuple(encoder_channels or profile.encoder_stage_channels)
        dec = profile.decoder_stage_channels
        n = profile.n_stages
        self.ups = []
        in_ch = enc[n]
        for r in range(1, n + 1):
            self.ups.append(ConvBlock(in_ch, dec[r - 1], 3, 1, 1, rng=rng, dtype=dtype))
            in_ch = dec[r - 1] + enc[n - r]
        self.final = ConvBlock(in_ch, dec[n], (3, 2), 1, 1, rng=rng, dtype=dtype)
        self.fm_avg = fm_avg
        if fm_avg == "fixed":
            if dec[n] % out_channels:
                raise InvalidInputError(
                    f"final width {dec[n]} is not divisible into {out_channels} averaging groups"
                )
            group = dec[n] // out_channels
            w = np.zeros((out_channels, dec[n], 1, 1), dtype=dtype)
            for c in range(out_channels):
                w[c, c * group:(c + 1) * group] = 1.0 / group
            self.head = Conv2d(dec[n], out_channels, 1, rng=rng, dtype=dtype, trainable=False)
            self.head.weight.data[...] = w
        elif fm_avg == "learned":
            self.head = Conv2d(dec[n], out_channels, 1, rng=rng, dtype=dtype)
        else:
            raise InvalidInputError(f"fm_avg must be 'fixed' or 'learned', got {fm_avg!r}")

    def modules(self):
        for i, block in enumerate(self.ups, start=1):
            yield f"up{i}", block
        yield "final", self.final
        yield "head", self.head

    def __call__(self, pyramid: list[Tensor], trace: Callable | None = None) -> Tensor:
        n = len(self.ups)
        h = pyramid[-1]
        for r, block in enumerate(self.ups, start=1):
            h = nn_upsample2x(h)
            if trace:
                trace(f"interp{r}", h)
            h = block(h)
            if trace:
                trace(f"upconv{r}", h)
            h = concat_channels(h, pyramid[n - r])
            if trace:
                trace(f"concat{r}", h)
        h = self.final(h)
        if trace:
            trace("final", h)
        out = relu(self.head(h))
        if trace:
            trace("fm_avg", out)
        return out

    def layer_rows(self, pyramid_shapes):
        n = len(self.ups)
        rows = []
        shape = pyramid_shapes[-1]
        for r, block in enumerate(self.ups, start=1):
            shape = (shape[0], shape[1] * 2, shape[2] * 2)
            rows.append(("Interpolation", "NN", shape))
            shape = block.output_shape(shape)
            rows.append(("Conv", block.describe(), shape))
            skip = pyramid_shapes[n - r]
            if skip[1:] != shape[1:]:
                raise InvalidInputError(f"skip connection at stage {r}: {skip} cannot join {shape}")
            shape = (shape[0] + skip[0], *shape[1:])
            rows.append(("Concatenate", "-", shape))
        shape = self.final.output_shape(shape)
        rows.append(("Conv", self.final.describe(), shape))
        shape = self.head.output_shape(shape)
        rows.append(("FM Avg.", self.head.describe(), shape))
        return rows


def _check_io_shape(profile: WidthProfile, io_shape):
    if len(io_shape) != 3:
        raise InvalidInputError(f"io_shape must be (C, L, K), got {io_shape}")
    c, frames, bins = io_shape
    factor = 2 ** profile.n_stages
    if c < 1:
        raise InvalidInputError("io_shape needs at least one channel")
    if frames % factor:
        raise InvalidInputError(f"frames axis: L={frames} is not divisible by 2^{profile.n_stages}={factor}")
    if (bins - 1) % factor or bins < factor + 1:
        raise InvalidInputError(
            f"bins axis: K-1={bins - 1} is not divisible by 2^{profile.n_stages}={factor}"
        )


class SharedModel(_Module):
    """One encoder feeding an independent decoder per source."""

    def __init__(self, profile: WidthProfile, io_shape=(2, 128, 1025), sources=SOURCES, *,
                 fm_avg="fixed", seed=0, dtype=np.float32):
        _check_io_shape(profile, io_shape)
        self.profile = profile
        self.io_shape = tuple(io_shape)
        self.sources = tuple(sources)
        self.fm_avg = fm_avg
        self.dtype = np.dtype(dtype)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(profile, io_shape[0], rng=rng, dtype=dtype)
        self.decoders = {
            s: Decoder(s, profile, io_shape[0], rng=rng, dtype=dtype, fm_avg=fm_avg) for s in self.sources
        }

    def modules(self):
        for name, mod in self.encoder.modules():
            yield f"encoder.{name}", mod
        for s, dec in self.decoders.items():
            for name, mod in dec.modules():
                yield f"decoders.{s}.{name}", mod

    def encoder_parameters(self):
        return self.encoder.parameters()

    def decoder_parameters(self, source):
        return self._decoder(source).parameters()

    def _decoder(self, source):
        try:
            return self.decoders[source]
        except KeyError:
            raise InvalidInputError(f"unknown source {source!r}; model has {self.sources}") from None

    def train(self):
        self.set_training(True)
        return self

    def eval(self):
        self.set_training(False)
        return self

    def _prepare(self, mixture) -> Tensor:
        x = mixture if isinstance(mixture, Tensor) else Tensor(np.asarray(mixture, dtype=self.dtype))
        if x.data.ndim == 3:
            x = Tensor(x.data[None])
        if x.data.ndim != 4 or tuple(x.shape[1:]) != self.io_shape:
            raise InvalidInputError(f"expected input (N, {', '.join(map(str, self.io_shape))}), got {x.shape}")
        return x

    def forward(self, mixture, sources=None, trace=None) -> dict[str, Tensor]:
        x = self._prepare(mixture)
        pyramid = self.encoder(x, trace)
        out = {}
        for s in sources or self.sources:
            dec = self._decoder(s)
            sub = (lambda name, t, s=s: trace(f"{s}.{name}", t)) if trace else None
            out[s] = dec(pyramid, sub)
        return out

    __call__ = forward

    def forward_single(self, mixture, source_id) -> Tensor:
        self._decoder(source_id)
        return self.forward(mixture, (source_id,))[source_id]

    def layer_table(self, source=None):
        """Rows of (block, layer type, parameters, array size) for one decoder."""
        enc_rows, pyramid = self.encoder.layer_rows(self.io_shape)
        dec = self._decoder(source or self.sources[0])
        return [("E", *r) for r in enc_rows] + [("D", *r) for r in dec.layer_rows(pyramid)]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.named_tensors()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        from .checkpoint import assign_state
        assign_state(self, state)

    def meta(self) -> dict:
        return {
            "kind": "shared",
            "profile": self.profile.to_dict(),
            "io_shape": list(self.io_shape),
            "sources": list(self.sources),
            "fm_avg": self.fm_avg,
            "dtype": self.dtype.str,
        }


class IndependentNetworks(_Module):
    """A separate full encoder-decoder network per source, sharing nothing."""

    def __init__(self, profile: WidthProfile, io_shape=(2, 128, 1025), sources=SOURCES, *,
                 fm_avg="fixed", seed=0, dtype=np.float32):
        self.profile = profile
        self.io_shape = tuple(io_shape)
        self.sources = tuple(sources)
        self.fm_avg = fm_avg
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.networks = {
            s: SharedModel(profile, io_shape, (s,), fm_avg=fm_avg, seed=seed * 1009 + i + 1, dtype=dtype)
            for i, s in enumerate(self.sources)
        }

    def modules(self):
        for s, net in self.networks.items():
            for name, mod in net.modules():
                yield f"networks.{s}.{name}", mod

    def train(self):
        self.set_training(True)
        return self

    def eval(self):
        self.set_training(False)
        return self

    def forward(self, mixture, sources=None, trace=None):
        return {s: self.networks[s].forward_single(mixture, s) for s in sources or self.sources}

    __call__ = forward

    def forward_single(self, mixture, source_id):
        if source_id not in self.networks:
            raise InvalidInputError(f"unknown source {source_id!r}")
        return self.networks[source_id].forward_single(mixture, source_id)

    def layer_table(self, source=None):
        return self.networks[source or self.sources[0]].layer_table()

    def state_dict(self):
        state = {name: t.data for name, t in self.named_tensors()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state):
        from .checkpoint import assign_state
        assign_state(self, state)

    def meta(self):
        d = SharedModel.meta(self)
        d["kind"] = "independent"
        return d


def build_shared_model(profile: WidthProfile | str, io_shape=None, **kwargs) -> SharedModel:
    if isinstance(profile, str):
        io_shape = io_shape or DEFAULT_IO_SHAPES.get(profile)
        profile = get_profile(profile)
    if io_shape is None:
        raise InvalidInputError("io_shape is required for a custom profile")
    return SharedModel(profile, io_shape, **kwargs)


def build_independent_networks(profile: WidthProfile | str, io_shape=None, **kwargs) -> IndependentNetworks:
    if isinstance(profile, str):
        io_shape = io_shape or DEFAULT_IO_SHAPES.get(profile)
        profile = get_profile(profile)
    _check_io_shape(profile, io_shape)
    return IndependentNetworks(profile, io_shape, **kwargs)


def param_count(module) -> int:
    """Number of trainable scalars; batch-norm running statistics are not counted."""
    if hasattr(module, "parameters"):
        params = module.parameters()
    else:
        params = [t for _, t in module.named_tensors() if t.requires_grad]
    return int(sum(p.data.size for p in params))


def format_layer_table(rows) -> str:
    lines = [f"{'':2} {'Layer Type':<14} {'Parameters':<16} Array Size"]
    for block, kind, params, shape in rows:
        lines.append(f"{block:<2} {kind:<14} {params:<16} ({', '.join(map(str, shape))})")
    return "\n".join(lines)
