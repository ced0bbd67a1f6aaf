"""Multi-encoder segmentation network and its building blocks.

Four independent encoders (one per imaging modality) downsample with
stride-2 convolutions and residual dilated blocks; per-level correlated
representations are fused (attention / mean / max) and decoded with
deep supervision into class probabilities. Optional reconstruction
decoders regress each input modality from the fused bottleneck.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import CheckpointError, ConfigurationError, PreconditionError
from .fusion import (AttentionFusion, CorrelationModel, NUM_MODALITIES,
                     _he, _zeros, fuse)

CHECKPOINT_MAGIC = "corrseg-checkpoint"
CHECKPOINT_VERSION = 1

FUSION_MODES = ("attention", "mean", "max")


@dataclass
class NetworkConfig:
    """Structural hyperparameters of the segmentation network."""

    levels: int = 3
    base_filters: int = 4
    num_modalities: int = NUM_MODALITIES
    num_classes: int = 4
    dilation_rates: tuple[int, int] = (2, 4)
    lambda_rec: float = 1.0
    fusion_mode: str = "attention"
    cm_enabled: bool = True
    rec_decoders_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigurationError(f"levels must be >= 2, got {self.levels}")
        if self.base_filters < 2:
            raise ConfigurationError(
                f"base_filters must be >= 2, got {self.base_filters}")
        if self.lambda_rec < 0:
            raise ConfigurationError(
                f"lambda_rec must be >= 0, got {self.lambda_rec}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(
                f"fusion_mode must be one of {FUSION_MODES}, "
                f"got {self.fusion_mode!r}")
        if self.num_modalities != NUM_MODALITIES:
            raise ConfigurationError("the network is built for 4 modalities")
        self.dilation_rates = tuple(self.dilation_rates)

    def channels_at(self, level: int) -> int:
        return self.base_filters * (2 ** level)

    @property
    def filter_sequence(self) -> list[int]:
        return [self.channels_at(l) for l in range(self.levels)]

    @classmethod
    def paper_preset(cls, **overrides) -> "NetworkConfig":
        """Full-size preset: six levels, filters 8 through 256."""
        args = dict(levels=6, base_filters=8)
        args.update(overrides)
        return cls(**args)

    @classmethod
    def desk_preset(cls, **overrides) -> "NetworkConfig":
        """CPU-friendly preset used by the toy experiments."""
        args = dict(levels=3, base_filters=4)
        args.update(overrides)
        return cls(**args)


class _Registry:
    """Ordered name -> parameter tensor map built during construction."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name {name}")
        self.params[name] = tensor
        return tensor

    def extend(self, prefix: str, items) -> None:
        for suffix, tensor in items:
            self.add(f"{prefix}.{suffix}", tensor)


class Conv3dLayer:
    """Learned 3D convolution with same-padding for stride 1."""

    def __init__(self, cin: int, cout: int, rng, dtype, k: int = 3,
                 stride: int = 1, dilation: int = 1, gain: float = 1.0):
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k - 1) // 2
        fan_in = cin * k ** 3
        self.w = _he(rng, (cout, cin, k, k, k), fan_in, dtype, gain)
        self.b = _zeros(cout, dtype)

    def parameters(self):
        return [("w", self.w), ("b", self.b)]

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv3d(x, self.w, self.b, stride=self.stride,
                         dilation=self.dilation, padding=self.padding)


class ConvBlock:
    """3x3x3 convolution followed by leaky ReLU; stride 2 downsamples."""

    def __init__(self, cin: int, cout: int, rng, dtype, stride: int = 1):
        self.conv = Conv3dLayer(cin, cout, rng, dtype, stride=stride)

    def parameters(self):
        return self.conv.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return ag.leaky_relu(self.conv(x))


class ResDilBlock:
    """Residual block whose inner path dilates its two convolutions.

    Extent- and channel-preserving: y = x + g(x). Zeroing the inner
    weights makes the block an exact identity. The second convolution
    starts deliberately weak so stacked blocks keep the activation
    scale near the identity path's (there is no normalization layer
    to rein it in otherwise).
    """

    def __init__(self, channels: int, rng, dtype, rates=(2, 4)):
        self.conv_a = Conv3dLayer(channels, channels, rng, dtype,
                                  dilation=rates[0])
        self.conv_b = Conv3dLayer(channels, channels, rng, dtype,
                                  dilation=rates[1], gain=0.25)

    def parameters(self):
        return ([(f"c1.{s}", t) for s, t in self.conv_a.parameters()]
                + [(f"c2.{s}", t) for s, t in self.conv_b.parameters()])

    def __call__(self, x: Tensor) -> Tensor:
        h = ag.leaky_relu(self.conv_a(x))
        h = ag.leaky_relu(self.conv_b(h))
        return ag.add(x, h)


class Encoder:
    """Single-modality feature pyramid: one (conv block, res-dil) pair
    per level, with stride-2 transitions between levels."""

    def __init__(self, config: NetworkConfig, rng, dtype):
        self.stages = []
        cin = 1
        for level in range(config.levels):
            cout = config.channels_at(level)
            stride = 1 if level == 0 else 2
            conv = ConvBlock(cin, cout, rng, dtype, stride=stride)
            res = ResDilBlock(cout, rng, dtype, config.dilation_rates)
            self.stages.append((conv, res))
            cin = cout

    def parameters(self):
        for level, (conv, res) in enumerate(self.stages):
            for s, t in conv.parameters():
                yield f"l{level}.conv.{s}", t
            for s, t in res.parameters():
                yield f"l{level}.res.{s}", t

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for conv, res in self.stages:
            h = res(conv(h))
            feats.append(h)
        return feats


class Decoder:
    """Upsampling path with per-level fusion, deep supervision heads."""

    def __init__(self, config: NetworkConfig, rng, dtype):
        self.config = config
        self.up = {}
        self.merge = {}
        self.res = {}
        self.head = {}
        for level in range(config.levels - 2, -1, -1):
            c = config.channels_at(level)
            self.up[level] = Conv3dLayer(2 * c, c, rng, dtype)
            self.merge[level] = ConvBlock(2 * c, c, rng, dtype)
            self.res[level] = ResDilBlock(c, rng, dtype,
                                          config.dilation_rates)
            # weak head init keeps the initial softmax soft; saturated
            # logits kill the gradient of the minority classes
            self.head[level] = Conv3dLayer(c, config.num_classes, rng,
                                           dtype, k=1, gain=0.05)

    def parameters(self):
        for level in range(self.config.levels - 2, -1, -1):
            for tag, layer in (("up", self.up[level]),
                               ("merge", self.merge[level]),
                               ("res", self.res[level]),
                               ("head", self.head[level])):
                for s, t in layer.parameters():
                    yield f"l{level}.{tag}.{s}", t


class ReconstructionDecoder:
    """Skip-free upsampling stack regressing one modality volume."""

    def __init__(self, config: NetworkConfig, rng, dtype):
        self.blocks = []
        for level in range(config.levels - 2, -1, -1):
            cin = config.channels_at(level + 1)
            cout = config.channels_at(level)
            self.blocks.append(ConvBlock(cin, cout, rng, dtype))
        self.out = Conv3dLayer(config.base_filters, 1, rng, dtype, k=1)

    def parameters(self):
        for i, blk in enumerate(self.blocks):
            for s, t in blk.parameters():
                yield f"b{i}.{s}", t
        for s, t in self.out.parameters():
            yield f"out.{s}", t

    def __call__(self, z: Tensor) -> Tensor:
        h = z
        for blk in self.blocks:
            h = blk(ag.upsample_nn(h))
        return self.out(h)


@dataclass
class ForwardResult:
    probs: Tensor
    logits: Tensor
    head_logits: list[Tensor]          # per decoder level, full extent
    bottleneck: Tensor                 # fused representation z
    reconstructions: list[Tensor] = field(default_factory=list)


class CorrSegNet:
    """The full multi-encoder correlation segmentation network."""

    def __init__(self, config: NetworkConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.Generator(np.random.PCG64(config.seed))
        reg = _Registry()

        self.encoders = []
        for m in range(config.num_modalities):
            enc = Encoder(config, rng, dtype)
            reg.extend(f"enc{m}", enc.parameters())
            self.encoders.append(enc)

        self.cms: dict[int, CorrelationModel] = {}
        if config.cm_enabled:
            for level in range(config.levels):
                cm = CorrelationModel(config.channels_at(level), rng, dtype)
                reg.extend(f"cm.l{level}", cm.parameters())
                self.cms[level] = cm

        self.fusions: dict[int, AttentionFusion] = {}
        if config.fusion_mode == "attention":
            for level in range(config.levels):
                n = 4 if level == config.levels - 1 else 5
                blk = AttentionFusion(n, config.channels_at(level), rng, dtype)
                reg.extend(f"fuse.l{level}", blk.parameters())
                self.fusions[level] = blk

        self.decoder = Decoder(config, rng, dtype)
        reg.extend("dec", self.decoder.parameters())

        self.rec_decoders = []
        if config.rec_decoders_enabled:
            for m in range(config.num_modalities):
                dec = ReconstructionDecoder(config, rng, dtype)
                reg.extend(f"rec{m}", dec.parameters())
                self.rec_decoders.append(dec)

        self.params = reg.params

    # -- plumbing -------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def check_input(self, shape) -> None:
        div = 2 ** (self.config.levels - 1)
        if any(s % div for s in shape):
            raise ConfigurationError(
                f"spatial extents {tuple(shape)} must be divisible by {div} "
                f"for {self.config.levels} levels")
        if min(shape) // div < 2:
            # a 1-voxel bottleneck leaves the dilated residual path
            # looking at padding only
            raise ConfigurationError(
                f"bottleneck extent {tuple(s // div for s in shape)} too "
                f"small for dilation {self.config.dilation_rates[-1]} blocks")

    def _fuse_level(self, level: int, reps: list[Tensor]) -> Tensor:
        return fuse(reps, self.config.fusion_mode,
                    self.fusions.get(level))

    # -- forward ----------------------------------------------------------
    def forward(self, inputs: list[Tensor],
                with_reconstruction: bool | None = None) -> ForwardResult:
        """Run the network on four [1,1,D,H,W] modality tensors."""
        if len(inputs) != self.config.num_modalities:
            raise PreconditionError(
                f"expected {self.config.num_modalities} inputs, "
                f"got {len(inputs)}")
        self.check_input(inputs[0].shape[2:])
        cfg = self.config
        feats = [enc(x) for enc, x in zip(self.encoders, inputs)]

        def reps_at(level: int) -> list[Tensor]:
            per_level = [feats[m][level] for m in range(cfg.num_modalities)]
            if cfg.cm_enabled:
                return self.cms[level](per_level)
            return per_level

        bottom = cfg.levels - 1
        z = self._fuse_level(bottom, reps_at(bottom))

        head_logits = []
        d = z
        for level in range(cfg.levels - 2, -1, -1):
            u = self.decoder.up[level](ag.upsample_nn(d))
            fused = self._fuse_level(level, reps_at(level) + [u])
            d = self.decoder.res[level](
                self.decoder.merge[level](ag.concat([u, fused], axis=1)))
            head = self.decoder.head[level](d)
            for _ in range(level):
                head = ag.upsample_nn(head)
            head_logits.append(head)

        logits = head_logits[0]
        for h in head_logits[1:]:
            logits = ag.add(logits, h)
        probs = ag.softmax_channel(logits)

        if with_reconstruction is None:
            with_reconstruction = cfg.rec_decoders_enabled
        recons = []
        if with_reconstruction and self.rec_decoders:
            recons = [dec(z) for dec in self.rec_decoders]
        return ForwardResult(probs=probs, logits=logits,
                             head_logits=head_logits, bottleneck=z,
                             reconstructions=recons)

    __call__ = forward


# ---------------------------------------------------------------------------
# checkpoint serialization

_CONFIG_KEYS = [f.name for f in fields(NetworkConfig)]


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_config(pairs: dict[str, str]) -> NetworkConfig:
    kwargs = {}
    for f in fields(NetworkConfig):
        raw = pairs.get(f.name)
        if raw is None:
            raise CheckpointError(f"missing config key {f.name}")
        if f.name == "dilation_rates":
            kwargs[f.name] = tuple(int(x) for x in raw.split(","))
        elif f.type == "bool" or isinstance(f.default, bool):
            kwargs[f.name] = raw == "true"
        elif isinstance(f.default, int):
            kwargs[f.name] = int(raw)
        elif isinstance(f.default, float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return NetworkConfig(**kwargs)


def save_checkpoint(path, net: CorrSegNet,
                    extras: dict[str, str] | None = None) -> None:
    """Write the network config and all parameters to ``path``.

    Layout: a UTF-8 text header (one ``key=value`` per line) closed by
    ``@tensors <count>``, then per tensor one descriptor line
    ``<name> <dim,dim,...> <byte-length>`` followed by that many raw
    little-endian float32 bytes and a newline.
    """
    buf = io.BytesIO()
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}"]
    for key in _CONFIG_KEYS:
        lines.append(f"{key}={_format_value(getattr(net.config, key))}")
    for key, value in (extras or {}).items():
        if key in _CONFIG_KEYS or " " in key or "=" in key:
            raise CheckpointError(f"invalid extra key {key!r}")
        lines.append(f"x.{key}={value}")
    lines.append(f"@tensors {len(net.params)}")
    buf.write(("\n".join(lines) + "\n").encode("utf-8"))
    for name, tensor in net.params.items():
        payload = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        shape = ",".join(str(s) for s in tensor.shape) or "0"
        buf.write(f"{name} {shape} {len(payload)}\n".encode("utf-8"))
        buf.write(payload)
        buf.write(b"\n")
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_line(fh) -> str:
    raw = fh.readline()
    if not raw.endswith(b"\n"):
        raise CheckpointError("unexpected end of checkpoint header")
    return raw[:-1].decode("utf-8")


def load_checkpoint(path, dtype=np.float32) -> tuple[CorrSegNet, dict]:
    """Rebuild a network from a checkpoint; returns (net, extras)."""
    with open(path, "rb") as fh:
        magic = _read_line(fh)
        if magic != f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}":
            raise CheckpointError(f"unrecognized checkpoint header {magic!r}")
        pairs: dict[str, str] = {}
        extras: dict[str, str] = {}
        while True:
            line = _read_line(fh)
            if line.startswith("@tensors "):
                count = int(line.split(" ", 1)[1])
                break
            key, _, value = line.partition("=")
            if key.startswith("x."):
                extras[key[2:]] = value
            else:
                pairs[key] = value
        net = CorrSegNet(_parse_config(pairs), dtype=dtype)
        names = list(net.params)
        if count != len(names):
            raise CheckpointError(
                f"checkpoint holds {count} tensors, network needs {len(names)}")
        for name in names:
            desc = _read_line(fh).split(" ")
            if len(desc) != 3 or desc[0] != name:
                raise CheckpointError(
                    f"tensor descriptor mismatch: expected {name}, "
                    f"got {desc[0] if desc else '<none>'}")
            shape = tuple(int(x) for x in desc[1].split(",") if x != "0")
            nbytes = int(desc[2])
            target = net.params[name]
            if shape != target.shape or nbytes != 4 * target.size:
                raise CheckpointError(
                    f"tensor {name} has shape {shape}, expected {target.shape}")
            payload = fh.read(nbytes)
            if len(payload) != nbytes:
                raise CheckpointError(f"truncated payload for tensor {name}")
            fh.read(1)
            target.data = np.frombuffer(payload, dtype="<f4").reshape(
                target.shape).astype(dtype)
    return net, extras
