"""The concatenation-augmented encoder-decoder network.

Symmetric ladder: each encoder level runs two same-padded convolutions with
ReLU and then halves the resolution with max-pooling; the pre-pool activation
is kept as the level's skip feature. The bottleneck is one conv+ReLU. Each
decoder level doubles the resolution with nearest upsampling, concatenates
the spatially matching encoder skip onto the channel axis, and applies one
conv+ReLU followed by dropout (training only). A linear 1x1 convolution maps
the last decoder features to the output, which has the input's shape.
"""

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .rng import Rng

CHECKPOINT_MAGIC = b"CATU"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed (bad magic, version, or truncated)."""


@dataclass
class CatUNetConfig:
    input_channels: int = 1
    input_size: int = 256
    depth: int = 3
    base_channels: int = 16
    channel_growth: int = 2
    kernel_size: int = 3
    dropout_rate: float = 0.5
    output_channels: Optional[int] = None

    def __post_init__(self):
        if self.output_channels is None:
            self.output_channels = self.input_channels
        self.validate()

    def validate(self):
        problems = []
        if self.depth < 1:
            problems.append(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            problems.append(f"base_channels must be >= 1, got {self.base_channels}")
        if self.channel_growth < 1:
            problems.append(f"channel_growth must be >= 1, got {self.channel_growth}")
        if self.input_channels < 1:
            problems.append(f"input_channels must be >= 1, got {self.input_channels}")
        if self.output_channels < 1:
            problems.append(f"output_channels must be >= 1, got {self.output_channels}")
        if self.input_size < 1 or self.input_size % (2 ** self.depth) != 0:
            problems.append(
                f"input_size must be a positive multiple of 2^depth={2 ** self.depth}, got {self.input_size}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            problems.append(f"kernel_size must be odd (same padding), got {self.kernel_size}")
        if not 0 <= self.dropout_rate < 1:
            problems.append(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))

    def encoder_channels(self) -> List[int]:
        """Channel ladder of the encoder levels (pre-pool features)."""
        return [self.base_channels * self.channel_growth ** i for i in range(self.depth)]

    def bottleneck_channels(self) -> int:
        return self.base_channels * self.channel_growth ** self.depth

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "CatUNetConfig":
        return cls(**json.loads(text))


def parameter_count(config: CatUNetConfig) -> int:
    """Closed-form parameter total for a config (weights plus biases)."""
    k2 = config.kernel_size ** 2
    enc = config.encoder_channels()
    total = 0
    prev = config.input_channels
    for c in enc:
        total += c * prev * k2 + c      # conv1
        total += c * c * k2 + c         # conv2
        prev = c
    cb = config.bottleneck_channels()
    total += cb * enc[-1] * k2 + cb
    up = cb
    for c in reversed(enc):
        total += c * (up + c) * k2 + c  # decoder conv after concat
        up = c
    total += config.output_channels * enc[0] * 1 + config.output_channels
    return total


@dataclass
class CatUNetModel:
    config: CatUNetConfig
    parameters: Dict[str, T.Tensor]
    wiring: List[dict] = field(default_factory=list)

    def zero_grad(self):
        for p in self.parameters.values():
            p.zero_grad()

    def _conv(self, name: str, x: T.Tensor, padding: int) -> T.Tensor:
        return T.conv2d(x, self.parameters[f"{name}_w"], self.parameters[f"{name}_b"],
                        stride=1, padding=padding)

    def forward(self, batch: T.Tensor, training: bool = False,
                dropout_rng: Optional[np.random.Generator] = None,
                return_features: bool = False):
        """Run the network; output spatial shape equals the input's.

        `training=True` activates decoder dropout and requires `dropout_rng`
        (unless the configured rate is 0). With `return_features=True` the
        per-level concatenated decoder features are returned alongside the
        output.
        """
        cfg = self.config
        n, c, h, w = batch.shape if batch.data.ndim == 4 else (None,) * 4
        if n is None:
            raise T.ShapeError(f"forward: expected a 4-d batch, got {batch.data.ndim}-d")
        if c != cfg.input_channels or h != cfg.input_size or w != cfg.input_size:
            raise T.ShapeError(
                f"forward: batch is {c}x{h}x{w}, model expects "
                f"{cfg.input_channels}x{cfg.input_size}x{cfg.input_size}")
        use_dropout = training and cfg.dropout_rate > 0
        if use_dropout and dropout_rng is None:
            raise ValueError("forward: training mode with dropout needs a dropout_rng")

        pad = cfg.kernel_size // 2
        x = batch
        skips: List[T.Tensor] = []
        for i in range(cfg.depth):
            x = T.relu(self._conv(f"enc{i}_conv1", x, pad))
            x = T.relu(self._conv(f"enc{i}_conv2", x, pad))
            skips.append(x)
            x, _ = T.maxpool2d(x, 2, 2)
        x = T.relu(self._conv("bottleneck", x, pad))

        features: List[T.Tensor] = []
        for k in range(1, cfg.depth + 1):
            x = T.upsample_nearest(x, 2)
            partner = skips[cfg.depth - k]
            if x.shape[2:] != partner.shape[2:]:
                raise T.ShapeError(
                    f"decoder level {k}: upsampled map {x.shape[2]}x{x.shape[3]} does not "
                    f"match encoder partner {partner.shape[2]}x{partner.shape[3]}")
            x = T.concat_channels(x, partner)
            features.append(x)
            x = T.relu(self._conv(f"dec{k}", x, pad))
            if use_dropout:
                x = T.dropout(x, cfg.dropout_rate, True, dropout_rng)
        out = self._conv("out", x, 0)
        if return_features:
            return out, features
        return out


def _he_conv(gen: np.random.Generator, cout: int, cin: int, k: int):
    """Fan-in scaled normal weights, zero bias."""
    fan_in = cin * k * k
    std = np.sqrt(2.0 / fan_in)
    w = (gen.standard_normal((cout, cin, k, k)) * std).astype(np.float32)
    b = np.zeros(cout, dtype=np.float32)
    return w, b


def build(config: CatUNetConfig, rng: Rng) -> CatUNetModel:
    """Initialize parameters and derive the block wiring from the config."""
    config.validate()
    gen = rng.stream("init")
    k = config.kernel_size
    params: Dict[str, T.Tensor] = {}

    def add_conv(name: str, cout: int, cin: int, ksz: int):
        w, b = _he_conv(gen, cout, cin, ksz)
        params[f"{name}_w"] = T.Tensor(w, requires_grad=True, name=f"{name}_w")
        params[f"{name}_b"] = T.Tensor(b, requires_grad=True, name=f"{name}_b")

    wiring: List[dict] = []
    enc = config.encoder_channels()
    size = config.input_size
    prev = config.input_channels
    for i, c in enumerate(enc):
        add_conv(f"enc{i}_conv1", c, prev, k)
        add_conv(f"enc{i}_conv2", c, c, k)
        wiring.append({"block": f"enc{i}", "in_channels": prev, "out_channels": c,
                       "skip_size": size, "pooled_size": size // 2})
        prev = c
        size //= 2
    cb = config.bottleneck_channels()
    add_conv("bottleneck", cb, prev, k)
    wiring.append({"block": "bottleneck", "in_channels": prev, "out_channels": cb, "size": size})
    up = cb
    for kk in range(1, config.depth + 1):
        partner = enc[config.depth - kk]
        size *= 2
        partner_size = config.input_size // 2 ** (config.depth - kk)
        # concatenation precondition: upsampled decoder map and encoder
        # partner must sit at the same resolution
        if size != partner_size:
            raise ValueError(
                f"decoder level {kk}: upsampled size {size} != partner size {partner_size}")
        wiring.append({"block": f"dec{kk}", "upsampled_channels": up, "partner_channels": partner,
                       "concat_channels": up + partner, "out_channels": partner, "size": size})
        add_conv(f"dec{kk}", partner, up + partner, k)
        up = partner
    add_conv("out", config.output_channels, enc[0], 1)
    wiring.append({"block": "out", "in_channels": enc[0],
                   "out_channels": config.output_channels, "size": size})
    return CatUNetModel(config=config, parameters=params, wiring=wiring)


def feature_norm(model: CatUNetModel, batch: T.Tensor) -> List[float]:
    """L2 norm of the concatenated feature map at each decoder level."""
    with T.no_grad():
        _, feats = model.forward(batch, training=False, return_features=True)
    return [float(np.sqrt((f.data.astype(np.float64) ** 2).sum())) for f in feats]


def save_checkpoint(model: CatUNetModel, path: str):
    """Versioned binary snapshot; parameters stored as raw little-endian f32."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = model.config.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.parameters)))
    for name, p in model.parameters.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", p.data.ndim))
        for d in p.data.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path: str) -> CatUNetModel:
    with open(path, "rb") as f:
        raw = f.read()
    view = io.BytesIO(raw)

    def take(n: int, what: str) -> bytes:
        chunk = view.read(n)
        if len(chunk) != n:
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic bytes in {path}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        config = CatUNetConfig.from_json(take(cfg_len, "config").decode("utf-8"))
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"bad config block: {e}") from e
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    model = build(config, Rng(0))
    if count != len(model.parameters):
        raise CheckpointError(
            f"checkpoint holds {count} parameters, config implies {len(model.parameters)}")
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n_vals = int(np.prod(dims)) if rank else 1
        vals = np.frombuffer(take(4 * n_vals, f"values of {name}"), dtype="<f4").reshape(dims)
        if name not in model.parameters:
            raise CheckpointError(f"unexpected parameter {name!r} in checkpoint")
        if model.parameters[name].data.shape != vals.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {vals.shape}, config implies "
                f"{model.parameters[name].data.shape}")
        model.parameters[name].data = vals.astype(np.float32)
    if view.read(1):
        raise CheckpointError("trailing bytes after last parameter")
    return model
