"""3D residual classifier built from bottleneck blocks.

``ModelConfig.micro()`` is the desk-scale default (one block per stage,
24^3 inputs). ``ModelConfig.resnet50()`` gives the [3, 4, 6, 3] layout with
a 7^3 stem and stride-2 max pooling.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .tensor import (
    DEFAULT_DTYPE,
    BatchNormState,
    Tensor,
    add,
    batch_norm3d,
    conv3d,
    conv_output_shape,
    global_avg_pool3d,
    linear,
    max_pool3d,
    relu,
)

CHECKPOINT_MAGIC = b"MCKP"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """An invalid model or experiment configuration."""


@dataclass
class ModelConfig:
    stage_blocks: Tuple[int, int, int, int] = (1, 1, 1, 1)
    stem_channels: int = 8
    stage_channels: Tuple[int, int, int, int] = (8, 16, 32, 64)
    bottleneck_expansion: int = 4
    num_classes: int = 3
    input_shape: Tuple[int, int, int, int] = (1, 24, 24, 24)
    stem_kernel: int = 3
    stem_pool: bool = False
    name: str = "medconv-micro"

    def __post_init__(self):
        self.stage_blocks = tuple(int(b) for b in self.stage_blocks)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.input_shape = tuple(int(s) for s in self.input_shape)

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def resnet50(cls, num_classes: int = 3, input_shape=(1, 64, 64, 64)) -> "ModelConfig":
        return cls(
            stage_blocks=(3, 4, 6, 3),
            stem_channels=64,
            stage_channels=(64, 128, 256, 512),
            num_classes=num_classes,
            input_shape=tuple(input_shape),
            stem_kernel=7,
            stem_pool=True,
            name="medconv-r50",
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("stage_blocks", "stage_channels", "input_shape"):
            d[k] = list(d[k])
        return d

    def validate(self) -> None:
        if len(self.stage_blocks) != 4 or len(self.stage_channels) != 4:
            raise ConfigError("stage_blocks and stage_channels need exactly 4 entries")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        positives = {
            "stage_blocks": self.stage_blocks,
            "stage_channels": self.stage_channels,
            "stem_channels": (self.stem_channels,),
            "bottleneck_expansion": (self.bottleneck_expansion,),
            "stem_kernel": (self.stem_kernel,),
        }
        for name, values in positives.items():
            if any(v < 1 for v in values):
                raise ConfigError(f"{name} must be positive, got {values}")
        if len(self.input_shape) != 4 or any(v < 1 for v in self.input_shape):
            raise ConfigError(f"input_shape must be 4 positive extents (C, D, H, W), got {self.input_shape}")
        self.stage_extents()

    def stage_extents(self) -> List[Tuple[int, int, int]]:
        """Spatial extents after the stem and after each stage.

        Every stride-2 layer needs an extent of at least 2 on each axis;
        halving a single voxel would leave nothing to downsample.
        """
        spatial = self.input_shape[1:]

        def down(extent, where, kernel, pad):
            if min(extent) < 2:
                raise ConfigError(f"{where} would downsample spatial extent {extent} to 0")
            return conv_output_shape(extent, kernel, 2, pad)

        spatial = down(spatial, "stem", self.stem_kernel, self.stem_kernel // 2)
        if self.stem_pool:
            spatial = down(spatial, "stem pooling", 3, 1)
        extents = [spatial]
        for stage in range(4):
            if stage > 0:
                spatial = down(spatial, f"stage {stage + 1}", 3, 1)
            extents.append(spatial)
        return extents

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True, dtype=dtype)


class Conv3d:
    def __init__(self, cin: int, cout: int, kernel: int, stride: int, rng, dtype):
        self.stride = stride
        self.pad = kernel // 2
        self.weight = _he_normal(rng, (cout, cin, kernel, kernel, kernel), cin * kernel ** 3, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, None, self.stride, self.pad)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight


class BatchNorm3d:
    def __init__(self, channels: int, dtype):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.state = BatchNormState.fresh(channels, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm3d(x, self.gamma, self.beta, self.state, training=training)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.state, "running_mean"
        yield f"{prefix}.running_var", self.state, "running_var"


class Bottleneck:
    """1x1 reduce, 3x3 (strided), 1x1 expand, plus identity or projection skip."""

    def __init__(self, cin: int, width: int, expansion: int, stride: int, rng, dtype):
        cout = width * expansion
        self.conv1 = Conv3d(cin, width, 1, 1, rng, dtype)
        self.bn1 = BatchNorm3d(width, dtype)
        self.conv2 = Conv3d(width, width, 3, stride, rng, dtype)
        self.bn2 = BatchNorm3d(width, dtype)
        self.conv3 = Conv3d(width, cout, 1, 1, rng, dtype)
        self.bn3 = BatchNorm3d(cout, dtype)
        self.shortcut: Optional[Tuple[Conv3d, BatchNorm3d]] = None
        if stride != 1 or cin != cout:
            self.shortcut = (Conv3d(cin, cout, 1, stride, rng, dtype), BatchNorm3d(cout, dtype))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = relu(self.bn1(self.conv1(x), training))
        h = relu(self.bn2(self.conv2(h), training))
        h = self.bn3(self.conv3(h), training)
        skip = x
        if self.shortcut is not None:
            conv, bn = self.shortcut
            skip = bn(conv(x), training)
        return relu(add(h, skip))

    def _children(self):
        yield "conv1", self.conv1
        yield "bn1", self.bn1
        yield "conv2", self.conv2
        yield "bn2", self.bn2
        yield "conv3", self.conv3
        yield "bn3", self.bn3
        if self.shortcut is not None:
            yield "shortcut.conv", self.shortcut[0]
            yield "shortcut.bn", self.shortcut[1]


@dataclass
class Network:
    config: ModelConfig
    stem_conv: Conv3d
    stem_bn: BatchNorm3d
    stages: List[List[Bottleneck]]
    head_weight: Tensor
    head_bias: Tensor
    dtype: np.dtype = field(default=np.dtype(DEFAULT_DTYPE))

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return forward(self, x, training)

    def _layers(self):
        yield "stem.conv", self.stem_conv
        yield "stem.bn", self.stem_bn
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                for name, layer in block._children():
                    yield f"stage{s + 1}.block{b}.{name}", layer

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for prefix, layer in self._layers():
            yield from layer.named_parameters(prefix)
        yield "head.weight", self.head_weight
        yield "head.bias", self.head_bias

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for prefix, layer in self._layers():
            if isinstance(layer, BatchNorm3d):
                yield from layer.named_buffers(prefix)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Parameters and running statistics keyed by stable name."""
        out = {name: p.data for name, p in self.named_parameters()}
        for name, state, attr in self.named_buffers():
            out[name] = getattr(state, attr)
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.data = np.array(arrays[name], dtype=self.dtype).reshape(p.shape)
        for name, state, attr in self.named_buffers():
            cur = getattr(state, attr)
            setattr(state, attr, np.array(arrays[name], dtype=cur.dtype).reshape(cur.shape))


def build_model(config: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> Network:
    """Construct a freshly initialized network.

    Conv and linear weights are He-normal from a generator seeded with
    ``seed``; norm layers start at gamma=1, beta=0 and the head bias at 0.
    """
    config.validate()
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    cin = config.input_shape[0]
    stem_conv = Conv3d(cin, config.stem_channels, config.stem_kernel, 2, rng, dtype)
    stem_bn = BatchNorm3d(config.stem_channels, dtype)
    stages = []
    channels = config.stem_channels
    for s, (nblocks, width) in enumerate(zip(config.stage_blocks, config.stage_channels)):
        blocks = []
        for b in range(nblocks):
            stride = 2 if (s > 0 and b == 0) else 1
            blocks.append(Bottleneck(channels, width, config.bottleneck_expansion, stride, rng, dtype))
            channels = width * config.bottleneck_expansion
        stages.append(blocks)
    head_weight = _he_normal(rng, (config.num_classes, channels), channels, dtype)
    head_bias = Tensor(np.zeros(config.num_classes), requires_grad=True, dtype=dtype)
    return Network(config, stem_conv, stem_bn, stages, head_weight, head_bias, dtype)


def forward(net: Network, batch: Tensor, training: bool = False) -> Tensor:
    """Logits of shape (N, num_classes) for a (N, C, D, H, W) batch."""
    expected = tuple(net.config.input_shape)
    if batch.ndim != 5 or tuple(batch.shape[1:]) != expected:
        raise ValueError(f"batch shape {batch.shape} does not match (N, {', '.join(map(str, expected))})")
    if batch.dtype != net.dtype:
        batch = Tensor(batch.data, dtype=net.dtype)
    h = relu(net.stem_bn(net.stem_conv(batch), training))
    if net.config.stem_pool:
        h = max_pool3d(h, 3, 2, 1)
    for blocks in net.stages:
        for block in blocks:
            h = block(h, training)
    return linear(global_avg_pool3d(h), net.head_weight, net.head_bias)


def count_params(net) -> int:
    """Number of trainable scalars (running statistics excluded)."""
    if hasattr(net, "parameters"):
        return int(sum(p.size for p in net.parameters()))
    return int(sum(p.size for p in net))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(net: Network, path, extra: Optional[dict] = None) -> None:
    """Write ``MCKP`` | u32 version | u32 header length | JSON header | f32 payload."""
    arrays = net.state_arrays()
    table = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    header = {"config": net.config.to_dict(), "tensors": table}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + 4 * count
        if end > len(raw):
            raise ValueError(f"{path}: truncated payload at tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return header, arrays


def load_checkpoint(path, dtype=DEFAULT_DTYPE) -> Tuple[Network, dict]:
    header, arrays = read_checkpoint(path)
    config = ModelConfig.from_dict(header["config"])
    net = build_model(config, seed=0, dtype=dtype)
    net.load_state_arrays(arrays)
    return net, header
