"""Network assembly, forward/backward prediction and checkpoint persistence.

The architecture is seven stride-2 5x5 convolutions (each followed by batch
norm and ReLU) that produce a flattened embedding, late-fused with the two
time offsets and the mix vector, then a three-layer fully connected head
with leaky ReLU (slope 0.2) between layers and no activation after the last
layer, which emits the three normalized regression outputs.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .exceptions import (CheckpointError, CheckpointMagicError, CheckpointShapeError,
                         CheckpointTruncatedError, ConfigurationError, InputError)

CHECKPOINT_MAGIC = b"RHC1"
CHECKPOINT_VERSION = 1

N_CONV_LAYERS = 7
N_FC_LAYERS = 3
N_OUTPUTS = 3


def default_fc_sizes(input_width: int) -> tuple[int, int, int]:
    """Layer widths decreasing linearly from the fused-feature width to 3."""
    step = (input_width - N_OUTPUTS) / N_FC_LAYERS
    return tuple(int(round(input_width - step * i)) for i in range(1, N_FC_LAYERS + 1))


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (512, 512)
    in_channels: int = 4
    conv_channels: tuple[int, ...] = (8, 16, 32, 32, 40, 40, 40)
    embedding_len: int = 640
    delta_t_dim: int = 2
    mix_dim: int = 18
    fc_sizes: tuple[int, ...] = (441, 222, 3)
    leaky_slope: float = 0.2

    @property
    def fused_width(self) -> int:
        return self.embedding_len + self.delta_t_dim + self.mix_dim

    def conv_output_size(self) -> tuple[int, int]:
        h, w = self.input_size
        for _ in range(N_CONV_LAYERS):
            h = kernels.conv_output_size(h)
            w = kernels.conv_output_size(w)
        return h, w

    def validate(self) -> None:
        if len(self.conv_channels) != N_CONV_LAYERS:
            raise ConfigurationError(
                f"need {N_CONV_LAYERS} conv channel counts, got {len(self.conv_channels)}")
        if len(self.fc_sizes) != N_FC_LAYERS:
            raise ConfigurationError(f"need {N_FC_LAYERS} fc sizes, got {len(self.fc_sizes)}")
        if self.fc_sizes[-1] != N_OUTPUTS:
            raise ConfigurationError(
                f"final fc layer must emit {N_OUTPUTS} values, got {self.fc_sizes[-1]}")
        if self.in_channels < 1:
            raise ConfigurationError("in_channels must be >= 1")
        if any(c < 1 for c in self.conv_channels) or any(s < 1 for s in self.fc_sizes):
            raise ConfigurationError("layer widths must be positive")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigurationError(f"leaky slope must be in (0, 1), got {self.leaky_slope}")
        oh, ow = self.conv_output_size()
        if oh < 1 or ow < 1:
            raise ConfigurationError(f"input size {self.input_size} collapses below 1x1")
        emb = self.conv_channels[-1] * oh * ow
        if emb != self.embedding_len:
            raise ConfigurationError(
                f"conv stack yields embedding {self.conv_channels[-1]}*{oh}*{ow} = {emb}, "
                f"config declares embedding_len {self.embedding_len}")


def full_scale_config(in_channels: int = 4, mix_dim: int = 18) -> ModelConfig:
    """512x512 preset: channels chosen so the final 4x4x40 map flattens to 640."""
    width = 640 + 2 + mix_dim
    return ModelConfig(input_size=(512, 512), in_channels=in_channels, mix_dim=mix_dim,
                       fc_sizes=default_fc_sizes(width))


def desk_config(image_size: int = 64, in_channels: int = 4, mix_dim: int = 18) -> ModelConfig:
    """Desk-scale preset (64 or 128 square): final 1x1x640 map keeps the embedding at 640.

    The narrow layer before the embedding keeps the parameter count near the
    full-scale configuration; desk campaigns have ~10^4 training sets and a
    wide final convolution (millions of weights) memorizes them outright.
    """
    width = 640 + 2 + mix_dim
    return ModelConfig(input_size=(image_size, image_size), in_channels=in_channels,
                       conv_channels=(8, 16, 24, 32, 48, 16, 640), mix_dim=mix_dim,
                       fc_sizes=default_fc_sizes(width))


def adapt_config(base: ModelConfig, in_channels: int, mix_dim: int) -> ModelConfig:
    """Same conv stack with a different channel count and mix width.

    The fc widths are re-derived from the fused width by the same linear
    decline, so ablated input combinations keep a proportionate head.
    """
    width = base.embedding_len + base.delta_t_dim + mix_dim
    cfg = ModelConfig(input_size=base.input_size, in_channels=in_channels,
                      conv_channels=base.conv_channels, embedding_len=base.embedding_len,
                      delta_t_dim=base.delta_t_dim, mix_dim=mix_dim,
                      fc_sizes=default_fc_sizes(width), leaky_slope=base.leaky_slope)
    cfg.validate()
    return cfg


def tiny_config(image_size: int = 64, in_channels: int = 4, mix_dim: int = 18) -> ModelConfig:
    """Small-channel variant of the desk preset, used for gradient verification."""
    oh = image_size
    for _ in range(N_CONV_LAYERS):
        oh = kernels.conv_output_size(oh)
    emb = 4 * oh * oh
    width = emb + 2 + mix_dim
    return ModelConfig(input_size=(image_size, image_size), in_channels=in_channels,
                       conv_channels=(2, 2, 2, 2, 2, 2, 4), embedding_len=emb,
                       mix_dim=mix_dim, fc_sizes=default_fc_sizes(width))


class PropertyNet:
    """The prediction network: conv feature stack plus late-fusion FC head."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)

        self.convs = []
        self.bns = []
        self.relus = []
        cin = config.in_channels
        for i, cout in enumerate(config.conv_channels, start=1):
            self.convs.append(kernels.Conv2d.create(cin, cout, f"conv{i}", rng, dtype=dtype))
            self.bns.append(kernels.BatchNorm2d.create(cout, f"conv{i}", dtype=dtype))
            self.relus.append(kernels.ReLU())
            cin = cout

        self.fcs = []
        self.leakies = []
        fin = config.fused_width
        for i, fout in enumerate(config.fc_sizes, start=1):
            self.fcs.append(kernels.Dense.create(fin, fout, f"fc{i}", rng, dtype=dtype))
            if i < N_FC_LAYERS:
                self.leakies.append(kernels.LeakyReLU(config.leaky_slope))
            fin = fout
        self._conv_out_shape = None

    def params(self):
        out = []
        for conv, bn in zip(self.convs, self.bns):
            out.extend(conv.params())
            out.extend(bn.params())
        for fc in self.fcs:
            out.extend(fc.params())
        return out

    def buffers(self):
        out = []
        for bn in self.bns:
            out.extend(bn.buffers())
        return out

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.params())

    def forward(self, images: np.ndarray, delta_t: np.ndarray, mix: np.ndarray,
                train: bool = False) -> np.ndarray:
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != cfg.in_channels:
            raise InputError(
                f"expected images with {cfg.in_channels} channels, got shape {images.shape}")
        if delta_t.shape[1:] != (cfg.delta_t_dim,):
            raise InputError(f"expected delta_t with {cfg.delta_t_dim} columns, "
                             f"got shape {delta_t.shape}")
        if mix.shape[1:] != (cfg.mix_dim,):
            raise InputError(f"expected mix with {cfg.mix_dim} columns, got shape {mix.shape}")

        x = images
        for conv, bn, act in zip(self.convs, self.bns, self.relus):
            x = act.forward(bn.forward(conv.forward(x, train), train), train)
        self._conv_out_shape = x.shape
        z = x.reshape(x.shape[0], -1)
        if z.shape[1] != cfg.embedding_len:
            raise ConfigurationError(
                f"embedding length {z.shape[1]} does not match config {cfg.embedding_len}")
        f = np.concatenate([z, delta_t.astype(z.dtype), mix.astype(z.dtype)], axis=1)
        for i, fc in enumerate(self.fcs):
            f = fc.forward(f, train)
            if i < len(self.leakies):
                f = self.leakies[i].forward(f, train)
        return f

    def backward(self, dout: np.ndarray):
        df = dout
        for i in range(len(self.fcs) - 1, -1, -1):
            if i < len(self.leakies):
                df = self.leakies[i].backward(df)
            df = self.fcs[i].backward(df)
        cfg = self.config
        dz = df[:, :cfg.embedding_len]
        ddt = df[:, cfg.embedding_len:cfg.embedding_len + cfg.delta_t_dim]
        dmix = df[:, cfg.embedding_len + cfg.delta_t_dim:]
        dx = dz.reshape(self._conv_out_shape)
        for conv, bn, act in zip(reversed(self.convs), reversed(self.bns), reversed(self.relus)):
            dx = conv.backward(bn.backward(act.backward(dx)))
        return dx, ddt, dmix

    def activation_signature(self) -> tuple:
        """Current activation patterns; used to invalidate finite differences at kinks."""
        return (tuple(act.activation_signature() for act in self.relus)
                + tuple(act.activation_signature() for act in self.leakies))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.value.copy() for p in self.params()}
        state.update({name: buf.copy() for name, buf in self.buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {p.name: p.value for p in self.params()}
        targets.update({name: buf for name, buf in self.buffers()})
        for name, arr in state.items():
            if name not in targets:
                raise CheckpointShapeError(f"unknown tensor '{name}'")
            if targets[name].shape != arr.shape:
                raise CheckpointShapeError(
                    f"tensor '{name}' has shape {arr.shape}, model expects "
                    f"{targets[name].shape}")
            targets[name][...] = arr


# -- checkpoint file format ---------------------------------------------------
#
# magic "RHC1" | u16 version | u32 config-block length | config block
# | u32 tensor count | per tensor: u16 name length, name, u8 rank,
#   rank * u32 dims, dims-product float32 values
# All integers and floats little-endian; tensor payloads are 4-byte reals, so
# a save/load round trip of a float32 model is bit exact.


def _config_block(config: ModelConfig, meta: dict[str, str]) -> bytes:
    lines = [
        f"input_h={config.input_size[0]}",
        f"input_w={config.input_size[1]}",
        f"in_channels={config.in_channels}",
        "conv_channels=" + ",".join(str(c) for c in config.conv_channels),
        f"embedding_len={config.embedding_len}",
        f"delta_t_dim={config.delta_t_dim}",
        f"mix_dim={config.mix_dim}",
        "fc_sizes=" + ",".join(str(s) for s in config.fc_sizes),
        f"leaky_slope={config.leaky_slope!r}",
    ]
    for key in sorted(meta):
        if "=" in key or "\n" in key or "\n" in str(meta[key]):
            raise InputError(f"invalid meta entry {key!r}")
        lines.append(f"meta.{key}={meta[key]}")
    return "\n".join(lines).encode("utf-8")


def _parse_config_block(blob: bytes) -> tuple[ModelConfig, dict[str, str]]:
    fields: dict[str, str] = {}
    meta: dict[str, str] = {}
    for line in blob.decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            fields[key] = value
    try:
        config = ModelConfig(
            input_size=(int(fields["input_h"]), int(fields["input_w"])),
            in_channels=int(fields["in_channels"]),
            conv_channels=tuple(int(c) for c in fields["conv_channels"].split(",")),
            embedding_len=int(fields["embedding_len"]),
            delta_t_dim=int(fields["delta_t_dim"]),
            mix_dim=int(fields["mix_dim"]),
            fc_sizes=tuple(int(s) for s in fields["fc_sizes"].split(",")),
            leaky_slope=float(fields["leaky_slope"]),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed config block: {exc}") from exc
    return config, meta


def _write_tensor(out: io.BufferedIOBase, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    out.write(struct.pack("<H", len(encoded)))
    out.write(encoded)
    out.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        out.write(struct.pack("<I", d))
    out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f: io.BufferedIOBase, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointTruncatedError(f"expected {n} bytes, got {len(data)}")
    return data


def _read_tensor(f: io.BufferedIOBase) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, name_len).decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(f, 1))
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(dims)
    return name, data.astype(np.float32)


@dataclass
class CheckpointBundle:
    model: PropertyNet
    meta: dict[str, str] = field(default_factory=dict)
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    velocities: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(model: PropertyNet, path, *, optimizer=None,
                    extra: dict[str, np.ndarray] | None = None,
                    meta: dict[str, str] | None = None) -> None:
    tensors: list[tuple[str, np.ndarray]] = [(p.name, p.value) for p in model.params()]
    tensors.extend(model.buffers())
    for name, arr in sorted((extra or {}).items()):
        tensors.append((f"extra.{name}", np.asarray(arr)))
    if optimizer is not None:
        for name in sorted(optimizer.velocities):
            tensors.append((f"opt.{name}", optimizer.velocities[name]))

    block = _config_block(model.config, meta or {})
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(block)))
        f.write(block)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(f, name, arr)


def load_checkpoint(path) -> CheckpointBundle:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(f, 2))
        if version != CHECKPOINT_VERSION:
            raise CheckpointMagicError(f"unsupported checkpoint version {version}")
        (block_len,) = struct.unpack("<I", _read_exact(f, 4))
        config, meta = _parse_config_block(_read_exact(f, block_len))
        (count,) = struct.unpack("<I", _read_exact(f, 4))

        model = PropertyNet(config, seed=0)
        bundle = CheckpointBundle(model=model, meta=meta)
        state: dict[str, np.ndarray] = {}
        for _ in range(count):
            name, arr = _read_tensor(f)
            if name.startswith("extra."):
                bundle.extra[name[6:]] = arr
            elif name.startswith("opt."):
                bundle.velocities[name[4:]] = arr
            else:
                state[name] = arr
        model.load_state_dict(state)
        expected = {p.name for p in model.params()} | {n for n, _ in model.buffers()}
        missing = expected - set(state)
        if missing:
            raise CheckpointShapeError(f"checkpoint is missing tensors: {sorted(missing)[:3]}")
    return bundle
