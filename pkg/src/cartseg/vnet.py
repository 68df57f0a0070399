"""V-Net style encoder/decoder on top of :mod:`cartseg.diffcore`.

Layout for ``stages = S`` (levels s = 0..S-1, level width base * 2**s)::

    enc{s}   convs_per_stage x (conv k^3 + SeLU), residual add of the level input
             (1^3 projection ``enc{s}.proj`` when the channel count changes)
    down{s}  2^3 stride-2 conv + SeLU between level s and s+1
    dropout  after the bottleneck (level S-1)
    up{s}    2^3 stride-2 transposed conv + SeLU back to level s
    dec{s}   concat(up, enc{s}) -> convs_per_stage x (conv + SeLU), residual add
             through a 1^3 projection, then dropout
    head     1^3 conv to one channel + sigmoid
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass(frozen=True)
class NetworkConfig:
    stages: int = 3
    base_channels: int = 8
    convs_per_stage: int = 2
    kernel_size: int = 3
    dropout_rate: float = 0.6
    input_patch_size: int = 32

    def __post_init__(self):
        for name in ("stages", "base_channels", "convs_per_stage", "kernel_size", "input_patch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"NetworkConfig.{name} must be a positive int")
        if self.kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.input_patch_size % (2**self.stages) != 0:
            raise ValueError(
                f"input_patch_size {self.input_patch_size} must be divisible by "
                f"2**stages = {2**self.stages}"
            )

    def width(self, level: int) -> int:
        return self.base_channels * 2**level


def layer_table(config: NetworkConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    """(name, kind, kernel shape) for every learnable layer, in forward order.

    kind is ``conv`` (bias of size K) or ``up`` (transposed, bias of size K).
    """
    k = config.kernel_size
    rows: list[tuple[str, str, tuple[int, ...]]] = []
    c_in = 1
    for s in range(config.stages):
        c = config.width(s)
        ci = c_in
        for i in range(config.convs_per_stage):
            rows.append((f"enc{s}.conv{i}", "conv", (c, ci, k, k, k)))
            ci = c
        if c_in != c:
            rows.append((f"enc{s}.proj", "conv", (c, c_in, 1, 1, 1)))
        if s < config.stages - 1:
            rows.append((f"down{s}", "conv", (config.width(s + 1), c, 2, 2, 2)))
        c_in = config.width(s + 1)
    for s in reversed(range(config.stages - 1)):
        c = config.width(s)
        rows.append((f"up{s}", "up", (config.width(s + 1), c, 2, 2, 2)))
        ci = 2 * c
        for i in range(config.convs_per_stage):
            rows.append((f"dec{s}.conv{i}", "conv", (c, ci, k, k, k)))
            ci = c
        rows.append((f"dec{s}.proj", "conv", (c, 2 * c, 1, 1, 1)))
    rows.append(("head", "conv", (1, config.base_channels, 1, 1, 1)))
    return rows


class VNet:
    """Parameters plus the forward pass. ``params`` is an ordered name -> Tensor map."""

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: NetworkConfig, rng: np.random.Generator, dtype=np.float32) -> "VNet":
        params: dict[str, Tensor] = {}
        for name, kind, shape in layer_table(config):
            # transposed kernels are (C_in, K, ...) and each output voxel sees only C_in inputs
            fan_in = shape[0] if kind == "up" else int(np.prod(shape[1:]))
            w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape).astype(dtype)
            n_out = shape[1] if kind == "up" else shape[0]
            params[f"{name}.weight"] = Tensor(w, requires_grad=True)
            params[f"{name}.bias"] = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
        return cls(config, params)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "VNet":
        return VNet(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()},
        )

    def _conv(self, name: str, x: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
        return dc.conv3d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride, padding)

    def _block(self, prefix: str, x: Tensor, residual: Tensor) -> Tensor:
        pad = self.config.kernel_size // 2
        h = x
        for i in range(self.config.convs_per_stage):
            h = dc.selu(self._conv(f"{prefix}.conv{i}", h, padding=pad))
        return h + residual

    def forward(self, patch, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.config
        x = dc.as_tensor(patch)
        p = cfg.input_patch_size
        if x.data.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (p, p, p):
            raise dc.ShapeError(f"forward expects (N,1,{p},{p},{p}) input, got {x.shape}")
        skips: list[Tensor] = []
        h = x
        for s in range(cfg.stages):
            res = self._conv(f"enc{s}.proj", h) if f"enc{s}.proj.weight" in self.params else h
            h = self._block(f"enc{s}", h, res)
            if s < cfg.stages - 1:
                skips.append(h)
                h = dc.selu(self._conv(f"down{s}", h, stride=2))
        h = dc.dropout(h, cfg.dropout_rate, training, rng)
        for s in reversed(range(cfg.stages - 1)):
            up = dc.conv3d_transposed(
                h, self.params[f"up{s}.weight"], 2, self.params[f"up{s}.bias"]
            )
            cat = dc.concat_channels([dc.selu(up), skips[s]])
            h = self._block(f"dec{s}", cat, self._conv(f"dec{s}.proj", cat))
            h = dc.dropout(h, cfg.dropout_rate, training, rng)
        return dc.sigmoid(self._conv("head", h))

    __call__ = forward

    def predict(self, patch: np.ndarray) -> np.ndarray:
        """Inference on a bare (N,1,P,P,P) array; dropout off."""
        dtype = next(iter(self.params.values())).dtype
        return self.forward(Tensor(np.asarray(patch, dtype=dtype)), training=False).data


# Checkpoint container (all integers little-endian):
#   magic  b"VNETCKP1"
#   u32    length L of the UTF-8 JSON header, then L bytes of JSON with keys
#          "config" (NetworkConfig fields), "meta" (free-form) and
#          "optimizer" (null or the scalar optimizer fields)
#   u32    record count R, then R records of
#          u16 name length, name bytes, u8 ndim, ndim x u32 extents,
#          prod(extents) x little-endian float32, C order
# Parameter records use the parameter names; optimizer moments are stored as
# "opt.m/<name>", "opt.v/<name>" and "opt.v_hat/<name>".
CKPT_MAGIC = b"VNETCKP1"


def _write_record(buf: io.BufferedIOBase, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, net: VNet, optimizer=None, meta: dict | None = None) -> None:
    header = {
        "config": asdict(net.config),
        "meta": meta or {},
        "optimizer": optimizer.hyperparameters() if optimizer is not None else None,
    }
    records = [(name, t.data) for name, t in net.params.items()]
    if optimizer is not None:
        records += optimizer.state_records()
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            _write_record(fh, name, arr)


class CheckpointError(ValueError):
    pass


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (header, records) without building anything."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}, expected {CKPT_MAGIC!r}")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        records[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return header, records


def load_checkpoint(path) -> tuple[VNet, dict, dict[str, np.ndarray]]:
    """Return (network, header, optimizer records)."""
    header, records = read_checkpoint(path)
    config = NetworkConfig(**header["config"])
    expected = {f"{name}.{part}" for name, _, _ in layer_table(config) for part in ("weight", "bias")}
    missing = expected - records.keys()
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    params = {}
    for name, _, shape in layer_table(config):
        for part in ("weight", "bias"):
            key = f"{name}.{part}"
            params[key] = Tensor(records[key], requires_grad=True)
        if params[f"{name}.weight"].shape != shape:
            raise CheckpointError(f"{path}: {name}.weight has shape {params[f'{name}.weight'].shape}")
    opt = {k: v for k, v in records.items() if k.startswith("opt.")}
    return VNet(config, params), header, opt
