"""Bi-ResNet assembly: spatial-temporal blocks, bi-residual blocks and the full network."""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, fields

import numpy as np

from .intralink import IntraLinkReLU
from .nncore import (
    DEFAULT_DTYPE,
    BatchNorm1d,
    Conv1d,
    Dense,
    GlobalMaxPool,
    Module,
    ReLU,
    Sequential,
    ShapeError,
    SeededRng,
)

INTRALINK_POSITIONS = ("post_add", "post_global_conv")
BLOCK_TYPES = ("st", "plain")


@dataclass
class STBlockConfig:
    in_channels: int
    out_channels: int
    kernel_sizes: tuple = (3, 5, 7, 9)
    branch_channels: int | None = None
    global_kernel: int = 1

    def __post_init__(self):
        self.kernel_sizes = tuple(self.kernel_sizes)
        if len(self.kernel_sizes) != 4:
            raise ValueError("spatial-temporal block needs exactly four kernel sizes")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError("kernel sizes must be odd")
        if self.branch_channels is None:
            if self.out_channels % 4:
                raise ValueError("out_channels must be divisible by 4")
            self.branch_channels = self.out_channels // 4


@dataclass
class BiResNetConfig:
    input_channels: int = 8
    stages: tuple = (32, 64, 128, 256)
    blocks_per_stage: int = 2
    root_kernel: int = 3
    kernel_sizes: tuple = (3, 5, 7, 9)
    branch_channels: int | None = None
    global_kernel: int = 1
    intralink_n: int = 1
    intralink_position: str = "post_add"
    block_type: str = "st"
    activation: str = "intralink"
    num_classes: int = 6
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3

    def __post_init__(self):
        self.stages = tuple(self.stages)
        self.kernel_sizes = tuple(self.kernel_sizes)
        if self.intralink_position not in INTRALINK_POSITIONS:
            raise ValueError(f"intralink_position must be one of {INTRALINK_POSITIONS}")
        if self.block_type not in BLOCK_TYPES:
            raise ValueError(f"block_type must be one of {BLOCK_TYPES}")
        if self.activation not in ("intralink", "relu"):
            raise ValueError("activation must be 'intralink' or 'relu'")
        if self.intralink_n < 0:
            raise ValueError("intralink_n must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = list(self.stages)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BiResNetConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def replace(self, **changes) -> "BiResNetConfig":
        d = self.to_dict()
        d.update(changes)
        return BiResNetConfig.from_dict(d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _conv_bn(cin, cout, k, rng, name, cfg, dtype, relu=True):
    layers = [Conv1d(cin, cout, k, rng=rng, name=f"{name}.conv", dtype=dtype),
              BatchNorm1d(cout, momentum=cfg.bn_momentum, eps=cfg.bn_eps, name=f"{name}.bn", dtype=dtype)]
    if relu:
        layers.append(ReLU())
    return Sequential(*layers, name=name)


class STBlock(Module):
    """Four parallel conv+BN+ReLU branches, concatenated, mixed by a global conv + BN.

    No activation follows the global conv; the enclosing block applies it.
    """

    def __init__(self, cfg: STBlockConfig, rng, name="st", net_cfg: BiResNetConfig | None = None,
                 dtype=DEFAULT_DTYPE):
        net_cfg = net_cfg or BiResNetConfig()
        self.name = name
        self.cfg = cfg
        bc = cfg.branch_channels
        self.branches = [
            _conv_bn(cfg.in_channels, bc, k, rng, f"{name}.branch{i}", net_cfg, dtype)
            for i, k in enumerate(cfg.kernel_sizes)
        ]
        self.mix = _conv_bn(4 * bc, cfg.out_channels, cfg.global_kernel, rng, f"{name}.global",
                            net_cfg, dtype, relu=False)

    def _children(self):
        return self.branches + [self.mix]

    def parameters(self):
        return [p for c in self._children() for p in c.parameters()]

    def buffers(self):
        out = {}
        for c in self._children():
            out.update(c.buffers())
        return out

    def load_buffers(self, values):
        for c in self._children():
            c.load_buffers(values)

    def astype(self, dtype):
        for c in self._children():
            c.astype(dtype)
        return self

    def forward(self, x, training=False):
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(self.name, "channel", self.cfg.in_channels, x.shape[1])
        cat = np.concatenate([b.forward(x, training) for b in self.branches], axis=1)
        return self.mix.forward(cat, training)

    def backward(self, dy):
        dcat = self.mix.backward(dy)
        bc = self.cfg.branch_channels
        dx = None
        for i, b in enumerate(self.branches):
            d = b.backward(dcat[:, i * bc:(i + 1) * bc])
            dx = d if dx is None else dx + d
        return dx


class PlainStack(Sequential):
    """Ablation body: four stacked conv(k=3)+BN+ReLU layers."""

    def __init__(self, cin, cout, rng, name="plain", net_cfg=None, dtype=DEFAULT_DTYPE):
        net_cfg = net_cfg or BiResNetConfig()
        layers = [_conv_bn(cin if i == 0 else cout, cout, 3, rng, f"{name}.layer{i}", net_cfg, dtype)
                  for i in range(4)]
        super().__init__(*layers, name=name)


class BiResidualBlock(Module):
    """``y = act(body(x) + shortcut(x))`` with an intra-linked activation.

    ``shortcut`` is the identity when channel counts match and a 1-wide
    conv + BN projection otherwise. With ``intralink_position='post_global_conv'``
    the chain acts on the body output and a plain ReLU follows the add.
    """

    def __init__(self, cin, cout, net_cfg: BiResNetConfig, rng, name="block", dtype=DEFAULT_DTYPE):
        self.name = name
        self.position = net_cfg.intralink_position
        if net_cfg.block_type == "st":
            st_cfg = STBlockConfig(cin, cout, net_cfg.kernel_sizes, net_cfg.branch_channels,
                                   net_cfg.global_kernel)
            self.body = STBlock(st_cfg, rng, f"{name}.st", net_cfg, dtype)
        else:
            self.body = PlainStack(cin, cout, rng, f"{name}.plain", net_cfg, dtype)
        self.shortcut = None
        if cin != cout:
            self.shortcut = _conv_bn(cin, cout, 1, rng, f"{name}.proj", net_cfg, dtype, relu=False)
        if net_cfg.activation == "relu":
            self.act = ReLU()
        else:
            self.act = IntraLinkReLU(net_cfg.intralink_n, axis=1)
        self.post_relu = ReLU() if self.position == "post_global_conv" else None

    def _children(self):
        return [self.body] + ([self.shortcut] if self.shortcut is not None else [])

    def parameters(self):
        return [p for c in self._children() for p in c.parameters()]

    def buffers(self):
        out = {}
        for c in self._children():
            out.update(c.buffers())
        return out

    def load_buffers(self, values):
        for c in self._children():
            c.load_buffers(values)

    def astype(self, dtype):
        for c in self._children():
            c.astype(dtype)
        return self

    def forward(self, x, training=False):
        f = self.body.forward(x, training)
        s = x if self.shortcut is None else self.shortcut.forward(x, training)
        if self.post_relu is None:
            return self.act.forward(f + s, training)
        return self.post_relu.forward(self.act.forward(f, training) + s, training)

    def backward(self, dy):
        if self.post_relu is None:
            dsum = self.act.backward(dy)
            df = ds = dsum
        else:
            ds = self.post_relu.backward(dy)
            df = self.act.backward(ds)
        dx = self.body.backward(df)
        if self.shortcut is None:
            return dx + ds
        return dx + self.shortcut.backward(ds)


class BiResNet(Module):
    """Root conv+BN+ReLU, stages of bi-residual blocks, global max pool, dense logits."""

    def __init__(self, cfg: BiResNetConfig | None = None, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.cfg = cfg = cfg or BiResNetConfig()
        self.seed = seed
        self.name = "biresnet"
        rng = SeededRng(seed, "init").generator()
        self.root = _conv_bn(cfg.input_channels, cfg.stages[0], cfg.root_kernel, rng, "root", cfg, dtype)
        self.blocks = []
        cin = cfg.stages[0]
        for si, width in enumerate(cfg.stages):
            for bi in range(cfg.blocks_per_stage):
                self.blocks.append(BiResidualBlock(cin, width, cfg, rng, f"stage{si}.block{bi}", dtype))
                cin = width
        self.pool = GlobalMaxPool()
        # max-pooled features are large and positive; a small head keeps initial logits near zero
        self.head = Dense(cin, cfg.num_classes, rng=rng, name="head", init_scale=0.05, dtype=dtype)

    def _children(self):
        return [self.root] + self.blocks + [self.head]

    def parameters(self):
        return [p for c in self._children() for p in c.parameters()]

    def buffers(self):
        out = {}
        for c in self._children():
            out.update(c.buffers())
        return out

    def load_buffers(self, values):
        for c in self._children():
            c.load_buffers(values)

    def astype(self, dtype):
        for c in self._children():
            c.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.head.weight.value.dtype

    def forward(self, x, training=False):
        if x.ndim != 3:
            raise ShapeError("biresnet", "rank", 3, x.ndim)
        if x.shape[1] != self.cfg.input_channels:
            raise ShapeError("biresnet", "channel", self.cfg.input_channels, x.shape[1])
        h = self.root.forward(x, training)
        for block in self.blocks:
            h = block.forward(h, training)
        return self.head.forward(self.pool.forward(h, training), training)

    def backward(self, dlogits):
        d = self.pool.backward(self.head.backward(dlogits))
        for block in reversed(self.blocks):
            d = block.backward(d)
        return self.root.backward(d)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def iterate_params(model: Module):
    return model.parameters()


def _conv_bn_count(cin, cout, k):
    return cin * cout * k + 2 * cout


def param_count(cfg: BiResNetConfig) -> int:
    """Analytic parameter count (BN running statistics are not parameters)."""
    total = _conv_bn_count(cfg.input_channels, cfg.stages[0], cfg.root_kernel)
    cin = cfg.stages[0]
    for width in cfg.stages:
        for _ in range(cfg.blocks_per_stage):
            if cfg.block_type == "st":
                bc = cfg.branch_channels or width // 4
                total += sum(_conv_bn_count(cin, bc, k) for k in cfg.kernel_sizes)
                total += _conv_bn_count(4 * bc, width, cfg.global_kernel)
            else:
                total += _conv_bn_count(cin, width, 3) + 3 * _conv_bn_count(width, width, 3)
            if cin != width:
                total += _conv_bn_count(cin, width, 1)
            cin = width
    return total + cin * cfg.num_classes + cfg.num_classes


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"BRCK"
CHECKPOINT_VERSION = 1
_ADAM_TAG = b"ADAM"


class CheckpointError(ValueError):
    pass


def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack_array(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f4")
    return (struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes())


def checkpoint_entries(model: Module) -> list[tuple[str, np.ndarray]]:
    entries = [(p.name, p.value) for p in model.parameters()]
    entries += sorted(model.buffers().items())
    return entries


def save_checkpoint(model: Module, path, *, include_adam: bool = False, sidecar: bool = True) -> None:
    """Write parameters and BN running statistics as little-endian float32."""
    entries = checkpoint_entries(model)
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(entries))]
    for name, value in entries:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + _pack_array(value))
    if include_adam:
        params = model.parameters()
        out.append(_ADAM_TAG + struct.pack("<I", len(params)))
        for p in params:
            out.append(struct.pack("<I", p.step_count) + _pack_array(p.m) + _pack_array(p.v))
    _atomic_write(path, b"".join(out))
    if sidecar and isinstance(model, BiResNet):
        meta = {"architecture": model.cfg.to_dict(), "seed": model.seed,
                "num_parameters": model.num_parameters(), "entries": [n for n, _ in entries]}
        _atomic_write(os.fspath(path) + ".json", json.dumps(meta, indent=2).encode())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> np.ndarray:
        (rank,) = self.unpack("<B")
        dims = self.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(dims)) if rank else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(dims).copy()


def read_checkpoint(path):
    """Return ``(entries, adam)`` where ``adam`` is a list of (step, m, v) or None."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        entries[name] = r.array()
    adam = None
    if r.pos < len(r.data):
        if r.take(4) != _ADAM_TAG:
            raise CheckpointError("unknown trailing section")
        (pcount,) = r.unpack("<I")
        adam = []
        for _ in range(pcount):
            (step,) = r.unpack("<I")
            adam.append((step, r.array(), r.array()))
    return entries, adam


def load_checkpoint(model: Module, path) -> Module:
    entries, adam = read_checkpoint(path)
    params = model.parameters()
    for p in params:
        if p.name not in entries:
            raise CheckpointError(f"checkpoint has no entry for {p.name}")
        value = entries[p.name]
        if value.shape != p.value.shape:
            raise CheckpointError(f"shape mismatch for {p.name}: {value.shape} vs {p.value.shape}")
        p.value = value.astype(p.value.dtype)
    model.load_buffers({k: v.astype(params[0].value.dtype) for k, v in entries.items()})
    if adam is not None:
        for p, (step, m, v) in zip(params, adam):
            p.step_count = step
            p.m = m.astype(p.value.dtype)
            p.v = v.astype(p.value.dtype)
    return model


def load_model(path, dtype=np.float32) -> BiResNet:
    """Rebuild a :class:`BiResNet` from a checkpoint and its JSON sidecar."""
    with open(os.fspath(path) + ".json") as fh:
        meta = json.load(fh)
    model = BiResNet(BiResNetConfig.from_dict(meta["architecture"]), seed=meta.get("seed", 0), dtype=dtype)
    return load_checkpoint(model, path)
