"""QuartzNet BxR acoustic model: config schema, builder, forward pass,
parameter profiler and checkpoint I/O."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .ctc import Vocabulary
from .errors import ConfigError, FormatError, ShapeError
from .layers import Conv1d, Conv1dParams, ConvBN, Module, ResidualBlock, dropout, mask_time, relu
from .tensor import Tensor, log_softmax, transpose

CONFIG_VERSION = 1
CONFIG_DIR = Path(__file__).parent / "configs"


def _from_dict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _positive_ints(obj, names: Iterable[str], where: str) -> None:
    for n in names:
        v = getattr(obj, n)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConfigError(f"{where}: {n} must be a positive integer, got {v!r}")


@dataclass
class LayerSpec:
    """A single conv + batch-norm layer outside the residual blocks (C1, C2, C3)."""

    kernel_size: int
    channels: int
    stride: int = 1
    dilation: int = 1
    separable: bool = True

    def validate(self, where: str) -> None:
        _positive_ints(self, ("kernel_size", "channels", "stride", "dilation"), where)


@dataclass
class HeadSpec:
    """The final projection (C4); its output width is the vocabulary size."""

    kernel_size: int = 1
    dilation: int = 1

    def validate(self, where: str) -> None:
        _positive_ints(self, ("kernel_size", "dilation"), where)


@dataclass
class BlockSpec:
    modules: int  # R
    kernel_size: int  # K
    channels: int  # C
    repeat: int = 1  # S
    groups: int = 1
    separable: bool = True
    shuffle: bool = True

    def validate(self, where: str) -> None:
        _positive_ints(self, ("modules", "kernel_size", "channels", "repeat", "groups"), where)
        if self.channels % self.groups:
            raise ConfigError(f"{where}: groups={self.groups} does not divide channels={self.channels}")


@dataclass
class ModelConfig:
    name: str
    labels: list[str]
    prologue: LayerSpec
    blocks: list[BlockSpec]
    epilogue: list[LayerSpec]
    head: HeadSpec = field(default_factory=HeadSpec)
    input_features: int = 64
    dropout: float = 0.0
    config_version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {self.config_version}")
        if isinstance(self.prologue, dict):
            self.prologue = _from_dict(LayerSpec, self.prologue, "prologue")
        if isinstance(self.head, dict):
            self.head = _from_dict(HeadSpec, self.head, "head")
        self.blocks = [_from_dict(BlockSpec, b, f"blocks[{i}]") if isinstance(b, dict) else b for i, b in enumerate(self.blocks)]
        self.epilogue = [
            _from_dict(LayerSpec, e, f"epilogue[{i}]") if isinstance(e, dict) else e for i, e in enumerate(self.epilogue)
        ]
        self.labels = list(self.labels)
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.input_features, int) or self.input_features < 1:
            raise ConfigError(f"input_features must be a positive integer, got {self.input_features!r}")
        if not 0.0 <= float(self.dropout) < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        try:
            Vocabulary(tuple(self.labels))
        except ValueError as exc:
            raise ConfigError(f"labels: {exc}") from None
        self.prologue.validate("prologue")
        for i, b in enumerate(self.blocks):
            b.validate(f"blocks[{i}]")
        for i, e in enumerate(self.epilogue):
            e.validate(f"epilogue[{i}]")
            if e.stride != 1:
                raise ConfigError(f"epilogue[{i}]: only the prologue may be strided")
        self.head.validate("head")

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(tuple(self.labels))

    @property
    def num_outputs(self) -> int:
        return len(self.labels) + 1

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d.pop("training", None)
        return _from_dict(cls, d, "config")


def load_config(path: str | Path) -> tuple[ModelConfig, dict]:
    """Read a JSON config; returns the model config and the raw ``training`` section.

    A bare name such as ``quartznet15x5`` resolves to a shipped config.
    """
    p = resolve_config_path(path)
    try:
        doc = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object")
    training = doc.get("training", {})
    return ModelConfig.from_dict(doc), training


def resolve_config_path(path: str | Path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    for cand in (CONFIG_DIR / p.name, CONFIG_DIR / f"{p.name}.json"):
        if cand.exists():
            return cand
    raise ConfigError(f"config not found: {path}")


def shipped_configs() -> list[Path]:
    return sorted(CONFIG_DIR.glob("*.json"))


def expand_blocks(cfg: ModelConfig) -> list[BlockSpec]:
    """Blocks in execution order, each spec repeated ``repeat`` times."""
    return [b for b in cfg.blocks for _ in range(b.repeat)]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class AcousticModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        p = cfg.prologue
        self.prologue = ConvBN(p.kernel_size, cfg.input_features, p.channels, rng, p.separable, p.stride, p.dilation, dtype=dtype)
        c = p.channels
        self.blocks = []
        for b in expand_blocks(cfg):
            self.blocks.append(
                ResidualBlock(b.modules, b.kernel_size, c, b.channels, rng, b.separable, b.groups, cfg.dropout, dtype=dtype)
            )
            if not b.shuffle:
                for m in self.blocks[-1].body:
                    m.conv.pointwise.shuffle = False
            c = b.channels
        self.epilogue = []
        for e in cfg.epilogue:
            self.epilogue.append(ConvBN(e.kernel_size, c, e.channels, rng, e.separable, e.stride, e.dilation, dtype=dtype))
            c = e.channels
        self.head = Conv1d(Conv1dParams(cfg.head.kernel_size, c, cfg.num_outputs, dilation=cfg.head.dilation), rng, bias=True, dtype=dtype)
        self._head_seed = seed
        names = [n for n, _ in self.named_parameters()]
        assert len(names) == len(set(names))

    @property
    def stride(self) -> int:
        return self.cfg.prologue.stride

    def output_lengths(self, lengths) -> np.ndarray:
        lengths = np.asarray(lengths, dtype=np.int64)
        return -(-lengths // self.stride)

    def forward(self, feats, lengths=None, rng: np.random.Generator | None = None):
        """Return ``(log_probs [B, T_out, V], out_lengths)``."""
        x = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=self.dtype))
        if x.ndim != 3 or x.shape[1] != self.cfg.input_features:
            raise ShapeError(f"expected features [B, {self.cfg.input_features}, T], got {x.shape}")
        B, _, T = x.shape
        if T < 1:
            raise ShapeError("need at least one frame")
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths, dtype=np.int64)
        if lengths.shape != (B,) or lengths.max() > T or lengths.min() < 0:
            raise ShapeError(f"lengths {lengths.tolist()} do not fit a batch of {B} x {T} frames")
        p = self.cfg.dropout
        x = dropout(relu(self.prologue(x, lengths)), p, rng, self.training)
        lengths = self.output_lengths(lengths)
        for block in self.blocks:
            x = block(x, lengths, rng)
        for layer in self.epilogue:
            x = dropout(relu(layer(x, lengths)), p, rng, self.training)
        logits = self.head(mask_time(x, lengths))
        return log_softmax(transpose(logits, (0, 2, 1)), axis=-1), lengths

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"param:{n}": t.data for n, t in self.named_parameters()}
        out.update({f"buffer:{n}": b for n, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], skip_prefix: str | None = None) -> None:
        own = self.state_dict()
        for key, arr in own.items():
            name = key.split(":", 1)[1]
            if skip_prefix and name.startswith(skip_prefix):
                continue
            if key not in state:
                raise ConfigError(f"checkpoint is missing {name}")
            if state[key].shape != arr.shape:
                raise ConfigError(f"shape mismatch for {name}: checkpoint {state[key].shape} vs model {arr.shape}")
            arr[...] = state[key]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())


def build(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> AcousticModel:
    return AcousticModel(cfg, seed, dtype)


# ---------------------------------------------------------------------------
# Parameter profiler
# ---------------------------------------------------------------------------


@dataclass
class LayerCount:
    name: str
    kind: str
    kernel_size: int
    c_in: int
    c_out: int
    groups: int
    params: int


@dataclass
class ParamReport:
    name: str
    layers: list[LayerCount]

    @property
    def total(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def millions(self) -> float:
        return round_millions(self.total)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "total": self.total,
            "total_m": self.millions,
            "total_str": f"{self.millions:.1f}M",
            "layers": [asdict(l) for l in self.layers],
        }


def round_millions(n: int) -> float:
    """One decimal in millions, round-half-up."""
    return math.floor(n / 1e5 + 0.5) / 10


def separable_count(k: int, c_in: int, c_out: int, groups: int = 1) -> int:
    return k * c_in + (c_in // groups) * c_out


def regular_count(k: int, c_in: int, c_out: int) -> int:
    return k * c_in * c_out


def _conv_bn(name, k, c_in, c_out, separable, groups=1) -> LayerCount:
    if separable:
        n = separable_count(k, c_in, c_out, groups)
        kind = "tcs"
    else:
        n = regular_count(k, c_in, c_out)
        kind = "conv"
    return LayerCount(name, kind, k, c_in, c_out, groups, n + 2 * c_out)


def count_params(cfg: ModelConfig) -> ParamReport:
    """Count weights, biases and batch-norm scale/shift from the config alone.

    Each conv is followed by batch norm (2 per channel) except the head, which
    carries a bias instead. Running statistics are not counted.
    """
    rows = []
    p = cfg.prologue
    rows.append(_conv_bn("prologue", p.kernel_size, cfg.input_features, p.channels, p.separable))
    c = p.channels
    for i, b in enumerate(expand_blocks(cfg)):
        for r in range(b.modules):
            rows.append(_conv_bn(f"blocks.{i}.body.{r}", b.kernel_size, c if r == 0 else b.channels, b.channels, b.separable, b.groups))
        rows.append(_conv_bn(f"blocks.{i}.skip", 1, c, b.channels, separable=False))
        c = b.channels
    for i, e in enumerate(cfg.epilogue):
        rows.append(_conv_bn(f"epilogue.{i}", e.kernel_size, c, e.channels, e.separable))
        c = e.channels
    v = cfg.num_outputs
    rows.append(LayerCount("head", "conv+bias", cfg.head.kernel_size, c, v, 1, regular_count(cfg.head.kernel_size, c, v) + v))
    return ParamReport(cfg.name, rows)


def tds_param_count(k: int, w: int, c: int) -> int:
    """Parameters of one time-depth-separable block: ``k*c^2 + 2*(w*c)^2``."""
    for n, v in (("k", k), ("w", w), ("c", c)):
        if v < 1:
            raise ConfigError(f"{n} must be positive")
    return k * c * c + 2 * (w * c) ** 2


def tcs_module_count(k: int, c: int) -> int:
    """The matching figure for a separable module with c channels in and out: ``k*c + c^2``."""
    return k * c + c * c


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"QZNETCK1"


def write_checkpoint(path: str | Path, cfg: ModelConfig, tensors: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Magic, u32 header length, JSON header, then little-endian float32 payload."""
    directory = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        directory.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"config": cfg.to_dict(), "tensors": directory, "extra": extra or {}, "payload_bytes": offset}).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, tensors)``; raises :class:`FormatError` on any corruption."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise FormatError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<I", raw[pos : pos + 4])
    pos += 4
    if len(raw) < pos + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos : pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    pos += hlen
    payload = raw[pos:]
    if len(payload) != header.get("payload_bytes", -1):
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header says {header.get('payload_bytes')}")
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        end = start + 4 * n
        if end > len(payload):
            raise FormatError(f"{path}: tensor {entry['name']} runs past end of file")
        tensors[entry["name"]] = np.frombuffer(payload[start:end], dtype="<f4").reshape(entry["shape"]).copy()
    return header, tensors


def save_checkpoint(model: AcousticModel, path: str | Path, extra: dict | None = None, extra_tensors: dict | None = None) -> None:
    tensors = dict(model.state_dict())
    if extra_tensors:
        tensors.update(extra_tensors)
    for name, arr in tensors.items():
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"refusing to save non-finite tensor {name}")
    write_checkpoint(path, model.cfg, tensors, extra)


def load_checkpoint(
    path: str | Path,
    cfg: ModelConfig | None = None,
    reinit_head: bool = False,
    seed: int = 0,
    dtype=np.float32,
) -> AcousticModel:
    """Rebuild a model from a checkpoint.

    With ``cfg`` given the weights are loaded into that architecture; with
    ``reinit_head`` the head (C4) keeps its fresh initialization, which allows
    a different label set when fine-tuning.
    """
    header, tensors = read_checkpoint(path)
    if cfg is None:
        try:
            cfg = ModelConfig.from_dict(header["config"])
        except (KeyError, ConfigError) as exc:
            raise FormatError(f"{path}: bad embedded config ({exc})") from None
    model = build(cfg, seed, dtype)
    model.load_state_dict(tensors, skip_prefix="head." if reinit_head else None)
    return model
