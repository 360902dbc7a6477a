"""The full SAnD model (shared encoder + named task heads) and its checkpoint file.

Checkpoint layout (all integers little-endian)::

    b"SANDCKPT"  u32 version
    u32 n        n bytes of UTF-8 ``key = value`` text (model config, heads, metadata)
    u32 count    then per tensor: u16 name length, name, tensor record
    32 bytes     SHA-256 of everything above

A tensor record is ``u32 rank, u32 dims..., f64 payload`` (see
``tensor.tensor_to_bytes``).
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig, parse_kv_text, sub_rng, to_kv_text, update_dataclass
from .encoder import Encoder
from .errors import ChecksumError, ConfigError, DataError
from .heads import TaskHead
from .tensor import Tensor, tensor_from_bytes, tensor_to_bytes

MAGIC = b"SANDCKPT"
CHECKPOINT_VERSION = 1


class SandModel:
    def __init__(self, cfg: ModelConfig, heads: dict[str, tuple[str, int]] | None = None):
        """``heads`` maps task name -> (head kind, interpolation factor M).

        Without it a single ``main`` head is built from ``cfg.head_kind`` / ``cfg.M``.
        """
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg, sub_rng(cfg.seed, "init"))
        if heads is None:
            heads = {"main": (cfg.head_kind, cfg.M)}
        # each head draws from its own stream so the shared encoder init does not
        # depend on which heads exist
        self.heads = {
            name: TaskHead(kind, cfg.d, M, sub_rng(cfg.seed, f"init:head:{name}"), cfg.T_max)
            for name, (kind, M) in heads.items()
        }
        for name, (_, M) in heads.items():
            if not 1 <= M <= cfg.T_max:
                raise ConfigError(f"head {name!r}: M={M} outside [1, T_max]")
        self.meta: dict[str, np.ndarray] = {}
        self.info: dict[str, str] = {}
        self.training = False
        self.rng = sub_rng(cfg.seed, "dropout")

    # -- parameters ---------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        params = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        for name, head in self.heads.items():
            for k, v in head.parameters().items():
                params[f"heads.{name}.{k}"] = v
        return params

    def state(self) -> dict[str, Tensor]:
        state = {f"encoder.{k}": v for k, v in self.encoder.state().items()}
        state.update({k: v for k, v in self.parameters().items() if not k.startswith("encoder.")})
        return state

    def zero_grad(self) -> None:
        for p in self.state().values():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def train(self) -> "SandModel":
        self.training = True
        return self

    def eval(self) -> "SandModel":
        self.training = False
        return self

    # -- forward ------------------------------------------------------------
    def encode(self, x, store: list | None = None) -> Tensor:
        return self.encoder(x, training=self.training, rng=self.rng, store=store)

    def __call__(self, x, lengths=None, head: str | None = None) -> Tensor:
        if head is None:
            if len(self.heads) != 1:
                raise ConfigError("model has several heads; name one")
            head = next(iter(self.heads))
        return self.heads[head](self.encode(x), lengths)

    def head_kind(self, head: str) -> str:
        return self.heads[head].kind

    # -- checkpoint ---------------------------------------------------------
    def header_text(self) -> str:
        lines = [to_kv_text(self.cfg, prefix="model.")]
        for name, head in self.heads.items():
            lines.append(f"head.{name} = {head.kind}@{head.M}\n")
        for k, v in sorted(self.info.items()):
            lines.append(f"info.{k} = {v}\n")
        return "".join(lines)

    def to_bytes(self) -> bytes:
        body = bytearray(MAGIC)
        body += struct.pack("<I", CHECKPOINT_VERSION)
        text = self.header_text().encode()
        body += struct.pack("<I", len(text)) + text
        tensors = {k: v.data for k, v in self.state().items()}
        tensors.update({f"meta.{k}": v for k, v in sorted(self.meta.items())})
        body += struct.pack("<I", len(tensors))
        for name, arr in tensors.items():
            raw = name.encode()
            body += struct.pack("<H", len(raw)) + raw + tensor_to_bytes(arr)
        body += hashlib.sha256(bytes(body)).digest()
        return bytes(body)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "SandModel":
        if len(buf) < len(MAGIC) + 40 or buf[: len(MAGIC)] != MAGIC:
            raise DataError("not a SAnD checkpoint")
        body, digest = buf[:-32], buf[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise ChecksumError("checkpoint checksum mismatch")
        off = len(MAGIC)
        (version,) = struct.unpack_from("<I", body, off)
        off += 4
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        values = parse_kv_text(body[off : off + n].decode())
        off += n
        cfg = update_dataclass(
            ModelConfig(), {k[6:]: v for k, v in values.items() if k.startswith("model.")}
        )
        heads = {}
        info = {}
        for k, v in values.items():
            if k.startswith("head."):
                kind, M = v.rsplit("@", 1)
                heads[k[5:]] = (kind, int(M))
            elif k.startswith("info."):
                info[k[5:]] = v
        model = cls(cfg, heads)
        model.info = info
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        state = model.state()
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + ln].decode()
            off += ln
            arr, off = tensor_from_bytes(body, off)
            if name.startswith("meta."):
                model.meta[name[5:]] = arr
            elif name in state:
                if state[name].shape != arr.shape:
                    raise DataError(f"checkpoint tensor {name} has shape {arr.shape}, expected {state[name].shape}")
                state[name].data = arr.copy()
            else:
                raise DataError(f"unexpected tensor {name!r} in checkpoint")
        return model

    @classmethod
    def load(cls, path: str | Path) -> "SandModel":
        return cls.from_bytes(Path(path).read_bytes())

    def copy(self) -> "SandModel":
        return SandModel.from_bytes(self.to_bytes())
