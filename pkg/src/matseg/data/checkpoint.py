"""Single-file model checkpoints.

A checkpoint is a text header of ``key=value`` lines ended by a blank line,
followed by named tensor entries. Each entry is a u16 little-endian name
length, the UTF-8 name, and one ``MTNS`` tensor block. Optimizer moments
are stored as ``adam.m/<param>`` and ``adam.v/<param>``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..errors import FormatError, IntegrityError
from ..models import UNetConfig, VanillaUNet, build_model
from ..optim import AdamState
from .tensorfile import decode_tensor, encode_tensor

FORMAT_NAME = "matseg-checkpoint"
FORMAT_VERSION = 1
_CONFIG_KEYS = ("in_channels", "out_channels", "depth", "base_channels", "seed")


@dataclass
class Checkpoint:
    model: VanillaUNet
    epoch: int = 0
    seed: int = 0
    adam: Optional[AdamState] = None
    header: Dict[str, str] = field(default_factory=dict)


def _header_lines(model: VanillaUNet, epoch: int, seed: int, adam: Optional[AdamState],
                  extra: Optional[Dict[str, object]], n_entries: int) -> List[str]:
    kv = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "model": model.kind}
    for k in _CONFIG_KEYS:
        kv[k] = getattr(model.config, k)
    kv["epoch"] = epoch
    kv["rng_seed"] = seed
    if adam is not None:
        kv.update(adam_t=adam.t, adam_lr=repr(adam.lr), adam_beta1=repr(adam.beta1),
                  adam_beta2=repr(adam.beta2), adam_eps=repr(adam.eps))
    for k, v in (extra or {}).items():
        if "=" in str(k) or "\n" in str(k) or "\n" in str(v):
            raise ValueError(f"header entry {k!r} cannot be encoded")
        kv[str(k)] = v
    kv["entries"] = n_entries
    return [f"{k}={v}" for k, v in kv.items()]


def save_checkpoint(path, model: VanillaUNet, adam: Optional[AdamState] = None, epoch: int = 0,
                    seed: int = 0, extra: Optional[Dict[str, object]] = None) -> None:
    entries: List[Tuple[str, np.ndarray]] = [(n, p.value) for n, p in model.named_parameters()]
    if adam is not None:
        for n, _ in model.named_parameters():
            if n in adam.m:
                entries.append((f"adam.m/{n}", adam.m[n]))
                entries.append((f"adam.v/{n}", adam.v[n]))
    lines = _header_lines(model, epoch, seed, adam, extra, len(entries))
    chunks = ["\n".join(lines).encode() + b"\n\n"]
    for name, arr in entries:
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw + encode_tensor(arr))
    tmp = Path(f"{os.fspath(path)}.tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def _parse(buf: bytes) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    end = buf.find(b"\n\n")
    if end < 0:
        raise FormatError("checkpoint header is not terminated by a blank line")
    try:
        text = buf[:end].decode()
    except UnicodeDecodeError as exc:
        raise FormatError("checkpoint header is not valid UTF-8") from exc
    header = {}
    for line in text.split("\n"):
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed header line {line!r}")
        header[key] = value
    if header.get("format") != FORMAT_NAME:
        raise FormatError(f"not a checkpoint (format={header.get('format')!r})")
    if header.get("version") != str(FORMAT_VERSION):
        raise FormatError(f"unsupported checkpoint version {header.get('version')!r}")
    try:
        n_entries = int(header["entries"])
    except (KeyError, ValueError) as exc:
        raise FormatError("checkpoint header lacks a valid 'entries' count") from exc
    pos = end + 2
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        if len(buf) < pos + 2:
            raise FormatError("truncated checkpoint: missing entry name")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) < pos + nlen:
            raise FormatError("truncated checkpoint: entry name cut short")
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        tensors[name], pos = decode_tensor(buf, pos)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} unexpected trailing bytes in checkpoint")
    return header, tensors


def config_from_header(header: Dict[str, str]) -> UNetConfig:
    try:
        return UNetConfig(**{k: int(header[k]) for k in _CONFIG_KEYS})
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint header has an incomplete model config: {exc}") from exc


def _assign(model: VanillaUNet, tensors: Dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    missing = [n for n in params if n not in tensors]
    if missing:
        raise IntegrityError(f"checkpoint lacks parameter(s): {', '.join(missing)}")
    unknown = [n for n in tensors if not n.startswith("adam.") and n not in params]
    if unknown:
        raise IntegrityError(f"checkpoint has parameter(s) the model does not: {', '.join(unknown)}")
    bad = [f"{n} {tensors[n].shape} vs {p.value.shape}" for n, p in params.items() if tensors[n].shape != p.value.shape]
    if bad:
        raise IntegrityError(f"parameter shape mismatch: {'; '.join(bad)}")
    for n, p in params.items():
        p.value = tensors[n].astype(p.value.dtype, copy=True)
        p.grad = None


def _adam_from(header: Dict[str, str], tensors: Dict[str, np.ndarray]) -> Optional[AdamState]:
    if "adam_t" not in header:
        return None
    state = AdamState(lr=float(header["adam_lr"]), beta1=float(header["adam_beta1"]),
                      beta2=float(header["adam_beta2"]), eps=float(header["adam_eps"]),
                      t=int(header["adam_t"]))
    for name, arr in tensors.items():
        if name.startswith("adam.m/"):
            state.m[name[len("adam.m/"):]] = arr
        elif name.startswith("adam.v/"):
            state.v[name[len("adam.v/"):]] = arr
    return state


def load_checkpoint(path, model: Optional[VanillaUNet] = None) -> Checkpoint:
    """Read a checkpoint.

    Without ``model`` the architecture is rebuilt from the header. With
    ``model`` the stored parameters are loaded into it and any mismatch is
    an :class:`IntegrityError`. Nothing is modified unless the whole file
    parses.
    """
    buf = Path(path).read_bytes()
    header, tensors = _parse(buf)
    if model is None:
        model = build_model(header.get("model", ""), config_from_header(header))
    else:
        stored = config_from_header(header)
        mine = {k: getattr(model.config, k) for k in _CONFIG_KEYS if k != "seed"}
        theirs = {k: getattr(stored, k) for k in _CONFIG_KEYS if k != "seed"}
        if header.get("model") != model.kind or mine != theirs:
            raise IntegrityError(
                f"checkpoint holds a {header.get('model')} model {theirs}, expected {model.kind} {mine}"
            )
    _assign(model, tensors)
    return Checkpoint(model=model, epoch=int(header.get("epoch", 0)), seed=int(header.get("rng_seed", 0)),
                      adam=_adam_from(header, tensors), header=header)
