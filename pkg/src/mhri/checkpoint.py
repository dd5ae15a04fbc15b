"""Binary checkpoint format.

Layout::

    b"MHRICKPT" | u32 version | u64 header length | JSON header | float64 LE payload

The header holds the model config, optional training config and extra
metadata, and a table of ``{name, shape, offset}`` entries (offsets in bytes
from the start of the payload).
"""

from __future__ import annotations

import json
import struct
import warnings
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .errors import CheckpointError, ConfigError, DimensionError
from .model import ModelConfig
from .optim import ParamSet

MAGIC = b"MHRICKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(params: ParamSet, model_config: ModelConfig, path, train_config: dict | None = None,
                    extra: dict | None = None) -> None:
    table = []
    offset = 0
    for name, t in params.items():
        table.append({"name": name, "shape": list(t.shape), "offset": offset, "decay": name in params.decay})
        offset += t.size * 8
    header = {
        "model_config": model_config.to_dict(),
        "train_config": train_config,
        "extra": extra or {},
        "params": table,
        "payload_bytes": offset,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in params.items()]
    Path(path).write_bytes(b"".join(parts))


def read_header(path) -> tuple[dict, bytes, int]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated before header (offset {len(raw)})")
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset 8")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise CheckpointError(f"{path}: truncated header (offset {len(raw)}, expected {start + hlen})")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header at offset {start}") from exc
    return header, raw, start + hlen


def load_checkpoint(path, expect: ModelConfig | None = None, strict: bool = False):
    """Return ``(ParamSet, ModelConfig, header)``.

    With ``expect``, parameter shapes must match a model built from it
    (``DimensionError`` naming the parameter otherwise). Other config
    differences warn, or raise ``ConfigError`` when ``strict``.
    """
    header, raw, base = read_header(path)
    try:
        config = ModelConfig.from_dict(header["model_config"])
        table = header["params"]
        payload = int(header["payload_bytes"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    if len(raw) != base + payload:
        raise CheckpointError(
            f"{path}: payload size mismatch at offset {len(raw)} (expected file size {base + payload})")
    ps = ParamSet()
    for entry in table:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        lo = base + int(entry["offset"])
        hi = lo + 8 * count
        if hi > len(raw):
            raise CheckpointError(f"{path}: parameter {entry['name']!r} runs past end of file at offset {lo}")
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=lo).astype(np.float64).reshape(shape)
        ps.add(entry["name"], Tensor(data), decay=bool(entry.get("decay", True)))
    if expect is not None:
        from .model import MHRIModel

        reference = MHRIModel(expect).params
        for name, t in reference.items():
            if name not in ps.params:
                raise DimensionError(f"checkpoint lacks parameter {name!r}")
            if ps[name].shape != t.shape:
                raise DimensionError(
                    f"parameter {name!r}: checkpoint shape {ps[name].shape} != expected {t.shape}")
        diffs = {k for k, v in expect.to_dict().items() if config.to_dict()[k] != v}
        if diffs:
            message = f"checkpoint config differs from expected in {sorted(diffs)}"
            if strict:
                raise ConfigError(message)
            warnings.warn(message, stacklevel=2)
    return ps, config, header
