"""Binary container for named arrays: JSON header + concatenated raw payloads.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then each
array's bytes in little-endian row-major order at the offsets recorded in the
header. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .common import DataError
from .unet import BackboneConfig, UNet

FORMAT_VERSION = 1

_DTYPE_TO_CODE = {np.dtype("float32"): "f32", np.dtype("float64"): "f64",
                  np.dtype("uint8"): "u8", np.dtype("int64"): "i64"}
_CODE_TO_DTYPE = {"f32": "<f4", "f64": "<f8", "u8": "u1", "i64": "<i8"}


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.ascontiguousarray(value)
    if arr.dtype not in _DTYPE_TO_CODE:
        raise DataError(f"unsupported array dtype: {arr.dtype}")
    # Normalize to little-endian so the on-disk bytes are platform independent.
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray | torch.Tensor],
                 meta: dict | None = None) -> None:
    arrays = {name: _to_numpy(v) for name, v in tensors.items()}
    entries = {}
    offset = 0
    for name, arr in arrays.items():
        nbytes = arr.nbytes
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": _DTYPE_TO_CODE[np.dtype(arr.dtype.newbyteorder("="))],
            "offset": offset,
            "nbytes": nbytes,
        }
        offset += nbytes
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for arr in arrays.values():
            f.write(arr.tobytes())


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint file: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DataError(f"truncated checkpoint: {path}")
    (header_len,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8:8 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"corrupt checkpoint header in {path}: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unknown checkpoint format version: {header.get('format_version')}")
    payload = raw[8 + header_len:]
    tensors = {}
    for name, entry in header["tensors"].items():
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise DataError(f"checkpoint payload shorter than header claims for {name!r}")
        arr = np.frombuffer(payload[start:start + nbytes],
                            dtype=_CODE_TO_DTYPE[entry["dtype"]])
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise DataError(f"shape mismatch for tensor {name!r} in {path}")
        tensors[name] = arr.reshape(entry["shape"]).copy()
    return tensors, header.get("meta", {})


# --------------------------------------------------------------------------- #
# Model checkpoints
# --------------------------------------------------------------------------- #
def save_model_checkpoint(path: str | Path, net: UNet, extra_meta: dict | None = None) -> None:
    meta = {"kind": "model", "fingerprint": net.fingerprint,
            "backbone": {**asdict(net.config), "widths": list(net.config.widths)}}
    if extra_meta:
        meta.update(extra_meta)
    save_tensors(path, dict(net.state_dict()), meta)


def load_model_checkpoint(path: str | Path) -> UNet:
    tensors, meta = load_tensors(path)
    if "backbone" not in meta:
        raise DataError(f"checkpoint {path} carries no backbone description")
    cfg_dict = dict(meta["backbone"])
    cfg_dict["widths"] = tuple(cfg_dict["widths"])
    config = BackboneConfig(**cfg_dict)
    net = UNet(config)
    if meta.get("fingerprint") != net.fingerprint:
        raise DataError(f"checkpoint fingerprint {meta.get('fingerprint')} does not match "
                        f"architecture {net.fingerprint}")
    load_params_into(net, tensors)
    return net


def load_params_into(net: UNet, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy named arrays into a network's parameters (strict name/shape match).

    The network is converted to the checkpoint's float dtype first, since
    load_state_dict would otherwise silently cast and break bit-exactness.
    """
    state = net.state_dict()
    selected = {name[len(prefix):]: arr for name, arr in tensors.items()
                if name.startswith(prefix)}
    if set(selected) != set(state):
        missing = set(state) - set(selected)
        extra = set(selected) - set(state)
        raise DataError(f"parameter names do not match checkpoint "
                        f"(missing={sorted(missing)[:3]}, extra={sorted(extra)[:3]})")
    for name, arr in selected.items():
        if tuple(arr.shape) != tuple(state[name].shape):
            raise DataError(f"shape mismatch for parameter {name!r}")
    first = next(iter(selected.values()))
    net.to(torch.float64 if first.dtype == np.float64 else torch.float32)
    net.load_state_dict({name: torch.from_numpy(arr) for name, arr in selected.items()})
