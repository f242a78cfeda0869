"""Deterministic checkpoint format.

Layout: 8-byte magic, big-endian u64 header length, UTF-8 JSON header,
then raw little-endian tensor bytes in header order. The header carries
the format version, iteration counter, config snapshots and the tensor
table. Saving is a pure function of the state, so save -> load -> save
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, SegmentationModel, build_model

MAGIC = b"DSEGCKP1"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
    "uint8": torch.uint8,
    "bool": torch.bool,
}


class CheckpointError(RuntimeError):
    pass


def _tensor_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().contiguous().numpy()
    return np.ascontiguousarray(arr).tobytes()


def _flatten_optimizer(optimizer) -> tuple[dict[str, torch.Tensor], dict]:
    tensors: dict[str, torch.Tensor] = {}
    meta: dict = {"param_groups": [], "state_keys": {}}
    sd = optimizer.state_dict()
    for group in sd["param_groups"]:
        meta["param_groups"].append({k: v for k, v in group.items()})
    for idx, entry in sd["state"].items():
        keys = []
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                tensors[f"optimizer/{idx}/{key}"] = value
                keys.append(key)
            else:
                keys.append([key, value])
        meta["state_keys"][str(idx)] = keys
    return tensors, meta


def save_checkpoint(
    path: Path,
    model: SegmentationModel,
    optimizer,
    iteration: int,
    model_config: ModelConfig,
    train_config=None,
) -> Path:
    tensors: dict[str, torch.Tensor] = {
        f"model/{name}": value for name, value in model.state_dict().items()
    }
    opt_meta = None
    if optimizer is not None:
        opt_tensors, opt_meta = _flatten_optimizer(optimizer)
        tensors.update(opt_tensors)

    table = []
    payload = bytearray()
    for name in sorted(tensors):
        data = _tensor_bytes(tensors[name])
        t = tensors[name]
        table.append(
            {
                "name": name,
                "dtype": str(t.dtype).removeprefix("torch."),
                "shape": list(t.shape),
                "offset": len(payload),
                "nbytes": len(data),
            }
        )
        payload.extend(data)

    header = {
        "format_version": FORMAT_VERSION,
        "iteration": int(iteration),
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "optimizer": opt_meta,
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack(">Q", len(blob)))
        f.write(blob)
        f.write(bytes(payload))
    return path


@dataclass
class Checkpoint:
    iteration: int
    model_config: ModelConfig
    train_config_dict: dict | None
    tensors: dict[str, torch.Tensor]
    optimizer_meta: dict | None

    def model_state(self) -> dict[str, torch.Tensor]:
        return {
            name.removeprefix("model/"): t
            for name, t in self.tensors.items()
            if name.startswith("model/")
        }

    def build_model(self) -> SegmentationModel:
        model = build_model(self.model_config)
        model.load_state_dict(self.model_state())
        return model

    def load_optimizer(self, optimizer) -> None:
        if self.optimizer_meta is None:
            raise CheckpointError("checkpoint carries no optimizer state")
        state: dict = {}
        for idx_str, keys in self.optimizer_meta["state_keys"].items():
            entry = {}
            for key in keys:
                if isinstance(key, str):
                    entry[key] = self.tensors[f"optimizer/{idx_str}/{key}"].clone()
                else:
                    entry[key[0]] = key[1]
            state[int(idx_str)] = entry
        optimizer.load_state_dict(
            {"state": state, "param_groups": self.optimizer_meta["param_groups"]}
        )


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (header_len,) = struct.unpack(">Q", raw[8:16])
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {header['format_version']} != {FORMAT_VERSION}"
        )
    payload = raw[16 + header_len :]
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']}")
        start = entry["offset"]
        data = payload[start : start + entry["nbytes"]]
        np_dtype = np.dtype(entry["dtype"])
        arr = np.frombuffer(data, dtype=np_dtype).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr).to(dtype)
    return Checkpoint(
        iteration=header["iteration"],
        model_config=ModelConfig.from_dict(header["model_config"]),
        train_config_dict=header["train_config"],
        tensors=tensors,
        optimizer_meta=header["optimizer"],
    )
