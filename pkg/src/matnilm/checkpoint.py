"""Checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"MATNCKPT"
    4 bytes   uint32 format version (1)
    8 bytes   uint64 header length N
    N bytes   UTF-8 JSON header
    ...       payload: raw little-endian array bytes, concatenated

The header holds ``config`` (the ModelConfig fields), ``norm_constant``,
``meta`` (free-form: appliance order, window margin, thresholds, ...),
``train_state`` (or null) and ``entries``: a list of
``{name, dtype, shape, offset, nbytes}`` records addressing the payload.
Entry names are ``model.<param>`` (weights for inference), ``best.<param>``
(best weights seen by early stopping), ``last.<param>`` (weights after the
final epoch, needed to resume) and ``optim.<index>.<key>`` (optimizer
moments).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch

from .model import ModelConfig, build_model

MAGIC = b"MATNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    norm_constant: float
    model_state: Dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)
    train_state: Optional[dict] = None
    best_state: Optional[Dict[str, torch.Tensor]] = None
    optimizer_state: Optional[dict] = None
    last_state: Optional[Dict[str, torch.Tensor]] = None

    def build(self, dtype=torch.float32) -> torch.nn.Module:
        model = build_model(self.config).to(dtype)
        model.load_state_dict(self.model_state)
        return model

    def resume(self, history=None, dtype=torch.float32):
        """Model at its last-epoch weights plus the payload ``train`` resumes from."""
        if self.train_state is None or self.last_state is None:
            raise CheckpointError("checkpoint holds no training state to resume from")
        model = build_model(self.config).to(dtype)
        model.load_state_dict(self.last_state)
        payload = {
            "train_state": dict(self.train_state),
            "optimizer_state": self.optimizer_state,
            "best_state": self.best_state,
            "history": list(history or []),
        }
        return model, payload


def _to_array(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().numpy()
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(
    path: str,
    model: torch.nn.Module,
    norm_constant: float,
    meta: Optional[dict] = None,
    train_state: Optional[dict] = None,
    best_state: Optional[Dict[str, torch.Tensor]] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    last_state: Optional[Dict[str, torch.Tensor]] = None,
) -> None:
    arrays: Dict[str, np.ndarray] = {}
    for prefix, sd in (("model", model.state_dict()), ("best", best_state), ("last", last_state)):
        for k, v in (sd or {}).items():
            arrays[f"{prefix}.{k}"] = _to_array(v)
    optim_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        optim_meta = {"param_groups": sd["param_groups"], "state_keys": {}}
        for idx, st in sd["state"].items():
            keys = []
            for key, val in st.items():
                arrays[f"optim.{idx}.{key}"] = _to_array(torch.as_tensor(val))
                keys.append(key)
            optim_meta["state_keys"][str(idx)] = keys

    entries, offset = [], 0
    for name, a in arrays.items():
        nbytes = a.nbytes
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "config": model.config.to_dict(),
        "norm_constant": float(norm_constant),
        "meta": meta or {},
        "train_state": train_state,
        "optimizer": optim_meta,
        "entries": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path: str, expect: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; ``expect`` guards against a config mismatch."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != MAGIC or len(data) < 20:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, n = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(data[20 : 20 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = data[20 + n :]
    arrays = {}
    for e in header["entries"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload at {e['name']}")
        a = np.frombuffer(payload[e["offset"] : end], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = torch.from_numpy(a.copy())

    config = ModelConfig.from_dict(header["config"])
    if expect is not None and expect != config:
        diff = [k for k, v in expect.to_dict().items() if config.to_dict().get(k) != v]
        raise CheckpointError(f"config mismatch on {', '.join(diff)}")

    def group(prefix):
        sel = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        return sel or None

    optim_state = None
    om = header.get("optimizer")
    if om is not None:
        state = {}
        for idx, keys in om["state_keys"].items():
            state[int(idx)] = {key: arrays[f"optim.{idx}.{key}"] for key in keys}
        optim_state = {"state": state, "param_groups": om["param_groups"]}

    return Checkpoint(
        config=config,
        norm_constant=header["norm_constant"],
        model_state=group("model.") or {},
        meta=header.get("meta", {}),
        train_state=header.get("train_state"),
        best_state=group("best."),
        optimizer_state=optim_state,
        last_state=group("last."),
    )
