"""Binary checkpoint container.

Layout: ``KRTSCKPT`` magic, little-endian uint32 version, uint32 header
length, UTF-8 JSON header, then the raw little-endian tensor payloads the
header indexes by name, shape and byte offset.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from krts.config import ModelConfig
from krts.optim import Adam
from krts.policy import EntityPolicy

log = logging.getLogger(__name__)

MAGIC = b"KRTSCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    height: int
    width: int
    map_id: str
    tensors: Dict[str, np.ndarray]
    optimizer_step: int = 0
    global_step: int = 0
    update: int = 0
    rng_state: Optional[Dict[str, Any]] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def parameter_names(self) -> List[str]:
        return [name for name in self.tensors if not name.startswith(("adam.m/", "adam.v/"))]


def capture(
    model: EntityPolicy,
    map_id: str,
    optimizer: Optional[Adam] = None,
    global_step: int = 0,
    update: int = 0,
    rng_state: Optional[Dict[str, Any]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Checkpoint:
    tensors = dict(model.state_dict())
    if optimizer is not None:
        for (name, _), m, v in zip(
            model.named_parameters(), optimizer.first_moments, optimizer.second_moments,
        ):
            tensors[f"adam.m/{name}"] = m
            tensors[f"adam.v/{name}"] = v
    return Checkpoint(
        model_config=model.config,
        height=model.height,
        width=model.width,
        map_id=map_id,
        tensors=tensors,
        optimizer_step=optimizer.step_count if optimizer is not None else 0,
        global_step=global_step,
        update=update,
        rng_state=rng_state,
        extra=extra or {},
    )


def save_checkpoint(checkpoint: Checkpoint, path: Path):
    dtype = checkpoint.model_config.numpy_dtype().newbyteorder("<")
    index = []
    payloads = []
    offset = 0
    for name, value in checkpoint.tensors.items():
        raw = np.ascontiguousarray(value, dtype=dtype).tobytes()
        index.append({"name": name, "shape": list(value.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {
        "model_config": checkpoint.model_config.model_dump(),
        "height": checkpoint.height,
        "width": checkpoint.width,
        "map_id": checkpoint.map_id,
        "dtype": dtype.str,
        "tensors": index,
        "optimizer_step": checkpoint.optimizer_step,
        "global_step": checkpoint.global_step,
        "update": checkpoint.update,
        "rng_state": checkpoint.rng_state,
        "extra": checkpoint.extra,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(header_bytes)))
        f.write(header_bytes)
        for raw in payloads:
            f.write(raw)
    tmp_path.replace(path)
    log.info(f"Saved checkpoint {path} at global step {checkpoint.global_step}")


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"Checkpoint {path} is truncated")
    magic, version, header_length = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"Checkpoint {path} has version {version}, expected {VERSION}")
    body_start = _PREFIX.size + header_length
    try:
        header = json.loads(data[_PREFIX.size:body_start].decode("utf-8"))
        dtype = np.dtype(header["dtype"])
        tensors = {}
        for entry in header["tensors"]:
            start = body_start + entry["offset"]
            raw = data[start:start + entry["nbytes"]]
            if len(raw) != entry["nbytes"]:
                raise CheckpointError(f"Checkpoint {path}: payload of '{entry['name']}' is truncated")
            tensors[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
        return Checkpoint(
            model_config=ModelConfig.model_validate(header["model_config"]),
            height=header["height"],
            width=header["width"],
            map_id=header["map_id"],
            tensors=tensors,
            optimizer_step=header["optimizer_step"],
            global_step=header["global_step"],
            update=header["update"],
            rng_state=header.get("rng_state"),
            extra=header.get("extra") or {},
        )
    except CheckpointError:
        raise
    except (KeyError, ValueError, TypeError) as e:
        raise CheckpointError(f"Checkpoint {path} has a malformed header: {e}") from e


def restore_model(checkpoint: Checkpoint) -> EntityPolicy:
    model = EntityPolicy(checkpoint.model_config, checkpoint.height, checkpoint.width)
    try:
        model.load_state_dict({name: checkpoint.tensors[name] for name in checkpoint.parameter_names()})
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"Checkpoint does not match its model config: {e}") from e
    return model


def restore_optimizer(checkpoint: Checkpoint, model: EntityPolicy, optimizer: Adam):
    names = [name for name, _ in model.named_parameters()]
    try:
        first = [checkpoint.tensors[f"adam.m/{name}"] for name in names]
        second = [checkpoint.tensors[f"adam.v/{name}"] for name in names]
    except KeyError as e:
        raise CheckpointError(f"Checkpoint has no optimizer moments for {e}") from e
    optimizer.load_moments(checkpoint.optimizer_step, first, second)
