"""Checkpoint format: JSON manifest plus flat little-endian float64 binaries.

weights.bin holds the base section followed by the adapter section (when
adapters are attached); the manifest records tensor names, shapes,
offsets and a content hash per section, so a fine-tune checkpoint can
reference its base by hash and the adapter bytes remain separable.
Optimizer moments and the training rng state ride along in optim.bin /
the manifest, making resume bit-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .denoiser import Denoiser, DenoiserConfig, LoraConfig, attach_lora
from .errors import ConfigError

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"
OPTIM_NAME = "optim.bin"


def _pack_section(names: list[str], arrays: dict[str, np.ndarray], offset: int):
    table = []
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        blob = arr.tobytes()
        table.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    return table, payload, offset, hashlib.sha256(payload).hexdigest()


def _unpack_section(table: list[dict], payload: bytes) -> dict[str, np.ndarray]:
    out = {}
    base = table[0]["offset"] if table else 0
    for entry in table:
        lo = entry["offset"] - base
        hi = lo + entry["nbytes"]
        arr = np.frombuffer(payload[lo:hi], dtype="<f8").reshape(entry["shape"])
        out[entry["name"]] = arr.astype(np.float64)
    return out


@dataclass
class CheckpointData:
    """Everything needed to rebuild a model (and optionally resume)."""

    model: Denoiser
    manifest: dict
    optimizer_state: Optional[dict] = None
    rng_state: Optional[dict] = None
    epoch: int = 0

    @property
    def base_hash(self) -> str:
        return self.manifest["sections"]["base"]["content_hash"]


def save_checkpoint(
    path,
    model: Denoiser,
    optimizer_state: Optional[dict] = None,
    rng_state: Optional[dict] = None,
    epoch: int = 0,
    train_config: Optional[dict] = None,
) -> Path:
    """Write manifest + binaries under path (a directory)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    state = model.state_dict()
    adapter_names = sorted(model._adapter_names)
    base_names = sorted(n for n in state if n not in model._adapter_names)

    base_table, base_payload, offset, base_hash = _pack_section(base_names, state, 0)
    sections = {"base": {"tensors": base_table, "content_hash": base_hash}}
    payload = base_payload
    if adapter_names:
        ad_table, ad_payload, offset, ad_hash = _pack_section(adapter_names, state, offset)
        sections["adapter"] = {
            "tensors": ad_table,
            "content_hash": ad_hash,
            "base_content_hash": base_hash,
        }
        payload += ad_payload

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "endianness": "little",
        "dtype": "float64",
        "model_config": model.cfg.to_dict(),
        "lora_config": model.lora.to_dict() if model.lora else None,
        "config_hash": model.config_hash(),
        "sections": sections,
        "epoch": int(epoch),
        # json carries the >64-bit PCG64 state ints natively
        "rng_state": rng_state,
        "train_config": train_config,
    }

    (path / WEIGHTS_NAME).write_bytes(payload)
    if optimizer_state is not None:
        opt_names = sorted(k for k in optimizer_state if k != "_step")
        flat = {}
        for name in opt_names:
            flat[f"{name}.m"] = optimizer_state[name]["m"]
            flat[f"{name}.v"] = optimizer_state[name]["v"]
        table, opt_payload, _, opt_hash = _pack_section(sorted(flat), flat, 0)
        manifest["optimizer"] = {
            "tensors": table,
            "content_hash": opt_hash,
            "step": int(optimizer_state["_step"]),
        }
        (path / OPTIM_NAME).write_bytes(opt_payload)

    (path / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path


def load_checkpoint(path) -> CheckpointData:
    """Rebuild the model (attaching adapters when recorded) and extras."""
    path = Path(path)
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported checkpoint schema {manifest.get('schema_version')}")
    payload = (path / WEIGHTS_NAME).read_bytes()

    cfg = DenoiserConfig(**manifest["model_config"])
    model = Denoiser(cfg, np.random.default_rng(0))
    lora_doc = manifest.get("lora_config")
    if lora_doc:
        lora = LoraConfig(r=lora_doc["r"], alpha=lora_doc["alpha"], targets=tuple(lora_doc["targets"]))
        attach_lora(model, lora, np.random.default_rng(0))

    state = {}
    for key in ("base", "adapter"):
        section = manifest["sections"].get(key)
        if not section:
            continue
        lo = section["tensors"][0]["offset"] if section["tensors"] else 0
        hi = lo + sum(e["nbytes"] for e in section["tensors"])
        chunk = payload[lo:hi]
        if hashlib.sha256(chunk).hexdigest() != section["content_hash"]:
            raise ConfigError(f"checkpoint section {key} failed its content hash")
        state.update(_unpack_section(section["tensors"], chunk))
    model.load_state_dict(state)

    optimizer_state = None
    opt_doc = manifest.get("optimizer")
    if opt_doc:
        opt_payload = (path / OPTIM_NAME).read_bytes()
        if hashlib.sha256(opt_payload).hexdigest() != opt_doc["content_hash"]:
            raise ConfigError("optimizer section failed its content hash")
        flat = _unpack_section(opt_doc["tensors"], opt_payload)
        optimizer_state = {"_step": opt_doc["step"]}
        for key, arr in flat.items():
            name, kind = key.rsplit(".", 1)
            optimizer_state.setdefault(name, {})[kind] = arr
    return CheckpointData(
        model=model,
        manifest=manifest,
        optimizer_state=optimizer_state,
        rng_state=manifest.get("rng_state"),
        epoch=int(manifest.get("epoch", 0)),
    )
