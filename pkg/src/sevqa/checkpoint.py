"""Binary checkpoint container shared by model, adapter and train-state files.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then
the raw little-endian float64 tensor payload in the order listed by the
header's "tensors" field. The header records a format version, the file
kind ("model" / "adapter" / "train_state"), the model or adapter config,
the vocabulary, training provenance (mode, stage reached, seed), and a
sha256 of the payload used to detect truncation or corruption.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .lora import AdaptedModel, LoraConfig, attach
from .model import Model, ModelConfig, Vocab, init_model

FORMAT_VERSION = 1


class VersionMismatch(ValueError):
    pass


class CorruptFile(ValueError):
    pass


class MissingBase(ValueError):
    pass


def write_container(path: str | Path, header: dict, named_tensors: list[tuple[str, np.ndarray]]) -> None:
    payload = b"".join(np.asarray(a, dtype=np.float64).astype("<f8").tobytes() for _, a in named_tensors)
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = [{"name": n, "shape": list(np.asarray(a).shape)} for n, a in named_tensors]
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    blob = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CorruptFile(f"{path}: too short for a header")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + hlen:
        raise CorruptFile(f"{path}: truncated header")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: format version {header.get('format_version')}, expected {FORMAT_VERSION}"
        )
    payload = raw[8 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CorruptFile(f"{path}: payload checksum mismatch")
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        chunk = payload[offset : offset + 8 * n]
        if len(chunk) != 8 * n:
            raise CorruptFile(f"{path}: payload ends inside tensor {spec['name']!r}")
        tensors[spec["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += 8 * n
    return header, tensors


def _provenance(provenance: dict | None) -> dict:
    out = {"mode": None, "stage": None, "seed": None}
    if provenance:
        out.update(provenance)
    return out


def save_model(model: Model, vocab: Vocab, path: str | Path, provenance: dict | None = None) -> None:
    header = {
        "kind": "model",
        "config": model.config.as_dict(),
        "vocab": list(vocab.chars),
        "provenance": _provenance(provenance),
    }
    write_container(path, header, [(n, t.data) for n, t in model.param_items()])


def load_model(path: str | Path) -> tuple[Model, Vocab, dict]:
    header, tensors = read_container(path)
    if header.get("kind") == "adapter":
        raise MissingBase(f"{path} holds adapters only; load it with its base model")
    if header.get("kind") != "model":
        raise CorruptFile(f"{path}: kind {header.get('kind')!r} is not a model checkpoint")
    model = init_model(ModelConfig(**header["config"]))
    for name, tensor in model.param_items():
        if name not in tensors:
            raise CorruptFile(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != tensor.data.shape:
            raise CorruptFile(f"{path}: tensor {name!r} has shape {tensors[name].shape}")
        tensor.data = tensors[name]
    return model, Vocab(header["vocab"]), header


def save_adapter(adapted: AdaptedModel, path: str | Path, provenance: dict | None = None) -> None:
    header = {
        "kind": "adapter",
        "adapter_only": True,
        "lora_config": adapted.lora_config.as_dict(),
        "base_config": adapted.base.config.as_dict(),
        "provenance": _provenance(provenance),
    }
    write_container(path, header, [(n, t.data) for n, t in adapted.adapter_items()])


def load_adapter(path: str | Path, base: Model | None) -> tuple[AdaptedModel, dict]:
    header, tensors = read_container(path)
    if header.get("kind") != "adapter":
        raise CorruptFile(f"{path}: kind {header.get('kind')!r} is not an adapter checkpoint")
    if base is None:
        raise MissingBase(f"{path} holds adapters only; pass the base model to load it")
    if header["base_config"] != base.config.as_dict():
        raise CorruptFile(f"{path}: adapter was trained on a differently-shaped base")
    cfg = header["lora_config"]
    adapted = attach(base, LoraConfig(rank=cfg["rank"], alpha=cfg["alpha"],
                                      targets=tuple(cfg["targets"]), seed=cfg["seed"]))
    for name, tensor in adapted.adapter_items():
        if name not in tensors:
            raise CorruptFile(f"{path}: missing tensor {name!r}")
        tensor.data = tensors[name]
    return adapted, header
