"""Checkpoint container: a directory holding ``manifest.json`` and ``blob.bin``.

The manifest lists every tensor (name, shape, dtype, byte offset, byte
length) plus a free-form ``meta`` object; the blob is the little-endian
concatenation of the tensors in manifest order.  Round-trips are bit-exact.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any

import numpy as np
import torch

FORMAT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.bool: "|b1"}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | Path, tensors: dict[str, torch.Tensor], kind: str, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {t.dtype}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype], "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, "tensors": entries, "meta": meta or {}}
    (path / "blob.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=False), encoding="utf-8")
    return path


def _field(d: dict, key: str, where: str):
    if key not in d:
        raise CheckpointError(f"manifest field {where}{key!r} missing")
    return d[key]


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], str, dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"no manifest.json in {path}") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"manifest.json is not valid JSON: {e}") from None
    version = _field(manifest, "format_version", "")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"manifest field 'format_version' is {version}, expected {FORMAT_VERSION}")
    blob = (path / "blob.bin").read_bytes() if (path / "blob.bin").exists() else b""
    out = {}
    for i, e in enumerate(_field(manifest, "tensors", "")):
        name = _field(e, "name", f"tensors[{i}].")
        shape, dtype = _field(e, "shape", f"{name}."), _field(e, "dtype", f"{name}.")
        offset, nbytes = _field(e, "offset", f"{name}."), _field(e, "nbytes", f"{name}.")
        if dtype not in _TORCH:
            raise CheckpointError(f"tensor {name!r}: field 'dtype' has unknown value {dtype!r}")
        itemsize = np.dtype(dtype).itemsize
        if math.prod(shape) * itemsize != nbytes:
            raise CheckpointError(f"tensor {name!r}: field 'shape' {shape} does not match nbytes {nbytes}")
        if offset + nbytes > len(blob):
            raise CheckpointError(f"tensor {name!r}: blob truncated ({len(blob)} bytes, need {offset + nbytes})")
        arr = np.frombuffer(blob, dtype=dtype, count=math.prod(shape), offset=offset).reshape(shape)
        out[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return out, _field(manifest, "kind", ""), manifest.get("meta", {})


# ------------------------------------------------------------ typed objects


def save_checkpoint(obj: Any, path: str | Path) -> Path:
    """Persist a ParamStore, DataModelBundle, Metanetwork, Dataset or NeuralGraph."""
    from .data import Dataset
    from ..graphcodec import NeuralGraph
    from ..metanet import Metanetwork
    from ..metatrain import DataModelBundle

    if isinstance(obj, DataModelBundle):
        meta = {"spec": obj.spec.to_dict(), "provenance": obj.provenance, "role": obj.role}
        return save_tensors(path, obj.params, "bundle", meta)
    if isinstance(obj, Metanetwork):
        state = {k: v for k, v in obj.state_dict().items()}
        return save_tensors(path, state, "metanet", {"config": obj.cfg.to_dict()})
    if isinstance(obj, Dataset):
        return save_tensors(path, {"x": obj.x, "y": obj.y}, "dataset", {"split": obj.split, "provenance": obj.provenance})
    if isinstance(obj, NeuralGraph):
        tensors = {
            "node_feat": obj.node_feat,
            "edge_index": obj.edge_index,
            "edge_feat": obj.edge_feat,
            "edge_family": obj.edge_family,
        }
        return save_tensors(path, tensors, "graph", {"codec": obj.codec.to_json()})
    if isinstance(obj, dict):
        return save_tensors(path, obj, "params")
    raise CheckpointError(f"cannot checkpoint object of type {type(obj).__name__}")


def load_checkpoint(path: str | Path) -> Any:
    from .data import Dataset
    from ..graphcodec import CodecMap, NeuralGraph
    from ..metanet import MetanetConfig, load_metanet_state
    from ..metatrain import DataModelBundle
    from ..netmodel import NetworkSpec

    tensors, kind, meta = load_tensors(path)
    try:
        if kind == "params":
            return tensors
        if kind == "bundle":
            spec = NetworkSpec.from_dict(meta["spec"])
            bundle = DataModelBundle(spec, tensors, meta.get("provenance", {}), meta.get("role", "train"))
            expected = _expected_shapes(spec)
            if set(expected) != set(tensors):
                raise CheckpointError(f"bundle tensors do not match the spec: {sorted(set(expected) ^ set(tensors))[:4]}")
            for name, shape in expected.items():
                if tuple(tensors[name].shape) != shape:
                    raise CheckpointError(f"tensor {name!r}: field 'shape' {list(tensors[name].shape)} does not match the spec")
            return bundle
        if kind == "metanet":
            return load_metanet_state(MetanetConfig.from_dict(meta["config"]), tensors)
        if kind == "dataset":
            return Dataset(tensors["x"], tensors["y"], meta.get("split", "train"), meta.get("provenance", {}))
        if kind == "graph":
            codec = CodecMap.from_json(meta["codec"])
            return NeuralGraph(tensors["node_feat"], tensors["edge_index"], tensors["edge_feat"], tensors["edge_family"], codec)
    except KeyError as e:
        raise CheckpointError(f"manifest field {e.args[0]!r} missing for kind {kind!r}") from None
    except RuntimeError as e:  # state_dict shape mismatch
        raise CheckpointError(f"{kind} checkpoint does not match its config: {e}") from None
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def _expected_shapes(spec) -> dict[str, tuple]:
    from ..netmodel import init_params

    return {k: tuple(v.shape) for k, v in init_params(spec, 0).items()}
