"""Binary checkpoint container for a ModelBundle or a stand-alone OcpModel.

Layout (all integers little-endian)::

    magic      8 bytes  b"PQPPCKPT"
    version    uint32   FORMAT_VERSION
    hdr_len    uint32   length of the header in bytes
    header     UTF-8 JSON (sorted keys): ``kind`` ("bundle" or "ocp"),
               configuration, encoders, scalers, label stats, metadata and
               the ordered tensor table ``[[name, shape], ...]``
    buffers    float64 little-endian, row-major, in tensor-table order
    crc32      uint32   CRC-32 of every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from ..domain import Catalog
from .encoding import FeatureEncoder, TargetScaler
from .ocp import OcpModel, OperatorCostPredictor
from .qpp import FORMAT_VERSION, Ablation, ModelBundle, ModelConfig

MAGIC = b"PQPPCKPT"


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _tensors(bundle):
    named = []
    if bundle.ocp is not None:
        named += [(p.name, p) for p in bundle.ocp.parameters()]
    named += [(p.name, p) for p in bundle.qpp_parameters()]
    names = [n for n, _ in named]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names in bundle")
    return named


def _header(bundle):
    return {
        "kind": "bundle",
        "format_version": FORMAT_VERSION,
        "config": bundle.config.to_dict(),
        "ablation": bundle.ablation.to_dict(),
        "seed": bundle.seed,
        "catalog": bundle.catalog.to_dict(),
        "label_stats": list(bundle.label_stats),
        "vertex_encoder": bundle.vertex_encoder.to_dict(),
        "raw_encoder": bundle.raw_encoder.to_dict() if bundle.raw_encoder else None,
        "ocp": _ocp_header(bundle.ocp) if bundle.ocp is not None else None,
        "meta": bundle.meta,
    }


def _pack(header: dict, named) -> bytes:
    header = dict(header, tensors=[[n, list(t.value.shape)] for n, t in named])
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<II", FORMAT_VERSION, len(raw))
    body += raw
    for _, t in named:
        body += np.ascontiguousarray(t.value, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def _unpack(data: bytes):
    """Verified ``(header, buffers)`` where buffers maps tensor name to array."""
    if len(data) < len(MAGIC) + 12 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointVersionError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint checksum mismatch (file is corrupted)")
    start = len(MAGIC) + 8
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from None
    offset, buffers = start + hlen, {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        if offset + 8 * count > len(data) - 4:
            raise CheckpointError("checkpoint is truncated")
        buffers[name] = np.frombuffer(data, dtype="<f8", count=count,
                                      offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(data) - 4:
        raise CheckpointError("checkpoint has trailing bytes")
    return header, buffers


def _assign(named, buffers):
    named = dict(named)
    if set(named) != set(buffers):
        raise CheckpointError("checkpoint tensors do not match the model layout")
    for name, arr in buffers.items():
        if named[name].value.shape != arr.shape:
            raise CheckpointError(f"tensor {name} has shape {arr.shape}, "
                                  f"model expects {named[name].value.shape}")
        named[name].value = arr


def _ocp_header(ocp):
    return {"pooled_scaler": ocp.pooled_scaler.to_dict(),
            "catalog": ocp.catalog.to_dict(),
            "types": {t: {"encoder": p.encoder.to_dict(), "scaler": p.scaler.to_dict(),
                          "hidden": list(p.hidden)}
                      for t, p in sorted(ocp.predictors.items())}}


def _ocp_from_header(h, catalog=None):
    catalog = catalog or Catalog.from_dict(h["catalog"])
    rng = np.random.default_rng(0)
    preds = {t: OperatorCostPredictor(t, FeatureEncoder.from_dict(v["encoder"]),
                                      TargetScaler.from_dict(v["scaler"]), v["hidden"], rng)
             for t, v in h["types"].items()}
    return OcpModel(preds, TargetScaler.from_dict(h["pooled_scaler"]), catalog)


def dumps_bundle(bundle) -> bytes:
    return _pack(_header(bundle), _tensors(bundle))


def save_bundle(bundle, path):
    with open(path, "wb") as f:
        f.write(dumps_bundle(bundle))


def loads_bundle(data: bytes) -> ModelBundle:
    header, buffers = _unpack(data)
    if header.get("kind") != "bundle":
        raise CheckpointError(f"expected a model bundle, found {header.get('kind')!r}")
    bundle = _bundle_from_header(header)
    _assign(_tensors(bundle), buffers)
    return bundle


def load_bundle(path) -> ModelBundle:
    with open(path, "rb") as f:
        return loads_bundle(f.read())


def save_ocp(ocp: OcpModel, path, meta=None):
    header = {"kind": "ocp", "ocp": _ocp_header(ocp), "meta": meta or {}}
    with open(path, "wb") as f:
        f.write(_pack(header, [(p.name, p) for p in ocp.parameters()]))


def load_ocp(path) -> OcpModel:
    with open(path, "rb") as f:
        header, buffers = _unpack(f.read())
    if header.get("kind") != "ocp":
        raise CheckpointError(f"expected cost predictors, found {header.get('kind')!r}")
    ocp = _ocp_from_header(header["ocp"])
    _assign([(p.name, p) for p in ocp.parameters()], buffers)
    return ocp


def _bundle_from_header(h) -> ModelBundle:
    catalog = Catalog.from_dict(h["catalog"])
    ocp = _ocp_from_header(h["ocp"], catalog) if h["ocp"] is not None else None
    raw = FeatureEncoder.from_dict(h["raw_encoder"]) if h["raw_encoder"] else None
    return ModelBundle(FeatureEncoder.from_dict(h["vertex_encoder"]), ocp=ocp, raw_encoder=raw,
                       config=ModelConfig.from_dict(h["config"]),
                       ablation=Ablation(**h["ablation"]), seed=h["seed"], catalog=catalog,
                       label_stats=h["label_stats"], meta=h["meta"])
