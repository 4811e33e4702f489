"""On-disk artifacts: checkpoints, learngene packs, teacher logit caches.

One container format serves all three. Layout:

    magic   4 bytes  b"SWS1"
    version u32 LE   (currently 1; anything else is rejected)
    hlen    u64 LE   byte length of the header that follows
    header  UTF-8 JSON, keys sorted, compact separators, space-padded to a
            multiple of 8 bytes: {"kind": ..., "meta": {...}, "tensors":
            [{"length", "name", "offset", "shape"}, ...]}
    payload raw little-endian float32, each tensor starting at an 8-byte
            aligned offset relative to the payload start

Offsets are assigned to names in sorted order, so writing the same content
twice yields byte-identical files. Writes go through a temp file plus rename
and never leave a partial artifact behind. Storage is always 32-bit; float64
inputs are cast on save. No compression, no checksum.

Every way a file can be wrong maps to its own exception type so callers can
tell a stale path from a corrupt artifact from a version skew.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Iterable, Mapping

import numpy as np

from .sharing import LearngenePack, StagePlan, check_tying, custom_plan
from .tensor import Tensor
from .train import LogitCache
from .vit import LayerParams, ModelConfig, ModelParams

MAGIC = b"SWS1"
VERSION = 1
KINDS = ("checkpoint", "learngene", "logitcache")

_HEAD = struct.Struct("<IQ")  # version, header length


class StoreError(Exception):
    pass


class BadMagicError(StoreError):
    pass


class VersionError(StoreError):
    pass


class KindError(StoreError):
    pass


class TruncatedError(StoreError):
    pass


class OverlapError(StoreError):
    pass


class HeaderError(StoreError):
    pass


def _align8(n: int) -> int:
    return (n + 7) & ~7


def save(path, kind: str, tensors: "Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]",
         meta: dict | None = None) -> None:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    pairs = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    names = [n for n, _ in pairs]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise ValueError(f"duplicate tensor names: {dup}")
    arrays: dict[str, np.ndarray] = {}
    for name, arr in pairs:
        # asarray, not ascontiguousarray: the latter inflates 0-d shapes to (1,).
        arr = np.asarray(arr, dtype="<f4", order="C")
        if not np.isfinite(arr).all():
            raise ValueError(f"tensor {name!r} has non-finite values")
        arrays[name] = arr

    index = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        length = arr.size * 4
        index.append({"length": length, "name": name,
                      "offset": offset, "shape": list(arr.shape)})
        offset = _align8(offset + length)

    header = json.dumps({"kind": kind, "meta": meta or {}, "tensors": index},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    header += b" " * (_align8(len(header)) - len(header))

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(_HEAD.pack(VERSION, len(header)))
            fh.write(header)
            pos = 0
            for entry in index:
                fh.write(b"\x00" * (entry["offset"] - pos))
                raw = arrays[entry["name"]].tobytes()
                fh.write(raw)
                pos = entry["offset"] + len(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path, expected_kind: str) -> tuple[dict[str, np.ndarray], dict]:
    if expected_kind not in KINDS:
        raise ValueError(f"expected_kind must be one of {KINDS}, got {expected_kind!r}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedError(f"{path}: {len(raw)} bytes is too short for the magic")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 4 + _HEAD.size:
        raise TruncatedError(f"{path}: truncated before the header fields")
    version, hlen = _HEAD.unpack_from(raw, 4)
    if version != VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads {VERSION}")
    payload_at = 4 + _HEAD.size + hlen
    if len(raw) < payload_at:
        raise TruncatedError(f"{path}: header claims {hlen} bytes, file ends early")
    try:
        header = json.loads(raw[4 + _HEAD.size:payload_at].decode("utf-8"))
        kind, meta, index = header["kind"], header["meta"], header["tensors"]
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise HeaderError(f"{path}: undecodable header: {e}") from None
    if kind != expected_kind:
        raise KindError(f"{path}: kind {kind!r}, expected {expected_kind!r}")

    spans = []
    out: dict[str, np.ndarray] = {}
    for entry in index:
        try:
            name, shape = entry["name"], tuple(int(s) for s in entry["shape"])
            off, length = int(entry["offset"]), int(entry["length"])
        except (KeyError, TypeError, ValueError):
            raise HeaderError(f"{path}: malformed index entry {entry!r}") from None
        want = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if length != want or off < 0 or off % 8 != 0:
            raise HeaderError(f"{path}: entry {name!r} has offset {off}, length {length}, shape {shape}")
        if payload_at + off + length > len(raw):
            raise TruncatedError(f"{path}: tensor {name!r} extends past end of file")
        spans.append((off, off + length, name))
        arr = np.frombuffer(raw, dtype="<f4", count=length // 4, offset=payload_at + off)
        out[name] = arr.reshape(shape).copy()
    spans.sort()
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise OverlapError(f"{path}: tensors {an!r} and {bn!r} overlap")
    return out, meta


# ---- model checkpoints -----------------------------------------------------------


def _layer_arrays(prefix: str, lp: LayerParams) -> Iterable[tuple[str, np.ndarray]]:
    for name, t in lp.named():
        yield f"{prefix}.{name}", t.data


def _layer_from(arrays: dict[str, np.ndarray], prefix: str) -> LayerParams:
    kw = {}
    for name in LayerParams.FIELDS:
        key = f"{prefix}.{name}"
        if key not in arrays:
            raise HeaderError(f"checkpoint is missing tensor {key!r}")
        kw[name] = Tensor(arrays[key], requires_grad=True)
    return LayerParams(**kw)


def _shared_arrays(params) -> Iterable[tuple[str, np.ndarray]]:
    for name in ModelParams.SHARED_FIELDS:
        yield name, getattr(params, name).data


def _shared_kwargs(arrays: dict[str, np.ndarray]) -> dict:
    kw = {}
    for name in ModelParams.SHARED_FIELDS:
        if name not in arrays:
            raise HeaderError(f"artifact is missing tensor {name!r}")
        kw[name] = Tensor(arrays[name], requires_grad=True)
    return kw


def save_checkpoint(params: ModelParams, path, provenance: dict | None = None) -> None:
    """Tied models store one stage set per stage plus the plan; untied models
    store one set per position. Either way the load reproduces the aliasing."""
    pairs = list(_shared_arrays(params))
    meta: dict = {"cfg": params.cfg.to_dict(), "provenance": provenance or {}}
    if params.plan is not None:
        check_tying(params)
        from .sharing import stage_sets
        for m, lp in enumerate(stage_sets(params)):
            pairs.extend(_layer_arrays(f"stage{m:02d}", lp))
        meta["plan"] = list(params.plan.stage_sizes)
    else:
        for i, lp in enumerate(params.layers):
            pairs.extend(_layer_arrays(f"layer{i:02d}", lp))
    save(path, "checkpoint", pairs, meta)


def load_checkpoint(path) -> ModelParams:
    arrays, meta = load(path, "checkpoint")
    cfg = ModelConfig.from_dict(meta["cfg"])
    shared = _shared_kwargs(arrays)
    if "plan" in meta:
        plan = StagePlan(tuple(int(s) for s in meta["plan"]))
        sets = [_layer_from(arrays, f"stage{m:02d}") for m in range(plan.num_stages)]
        layers = [sets[m] for m in plan.stage_of_position()]
    else:
        plan = None
        layers = [_layer_from(arrays, f"layer{i:02d}") for i in range(cfg.depth)]
    return ModelParams(cfg=cfg, layers=layers, plan=plan, **shared)


# ---- learngene packs ---------------------------------------------------------------


def save_learngene(pack: LearngenePack, path) -> None:
    pairs = list(_shared_arrays(pack))
    for m, lp in enumerate(pack.layer_sets):
        pairs.extend(_layer_arrays(f"gene{m:02d}", lp))
    meta = {"cfg": pack.cfg.to_dict(), "plan": list(pack.plan.stage_sizes),
            "provenance": pack.provenance, "pack_version": pack.version}
    save(path, "learngene", pairs, meta)


def load_learngene(path) -> LearngenePack:
    arrays, meta = load(path, "learngene")
    plan = custom_plan(meta["plan"])
    return LearngenePack(
        cfg=ModelConfig.from_dict(meta["cfg"]),
        plan=plan,
        layer_sets=[_layer_from(arrays, f"gene{m:02d}") for m in range(plan.num_stages)],
        provenance=meta.get("provenance", {}),
        version=int(meta.get("pack_version", 1)),
        **_shared_kwargs(arrays),
    )


# ---- teacher logit caches -------------------------------------------------------------


def save_logit_cache(cache: LogitCache, path) -> None:
    meta = {"dataset_hash": f"{cache.dataset_hash:#018x}", "rows": int(cache.logits.shape[0])}
    save(path, "logitcache", {"logits": cache.logits}, meta)


def load_logit_cache(path) -> LogitCache:
    arrays, meta = load(path, "logitcache")
    if "logits" not in arrays:
        raise HeaderError(f"{path}: logit cache without a 'logits' tensor")
    return LogitCache(logits=arrays["logits"], dataset_hash=int(meta["dataset_hash"], 16))
