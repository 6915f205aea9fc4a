"""Binary containers for checkpoints and score matrices.

Checkpoint layout (little endian)::

    b"STARCKPT" | u16 version | u64 header length | JSON header | tensor bytes

The header lists every tensor as ``{name, dtype, shape, offset, nbytes}``
with offsets relative to the start of the tensor section. JSON is written
with sorted keys so save -> load -> save reproduces the same bytes.

Score matrix layout::

    b"KGSCORES" | u16 version | u32 meta length | JSON meta | u32 n_blocks
    then per block: i64 query_id | u8 direction | u32 count | count x f64
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

CKPT_MAGIC = b"STARCKPT"
SCORE_MAGIC = b"KGSCORES"
FORMAT_VERSION = 1
_BLOCK = struct.Struct("<qBI")


class FormatError(ValueError):
    pass


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_container(path, kind: str, meta: dict, tensors: dict):
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = _dumps({"kind": kind, "meta": meta, "tensors": entries})
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HQ", FORMAT_VERSION, len(header)) + header)
        for raw in chunks:
            fh.write(raw)


def load_container(path):
    """Returns ``(kind, meta, {name: ndarray})``."""
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint container")
    version, hlen = struct.unpack_from("<HQ", data, 8)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    start = 8 + struct.calcsize("<HQ")
    header = json.loads(data[start : start + hlen])
    body = start + hlen
    tensors = {}
    for e in header["tensors"]:
        lo = body + e["offset"]
        tensors[e["name"]] = np.frombuffer(data[lo : lo + e["nbytes"]], dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["kind"], header["meta"], tensors


def _state(module: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, tensors: dict):
    module.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})


def save_star(path, model):
    meta = {
        "config": model.cfg.to_dict(),
        "vocab": model.vocab.itos,
        "metric": model.metric.value,
        "hidden": model.head.fc.out_features,
        "version": model.version,
    }
    save_container(path, "star", meta, _state(model))


def load_star(path):
    from .encoder import EncoderConfig, Vocabulary
    from .scoring import StarModel

    kind, meta, tensors = load_container(path)
    if kind != "star":
        raise FormatError(f"{path}: expected a star checkpoint, found {kind!r}")
    vocab = Vocabulary(meta["vocab"][len(Vocabulary.RESERVED) :])
    model = StarModel(EncoderConfig(**meta["config"]), vocab, metric=meta["metric"], hidden=meta["hidden"])
    _load_state(model, tensors)
    model.version = meta["version"]
    model.eval()
    return model


def save_cross(path, model):
    meta = {"config": model.cfg.to_dict(), "vocab": model.vocab.itos, "hidden": model.head.fc.out_features, "version": model.version}
    save_container(path, "cross", meta, _state(model))


def load_cross(path):
    from .encoder import EncoderConfig, Vocabulary
    from .scoring import CrossEncoder

    kind, meta, tensors = load_container(path)
    if kind != "cross":
        raise FormatError(f"{path}: expected a cross-encoder checkpoint, found {kind!r}")
    model = CrossEncoder(EncoderConfig(**meta["config"]), Vocabulary(meta["vocab"][4:]), hidden=meta["hidden"])
    _load_state(model, tensors)
    model.version = meta["version"]
    return model.eval()


def save_geo(path, emb, config=None):
    meta = {
        "kind": emb.kind,
        "p": emb.p,
        "config": config or {},
        "entity_keys": list(emb.entity_keys) if emb.entity_keys is not None else None,
        "relation_keys": list(emb.relation_keys) if emb.relation_keys is not None else None,
    }
    save_container(path, "geo", meta, {"entity": emb.entity, "relation": emb.relation})


def load_geo(path):
    from .geo import GeoEmbeddings

    kind, meta, tensors = load_container(path)
    if kind != "geo":
        raise FormatError(f"{path}: expected geo embeddings, found {kind!r}")
    ek, rk = (tuple(meta[k]) if meta.get(k) is not None else None for k in ("entity_keys", "relation_keys"))
    return GeoEmbeddings(meta["kind"], tensors["entity"], tensors["relation"], meta["p"], ek, rk)


def save_entity_cache(path, cache):
    save_container(path, "entity_cache", {"version": cache.version}, {"reps": cache.reps.detach().cpu().numpy()})


def load_entity_cache(path):
    from .encoder import EntityRepCache

    kind, meta, tensors = load_container(path)
    if kind != "entity_cache":
        raise FormatError(f"{path}: expected an entity cache, found {kind!r}")
    return EntityRepCache(torch.from_numpy(tensors["reps"]), meta["version"])


def save_ensemble(path, ens):
    meta = {"config": ens.cfg.to_dict(), "d_in": ens.mlp.d_in if ens.mlp is not None else None}
    save_container(path, "ensemble", meta, _state(ens.mlp) if ens.mlp is not None else {})


def load_ensemble(path):
    from .ensemble import EnsembleConfig, SelfAdaptiveEnsemble

    kind, meta, tensors = load_container(path)
    if kind != "ensemble":
        raise FormatError(f"{path}: expected an ensemble checkpoint, found {kind!r}")
    ens = SelfAdaptiveEnsemble(EnsembleConfig(**meta["config"]), meta["d_in"])
    if ens.mlp is not None:
        _load_state(ens.mlp, tensors)
    return ens


def write_score_matrix(path, blocks, meta=None):
    """``blocks``: iterable of ``(query_id, direction, scores)``."""
    blocks = list(blocks)
    m = _dumps(meta or {})
    with open(path, "wb") as fh:
        fh.write(SCORE_MAGIC + struct.pack("<HI", FORMAT_VERSION, len(m)) + m + struct.pack("<I", len(blocks)))
        for qid, direction, scores in blocks:
            arr = np.ascontiguousarray(scores, dtype="<f8")
            fh.write(_BLOCK.pack(int(qid), int(direction), arr.size) + arr.tobytes())


def read_score_matrix(path):
    """Returns ``(meta, {query_id: (direction, scores)})``."""
    data = Path(path).read_bytes()
    if data[:8] != SCORE_MAGIC:
        raise FormatError(f"{path}: not a score matrix")
    version, mlen = struct.unpack_from("<HI", data, 8)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported score matrix version {version}")
    pos = 8 + struct.calcsize("<HI")
    meta = json.loads(data[pos : pos + mlen])
    pos += mlen
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    blocks = {}
    for _ in range(n):
        qid, direction, count = _BLOCK.unpack_from(data, pos)
        pos += _BLOCK.size
        blocks[qid] = (direction, np.frombuffer(data, dtype="<f8", count=count, offset=pos).copy())
        pos += 8 * count
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after {n} blocks")
    return meta, blocks


_LOADERS = {"star": load_star, "cross": load_cross, "geo": load_geo, "entity_cache": load_entity_cache, "ensemble": load_ensemble}


def checkpoint_kind(path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(8 + struct.calcsize("<HQ"))
    if head[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint container")
    _, hlen = struct.unpack_from("<HQ", head, 8)
    with open(path, "rb") as fh:
        fh.seek(len(head))
        return json.loads(fh.read(hlen))["kind"]


def load_any(path):
    """Returns ``(kind, object)`` for any checkpoint written by this module."""
    kind = checkpoint_kind(path)
    if kind not in _LOADERS:
        raise FormatError(f"{path}: unknown checkpoint kind {kind!r}")
    return kind, _LOADERS[kind](path)
