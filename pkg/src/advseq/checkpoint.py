"""Binary checkpoints: magic header, JSON manifest, raw tensor payloads.

Layout: the 7-byte magic ``ADVSEQ1``, a little-endian uint64 manifest byte
length, the UTF-8 JSON manifest ({"tensors": [{name, dtype, shape}...],
"meta": {...}}), then each tensor's little-endian bytes in manifest order.
Writing is deterministic, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .bilm import BiLm, BiLmConfig
from .errors import CheckpointFormatError
from .training import TrainConfig, TrainState
from .transformer import TransformerConfig

MAGIC = b"ADVSEQ1"


def save_tensors(path, named: dict, meta: dict | None = None) -> None:
    entries = []
    payloads = []
    for name, arr in named.items():
        arr = np.ascontiguousarray(arr)
        entries.append({"name": name, "dtype": arr.dtype.name,
                        "shape": list(arr.shape)})
        payloads.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    manifest = json.dumps({"format": 1, "tensors": entries, "meta": meta or {}},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for p in payloads:
            fh.write(p)


def load_tensors(path):
    """Returns ({name: array}, meta). Raises CheckpointFormatError on damage."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(
            f"{path}: bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}")
    off = len(MAGIC)
    if len(blob) < off + 8:
        raise CheckpointFormatError(f"{path}: truncated header")
    (mlen,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if len(blob) < off + mlen:
        raise CheckpointFormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[off:off + mlen].decode("utf-8"))
    except ValueError as e:
        raise CheckpointFormatError(f"{path}: unreadable manifest: {e}") from e
    off += mlen
    out = {}
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 1
        nbytes = count * dt.itemsize
        if len(blob) < off + nbytes:
            raise CheckpointFormatError(
                f"{path}: truncated payload for tensor {e['name']!r}")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=off)
        out[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"], copy=True)
        off += nbytes
    if off != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return out, manifest["meta"]


def _copy_into(tensor, name: str, arr: np.ndarray) -> None:
    if tuple(tensor.shape) != tuple(arr.shape):
        raise CheckpointFormatError(
            f"tensor {name!r}: checkpoint shape {tuple(arr.shape)} does not "
            f"match model shape {tuple(tensor.shape)}")
    if tensor.data.dtype != arr.dtype:
        raise CheckpointFormatError(
            f"tensor {name!r}: checkpoint dtype {arr.dtype.name} does not "
            f"match model dtype {tensor.data.dtype.name}")
    tensor.data[...] = arr


# ---------------------------------------------------------------------------
# Training state
# ---------------------------------------------------------------------------


def _state_arrays(state: TrainState) -> dict:
    mt = state.mt
    out = {f"mt.{n}": t.data for n, t in mt.params.items()}
    for prefix, bilm in (("lm_x", state.bilm_x), ("lm_y", state.bilm_y)):
        for n, t in bilm.params.items():
            if t is mt.src_embed or t is mt.trg_embed:
                continue  # aliased table, already saved under mt.*
            out[f"{prefix}.{n}"] = t.data
    out.update(state.optimizer.moment_arrays())
    return out


def save_state(state: TrainState, path, extra_meta: dict | None = None) -> None:
    opt = state.optimizer
    meta = {
        "kind": "train_state",
        "seed": state.seed,
        "step": state.step,
        "mt_config": dataclasses.asdict(state.mt.config),
        "optimizer": {"lr_scale": opt.lr_scale, "warmup": opt.warmup,
                      "betas": [opt.beta1, opt.beta2], "eps": opt.eps},
    }
    if extra_meta:
        meta.update(extra_meta)
    save_tensors(path, _state_arrays(state), meta)


def load_state(path) -> TrainState:
    """Rebuild a TrainState; embedding aliasing is reconstructed."""
    arrays, meta = load_tensors(path)
    if meta.get("kind") != "train_state":
        raise CheckpointFormatError(
            f"{path}: kind {meta.get('kind')!r} is not a training state")
    mt_cfg = TransformerConfig(**meta["mt_config"])
    opt_meta = meta["optimizer"]
    config = TrainConfig(lr_scale=opt_meta["lr_scale"], warmup=opt_meta["warmup"],
                         betas=tuple(opt_meta["betas"]), eps=opt_meta["eps"])
    state = TrainState.create(mt_cfg, config, seed=meta["seed"])
    expected = _state_arrays(state)
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise CheckpointFormatError(
            f"{path}: tensor set mismatch (missing {missing}, unexpected {extra})")
    moments = {}
    for name, arr in arrays.items():
        if name.startswith("adam."):
            moments[name] = arr
        elif name.startswith("mt."):
            _copy_into(state.mt.params[name[3:]], name, arr)
        elif name.startswith("lm_x."):
            _copy_into(state.bilm_x.params[name[5:]], name, arr)
        elif name.startswith("lm_y."):
            _copy_into(state.bilm_y.params[name[5:]], name, arr)
    state.optimizer.load_moment_arrays(moments, step_count=meta["step"])
    state.step = meta["step"]
    return state


# ---------------------------------------------------------------------------
# Standalone language models (pretraining artifacts)
# ---------------------------------------------------------------------------


def save_bilm(bilm: BiLm, path, extra_meta: dict | None = None) -> None:
    meta = {"kind": "bilm", "config": dataclasses.asdict(bilm.config)}
    if extra_meta:
        meta.update(extra_meta)
    save_tensors(path, {f"lm.{n}": t.data for n, t in bilm.params.items()}, meta)


def load_bilm(path) -> BiLm:
    arrays, meta = load_tensors(path)
    if meta.get("kind") != "bilm":
        raise CheckpointFormatError(
            f"{path}: kind {meta.get('kind')!r} is not a language model")
    bilm = BiLm(BiLmConfig(**meta["config"]), seed=0)
    expected = {f"lm.{n}" for n in bilm.params.names()}
    if expected != set(arrays):
        raise CheckpointFormatError(
            f"{path}: tensor set mismatch (missing {sorted(expected - set(arrays))}, "
            f"unexpected {sorted(set(arrays) - expected)})")
    for name, arr in arrays.items():
        _copy_into(bilm.params[name[3:]], name, arr)
    return bilm


def load_lm_into_state(state: TrainState, path, side: str) -> None:
    """Copy a pretrained LM's tensors into a training state.

    side: "x" (source) or "y" (target). The LM's embedding table lands in
    the shared table, so the translation model sees it too.
    """
    arrays, meta = load_tensors(path)
    if meta.get("kind") != "bilm":
        raise CheckpointFormatError(
            f"{path}: kind {meta.get('kind')!r} is not a language model")
    bilm = {"x": state.bilm_x, "y": state.bilm_y}.get(side)
    if bilm is None:
        raise ValueError(f"side must be 'x' or 'y', got {side!r}")
    expected = {f"lm.{n}" for n in bilm.params.names()}
    if expected != set(arrays):
        raise CheckpointFormatError(
            f"{path}: tensor set mismatch (missing {sorted(expected - set(arrays))}, "
            f"unexpected {sorted(set(arrays) - expected)})")
    for name, arr in arrays.items():
        _copy_into(bilm.params[name[3:]], name, arr)
