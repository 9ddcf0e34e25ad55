"""Binary model checkpoints.

Layout: magic "VQGM", u32 version, u64 header length, a canonical JSON
header, then the raw float64 payload (little-endian, contiguous) for
every parameter, buffer, and optimizer array in header order. The header
embeds the model config and the vocabulary, so a checkpoint alone is
enough to rebuild the model. Writing is deterministic: the same state
always produces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError
from .model import ModelConfig, VqgModel
from .tensor import Adam
from .text import Vocabulary

MAGIC = b"VQGM"
VERSION = 1


def canonical_json(obj) -> str:
    """Key-sorted, separator-pinned JSON; equal objects give equal bytes."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """Short stable digest of any JSON-serializable configuration."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def vocab_hash(vocab: Vocabulary) -> str:
    """Digest of the vocabulary's saved byte representation."""
    text = "".join(t + "\n" for t in vocab.non_special_tokens())
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class OptimizerState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    arrays: dict[str, np.ndarray]


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: Vocabulary
    seed: int
    step: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    opt: OptimizerState | None
    extra: dict


def _payload(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(
    path: str | Path,
    model: VqgModel,
    optimizer: Adam | None = None,
    step: int = 0,
    extra: dict | None = None,
) -> None:
    params = model.parameters()
    buffers = model.buffers()
    header = {
        "config": model.config.to_json_dict(),
        "vocab": model.vocab.non_special_tokens(),
        "seed": model.seed,
        "step": int(step),
        "rng": {"kind": "stateless", "seed": model.seed},
        "extra": extra or {},
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params],
        "buffers": [{"name": n, "shape": list(b.shape)} for n, b in sorted(buffers.items())],
        "opt": None,
    }
    chunks = [_payload(p.data) for _, p in params]
    chunks += [_payload(b) for _, b in sorted(buffers.items())]
    if optimizer is not None:
        arrays = optimizer.state_arrays()
        header["opt"] = {
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "arrays": [{"name": k, "shape": list(arrays[k].shape)} for k in sorted(arrays)],
        }
        chunks += [_payload(arrays[k]) for k in sorted(arrays)]
    blob = canonical_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise ParseError(f"{path}: not a model checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    if 16 + header_len > len(raw):
        raise ParseError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt checkpoint header: {exc}") from exc

    offset = 16 + header_len

    def take(shape: list[int]) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ParseError(f"{path}: truncated checkpoint payload")
        arr = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape)
        offset = end
        return arr.astype(np.float64)

    params = {spec["name"]: take(spec["shape"]) for spec in header["params"]}
    buffers = {spec["name"]: take(spec["shape"]) for spec in header["buffers"]}
    opt = None
    if header.get("opt"):
        blob = header["opt"]
        arrays = {spec["name"]: take(spec["shape"]) for spec in blob["arrays"]}
        opt = OptimizerState(
            lr=blob["lr"], beta1=blob["beta1"], beta2=blob["beta2"], eps=blob["eps"],
            arrays=arrays,
        )
    if offset != len(raw):
        raise ParseError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return Checkpoint(
        config=ModelConfig.from_json_dict(header["config"]),
        vocab=Vocabulary(header["vocab"]),
        seed=int(header["seed"]),
        step=int(header["step"]),
        params=params,
        buffers=buffers,
        opt=opt,
        extra=header.get("extra", {}),
    )


def build_model(ckpt: Checkpoint) -> VqgModel:
    """Rebuild the network and load the saved parameters and buffers."""
    model = VqgModel(ckpt.config, ckpt.vocab, seed=ckpt.seed)
    live = dict(model.parameters())
    if set(live) != set(ckpt.params):
        missing = sorted(set(live) - set(ckpt.params))
        extra = sorted(set(ckpt.params) - set(live))
        raise DataError(f"checkpoint parameter mismatch: missing={missing} extra={extra}")
    for name, arr in ckpt.params.items():
        if live[name].data.shape != arr.shape:
            raise DataError(
                f"parameter {name}: checkpoint shape {arr.shape} != model {live[name].data.shape}"
            )
        live[name].data[:] = arr
    buffers = model.buffers()
    if set(buffers) != set(ckpt.buffers):
        raise DataError("checkpoint buffer names do not match the rebuilt model")
    for name, arr in ckpt.buffers.items():
        buffers[name][:] = arr
    return model


def build_optimizer(ckpt: Checkpoint, model: VqgModel) -> Adam | None:
    """Rebuild the optimizer over the model's trainable parameters."""
    if ckpt.opt is None:
        return None
    opt = Adam(
        [p for _, p in model.trainable_parameters()],
        lr=ckpt.opt.lr, beta1=ckpt.opt.beta1, beta2=ckpt.opt.beta2, eps=ckpt.opt.eps,
    )
    expected = 2 * len(opt.params) + 1
    if len(ckpt.opt.arrays) != expected:
        raise DataError(
            f"optimizer state has {len(ckpt.opt.arrays)} arrays, expected {expected}"
        )
    opt.load_state_arrays(ckpt.opt.arrays)
    return opt
