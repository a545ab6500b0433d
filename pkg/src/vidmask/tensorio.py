"""Flat little-endian binary containers for tensors and model weights.

Tensor container: magic "VMTF", u32 version, u32 tensor count, then per
tensor u32 name length, UTF-8 name, u32 ndim, u32 dims, row-major float32
data. Model container: magic "VMWT", u32 version, the config fields, then an
embedded tensor section holding the named weights.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .masks import GridSpec
from .model import BlockWeights, ModelConfig, ViTBackbone

TENSOR_MAGIC = b"VMTF"
MODEL_MAGIC = b"VMWT"
FORMAT_VERSION = 1

_BLOCK_FIELDS = (
    "ln1_gamma", "ln1_beta", "qkv_weight", "qkv_bias", "proj_weight", "proj_bias",
    "ln2_gamma", "ln2_beta", "fc1_weight", "fc1_bias", "fc2_weight", "fc2_bias",
)


def _write_tensor(f, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<I", data.ndim))
    f.write(struct.pack(f"<{data.ndim}I", *data.shape))
    f.write(data.tobytes(order="C"))


def _read_exact(f, size: int) -> bytes:
    buf = f.read(size)
    if len(buf) != size:
        raise ValueError("truncated tensor container")
    return buf


def _read_tensor(f):
    (name_len,) = struct.unpack("<I", _read_exact(f, 4))
    name = _read_exact(f, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(f, 4))
    dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(dims)
    return name, data.astype(np.float64)


def _write_tensor_section(f, tensors: dict) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        _write_tensor(f, name, arr)


def _read_tensor_section(f) -> dict:
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    tensors = {}
    for _ in range(count):
        name, arr = _read_tensor(f)
        tensors[name] = arr
    return tensors


def save_tensors(path, tensors: dict) -> None:
    """Write named float arrays; values are stored as float32."""
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        _write_tensor_section(f, tensors)


def load_tensors(path) -> dict:
    """Read a tensor container back; arrays are returned as float64."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != TENSOR_MAGIC:
            raise ValueError(f"{path}: not a tensor container")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        return _read_tensor_section(f)


def model_tensors(model: ViTBackbone) -> dict:
    """Flat name -> array view of all weights. Block names are 1-based."""
    tensors = {
        "patch.weight": model.patch_weight,
        "patch.bias": model.patch_bias,
        "pos_embed": model.pos_embed,
    }
    for b, bw in enumerate(model.blocks, start=1):
        for name in _BLOCK_FIELDS:
            tensors[f"blocks.{b}.{name}"] = getattr(bw, name)
    return tensors


def save_model(path, model: ViTBackbone) -> None:
    cfg = model.config
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack(
            "<8Iq",
            cfg.embed_dim, cfg.num_heads, cfg.num_blocks, cfg.window_side,
            cfg.ffn_hidden, cfg.grid.frame_height, cfg.grid.frame_width,
            cfg.grid.region_size, cfg.seed,
        ))
        globals_sorted = sorted(cfg.global_blocks)
        f.write(struct.pack("<I", len(globals_sorted)))
        f.write(struct.pack(f"<{len(globals_sorted)}I", *globals_sorted))
        _write_tensor_section(f, model_tensors(model))


def load_model(path) -> ViTBackbone:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MODEL_MAGIC:
            raise ValueError(f"{path}: not a model container")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        (embed_dim, num_heads, num_blocks, window_side, ffn_hidden,
         frame_h, frame_w, region_size, seed) = struct.unpack("<8Iq", _read_exact(f, 40))
        (n_global,) = struct.unpack("<I", _read_exact(f, 4))
        global_blocks = struct.unpack(f"<{n_global}I", _read_exact(f, 4 * n_global))
        config = ModelConfig(
            embed_dim=embed_dim,
            num_heads=num_heads,
            num_blocks=num_blocks,
            global_blocks=frozenset(global_blocks),
            window_side=window_side,
            ffn_hidden=ffn_hidden,
            grid=GridSpec(frame_h, frame_w, region_size),
            seed=seed,
        )
        tensors = _read_tensor_section(f)
    expected = {"patch.weight": (config.patch_dim, embed_dim),
                "patch.bias": (embed_dim,),
                "pos_embed": (config.num_tokens, embed_dim)}
    for b in range(1, num_blocks + 1):
        L, F = embed_dim, ffn_hidden
        shapes = {
            "ln1_gamma": (L,), "ln1_beta": (L,), "qkv_weight": (L, 3 * L), "qkv_bias": (3 * L,),
            "proj_weight": (L, L), "proj_bias": (L,), "ln2_gamma": (L,), "ln2_beta": (L,),
            "fc1_weight": (L, F), "fc1_bias": (F,), "fc2_weight": (F, L), "fc2_bias": (L,),
        }
        for name, shape in shapes.items():
            expected[f"blocks.{b}.{name}"] = shape
    for name, shape in expected.items():
        if name not in tensors:
            raise ValueError(f"{path}: missing tensor {name}")
        if tensors[name].shape != shape:
            raise ValueError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {shape}")
    blocks = [
        BlockWeights(**{field: tensors[f"blocks.{b}.{field}"] for field in _BLOCK_FIELDS})
        for b in range(1, num_blocks + 1)
    ]
    return ViTBackbone(config, tensors["patch.weight"], tensors["patch.bias"],
                       tensors["pos_embed"], blocks)
