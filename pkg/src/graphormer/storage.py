"""Binary file formats: tensors, datasets, checkpoints, and OBJ export.

All binary files are little-endian with a 4-byte magic and a u32 version.
Tensor files carry f32 data (the documented exchange format for features and
attention maps); checkpoints carry parameters at their native precision so a
save/load round trip is bit-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import GraphormerConfig, parse_config_text, render_config
from .mesh import MeshSample, TemplateMesh

TENSOR_MAGIC = b"GPHT"
DATASET_MAGIC = b"GPHD"
CHECKPOINT_MAGIC = b"GPHC"

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    """Corrupt or mismatched binary file."""


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("unexpected end of file")
    return buf


# ---------------------------------------------------------------------------
# Tensor files (features, attention maps)
# ---------------------------------------------------------------------------


def write_tensor(path, array: np.ndarray, dtype=np.float32) -> None:
    arr = np.ascontiguousarray(np.asarray(array), dtype=np.dtype(dtype).newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<II", 1, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(struct.pack("<I", _DTYPE_TO_CODE[np.dtype(dtype)]))
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != TENSOR_MAGIC:
            raise FormatError(f"{path}: not a tensor file")
        version, ndim = struct.unpack("<II", _read_exact(fh, 8))
        if version != 1:
            raise FormatError(f"{path}: unsupported tensor file version {version}")
        shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
        (code,) = struct.unpack("<I", _read_exact(fh, 4))
        if code not in _DTYPE_CODES:
            raise FormatError(f"{path}: unknown dtype code {code}")
        dt = _DTYPE_CODES[code]
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(_read_exact(fh, count * dt.itemsize), dtype=dt)
        return data.reshape(shape).astype(np.float64)


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------


def save_dataset(path, samples: list[MeshSample]) -> None:
    """Header (magic, version, counts, dims) then per-sample f32 fields in fixed order:
    joint_angles, fine vertices, coarse vertices, 3D joints, 2D joints,
    silhouette, camera."""
    if not samples:
        raise FormatError("cannot save an empty dataset")
    first = samples[0]
    n_j = first.gt_joints3d.shape[0]
    n_f = first.gt_fine_vertices.shape[0]
    n_c = first.gt_coarse_vertices.shape[0]
    h, w = first.silhouette.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIIIIII", 1, len(samples), n_j, n_f, n_c, h, w))
        for s in samples:
            for arr in (
                s.joint_angles,
                s.gt_fine_vertices,
                s.gt_coarse_vertices,
                s.gt_joints3d,
                s.gt_joints2d,
                s.silhouette,
                s.camera_gt,
            ):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_dataset(path) -> tuple[list[MeshSample], dict]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != DATASET_MAGIC:
            raise FormatError(f"{path}: not a dataset file")
        version, count, n_j, n_f, n_c, h, w = struct.unpack("<IIIIIII", _read_exact(fh, 28))
        if version != 1:
            raise FormatError(f"{path}: unsupported dataset version {version}")
        fields = (
            ("joint_angles", (n_j, 3)),
            ("gt_fine_vertices", (n_f, 3)),
            ("gt_coarse_vertices", (n_c, 3)),
            ("gt_joints3d", (n_j, 3)),
            ("gt_joints2d", (n_j, 2)),
            ("silhouette", (h, w)),
            ("camera_gt", (3,)),
        )
        samples = []
        for _ in range(count):
            kwargs = {}
            for name, shape in fields:
                n = int(np.prod(shape, dtype=np.int64))
                data = np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4")
                kwargs[name] = data.reshape(shape).astype(np.float64)
            samples.append(MeshSample(**kwargs))
    meta = {"count": count, "n_joints": n_j, "n_fine": n_f, "n_coarse": n_c, "height": h, "width": w}
    return samples, meta


# ---------------------------------------------------------------------------
# OBJ export
# ---------------------------------------------------------------------------


def export_obj(path, vertices: np.ndarray, edges: np.ndarray) -> None:
    """Vertices plus edges written as degenerate faces, for quick inspection."""
    with open(path, "w", encoding="utf-8") as fh:
        for v in np.asarray(vertices):
            fh.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for a, b in np.asarray(edges):
            fh.write(f"f {a + 1} {b + 1} {b + 1}\n")


def export_template_obj(path, template: TemplateMesh) -> None:
    export_obj(path, template.rest_vertices, template.edges)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, config: GraphormerConfig, params, adam, rng_states: dict, epoch: int, step: int) -> None:
    """Versioned magic, canonical config text, JSON metadata, then parameter and
    optimizer blobs in declaration order."""
    config_text = render_config(config).encode("utf-8")
    meta = {
        "epoch": epoch,
        "step": step,
        "adam": {"beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step},
        "rng_states": rng_states,
    }
    meta_text = json.dumps(meta, sort_keys=True).encode("utf-8")
    names = [name for name, _ in params.named]
    dtype = params.named[0][1].data.dtype
    code = _DTYPE_TO_CODE[np.dtype(dtype)]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", 1, code, len(names)))
        fh.write(struct.pack("<Q", len(config_text)))
        fh.write(config_text)
        fh.write(struct.pack("<Q", len(meta_text)))
        fh.write(meta_text)

        def write_blob(name, arr):
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

        for name, t in params.named:
            write_blob(name, t.data)
        for name in names:
            write_blob(name, adam.m.get(name, np.zeros(dict(params.named)[name].shape)))
        for name in names:
            write_blob(name, adam.v.get(name, np.zeros(dict(params.named)[name].shape)))


def load_checkpoint(path):
    """Returns (config, tensors, adam, meta); tensors is an ordered name->Tensor dict."""
    from .autodiff import Tensor
    from .train import AdamState

    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        version, code, n_params = struct.unpack("<III", _read_exact(fh, 12))
        if version != 1:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        dt = _DTYPE_CODES[code]
        (config_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        config = parse_config_text(_read_exact(fh, config_len).decode("utf-8"))
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))

        def read_blob():
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            count = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(_read_exact(fh, count * dt.itemsize), dtype=dt)
            return name, data.reshape(shape).astype(dt.base)

        tensors = {}
        for _ in range(n_params):
            name, data = read_blob()
            tensors[name] = Tensor(data.copy(), requires_grad=True)
        am = meta["adam"]
        adam = AdamState(beta1=am["beta1"], beta2=am["beta2"], eps=am["eps"], step=am["step"])
        for _ in range(n_params):
            name, data = read_blob()
            adam.m[name] = data.copy()
        for _ in range(n_params):
            name, data = read_blob()
            adam.v[name] = data.copy()
    return config, tensors, adam, meta


def load_model(path):
    """Rebuild a ready-to-run model (and its optimizer state) from a checkpoint."""
    from .model import GraphormerModel, assemble_params

    config, tensors, adam, meta = load_checkpoint(path)
    params = assemble_params(config, tensors)
    model = GraphormerModel(config, params=params)
    return model, adam, meta


# ---------------------------------------------------------------------------
# Attention export
# ---------------------------------------------------------------------------


def export_attention(out_dir, attn_all: list, averaged: np.ndarray, row_name: str | None = None, row: np.ndarray | None = None) -> list:
    """Write per-block h x n x n maps plus the head-averaged n x n map.

    Maps are stored at f64 so the row-stochastic property survives the file
    round trip (f32 would round row sums off by ~1e-8 at 494 tokens)."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    written = []
    for enc_idx, block_idx, maps in attn_all:
        p = os.path.join(out_dir, f"attn_enc{enc_idx + 1}_block{block_idx}.bin")
        write_tensor(p, maps, dtype=np.float64)
        written.append(p)
    avg_path = os.path.join(out_dir, "attn_averaged.bin")
    write_tensor(avg_path, averaged, dtype=np.float64)
    written.append(avg_path)
    if row is not None:
        row_path = os.path.join(out_dir, f"attn_row_{row_name}.bin")
        write_tensor(row_path, row.reshape(1, -1), dtype=np.float64)
        written.append(row_path)
    return written
