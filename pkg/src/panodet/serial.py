"""Binary containers and checkpoint directories.

Tensor container (.aopt): magic "AOPT", u8 version, u8 rank, little-endian
u32 extents, then the f32 payload in row-major order.

Point cloud (.aopc): magic "AOPC", u32 count, then N x 4 f32 (x, y, z,
intensity). Label sidecar (.aopl): u32 count, then per point a packed
(u16 semantic class, u32 instance ID) pair.

A checkpoint is a directory of .aopt files plus a manifest.txt that maps
parameter/buffer/optimizer-state names to files and records the step
counter, so training can resume bit-identically.
"""

import os
import struct

import numpy as np

TENSOR_MAGIC = b"AOPT"
POINTS_MAGIC = b"AOPC"
TENSOR_VERSION = 1

_LABEL_DTYPE = np.dtype([("sem", "<u2"), ("inst", "<u4")])


def save_tensor(path, arr):
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim > 255:
        raise ValueError("rank too large for container")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<BB", TENSOR_VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def load_tensor(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != TENSOR_MAGIC:
            raise ValueError(f"{path}: not a tensor container")
        version, rank = struct.unpack("<BB", f.read(2))
        if version != TENSOR_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(f.read(4 * n), dtype="<f4", count=n)
        return data.reshape(shape).copy()


def save_points(path, points):
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float32))
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ValueError(f"point array must be [N,4], got {pts.shape}")
    with open(path, "wb") as f:
        f.write(POINTS_MAGIC)
        f.write(struct.pack("<I", pts.shape[0]))
        f.write(pts.astype("<f4").tobytes())


def load_points(path):
    with open(path, "rb") as f:
        if f.read(4) != POINTS_MAGIC:
            raise ValueError(f"{path}: not a point-cloud container")
        (n,) = struct.unpack("<I", f.read(4))
        data = np.frombuffer(f.read(16 * n), dtype="<f4", count=4 * n)
        return data.reshape(n, 4).copy()


def save_labels(path, semantic, instance):
    sem = np.asarray(semantic)
    inst = np.asarray(instance)
    if sem.shape != inst.shape or sem.ndim != 1:
        raise ValueError("semantic/instance labels must be matching 1-D arrays")
    rec = np.empty(sem.shape[0], dtype=_LABEL_DTYPE)
    rec["sem"] = sem
    rec["inst"] = inst
    with open(path, "wb") as f:
        f.write(struct.pack("<I", sem.shape[0]))
        f.write(rec.tobytes())


def load_labels(path):
    with open(path, "rb") as f:
        (n,) = struct.unpack("<I", f.read(4))
        rec = np.frombuffer(f.read(_LABEL_DTYPE.itemsize * n),
                            dtype=_LABEL_DTYPE, count=n)
        return rec["sem"].astype(np.int64), rec["inst"].astype(np.int64)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt_dir, model, optimizer=None, step=0):
    os.makedirs(ckpt_dir, exist_ok=True)
    lines = [f"format=1", f"step={int(step)}"]
    entries = []
    for name, p in model.named_parameters():
        entries.append(("param", name, p.data))
    for name, b in model.named_buffers():
        entries.append(("buffer", name, b))
    if optimizer is not None:
        lines.append(f"opt_t={optimizer.t}")
        for key, arr in optimizer.state_items():
            entries.append(("opt", key, arr))
    for i, (kind, name, arr) in enumerate(entries):
        fname = f"{i:04d}.aopt"
        save_tensor(os.path.join(ckpt_dir, fname), arr)
        shape = "x".join(str(s) for s in np.asarray(arr).shape) or "scalar"
        lines.append(f"{kind} {name} {fname} {shape}")
    with open(os.path.join(ckpt_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(ckpt_dir):
    """Returns (header dict, list of (kind, name, filename, shape))."""
    header, entries = {}, []
    with open(os.path.join(ckpt_dir, "manifest.txt")) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if "=" in line and " " not in line:
                k, v = line.split("=", 1)
                header[k] = v
            else:
                kind, name, fname, shape = line.split(" ")
                entries.append((kind, name, fname, shape))
    return header, entries


def load_checkpoint(ckpt_dir, model, optimizer=None):
    """Restore parameters/buffers (and optimizer state if given); returns step.

    Raises ValueError when the checkpoint does not match the model's shapes
    or parameter set.
    """
    header, entries = read_manifest(ckpt_dir)
    table = {(kind, name): fname for kind, name, fname, _ in entries}

    params = dict(model.named_parameters())
    for name, p in params.items():
        key = ("param", name)
        if key not in table:
            raise ValueError(f"checkpoint incompatible: missing parameter {name}")
        arr = load_tensor(os.path.join(ckpt_dir, table[key]))
        if arr.shape != p.data.shape:
            raise ValueError(
                f"checkpoint incompatible: {name} has shape {arr.shape}, "
                f"model expects {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
        p.grad = None
    extra = [n for k, n in table if k == "param" and n not in params]
    if extra:
        raise ValueError(f"checkpoint incompatible: unexpected parameters {extra}")

    buffers = dict(model.named_buffers())
    for name, b in buffers.items():
        key = ("buffer", name)
        if key not in table:
            raise ValueError(f"checkpoint incompatible: missing buffer {name}")
        arr = load_tensor(os.path.join(ckpt_dir, table[key]))
        if arr.shape != b.shape:
            raise ValueError(f"checkpoint incompatible: buffer {name} shape mismatch")
        np.copyto(b, arr.astype(b.dtype))

    if optimizer is not None:
        opt_items = []
        for kind, name, fname, _ in entries:
            if kind == "opt":
                opt_items.append((name, load_tensor(os.path.join(ckpt_dir, fname))))
        optimizer.load_state_items(opt_items)
        optimizer.t = int(header.get("opt_t", 0))
    return int(header.get("step", 0))
