"""Binary scene checkpoints.

Layout: a 16-byte header (8-byte magic ``NMFCKPT\\0``, uint32 version,
uint32 entry count), followed by named entries. Each entry is a
uint16-length UTF-8 name, a dtype code byte (``f`` float32, ``q`` int64),
a uint8 rank, that many uint32 dims, then the little-endian payload.
Model parameters round-trip bitwise.
"""

from __future__ import annotations

import struct

import numpy as np
import torch

from .model import SceneModel

MAGIC = b"NMFCKPT\x00"
VERSION = 1

_DTYPES = {b"f": np.dtype("<f4"), b"q": np.dtype("<i8")}
_CODES = {np.dtype("float32"): b"f", np.dtype("int64"): b"q"}


def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    code = _CODES[arr.dtype]
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(code)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_entry(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", fh.read(2))
    name = fh.read(name_len).decode("utf-8")
    code = fh.read(1)
    if code not in _DTYPES:
        raise ValueError(f"checkpoint entry {name!r} has unknown dtype code {code!r}")
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    data = np.frombuffer(fh.read(dt.itemsize * count), dtype=dt).reshape(shape)
    return name, data.copy()


def save_checkpoint(path: str, model: SceneModel) -> None:
    entries: list[tuple[str, np.ndarray]] = []
    g = model.grid
    meta = np.array(
        [
            g.resolution[0], g.resolution[1], g.resolution[2],
            g.density_rank, g.feature_rank, g.feature_dim,
            model.env.height, model.env.width,
            1 if model.gain_net.mode == "neural" else 0,
        ],
        dtype=np.int64,
    )
    entries.append(("meta/ints", meta))
    bbox = np.stack([g.bbox_lo.numpy(), g.bbox_hi.numpy()]).astype(np.float32)
    entries.append(("meta/bbox", bbox))
    for key, value in model.state_dict().items():
        arr = value.detach().cpu().numpy()
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        entries.append((f"param/{key}", arr))

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, arr in entries:
            _write_entry(fh, name, arr)


def load_checkpoint(path: str) -> SceneModel:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"not a scene checkpoint: bad magic {magic!r}")
        version, n_entries = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(
                f"unsupported checkpoint version {version} (expected {VERSION})"
            )
        entries = dict(_read_entry(fh) for _ in range(n_entries))

    try:
        meta = entries["meta/ints"]
        bbox = entries["meta/bbox"]
    except KeyError as exc:
        raise ValueError(f"checkpoint missing required entry {exc}") from None

    model = SceneModel.create(
        resolution=(int(meta[0]), int(meta[1]), int(meta[2])),
        density_rank=int(meta[3]),
        feature_rank=int(meta[4]),
        feature_dim=int(meta[5]),
        env_height=int(meta[6]),
        env_width=int(meta[7]),
        gain_mode="neural" if int(meta[8]) else "identity",
        bbox=(tuple(bbox[0].tolist()), tuple(bbox[1].tolist())),
    )
    state = {}
    for name, arr in entries.items():
        if name.startswith("param/"):
            state[name[len("param/"):]] = torch.from_numpy(arr)
    missing = set(model.state_dict()) - set(state)
    extra = set(state) - set(model.state_dict())
    if missing or extra:
        raise ValueError(
            f"checkpoint parameters do not match model (missing={sorted(missing)}, "
            f"unexpected={sorted(extra)})"
        )
    model.load_state_dict(state)
    model.env.mark_dirty()
    return model
