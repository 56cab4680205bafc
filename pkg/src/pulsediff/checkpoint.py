"""Checkpoint archive: named little-endian float32 tensors + JSON metadata.

The archive is a zip file holding one ``<name>.npy`` entry per tensor and a
``meta.json`` entry.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

META_ENTRY = "meta.json"
# fixed timestamp keeps archives byte-identical across runs
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name].detach().cpu().numpy().astype("<f4"))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", _ZIP_TIME), buf.getvalue())
        zf.writestr(zipfile.ZipInfo(META_ENTRY, _ZIP_TIME), json.dumps(meta, sort_keys=True, indent=1))


def load_checkpoint(path):
    """Returns (tensors, meta) with tensors as float32 torch tensors."""
    tensors = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read(META_ENTRY))
        for info in zf.infolist():
            if info.filename == META_ENTRY:
                continue
            arr = np.lib.format.read_array(io.BytesIO(zf.read(info)), allow_pickle=False)
            tensors[info.filename[:-4]] = torch.from_numpy(np.array(arr, dtype=np.float32))
    return tensors, meta


def split_group(tensors: Mapping[str, torch.Tensor], prefix: str):
    """Tensors under ``prefix.`` with the prefix removed."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}
