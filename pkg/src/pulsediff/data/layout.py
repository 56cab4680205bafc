"""On-disk dataset layout.

    root/{split}/{case_id}/frames/%04d.pgm      16-bit, [-1, 1] mapped to 0..65535
                          masks/%04d.pgm       8-bit labels
                          sketch.pgm           8-bit, 0 / 255
                          mv/%04d_skel.pgm     8-bit, 0 / 255
                          mv/%04d_stroke.pgm   8-bit, 0 / 255
                          flow.bin             FLO1 binary
                          meta.json            {"view": ..., "prompt": ...}

Only frames/ is mandatory; missing condition files load as absent fields.
"""

from __future__ import annotations

import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from ..conditions import read_flow, write_flow
from ..global_conditions import VIEW_PROMPTS
from .phantom import SampleRecord, dequantize16, generate_phantom, quantize16, random_params

KINDS = ("phantom", "camus-like", "cmr-like")
NUM_LABELS = 4
_FRAME_RE = re.compile(r"^(\d{4})\.pgm$")


class LayoutError(ValueError):
    pass


class LabelSetError(ValueError):
    pass


def num_workers(default: int = 4) -> int:
    env = os.environ.get("PULSEDIFF_NUM_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"PULSEDIFF_NUM_WORKERS must be an integer, got {env!r}") from None
    return max(1, min(default, os.cpu_count() or 1))


def write_pgm(path: Union[str, Path], img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    if img.dtype == np.uint8:
        maxval, body = 255, img.tobytes()
    elif img.dtype == np.uint16:
        maxval, body = 65535, img.astype(">u2").tobytes()
    else:
        raise ValueError(f"unsupported PGM dtype {img.dtype}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(body)


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise LayoutError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return arr.astype(np.uint8 if maxval < 256 else np.uint16)


def _binary(img: np.ndarray) -> np.ndarray:
    return (np.asarray(img) > 0.5).astype(np.uint8) * 255


def write_case(case_dir: Union[str, Path], record: SampleRecord) -> Path:
    case_dir = Path(case_dir)
    (case_dir / "frames").mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(record.frames):
        write_pgm(case_dir / "frames" / f"{k:04d}.pgm", quantize16(frame[0]))
    if record.mask is not None:
        (case_dir / "masks").mkdir(exist_ok=True)
        for k, m in enumerate(record.mask):
            write_pgm(case_dir / "masks" / f"{k:04d}.pgm", m[0].astype(np.uint8))
    if record.sketch is not None:
        write_pgm(case_dir / "sketch.pgm", _binary(record.sketch[0]))
    if record.mv_skeleton is not None:
        (case_dir / "mv").mkdir(exist_ok=True)
        for k, mv in enumerate(record.mv_skeleton):
            write_pgm(case_dir / "mv" / f"{k:04d}_skel.pgm", _binary(mv[0]))
            write_pgm(case_dir / "mv" / f"{k:04d}_stroke.pgm", _binary(mv[1]))
    if record.flow is not None:
        write_flow(case_dir / "flow.bin", record.flow)
    meta = {"view": record.view, "prompt": record.prompt}
    (case_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return case_dir


def _indexed(directory: Path) -> list:
    files = sorted(p for p in directory.iterdir() if _FRAME_RE.match(p.name))
    idx = [int(_FRAME_RE.match(p.name).group(1)) for p in files]
    if idx != list(range(len(files))):
        raise LayoutError(f"{directory}: frame files must be numbered 0000.pgm.. without gaps")
    return files


def load_case(case_dir: Union[str, Path], kind: str = "phantom") -> SampleRecord:
    if kind not in KINDS:
        raise ValueError(f"dataset kind must be one of {KINDS}, got {kind!r}")
    case_dir = Path(case_dir)
    fdir = case_dir / "frames"
    if not fdir.is_dir():
        raise LayoutError(f"{fdir}: missing frames directory")
    files = _indexed(fdir)
    if not files:
        raise LayoutError(f"{fdir}: no frames")
    frames = np.stack([dequantize16(read_pgm(p))[None] for p in files])
    n = len(files)

    mask = None
    mdir = case_dir / "masks"
    if mdir.is_dir():
        mfiles = _indexed(mdir)
        if len(mfiles) != n:
            raise LayoutError(f"{mdir}: {len(mfiles)} masks for {n} frames")
        mask = np.stack([read_pgm(p)[None] for p in mfiles]).astype(np.uint8)
        if mask.max(initial=0) >= NUM_LABELS:
            raise LabelSetError(f"{mdir}: labels {sorted(set(np.unique(mask)) - set(range(NUM_LABELS)))} "
                                f"outside 0..{NUM_LABELS - 1}")
    if kind == "cmr-like":
        meta = {}
        if (case_dir / "meta.json").is_file():
            meta = json.loads((case_dir / "meta.json").read_text())
        return SampleRecord(frames=frames, mask=mask, view=meta.get("view", "CMR"), prompt=None,
                            case_id=case_dir.name)

    sketch = None
    if (case_dir / "sketch.pgm").is_file():
        sketch = (read_pgm(case_dir / "sketch.pgm") > 0).astype(np.float32)[None]

    mv = None
    mvdir = case_dir / "mv"
    if mvdir.is_dir():
        planes = []
        for k in range(n):
            pair = [mvdir / f"{k:04d}_skel.pgm", mvdir / f"{k:04d}_stroke.pgm"]
            for p in pair:
                if not p.is_file():
                    raise LayoutError(f"{p}: missing mitral-valve raster")
            planes.append(np.stack([(read_pgm(p) > 0).astype(np.float32) for p in pair]))
        mv = np.stack(planes)

    flow = None
    if (case_dir / "flow.bin").is_file():
        flow = read_flow(case_dir / "flow.bin")
        if flow.shape[0] != n - 1 or flow.shape[-2:] != frames.shape[-2:]:
            raise LayoutError(f"{case_dir / 'flow.bin'}: flow shape {flow.shape} does not match {n} frames")

    meta_path = case_dir / "meta.json"
    if not meta_path.is_file():
        raise LayoutError(f"{meta_path}: missing case metadata")
    meta = json.loads(meta_path.read_text())
    view = meta.get("view")
    if view not in VIEW_PROMPTS:
        raise LayoutError(f"{meta_path}: view must be one of {sorted(VIEW_PROMPTS)}, got {view!r}")
    prompt = meta.get("prompt", VIEW_PROMPTS[view])
    if prompt is not None and prompt != VIEW_PROMPTS[view]:
        raise LayoutError(f"{meta_path}: prompt {prompt!r} does not match view {view}")
    return SampleRecord(frames=frames, mask=mask, sketch=sketch, mv_skeleton=mv, flow=flow, view=view,
                        prompt=prompt, prior_frame=frames[0].copy(), case_id=case_dir.name)


class CaseDataset:
    """Lazy, deterministically ordered sequence of cases."""

    def __init__(self, case_dirs: list, kind: str):
        self.case_dirs = list(case_dirs)
        self.kind = kind

    def __len__(self) -> int:
        return len(self.case_dirs)

    def __getitem__(self, i: int) -> SampleRecord:
        return load_case(self.case_dirs[i], self.kind)

    def __iter__(self) -> Iterator[SampleRecord]:
        for i in range(len(self)):
            yield self[i]

    def load_all(self, workers: Optional[int] = None) -> list:
        workers = workers or num_workers()
        if workers == 1 or len(self) < 2:
            return list(self)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(self.__getitem__, range(len(self))))


def load_dataset(root: Union[str, Path], kind: str = "phantom", split: Optional[str] = None) -> CaseDataset:
    """Index ``root/{split}/{case_id}``; files at the split level are ignored."""
    if kind not in KINDS:
        raise ValueError(f"dataset kind must be one of {KINDS}, got {kind!r}")
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"{root}: dataset root does not exist")
    splits = [root / split] if split else sorted(p for p in root.iterdir() if p.is_dir())
    cases = []
    for sp in splits:
        if not sp.is_dir():
            raise LayoutError(f"{sp}: missing split directory")
        for case in sorted(p for p in sp.iterdir() if p.is_dir()):
            if not (case / "frames").is_dir():
                raise LayoutError(f"{case}: case directory without frames/")
            cases.append(case)
    return CaseDataset(cases, kind)


def generate_dataset(out: Union[str, Path], cases: int, frames: int = 8, size: int = 32, seed: int = 0,
                     view_mix: float = 0.5, split: str = "train") -> list:
    """Write ``cases`` phantom cases; ``view_mix`` is the A2C fraction."""
    if not 0.0 <= view_mix <= 1.0:
        raise ValueError("view_mix must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    written = []
    for i in range(cases):
        view = "A2C" if rng.random() < view_mix else "A4C"
        params = random_params(rng, view)
        case_seed = int(rng.integers(0, 2 ** 31 - 1))
        rec = generate_phantom(params, frames, size, size, seed=case_seed)
        written.append(write_case(Path(out) / split / f"case_{i:04d}", rec))
    return written
