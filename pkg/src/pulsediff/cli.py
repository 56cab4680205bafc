"""Command-line entry points: gen-data, train, sample, evaluate, replay."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .conditions import CONDITIONS, ConditionError
from .data.cmr import generate_cmr_volume
from .data.layout import KINDS, generate_dataset, load_case, load_dataset, write_case
from .data.phantom import SampleRecord
from .diffusion import NonFiniteError
from .metrics import metrics_report
from .sampling import bundle_from_record, parse_drop, sample_clip
from .training import (ConfigError, IncompatibleCheckpointError, TrainConfig, TrainedModel, finetune_cmr,
                       train_stage1, train_stage2)

log = logging.getLogger("pulsediff")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
MANIFEST = "run_manifest.json"
_active: list = []   # (out dir, manifest) of the run in progress


class ValidationError(Exception):
    def __init__(self, problems):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_manifest(out: Path, command: str, argv: Sequence[str], seed: int, config_path: Optional[str] = None,
                   resolved: Optional[dict] = None) -> dict:
    """Record the invocation before any work starts."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command, "argv": list(argv), "seed": seed, "out": str(out),
        "config_path": config_path,
        "config_hash": _sha(Path(config_path).read_bytes()) if config_path else None,
        "resolved_config_hash": _sha(json.dumps(resolved, sort_keys=True).encode()) if resolved else None,
        "started_at": _now(), "finished_at": None, "status": "running",
    }
    _write_json(out / MANIFEST, manifest)
    _active[:] = [(out, manifest)]
    return manifest


def _finish(out: Path, manifest: dict, status: str = "ok") -> None:
    manifest.update(finished_at=_now(), status=status)
    _write_json(out / MANIFEST, manifest)
    _active.clear()


# ----------------------------------------------------------------------------- commands


def cmd_gen_data(args, argv) -> int:
    if args.cases < 1:
        raise ValidationError("--cases must be >= 1")
    if args.frames < 2 and args.kind == "phantom":
        raise ValidationError("--frames must be >= 2 for phantom videos")
    if args.size % 4:
        raise ValidationError("--size must be divisible by 4")
    if not 0.0 <= args.view_mix <= 1.0:
        raise ValidationError("--view-mix must lie in [0, 1]")
    out = Path(args.out)
    flags = dict(cases=args.cases, frames=args.frames, size=args.size, seed=args.seed,
                 view_mix=args.view_mix, kind=args.kind, split=args.split)
    manifest = write_manifest(out, "gen-data", argv, args.seed, resolved=flags)
    if args.kind == "phantom":
        generate_dataset(out, args.cases, args.frames, args.size, args.seed, args.view_mix, args.split)
    else:
        rng = np.random.default_rng(args.seed)
        for i in range(args.cases):
            rec = generate_cmr_volume(args.frames, args.size, args.size, seed=int(rng.integers(0, 2 ** 31 - 1)))
            write_case(out / args.split / f"case_{i:04d}", rec)
    _finish(out, manifest)
    return EXIT_OK


def _train_config(args) -> tuple:
    problems = []
    overrides = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"--config {args.config}: {exc}")
    else:
        raw = {}
    for key, val in (("stage", args.stage), ("data", args.data), ("init_ckpt", args.init_ckpt),
                     ("out", args.out), ("seed", args.seed), ("steps", args.steps)):
        if val is not None:
            overrides[key] = val
    raw.update(overrides)
    try:
        cfg = TrainConfig.from_dict(raw)
    except ConfigError as exc:
        raise ValidationError(exc.problems)
    except TypeError as exc:
        raise ValidationError(str(exc))
    problems += cfg.problems()
    if not cfg.data:
        problems.append("--data is required (or 'data' in the config file)")
    elif not Path(cfg.data).is_dir():
        problems.append(f"--data {cfg.data}: directory does not exist")
    if not cfg.out:
        problems.append("--out is required (or 'out' in the config file)")
    if cfg.stage in ("2", "cmr") and not cfg.init_ckpt:
        problems.append(f"--init-ckpt is required for stage {cfg.stage}")
    if cfg.init_ckpt and not Path(cfg.init_ckpt).is_file():
        problems.append(f"--init-ckpt {cfg.init_ckpt}: file does not exist")
    if problems:
        raise ValidationError(problems)
    return cfg


def cmd_train(args, argv) -> int:
    cfg = _train_config(args)
    out = Path(cfg.out)
    manifest = write_manifest(out, "train", argv, cfg.seed, args.config, cfg.to_dict())
    _write_json(out / "config.json", cfg.to_dict())
    kind = "cmr-like" if cfg.stage == "cmr" else "phantom"
    dataset = load_dataset(cfg.data, kind)
    if len(dataset) == 0:
        raise ValidationError(f"--data {cfg.data}: no cases found")
    init = TrainedModel.load(cfg.init_ckpt) if cfg.init_ckpt else None
    if cfg.stage == "1":
        result = train_stage1(cfg, dataset)
    elif cfg.stage == "2":
        result = train_stage2(cfg, dataset, init)
    else:
        result = finetune_cmr(cfg, dataset, init)
    result.save(out / "checkpoint.zip")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for i, (loss, lr) in enumerate(zip(result.losses, result.lrs)):
            w.writerow([i, repr(loss), repr(lr)])
    _finish(out, manifest)
    return EXIT_OK


def _sample_case(trained: TrainedModel, record: SampleRecord, drop, guidance: float, seed: int):
    cfg = trained.model.config
    nf = cfg.num_frames if cfg.video else 1
    if record.frames.shape[0] < nf:
        raise ValidationError(f"conditioning case has {record.frames.shape[0]} frames, model needs {nf}")
    if record.frames.shape[-1] != cfg.image_size or record.frames.shape[-2] != cfg.image_size:
        raise ValidationError(f"conditioning case is {record.frames.shape[-2:]}, model expects {cfg.image_size}")
    bundle = bundle_from_record(record, nf, video=cfg.video)
    if trained.meta.get("stage") == "cmr":
        bundle = bundle.only(["mask"])
    bundle = bundle.with_absent(drop)
    clip = sample_clip(trained, bundle, guidance, seed, nf)[0]
    present = {n: bool(bundle.is_present(n)[0]) for n in CONDITIONS}
    return clip, present


def cmd_sample(args, argv) -> int:
    try:
        drop = parse_drop(args.drop or [])
    except ValueError as exc:
        raise ValidationError(str(exc))
    cond_dir = Path(args.conditions)
    if not (cond_dir / "frames").is_dir():
        raise ValidationError(f"--conditions {cond_dir}: not a case directory (missing frames/)")
    if not Path(args.ckpt).is_file():
        raise ValidationError(f"--ckpt {args.ckpt}: file does not exist")
    trained = TrainedModel.load(args.ckpt)
    kind = "cmr-like" if trained.meta.get("stage") == "cmr" else "phantom"
    record = load_case(cond_dir, kind)
    out = Path(args.out)
    manifest = write_manifest(out, "sample", argv, args.seed,
                              resolved=dict(ckpt=_sha(Path(args.ckpt).read_bytes()), drop=drop,
                                            guidance_scale=args.guidance_scale, seed=args.seed))
    clip, present = _sample_case(trained, record, drop, args.guidance_scale, args.seed)
    fake = SampleRecord(frames=np.clip(clip, -1.0, 1.0).astype(np.float32), view=record.view, prompt=record.prompt)
    if (out / "frames").exists():
        shutil.rmtree(out / "frames")
    write_case(out, fake)
    report = {
        "conditions": present,
        "present": [n for n in CONDITIONS if present[n]],
        "absent": [n for n in CONDITIONS if not present[n]],
        "dropped": drop, "guidance_scale": args.guidance_scale, "seed": args.seed,
        "shape": list(clip.shape), "ckpt_stage": trained.meta.get("stage"),
        "conditioning_case": cond_dir.name,
    }
    _write_json(out / "sample_report.json", report)
    _finish(out, manifest)
    return EXIT_OK


def _case_id(case: Path) -> str:
    # sampled cases are paired with the case that supplied their conditions
    report = case / "sample_report.json"
    if report.is_file():
        return json.loads(report.read_text()).get("conditioning_case", case.name)
    return case.name


def _clips(root: Path, flag: str) -> list:
    if not root.is_dir():
        raise ValidationError(f"{flag} {root}: directory does not exist")
    if (root / "frames").is_dir():
        cases = [root]
    else:
        cases = [Path(d) for d in load_dataset(root).case_dirs]
        if not cases:
            raise ValidationError(f"{flag} {root}: no cases found")
    return [(_case_id(c), load_case(c, "cmr-like").frames) for c in cases]


def cmd_evaluate(args, argv) -> int:
    real = _clips(Path(args.real), "--real")
    fake = _clips(Path(args.fake), "--fake")
    real_by_id = dict(real)
    pairs = [(cid, real_by_id[cid], clip) for cid, clip in fake if cid in real_by_id]
    out = Path(args.out)
    report_path = out if out.suffix == ".json" else out / "metrics_report.json"
    report = metrics_report([c for _, c in real], [c for _, c in fake], pairs, seed=args.seed)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(report_path, report)
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    path = Path(args.manifest)
    if not path.is_file():
        raise ValidationError(f"--manifest {path}: file does not exist")
    manifest = json.loads(path.read_text())
    sub = list(manifest["argv"])
    if args.out:
        if "--out" not in sub:
            raise ValidationError("manifest command has no --out flag to redirect")
        sub[sub.index("--out") + 1] = args.out
    if manifest.get("config_path"):
        current = _sha(Path(manifest["config_path"]).read_bytes())
        if current != manifest["config_hash"]:
            raise ValidationError(f"{manifest['config_path']} changed since the recorded run")
    return main(sub)


# ----------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pulsediff", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a procedural phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--cases", type=int, default=32)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--view-mix", type=float, default=0.5, help="fraction of A2C cases")
    g.add_argument("--kind", choices=("phantom", "cmr"), default="phantom")
    g.add_argument("--split", default="train")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", choices=("1", "2", "cmr"))
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--init-ckpt")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override the step budget")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample a video for one conditioning case")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--conditions", required=True, help="case directory supplying the conditions")
    s.add_argument("--drop", default="", help="comma-separated condition names, or 'all'")
    s.add_argument("--guidance-scale", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="FID / FVD / SSIM report")
    e.add_argument("--real", required=True)
    e.add_argument("--fake", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("replay", help="re-run a command from its run manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", help="write to a different output directory")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True)
    _active.clear()
    code = EXIT_RUNTIME
    try:
        return args.func(args, argv)
    except ValidationError as exc:
        for msg in exc.problems:
            print(f"error: {msg}", file=sys.stderr)
        code = EXIT_VALIDATION
    except (ConfigError, IncompatibleCheckpointError, ConditionError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_VALIDATION
    except (NonFiniteError, OSError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
    for out, manifest in list(_active):
        _finish(out, manifest, "failed")
    return code


if __name__ == "__main__":
    sys.exit(main())
