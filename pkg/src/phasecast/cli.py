"""Command-line entry point wiring generation, prediction, training,
segmentation, evaluation, and visualization together.

Every subcommand reads an optional JSON config (``--config``) whose fields can
be overridden by ``--seed``, ``--out``, ``--frames``, and ``--model``.  Runs
that write artifacts also write a ``manifest.json`` echoing the effective
config and the SHA-256 of every written file, so reruns with the same seed can
be checked for bitwise reproducibility.

Exit codes: 0 success, 1 validation/usage error, 2 runtime or numerical error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, ReconstructionError, ValidationError


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    return cfg


def _take(cfg: dict, key: str, default):
    value = cfg.get(key, default)
    return value if value is not None else default


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(outdir: Path, payload: dict) -> None:
    """Record the effective config plus a hash of every artifact written."""
    hashes = {}
    for p in sorted(outdir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            hashes[str(p.relative_to(outdir))] = _sha256(p)
    payload = dict(payload)
    payload["sha256"] = hashes
    (outdir / "manifest.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


def _require_out(args) -> Path:
    if args.out is None:
        raise ValidationError("this subcommand needs --out (or an 'out' config field)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args) -> int:
    from .scenes import (
        gen_sequence,
        random_scene_config,
        scene_config_from_dict,
        write_dataset,
    )

    cfg = _load_config(args.config)
    args.out = args.out or cfg.get("out")
    out = _require_out(args)
    if "scene" in cfg:
        scene_fields = dict(cfg["scene"])
        if args.seed is not None:
            scene_fields["seed"] = args.seed
        if args.frames is not None:
            scene_fields["frame_count"] = args.frames
        scene = scene_config_from_dict(scene_fields)
    else:
        scene = random_scene_config(
            seed=args.seed if args.seed is not None else int(_take(cfg, "seed", 0)),
            n_sprites=int(_take(cfg, "n_sprites", 2)),
            frame_count=args.frames or int(_take(cfg, "frames", 10)),
            background=str(_take(cfg, "background", "black")),
        )
    seq, gt = gen_sequence(scene)
    manifest = write_dataset(out, scene, seq, gt)
    _write_manifest(out, {**manifest, "command": "gen"})
    print(f"wrote {len(seq)} frames to {out}")
    return 0


def _load_model(path: Optional[str]):
    if path is None:
        return None
    from .transform_model import load_params

    params, _sidecar = load_params(path)
    return params


def _predictor_config(cfg: dict):
    from .predictor import PredictorConfig

    return PredictorConfig(**cfg.get("predictor", {}))


def _cmd_predict(args) -> int:
    from .metrics import evaluate_run
    from .predictor import rollout
    from .scenes import read_dataset
    from .tensor_io import make_frame, write_pgm, write_velocity_artifacts

    cfg = _load_config(args.config)
    data = args.data or cfg.get("data")
    if data is None:
        raise ValidationError("predict needs --data (or a 'data' config field)")
    args.out = args.out or cfg.get("out")
    out = _require_out(args)
    manifest, seq = read_dataset(data)
    frames = seq.as_array()
    if args.frames is not None:
        frames = frames[: args.frames]
    seed_count = int(_take(cfg, "seed_count", manifest["seed_count"]))
    params = _load_model(args.model or cfg.get("model"))
    pcfg = _predictor_config(cfg)

    preds, steps = rollout(frames, seed_count, params=params, pcfg=pcfg)
    (out / "pred").mkdir(exist_ok=True)
    (out / "velocity").mkdir(exist_ok=True)
    for k, (frame, step) in enumerate(zip(preds, steps)):
        t = seed_count + k
        write_pgm(make_frame(np.clip(frame, 0.0, 1.0)), out / "pred" / f"{t:04d}.pgm")
        vf = step.refined
        write_velocity_artifacts(
            vf,
            make_frame(np.clip(frame, 0.0, 1.0)),
            {
                "csv": out / "velocity" / f"{t:04d}.csv",
                "overlay": out / "velocity" / f"{t:04d}.pgm",
            },
            arrow_scale=3.0,
        )
    rows, aggregate = evaluate_run(
        np.concatenate([frames[:seed_count], np.stack(preds)]),
        frames,
        seed_count,
        csv_path=out / "metrics.csv",
    )
    _write_manifest(
        out,
        {
            "command": "predict",
            "data": str(data),
            "seed_count": seed_count,
            "model": args.model or cfg.get("model"),
            "predictor": cfg.get("predictor", {}),
            "aggregate": aggregate,
        },
    )
    print(f"predicted {len(preds)} frames; aggregate mse {aggregate['mse']:.6f}")
    return 0


def _cmd_train(args) -> int:
    from .scenes import gen_sequence, random_scene_config
    from .transform_model import TrainConfig, save_params, train, write_training_log

    cfg = _load_config(args.config)
    args.out = args.out or cfg.get("out")
    out = _require_out(args)
    tcfg_fields = dict(cfg.get("train", {}))
    if args.seed is not None:
        tcfg_fields["seed"] = args.seed
    tcfg = TrainConfig(**tcfg_fields)
    pcfg = _predictor_config(cfg)

    dataset_cfg = cfg.get("dataset", {})
    count = int(_take(dataset_cfg, "count", 64))
    base_seed = int(_take(dataset_cfg, "seed", 1000))
    sequences = []
    for i in range(count):
        scene = random_scene_config(
            seed=base_seed + i,
            n_sprites=int(_take(dataset_cfg, "n_sprites", 2)),
            frame_count=args.frames or int(_take(dataset_cfg, "frames", 10)),
            background=str(_take(dataset_cfg, "background", "black")),
        )
        sequences.append(gen_sequence(scene)[0])

    params, log = train(sequences, tcfg, pcfg=pcfg)
    save_params(params, out / "model.lfdt", config=tcfg, epoch=len(log))
    write_training_log(out / "training_log.csv", log)
    _write_manifest(
        out,
        {
            "command": "train",
            "train": asdict(tcfg),
            "dataset": {"count": count, "seed": base_seed},
            "final_loss": log[-1]["loss"] if log else None,
        },
    )
    print(f"trained {params.count}-parameter model; final loss {log[-1]['loss']:.6f}")
    return 0


def _cmd_segment(args) -> int:
    from .motion_seg import SegConfig, dump_run, seg_run
    from .scenes import read_dataset
    from .tensor_io import read_pgm

    cfg = _load_config(args.config)
    data = args.data or cfg.get("data")
    if data is None:
        raise ValidationError("segment needs --data (or a 'data' config field)")
    args.out = args.out or cfg.get("out")
    out = _require_out(args)
    manifest, seq = read_dataset(data)
    frames = seq.as_array()
    if args.frames is not None:
        frames = frames[: args.frames]
    seg_fields = dict(cfg.get("seg", {}))
    scfg = SegConfig(pcfg=_predictor_config(cfg), **seg_fields)
    horizon = int(_take(cfg, "horizon", 0))
    run = seg_run(frames, manifest["seed_count"], scfg, horizon=horizon,
                  params=_load_model(args.model or cfg.get("model")))
    dump_run(run, out, scfg)

    rows = []
    mask_tpl = manifest.get("paths", {}).get("masks")
    if mask_tpl:
        for k in range(run.corrected_steps):
            t = manifest["seed_count"] + k
            mask = read_pgm(Path(data) / (mask_tpl % t)).pixels > 0.5
            est = run.states[k].a > 0.5
            union = np.logical_or(est, mask).sum()
            iou = float(np.logical_and(est, mask).sum() / union) if union else 1.0
            rows.append(f"{t},{iou!r}")
        (out / "iou.csv").write_text("t,iou\n" + "\n".join(rows) + "\n")
    _write_manifest(
        out,
        {
            "command": "segment",
            "data": str(data),
            "seg": seg_fields,
            "horizon": horizon,
            "clamped_alpha_pixels": [s.clamp_count for s in run.states],
        },
    )
    print(f"segmented {len(run.states)} steps ({run.corrected_steps} corrected)")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import evaluate_run
    from .scenes import read_dataset
    from .tensor_io import read_pgm

    cfg = _load_config(args.config)
    data = args.data or cfg.get("data")
    pred_dir = args.pred or cfg.get("pred")
    if data is None or pred_dir is None:
        raise ValidationError("eval needs --data and --pred (or config fields)")
    args.out = args.out or cfg.get("out")
    out = _require_out(args)
    manifest, seq = read_dataset(data)
    gt = seq.as_array()
    seed_count = manifest["seed_count"]
    pred_dir = Path(pred_dir)
    if (pred_dir / "pred").is_dir():
        pred_dir = pred_dir / "pred"
    pred = gt.copy()
    for t in range(seed_count, len(gt)):
        path = pred_dir / f"{t:04d}.pgm"
        if not path.exists():
            raise ValidationError(f"missing predicted frame {path}")
        pred[t] = read_pgm(path).pixels
    rows, aggregate = evaluate_run(pred, gt, seed_count, csv_path=out / "metrics.csv")
    _write_manifest(
        out,
        {"command": "eval", "data": str(data), "pred": str(pred_dir), "aggregate": aggregate},
    )
    print(json.dumps(aggregate, sort_keys=True))
    return 0


def _cmd_viz(args) -> int:
    from .predictor import measure_velocity
    from .scenes import read_dataset
    from .tensor_io import make_frame, write_pgm, write_velocity_artifacts

    cfg = _load_config(args.config)
    data = args.data or cfg.get("data")
    if data is None:
        raise ValidationError("viz needs --data (or a 'data' config field)")
    args.out = args.out or cfg.get("out")
    out = _require_out(args)
    manifest, seq = read_dataset(data)
    frames = seq.as_array()
    if args.frames is not None:
        frames = frames[: args.frames]
    pcfg = _predictor_config(cfg)
    grid, window = pcfg.plan(frames[0].shape)
    for t in range(1, len(frames)):
        vf = measure_velocity(frames[t - 1], frames[t], grid, window)
        write_velocity_artifacts(
            vf,
            make_frame(np.clip(frames[t], 0.0, 1.0)),
            {
                "csv": out / f"{t:04d}.csv",
                "overlay": out / f"{t:04d}.pgm",
            },
            arrow_scale=3.0,
        )
    _write_manifest(out, {"command": "viz", "data": str(data), "frames": int(len(frames))})
    print(f"wrote velocity overlays for {len(frames) - 1} frame pairs")
    return 0


# ---------------------------------------------------------------------------
# selftest


def _selftest_checks():
    """Fast invariant battery; each yields (name, callable->bool)."""
    from .lft import ilft, lft, make_window, plan_grid
    from .metrics import compute_metrics
    from .motion_seg import composite
    from .phase_motion import (
        VelocityField,
        extract_velocity,
        poc,
        velocity_to_pd,
    )
    from .scenes import gen_sequence, random_scene_config
    from .transform_model import (
        TrainConfig,
        assemble_input,
        init_params,
        tm_forward,
    )

    grid = plan_grid(64, 64, 15, 7, 4)
    window = make_window("confined_gaussian", 15, 0.14)
    rng = np.random.default_rng(0)

    def reconstruction():
        x = rng.random((64, 64))
        back = np.asarray(ilft(lft(x, grid, window), grid, window))
        return float(np.abs(back - x).max()) <= 1e-5

    def shift_recovery():
        x = rng.random((32, 32))
        y = np.roll(x, (3, -5), axis=(0, 1))
        prod = np.fft.fft2(y) * np.conj(np.fft.fft2(x))
        dy, dx, _peak = poc(prod / np.maximum(np.abs(prod), 1e-12))
        return (dy, dx) == (3, -5)

    def bottleneck_round_trip():
        l_u, l_v = grid.L_U, grid.L_V
        vf = VelocityField(
            grid=grid, vx=np.full((l_u, l_v), 1.25), vy=np.full((l_u, l_v), -2.5)
        )
        back = extract_velocity(velocity_to_pd(vf, grid.n_prime))
        vx, vy = back.values
        return bool(
            np.allclose(vx, 1.25, atol=1e-6) and np.allclose(vy, -2.5, atol=1e-6)
        )

    def identity_transform_model():
        params = init_params(TrainConfig(), seed=0)
        l_u, l_v = 4, 4
        vf = VelocityField(
            grid=None,
            vx=rng.normal(size=(l_u, l_v)),
            vy=rng.normal(size=(l_u, l_v)),
        )
        out = tm_forward(params, assemble_input([vf], params.r))
        vx_in, vy_in = vf.values
        vx_out, vy_out = out.values
        return bool(np.array_equal(vx_in, vx_out) and np.array_equal(vy_in, vy_out))

    def composite_trivials():
        fg, bg = rng.random((8, 8)), rng.random((8, 8))
        ones, zeros = np.ones((8, 8)), np.zeros((8, 8))
        return bool(
            np.array_equal(composite(fg, bg, ones), fg)
            and np.array_equal(composite(fg, bg, zeros), bg)
        )

    def metrics_identity():
        x = rng.random((32, 32))
        m = compute_metrics(x, x)
        return m["l1"] == 0.0 and m["mse"] == 0.0 and m["psnr"] == 99.0

    def generator_determinism():
        a = gen_sequence(random_scene_config(7))[0].as_array()
        b = gen_sequence(random_scene_config(7))[0].as_array()
        return bool(np.array_equal(a, b))

    return [
        ("lft_reconstruction", reconstruction),
        ("integer_shift_recovery", shift_recovery),
        ("velocity_bottleneck_round_trip", bottleneck_round_trip),
        ("transform_model_identity_at_init", identity_transform_model),
        ("composite_trivials", composite_trivials),
        ("metrics_identity_frame", metrics_identity),
        ("generator_determinism", generator_determinism),
    ]


def _cmd_selftest(args) -> int:
    failures = 0
    for name, check in _selftest_checks():
        try:
            ok = check()
        except Exception as exc:  # a crash is a failure, not an abort
            ok = False
            print(f"FAIL {name} ({type(exc).__name__}: {exc})")
            failures += 1
            continue
        print(("PASS" if ok else "FAIL") + f" {name}")
        failures += 0 if ok else 1
    return 0 if failures == 0 else 2


# ---------------------------------------------------------------------------
# argument plumbing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phasecast",
        description="Local-frequency-domain video prediction and segmentation.",
    )
    sub = parser.add_subparsers(dest="command")
    for name, help_text in (
        ("gen", "render a sprite scene into a dataset directory"),
        ("predict", "roll out predictions over a dataset"),
        ("train", "train the velocity transform model"),
        ("segment", "run the layered motion segmentation loop"),
        ("eval", "score predicted frames against a dataset"),
        ("viz", "write measured-velocity overlays for a dataset"),
        ("selftest", "run the built-in invariant checks"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config path")
        p.add_argument("--seed", type=int, help="override the config's RNG seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--frames", type=int, help="override the frame count")
        p.add_argument("--model", help="transform-model parameter file")
        p.add_argument("--data", help="input dataset directory")
        if name == "eval":
            p.add_argument("--pred", help="directory of predicted frames")
    return parser


_COMMANDS = {
    "gen": _cmd_gen,
    "predict": _cmd_predict,
    "train": _cmd_train,
    "segment": _cmd_segment,
    "eval": _cmd_eval,
    "viz": _cmd_viz,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    if argv and argv[0] not in _COMMANDS and not argv[0].startswith("-"):
        parser.print_usage(sys.stderr)
        print(f"unknown subcommand: {argv[0]}", file=sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ReconstructionError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
