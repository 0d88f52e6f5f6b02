#!/usr/bin/env python3
"""Does the learned velocity filter beat raw phase extrapolation?

Builds a bouncing-sprites dataset, trains the transform model on it, then
compares mean closed-loop rollout MSE for three predictors over the same
sequences: the trained model, the identity model (measured velocities used
as-is), and copy-last-frame.

    python3 scripts/learning_benefit.py --sequences 500 --epochs 16
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from phasecast.predictor import PredictorConfig, rollout
from phasecast.scenes import gen_sequence, random_scene_config
from phasecast.transform_model import TrainConfig, save_params, train


def mean_rollout_mse(sequences, seed_count, params, pcfg):
    total = 0.0
    for arr in sequences:
        preds, _ = rollout(arr, seed_count, params=params, pcfg=pcfg)
        total += float(np.mean((np.stack(preds) - arr[seed_count:]) ** 2))
    return total / len(sequences)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sequences", type=int, default=500)
    ap.add_argument("--frames", type=int, default=10)
    ap.add_argument("--sprites", type=int, default=2)
    ap.add_argument("--epochs", type=int, default=16)
    ap.add_argument("--d-tm", type=int, default=3)
    ap.add_argument("--growth", type=int, default=8)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--base-seed", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=0, help="training seed")
    ap.add_argument("--out", type=Path, default=None, help="save model + summary here")
    args = ap.parse_args()

    t0 = time.time()
    sequences = [
        gen_sequence(
            random_scene_config(
                seed=args.base_seed + i, n_sprites=args.sprites, frame_count=args.frames
            )
        )[0].as_array()
        for i in range(args.sequences)
    ]
    print(f"built {len(sequences)} sequences in {time.time() - t0:.0f}s", flush=True)

    pcfg = PredictorConfig()
    tcfg = TrainConfig(
        d_tm=args.d_tm,
        growth=args.growth,
        r=1,
        epochs=args.epochs,
        lr_period=args.epochs,
        alpha=0.0,
        beta=1.0,
        gamma=1.0,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    t1 = time.time()
    params, log = train(sequences, tcfg, pcfg=pcfg)
    print(f"trained {params.count} params in {(time.time() - t1) / 60:.1f} min", flush=True)
    for row in log:
        print(f"  epoch {row['epoch']:3d}  lr {row['lr']:.5f}  mse {row['mse']:.6f}")

    identity = mean_rollout_mse(sequences, 2, None, pcfg)
    trained = mean_rollout_mse(sequences, 2, params, pcfg)
    copy_last = float(np.mean([np.mean((a[2:] - a[1][None]) ** 2) for a in sequences]))
    summary = {
        "sequences": args.sequences,
        "identity_mse": identity,
        "trained_mse": trained,
        "copy_last_mse": copy_last,
        "trained_over_identity": trained / identity,
        "minutes": (time.time() - t0) / 60,
    }
    print(json.dumps(summary, indent=2))

    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        save_params(params, args.out / "model.lfdt", config=tcfg, epoch=len(log))
        (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
