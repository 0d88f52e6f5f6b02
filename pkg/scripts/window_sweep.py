#!/usr/bin/env python3
"""Reconstruction error and overlap-add margin across window geometries.

Sweeps cell size / hop / padding combinations on random frames and prints
the worst round-trip error plus the minimum overlap-add weight (the margin
that keeps synthesis well-conditioned).

    python3 scripts/window_sweep.py
"""

import numpy as np

from phasecast.errors import ValidationError
from phasecast.lft import ilft, lft, make_window, overlap_add_weights, plan_grid


def main():
    rng = np.random.default_rng(0)
    frames = [rng.uniform(0, 1, (64, 64)) for _ in range(5)]
    print(f"{'N':>3} {'H':>3} {'P':>3} {'cells':>7} {'max_err':>10} {'min_ola':>9}")
    for N, H, P in [
        (15, 7, 4),
        (15, 7, 0),
        (9, 3, 2),
        (21, 7, 4),
        (15, 3, 4),
        (15, 9, 4),
        (31, 9, 4),
    ]:
        try:
            grid = plan_grid(64, 64, N, H, P)
        except ValidationError as e:
            print(f"{N:>3} {H:>3} {P:>3}  rejected: {e}")
            continue
        window = make_window("confined_gaussian", N, 0.3)
        ola = overlap_add_weights(grid, window)
        err = max(
            float(np.abs(ilft(lft(x, grid, window), grid, window) - x).max())
            for x in frames
        )
        cells = f"{grid.L_U}x{grid.L_V}"
        print(f"{N:>3} {H:>3} {P:>3} {cells:>7} {err:10.2e} {float(ola.min()):9.2e}")


if __name__ == "__main__":
    main()
