"""Regenerate the bundled truth phantoms in src/bip/data/.

1D: three constant levels (jumps at -0.55, -0.1 and 0.35) followed by a
smooth bump centred at 0.7.
2D: two constant blocks, a lower middle block sharing an edge with the left
block, and a linear ramp across the top.
"""

from pathlib import Path

import numpy as np

from bip.forward import save_field_csv
from bip.network import Grid, GridField

DATA = Path(__file__).resolve().parents[1] / "src" / "bip" / "data"


def phantom_1d(x):
    u = np.where(x < -0.55, 0.4, -1.2)
    u = np.where((x >= -0.1) & (x < 0.35), -0.3, u)
    bump = -1.0 + 0.8 * np.exp(-(((x - 0.7) / 0.15) ** 2))
    return np.where(x >= 0.35, bump, u)


def phantom_2d(x, y):
    u = np.zeros_like(x)
    u[(x >= -0.7) & (x < -0.1) & (y >= -0.6) & (y < 0.2)] = 1.0
    u[(x >= -0.1) & (x < 0.5) & (y >= -0.2) & (y < 0.2)] = 0.4
    u[(x >= 0.2) & (x < 0.8) & (y >= -0.85) & (y < -0.4)] = 0.7
    ramp = (x >= -0.6) & (x < 0.6) & (y >= 0.45) & (y < 0.85)
    u[ramp] = 0.2 + (x[ramp] + 0.6) / 1.2
    return u


def main():
    DATA.mkdir(parents=True, exist_ok=True)
    g = Grid(1, 128)
    save_field_csv(GridField(g, phantom_1d(g.axis)), DATA / "truth_1d_128.csv")
    for n in (50, 100):
        g = Grid(2, n)
        p = g.points()
        save_field_csv(GridField(g, phantom_2d(p[:, 0], p[:, 1])), DATA / f"truth_2d_{n}.csv")


if __name__ == "__main__":
    main()
