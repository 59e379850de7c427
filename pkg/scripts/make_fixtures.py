"""Regenerate the synthetic feeder fixtures shipped in convexvolt/data.

The feeders are invented radial trees; they are not reproductions of any
published test case. Per-unit bases (documentation only): 12.66 kV, 100 kVA.
Running this script rewrites the files byte-for-byte identically.
"""

from pathlib import Path

import numpy as np

from convexvolt.grid import Bus, Line, RadialNetwork, network_to_text

DATA = Path(__file__).resolve().parents[1] / "src" / "convexvolt" / "data"

HEADER = "# synthetic radial feeder; bases 12.66 kV / 100 kVA (per-unit values below)\n"


def feeder4() -> RadialNetwork:
    parents = [None, 0, 1, 1]
    loads = [(0.0, 0.0), (0.8, 0.35), (0.6, 0.25), (0.9, 0.4)]
    imp = {1: (0.006, 0.004), 2: (0.009, 0.006), 3: (0.008, 0.007)}
    return _build("feeder4", parents, loads, imp)


def feeder10() -> RadialNetwork:
    #       0 - 1 - 2 - 3 - 4 - 7
    #           |   |
    #           8   5 - 6
    #           |
    #           9
    parents = [None, 0, 1, 2, 3, 2, 5, 4, 1, 8]
    loads = [
        (0.0, 0.0), (0.55, 0.25), (0.70, 0.30), (0.45, 0.20), (0.60, 0.28),
        (0.80, 0.35), (0.35, 0.15), (0.50, 0.22), (0.65, 0.30), (0.40, 0.18),
    ]
    imp = {
        1: (0.0020, 0.0016), 2: (0.0030, 0.0022), 3: (0.0045, 0.0030),
        4: (0.0050, 0.0036), 5: (0.0060, 0.0041), 6: (0.0070, 0.0050),
        7: (0.0065, 0.0045), 8: (0.0050, 0.0038), 9: (0.0075, 0.0052),
    }
    return _build("feeder10", parents, loads, imp)


def feeder33() -> RadialNetwork:
    # main trunk 0..17, laterals off buses 1, 2 and 5
    parents = [None] + list(range(0, 17))
    parents += [1, 18, 19, 20]
    parents += [2, 22, 23]
    parents += [5, 25, 26, 27, 28, 29, 30, 31]
    rng = np.random.default_rng(33)
    loads = [(0.0, 0.0)]
    for _ in range(1, 33):
        p = round(float(rng.uniform(0.2, 0.6)), 3)
        loads.append((p, round(p * float(rng.uniform(0.35, 0.55)), 3)))
    imp = {}
    for j in range(1, 33):
        r = round(float(rng.uniform(0.0004, 0.0011)), 5)
        imp[j] = (r, round(r * float(rng.uniform(0.6, 1.1)), 5))
    return _build("feeder33", parents, loads, imp)


def _build(name, parents, loads, imp) -> RadialNetwork:
    buses = [Bus(i, parents[i], *loads[i]) for i in range(len(parents))]
    lines = [Line(parents[j], j, *imp[j]) for j in range(1, len(parents))]
    return RadialNetwork(buses, lines, 1.0, name)


def main():
    DATA.mkdir(parents=True, exist_ok=True)
    for build in (feeder4, feeder10, feeder33):
        net = build()
        (DATA / f"{net.name}.txt").write_text(HEADER + network_to_text(net))


if __name__ == "__main__":
    main()
