"""Independent reference computations used by the tests.

Nothing here imports beamlab's metric or geometry code; each function is a
deliberately naive restatement of the quantity it checks.
"""

import math

import numpy as np
from matplotlib.path import Path as MplPath


def raster_oracle(vertices, x0, y0, x1, y1, n=2048):
    """Boolean n x n grid over [x0, x1] x [y0, y1]; cell centers tested with matplotlib."""
    xs = x0 + (np.arange(n) + 0.5) * (x1 - x0) / n
    ys = y0 + (np.arange(n) + 0.5) * (y1 - y0) / n
    gx, gy = np.meshgrid(xs, ys)
    inside = MplPath(np.asarray(vertices)).contains_points(np.column_stack([gx.ravel(), gy.ravel()]))
    return inside.reshape(n, n), gx, gy


def centroid_oracle(vertices, x0, y0, x1, y1, n=2048):
    inside, gx, gy = raster_oracle(vertices, x0, y0, x1, y1, n)
    return float(gx[inside].mean()), float(gy[inside].mean())


def iou_oracle(va, vb, x0, y0, x1, y1, n=2048):
    a = raster_oracle(va, x0, y0, x1, y1, n)[0]
    b = raster_oracle(vb, x0, y0, x1, y1, n)[0]
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def pcc_bruteforce(p, a):
    """Textbook two-pass Pearson r in plain Python; None when undefined."""
    n = len(p)
    if n < 2:
        return None
    mp = sum(p) / n
    ma = sum(a) / n
    num = 0.0
    sp = 0.0
    sa = 0.0
    for x, y in zip(p, a):
        num += (x - mp) * (y - ma)
        sp += (x - mp) ** 2
        sa += (y - ma) ** 2
    if sp == 0 or sa == 0:
        return None
    return num / math.sqrt(sp * sa)


def interpolated_ap_oracle(tp_flags, n_gt, points=101):
    """AP from the definition: at each recall level r take the best precision
    over every ranking prefix whose recall reaches r."""
    prefixes = []
    hits = 0
    for k, t in enumerate(tp_flags, 1):
        hits += bool(t)
        prefixes.append((hits / n_gt, hits / k))
    total = 0.0
    for r in np.linspace(0.0, 1.0, points):
        best = 0.0
        for rec, prec in prefixes:
            if rec >= r and prec > best:
                best = prec
        total += best
    return total / points


def random_star_polygon(rng, cx, cy, r_min, r_max, n_min=3, n_max=12):
    """Simple polygon, star-shaped about (cx, cy): sorted angles with every
    angular gap below pi, random radii."""
    n = int(rng.integers(n_min, n_max + 1))

    def gaps(a):
        return np.diff(np.concatenate([a, [a[0] + 2 * np.pi]]))

    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    while np.min(gaps(ang)) < 1e-3 or np.max(gaps(ang)) >= np.pi * 0.95:
        ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(r_min, r_max, n)
    return [(cx + r * math.cos(t), cy + r * math.sin(t)) for r, t in zip(rad, ang)]
