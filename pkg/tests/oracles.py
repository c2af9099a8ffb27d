"""Brute-force reference implementations used as independent test oracles.

Everything here is deliberately written in the most literal way possible
(quadruple sums, explicit double loops, straight-line state updates) and is
kept free of any imports from the package's fast paths.
"""

import math

import numpy as np


def dct2_quadruple_sum(x, normalization="raw"):
    """O((HW)^2) direct cosine-sum 2D DCT of a (batch, C, H, W) array."""
    x = np.asarray(x, dtype=np.float64)
    b, c, h, w = x.shape
    out = np.zeros((b, c, h, w))
    for i in range(h):
        for j in range(w):
            acc = np.zeros((b, c))
            for hh in range(h):
                for ww in range(w):
                    acc += (
                        x[:, :, hh, ww]
                        * math.cos(math.pi * i * (hh + 0.5) / h)
                        * math.cos(math.pi * j * (ww + 0.5) / w)
                    )
            if normalization == "ortho":
                si = math.sqrt(1.0 / h) if i == 0 else math.sqrt(2.0 / h)
                sj = math.sqrt(1.0 / w) if j == 0 else math.sqrt(2.0 / w)
                acc *= si * sj
            out[:, :, i, j] = acc
    return out


def gaussian_kernel(a, b, sigma):
    return math.exp(-float(np.sum((np.asarray(a) - np.asarray(b)) ** 2)) / (2.0 * sigma**2))


def mmd_double_sum(x, y, sigma):
    """Biased squared-MMD estimator via explicit double sums."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    kxx = sum(gaussian_kernel(a, b, sigma) for a in x for b in x) / (len(x) * len(x))
    kyy = sum(gaussian_kernel(a, b, sigma) for a in y for b in y) / (len(y) * len(y))
    kxy = sum(gaussian_kernel(a, b, sigma) for a in x for b in y) / (len(x) * len(y))
    return max(kxx + kyy - 2.0 * kxy, 0.0)


def median_pairwise_distance(x, y):
    """Median over all unordered pairs of the pooled set, self-pairs excluded."""
    z = np.concatenate([np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)])
    dists = []
    for i in range(len(z)):
        for j in range(i + 1, len(z)):
            dists.append(float(np.sqrt(np.sum((z[i] - z[j]) ** 2))))
    return float(np.median(dists)) if dists else 0.0


def coral_direct(x, y):
    """Squared Frobenius distance of sample covariances, scaled by 1/(4 d^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = x.shape[1]
    cx = np.cov(x, rowvar=False, ddof=1).reshape(d, d)
    cy = np.cov(y, rowvar=False, ddof=1).reshape(d, d)
    return float(np.sum((cx - cy) ** 2)) / (4.0 * d * d)


def adv_value_direct(d_src, d_tgt):
    """-mean log(1 - D(src)) - mean log(D(tgt)) by explicit summation."""
    d_src = [min(max(float(v), 1e-7), 1.0 - 1e-7) for v in d_src]
    d_tgt = [min(max(float(v), 1e-7), 1.0 - 1e-7) for v in d_tgt]
    a = -sum(math.log(1.0 - v) for v in d_src) / len(d_src)
    b = -sum(math.log(v) for v in d_tgt) / len(d_tgt)
    return a + b


def spearman_via_ranks(pred, truth):
    """Average-rank Spearman computed as Pearson on hand-ranked vectors."""

    def average_ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        ranks = np.empty(len(v))
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
            i = j + 1
        return ranks

    rp, rt = average_ranks(pred), average_ranks(truth)
    rp = rp - rp.mean()
    rt = rt - rt.mean()
    return float(np.sum(rp * rt) / math.sqrt(np.sum(rp**2) * np.sum(rt**2)))


def random_schedule_case(rng):
    """Random (config kwargs, epsilon stream) pair exercising all three phases."""
    grid_h = int(rng.integers(2, 5))
    grid_w = int(rng.integers(2, 5))
    cells = grid_h * grid_w
    m = int(rng.integers(1, cells + 1))
    n_bands = int(rng.integers(1, cells - m + 2))
    T = int(rng.integers(1, 4))
    T_w = int(rng.integers(1, 6))
    T_m = T_w + n_bands * T + int(rng.integers(0, 3))
    T_a = T_m + int(rng.integers(0, 30))
    kwargs = dict(
        T=T, T_w=T_w, T_m=T_m, T_a=T_a,
        m=m, k=int(rng.integers(0, 4)),
        grid_h=grid_h, grid_w=grid_w,
        n_bands=n_bands,
        selection="argmax" if rng.random() < 0.5 else "argmin",
    )
    eps = rng.uniform(0.0, 1.0, size=T_a)
    if rng.random() < 0.3:
        eps = np.round(eps, 1)  # provoke ties
    return kwargs, [float(v) for v in eps]


def simulate_band_schedule(cfg, eps_stream):
    """Straight-line replay of the three-phase schedule.

    ``cfg`` is any object with attributes m, k, T, T_w, T_m, T_a, n_bands and
    selection ("argmax" or "argmin"). Returns the list of band indices emitted
    per iteration (the band each iteration aligns on), the interval means
    recorded during movement, and the selected band.

    Written directly from the schedule's definition, independently of the
    package implementation: warm-up pins band 0; movement gives each of the
    first n_bands windows exactly T iterations in trajectory order and records
    the interval mean; selection is arg(max|min) with ties toward the lowest
    index; finetuning starts at the selected band with direction +1, reverses
    when the interval mean worsens relative to the band it came from or when
    the radius edge is reached, and clamping at the valid-band edge also
    reverses.
    """
    nb = cfg.n_bands
    lo_hist = []  # movement interval means, one per band
    bands_emitted = []
    latest = {}

    t = 0
    # warm-up on band 0
    while t < cfg.T_w:
        bands_emitted.append(0)
        t += 1
    # movement: bands 0..nb-1, T iterations each
    for j in range(nb):
        acc = []
        for _ in range(cfg.T):
            bands_emitted.append(j)
            acc.append(eps_stream[t])
            t += 1
        lo_hist.append(sum(acc) / len(acc))
        latest[j] = lo_hist[-1]
    # deferral: if T_m is later than movement needs, hold the last band
    while t < cfg.T_m:
        bands_emitted.append(nb - 1)
        t += 1
    if cfg.selection == "argmax":
        best = max(lo_hist)
        j_star = lo_hist.index(best)
    else:
        best = min(lo_hist)
        j_star = lo_hist.index(best)
    lo = max(0, j_star - cfg.k)
    hi = min(nb - 1, j_star + cfg.k)
    j, d = j_star, 1
    acc = []
    while t < cfg.T_a:
        bands_emitted.append(j)
        acc.append(eps_stream[t])
        t += 1
        if len(acc) == cfg.T:
            mean = sum(acc) / len(acc)
            ref = latest.get(j - d)
            flip = (ref is not None and mean > ref) or j >= j_star + cfg.k or j <= j_star - cfg.k
            latest[j] = mean
            if flip:
                d = -d
            nxt = j + d
            if nxt < lo or nxt > hi:
                nxt = min(max(nxt, lo), hi)
                d = -d
            j = nxt
            acc = []
    return bands_emitted, lo_hist, j_star
