"""Independent reference implementations used by the unit and acceptance tests."""

import functools
import itertools
import math

import numpy as np
from scipy.spatial.distance import cdist

from volcap import evaluation as ev, sync


# ---------------------------------------------------------------------------
# sync


def exhaustive_sequence(tl: sync.Timeline, start: sync.GoF) -> list[tuple[int, ...]]:
    """Lexicographically best monotone alignment over every advance sequence (memoized search)."""
    n = tl.lengths()
    K = tl.K

    @functools.lru_cache(maxsize=None)
    def best(state):
        options = []
        for s in itertools.product((0, 1), repeat=K):
            nxt = tuple(i + d for i, d in zip(state, s))
            if not any(s) or any(j >= m for j, m in zip(nxt, n)):
                continue
            st_ = tl.stamps(nxt)
            key = (round(float(st_.max() - st_.min()), sync.TIE_DECIMALS), -sum(s), s)
            tail_keys, tail_states = best(nxt)
            options.append(((key,) + tail_keys, (nxt,) + tail_states))
        if not options:
            return (), ()
        return min(options, key=lambda o: o[0])

    return [start.index] + list(best(start.index)[1])


def random_timeline(seed: int) -> sync.Timeline:
    r = np.random.default_rng(seed)
    K = int(r.integers(1, 4))
    times = []
    for _ in range(K):
        N = int(r.integers(1, 9))
        t = np.cumsum(r.uniform(5, 60, N)) + r.uniform(-20, 20)
        times.append(np.round(t, int(r.integers(0, 3))))
    return sync.Timeline(times)



# ---------------------------------------------------------------------------
# evaluation


def hausdorff_brute(A, B):
    a = np.argwhere(A).astype(float)
    b = np.argwhere(B).astype(float)
    D = cdist(a, b)
    return max(D.min(axis=1).max(), D.min(axis=0).max())


def _gauss_window():
    x = np.arange(-ev.SSIM_RADIUS, ev.SSIM_RADIUS + 1, dtype=float)
    g = np.exp(-x * x / (2 * ev.SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _naive_stats(x, y):
    r = ev.SSIM_RADIUS
    G = _gauss_window()
    xp = np.pad(x, r, mode="symmetric")
    yp = np.pad(y, r, mode="symmetric")
    l = np.empty_like(x)
    c = np.empty_like(x)
    s = np.empty_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            wx = xp[i:i + 2 * r + 1, j:j + 2 * r + 1]
            wy = yp[i:i + 2 * r + 1, j:j + 2 * r + 1]
            mx, my = (G * wx).sum(), (G * wy).sum()
            vx = max((G * (wx - mx) ** 2).sum(), 0.0)
            vy = max((G * (wy - my) ** 2).sum(), 0.0)
            cxy = (G * (wx - mx) * (wy - my)).sum()
            l[i, j] = (2 * mx * my + ev.SSIM_C1) / (mx * mx + my * my + ev.SSIM_C1)
            c[i, j] = (2 * math.sqrt(vx * vy) + ev.SSIM_C2) / (vx + vy + ev.SSIM_C2)
            s[i, j] = (cxy + ev.SSIM_C3) / (math.sqrt(vx * vy) + ev.SSIM_C3)
    return l, c, s


def wms3im_naive(img_r, img_g, S):
    x = 0.299 * img_r[..., 0] + 0.587 * img_r[..., 1] + 0.114 * img_r[..., 2]
    y = 0.299 * img_g[..., 0] + 0.587 * img_g[..., 1] + 0.114 * img_g[..., 2]
    x, y, S = x.astype(float), y.astype(float), S.astype(bool)
    r = ev.SSIM_RADIUS
    score = 1.0
    for j in range(3):
        if j:
            h, w = x.shape[0] // 2, x.shape[1] // 2
            x = np.array([[x[2 * a:2 * a + 2, 2 * b:2 * b + 2].mean() for b in range(w)] for a in range(h)])
            y = np.array([[y[2 * a:2 * a + 2, 2 * b:2 * b + 2].mean() for b in range(w)] for a in range(h)])
            S = np.array([[S[2 * a:2 * a + 2, 2 * b:2 * b + 2].any() for b in range(w)] for a in range(h)])
        l, c, s = _naive_stats(x, y)
        Sp = np.pad(S, r)
        num = np.zeros(3)
        den = 0.0
        for i, k in zip(*np.nonzero(S)):
            wt = Sp[i:i + 2 * r + 1, k:k + 2 * r + 1].sum()
            num += wt * np.array([l[i, k], c[i, k], s[i, k]])
            den += wt
        p = num / den
        for v, e in zip(p, (ev.WMS3IM_ALPHA[j], ev.WMS3IM_BETA[j], ev.WMS3IM_GAMMA[j])):
            score *= math.copysign(abs(v) ** e, v) if e else 1.0
    return score


def random_pair(seed, shape=(26, 30)):
    r = np.random.default_rng(seed)
    base = r.integers(0, 256, shape + (3,)).astype(float)
    base = 0.5 * base + 0.5 * np.roll(base, 1, axis=0)
    other = np.clip(base * r.uniform(0.7, 1.2) + r.normal(0, 20, base.shape), 0, 255)
    if seed % 3 == 0:
        other = 255 - other          # anticorrelated: structure term goes negative
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    S = (yy - r.uniform(8, 18)) ** 2 + (xx - r.uniform(8, 22)) ** 2 < r.uniform(30, 120)
    return np.rint(base).astype(np.uint8), np.rint(other).astype(np.uint8), S


# ---------------------------------------------------------------------------
# mocap


def mst_weight_brute(n, edges, w):
    best = math.inf
    for sub in itertools.combinations(range(len(edges)), n - 1):
        ds = list(range(n))

        def f(a):
            while ds[a] != a:
                a = ds[a]
            return a
        ok = True
        for e in sub:
            ra, rb = f(edges[e][0]), f(edges[e][1])
            if ra == rb:
                ok = False
                break
            ds[ra] = rb
        if ok:
            best = min(best, sum(w[e] for e in sub))
    return best


def link_joint_scan(P, Xr, Xx, dr, dx):
    costs = [abs(math.dist(p, Xr) - dr) + abs(math.dist(p, Xx) - dx) for p in P]
    m = min(costs)
    mid = (len(P) - 1) / 2
    best = None
    for i, c in enumerate(costs):
        if c == m and (best is None or abs(i - mid) < abs(best - mid)):
            best = i
    return best


def segment_distance_dense(p, a, b, n=20001):
    t = np.linspace(0, 1, n)[:, None]
    return np.linalg.norm(a + t * (b - a) - p, axis=1).min()
