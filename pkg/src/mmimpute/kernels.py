"""Hot inner loops, each in a numba flavour and a pure-numpy flavour.

The public names (``masked_sq_dist``, ``threshold_counts``, ``cast_silhouette``)
dispatch to numba unless ``MMIMPUTE_PURE_NUMPY`` is set. The ``*_numba`` and
``*_numpy`` variants stay importable for tests and the benchmark.
"""
import numpy as np

from ._accel import USE_NUMBA, njit


# --- masked squared distance to every modal ---------------------------------

def masked_sq_dist_numpy(values, mask, means):
    """(B, N) values, (B, N) bool mask, (L, N) means -> (B, L) distances."""
    diff = values[:, None, :] - means[None, :, :]
    return np.einsum("bln,bln,bn->bl", diff, diff, mask.astype(np.float64))


@njit
def masked_sq_dist_numba(values, mask, means):
    B, N = values.shape
    L = means.shape[0]
    out = np.zeros((B, L))
    for b in range(B):
        for l in range(L):
            acc = 0.0
            for i in range(N):
                if mask[b, i]:
                    d = values[b, i] - means[l, i]
                    acc += d * d
            out[b, l] = acc
    return out


# --- confusion counts over a threshold sweep --------------------------------

def threshold_counts_numpy(pred, target, thresholds):
    """Return (tp, fp, fn) int64 arrays, one entry per threshold.

    A voxel counts as predicted-positive when ``pred >= threshold``.
    """
    pred = np.ravel(pred)
    target = np.ravel(target).astype(bool)
    pos = np.sort(pred[target])
    neg = np.sort(pred[~target])
    tp = pos.size - np.searchsorted(pos, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    fn = pos.size - tp
    return tp.astype(np.int64), fp.astype(np.int64), fn.astype(np.int64)


@njit
def _threshold_counts_numba(pred, target, thresholds):
    T = thresholds.shape[0]
    # bucket k holds predictions in [thr[k-1], thr[k]); bucket 0 is below thr[0]
    pos_hist = np.zeros(T + 1, dtype=np.int64)
    neg_hist = np.zeros(T + 1, dtype=np.int64)
    n_pos = 0
    for j in range(pred.shape[0]):
        p = pred[j]
        lo = 0
        hi = T
        while lo < hi:
            mid = (lo + hi) // 2
            if thresholds[mid] <= p:
                lo = mid + 1
            else:
                hi = mid
        if target[j]:
            pos_hist[lo] += 1
            n_pos += 1
        else:
            neg_hist[lo] += 1
    tp = np.zeros(T, dtype=np.int64)
    fp = np.zeros(T, dtype=np.int64)
    run_p = 0
    run_n = 0
    for k in range(T, 0, -1):
        run_p += pos_hist[k]
        run_n += neg_hist[k]
        tp[k - 1] = run_p
        fp[k - 1] = run_n
    fn = n_pos - tp
    return tp, fp, fn


def threshold_counts_numba(pred, target, thresholds):
    return _threshold_counts_numba(
        np.ascontiguousarray(np.ravel(pred), dtype=np.float64),
        np.ascontiguousarray(np.ravel(target)).astype(np.bool_),
        np.ascontiguousarray(thresholds, dtype=np.float64),
    )


# --- orthographic ray casting through an occupancy grid ---------------------

def _ray_geometry(width, elevation, supersample, depth):
    """Sample offsets shared by both ray casters so they agree bit for bit."""
    step = 2.0 / width
    sub = (np.arange(supersample) + 0.5) / supersample
    cols = (np.arange(width)[:, None] + sub[None, :]).ravel() * step - 1.0
    # row 0 is the top of the image
    rows = 1.0 - (np.arange(width)[:, None] + sub[None, :]).ravel() * step
    n_t = int(np.ceil(2.0 * np.sqrt(3.0) * depth)) + 1
    ts = np.linspace(-np.sqrt(3.0), np.sqrt(3.0), n_t)
    ce, se = np.cos(elevation), np.sin(elevation)
    # toward-camera direction (ce, 0, se); image up (-se, 0, ce); image right (0, 1, 0)
    basis = np.array([[0.0, 1.0, 0.0], [-se, 0.0, ce], [ce, 0.0, se]])
    return cols, rows, ts, basis


def cast_silhouette_numpy(grid, width, elevation, supersample=4):
    D = grid.shape[0]
    cols, rows, ts, basis = _ray_geometry(width, elevation, supersample, D)
    U, V, C = basis
    v = rows[:, None, None]
    u = cols[None, :, None]
    t = ts[None, None, :]
    px = u * U[0] + v * V[0] + t * C[0]
    py = u * U[1] + v * V[1] + t * C[1]
    pz = u * U[2] + v * V[2] + t * C[2]
    ix = np.floor((px + 1.0) * (D / 2.0)).astype(np.int64)
    iy = np.floor((py + 1.0) * (D / 2.0)).astype(np.int64)
    iz = np.floor((pz + 1.0) * (D / 2.0)).astype(np.int64)
    inside = (ix >= 0) & (ix < D) & (iy >= 0) & (iy < D) & (iz >= 0) & (iz < D)
    occ = np.zeros(inside.shape, dtype=bool)
    occ[inside] = grid[ix[inside], iy[inside], iz[inside]] != 0
    hit = occ.any(axis=2).astype(np.float64)
    S = supersample
    return hit.reshape(width, S, width, S).mean(axis=(1, 3))


@njit
def _cast_numba(grid, rows, cols, ts, basis, width, supersample):
    D = grid.shape[0]
    S = supersample
    half = D / 2.0
    img = np.zeros((width, width))
    for r in range(rows.shape[0]):
        v = rows[r]
        for c in range(cols.shape[0]):
            u = cols[c]
            hit = 0.0
            for k in range(ts.shape[0]):
                t = ts[k]
                px = u * basis[0, 0] + v * basis[1, 0] + t * basis[2, 0]
                py = u * basis[0, 1] + v * basis[1, 1] + t * basis[2, 1]
                pz = u * basis[0, 2] + v * basis[1, 2] + t * basis[2, 2]
                ix = int(np.floor((px + 1.0) * half))
                iy = int(np.floor((py + 1.0) * half))
                iz = int(np.floor((pz + 1.0) * half))
                if 0 <= ix < D and 0 <= iy < D and 0 <= iz < D and grid[ix, iy, iz] != 0:
                    hit = 1.0
                    break
            img[r // S, c // S] += hit
    return img / (S * S)


def cast_silhouette_numba(grid, width, elevation, supersample=4):
    D = grid.shape[0]
    cols, rows, ts, basis = _ray_geometry(width, elevation, supersample, D)
    return _cast_numba(np.ascontiguousarray(grid, dtype=np.uint8), rows, cols, ts, basis, width, supersample)


# --- fused Adam update ----------------------------------------------------------

def adam_update_numpy(p, g, m, v, step_size, beta1, beta2, inv_sqrt_c2, eps):
    """In-place Adam update of ``p``, ``m`` and ``v``.

    ``step_size`` is ``lr / (1 - beta1**t)`` and ``inv_sqrt_c2`` is
    ``1 / sqrt(1 - beta2**t)``, which folds both bias corrections into one
    division per element. Returns False if any updated entry is non-finite.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= step_size * m / (np.sqrt(v) * inv_sqrt_c2 + eps)
    return bool(np.isfinite(p).all())


@njit
def _adam_update_flat(p, g, m, v, step_size, beta1, beta2, inv_sqrt_c2, eps):
    probe = 0.0
    for i in range(p.shape[0]):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        pi = p[i] - step_size * mi / (np.sqrt(vi) * inv_sqrt_c2 + eps)
        p[i] = pi
        # inf * 0 and nan * 0 are nan, so probe stays 0.0 only if every entry is finite
        probe += pi * 0.0
    return probe == 0.0


def adam_update_numba(p, g, m, v, step_size, beta1, beta2, inv_sqrt_c2, eps):
    return _adam_update_flat(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1), v.reshape(-1),
                      step_size, beta1, beta2, inv_sqrt_c2, eps)


def all_finite_numpy(a):
    return bool(np.isfinite(a).all())


@njit
def _all_finite_flat(a):
    for i in range(a.shape[0]):
        if not np.isfinite(a[i]):
            return False
    return True


def all_finite_numba(a):
    return _all_finite_flat(np.ascontiguousarray(a, dtype=np.float64).reshape(-1))


# --- Bernoulli likelihood on logits -----------------------------------------------

def bernoulli_logits_numpy(logits, target):
    """Row log-likelihoods and ``sigmoid(logits) - target`` for (B, V) inputs."""
    e = np.exp(-np.abs(logits))
    sp = np.maximum(logits, 0.0) + np.log1p(e)
    ll = (target * logits - sp).sum(axis=1)
    prob = np.where(logits >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return ll, prob - target


@njit
def bernoulli_logits_numba(logits, target):
    B, V = logits.shape
    ll = np.zeros(B)
    d = np.empty((B, V))
    for b in range(B):
        acc = 0.0
        for j in range(V):
            a = logits[b, j]
            t = target[b, j]
            e = np.exp(-abs(a))
            acc += t * a - (max(a, 0.0) + np.log1p(e))
            if a >= 0:
                d[b, j] = 1.0 / (1.0 + e) - t
            else:
                d[b, j] = e / (1.0 + e) - t
        ll[b] = acc
    return ll, d


# threshold_counts and bernoulli_logits stay on numpy even with numba: sort/searchsorted and the
# vectorised exp/log1p beat the compiled loops (see benchmarks/bench_kernels.py)
threshold_counts = threshold_counts_numpy
bernoulli_logits = bernoulli_logits_numpy
if USE_NUMBA:
    masked_sq_dist = masked_sq_dist_numba
    cast_silhouette = cast_silhouette_numba
    adam_update = adam_update_numba
    all_finite = all_finite_numba
else:
    masked_sq_dist = masked_sq_dist_numpy
    cast_silhouette = cast_silhouette_numpy
    adam_update = adam_update_numpy
    all_finite = all_finite_numpy
