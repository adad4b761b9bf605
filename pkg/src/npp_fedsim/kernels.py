"""Hot numeric kernels, each with a numba loop variant and a numpy variant.

The public names at the bottom of the module are bound to one variant
according to :mod:`npp_fedsim._jit`. Both variants stay importable under
``*_numba`` / ``*_numpy`` so tests can check them against each other.
"""

import numpy as np

from ._jit import USE_NUMBA, njit

MASK32 = 0xFFFFFFFF
CHACHA_CONSTANTS = np.array([0x61707865, 0x3320646E, 0x79622D32, 0x6B206574], dtype=np.uint32)

# column rounds then diagonal rounds
_QR_INDEX = np.array(
    [
        [0, 4, 8, 12], [1, 5, 9, 13], [2, 6, 10, 14], [3, 7, 11, 15],
        [0, 5, 10, 15], [1, 6, 11, 12], [2, 7, 8, 13], [3, 4, 9, 14],
    ],
    dtype=np.int64,
)


# --------------------------------------------------------------------------
# ChaCha20 block function
# --------------------------------------------------------------------------

@njit(cache=True)
def _rotl32(v, c):
    return ((v << np.uint64(c)) | (v >> np.uint64(32 - c))) & np.uint64(MASK32)


@njit(cache=True)
def _chacha20_blocks_loop(key_words, nonce_words, counter, nblocks, qr_index):
    out = np.empty(nblocks * 64, dtype=np.uint8)
    init = np.empty(16, dtype=np.uint64)
    state = np.empty(16, dtype=np.uint64)
    m = np.uint64(MASK32)
    init[0] = np.uint64(0x61707865)
    init[1] = np.uint64(0x3320646E)
    init[2] = np.uint64(0x79622D32)
    init[3] = np.uint64(0x6B206574)
    for i in range(8):
        init[4 + i] = np.uint64(key_words[i])
    for i in range(3):
        init[13 + i] = np.uint64(nonce_words[i])
    for blk in range(nblocks):
        init[12] = np.uint64(counter + blk) & m
        for i in range(16):
            state[i] = init[i]
        for _ in range(10):
            for q in range(8):
                a = qr_index[q, 0]
                b = qr_index[q, 1]
                c = qr_index[q, 2]
                d = qr_index[q, 3]
                state[a] = (state[a] + state[b]) & m
                state[d] = _rotl32(state[d] ^ state[a], 16)
                state[c] = (state[c] + state[d]) & m
                state[b] = _rotl32(state[b] ^ state[c], 12)
                state[a] = (state[a] + state[b]) & m
                state[d] = _rotl32(state[d] ^ state[a], 8)
                state[c] = (state[c] + state[d]) & m
                state[b] = _rotl32(state[b] ^ state[c], 7)
        base = blk * 64
        for i in range(16):
            w = (state[i] + init[i]) & m
            out[base + 4 * i] = np.uint8(w & np.uint64(0xFF))
            out[base + 4 * i + 1] = np.uint8((w >> np.uint64(8)) & np.uint64(0xFF))
            out[base + 4 * i + 2] = np.uint8((w >> np.uint64(16)) & np.uint64(0xFF))
            out[base + 4 * i + 3] = np.uint8((w >> np.uint64(24)) & np.uint64(0xFF))
    return out


def chacha20_blocks_numba(key_words, nonce_words, counter, nblocks):
    return _chacha20_blocks_loop(
        np.asarray(key_words, dtype=np.uint32),
        np.asarray(nonce_words, dtype=np.uint32),
        int(counter),
        int(nblocks),
        _QR_INDEX,
    )


def _rotl32_np(v, c):
    return (v << np.uint32(c)) | (v >> np.uint32(32 - c))


def chacha20_blocks_numpy(key_words, nonce_words, counter, nblocks):
    """All blocks at once: the state is a (16, nblocks) uint32 array.

    numpy uint32 arithmetic wraps modulo 2**32, which is exactly the addition
    the cipher needs.
    """
    nblocks = int(nblocks)
    init = np.empty((16, nblocks), dtype=np.uint32)
    init[0:4] = CHACHA_CONSTANTS[:, None]
    init[4:12] = np.asarray(key_words, dtype=np.uint32)[:, None]
    init[12] = ((int(counter) + np.arange(nblocks, dtype=np.uint64)) & MASK32).astype(np.uint32)
    init[13:16] = np.asarray(nonce_words, dtype=np.uint32)[:, None]
    x = init.copy()
    with np.errstate(over="ignore"):
        for _ in range(10):
            for a, b, c, d in _QR_INDEX:
                x[a] += x[b]
                x[d] = _rotl32_np(x[d] ^ x[a], 16)
                x[c] += x[d]
                x[b] = _rotl32_np(x[b] ^ x[c], 12)
                x[a] += x[b]
                x[d] = _rotl32_np(x[d] ^ x[a], 8)
                x[c] += x[d]
                x[b] = _rotl32_np(x[b] ^ x[c], 7)
        x += init
    # serialize block-major, little-endian words
    return np.ascontiguousarray(x.T).astype("<u4").view(np.uint8).reshape(-1)


# --------------------------------------------------------------------------
# Softmax cross-entropy loss and gradient
# --------------------------------------------------------------------------

@njit(cache=True)
def _softmax_xent_grad_loop(W, b, X, y):
    n, f = X.shape
    k = W.shape[0]
    gW = np.zeros((k, f))
    gb = np.zeros(k)
    scores = np.empty(k)
    loss = 0.0
    for i in range(n):
        smax = -np.inf
        for c in range(k):
            s = b[c]
            for j in range(f):
                s += W[c, j] * X[i, j]
            scores[c] = s
            if s > smax:
                smax = s
        # log-sum-exp on shifted scores, so an underflowed target prob stays finite
        target = scores[y[i]] - smax
        z = 0.0
        for c in range(k):
            scores[c] = np.exp(scores[c] - smax)
            z += scores[c]
        loss += np.log(z) - target
        for c in range(k):
            p = scores[c] / z
            if c == y[i]:
                p -= 1.0
            gb[c] += p
            for j in range(f):
                gW[c, j] += p * X[i, j]
    inv = 1.0 / n
    return loss * inv, gW * inv, gb * inv


def softmax_xent_grad_numba(W, b, X, y):
    return _softmax_xent_grad_loop(
        np.ascontiguousarray(W, dtype=np.float64),
        np.ascontiguousarray(b, dtype=np.float64),
        np.ascontiguousarray(X, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.int64),
    )


def softmax_xent_grad_numpy(W, b, X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    scores = X @ W.T + b
    scores -= scores.max(axis=1, keepdims=True)
    expd = np.exp(scores)
    z = expd.sum(axis=1)
    loss = float(np.mean(np.log(z) - scores[np.arange(n), y]))
    probs = expd / z[:, None]
    probs[np.arange(n), y] -= 1.0
    return loss, probs.T @ X / n, probs.sum(axis=0) / n


# --------------------------------------------------------------------------
# Gaussian plume superposition
# --------------------------------------------------------------------------

@njit(cache=True)
def _plume_sum_loop(points, centers, amplitudes, radii, active):
    n = points.shape[0]
    h = centers.shape[0]
    g = amplitudes.shape[1]
    out = np.zeros((n, g))
    for i in range(n):
        for k in range(h):
            if not active[k]:
                continue
            dx = points[i, 0] - centers[k, 0]
            dy = points[i, 1] - centers[k, 1]
            w = np.exp(-(dx * dx + dy * dy) / (2.0 * radii[k] * radii[k]))
            for j in range(g):
                out[i, j] += amplitudes[k, j] * w
    return out


def plume_sum_numba(points, centers, amplitudes, radii, active):
    return _plume_sum_loop(
        np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2),
        np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 2),
        np.ascontiguousarray(amplitudes, dtype=np.float64).reshape(-1, 3),
        np.ascontiguousarray(radii, dtype=np.float64).reshape(-1),
        np.ascontiguousarray(active, dtype=np.bool_).reshape(-1),
    )


def plume_sum_numpy(points, centers, amplitudes, radii, active):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    amplitudes = np.asarray(amplitudes, dtype=np.float64).reshape(-1, 3)
    radii = np.asarray(radii, dtype=np.float64).reshape(-1)
    active = np.asarray(active, dtype=bool).reshape(-1)
    out = np.zeros((points.shape[0], 3))
    # accumulate hotspot by hotspot to keep the same summation order as the loop
    for k in np.flatnonzero(active):
        d2 = ((points - centers[k]) ** 2).sum(axis=1)
        out += np.exp(-d2 / (2.0 * radii[k] * radii[k]))[:, None] * amplitudes[k]
    return out


# --------------------------------------------------------------------------
# Point-to-polyline distance
# --------------------------------------------------------------------------

@njit(cache=True)
def _polyline_distance_loop(points, verts):
    n = points.shape[0]
    m = verts.shape[0]
    out = np.empty(n)
    for i in range(n):
        px = points[i, 0]
        py = points[i, 1]
        best = np.inf
        if m == 1:
            best = np.sqrt((px - verts[0, 0]) ** 2 + (py - verts[0, 1]) ** 2)
        for s in range(m - 1):
            ax = verts[s, 0]
            ay = verts[s, 1]
            ex = verts[s + 1, 0] - ax
            ey = verts[s + 1, 1] - ay
            seg2 = ex * ex + ey * ey
            t = 0.0
            if seg2 > 0.0:
                t = ((px - ax) * ex + (py - ay) * ey) / seg2
                t = min(1.0, max(0.0, t))
            dx = px - (ax + t * ex)
            dy = py - (ay + t * ey)
            d = np.sqrt(dx * dx + dy * dy)
            if d < best:
                best = d
        out[i] = best
    return out


def polyline_distance_numba(points, verts):
    return _polyline_distance_loop(
        np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2),
        np.ascontiguousarray(verts, dtype=np.float64).reshape(-1, 2),
    )


def polyline_distance_numpy(points, verts):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    verts = np.asarray(verts, dtype=np.float64).reshape(-1, 2)
    if len(verts) == 1:
        return np.sqrt(((points - verts[0]) ** 2).sum(axis=1))
    a = verts[:-1]
    e = verts[1:] - a
    seg2 = (e**2).sum(axis=1)
    rel = points[:, None, :] - a[None, :, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(seg2 > 0, (rel * e).sum(axis=2) / seg2, 0.0)
    t = np.clip(t, 0.0, 1.0)
    diff = rel - t[:, :, None] * e[None, :, :]
    return np.sqrt((diff**2).sum(axis=2)).min(axis=1)


if USE_NUMBA:
    chacha20_blocks = chacha20_blocks_numba
    softmax_xent_grad = softmax_xent_grad_numba
    plume_sum = plume_sum_numba
    polyline_distance = polyline_distance_numba
else:
    chacha20_blocks = chacha20_blocks_numpy
    softmax_xent_grad = softmax_xent_grad_numpy
    plume_sum = plume_sum_numpy
    polyline_distance = polyline_distance_numpy
