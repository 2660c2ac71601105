"""Counter-based random streams.

Every random number in the package is a pure function of
``(seed, path_index, counter, stream, lane)``: no generator state is carried
between draws, so paths can be simulated in any order, on any number of
threads, and still reproduce bit-for-bit.

The bit source is Philox4x32-10 (Salmon et al., SC'11), evaluated
vectorised over numpy arrays.
"""

import numba
import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)

# stream tags occupy the upper 16 bits of the fourth counter word
STREAM_SDE = 1
STREAM_INIT = 2
STREAM_CTMC = 3
STREAM_REFINE = 16  # + refinement level


def philox4x32(c0, c1, c2, c3, k0, k1, rounds=10):
    """Raw Philox4x32 block function.

    All counter words may be arrays (broadcast together); key words are
    scalars. Returns four uint64 arrays holding 32-bit outputs.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK for c in (c0, c1, c2, c3))
    c0, c1, c2, c3 = np.broadcast_arrays(c0, c1, c2, c3)
    k0 = np.uint64(int(k0) & 0xFFFFFFFF)
    k1 = np.uint64(int(k1) & 0xFFFFFFFF)
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & _MASK
            k1 = (k1 + _W1) & _MASK
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT) ^ c1 ^ k0,
            p1 & _MASK,
            (p0 >> _SHIFT) ^ c3 ^ k1,
            p0 & _MASK,
        )
    return c0, c1, c2, c3


@numba.njit(cache=True, inline="always")
def _philox_scalar(c0, c1, c2, c3, k0, k1):
    m0 = numba.uint64(0xD2511F53)
    m1 = numba.uint64(0xCD9E8D57)
    mask = numba.uint64(0xFFFFFFFF)
    for r in range(10):
        if r:
            k0 = (k0 + numba.uint64(0x9E3779B9)) & mask
            k1 = (k1 + numba.uint64(0xBB67AE85)) & mask
        p0 = m0 * c0
        p1 = m1 * c2
        n0 = (p1 >> numba.uint64(32)) ^ c1 ^ k0
        n1 = p1 & mask
        n2 = (p0 >> numba.uint64(32)) ^ c3 ^ k1
        n3 = p0 & mask
        c0, c1, c2, c3 = n0, n1, n2, n3
    return c0, c1, c2, c3


@numba.njit(cache=True, inline="always")
def _unit(a, b):
    bits = (a >> numba.uint64(5)) * numba.uint64(1 << 26) + (b >> numba.uint64(6))
    return (numba.float64(bits) + 0.5) * 1.1102230246251565e-16


@numba.njit(cache=True)
def _normals_kernel(k0, k1, paths, counter, tag, width, out):
    mask = numba.uint64(0xFFFFFFFF)
    c0 = counter & mask
    c1 = counter >> numba.uint64(32)
    for p in range(paths.shape[0]):
        c2 = paths[p] & mask
        for lane in range((width + 1) // 2):
            x0, x1, x2, x3 = _philox_scalar(c0, c1, c2, tag | numba.uint64(lane), k0, k1)
            r = np.sqrt(-2.0 * np.log(_unit(x0, x1)))
            th = 2.0 * np.pi * _unit(x2, x3)
            out[p, 2 * lane] = r * np.cos(th)
            if 2 * lane + 1 < width:
                out[p, 2 * lane + 1] = r * np.sin(th)


def normals_for_step(seed, paths, counter, stream, width):
    """Fast path of :func:`standard_normals` for one counter value.

    ``paths`` is a 1-d array of path indices; returns ``(len(paths), width)``.
    """
    k0, k1 = _key(seed)
    paths = np.ascontiguousarray(paths, dtype=np.uint64)
    out = np.empty((paths.shape[0], width))
    tag = np.uint64(int(stream) << 16)
    _normals_kernel(np.uint64(k0), np.uint64(k1), paths, np.uint64(int(counter)), tag, int(width), out)
    return out


def _key(seed):
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed & 0xFFFFFFFF, seed >> 32


def _open_uniform(a, b):
    # 53 random bits mapped to the open interval (0, 1)
    bits = (a >> np.uint64(5)) * np.uint64(1 << 26) + (b >> np.uint64(6))
    return (bits.astype(np.float64) + 0.5) * 2.0**-53


def _counter_words(seed, path_index, counter, stream, lane):
    counter = np.asarray(counter, dtype=np.uint64)
    hi = counter >> _SHIFT
    tag = (np.uint64(stream) << np.uint64(16)) | np.asarray(lane, dtype=np.uint64)
    k0, k1 = _key(seed)
    return (counter & _MASK, hi, np.asarray(path_index, dtype=np.uint64), tag), (k0, k1)


def uniform_pair(seed, path_index, counter, stream, lane=0):
    """Two independent U(0,1) arrays for each broadcast index."""
    (c0, c1, c2, c3), (k0, k1) = _counter_words(seed, path_index, counter, stream, lane)
    x0, x1, x2, x3 = philox4x32(c0, c1, c2, c3, k0, k1)
    return _open_uniform(x0, x1), _open_uniform(x2, x3)


def normal_pair(seed, path_index, counter, stream, lane=0):
    """Two independent standard normals per index (Box-Muller)."""
    u1, u2 = uniform_pair(seed, path_index, counter, stream, lane)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    return r * np.cos(theta), r * np.sin(theta)


def standard_normals(seed, path_index, counter, stream, width):
    """Standard normals of shape ``broadcast(path_index, counter) + (width,)``.

    Component ``m`` is drawn from lane ``m // 2``, so the value of a given
    component never depends on ``width``.
    """
    path_index = np.asarray(path_index, dtype=np.uint64)[..., None]
    counter = np.asarray(counter, dtype=np.uint64)[..., None]
    lanes = np.arange((width + 1) // 2, dtype=np.uint64)
    z0, z1 = normal_pair(seed, path_index, counter, stream, lanes)
    out = np.empty(z0.shape[:-1] + (2 * z0.shape[-1],))
    out[..., 0::2] = z0
    out[..., 1::2] = z1
    return out[..., :width]
