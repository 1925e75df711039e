"""Deterministic, row-addressable random streams.

Every scenario row owns an independent xoshiro256** generator whose state
is derived with splitmix64 from ``(seed, stream, row)``.  Row ``i`` of a
sample therefore depends only on the seed, the stream and ``i``: prefixes
of a large sample equal smaller samples, and samples can be produced in
chunks or in parallel without changing a single bit.

Only integer arithmetic on ``uint64`` arrays (wrapping) is used in the
generator path, so output is platform independent.  Uniforms are
``(x >> 11) * 2**-53`` in ``[0, 1)``; normals use Box--Muller.

Stream identifiers in use:

* ``TRAIN`` (0) -- scenario sets the optimizer sees,
* ``VALIDATION`` (1) -- out-of-sample sets used by the tuner and validators,
* ``INSTANCE`` (2) -- deterministic instance data (weights, prices, ...).
"""

import numpy as np

TRAIN = 0
VALIDATION = 1
INSTANCE = 2

_MASK = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_NEG_53 = 2.0**-53


def _u64(v):
    return np.uint64(int(v) & _MASK)


def _mix(z):
    """splitmix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class RowStreams:
    """A bank of xoshiro256** generators, one per requested row index."""

    def __init__(self, seed, stream, rows):
        rows = np.asarray(rows, dtype=np.uint64).ravel()
        with np.errstate(over="ignore"):
            key = _mix(np.full(1, _u64(seed)) + _GOLDEN)
            key = _mix(key ^ (np.full(1, _u64(stream)) * _GOLDEN + _M1))
            x = _mix(key ^ ((rows + np.uint64(1)) * _GOLDEN))
            state = np.empty((4, rows.size), dtype=np.uint64)
            for j in range(4):
                x = x + _GOLDEN
                state[j] = _mix(x)
        # an all-zero state is a fixed point of xoshiro; practically
        # unreachable, but make it impossible
        zero = ~np.any(state, axis=0)
        state[0, zero] = _GOLDEN
        self._s = state

    @property
    def rows(self):
        return self._s.shape[1]

    def next_u64(self):
        s0, s1, s2, s3 = self._s
        with np.errstate(over="ignore"):
            result = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
            t = s1 << np.uint64(17)
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            self._s[3] = _rotl(s3, 45)
        return result

    def uniform(self, k):
        """``(rows, k)`` matrix of uniforms in ``[0, 1)``."""
        out = np.empty((self.rows, k))
        for j in range(k):
            out[:, j] = (self.next_u64() >> np.uint64(11)).astype(np.float64) * _TWO_NEG_53
        return out

    def normal(self, k):
        """``(rows, k)`` matrix of standard normals (Box--Muller, pairs of uniforms)."""
        pairs = (k + 1) // 2
        out = np.empty((self.rows, 2 * pairs))
        for j in range(pairs):
            u1 = (self.next_u64() >> np.uint64(11)).astype(np.float64) * _TWO_NEG_53
            u2 = (self.next_u64() >> np.uint64(11)).astype(np.float64) * _TWO_NEG_53
            r = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 lies in (0, 1]
            theta = 2.0 * np.pi * u2
            out[:, 2 * j] = r * np.cos(theta)
            out[:, 2 * j + 1] = r * np.sin(theta)
        return out[:, :k]


def instance_streams(seed, tag):
    """A single-row stream for instance data, keyed by a small integer ``tag``."""
    return RowStreams(seed, INSTANCE, [tag])
