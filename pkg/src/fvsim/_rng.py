"""Counter-based random numbers.

Every draw is a pure function of ``(seed, stream, a, b)``, so results do not
depend on the order in which particles are processed or on how many workers
are used. The mixer is the splitmix64 finaliser applied three times over the key;
normals come from the inverse CDF.
"""

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_KA = np.uint64(0xD6E8FEB86659FD93)
_KB = np.uint64(0xCA5A826395121157)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53

# stream ids
DIFFUSION = 1
CANDIDATE = 2
TREE = 3
MORAN = 4
AUX = 5


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def hash4(seed, stream, a, b):
    h = _mix(np.uint64(seed) + _GOLDEN * np.uint64(stream + 1))
    h = _mix(h ^ (np.uint64(a) * _KA))
    h = _mix(h + np.uint64(b) * _KB)
    return h


@njit(cache=True, inline="always")
def uniform(seed, stream, a, b):
    """Uniform on the open interval (0, 1)."""
    h = hash4(seed, stream, a, b)
    return (float(h >> _S11) + 0.5) * _INV53


@njit(cache=True, inline="always")
def ndtri(p):
    """Inverse standard normal CDF (Wichura 1988, AS241 PPND16)."""
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r
                     + 45921.953931549871457) * r + 13731.693765509461125) * r + 1971.5909503065514427) * r
                     + 133.14166789178437745) * r + 3.387132872796366608) / (((((((5226.495278852545925 * r
                     + 28729.085735721942674) * r + 39307.89580009271061) * r + 21213.794301586595867) * r
                     + 5394.1960214247511077) * r + 687.1870074920579083) * r + 42.313330701600911252) * r + 1.0)
    r = p if q < 0.0 else 1.0 - p
    r = np.sqrt(-np.log(r))
    if r <= 5.0:
        r -= 1.6
        val = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r
                 + 1.27045825245236838258) * r + 3.64784832476320460504) * r + 5.7694972214606914055) * r
                 + 4.6303378461565452959) * r + 1.42343711074968357734) / (((((((1.05075007164441684324e-9 * r
                 + 5.475938084995344946e-4) * r + 0.0151986665636164571966) * r + 0.14810397642748007459) * r
                 + 0.68976733498510000455) * r + 1.6763848301838038494) * r + 2.05319162663775882187) * r + 1.0)
    else:
        r -= 5.0
        val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r
                 + 0.026532189526576123093) * r + 0.29656057182850489123) * r + 1.7848265399172913358) * r
                 + 5.4637849111641143699) * r + 6.6579046435011037772) / (((((((2.04426310338993978564e-15 * r
                 + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5) * r + 7.868691311456132591e-4) * r
                 + 0.0148753612908506148525) * r + 0.13692988092273580531) * r + 0.59983220655588793769) * r + 1.0)
    return -val if q < 0.0 else val


@njit(cache=True, inline="always")
def normal(seed, stream, a, b):
    return ndtri(uniform(seed, stream, a, b))


@njit(cache=True)
def fill_normals(seed, stream, a, out):
    """Fill ``out`` (1-D) with standard normals keyed by ``(seed, stream, a, k)``."""
    for k in range(out.shape[0]):
        out[k] = normal(seed, stream, a, k)


@njit(cache=True)
def fill_uniforms(seed, stream, a, out):
    for k in range(out.shape[0]):
        out[k] = uniform(seed, stream, a, k)


@njit(cache=True)
def seed_table(seed, n):
    """``n`` child seeds of ``seed`` (equal to ``derive_seed(seed, r)`` for ``r < n``)."""
    out = np.empty(n, dtype=np.int64)
    for r in range(n):
        out[r] = np.int64(hash4(seed, AUX, r, 0) >> np.uint64(1))
    return out


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed, e.g. one per replicate."""
    h = int(seed) & 0x7FFFFFFFFFFFFFFF
    for k in keys:
        h = int(hash4(h, AUX, int(k), 0)) >> 1
    return h
