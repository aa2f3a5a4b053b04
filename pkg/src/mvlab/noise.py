"""Counter-based Brownian increments.

Every Gaussian coordinate is a pure function of ``(seed, stream_id, step,
coordinate)``: the pair ``(seed, stream_id)`` is the Philox4x64-10 key and
``(step, coordinate // 4, domain, 0)`` the counter.  Nothing is drawn from
shared mutable state, so any partition of particles or replications across
workers reproduces the sequential result bit for bit.  Two runs that give
particle ``i`` the same ``(seed, i)`` are driven by the same Brownian path,
which is how synchronous couplings are built.
"""

import hashlib
import math
import struct

import numpy as np

from . import _backend

__all__ = [
    "NoiseSource",
    "brownian_increment",
    "brownian_increments",
    "derive_seed",
    "standard_normals",
]

BROWNIAN = 0
INITIAL = 1
AUX = 2

_MASK64 = (1 << 64) - 1


def derive_seed(seed, *labels):
    """Stable 64-bit child seed from a parent seed and a path of labels.

    Labels may be ints or strings, e.g. ``derive_seed(7, "rep", 12, "particles")``.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", int(seed) & _MASK64))
    for lab in labels:
        if isinstance(lab, str):
            h.update(b"s" + lab.encode() + b"\x00")
        else:
            h.update(b"i" + struct.pack("<q", int(lab)))
    return struct.unpack("<Q", h.digest())[0]


def standard_normals(seeds, streams, step, n, domain=BROWNIAN):
    """Standard Gaussians of shape (len(seeds), len(streams), n)."""
    return _backend.normals_grid(seeds, streams, step, domain, n)


def brownian_increments(seeds, streams, step, dt, n):
    """Increments for every (seed, stream) pair at one step: (R, S, n) array."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return math.sqrt(dt) * standard_normals(seeds, streams, step, n)


def brownian_increment(seed, stream_id, step, dt, n):
    """Increment Delta W ~ N(0, dt I_n) for one stream at one step."""
    return brownian_increments([seed], [stream_id], step, dt, n)[0, 0]


class NoiseSource:
    """Seeded family of Brownian streams indexed by (stream_id, step)."""

    def __init__(self, seed):
        self.seed = int(seed) & _MASK64

    def increment(self, stream_id, step, dt, n):
        return brownian_increment(self.seed, stream_id, step, dt, n)

    def increments(self, streams, step, dt, n):
        return brownian_increments([self.seed], streams, step, dt, n)[0]

    def __repr__(self):
        return f"NoiseSource(seed={self.seed})"


def initial_rng(seed, *labels):
    """numpy Generator for one-off draws (initial data, probe clouds)."""
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, *labels)))
