"""Counter-based random streams.

Every stochastic routine in the package draws from a Philox generator keyed
by (base seed, purpose labels).  Philox is counter-based: the i-th variate of
a keyed stream is a pure function of (key, i), so vectorized draws are
reproducible bit-for-bit no matter how the surrounding computation is
scheduled.  Labels are small integers identifying the purpose (path block,
step, quadrature batch, ...), which keeps independent uses of the same seed
on provably disjoint streams.
"""

from __future__ import annotations

import numpy as np

# purpose labels; keep values stable, they are part of the determinism contract
PATHS = 1
QUADRATURE = 2
CLOUD = 3
ANCHORS = 4
CERTIFICATE = 5
POLICY = 6
EVALUATION = 7


def stream(seed: int, *labels: int) -> np.random.Generator:
    """Return the Philox generator for (seed, labels).

    Identical arguments give an identical generator state; distinct label
    tuples give statistically independent streams.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(v) for v in labels))
    return np.random.Generator(np.random.Philox(ss))


def standard_normal(seed: int, labels: tuple[int, ...], shape: tuple[int, ...]) -> np.ndarray:
    """Draw a block of N(0,1) variates on the (seed, labels) stream."""
    return stream(seed, *labels).standard_normal(shape)
