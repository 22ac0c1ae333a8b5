"""Meta-layer candidate memory: N rows evolved by circular convolution
with shared kernels, ranked by a small confidence head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch
from ..numerics import as_vector, circ_conv
from ..prag import sigmoid


@dataclass
class HyperMemory:
    h: np.ndarray  # (N, D) candidate rows
    wm: np.ndarray  # (D,) memory kernel
    wz: np.ndarray  # (D,) input kernel
    ranker_w1: np.ndarray  # (D, hidden)
    ranker_b1: np.ndarray
    ranker_w2: np.ndarray  # (hidden,)
    ranker_b2: float


def init_memory(
    rows: int, dim: int, rng: np.random.Generator, hidden: int = 16
) -> HyperMemory:
    # wm is a contraction (identity kernel scaled below 1 plus a small
    # shift tap) so the memory trace decays rather than blowing up.
    wm = np.zeros(dim)
    wm[0] = 0.85
    wm[1 % dim] = 0.05
    return HyperMemory(
        h=rng.normal(0.0, 1.0, (rows, dim)),
        wm=wm,
        wz=rng.normal(0.0, 0.2 / np.sqrt(dim), dim),
        ranker_w1=rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, hidden)),
        ranker_b1=np.zeros(hidden),
        ranker_w2=rng.normal(0.0, 1.0 / np.sqrt(hidden), hidden),
        ranker_b2=0.0,
    )


def memory_update(mem: HyperMemory, z) -> HyperMemory:
    """Rowwise update h[i] <- wm (*) h[i] + wz (*) z, shared kernels."""
    zv = as_vector(z)
    if zv.size != mem.h.shape[1]:
        raise ShapeMismatch(f"expected dim {mem.h.shape[1]}, got {zv.size}")
    drive = circ_conv(mem.wz, zv)
    new_rows = np.stack([circ_conv(mem.wm, row) + drive for row in mem.h])
    return HyperMemory(
        h=new_rows,
        wm=mem.wm,
        wz=mem.wz,
        ranker_w1=mem.ranker_w1,
        ranker_b1=mem.ranker_b1,
        ranker_w2=mem.ranker_w2,
        ranker_b2=mem.ranker_b2,
    )


def rank_candidates(mem: HyperMemory) -> tuple[np.ndarray, int]:
    """Confidence per row via sigmoid(MLP(row)); best is the argmax with
    lowest-index tie-break."""
    hidden = np.tanh(mem.h @ mem.ranker_w1 + mem.ranker_b1)
    scores = hidden @ mem.ranker_w2 + mem.ranker_b2
    confidences = sigmoid(scores)
    return confidences, int(np.argmax(confidences))
