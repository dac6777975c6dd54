"""Binary stochastic filter: a learned per-gene input gate.

Each input feature ``j`` owns a keep probability ``w[j]`` in ``[0, 1]``.
Training draws a Bernoulli mask from ``w``; inference keeps exactly the
features with ``w[j] > mask_threshold``. Gradients for ``w`` use the
straight-through estimator (``dz/dw`` taken as 1).
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvariantError, ShapeError, TapeError
from .tensor import EVAL, Layer, Param


@dataclass(frozen=True)
class SparsityPenalty:
    strength: float = 1e-2
    cut_threshold: float = 3000.0

    def __post_init__(self):
        if self.strength < 0 or self.cut_threshold < 0:
            raise ValueError("penalty strength and cut threshold must be >= 0")


def bsf_penalty(w, pen):
    """Hinge on the total keep probability: ``strength * max(0, sum(w) - cut)``.

    Returns ``(value, grad_w)``. At ``sum(w) == cut`` the subgradient is 0.
    """
    w = np.asarray(w, dtype=np.float64)
    excess = float(w.sum()) - pen.cut_threshold
    if excess > 0:
        return pen.strength * excess, np.full_like(w, pen.strength)
    return 0.0, np.zeros_like(w)


class BsfLayer(Layer):
    kind = "bsf"

    def __init__(self, d, penalty=SparsityPenalty(), mask_threshold=0.5, per_sample=False,
                 l1=0.0, init=1.0):
        self.in_dim = self.out_dim = d
        self.w = Param("bsf/w", np.full(d, float(init)), clip=(0.0, 1.0))
        self.pen = penalty
        self.mask_threshold = float(mask_threshold)
        self.per_sample = per_sample
        self.l1 = float(l1)  # plain l1 on w; off unless configured

    def params(self):
        return [self.w]

    def describe(self):
        return {**super().describe(), "strength": self.pen.strength,
                "cut_threshold": self.pen.cut_threshold, "mask_threshold": self.mask_threshold,
                "per_sample": self.per_sample, "l1": self.l1}

    def mask(self):
        return (self.w.values > self.mask_threshold).astype(np.float64)

    def forward(self, x, mode, rng, update_stats=True):
        w = self.w.values
        if np.any(w < 0.0) or np.any(w > 1.0):
            raise InvariantError("gate weights left [0, 1]")
        if x.shape[1] != w.size:
            raise ShapeError(f"gate expects width {w.size}, got {x.shape[1]}")
        if mode == EVAL:
            return x * self.mask(), None
        shape = x.shape if self.per_sample else (1, w.size)
        z = (rng.random(shape) < w).astype(np.float64)
        return x * z, (x, z)

    def backward(self, cache, g):
        if cache is None:
            raise TapeError("gate gradients need a train-mode tape")
        x, z = cache
        self.w.grads += (g * x).sum(axis=0)
        return g * z

    def penalty(self):
        val, _ = bsf_penalty(self.w.values, self.pen)
        if self.l1:
            val += self.l1 * float(self.w.values.sum())
        return val

    def penalty_backward(self):
        _, g = bsf_penalty(self.w.values, self.pen)
        self.w.grads += g
        if self.l1:
            self.w.grads += self.l1


def bsf_forward(x, layer, mode, rng=None, mask_threshold=None):
    if mask_threshold is not None:
        layer.mask_threshold = float(mask_threshold)
    return layer.forward(np.asarray(x, dtype=np.float64), mode, rng)


def bsf_backward(layer, tape, upstream):
    """Return ``(grad_x, grad_w)`` for one gate tape, leaving ``layer`` grads untouched."""
    saved = layer.w.grads.copy()
    layer.w.grads[...] = 0.0
    try:
        gx = layer.backward(tape, np.asarray(upstream, dtype=np.float64))
        gw = layer.w.grads.copy()
    finally:
        layer.w.grads[...] = saved
    return gx, gw


def export_ranking(w, gene_ids, mask_threshold=0.5):
    """Genes with ``w > mask_threshold``, by descending weight then gene id."""
    w = np.asarray(w, dtype=np.float64)
    if len(gene_ids) != w.size:
        raise ShapeError(f"{len(gene_ids)} gene ids for {w.size} gate weights")
    kept = [(g, float(v)) for g, v in zip(gene_ids, w) if v > mask_threshold]
    kept.sort(key=lambda gv: (-gv[1], gv[0]))
    return kept


def write_ranking(ranking, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, delimiter="\t", lineterminator="\n")
        out.writerow(["rank", "gene_id", "weight"])
        for i, (g, v) in enumerate(ranking, start=1):
            out.writerow([i, g, repr(v)])


def read_ranking(path):
    with open(path, newline="") as fh:
        return [(r["gene_id"], float(r["weight"])) for r in csv.DictReader(fh, delimiter="\t")]
