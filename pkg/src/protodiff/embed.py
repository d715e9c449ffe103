"""Conditioning vectors: sinusoidal time features concatenated with a class row.

The class table has ``C + 1`` rows. Rows ``0..C-1`` embed the classes and
row ``C`` is the null token used for unconditional passes. Labels equal to
:data:`NULL` (or ``None`` in scalar calls) select the null row.
"""

from dataclasses import dataclass

import numpy as np

NULL = -1


class EmbeddingError(ValueError):
    pass


@dataclass(eq=False)
class ConditioningTable:
    rows: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] < 2:
            raise EmbeddingError(f"table needs (C+1, d_p) rows, got shape {self.rows.shape}")

    @property
    def num_classes(self):
        return self.rows.shape[0] - 1

    @property
    def dim(self):
        return self.rows.shape[1]

    @property
    def class_rows(self):
        return self.rows[:-1]

    @property
    def null_row(self):
        return self.rows[-1:]

    def row_index(self, labels):
        """Map labels (with :data:`NULL`) to table row indices."""
        labels = np.asarray(labels)
        c = self.num_classes
        if labels.size and (labels.max() >= c or labels.min() < NULL):
            raise EmbeddingError(f"label out of range [0, {c}) or NULL: {labels!r}")
        return np.where(labels == NULL, c, labels)

    def copy(self):
        return ConditioningTable(self.rows.copy(), self.frozen)


def init_from_codebook(codebook, frozen=False, normalize=False, dtype=np.float32):
    """Class rows copied from a one-prototype-per-class codebook; null row zero."""
    if codebook.K != 1:
        raise EmbeddingError(f"need exactly one prototype per class, codebook has K={codebook.K}")
    protos = np.asarray(codebook.prototypes[:, 0, :])
    if normalize:
        protos = protos / np.maximum(np.linalg.norm(protos, axis=1, keepdims=True), 1e-12)
    rows = np.zeros((codebook.C + 1, codebook.dim), dtype=dtype)
    rows[:-1] = protos
    return ConditioningTable(rows, frozen=frozen)


def init_random(C, d_p, seed, scale=0.02, dtype=np.float32):
    if C < 1 or d_p < 1:
        raise EmbeddingError(f"need C >= 1 and d_p >= 1, got C={C}, d_p={d_p}")
    rng = np.random.default_rng(seed)
    rows = np.zeros((C + 1, d_p), dtype=dtype)
    rows[:-1] = rng.standard_normal((C, d_p)) * scale
    return ConditioningTable(rows, frozen=False)


def time_embedding(t, d_t, dtype=np.float64):
    """Interleaved sinusoids: ``[sin(t w_0), cos(t w_0), sin(t w_1), ...]``.

    ``w_k = 10000 ** (-2k / d_t)``. ``t`` may be a scalar or a 1-D array, in which
    case the result has one row per entry.
    """
    if d_t <= 0 or d_t % 2:
        raise EmbeddingError(f"time embedding size must be a positive even integer, got {d_t}")
    t = np.asarray(t, dtype=np.float64)
    freqs = 10000.0 ** (-np.arange(0, d_t, 2, dtype=np.float64) / d_t)
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (d_t,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out.astype(dtype, copy=False)


def build_conditioning(t, label, table, d_t):
    """Single conditioning vector ``concat(time_embedding(t), table row)``."""
    label = NULL if label is None else int(label)
    row = table.rows[table.row_index(label)]
    return np.concatenate([time_embedding(t, d_t, dtype=table.rows.dtype), row])


def build_conditioning_batch(t, labels, table, d_t):
    """Batched :func:`build_conditioning`; ``t`` scalar or per-example."""
    idx = table.row_index(labels)
    n = idx.shape[0]
    te = time_embedding(np.broadcast_to(np.asarray(t), (n,)), d_t, dtype=table.rows.dtype)
    return np.concatenate([te, table.rows[idx]], axis=1)
