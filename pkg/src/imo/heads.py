"""Classification heads that pool tokens with mask-derived attention.

The binary head scores each token by the dot product between the top
mask's filtering vector and the token's masked embedding, pools tokens
weighted by those scores, and projects to two logits.  The multi-class
head keeps one mask and one projection vector per label and scores every
label's pooled vector separately.  Attention weights are raw dot products
by default; a softmax over positions is available behind a flag.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from . import tensor as tt
from .masking import FilterLayer, R_INIT_STD
from .tensor import Tensor

logger = logging.getLogger("imo.heads")

P_INIT_STD = 0.02


class BinaryHead:
    """Projection d -> 2 with no bias.  ``query`` is only populated when the
    model runs without masks and still wants attention pooling."""

    def __init__(self, d_model: int, rng: np.random.Generator,
                 with_plain_query: bool = False):
        self.d_model = d_model
        self.P = Tensor(rng.normal(0.0, P_INIT_STD, size=(d_model, 2)), requires_grad=True)
        self.query = (Tensor(rng.normal(0.0, R_INIT_STD, size=d_model), requires_grad=True)
                      if with_plain_query else None)

    def parameters(self):
        out = [("head.P", self.P)]
        if self.query is not None:
            out.append(("head.query", self.query))
        return out


class MultiClassHead:
    """One filtering mask and one projection vector per label."""

    def __init__(self, d_model: int, n_labels: int, variant: str,
                 rng: np.random.Generator, top_layer: int,
                 with_masks: bool = True, with_plain_query: bool = False):
        self.d_model = d_model
        self.n_labels = n_labels
        self.filters = ([FilterLayer(d_model, variant, rng, layer_index=top_layer)
                         for _ in range(n_labels)] if with_masks else [])
        self.p = [Tensor(rng.normal(0.0, P_INIT_STD, size=d_model), requires_grad=True)
                  for _ in range(n_labels)]
        self.queries = ([Tensor(rng.normal(0.0, R_INIT_STD, size=d_model), requires_grad=True)
                         for _ in range(n_labels)] if with_plain_query else [])

    def parameters(self):
        out = []
        for y, vec in enumerate(self.p):
            out.append((f"head.p{y}", vec))
        for y, f in enumerate(self.filters):
            for name, t in f.parameters():
                out.append((f"head.label{y}.{name}", t))
        for y, q in enumerate(self.queries):
            out.append((f"head.query{y}", q))
        return out


def attention_pool(e: Tensor, query: Tensor | None, valid: np.ndarray | None,
                   use_softmax: bool = False) -> tuple[Tensor, Tensor]:
    """Pool token vectors e (..., T, d) into (..., d).

    Scores are ``a_i = query . e_i`` (plain feature sums when query is
    None).  Padded positions, marked 0 in ``valid``, get weight zero.
    """
    if query is None:
        a = tt.reduce_sum(e, axis=-1)
    else:
        a = tt.reduce_sum(tt.mul(e, query), axis=-1)
    if use_softmax:
        if valid is not None:
            a = tt.add(a, Tensor((1.0 - valid) * -1e9))
        a = tt.softmax(a)
    if valid is not None:
        a = tt.mul(a, Tensor(valid))
    v = tt.reduce_sum(tt.mul(e, tt.reshape(a, a.shape + (1,))), axis=-2)
    return v, a


def mean_pool(e: Tensor, valid: np.ndarray | None) -> Tensor:
    """Average token vectors over non-padded positions."""
    if valid is None:
        return tt.reduce_mean(e, axis=-2)
    weights = valid / valid.sum(axis=-1, keepdims=True)
    return tt.reduce_sum(tt.mul(e, Tensor(weights[..., None])), axis=-2)


def binary_forward(e: Tensor, m: Tensor | None, head: BinaryHead,
                   valid: np.ndarray | None = None, use_attention: bool = True,
                   attention_softmax: bool = False) -> dict:
    """Masked token states e (..., T, d) and filtering vector m -> softmax
    probabilities over two classes.  Returns logits, probs, and the
    per-token attention weights (None under mean pooling)."""
    if use_attention:
        query = m if m is not None else head.query
        v, a = attention_pool(e, query, valid, attention_softmax)
    else:
        v, a = mean_pool(e, valid), None
    logits = tt.matmul(v, head.P) if v.ndim > 1 else tt.reshape(
        tt.matmul(tt.reshape(v, (1, -1)), head.P), (2,))
    probs = tt.softmax(logits)
    return {"logits": logits, "probs": probs, "attention": a, "pooled": v}


def multiclass_forward(h: Tensor, head: MultiClassHead,
                       valid: np.ndarray | None = None, use_attention: bool = True,
                       attention_softmax: bool = False, shared_e: bool = False,
                       masks_introduced: bool = True) -> dict:
    """Raw top-layer states h -> probabilities over N labels.

    Per label y: e_y = h * m_y, a_y = m_y . e_y, v_y pools e_y by a_y, and
    the logit is v_y . p_y.  With ``shared_e`` the unmasked states are
    pooled instead and the mask enters only through the scores.  Before the
    top masks are introduced (bottom-up schedules) they act as identity.
    """
    scores = []
    weights = []
    for y in range(head.n_labels):
        mask = None
        if head.filters and masks_introduced:
            mask = head.filters[y].filtering_vector()
        elif head.queries:
            mask = head.queries[y]
        e_y = h if (shared_e or mask is None) else tt.mul(h, mask)
        if use_attention:
            v_y, a_y = attention_pool(e_y, mask, valid, attention_softmax)
        else:
            v_y, a_y = mean_pool(e_y, valid), None
        c_y = tt.reduce_sum(tt.mul(v_y, head.p[y]), axis=-1)
        scores.append(tt.reshape(c_y, c_y.shape + (1,)))
        weights.append(a_y)
    logits = tt.concat(scores, axis=-1)
    probs = tt.softmax(logits)
    return {"logits": logits, "probs": probs, "attention": weights}


def distance_loss(filters: Sequence[FilterLayer]) -> Tensor:
    """Mean pairwise cosine similarity of the filtering vectors, averaged
    over ordered pairs.  Pairs touching an all-zero mask contribute zero
    (with a warning) rather than an undefined cosine."""
    n = len(filters)
    if n < 2:
        return Tensor(0.0)
    vectors = [f.filtering_vector() for f in filters]
    norms = [float(np.linalg.norm(f.filtering_values())) for f in filters]
    terms = []
    for i in range(n):
        for j in range(i + 1, n):
            if norms[i] == 0.0 or norms[j] == 0.0:
                logger.warning(
                    "distance loss: mask %d or %d is all zero; counting the pair as cosine 0",
                    i, j)
                continue
            terms.append(tt.cosine_similarity(vectors[i], vectors[j]))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = tt.add(total, t)
    # Each unordered pair stands in for two ordered ones.
    return tt.mul(total, Tensor(2.0 / (n * (n - 1))))
