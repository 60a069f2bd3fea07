"""Training objectives over batch similarity scores.

The historical contrastive loss treats every in-batch positive plus the
example's own semi-hard candidate (or an easy negative when no usable
semi-hard exists) as the denominator of a softmax over similarities and
takes the mean negative log-likelihood of the true positive. The pairwise
similarity loss enforces the score ordering positive > semi-hard > easy for
every batch item that has a semi-hard candidate, as one batch-level
log-sum: log(1 + sum e^{gamma(s_neg - s_hist)} + sum e^{gamma(s_hist -
s_pos)}). Both are computed through log-sum-exp and stay finite for
similarity magnitudes up to 1e3 with gamma up to 64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError

_DIAG_TOL = 1e-12


@dataclass
class BatchSimilarities:
    """Similarity scores a training batch needs.

    pos[i] is context i against its own positive; cross[i, j] is context i
    against example j's positive (diagonal equals pos); semi[i] is against
    the example's semi-hard candidate, valid only where semi_present; easy[i]
    is against a random easy negative.
    """
    pos: ad.Tensor  # B
    cross: ad.Tensor  # B x B
    semi: ad.Tensor  # B, entries without semi_present are never read
    easy: ad.Tensor  # B
    semi_present: np.ndarray  # B bools

    def __post_init__(self):
        b = self.batch_size
        if b < 1:
            raise DimensionError("empty batch")
        if self.cross.shape != (b, b) or self.semi.shape != (b,) \
                or self.easy.shape != (b,) or self.semi_present.shape != (b,):
            raise DimensionError(
                f"inconsistent batch shapes: pos {self.pos.shape}, "
                f"cross {self.cross.shape}, semi {self.semi.shape}, "
                f"easy {self.easy.shape}")
        diag = np.diagonal(self.cross.values)
        if np.max(np.abs(diag - self.pos.values)) > _DIAG_TOL:
            raise DimensionError("cross diagonal does not equal pos")

    @property
    def batch_size(self) -> int:
        return self.pos.shape[0]


def batch_similarities(cross: ad.Tensor, semi: ad.Tensor, easy: ad.Tensor,
                       semi_present: np.ndarray,
                       tape: ad.Tape | None = None) -> BatchSimilarities:
    """Build BatchSimilarities deriving pos from the cross diagonal on-tape."""
    b = cross.shape[0]
    pos = ad.concat([ad.element(ad.row(cross, i, tape), i, tape)
                     for i in range(b)], tape)
    return BatchSimilarities(pos, cross, semi, easy,
                             np.asarray(semi_present, dtype=bool))


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 1.0
    use_hist: bool = True
    use_pair: bool = True

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")


def historical_contrastive_loss(s: BatchSimilarities,
                                tape: ad.Tape | None = None) -> ad.Tensor:
    """Mean over the batch of -log softmax(own positive | in-batch positives
    plus the example's own negative)."""
    losses = []
    for i in range(s.batch_size):
        row = ad.row(s.cross, i, tape)
        neg_src = s.semi if s.semi_present[i] else s.easy
        logits = ad.concat([row, ad.element(neg_src, i, tape)], tape)
        losses.append(ad.sub(ad.logsumexp(logits, tape),
                             ad.element(s.pos, i, tape), tape))
    return ad.mean(ad.concat(losses, tape), tape)


def pairwise_similarity_loss(s: BatchSimilarities, cfg: LossConfig,
                             tape: ad.Tape | None = None) -> ad.Tensor:
    """Batch-level ordering loss over semi-hard-bearing items; zero if none."""
    items = [i for i in range(s.batch_size) if s.semi_present[i]]
    if not items:
        return ad.scalar(0.0)
    g = cfg.gamma
    terms = [ad.scalar(0.0)]  # the constant 1 inside the log
    for i in items:
        terms.append(ad.scale(ad.sub(ad.element(s.easy, i, tape),
                                     ad.element(s.semi, i, tape), tape), g, tape))
    for j in items:
        terms.append(ad.scale(ad.sub(ad.element(s.semi, j, tape),
                                     ad.element(s.pos, j, tape), tape), g, tape))
    return ad.logsumexp(ad.concat(terms, tape), tape)


def combined_loss(s: BatchSimilarities, cfg: LossConfig,
                  tape: ad.Tape | None = None) -> ad.Tensor:
    """Unweighted sum of the enabled losses."""
    if not cfg.use_hist and not cfg.use_pair:
        raise ConfigError("at least one loss term must be enabled")
    total = None
    if cfg.use_hist:
        total = historical_contrastive_loss(s, tape)
    if cfg.use_pair:
        pair = pairwise_similarity_loss(s, cfg, tape)
        total = pair if total is None else ad.add(total, pair, tape)
    return total
