"""Context-adaptive dialogue encoding.

The query utterance selects the most similar previous-session utterances
(hard top-K, not differentiated), attends over them together with the
current session, and a learned gate blends the attended history with the
query encoding. Alternative modes: NO_PREV drops previous sessions,
FULL_CONCAT encodes the whole flattened dialogue as one sequence (an upper
bound that sidesteps selection), and MEAN_ALL averages every utterance
encoding unweighted (the degraded variant used for comparison runs).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import CLS_ID, Dialogue, derive_rng, split_sessions
from .encoder import (MAX_CANDIDATE_TOKENS, MAX_UTTERANCE_TOKENS, ROLE_TOKEN,
                      EncoderParams, encode_ids, encode_utterance, tokenize)
from .errors import ConfigError, ContractError


class ModeKind(enum.Enum):
    ADAPTIVE = "adaptive"
    FULL_CONCAT = "full_concat"
    NO_PREV = "no_prev"
    MEAN_ALL = "mean_all"


@dataclass(frozen=True)
class ContextMode:
    kind: ModeKind
    k: int = 3

    def __post_init__(self):
        if self.kind is ModeKind.ADAPTIVE and self.k < 1:
            raise ConfigError(f"adaptive mode needs k >= 1, got {self.k}")

    @staticmethod
    def adaptive(k: int = 3) -> "ContextMode":
        return ContextMode(ModeKind.ADAPTIVE, k)

    @staticmethod
    def full_concat() -> "ContextMode":
        return ContextMode(ModeKind.FULL_CONCAT)

    @staticmethod
    def no_prev() -> "ContextMode":
        return ContextMode(ModeKind.NO_PREV)

    @staticmethod
    def mean_all() -> "ContextMode":
        return ContextMode(ModeKind.MEAN_ALL)


@dataclass
class FusionParams:
    gate_w: ad.Tensor  # 2d

    def tensors(self) -> dict[str, ad.Tensor]:
        return {"gate_w": self.gate_w}


def init_fusion_params(d: int, seed: int = 0) -> FusionParams:
    rng = derive_rng(seed, "fusion-init")
    return FusionParams(ad.Tensor(rng.uniform(-0.1, 0.1, size=2 * d),
                                  requires_grad=True))


def topk_indices(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest scores, ties to the lower index, ascending."""
    if k < 1:
        raise ContractError(f"k must be at least 1, got {k}")
    order = np.argsort(-scores, kind="stable")[:min(k, scores.size)]
    return sorted(int(i) for i in order)


def select_prev_topk(h_query: ad.Tensor, prev: list[ad.Tensor],
                     k: int) -> list[ad.Tensor]:
    """Hard selection of the k previous encodings most similar to the query,
    returned in original dialogue order. Not differentiated: gradients flow
    only through the selected vectors downstream."""
    if not prev:
        if k < 1:
            raise ContractError(f"k must be at least 1, got {k}")
        return []
    scores = np.array([float(np.dot(h_query.values, p.values)) for p in prev])
    return [prev[i] for i in topk_indices(scores, k)]


def attend(h_query: ad.Tensor, H_hist: list[ad.Tensor],
           tape: ad.Tape | None = None) -> ad.Tensor:
    """Scaled dot-product attention of the query over history vectors."""
    if not H_hist:
        raise ContractError("attend over an empty history")
    d = h_query.shape[0]
    scores = [ad.scale(ad.dot(h_query, h, tape), 1.0 / math.sqrt(d), tape)
              for h in H_hist]
    weights = ad.softmax(ad.concat(scores, tape), tape)
    return ad.matmul(weights, ad.stack(H_hist, tape), tape)


def gate_fuse(h_hist: ad.Tensor, h_query: ad.Tensor, params: FusionParams,
              tape: ad.Tape | None = None) -> tuple[ad.Tensor, ad.Tensor]:
    """Blend history and query: lambda = sigmoid(w . [h_hist; h_query])."""
    if h_hist.shape != h_query.shape:
        raise ContractError(f"shapes {h_hist.shape} and {h_query.shape} differ")
    lam = ad.sigmoid(ad.dot(params.gate_w,
                            ad.concat([h_hist, h_query], tape), tape), tape)
    one_minus = ad.sub(ad.scalar(1.0), lam, tape)
    h_d = ad.add(ad.mul(lam, h_hist, tape), ad.mul(one_minus, h_query, tape), tape)
    return h_d, lam


def _mean_of(vectors: list[ad.Tensor], tape) -> ad.Tensor:
    if len(vectors) == 1:
        return vectors[0]
    n = len(vectors)
    weights = ad.Tensor(np.full(n, 1.0 / n))
    return ad.matmul(weights, ad.stack(vectors, tape), tape)


def encode_context(d: Dialogue, query_turn: int, mode: ContextMode,
                   enc: EncoderParams, fusion: FusionParams,
                   tape: ad.Tape | None = None,
                   frozen_selection: list[int] | None = None) -> ad.Tensor:
    """Dialogue-level query encoding under the given context mode.

    ``frozen_selection`` pins the top-K choice to the given previous-turn
    indices; gradient checks use it because the selection itself is hard.
    """
    prev, curr, last = split_sessions(d, query_turn)

    if mode.kind is ModeKind.FULL_CONCAT:
        ids = [CLS_ID]
        for utt in prev + curr + [last]:
            ids.append(ROLE_TOKEN[utt.role])
            ids.extend(tokenize(utt.text, enc.vocab, MAX_UTTERANCE_TOKENS))
        return encode_ids(ids[:MAX_CANDIDATE_TOKENS], enc, tape)

    pos = (lambda u: u.turn_index) if enc.position is not None else (lambda u: None)
    h_ut = encode_utterance(last, enc, tape, position=pos(last))

    if mode.kind is ModeKind.MEAN_ALL:
        allv = [encode_utterance(u, enc, tape, position=pos(u))
                for u in prev + curr] + [h_ut]
        return _mean_of(allv, tape)

    h_curr = [encode_utterance(u, enc, tape, position=pos(u)) for u in curr]
    if mode.kind is ModeKind.NO_PREV or not prev:
        chosen: list[int] = []
    elif frozen_selection is not None:
        chosen = list(frozen_selection)
    else:
        # score off-tape: the selection is hard, so only the chosen
        # utterances need gradient-recorded encodings
        pure = [encode_utterance(u, enc, None, position=pos(u)) for u in prev]
        scores = np.array([float(np.dot(h_ut.values, p.values)) for p in pure])
        chosen = topk_indices(scores, mode.k)
    selected = [encode_utterance(prev[i], enc, tape, position=pos(prev[i]))
                for i in chosen]
    H_hist = selected + h_curr
    if not H_hist:
        return h_ut
    h_hist = attend(h_ut, H_hist, tape)
    h_d, _ = gate_fuse(h_hist, h_ut, fusion, tape)
    return h_d
