"""Tokenization and the trainable text encoder.

An input is rendered as [CLS, lead-token] ++ word ids, where the lead token
marks the speaker role for utterances or the retrieval task for candidates.
The encoder is an embedding mean followed by one linear layer with tanh:
small enough to train in seconds, while both towers stay behind this
interface so a heavier encoder could replace them.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .corpus import (CLS_ID, KNOWLEDGE_ID, PERSONA_ID, RESPONSE_ID, SYS_ID,
                     UNK_ID, USR_ID, Candidate, Role, TaskKind, Utterance,
                     derive_rng)
from .errors import ContractError

MAX_UTTERANCE_TOKENS = 64
MAX_CANDIDATE_TOKENS = 512

ROLE_TOKEN = {Role.USER: USR_ID, Role.SYSTEM: SYS_ID}
TASK_TOKEN = {TaskKind.PERSONA: PERSONA_ID, TaskKind.KNOWLEDGE: KNOWLEDGE_ID,
              TaskKind.RESPONSE: RESPONSE_ID}


@dataclass
class EncoderParams:
    """Trainable tables plus the vocabulary they are indexed by."""
    embedding: ad.Tensor  # vocab x d
    ff_weight: ad.Tensor  # d x d
    ff_bias: ad.Tensor  # d
    vocab: dict[str, int]
    position: ad.Tensor | None = None  # optional discourse-position table

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    def tensors(self) -> dict[str, ad.Tensor]:
        out = {"embedding": self.embedding, "ff_weight": self.ff_weight,
               "ff_bias": self.ff_bias}
        if self.position is not None:
            out["position"] = self.position
        return out


def init_encoder_params(vocab: dict[str, int], d: int = 64, seed: int = 0,
                        positions: int = 0) -> EncoderParams:
    """Uniform [-0.1, 0.1] initialization, a pure function of (vocab, d, seed)."""
    if d < 1:
        raise ContractError(f"embedding dimension {d} is below 1")
    rng = derive_rng(seed, "encoder-init")
    draw = lambda *shape: ad.Tensor(rng.uniform(-0.1, 0.1, size=shape),
                                    requires_grad=True)
    pos = draw(positions, d) if positions > 0 else None
    return EncoderParams(embedding=draw(len(vocab), d), ff_weight=draw(d, d),
                         ff_bias=draw(d), vocab=dict(vocab), position=pos)


def tokenize(text: str, vocab: dict[str, int], max_len: int) -> list[int]:
    """Whitespace split, vocabulary lookup with UNK fallback, truncation."""
    if max_len < 1:
        raise ContractError(f"max_len {max_len} is below 1")
    return [vocab.get(tok, UNK_ID) for tok in text.split()[:max_len]]


def encode_ids(ids: list[int], params: EncoderParams,
               tape: ad.Tape | None = None,
               position: int | None = None) -> ad.Tensor:
    """tanh(W . mean(embed(ids)) + b); adds a position vector when enabled."""
    m = ad.rows_mean(params.embedding, ids, tape)
    if params.position is not None and position is not None:
        idx = min(position, params.position.shape[0] - 1)
        m = ad.add(m, ad.row(params.position, idx, tape), tape)
    z = ad.add(ad.matmul(params.ff_weight, m, tape), params.ff_bias, tape)
    return ad.tanh(z, tape)


def encode_text(text: str, lead_id: int, params: EncoderParams,
                tape: ad.Tape | None = None, max_len: int = MAX_UTTERANCE_TOKENS,
                position: int | None = None) -> ad.Tensor:
    return encode_ids([CLS_ID, lead_id] + tokenize(text, params.vocab, max_len),
                      params, tape, position)


def encode_utterance(u: Utterance, params: EncoderParams,
                     tape: ad.Tape | None = None,
                     position: int | None = None) -> ad.Tensor:
    return encode_text(u.text, ROLE_TOKEN[u.role], params, tape,
                       MAX_UTTERANCE_TOKENS, position)


def encode_candidate(c: Candidate, params: EncoderParams,
                     tape: ad.Tape | None = None) -> ad.Tensor:
    return encode_text(c.text, TASK_TOKEN[c.task], params, tape,
                       MAX_CANDIDATE_TOKENS)
