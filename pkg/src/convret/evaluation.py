"""Brute-force retrieval over candidate pools, metrics, and analysis runs.

Scoring is an exact dense matrix-vector product (pools are small by
protocol); ranks break ties toward the lower row index so every metric is
deterministic. The analysis helpers reproduce the usual study shapes:
pool-size sweep, top-K sweep including the no-previous-session mode, and
ablation comparisons retrained per variant under shared seeds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .corpus import Candidate, Corpus, TaskKind, sample_pool
from .encoder import EncoderParams, encode_candidate
from .errors import ContractError, EvaluationError
from .fusion import ContextMode, encode_context
from .training import Checkpoint, TrainConfig, train


@dataclass
class EmbeddedPool:
    candidate_ids: list[str]  # row i holds candidate_ids[i]
    matrix: np.ndarray  # n x d
    task: TaskKind

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.candidate_ids):
            raise ContractError(
                f"matrix {self.matrix.shape} does not match "
                f"{len(self.candidate_ids)} candidate ids")

    @property
    def size(self) -> int:
        return len(self.candidate_ids)


@dataclass(frozen=True)
class MetricsReport:
    r_at_1: float
    r_at_5: float
    mrr: float
    pool_size: int
    query_count: int
    task: TaskKind
    fingerprint: str
    mode_kind: str
    mode_k: int
    seed: int

    def __post_init__(self):
        if self.query_count < 1:
            raise EvaluationError("metrics over zero queries")
        if not (self.r_at_1 <= self.r_at_5 + 1e-12
                and self.r_at_1 <= self.mrr + 1e-12 and self.mrr <= 1 + 1e-12):
            raise EvaluationError(
                f"inconsistent metrics: r@1={self.r_at_1}, r@5={self.r_at_5}, "
                f"mrr={self.mrr}")

    def to_dict(self) -> dict:
        return {"task": self.task.value, "pool_size": self.pool_size,
                "r_at_1": self.r_at_1, "r_at_5": self.r_at_5, "mrr": self.mrr,
                "query_count": self.query_count,
                "config": {"fingerprint": self.fingerprint,
                           "mode": self.mode_kind, "k": self.mode_k,
                           "seed": self.seed}}


def embed_pool(cands: list[Candidate], params: EncoderParams,
               cache: dict[str, np.ndarray] | None = None) -> EmbeddedPool:
    """Embed candidates one per row; no gradients recorded. An optional
    cache (candidate id -> vector) avoids re-encoding across queries."""
    if not cands:
        raise ContractError("embed_pool of an empty candidate list")
    task = cands[0].task
    if any(c.task is not task for c in cands):
        raise ContractError("embed_pool requires a single-task candidate list")
    rows = []
    for c in cands:
        vec = None if cache is None else cache.get(c.candidate_id)
        if vec is None:
            vec = encode_candidate(c, params).values
            if cache is not None:
                cache[c.candidate_id] = vec
        rows.append(vec)
    return EmbeddedPool([c.candidate_id for c in cands], np.array(rows), task)


def retrieve(h_d: ad.Tensor, pool: EmbeddedPool,
             top_n: int) -> list[tuple[str, float]]:
    """Top-n candidate ids by descending dot product, ties to lower index."""
    if not 1 <= top_n <= pool.size:
        raise ContractError(f"top_n {top_n} outside [1, {pool.size}]")
    scores = pool.matrix @ h_d.values
    order = np.argsort(-scores, kind="stable")[:top_n]
    return [(pool.candidate_ids[i], float(scores[i])) for i in order]


def rank_by_counting(scores: np.ndarray, positive_row: int) -> int:
    """1 + strictly-higher count + equal-score-at-lower-index count."""
    s = scores[positive_row]
    higher = int(np.sum(scores > s))
    equal_before = int(np.sum(scores[:positive_row] == s))
    return 1 + higher + equal_before


def _fingerprint(ck: Checkpoint, task: TaskKind, pool_size: int, seed: int,
                 mode: ContextMode) -> str:
    h = hashlib.blake2b(digest_size=6)
    payload = json.dumps([ck.cfg.to_dict(), ck.step, task.value, pool_size,
                          seed, mode.kind.value, mode.k], sort_keys=True)
    h.update(payload.encode())
    return h.hexdigest()


def evaluate(corpus: Corpus, ck: Checkpoint, task: TaskKind, pool_size: int,
             seed: int, mode: ContextMode | None = None) -> MetricsReport:
    """Rank each example's positive inside a sampled pool; aggregate metrics.

    Tokenization uses the checkpoint's vocabulary, so the corpus may be a
    held-out split or a different file than the training corpus.
    """
    mode = ck.cfg.mode if mode is None else mode
    examples = [ex for ex in corpus.examples if ex.task == task]
    if not examples:
        raise ContractError(f"corpus has no {task.value} examples")
    enc = ck.encoder_params()
    fus = ck.fusion_params()
    cache: dict[str, np.ndarray] = {}
    hits1 = hits5 = 0
    mrr_total = 0.0
    for ex in examples:
        pool_cands = sample_pool(ex, corpus, pool_size, seed)
        pool = embed_pool(pool_cands, enc, cache)
        h_d = encode_context(corpus.dialogue(ex.dialogue_id),
                             ex.query_turn_index, mode, enc, fus)
        ranking = retrieve(h_d, pool, pool.size)
        rank = 1 + next(i for i, (cid, _) in enumerate(ranking)
                        if cid == ex.positive_id)
        hits1 += rank <= 1
        hits5 += rank <= 5
        mrr_total += 1.0 / rank
    n = len(examples)
    return MetricsReport(
        r_at_1=hits1 / n, r_at_5=hits5 / n, mrr=mrr_total / n,
        pool_size=pool_size, query_count=n, task=task,
        fingerprint=_fingerprint(ck, task, pool_size, seed, mode),
        mode_kind=mode.kind.value, mode_k=mode.k, seed=seed)


def pool_size_sweep(corpus: Corpus, ck: Checkpoint, task: TaskKind,
                    sizes: list[int], seed: int,
                    mode: ContextMode | None = None) -> list[MetricsReport]:
    """One report per pool size under a shared seed derivation."""
    return [evaluate(corpus, ck, task, size, seed, mode) for size in sizes]


def k_sweep(corpus: Corpus, ck: Checkpoint, task: TaskKind, ks: list[int],
            pool_size: int, seed: int) -> list[MetricsReport]:
    """Reports for each adaptive k plus the no-previous-session mode."""
    reports = [evaluate(corpus, ck, task, pool_size, seed, ContextMode.adaptive(k))
               for k in ks]
    reports.append(evaluate(corpus, ck, task, pool_size, seed,
                            ContextMode.no_prev()))
    return reports


ABLATION_VARIANTS = ("baseline", "no_context_enc", "no_pair", "no_hist")


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    """Training config for one ablation variant (a single switch each)."""
    if variant == "baseline":
        return base
    if variant == "no_context_enc":
        return replace(base, mode=ContextMode.mean_all())
    if variant == "no_pair":
        return replace(base, use_pair=False)
    if variant == "no_hist":
        return replace(base, use_hist=False)
    raise ContractError(f"unknown ablation variant {variant!r}")


def ablation_run(train_corpus: Corpus, eval_corpus: Corpus,
                 base_cfg: TrainConfig, variants: list[str], pool_size: int,
                 eval_seed: int) -> dict[str, dict[str, float]]:
    """Train and evaluate each variant under shared seeds.

    Returns {variant: {task value: R@1}} over the evaluation corpus.
    """
    table: dict[str, dict[str, float]] = {}
    for variant in variants:
        cfg = variant_config(base_cfg, variant)
        ck, _ = train(train_corpus, cfg)
        table[variant] = {
            task.value: evaluate(eval_corpus, ck, task, pool_size,
                                 eval_seed).r_at_1
            for task in TaskKind
            if any(ex.task == task for ex in eval_corpus.examples)}
    return table
