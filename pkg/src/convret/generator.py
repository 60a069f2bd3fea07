"""Deterministic synthetic corpus generator.

Dialogues are built from topic-partitioned pseudo-words. Each dialogue
owns an anchor entity token; each retrieval example sits at the first user
turn of a session unit and its positive candidate combines the unit's topic
words with the anchor entity. One utterance in the immediately preceding
unit (the callback) also carries that topic and the entity, so selecting
relevant history genuinely disambiguates the positive from same-topic
candidates of other dialogues. Earlier units' positives become the
example's historical candidates: same entity, wrong topic — semi-hard by
construction. With ``positive_coupling`` off, positives are drawn from the
whole vocabulary independently of the query; the rank of the positive under
a random encoder is then uniform, which calibrates chance-level metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import (Candidate, Corpus, Dialogue, RetrievalExample, Role,
                     Session, TaskKind, Utterance, build_corpus, derive_rng)
from .errors import ConfigError


@dataclass(frozen=True)
class GeneratorConfig:
    topics: int = 16
    dialogues_per_task: int = 1000
    sessions_per_dialogue: int = 3
    turns_per_session: int = 2  # (user, system) pairs per session
    words_per_topic: int = 12
    common_words: int = 24
    entities: int = 24
    utterance_words: int = 5  # topic words per utterance or candidate
    positive_coupling: bool = True

    def __post_init__(self):
        if self.topics < 1 or self.vocab_size < 1:
            raise ConfigError("need at least one topic and a non-empty vocabulary")
        for name in ("dialogues_per_task", "sessions_per_dialogue",
                     "turns_per_session", "words_per_topic", "utterance_words"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.common_words < 1 or self.entities < 1:
            raise ConfigError("need at least one common word and one entity")
        if self.utterance_words > self.words_per_topic:
            raise ConfigError("utterance_words exceeds words_per_topic")
        units = (self.sessions_per_dialogue if self.sessions_per_dialogue > 1
                 else self.turns_per_session)
        if units > self.topics:
            raise ConfigError(f"{units} session units need {units} distinct topics, "
                              f"have {self.topics}")

    @property
    def vocab_size(self) -> int:
        return (self.topics * self.words_per_topic
                + self.common_words + self.entities)


def _topic_words(cfg: GeneratorConfig, topic: int) -> list[str]:
    return [f"t{topic}w{j}" for j in range(cfg.words_per_topic)]


def _draw(rng, words: list[str], n: int) -> list[str]:
    picks = rng.choice(len(words), size=min(n, len(words)), replace=False)
    return [words[i] for i in picks]


def _all_words(cfg: GeneratorConfig) -> list[str]:
    words = [w for t in range(cfg.topics) for w in _topic_words(cfg, t)]
    words += [f"c{j}" for j in range(cfg.common_words)]
    return words


def _utterance_text(cfg, rng, topic: int) -> str:
    toks = _draw(rng, _topic_words(cfg, topic), cfg.utterance_words)
    toks.append(f"c{rng.integers(cfg.common_words)}")
    return " ".join(toks)


def _build_dialogue(cfg: GeneratorConfig, task: TaskKind, index: int, seed: int):
    rng = derive_rng(seed, "dlg", task.value, index)
    single = cfg.sessions_per_dialogue == 1
    n_units = cfg.turns_per_session if single else cfg.sessions_per_dialogue
    pairs_per_unit = 1 if single else cfg.turns_per_session

    unit_topics = [int(t) for t in
                   rng.choice(cfg.topics, size=n_units, replace=False)]
    entity = f"e{rng.integers(cfg.entities)}"
    full_vocab = _all_words(cfg)

    # texts[unit][pair] = [user_text, system_text]
    texts = [[[_utterance_text(cfg, rng, unit_topics[u]),
               _utterance_text(cfg, rng, unit_topics[u])]
              for _ in range(pairs_per_unit)] for u in range(n_units)]

    did = f"{task.value}-{index}"
    candidates: list[Candidate] = []
    example_specs: list[tuple[int, str]] = []  # (unit, candidate_id)

    example_units = list(range(1, n_units)) if n_units > 1 else [0]
    for u in example_units:
        cid = f"{task.value[0]}{index}_{u}"
        if cfg.positive_coupling:
            toks = _draw(rng, _topic_words(cfg, unit_topics[u]), cfg.utterance_words)
            if n_units > 1:
                toks.append(entity)
            toks.append(f"c{rng.integers(cfg.common_words)}")
            # callback: one system slot of the previous unit restates the
            # query unit's topic together with the anchor entity
            if n_units > 1:
                cb = _draw(rng, _topic_words(cfg, unit_topics[u]), cfg.utterance_words)
                cb.append(entity)
                pair = int(rng.integers(pairs_per_unit))
                texts[u - 1][pair][1] = " ".join(cb)
        else:
            toks = _draw(rng, full_vocab, cfg.utterance_words + 1)
        candidates.append(Candidate(cid, task, " ".join(toks)))
        example_specs.append((u, cid))

    turn = 0
    units_as_sessions: list[Session] = []
    flat_pairs: list[Utterance] = []
    unit_first_user_turn: dict[int, int] = {}
    for u in range(n_units):
        utts: list[Utterance] = []
        for p in range(pairs_per_unit):
            if p == 0:
                unit_first_user_turn[u] = turn
            utts.append(Utterance(Role.USER, texts[u][p][0], turn))
            utts.append(Utterance(Role.SYSTEM, texts[u][p][1], turn + 1))
            turn += 2
        if single:
            flat_pairs.extend(utts)
        else:
            units_as_sessions.append(Session(tuple(utts)))
    sessions = ((Session(tuple(flat_pairs)),) if single
                else tuple(units_as_sessions))

    examples = []
    seen: list[str] = []
    for u, cid in example_specs:
        examples.append(RetrievalExample(did, unit_first_user_turn[u], task,
                                         cid, tuple(seen)))
        seen.append(cid)
    return Dialogue(did, sessions), candidates, examples


def generate_synthetic(cfg: GeneratorConfig, seed: int) -> Corpus:
    """Deterministic corpus for (cfg, seed); see the module docstring."""
    dialogues: list[Dialogue] = []
    pools: dict[TaskKind, dict[str, Candidate]] = {t: {} for t in TaskKind}
    examples: list[RetrievalExample] = []
    for task in TaskKind:
        for i in range(cfg.dialogues_per_task):
            d, cands, exs = _build_dialogue(cfg, task, i, seed)
            dialogues.append(d)
            for c in cands:
                pools[task][c.candidate_id] = c
            examples.extend(exs)
    return build_corpus(dialogues, pools, examples)
