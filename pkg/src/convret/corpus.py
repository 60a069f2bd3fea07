"""Data model for multi-session dialogues with grounded retrieval candidates.

A corpus couples dialogues (ordered sessions of user/system utterances) with
three global candidate pools, one per retrieval task, and a list of
retrieval examples binding a user turn to its positive candidate and the
candidates selected at earlier turns. Corpora are immutable after load and
all sampling takes an explicit seed.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ContractError, IntegrityError, ParseError

# Reserved tokens occupying the lowest vocabulary ids, fixed across runs.
SPECIAL_TOKENS = ("[CLS]", "[SEP]", "[USR]", "[SYS]",
                  "[PERSONA]", "[KNOWLEDGE]", "[RESPONSE]", "[UNK]", "[PAD]")
CLS_ID, SEP_ID, USR_ID, SYS_ID = 0, 1, 2, 3
PERSONA_ID, KNOWLEDGE_ID, RESPONSE_ID, UNK_ID, PAD_ID = 4, 5, 6, 7, 8


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Independent generator keyed by (seed, tags); stable across platforms."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for tag in tags:
        h.update(b"\x1f")
        h.update(str(tag).encode())
    return np.random.default_rng(int.from_bytes(h.digest(), "little"))


class Role(enum.Enum):
    USER = "user"
    SYSTEM = "system"


class TaskKind(enum.Enum):
    PERSONA = "persona"
    KNOWLEDGE = "knowledge"
    RESPONSE = "response"


@dataclass(frozen=True)
class Utterance:
    role: Role
    text: str
    turn_index: int

    def __post_init__(self):
        if not self.text.strip():
            raise ContractError("utterance text is empty")
        if self.turn_index < 0:
            raise ContractError(f"negative turn index {self.turn_index}")


@dataclass(frozen=True)
class Session:
    utterances: tuple[Utterance, ...]

    def __post_init__(self):
        if not self.utterances:
            raise ContractError("session has no utterances")
        indices = [u.turn_index for u in self.utterances]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ContractError(f"turn indices not strictly increasing: {indices}")


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    sessions: tuple[Session, ...]

    def __post_init__(self):
        if not self.sessions:
            raise ContractError(f"dialogue {self.dialogue_id} has no sessions")

    def turns(self) -> list[Utterance]:
        return [u for s in self.sessions for u in s.utterances]


@dataclass(frozen=True)
class Candidate:
    candidate_id: str
    task: TaskKind
    text: str


@dataclass(frozen=True)
class RetrievalExample:
    dialogue_id: str
    query_turn_index: int
    task: TaskKind
    positive_id: str
    historical_ids: tuple[str, ...]


@dataclass
class Corpus:
    dialogues: list[Dialogue]
    pools: dict[TaskKind, dict[str, Candidate]]
    examples: list[RetrievalExample]
    vocab: dict[str, int]
    _by_id: dict[str, Dialogue] = field(init=False, repr=False)
    # instrumentation: counts candidate reads per task (e.g. to verify that
    # single-task training never touches the other pools)
    pool_reads: dict[TaskKind, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.pool_reads = {t: 0 for t in TaskKind}
        self._by_id = {}
        for d in self.dialogues:
            if d.dialogue_id in self._by_id:
                raise IntegrityError(f"duplicate dialogue id {d.dialogue_id}")
            self._by_id[d.dialogue_id] = d

    def dialogue(self, dialogue_id: str) -> Dialogue:
        d = self._by_id.get(dialogue_id)
        if d is None:
            raise IntegrityError(f"unknown dialogue id {dialogue_id}")
        return d

    def candidate(self, task: TaskKind, candidate_id: str) -> Candidate:
        self.pool_reads[task] += 1
        c = self.pools[task].get(candidate_id)
        if c is None:
            raise IntegrityError(f"unknown {task.value} candidate id {candidate_id}")
        return c


def _tokens(text: str) -> list[str]:
    return text.split()


def build_vocab(dialogues, pools) -> dict[str, int]:
    """Special tokens first, then corpus tokens by frequency, ties lexicographic."""
    counts: dict[str, int] = {}
    for d in dialogues:
        for u in d.turns():
            for tok in _tokens(u.text):
                counts[tok] = counts.get(tok, 0) + 1
    for pool in pools.values():
        for c in pool.values():
            for tok in _tokens(c.text):
                counts[tok] = counts.get(tok, 0) + 1
    vocab = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    for tok in sorted(counts, key=lambda t: (-counts[t], t)):
        if tok not in vocab:
            vocab[tok] = len(vocab)
    return vocab


def build_corpus(dialogues, pools, examples) -> Corpus:
    """Assemble and cross-check a corpus; vocabulary is derived from content."""
    corpus = Corpus(list(dialogues), pools, list(examples),
                    build_vocab(dialogues, pools))
    for ex in corpus.examples:
        d = corpus.dialogue(ex.dialogue_id)
        turn = {u.turn_index: u for u in d.turns()}.get(ex.query_turn_index)
        if turn is None:
            raise IntegrityError(
                f"dialogue {ex.dialogue_id} has no turn {ex.query_turn_index}")
        if turn.role is not Role.USER:
            raise IntegrityError(
                f"query turn {ex.query_turn_index} of {ex.dialogue_id} is not a user turn")
        pool = corpus.pools[ex.task]
        if ex.positive_id not in pool:
            raise IntegrityError(f"dangling positive candidate id {ex.positive_id}")
        for hid in ex.historical_ids:
            if hid not in pool:
                raise IntegrityError(f"dangling historical candidate id {hid}")
    return corpus


# ---------------------------------------------------------------------------
# file format: newline-delimited JSON, one record per line
# ---------------------------------------------------------------------------

def _parse_dialogue(rec: dict, lineno: int) -> tuple[Dialogue, list[RetrievalExample]]:
    did = rec["id"]
    sessions = []
    turn = 0
    for sess in rec["sessions"]:
        utts = []
        for u in sess:
            utts.append(Utterance(Role(u["role"]), u["text"], turn))
            turn += 1
        sessions.append(Session(tuple(utts)))
    examples = [
        RetrievalExample(did, int(e["turn"]), TaskKind(e["task"]),
                         e["positive"], tuple(e.get("historical", [])))
        for e in rec.get("examples", [])
    ]
    return Dialogue(did, tuple(sessions)), examples


def load_corpus(path) -> Corpus:
    """Read a corpus file; raises ParseError (with line number) or IntegrityError."""
    dialogues: list[Dialogue] = []
    pools: dict[TaskKind, dict[str, Candidate]] = {t: {} for t in TaskKind}
    examples: list[RetrievalExample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            try:
                kind = rec["kind"]
                if kind == "candidate":
                    cand = Candidate(rec["id"], TaskKind(rec["task"]), rec["text"])
                    pool = pools[cand.task]
                    if cand.candidate_id in pool:
                        raise ParseError(
                            f"duplicate {cand.task.value} candidate id {cand.candidate_id}",
                            line=lineno)
                    pool[cand.candidate_id] = cand
                elif kind == "dialogue":
                    d, exs = _parse_dialogue(rec, lineno)
                    dialogues.append(d)
                    examples.extend(exs)
                else:
                    raise ParseError(f"unknown record kind {kind!r}", line=lineno)
            except ParseError:
                raise
            except (KeyError, ValueError, TypeError, ContractError) as exc:
                raise ParseError(f"malformed {type(exc).__name__}: {exc}",
                                 line=lineno) from exc
    return build_corpus(dialogues, pools, examples)


def write_corpus(corpus: Corpus, path) -> None:
    """Serialize in a fixed order: candidates per task, then dialogues."""
    by_dialogue: dict[str, list[RetrievalExample]] = {}
    for ex in corpus.examples:
        by_dialogue.setdefault(ex.dialogue_id, []).append(ex)
    with open(path, "w", encoding="utf-8") as fh:
        for task in TaskKind:
            for c in corpus.pools[task].values():
                fh.write(json.dumps(
                    {"kind": "candidate", "id": c.candidate_id,
                     "task": task.value, "text": c.text},
                    ensure_ascii=False, separators=(",", ":")) + "\n")
        for d in corpus.dialogues:
            rec = {
                "kind": "dialogue",
                "id": d.dialogue_id,
                "sessions": [[{"role": u.role.value, "text": u.text}
                              for u in s.utterances] for s in d.sessions],
                "examples": [{"turn": ex.query_turn_index, "task": ex.task.value,
                              "positive": ex.positive_id,
                              "historical": list(ex.historical_ids)}
                             for ex in by_dialogue.get(d.dialogue_id, [])],
            }
            fh.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# session splitting and pool sampling
# ---------------------------------------------------------------------------

def _pair_units(utterances) -> list[list[Utterance]]:
    """Group a single session into turn-pair units, one per user utterance."""
    units: list[list[Utterance]] = []
    for u in utterances:
        if u.role is Role.USER or not units:
            units.append([u])
        else:
            units[-1].append(u)
    return units


def split_sessions(d: Dialogue, query_turn: int):
    """Split a dialogue at a user turn into (previous, current, query) parts.

    Previous-session utterances come from sessions before the query's; for a
    single-session dialogue each (user, system) turn pair counts as one
    session unit. Current-session utterances are those preceding the query
    inside its own unit.
    """
    target = None
    session_idx = None
    for si, sess in enumerate(d.sessions):
        for u in sess.utterances:
            if u.turn_index == query_turn:
                target = u
                session_idx = si
    if target is None:
        raise ContractError(f"dialogue {d.dialogue_id} has no turn {query_turn}")
    if target.role is not Role.USER:
        raise ContractError(f"turn {query_turn} of {d.dialogue_id} is not a user turn")

    if len(d.sessions) == 1:
        units = _pair_units(d.sessions[0].utterances)
        prev: list[Utterance] = []
        curr: list[Utterance] = []
        for unit in units:
            if any(u.turn_index == query_turn for u in unit):
                curr = [u for u in unit if u.turn_index < query_turn]
                break
            prev.extend(unit)
        return prev, curr, target

    prev = [u for s in d.sessions[:session_idx] for u in s.utterances]
    curr = [u for u in d.sessions[session_idx].utterances
            if u.turn_index < query_turn]
    return prev, curr, target


def semi_hard_id(ex: RetrievalExample) -> str | None:
    """Most recent historical candidate id, unless it coincides with the positive."""
    if ex.historical_ids and ex.historical_ids[-1] != ex.positive_id:
        return ex.historical_ids[-1]
    return None


def sample_pool(ex: RetrievalExample, corpus: Corpus, pool_size: int,
                seed: int) -> list[Candidate]:
    """Candidate pool for one example: positive, at most one semi-hard
    historical candidate, random distinct fillers; seeded shuffle."""
    if pool_size < 2:
        raise ContractError(f"pool size {pool_size} is below 2")
    pool = corpus.pools[ex.task]
    if len(pool) < pool_size:
        raise CapacityError(
            f"{ex.task.value} pool has {len(pool)} candidates, need {pool_size}")
    chosen = [ex.positive_id]
    semi = semi_hard_id(ex)
    if semi is not None and len(chosen) < pool_size:
        chosen.append(semi)
    rng = derive_rng(seed, "pool", ex.dialogue_id, ex.query_turn_index, ex.task.value)
    rest = [cid for cid in pool if cid not in set(chosen)]
    fill = pool_size - len(chosen)
    if fill:
        picks = rng.choice(len(rest), size=fill, replace=False)
        chosen.extend(rest[i] for i in picks)
    order = rng.permutation(len(chosen))
    return [pool[chosen[i]] for i in order]


def split_corpus(corpus: Corpus, holdout_fraction: float, seed: int):
    """Partition dialogues (and their examples) into train and held-out
    corpora; both keep the full candidate pools."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ContractError(f"holdout fraction {holdout_fraction} not in (0, 1)")
    n = len(corpus.dialogues)
    n_held = max(1, int(round(n * holdout_fraction))) if n else 0
    rng = derive_rng(seed, "split")
    order = rng.permutation(n)
    held_ids = {corpus.dialogues[i].dialogue_id for i in order[:n_held]}

    def subset(keep_held: bool) -> Corpus:
        ds = [d for d in corpus.dialogues if (d.dialogue_id in held_ids) == keep_held]
        ids = {d.dialogue_id for d in ds}
        exs = [ex for ex in corpus.examples if ex.dialogue_id in ids]
        return build_corpus(ds, corpus.pools, exs)

    return subset(False), subset(True)
