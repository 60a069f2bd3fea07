"""Mini-batch training loop, AdamW optimizer, and checkpointing.

Determinism is the organizing principle: every random draw (shuffling, easy
negatives) comes from a generator derived from (seed, purpose tags), never
from sequential RNG state, so a run resumed from a checkpoint replays the
exact remaining schedule and reproduces an uninterrupted run bit for bit.
Checkpoints are a versioned binary format (magic "UCR1") holding the
config, the vocabulary, and all parameter and optimizer-moment arrays as
little-endian float64 in a declared order.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import Corpus, TaskKind, derive_rng, semi_hard_id
from .encoder import EncoderParams, encode_candidate, init_encoder_params
from .errors import CheckpointError, ConfigError, TrainingError
from .fusion import ContextMode, FusionParams, ModeKind, encode_context, init_fusion_params
from .losses import LossConfig, batch_similarities, combined_loss

CHECKPOINT_MAGIC = b"UCR1"


class Schedule(enum.Enum):
    CONSTANT = "constant"
    LINEAR_DECAY = "linear_decay"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 2e-2
    schedule: Schedule = Schedule.CONSTANT
    mode: ContextMode = field(default_factory=ContextMode.adaptive)
    gamma: float = 1.0
    use_hist: bool = True
    use_pair: bool = True
    regime: TaskKind | None = None  # None trains on all tasks combined
    seed: int = 0
    dim: int = 64
    weight_decay: float = 0.0
    positions: int = 0  # discourse-position table size, 0 disables it

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs {self.epochs} is negative")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size {self.batch_size} is below 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate {self.learning_rate} is not positive")
        if self.dim < 1:
            raise ConfigError(f"dim {self.dim} is below 1")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay {self.weight_decay} is negative")

    def loss_config(self) -> LossConfig:
        return LossConfig(gamma=self.gamma, use_hist=self.use_hist,
                          use_pair=self.use_pair)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "schedule": self.schedule.value,
            "mode": {"kind": self.mode.kind.value, "k": self.mode.k},
            "gamma": self.gamma, "use_hist": self.use_hist,
            "use_pair": self.use_pair,
            "regime": self.regime.value if self.regime else "full",
            "seed": self.seed, "dim": self.dim,
            "weight_decay": self.weight_decay, "positions": self.positions,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(
            epochs=d["epochs"], batch_size=d["batch_size"],
            learning_rate=d["learning_rate"],
            schedule=Schedule(d["schedule"]),
            mode=ContextMode(ModeKind(d["mode"]["kind"]), d["mode"]["k"]),
            gamma=d["gamma"], use_hist=d["use_hist"], use_pair=d["use_pair"],
            regime=None if d["regime"] == "full" else TaskKind(d["regime"]),
            seed=d["seed"], dim=d["dim"],
            weight_decay=d["weight_decay"], positions=d["positions"])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def for_params(params: dict[str, ad.Tensor]) -> "OptimizerState":
        return OptimizerState(
            0,
            {k: np.zeros(t.shape) for k, t in params.items()},
            {k: np.zeros(t.shape) for k, t in params.items()})


ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def optimizer_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray],
                   state: OptimizerState, lr_t: float,
                   weight_decay: float = 0.0) -> dict[str, ad.Tensor]:
    """One decoupled-weight-decay adaptive-moment update with bias correction.

    Mutates ``state`` in place and returns the updated parameter dict.
    """
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name} at step {t}")
        m = state.m[name] = ADAM_BETA1 * state.m[name] + (1 - ADAM_BETA1) * g
        v = state.v[name] = ADAM_BETA2 * state.v[name] + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        new = p.values - lr_t * (m_hat / (np.sqrt(v_hat) + ADAM_EPS)
                                 + weight_decay * p.values)
        out[name] = ad.Tensor(new, requires_grad=True)
    return out


def schedule_lr(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for a 1-based step; linear decay ends exactly at zero."""
    if cfg.schedule is Schedule.CONSTANT or total_steps == 0:
        return cfg.learning_rate
    return cfg.learning_rate * (1.0 - step / total_steps)


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]  # parameters, fixed declared order
    moments_m: dict[str, np.ndarray]
    moments_v: dict[str, np.ndarray]
    vocab: dict[str, int]
    cfg: TrainConfig
    step: int

    def param_names(self) -> list[str]:
        return list(self.arrays)

    def tensors(self) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(a, requires_grad=True)
                for k, a in self.arrays.items()}

    def encoder_params(self) -> EncoderParams:
        t = self.tensors()
        return EncoderParams(t["embedding"], t["ff_weight"], t["ff_bias"],
                             dict(self.vocab), t.get("position"))

    def fusion_params(self) -> FusionParams:
        return FusionParams(ad.Tensor(self.arrays["gate_w"], requires_grad=True))


def _write_record(fh, payload: bytes) -> None:
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def _read_record(fh) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n)


def save_checkpoint(ck: Checkpoint, path) -> None:
    order = list(ck.arrays)
    declared = ([[n, list(ck.arrays[n].shape)] for n in order]
                + [[f"m.{n}", list(ck.moments_m[n].shape)] for n in order]
                + [[f"v.{n}", list(ck.moments_v[n].shape)] for n in order])
    header = {"config": ck.cfg.to_dict(), "step": ck.step, "arrays": declared}
    ids = sorted(ck.vocab.values())
    if ids != list(range(len(ck.vocab))):
        raise CheckpointError("vocabulary ids are not contiguous")
    tokens = sorted(ck.vocab, key=ck.vocab.get)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        _write_record(fh, json.dumps(header, sort_keys=True,
                                     separators=(",", ":")).encode())
        _write_record(fh, json.dumps(tokens, ensure_ascii=False,
                                     separators=(",", ":")).encode())
        for n in order:
            fh.write(np.ascontiguousarray(ck.arrays[n], dtype="<f8").tobytes())
        for n in order:
            fh.write(np.ascontiguousarray(ck.moments_m[n], dtype="<f8").tobytes())
        for n in order:
            fh.write(np.ascontiguousarray(ck.moments_v[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(
                f"incompatible checkpoint version or format: magic {magic!r}")
        try:
            header = json.loads(_read_record(fh))
            tokens = json.loads(_read_record(fh))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc.msg}") from exc
        arrays: dict[str, np.ndarray] = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            buf = _read_exact(fh, count * 8)
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after declared arrays")
    params = {n: a for n, a in arrays.items() if "." not in n}
    return Checkpoint(
        arrays=params,
        moments_m={n: arrays[f"m.{n}"] for n in params},
        moments_v={n: arrays[f"v.{n}"] for n in params},
        vocab={tok: i for i, tok in enumerate(tokens)},
        cfg=TrainConfig.from_dict(header["config"]),
        step=int(header["step"]))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _task_examples(corpus: Corpus, cfg: TrainConfig) -> dict[TaskKind, list]:
    if cfg.regime is not None:
        exs = [e for e in corpus.examples if e.task == cfg.regime]
        if len(exs) < cfg.batch_size:
            raise ConfigError(
                f"{cfg.regime.value} has {len(exs)} examples, "
                f"need at least {cfg.batch_size}")
        return {cfg.regime: exs}
    by_task = {t: [e for e in corpus.examples if e.task == t] for t in TaskKind}
    usable = {t: exs for t, exs in by_task.items() if len(exs) >= cfg.batch_size}
    if not usable:
        raise ConfigError(f"no task has {cfg.batch_size} examples to fill a batch")
    return usable


def _epoch_batches(tasks: dict[TaskKind, list], cfg: TrainConfig, epoch: int):
    """Task-homogeneous batches, tasks interleaved round-robin, drop-last."""
    per_task = {}
    for t, exs in tasks.items():
        order = derive_rng(cfg.seed, "shuffle", t.value, epoch).permutation(len(exs))
        n_full = len(exs) // cfg.batch_size
        per_task[t] = [[exs[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                       for b in range(n_full)]
    longest = max(len(b) for b in per_task.values())
    for i in range(longest):
        for t in TaskKind:
            if t in per_task and i < len(per_task[t]):
                yield t, per_task[t][i]


def steps_per_epoch(corpus: Corpus, cfg: TrainConfig) -> int:
    return sum(len(exs) // cfg.batch_size
               for exs in _task_examples(corpus, cfg).values())


def _easy_negative(corpus: Corpus, ex, epoch: int, seed: int):
    """Random easy negative: never the positive, never the semi-hard."""
    exclude = {ex.positive_id}
    semi = semi_hard_id(ex)
    if semi is not None:
        exclude.add(semi)
    ids = [cid for cid in corpus.pools[ex.task] if cid not in exclude]
    if not ids:
        raise ConfigError(f"{ex.task.value} pool has no easy negative available")
    rng = derive_rng(seed, "easy", ex.dialogue_id, ex.query_turn_index, epoch)
    return corpus.candidate(ex.task, ids[int(rng.integers(len(ids)))])


def _batch_loss(corpus: Corpus, batch, params: dict[str, ad.Tensor],
                cfg: TrainConfig, vocab: dict[str, int], epoch: int,
                tape: ad.Tape):
    enc = EncoderParams(params["embedding"], params["ff_weight"],
                        params["ff_bias"], vocab, params.get("position"))
    fus = FusionParams(params["gate_w"])
    contexts, positives, semi_scores, easy_scores, present = [], [], [], [], []
    for ex in batch:
        d = corpus.dialogue(ex.dialogue_id)
        contexts.append(encode_context(d, ex.query_turn_index, cfg.mode,
                                       enc, fus, tape))
        positives.append(encode_candidate(
            corpus.candidate(ex.task, ex.positive_id), enc, tape))
    for i, ex in enumerate(batch):
        semi = semi_hard_id(ex)
        present.append(semi is not None)
        if semi is not None:
            h = encode_candidate(corpus.candidate(ex.task, semi), enc, tape)
            semi_scores.append(ad.dot(contexts[i], h, tape))
        else:
            semi_scores.append(ad.scalar(0.0))
        easy = _easy_negative(corpus, ex, epoch, cfg.seed)
        easy_scores.append(ad.dot(contexts[i],
                                  encode_candidate(easy, enc, tape), tape))
    cross = ad.matmul(ad.stack(contexts, tape),
                      ad.transpose(ad.stack(positives, tape), tape), tape)
    sims = batch_similarities(cross, ad.concat(semi_scores, tape),
                              ad.concat(easy_scores, tape),
                              np.array(present), tape)
    return combined_loss(sims, cfg.loss_config(), tape)


def train(corpus: Corpus, cfg: TrainConfig, start: Checkpoint | None = None,
          max_steps: int | None = None) -> tuple[Checkpoint, list[float]]:
    """Run (or resume) training; returns the checkpoint and per-step losses.

    ``start`` resumes from a saved checkpoint: already-performed steps are
    skipped by schedule position, so the result is bit-identical to an
    uninterrupted run of the same config. ``max_steps`` caps how many
    optimizer steps this call performs.
    """
    tasks = _task_examples(corpus, cfg)
    if start is None:
        vocab = corpus.vocab
        enc = init_encoder_params(vocab, d=cfg.dim, seed=cfg.seed,
                                  positions=cfg.positions)
        params = dict(enc.tensors())
        params.update(init_fusion_params(cfg.dim, cfg.seed).tensors())
        state = OptimizerState.for_params(params)
        done = 0
    else:
        vocab = start.vocab
        params = start.tensors()
        state = OptimizerState(start.step, dict(start.moments_m),
                               dict(start.moments_v))
        done = start.step

    per_epoch = sum(len(exs) // cfg.batch_size for exs in tasks.values())
    total_steps = cfg.epochs * per_epoch
    history: list[float] = []
    step = 0
    performed = 0
    for epoch in range(cfg.epochs):
        for task, batch in _epoch_batches(tasks, cfg, epoch):
            step += 1
            if step <= done:
                continue
            if max_steps is not None and performed >= max_steps:
                break
            tape = ad.Tape()
            loss = _batch_loss(corpus, batch, params, cfg, vocab, epoch, tape)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step}")
            # a pair-only objective over a batch with no semi-hard items is
            # the constant zero; step with zero gradients to keep the
            # schedule position (and resume equality) intact
            grads = ({} if tape.node_of(loss) is None
                     else ad.backward(tape, loss))
            grad_arrays = {}
            for name, p in params.items():
                nid = tape.node_of(p)
                grad_arrays[name] = (grads[nid].values if nid is not None
                                     and nid in grads else np.zeros(p.shape))
            lr_t = schedule_lr(cfg, step, total_steps)
            params = optimizer_step(params, grad_arrays, state, lr_t,
                                    cfg.weight_decay)
            history.append(value)
            performed += 1
        else:
            continue
        break

    ck = Checkpoint(arrays={n: params[n].values for n in params},
                    moments_m=dict(state.m), moments_v=dict(state.v),
                    vocab=dict(vocab), cfg=cfg, step=state.step)
    return ck, history


def initial_checkpoint(corpus: Corpus, cfg: TrainConfig) -> Checkpoint:
    """Untrained checkpoint at the config's initialization; works on any
    corpus, including one with too few examples to train on."""
    enc = init_encoder_params(corpus.vocab, d=cfg.dim, seed=cfg.seed,
                              positions=cfg.positions)
    params = dict(enc.tensors())
    params.update(init_fusion_params(cfg.dim, cfg.seed).tensors())
    state = OptimizerState.for_params(params)
    return Checkpoint(arrays={n: t.values for n, t in params.items()},
                      moments_m=state.m, moments_v=state.v,
                      vocab=dict(corpus.vocab), cfg=cfg, step=0)
