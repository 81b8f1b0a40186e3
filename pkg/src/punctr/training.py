"""Training loops: Adam with the inverse-square-root warmup schedule and
global-norm gradient clipping, alternating task batches under the
adversarial weight ramp, early stopping on dev punctuation F1, and
deterministic tab-separated logs.

All randomness is derived statelessly from (seed, purpose, step), so a run
is a pure function of (seed, config, corpora) and an interrupted pretraining
run can resume bit-exactly from a state checkpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .adversarial import lambda_at
from .autodiff import Tape, Tensor, backward
from .checkpoint import Checkpoint
from .data import TASK_POS, TASK_PUN, LabeledSequence, Vocab, make_batches
from .errors import ContractError, DataError, NumericError, ShapeError
from .layers import EncoderStack
from .metrics import MetricsReport, evaluate
from .models import (AdversarialModel, MlmHead, PunctuationTagger,
                     encoder_config_dict, mlm_loss, model_checkpoint,
                     multitask_step, punctuation_forward)

# purpose tags for stateless rng derivation
_BATCH_ORDER, _TASK_PICK, _MLM_MASK, _TAPE = 0, 1, 2, 3


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(tuple(int(p) for p in parts)))


def _tape_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence((int(seed), _TAPE, int(step))).generate_state(1)[0])


@dataclass(frozen=True)
class LrSchedule:
    d_model: int
    warmup_steps: int


def lr_at(sched: LrSchedule, step: int) -> float:
    """Inverse-square-root schedule with linear warmup; peak at warmup_steps."""
    if step < 1:
        raise ContractError(f"lr_at needs step >= 1, got {step}")
    return sched.d_model ** -0.5 * min(step ** -0.5, step * sched.warmup_steps ** -1.5)


@dataclass
class ClipReport:
    pre_norm: float
    post_norm: float
    scale: float


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> ClipReport:
    """Scale all gradients in place so the global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        total += float((g * g).sum())
    pre = math.sqrt(total)
    scale = 1.0 if pre <= max_norm else max_norm / pre
    if scale != 1.0:
        for g in grads.values():
            g *= scale
    return ClipReport(pre_norm=pre, post_norm=pre * scale, scale=scale)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: list[tuple[str, Tensor]], grads: dict[str, np.ndarray],
                state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam step over every named parameter."""
    state.step += 1
    t = state.step
    for name, p in params:
        g = grads[name]
        if g.shape != p.values.shape:
            raise ShapeError(f"gradient shape {g.shape} vs parameter {name} "
                             f"shape {p.values.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class EarlyStopState:
    patience: int = 2
    min_delta: float = 0.1  # absolute overall F1 points (0-100 scale)
    best: float = -math.inf
    since_improvement: int = 0

    def update(self, current: float) -> bool:
        """Record one dev evaluation; returns whether it counted as improvement."""
        improved = (current - self.best) * 100.0 >= self.min_delta
        if improved:
            self.since_improvement = 0
        else:
            self.since_improvement += 1
        if current > self.best:
            self.best = current
        return improved

    @property
    def should_stop(self) -> bool:
        return self.since_improvement >= self.patience


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of a training run; all keys accepted in config files."""

    seed: int = 0
    total_steps: int = 1000
    batch_size: int = 32
    eval_interval: int = 100
    warmup_steps: int = 400
    lr_scale: float = 1.0
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 2
    min_delta: float = 0.1
    adversarial: bool = True
    lambda_override: float = -1.0  # >= 0 pins lambda to that value
    state_interval: int = 0        # pretrain state snapshots every N steps; 0 = off

    def lam_for(self, progress: float, schedule) -> float:
        if self.lambda_override >= 0.0:
            return self.lambda_override
        if not self.adversarial:
            return 0.0
        return lambda_at(schedule, progress)


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config_file(path) -> dict[str, str]:
    """Flat key=value lines; blank lines and #-comments ignored."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def config_from_sources(file_values: dict[str, str] | None = None,
                        overrides: dict | None = None) -> TrainConfig:
    """Defaults, overridden by config-file values, overridden by CLI flags."""
    known = {f.name: f.type for f in fields(TrainConfig)}
    merged: dict = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in known:
                raise DataError(f"unknown config key {key!r}")
            if isinstance(value, str):
                kind = known[key]
                if kind == "int":
                    value = int(value)
                elif kind == "float":
                    value = float(value)
                elif kind == "bool":
                    if value.lower() not in _BOOL_WORDS:
                        raise DataError(f"bad boolean for {key}: {value!r}")
                    value = _BOOL_WORDS[value.lower()]
            merged[key] = value
    return TrainConfig(**merged)


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _step_line(step, task, task_loss, adv_loss, lam, lr, grad_norm) -> str:
    return "\t".join([str(step), task, _fmt(task_loss), _fmt(adv_loss),
                      _fmt(lam), _fmt(lr), _fmt(grad_norm)])


def _eval_line(step: int, report: MetricsReport) -> str:
    cells = [str(step), "eval"]
    for name in ("COMMA", "PERIOD", "QUESTION"):
        c = report.per_class[name]
        cells += [_fmt(c.precision), _fmt(c.recall), _fmt(c.f1)]
    o = report.overall
    cells += [_fmt(o.precision), _fmt(o.recall), _fmt(o.f1)]
    return "\t".join(cells)


@dataclass
class TrainResult:
    log: list[str] = field(default_factory=list)
    evals: list[tuple[int, MetricsReport]] = field(default_factory=list)
    best_f1: float = -math.inf
    best_checkpoint: Checkpoint | None = None
    stopped_early: bool = False
    diverged: bool = False
    final_step: int = 0

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for line in self.log:
                f.write(line + "\n")


class _BatchCursor:
    """Deterministic per-epoch reshuffled stream over a fixed batch list."""

    def __init__(self, batches: list, seed: int, stream: int):
        if not batches:
            raise DataError("empty corpus for training stream")
        self.batches = batches
        self.seed = seed
        self.stream = stream
        self.count = 0
        self._epoch = -1
        self._order: np.ndarray | None = None

    def next(self):
        n = len(self.batches)
        epoch, idx = divmod(self.count, n)
        if epoch != self._epoch:
            self._order = _rng(self.seed, _BATCH_ORDER, self.stream, epoch).permutation(n)
            self._epoch = epoch
        self.count += 1
        return self.batches[self._order[idx]]


def _optimize(params, adam: AdamState, sched: LrSchedule, cfg: TrainConfig,
              step: int) -> tuple[float, ClipReport]:
    grads = {name: p.grad for name, p in params}
    report = clip_gradients(grads, cfg.clip_norm)
    lr = cfg.lr_scale * lr_at(sched, step)
    adam_update(params, grads, adam, lr)
    for _, p in params:
        p.zero_grad()
    return lr, report


def _maybe_eval(model, dev_seqs, vocab, cfg, step, result, stop, loop_state) -> bool:
    """Run a dev evaluation; track the best checkpoint; return stop flag."""
    report = evaluate(model, dev_seqs, vocab, cfg.batch_size)
    result.log.append(_eval_line(step, report))
    result.evals.append((step, report))
    f1 = report.overall.f1
    if f1 > result.best_f1:
        result.best_f1 = f1
        result.best_checkpoint = model_checkpoint(model, vocab, step=step)
    stop.update(f1)
    return stop.should_stop


def train_punctuation(model: PunctuationTagger | AdversarialModel,
                      train_seqs: list[LabeledSequence],
                      dev_seqs: list[LabeledSequence],
                      vocab: Vocab, cfg: TrainConfig) -> TrainResult:
    """Single-task punctuation training (the plain tagger path)."""
    batches = make_batches(train_seqs, vocab, cfg.batch_size,
                           model.config.encoder.max_len, shuffle_seed=cfg.seed)
    params = model.parameters()
    adam = AdamState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    sched = LrSchedule(model.config.encoder.d_model, cfg.warmup_steps)
    cursor = _BatchCursor(batches, cfg.seed, 0)
    stop = EarlyStopState(cfg.patience, cfg.min_delta)
    result = TrainResult()
    last_good = model_checkpoint(model, vocab, step=0)

    for step in range(1, cfg.total_steps + 1):
        result.final_step = step
        batch = cursor.next()
        tape = Tape(_tape_seed(cfg.seed, step))
        try:
            out = punctuation_forward(tape, model, batch, train=True)
            backward(tape, out.mean_loss)
            lr, clip = _optimize(params, adam, sched, cfg, step)
        except NumericError as exc:
            result.log.append(f"{step}\tdiverged\t{exc}")
            result.diverged = True
            break
        result.log.append(_step_line(step, TASK_PUN, out.mean_loss.item(), 0.0, 0.0,
                                     lr, clip.pre_norm))
        if step % cfg.eval_interval == 0 or step == cfg.total_steps:
            if _maybe_eval(model, dev_seqs, vocab, cfg, step, result, stop, None):
                result.stopped_early = True
                break
            last_good = result.best_checkpoint or last_good
    if result.best_checkpoint is None:
        result.best_checkpoint = last_good
    return result


def train_multitask(model: AdversarialModel,
                    pun_train: list[LabeledSequence],
                    pos_train: list[LabeledSequence] | None,
                    dev_seqs: list[LabeledSequence],
                    vocab: Vocab, cfg: TrainConfig) -> TrainResult:
    """Alternating-task training with the discriminator behind the GRL.

    Tasks are sampled proportionally to corpus sizes. pos_train may be None
    or empty, which degenerates to punctuation-only sampling through the
    identical code path (useful for controlled comparisons).
    """
    max_len = model.config.encoder.max_len
    pun_batches = make_batches(pun_train, vocab, cfg.batch_size, max_len, shuffle_seed=cfg.seed)
    pos_batches = (make_batches(pos_train, vocab, cfg.batch_size, max_len,
                                shuffle_seed=cfg.seed + 1) if pos_train else [])
    weight_pun = (len(pun_train) / (len(pun_train) + len(pos_train))
                  if pos_train else 1.0)
    cursors = {TASK_PUN: _BatchCursor(pun_batches, cfg.seed, 0)}
    if pos_batches:
        cursors[TASK_POS] = _BatchCursor(pos_batches, cfg.seed, 1)

    params = model.parameters()
    adam = AdamState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    sched = LrSchedule(model.config.encoder.d_model, cfg.warmup_steps)
    stop = EarlyStopState(cfg.patience, cfg.min_delta)
    result = TrainResult()
    last_good = model_checkpoint(model, vocab, step=0)

    for step in range(1, cfg.total_steps + 1):
        result.final_step = step
        pick = _rng(cfg.seed, _TASK_PICK, step).random()
        task = TASK_PUN if (TASK_POS not in cursors or pick < weight_pun) else TASK_POS
        batch = cursors[task].next()
        progress = step / cfg.total_steps
        lam = cfg.lam_for(progress, model.schedule)
        tape = Tape(_tape_seed(cfg.seed, step))
        try:
            out = multitask_step(tape, model, batch, progress, train=True, lam=lam)
            backward(tape, out.objective)
            lr, clip = _optimize(params, adam, sched, cfg, step)
        except NumericError as exc:
            result.log.append(f"{step}\tdiverged\t{exc}")
            result.diverged = True
            break
        result.log.append(_step_line(step, task, out.task_loss.item(),
                                     out.adv_loss.item(), out.lam, lr, clip.pre_norm))
        if step % cfg.eval_interval == 0 or step == cfg.total_steps:
            if _maybe_eval(model, dev_seqs, vocab, cfg, step, result, stop, None):
                result.stopped_early = True
                break
            last_good = result.best_checkpoint or last_good
    if result.best_checkpoint is None:
        result.best_checkpoint = last_good
    return result


# --- masked-token pretraining ----------------------------------------------------


@dataclass
class PretrainResult:
    encoder_checkpoint: Checkpoint
    state_checkpoint: Checkpoint
    log: list[str] = field(default_factory=list)
    eval_losses: list[tuple[int, float]] = field(default_factory=list)
    final_step: int = 0
    diverged: bool = False

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for line in self.log:
                f.write(line + "\n")


def _pretrain_state(stack: EncoderStack, head: MlmHead, adam: AdamState,
                    vocab: Vocab, cfg: TrainConfig, step: int) -> Checkpoint:
    entries = {name: t.values.copy() for name, t in stack.parameters() + head.parameters()}
    for name in list(adam.m):
        entries[f"opt.m.{name}"] = adam.m[name].copy()
        entries[f"opt.v.{name}"] = adam.v[name].copy()
    metadata = {
        "scope": "pretrain_state",
        "step": step,
        "adam_step": adam.step,
        "seed": cfg.seed,
        "config": {"encoder": encoder_config_dict(stack.cfg)},
        "vocab_size": stack.vocab_size,
    }
    return Checkpoint(entries, metadata)


def _encoder_checkpoint(stack: EncoderStack, vocab: Vocab, cfg: TrainConfig,
                        step: int) -> Checkpoint:
    entries = {name: t.values.copy() for name, t in stack.parameters()}
    metadata = {
        "scope": "encoder.",
        "model": "encoder",
        "step": step,
        "seed": cfg.seed,
        "config": {"encoder": encoder_config_dict(stack.cfg)},
        "vocab_size": stack.vocab_size,
        "vocab": list(vocab.tokens[3:]),
    }
    return Checkpoint(entries, metadata)


def restore_pretrain_state(state: Checkpoint, stack: EncoderStack, head: MlmHead,
                           adam: AdamState) -> int:
    """Load parameters and optimizer moments; returns the completed step."""
    if state.metadata.get("scope") != "pretrain_state":
        raise DataError("not a pretraining state checkpoint")
    for name, tensor in stack.parameters() + head.parameters():
        tensor.values[:] = state.entries[name]
        adam.m[name] = state.entries[f"opt.m.{name}"].copy()
        adam.v[name] = state.entries[f"opt.v.{name}"].copy()
    adam.step = int(state.metadata["adam_step"])
    return int(state.metadata["step"])


def pretrain(stack: EncoderStack, head: MlmHead, corpus: list[LabeledSequence],
             vocab: Vocab, cfg: TrainConfig,
             resume_from: Checkpoint | None = None) -> PretrainResult:
    """Masked-token pretraining of the encoder; emits an encoder-only
    checkpoint for transfer plus a full state checkpoint for resuming."""
    if not corpus:
        raise DataError("pretraining corpus is empty")
    batches = make_batches(corpus, vocab, cfg.batch_size, stack.cfg.max_len,
                           shuffle_seed=cfg.seed)
    params = stack.parameters() + head.parameters()
    adam = AdamState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    sched = LrSchedule(stack.cfg.d_model, cfg.warmup_steps)
    cursor = _BatchCursor(batches, cfg.seed, 0)
    start_step = 0
    if resume_from is not None:
        start_step = restore_pretrain_state(resume_from, stack, head, adam)
        cursor.count = start_step

    result = PretrainResult(encoder_checkpoint=None, state_checkpoint=None)
    window: list[float] = []
    for step in range(start_step + 1, cfg.total_steps + 1):
        result.final_step = step
        batch = cursor.next()
        tape = Tape(_tape_seed(cfg.seed, step))
        try:
            loss = mlm_loss(tape, stack, head, batch.ids, batch.mask,
                            _rng(cfg.seed, _MLM_MASK, step), train=True)
            backward(tape, loss)
            lr, clip = _optimize(params, adam, sched, cfg, step)
        except NumericError as exc:
            result.log.append(f"{step}\tdiverged\t{exc}")
            result.diverged = True
            break
        value = loss.item()
        window.append(value)
        result.log.append(_step_line(step, "MLM", value, 0.0, 0.0, lr, clip.pre_norm))
        if step % cfg.eval_interval == 0 or step == cfg.total_steps:
            mean = float(np.mean(window))
            window.clear()
            result.eval_losses.append((step, mean))
            result.log.append(f"{step}\teval-mlm\t{_fmt(mean)}")
    result.encoder_checkpoint = _encoder_checkpoint(stack, vocab, cfg, result.final_step)
    result.state_checkpoint = _pretrain_state(stack, head, adam, vocab, cfg, result.final_step)
    return result
