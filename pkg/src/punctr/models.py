"""Model assembly: the punctuation tagger (encoder + BLSTM-CRF head), the
adversarial two-task model, the masked-token pretraining head, parameter
transfer from checkpoints, and decode-time prediction that touches nothing
but the encoder and the punctuation head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adversarial import (Discriminator, LambdaSchedule, adversarial_loss,
                          grl, lambda_at, total_loss)
from .autodiff import Tape, Tensor
from .checkpoint import Checkpoint
from .crf import CrfParams, crf_nll_batch, viterbi_decode
from .data import (MASK_ID, POS_TAGS, PUNCT_LABELS, TASK_IDS, TASK_POS,
                   TASK_PUN, Batch, Vocab)
from .errors import ContractError, DataError, SkipBatch, TransferError
from .layers import (Blstm, EncoderConfig, EncoderStack, Linear, LstmConfig,
                     encoder_forward, max_pool_over_time)

NUM_PUNCT_LABELS = len(PUNCT_LABELS)
NUM_POS_LABELS = len(POS_TAGS)


def encoder_config_dict(cfg: EncoderConfig) -> dict:
    return {
        "num_layers": cfg.num_layers,
        "num_heads": cfg.num_heads,
        "d_model": cfg.d_model,
        "d_ff": cfg.d_ff,
        "max_len": cfg.max_len,
        "dropout_rate": cfg.dropout_rate,
    }


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lstm: LstmConfig = field(default_factory=LstmConfig)
    bridge_dim: int | None = None  # defaults to the LSTM projection width
    discriminator_hidden: int = 1024
    gamma: float = 10.0

    @property
    def bridge(self) -> int:
        return self.bridge_dim if self.bridge_dim is not None else self.lstm.projection_dim

    def to_dict(self) -> dict:
        return {
            "encoder": encoder_config_dict(self.encoder),
            "lstm": {
                "num_cells": self.lstm.num_cells,
                "projection_dim": self.lstm.projection_dim,
                "cell_clip": list(self.lstm.cell_clip),
                "init_range": list(self.lstm.init_range),
            },
            "bridge_dim": self.bridge,
            "discriminator_hidden": self.discriminator_hidden,
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = d["encoder"]
        lstm = d["lstm"]
        return cls(
            encoder=EncoderConfig(
                num_layers=enc["num_layers"], num_heads=enc["num_heads"],
                d_model=enc["d_model"], d_ff=enc["d_ff"], max_len=enc["max_len"],
                dropout_rate=enc["dropout_rate"],
            ),
            lstm=LstmConfig(
                num_cells=lstm["num_cells"], projection_dim=lstm["projection_dim"],
                cell_clip=tuple(lstm["cell_clip"]), init_range=tuple(lstm["init_range"]),
            ),
            bridge_dim=d["bridge_dim"],
            discriminator_hidden=d["discriminator_hidden"],
            gamma=d.get("gamma", 10.0),
        )


class TaggerHead:
    """Task-private classifier: bridge linear, BLSTM, emission linear, CRF."""

    def __init__(self, cfg: ModelConfig, num_labels: int, rng: np.random.Generator, name: str):
        self.num_labels = num_labels
        self.bridge = Linear(cfg.encoder.d_model, cfg.bridge, rng, f"{name}.bridge")
        self.blstm = Blstm(cfg.bridge, cfg.lstm, rng, f"{name}.blstm")
        self.emit = Linear(2 * cfg.lstm.projection_dim, num_labels, rng, f"{name}.emit")
        self.crf = CrfParams(num_labels, f"{name}.crf")

    def emissions(self, tape: Tape, encoded: Tensor, lengths: np.ndarray) -> Tensor:
        h = self.bridge(tape, encoded)
        h = self.blstm(tape, h, lengths)
        return self.emit(tape, h)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return (self.bridge.parameters() + self.blstm.parameters()
                + self.emit.parameters() + self.crf.parameters())


def _fresh_counters() -> dict[str, int]:
    return {"pun_head_forward": 0, "pos_head_forward": 0, "discriminator_forward": 0}


class PunctuationTagger:
    """Encoder feeding a single punctuation BLSTM-CRF head."""

    kind = "punctuation_tagger"

    def __init__(self, cfg: ModelConfig, vocab_size: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.vocab_size = vocab_size
        self.seed = seed
        self.encoder = EncoderStack(cfg.encoder, vocab_size, rng)
        self.pun_head = TaggerHead(cfg, NUM_PUNCT_LABELS, rng, "pun_head")
        self.counters = _fresh_counters()

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.encoder.parameters() + self.pun_head.parameters()


class AdversarialModel:
    """Shared encoder, punctuation and POS heads, and a task discriminator."""

    kind = "adversarial"

    def __init__(self, cfg: ModelConfig, vocab_size: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.vocab_size = vocab_size
        self.seed = seed
        self.encoder = EncoderStack(cfg.encoder, vocab_size, rng)
        self.pun_head = TaggerHead(cfg, NUM_PUNCT_LABELS, rng, "pun_head")
        self.pos_head = TaggerHead(cfg, NUM_POS_LABELS, rng, "pos_head")
        self.discriminator = Discriminator(cfg.encoder.d_model, num_tasks=2,
                                           hidden_dim=cfg.discriminator_hidden, rng=rng)
        self.schedule = LambdaSchedule(gamma=cfg.gamma)
        self.counters = _fresh_counters()

    def head_for(self, task: str) -> TaggerHead:
        if task == TASK_PUN:
            return self.pun_head
        if task == TASK_POS:
            return self.pos_head
        raise ContractError(f"unknown task {task!r}")

    def parameters(self) -> list[tuple[str, Tensor]]:
        return (self.encoder.parameters() + self.pun_head.parameters()
                + self.pos_head.parameters() + self.discriminator.parameters())


class MlmHead:
    """Projection to vocabulary logits for masked-token pretraining, untied
    from the embedding table. Masking policy: 15% of positions per sequence
    (at least one); of those 80% become the mask token, 10% a random token,
    10% stay unchanged."""

    def __init__(self, d_model: int, vocab_size: int, rng: np.random.Generator,
                 mask_rate: float = 0.15, mask_token_share: float = 0.8,
                 random_token_share: float = 0.1):
        self.vocab_size = vocab_size
        self.mask_rate = mask_rate
        self.mask_token_share = mask_token_share
        self.random_token_share = random_token_share
        self.proj = Linear(d_model, vocab_size, rng, "mlm.proj")

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.proj.parameters()

    def corrupt(self, ids: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
        """Apply the masking policy; returns (corrupted ids, loss-position bool map)."""
        corrupted = ids.copy()
        targets = np.zeros_like(mask)
        for row in range(ids.shape[0]):
            positions = np.flatnonzero(mask[row])
            if positions.size == 0:
                continue
            count = max(1, int(round(self.mask_rate * positions.size)))
            chosen = rng.choice(positions, size=count, replace=False)
            for pos in chosen:
                targets[row, pos] = True
                roll = rng.random()
                if roll < self.mask_token_share:
                    corrupted[row, pos] = MASK_ID
                elif roll < self.mask_token_share + self.random_token_share:
                    # random replacement never picks a special token
                    corrupted[row, pos] = rng.integers(MASK_ID + 1, self.vocab_size)
        if not targets.any():
            raise SkipBatch("no maskable positions in batch")
        return corrupted, targets


def mlm_loss(tape: Tape, encoder: EncoderStack, head: MlmHead, ids: np.ndarray,
             mask: np.ndarray, rng: np.random.Generator, train: bool = True) -> Tensor:
    """Mean negative log-likelihood of the true tokens at masked positions."""
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    corrupted, targets = head.corrupt(ids, mask, rng)
    encoded = encoder_forward(tape, encoder, corrupted, mask, train)
    logits = head.proj(tape, encoded)
    log_probs = ad.log_softmax(tape, logits, axis=-1)
    pick = np.zeros(logits.values.shape)
    rows, cols = np.nonzero(targets)
    pick[rows, cols, ids[rows, cols]] = 1.0
    total = ad.sum_(tape, ad.mul(tape, log_probs, Tensor(pick)))
    return ad.mul(tape, total, -1.0 / rows.size)


# --- batched task forwards ------------------------------------------------------


@dataclass
class TaggingOutput:
    losses: np.ndarray                 # per-sequence NLL values, shape [B]
    mean_loss: Tensor                  # scalar on the tape
    predictions: list[list[int]] | None


def _head_emissions(tape: Tape, model, head: TaggerHead, counter: str,
                    batch: Batch, train: bool):
    encoded = encoder_forward(tape, model.encoder, batch.ids, batch.mask, train)
    model.counters[counter] += 1
    return encoded, head.emissions(tape, encoded, batch.lengths)


def punctuation_forward(tape: Tape, model, batch: Batch, train: bool = False,
                        decode: bool = False) -> TaggingOutput:
    """Per-sequence CRF NLL for a punctuation batch; Viterbi labels when
    decode is set (eval only). Padded positions never enter the chains."""
    if batch.task != TASK_PUN:
        raise ContractError(f"punctuation_forward got a {batch.task} batch")
    _, emissions = _head_emissions(tape, model, model.pun_head, "pun_head_forward",
                                   batch, train)
    nll = crf_nll_batch(tape, emissions, batch.labels, model.pun_head.crf, batch.lengths)
    mean = ad.mul(tape, ad.sum_(tape, nll), 1.0 / batch.size)
    predictions = None
    if decode:
        predictions = [
            viterbi_decode(emissions.values[b, :batch.lengths[b]], model.pun_head.crf)
            for b in range(batch.size)
        ]
    return TaggingOutput(nll.values.copy(), mean, predictions)


@dataclass
class MultitaskStep:
    task: str
    lam: float
    task_loss: Tensor       # mean head NLL, scalar on the tape
    adv_loss: Tensor        # mean discriminator NLL, scalar on the tape
    total: Tensor           # reported task + lambda * adv
    objective: Tensor       # backprop target: task + adv (GRL carries lambda)


def multitask_step(tape: Tape, model: AdversarialModel, batch: Batch,
                   progress: float, train: bool = True,
                   lam: float | None = None) -> MultitaskStep:
    """One adversarial training forward: route the batch to its task head,
    pool the shared output, and charge the discriminator on this batch's
    task label behind the gradient reversal layer.

    Backward should run on `objective` = task + adv: the reversal layer
    scales only the gradient entering the shared encoder by -lambda, so the
    discriminator itself always trains at full strength, while `total`
    reports the conventional task + lambda * adv value. lam, when given,
    overrides the schedule (used for plain multi-task training).
    """
    if lam is None:
        lam = lambda_at(model.schedule, progress)
    head = model.head_for(batch.task)
    counter = "pun_head_forward" if batch.task == TASK_PUN else "pos_head_forward"
    encoded, emissions = _head_emissions(tape, model, head, counter, batch, train)
    nll = crf_nll_batch(tape, emissions, batch.labels, head.crf, batch.lengths)
    task_loss = ad.mul(tape, ad.sum_(tape, nll), 1.0 / batch.size)

    pooled = max_pool_over_time(tape, encoded, batch.mask)
    model.counters["discriminator_forward"] += 1
    adv = adversarial_loss(tape, grl(tape, pooled, lam), TASK_IDS[batch.task],
                           model.discriminator)
    return MultitaskStep(
        task=batch.task,
        lam=lam,
        task_loss=task_loss,
        adv_loss=adv,
        total=total_loss(tape, task_loss, adv, lam),
        objective=ad.add(tape, task_loss, adv),
    )


def predict_punctuation(model, ids: np.ndarray) -> list[int]:
    """Decode punctuation labels for one token-id sequence.

    Only the encoder and the punctuation head run; the POS head and the
    discriminator are never touched (their forward counters stay put).
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return []
    tape = Tape()
    mask = np.ones((1, ids.size), dtype=bool)
    encoded = encoder_forward(tape, model.encoder, ids[None, :], mask, train=False)
    model.counters["pun_head_forward"] += 1
    emissions = model.pun_head.emissions(tape, encoded, np.array([ids.size]))
    return viterbi_decode(emissions.values[0], model.pun_head.crf)


# --- checkpoints and parameter transfer -------------------------------------------


def model_checkpoint(model, vocab: Vocab | None = None, step: int = 0,
                     only_prefix: str | None = None, extra: dict | None = None) -> Checkpoint:
    """Snapshot (a prefix of) the model's parameters plus a config echo."""
    entries = {
        name: tensor.values.copy()
        for name, tensor in model.parameters()
        if only_prefix is None or name.startswith(only_prefix)
    }
    metadata = {
        "model": model.kind,
        "config": model.config.to_dict(),
        "vocab_size": model.vocab_size,
        "seed": model.seed,
        "step": step,
        "scope": only_prefix or "full",
    }
    if vocab is not None:
        metadata["vocab"] = list(vocab.tokens[3:])
    if extra:
        metadata.update(extra)
    return Checkpoint(entries, metadata)


@dataclass
class TransferReport:
    transferred: list[str]
    skipped: list[str]

    def __str__(self) -> str:
        return f"transferred {len(self.transferred)} tensors, skipped {len(self.skipped)}"


def transfer_encoder_params(ckpt: Checkpoint, target) -> TransferReport:
    """Copy every encoder-scoped tensor from the checkpoint into the target,
    leaving head/discriminator parameters at their fresh initialization."""
    params = dict(target.parameters())
    encoder_names = sorted(n for n in params if n.startswith("encoder."))
    for name in encoder_names:
        if name not in ckpt.entries:
            raise TransferError(f"checkpoint is missing encoder entry {name}")
        src = ckpt.entries[name]
        if src.shape != params[name].values.shape:
            raise TransferError(
                f"shape mismatch for {name}: checkpoint {src.shape} vs model "
                f"{params[name].values.shape}"
            )
    meta_cfg = ckpt.metadata.get("config", {}).get("encoder")
    if meta_cfg is not None and meta_cfg != target.config.to_dict()["encoder"]:
        raise TransferError(
            f"encoder config mismatch: checkpoint {meta_cfg} vs model "
            f"{target.config.to_dict()['encoder']}"
        )
    for name in encoder_names:
        params[name].values[:] = ckpt.entries[name]
    skipped = sorted(set(params) - set(encoder_names))
    return TransferReport(transferred=encoder_names, skipped=skipped)


def save_model(path, model, vocab: Vocab | None = None, step: int = 0,
               extra: dict | None = None) -> Checkpoint:
    ckpt = model_checkpoint(model, vocab=vocab, step=step, extra=extra)
    ckpt.save(path)
    return ckpt


def load_model(path):
    """Rebuild a model (and its vocabulary, if stored) from a full checkpoint."""
    ckpt = Checkpoint.load(path)
    if ckpt.metadata.get("scope") != "full":
        raise DataError(f"{path}: not a full model checkpoint "
                        f"(scope={ckpt.metadata.get('scope')!r})")
    cfg = ModelConfig.from_dict(ckpt.metadata["config"])
    cls = {PunctuationTagger.kind: PunctuationTagger,
           AdversarialModel.kind: AdversarialModel}[ckpt.metadata["model"]]
    model = cls(cfg, ckpt.metadata["vocab_size"], seed=ckpt.metadata.get("seed", 0))
    params = dict(model.parameters())
    for name, tensor in params.items():
        if name not in ckpt.entries:
            raise DataError(f"{path}: checkpoint missing parameter {name}")
        tensor.values[:] = ckpt.entries[name]
    vocab = Vocab(ckpt.metadata["vocab"]) if "vocab" in ckpt.metadata else None
    return model, vocab
