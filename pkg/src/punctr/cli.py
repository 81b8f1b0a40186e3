"""Command-line surface tying the stages together.

Subcommands: prepare-data, pretrain, train, train-adversarial, evaluate,
predict. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric or
divergence error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .data import (SynthGrammar, Vocab, build_vocab, read_pun_corpus,
                   read_pos_corpus, synth_corpus, write_pos_corpus,
                   write_pun_corpus)
from .errors import (ContractError, DataError, NumericError, ShapeError,
                     TransferError, UsageError)
from .layers import EncoderConfig, EncoderStack, LstmConfig
from .metrics import evaluate, restore
from .models import (AdversarialModel, MlmHead, ModelConfig, PunctuationTagger,
                     load_model, transfer_encoder_params)
from .training import (TrainConfig, config_from_sources, parse_config_file,
                       pretrain, train_multitask, train_punctuation)


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: Parser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", type=str, default=None, help="key=value config file")
    p.add_argument("--out-dir", type=str, default=".")


def _add_model_flags(p: Parser) -> None:
    p.add_argument("--num-layers", type=int, default=2)
    p.add_argument("--num-heads", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--lstm-cells", type=int, default=48)
    p.add_argument("--lstm-projection", type=int, default=24)
    p.add_argument("--disc-hidden", type=int, default=1024)


def _add_train_flags(p: Parser) -> None:
    p.add_argument("--total-steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--eval-interval", type=int, default=None)
    p.add_argument("--warmup-steps", type=int, default=None)
    p.add_argument("--lr-scale", type=float, default=None)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--min-delta", type=float, default=None)


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(num_layers=args.num_layers, num_heads=args.num_heads,
                              d_model=args.d_model, d_ff=args.d_ff,
                              max_len=args.max_len, dropout_rate=args.dropout),
        lstm=LstmConfig(num_cells=args.lstm_cells, projection_dim=args.lstm_projection),
        discriminator_hidden=args.disc_hidden,
    )


def _train_config(args, extra: dict | None = None) -> TrainConfig:
    file_values = parse_config_file(args.config) if args.config else None
    overrides = {
        "seed": args.seed,
        "total_steps": getattr(args, "total_steps", None),
        "batch_size": getattr(args, "batch_size", None),
        "eval_interval": getattr(args, "eval_interval", None),
        "warmup_steps": getattr(args, "warmup_steps", None),
        "lr_scale": getattr(args, "lr_scale", None),
        "clip_norm": getattr(args, "clip_norm", None),
        "patience": getattr(args, "patience", None),
        "min_delta": getattr(args, "min_delta", None),
    }
    if extra:
        overrides.update(extra)
    return config_from_sources(file_values, overrides)


def build_parser() -> Parser:
    parser = Parser(prog="punctr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("prepare-data", help="generate the synthetic paired corpora")
    _add_common(p)
    p.add_argument("--train-size", type=int, default=2000)
    p.add_argument("--dev-size", type=int, default=400)
    p.add_argument("--min-count", type=int, default=1)

    p = sub.add_parser("pretrain", help="masked-token pretraining of the encoder")
    _add_common(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--corpus", type=str, nargs="+", required=True,
                   help="plain punctuated text files, one sentence per line")
    p.add_argument("--vocab", type=str, required=True)
    p.add_argument("--resume-from", type=str, default=None)

    p = sub.add_parser("train", help="train the single-task punctuation tagger")
    _add_common(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--train", type=str, required=True)
    p.add_argument("--dev", type=str, required=True)
    p.add_argument("--vocab", type=str, required=True)
    p.add_argument("--init-from", type=str, default=None,
                   help="encoder checkpoint to transfer parameters from")

    p = sub.add_parser("train-adversarial",
                       help="adversarial two-task training with the POS auxiliary")
    _add_common(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--train", type=str, required=True)
    p.add_argument("--dev", type=str, required=True)
    p.add_argument("--pos-corpus", type=str, required=True)
    p.add_argument("--vocab", type=str, required=True)
    p.add_argument("--init-from", type=str, default=None)
    p.add_argument("--adversarial", choices=["true", "false"], default="true",
                   help="false trains the plain multi-task model (lambda pinned to 0)")

    p = sub.add_parser("evaluate", help="score a model on a labeled corpus")
    _add_common(p)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--corpus", type=str, required=True)
    p.add_argument("--format", choices=["table", "json"], default="table")

    p = sub.add_parser("predict", help="restore punctuation in raw text")
    _add_common(p)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--text", type=str, default=None)
    p.add_argument("--input", type=str, default=None, help="file of raw text lines")
    p.add_argument("--format", choices=["text", "tsv"], default="text")

    return parser


def _cmd_prepare_data(args) -> int:
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grammar = SynthGrammar()
    pun_train, pos_train = synth_corpus(seed, args.train_size, grammar)
    pun_dev, pos_dev = synth_corpus(seed + 1, args.dev_size, grammar)
    write_pun_corpus(out / "pun_train.txt", pun_train)
    write_pun_corpus(out / "pun_dev.txt", pun_dev)
    write_pos_corpus(out / "pos_train.txt", pos_train)
    write_pos_corpus(out / "pos_dev.txt", pos_dev)
    vocab = build_vocab([pun_train, pos_train], min_count=args.min_count)
    vocab.save(out / "vocab.txt")
    print(f"wrote {args.train_size} train / {args.dev_size} dev sentences per task "
          f"and a {len(vocab)}-token vocabulary to {out}")
    return 0


def _cmd_pretrain(args) -> int:
    seed = args.seed if args.seed is not None else 0
    cfg = _train_config(args)
    vocab = Vocab.load(args.vocab)
    corpus = []
    for path in args.corpus:
        corpus.extend(read_pun_corpus(path))
    rng = np.random.default_rng(seed)
    stack = EncoderStack(_model_config(args).encoder, len(vocab), rng)
    head = MlmHead(args.d_model, len(vocab), rng)
    resume = Checkpoint.load(args.resume_from) if args.resume_from else None
    result = pretrain(stack, head, corpus, vocab, cfg, resume_from=resume)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.encoder_checkpoint.save(out / "encoder.ckpt")
    result.state_checkpoint.save(out / "pretrain_state.ckpt")
    result.write_log(out / "pretrain.log")
    if result.diverged:
        raise NumericError("pretraining diverged; state up to the last good step saved")
    final = result.eval_losses[-1][1] if result.eval_losses else float("nan")
    print(f"pretrained {result.final_step} steps; mean masked-token loss {final:.4f}; "
          f"wrote {out / 'encoder.ckpt'}")
    return 0


def _run_training(args, adversarial_cmd: bool) -> int:
    seed = args.seed if args.seed is not None else 0
    vocab = Vocab.load(args.vocab)
    train_seqs = read_pun_corpus(args.train)
    dev_seqs = read_pun_corpus(args.dev)
    model_cfg = _model_config(args)
    if adversarial_cmd:
        pos_seqs = read_pos_corpus(args.pos_corpus)
        cfg = _train_config(args, {"adversarial": args.adversarial})
        model = AdversarialModel(model_cfg, len(vocab), seed=seed)
    else:
        pos_seqs = None
        cfg = _train_config(args)
        model = PunctuationTagger(model_cfg, len(vocab), seed=seed)
    if args.init_from:
        report = transfer_encoder_params(Checkpoint.load(args.init_from), model)
        print(f"initialized encoder from {args.init_from}: {report}")
    if adversarial_cmd:
        result = train_multitask(model, train_seqs, pos_seqs, dev_seqs, vocab, cfg)
    else:
        result = train_punctuation(model, train_seqs, dev_seqs, vocab, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.write_log(out / "train.log")
    result.best_checkpoint.save(out / "best.ckpt")
    if result.diverged:
        raise NumericError("training diverged; best checkpoint before divergence saved")
    print(f"trained {result.final_step} steps; best dev overall F1 {result.best_f1:.4f}; "
          f"wrote {out / 'best.ckpt'}")
    return 0


def _cmd_evaluate(args) -> int:
    model, vocab = load_model(args.model)
    if vocab is None:
        raise DataError(f"{args.model} does not embed a vocabulary")
    corpus = read_pun_corpus(args.corpus)
    report = evaluate(model, corpus, vocab)
    if args.format == "json":
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        print(report.format_table())
    return 0


def _cmd_predict(args) -> int:
    if (args.text is None) == (args.input is None):
        raise UsageError("predict needs exactly one of --text or --input")
    model, vocab = load_model(args.model)
    if vocab is None:
        raise DataError(f"{args.model} does not embed a vocabulary")
    lines = [args.text] if args.text is not None else [
        line for line in Path(args.input).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    for line in lines:
        out = restore(model, vocab, line)
        if args.format == "tsv":
            for word, label in zip(out.words, out.labels):
                print(f"{word}\t{label}")
            print()
        else:
            print(out.text)
    return 0


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "prepare-data":
            return _cmd_prepare_data(args)
        if args.command == "pretrain":
            return _cmd_pretrain(args)
        if args.command == "train":
            return _run_training(args, adversarial_cmd=False)
        if args.command == "train-adversarial":
            return _run_training(args, adversarial_cmd=True)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        if args.command == "predict":
            return _cmd_predict(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, TransferError, ShapeError, ContractError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
