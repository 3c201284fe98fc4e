"""Operator entry point: data generation, training, inference, evaluation,
gradient checks and attention dumps.

Configuration lives in a JSON file with "model" / "train" / "data" sections
(unknown keys are rejected); command-line flags override file values.  Exit
codes: 0 success, 1 usage, 2 validation, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger("kvgen")

USAGE_EXIT, VALIDATION_EXIT, RUNTIME_EXIT = 1, 2, 3


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(USAGE_EXIT)


class ValidationFailure(ValueError):
    pass


@dataclass
class DataPaths:
    train: str | None = None
    val: str | None = None
    test: str | None = None
    vocab: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "DataPaths":
        unknown = set(d) - {"train", "val", "test", "vocab"}
        if unknown:
            raise ValidationFailure(f"data: unknown keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunConfig:
    model: "ModelConfig"
    train: "TrainConfig"
    data: DataPaths = field(default_factory=DataPaths)
    checkpoint: str | None = None
    log_file: str | None = None

    @classmethod
    def load(cls, path) -> "RunConfig":
        from .model import ModelConfig
        from .training import TrainConfig
        raw = json.loads(Path(path).read_text())
        unknown = set(raw) - {"model", "train", "data", "checkpoint", "log_file"}
        if unknown:
            raise ValidationFailure(f"config: unknown keys {sorted(unknown)}")
        try:
            model = ModelConfig.from_dict(raw.get("model", {}))
            train = TrainConfig.from_dict(raw.get("train", {}))
        except (TypeError, ValueError) as e:
            raise ValidationFailure(str(e)) from None
        return cls(model=model, train=train,
                   data=DataPaths.from_dict(raw.get("data", {})),
                   checkpoint=raw.get("checkpoint"), log_file=raw.get("log_file"))


def _apply_overrides(cfg: RunConfig, args) -> None:
    for name in ("lr", "batch_size", "epochs", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg.train, name, value)
    if getattr(args, "tasks", None):
        cfg.train.tasks = tuple(args.tasks.split(","))
        from .objectives import TASKS
        unknown = set(cfg.train.tasks) - set(TASKS)
        if unknown:
            raise ValidationFailure(f"unknown tasks {sorted(unknown)}")
    if getattr(args, "checkpoint", None):
        cfg.checkpoint = args.checkpoint
    if getattr(args, "log_file", None):
        cfg.log_file = args.log_file


def cmd_gen_data(args) -> int:
    from .documents import save_dataset, shuffle_fragments
    from .synth import NoiseSpec, gen_synthetic_corpus
    from .vocab import build_vocab
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    noise = NoiseSpec(char_sub_rate=args.ocr_noise, seed=args.seed) \
        if args.ocr_noise > 0 else None
    splits = {}
    for split, count, offset in (("train", args.n, 0), ("val", args.n_val, 1),
                                 ("test", args.n_test, 2)):
        if count == 0:
            continue
        docs = gen_synthetic_corpus(
            seed=args.seed + offset, n_docs=count, template=args.template,
            noise=noise, unseen_key_fraction=args.unseen_key_fraction if
            split == "test" else 0.0, id_prefix=split)
        if split == "test" and args.shuffle_test:
            docs = [shuffle_fragments(d, args.seed + 1000 + i)
                    for i, d in enumerate(docs)]
        save_dataset(docs, out / f"{split}.json")
        splits[split] = docs
        log.info("wrote %s (%d documents)", out / f"{split}.json", count)
    vocab_source = splits.get("train") or next(iter(splits.values()))
    vocab = build_vocab(vocab_source, max_size=args.vocab_size,
                        min_count=args.vocab_min_count)
    vocab.save(out / "vocab.json")
    log.info("wrote %s (%d tokens)", out / "vocab.json", len(vocab))
    return 0


def _load_training_inputs(cfg: RunConfig):
    from .documents import load_dataset
    from .vocab import Vocab
    if not cfg.data.train or not cfg.data.vocab:
        raise ValidationFailure("config needs data.train and data.vocab")
    train_docs = load_dataset(cfg.data.train)
    val_docs = load_dataset(cfg.data.val) if cfg.data.val else None
    vocab = Vocab.load(cfg.data.vocab)
    if cfg.model.vocab_size != len(vocab):
        raise ValidationFailure(f"model.vocab_size={cfg.model.vocab_size} but "
                                f"vocab file has {len(vocab)} tokens")
    return train_docs, val_docs, vocab


def _run_training(args, default_tasks=None) -> int:
    from .model import KVGenModel
    from .training import load_checkpoint, train, TrainState
    cfg = RunConfig.load(args.config)
    _apply_overrides(cfg, args)
    if default_tasks is not None and not getattr(args, "tasks", None):
        cfg.train.tasks = default_tasks
    train_docs, val_docs, vocab = _load_training_inputs(cfg)
    if args.resume:
        model, state = load_checkpoint(args.resume)
        log.info("resumed from %s at epoch %d", args.resume, state.epochs_done)
    else:
        model = KVGenModel.init(cfg.model, seed=cfg.train.seed)
        state = None
    state = train(model, vocab, train_docs, cfg.train, val_docs=val_docs,
                  log_path=cfg.log_file, checkpoint_path=cfg.checkpoint,
                  state=state)
    last = state.history[-1] if state.history else {}
    print(json.dumps({"epochs_done": state.epochs_done, **last}))
    return 0


def cmd_pretrain(args) -> int:
    return _run_training(args)


def cmd_finetune(args) -> int:
    return _run_training(args, default_tasks=("s2s",))


def cmd_infer(args) -> int:
    from .documents import load_dataset, parse_generated
    from .training import load_checkpoint
    from .vocab import Vocab
    model, _ = load_checkpoint(args.checkpoint)
    vocab = Vocab.load(args.vocab)
    docs = load_dataset(args.data)
    records = []
    for doc in docs:
        sb = model.prepare_source(doc, vocab, order=args.order)
        tokens = model.generate(sb, vocab)
        pairs, malformed = parse_generated(vocab.decode(tokens))
        records.append({"id": doc.id,
                        "pairs": [{"key": p.key, "value": p.value} for p in pairs],
                        "malformed_segments": malformed})
    Path(args.out).write_text(json.dumps({"predictions": records}, indent=1))
    log.info("wrote %s (%d documents)", args.out, len(records))
    return 0


def cmd_eval(args) -> int:
    from .documents import KVPair, load_dataset
    from .evaluation import entity_f1, write_report
    gold_docs = load_dataset(args.gold)
    raw = json.loads(Path(args.pred).read_text())
    by_id = {r["id"]: r for r in raw.get("predictions", [])}
    preds, malformed = [], 0
    for doc in gold_docs:
        record = by_id.get(doc.id)
        if record is None:
            raise ValidationFailure(f"no prediction for document {doc.id!r}")
        preds.append([KVPair(p["key"], p["value"]) for p in record["pairs"]])
        malformed += record.get("malformed_segments", 0)
    report = entity_f1(preds, [d.gold_pairs for d in gold_docs],
                       collapse_ws=not args.strict, case_fold=args.case_fold,
                       malformed_segments=malformed)
    write_report(report, args.out)
    print(json.dumps({"precision": report.precision, "recall": report.recall,
                      "f1": report.f1}))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_kernel_suite
    from .model import KVGenModel, ModelConfig
    from .synth import gen_synthetic_corpus
    from .vocab import build_vocab
    from . import ops
    from .gradcheck import grad_check
    from .tensor import Tensor
    results = run_kernel_suite(seed=args.seed, points=args.points)

    # full toy model: loss as a function of selected parameter tensors
    docs = gen_synthetic_corpus(seed=args.seed + 7, n_docs=2)
    vocab = build_vocab(docs, max_size=400)
    cfg = ModelConfig(vocab_size=len(vocab), n_layers=2, d_h=8, n_heads=2,
                      max_src_len=128, max_tgt_len=32, dropout=0.0)
    model = KVGenModel.init(cfg, seed=args.seed, init_scale=0.2)
    sb = model.prepare_source(docs[0], vocab)
    tgt = [vocab.beg_id] + vocab.encode("total : 15")
    targets = np.array(tgt[1:] + [vocab.sep_id])

    def model_loss_wrt(name):
        def f(t):
            model.params[name] = t
            logits = model.forward_teacher_forced(sb, tgt)
            return ops.cross_entropy(logits, targets)
        return f

    for name in ("map.x", "layer1.sem.wq", "shared.y.wv", "embed.token"):
        point = Tensor(model.params[name].data.copy())
        results[f"model[{name}]"] = grad_check(model_loss_wrt(name), point)

    failed = False
    for name in sorted(results):
        err = results[name]
        status = "ok" if err <= args.tolerance else "FAIL"
        failed |= err > args.tolerance
        print(f"{name:24s} max_rel_err={err:.3e} {status}")
    return RUNTIME_EXIT if failed else 0


def cmd_attn_dump(args) -> int:
    from .documents import load_dataset, serialize_target
    from .training import load_checkpoint
    from .vocab import Vocab
    model, _ = load_checkpoint(args.checkpoint)
    vocab = Vocab.load(args.vocab)
    docs = load_dataset(args.data)
    if not 0 <= args.doc_index < len(docs):
        raise ValidationFailure(f"doc index {args.doc_index} out of range "
                                f"[0, {len(docs)})")
    doc = docs[args.doc_index]
    sb = model.prepare_source(doc, vocab, order=args.order)
    if doc.gold_pairs:
        tgt = [vocab.beg_id] + vocab.encode(
            serialize_target(doc.gold_pairs, args.target_mode))
    else:
        tgt = [vocab.beg_id] + model.generate(sb, vocab)
    dump = model.export_attention(sb, tgt, vocab, layer=args.layer, head=args.head)
    payload = {"layer": dump["layer"], "head": dump["head"],
               "labels": dump["labels"],
               "maps": {k: v.tolist() for k, v in dump["maps"].items()}}
    Path(args.out).write_text(json.dumps(payload))
    log.info("wrote %s", args.out)
    return 0


def build_parser() -> CliParser:
    parser = CliParser(prog="kvgen",
                       description="generative key-value extraction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--template", choices=("receipt", "form"), default="receipt")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--n-val", type=int, default=16)
    p.add_argument("--n-test", type=int, default=16)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--shuffle-test", action="store_true")
    p.add_argument("--ocr-noise", type=float, default=0.0)
    p.add_argument("--unseen-key-fraction", type=float, default=0.0)
    p.add_argument("--vocab-size", type=int, default=1300)
    p.add_argument("--vocab-min-count", type=int, default=1)
    p.set_defaults(fn=cmd_gen_data)

    for name, fn in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} a model per the config file")
        p.add_argument("--config", required=True)
        p.add_argument("--resume")
        p.add_argument("--tasks")
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--checkpoint")
        p.add_argument("--log-file", dest="log_file")
        p.set_defaults(fn=fn)

    p = sub.add_parser("infer", help="generate key-value pairs for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--order", choices=("spatial", "given"), default="spatial")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against gold pairs")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true",
                   help="disable whitespace normalization")
    p.add_argument("--case-fold", action="store_true", dest="case_fold")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all kernels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("attn-dump", help="export attention maps as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--doc-index", type=int, default=0, dest="doc_index")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--order", choices=("spatial", "given"), default="spatial")
    p.add_argument("--target-mode", choices=("fixed-key", "spatial"),
                   default="fixed-key", dest="target_mode")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_attn_dump)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("KVGEN_LOG", "warning").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValidationFailure as e:
        log.error("validation: %s", e)
        print(f"kvgen: validation error: {e}", file=sys.stderr)
        return VALIDATION_EXIT
    except (ValueError, KeyError, OSError) as e:
        log.error("runtime: %s", e)
        print(f"kvgen: error: {e}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
