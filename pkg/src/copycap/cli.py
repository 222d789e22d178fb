"""The ``copycap`` command: gen-data, train, decode, score, ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Dataset directories are produced by ``gen-data`` and consumed by the other
subcommands; they hold one file per split plus taxonomy, morphology,
caption-frequency, and generator-config documents.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from .captioner import (
    CaptionModel,
    ModelConfig,
    load_checkpoint,
    prepare_inputs,
    save_checkpoint,
)
from .datakit import (
    SPLITS,
    Dataset,
    GeneratorConfig,
    SyntheticCorpus,
    build_vocabulary,
    generate_synthetic,
    load_caption_freq,
    load_dataset,
    save_caption_freq,
    save_dataset,
)
from .decoder import (
    DecodeConfig,
    beam_search,
    load_decode_records,
    record_from_ranked,
    save_decode_records,
)
from .metrics import avg_objects, build_corpus_stats, corpus_cider, object_cider, object_f1
from .morph import load_morph_table, save_morph_table
from .taxonomy import filter_copyable, load_taxonomy, save_taxonomy
from .trainer import (
    EvalImage,
    RewardConfig,
    RunConfig,
    mentioned_labels,
    prepare_training_data,
    train,
    voa_filter,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

GENERATOR_FILE = "generator.json"
TAXONOMY_FILE = "taxonomy.json"
MORPH_FILE = "morph.json"
FREQ_FILE = "caption_freq.json"


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; usage errors are 1 in this tool
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# dataset directory round trip
# ---------------------------------------------------------------------------


def save_corpus_dir(out: Path, corpus: SyntheticCorpus) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        save_dataset(out / f"{split}.json", corpus.datasets[split])
    save_taxonomy(out / TAXONOMY_FILE, corpus.taxonomy)
    save_morph_table(out / MORPH_FILE, corpus.morph)
    save_caption_freq(out / FREQ_FILE, corpus.caption_freq)
    doc = dataclasses.asdict(corpus.config)
    (out / GENERATOR_FILE).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_corpus_dir(path) -> SyntheticCorpus:
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root}: not a dataset directory")
    try:
        cfg = GeneratorConfig(**json.loads((root / GENERATOR_FILE).read_text()))
        datasets = {
            split: load_dataset(root / f"{split}.json", d_roi=cfg.d_roi) for split in SPLITS
        }
        tax = load_taxonomy(root / TAXONOMY_FILE)
        morph = load_morph_table(root / MORPH_FILE)
        freq = load_caption_freq(root / FREQ_FILE)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{root}: {exc}") from exc
    return SyntheticCorpus(datasets, tax, morph, freq, cfg)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def _add_gen_data(sub) -> None:
    p = sub.add_parser("gen-data", help="generate the synthetic zero-shot corpus")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="JSON file of generator-config overrides")
    p.add_argument("--seed", type=int, help="generator seed")
    p.add_argument("--n-train", type=int, help="training images")
    p.add_argument("--n-val-in", type=int, help="in-domain validation images")
    p.add_argument("--n-val-near", type=int, help="mixed-domain validation images")
    p.add_argument("--n-val-out", type=int, help="novel-object validation images")
    p.add_argument("--mention-prob", type=float, help="per-object caption mention rate")
    p.add_argument("--roi-noise", type=float, help="feature noise level")
    p.add_argument("--d-roi", type=int, help="region feature width")


def cmd_gen_data(args) -> int:
    overrides = {}
    if args.config:
        try:
            overrides.update(json.loads(Path(args.config).read_text()))
        except (OSError, ValueError) as exc:
            raise DataError(f"{args.config}: {exc}") from exc
    for flag in ("seed", "n_train", "n_val_in", "n_val_near", "n_val_out",
                 "mention_prob", "roi_noise", "d_roi"):
        value = getattr(args, flag)
        if value is not None:
            overrides[flag] = value
    try:
        cfg = GeneratorConfig(**overrides)
    except TypeError as exc:
        raise DataError(f"bad generator config: {exc}") from exc

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        corpus = generate_synthetic(cfg)
    out = Path(args.out)
    save_corpus_dir(out, corpus)

    print(f"wrote {out}/ (seed {cfg.seed})")
    print(f"{'split':<10}{'images':>8}{'captions':>10}{'tokens':>8}{'objects':>9}")
    for split in SPLITS:
        ds = corpus.datasets[split]
        captions = sum(len(img.references) for img in ds.images)
        tokens = sum(len(r) for img in ds.images for r in img.tokenized_references())
        objs = sum(len(img.copyable) for img in ds.images)
        print(f"{split:<10}{len(ds):>8}{captions:>10}{tokens:>8}{objs / max(len(ds), 1):>9.2f}")
    retained = {
        img.id: {
            d.label
            for d in filter_copyable(
                img.copyable, corpus.caption_freq, cfg.freq_threshold,
                cfg.overlap_threshold, corpus.taxonomy,
            )
        }
        for img in corpus.datasets["train"].images
    }
    kept = voa_filter(corpus.datasets["train"], retained, corpus.morph)
    total = sum(len(img.references) for img in corpus.datasets["train"].images)
    aligned = sum(len(img.references) for img in kept.images)
    print(f"object-aligned training pairs: {aligned}/{total} ({aligned / total:.1%})")
    print(f"abstract labels: {sorted(corpus.taxonomy.abstract_set)}")
    print(f"vocabulary size: {len(build_vocabulary(corpus))}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _add_train(sub) -> None:
    p = sub.add_parser("train", help="train a captioner stage")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--stage", required=True, choices=("ce", "scst"))
    p.add_argument("--init", help="checkpoint to start from (required for scst)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=None,
                   help="default: 100 for ce, 10 for scst")
    p.add_argument("--warmup", type=int, default=20000, help="ce warm-up steps")
    p.add_argument("--eval-every", type=int, default=3000, help="steps between evaluations")
    p.add_argument("--eval-split", default="val_in", choices=SPLITS)
    p.add_argument("--scst-lr", type=float, default=1e-6, help="initial scst learning rate")
    p.add_argument("--patience", type=int, default=3, help="evaluations before halving")
    p.add_argument("--clip", type=float, default=0.1)
    p.add_argument("--clip-mode", default="norm", choices=("norm", "value"))
    p.add_argument("--reward", default="cider", choices=("cider", "additive", "proportional"))
    p.add_argument("--reward-coef", type=float, default=0.3,
                   help="a or p weight on the copy count")
    p.add_argument("--voa-only", action="store_true",
                   help="restrict scst to object-aligned pairs")
    p.add_argument("--voa-ce", action="store_true",
                   help="restrict ce too (known-harmful ablation)")
    p.add_argument("--baseline", default="greedy", choices=("greedy", "beam_mean"))
    p.add_argument("--max-steps", type=int)
    p.add_argument("--log", help="JSONL training log (default: <out>.log.jsonl)")
    p.add_argument("--profile", default="paper", choices=("paper", "desk"),
                   help="base model size when building a fresh model")
    for flag, kind in (("d", int), ("n-enc", int), ("n-dec", int), ("ffn", int),
                       ("heads", int), ("dropout", float), ("max-len", int)):
        p.add_argument(f"--{flag}", type=kind, help=f"model {flag.replace('-', '_')}")
    p.add_argument("--no-abstract", action="store_true", help="drop abstract-label embeddings")
    p.add_argument("--no-morph", action="store_true", help="drop the form selector")


def _build_model(args, corpus: SyntheticCorpus) -> CaptionModel:
    base = ModelConfig.desk() if args.profile == "desk" else ModelConfig()
    overrides = {"d_roi": corpus.config.d_roi}
    for flag in ("d", "n_enc", "n_dec", "ffn", "heads", "dropout", "max_len"):
        value = getattr(args, flag)
        if value is not None:
            overrides[flag] = value
    try:
        cfg = dataclasses.replace(base, **overrides)
    except ValueError as exc:
        raise DataError(f"bad model config: {exc}") from exc
    return CaptionModel(
        cfg,
        build_vocabulary(corpus),
        corpus.morph,
        tuple(sorted(corpus.taxonomy.abstract_set)),
        seed=args.seed,
        use_abstract=not args.no_abstract,
        use_morph=not args.no_morph,
    )


def cmd_train(args, parser: argparse.ArgumentParser) -> int:
    if args.stage == "scst" and not args.init:
        parser.error("--stage scst requires --init with a cross-entropy checkpoint")
    corpus = load_corpus_dir(args.data)

    if args.init:
        try:
            model = load_checkpoint(args.init)
        except (OSError, ValueError) as exc:
            raise DataError(f"{args.init}: {exc}") from exc
        if model.vocab.words != build_vocabulary(corpus).words:
            raise DataError(f"{args.init}: vocabulary does not match {args.data}")
    else:
        model = _build_model(args, corpus)
    if model.config.d_roi != corpus.config.d_roi:
        raise DataError(
            f"model d_roi {model.config.d_roi} != dataset d_roi {corpus.config.d_roi}"
        )

    reward = RewardConfig(kind=args.reward, a=args.reward_coef, p=args.reward_coef,
                          voa_only=args.voa_only)
    batch = args.batch_size or (100 if args.stage == "ce" else 10)
    run = RunConfig(
        stage=args.stage, epochs=args.epochs, batch_size=batch, seed=args.seed,
        warmup=args.warmup, eval_every=args.eval_every, eval_split=args.eval_split,
        scst_lr=args.scst_lr, plateau_patience=args.patience, clip=args.clip,
        clip_mode=args.clip_mode, reward=reward, baseline=args.baseline,
        max_steps=args.max_steps,
    )
    data = prepare_training_data(
        model, corpus, voa_only=args.voa_only and args.stage == "scst", voa_ce=args.voa_ce
    )

    started = time.time()
    result = train(model, data, run)
    losses = [e["loss"] for e in result.log if "loss" in e]
    if losses and not np.all(np.isfinite(losses)):
        raise NumericError(f"non-finite loss encountered (last: {losses[-1]})")

    extra = {
        "stage": args.stage, "seed": args.seed, "steps": result.steps,
        "reward": dataclasses.asdict(reward) if args.stage == "scst" else None,
        "init": args.init, "data": str(args.data),
    }
    save_checkpoint(args.out, model, extra=extra)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        for entry in result.log:
            fh.write(json.dumps(entry) + "\n")

    print(
        f"{args.stage} done: {result.steps} steps in {time.time() - started:.0f}s, "
        f"checkpoint {args.out}"
    )
    evals = [e for e in result.log if "cider" in e]
    if evals:
        keys = ("cider", "object_f1", "object_cider", "avg_objects")
        shown = {k: round(evals[-1][k], 4) for k in keys if k in evals[-1]}
        print(f"final {args.eval_split} evaluation: {shown}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------

IB_NAMES = {"1": 1.0, "e": math.e, "e2": math.e**2, "e3": math.e**3}


def _parse_ib(raw: str) -> float:
    key = raw.lower().replace("^", "")
    if key in IB_NAMES:
        return IB_NAMES[key]
    try:
        return float(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"{raw!r} is not a number or one of {sorted(IB_NAMES)}"
        ) from None


def _add_decode(sub) -> None:
    p = sub.add_parser("decode", help="beam-decode a split into caption records")
    p.add_argument("--model", required=True, help="checkpoint from train")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="val_out", choices=SPLITS)
    p.add_argument("--out", required=True,
                   help="records file; a directory when --ib has several values")
    p.add_argument("--ib", type=_parse_ib, nargs="+", default=[1.0], metavar="B",
                   help="inference-bias multiplier(s); accepts 1, e, e2, e3 or any float")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, help="default: model window")
    p.add_argument("--bigram-penalty", type=float, default=math.e**2)
    p.add_argument("--no-length-norm", action="store_true")
    p.add_argument("--no-copy-once", action="store_true")
    p.add_argument("--literal-division", action="store_true",
                   help="divide repeated-bigram log-probabilities instead of scaling")


def _eval_inputs(corpus: SyntheticCorpus, split: str, model: CaptionModel) -> list:
    cfg = corpus.config
    images = []
    for img in corpus.datasets[split].images:
        inputs = prepare_inputs(
            img, corpus.taxonomy, corpus.morph, model.abstract_labels,
            corpus.caption_freq, freq_threshold=cfg.freq_threshold,
            overlap_threshold=cfg.overlap_threshold,
        )
        images.append(EvalImage(img.id, inputs, tuple(img.tokenized_references()), frozenset()))
    return images


def cmd_decode(args) -> int:
    try:
        model = load_checkpoint(args.model)
    except (OSError, ValueError) as exc:
        raise DataError(f"{args.model}: {exc}") from exc
    corpus = load_corpus_dir(args.data)
    if model.vocab.words != build_vocabulary(corpus).words:
        raise DataError(f"{args.model}: vocabulary does not match {args.data}")
    if model.config.d_roi != corpus.config.d_roi:
        raise DataError(
            f"model d_roi {model.config.d_roi} != dataset d_roi {corpus.config.d_roi}"
        )

    sweep = len(args.ib) > 1
    out = Path(args.out)
    if sweep:
        out.mkdir(parents=True, exist_ok=True)
    images = _eval_inputs(corpus, args.split, model)

    for b in args.ib:
        cfg = DecodeConfig(
            beam_size=args.beam,
            max_len=args.max_len or model.config.max_len,
            bigram_penalty=args.bigram_penalty,
            length_normalize=not args.no_length_norm,
            copy_once=not args.no_copy_once,
            ib=b,
            literal_division=args.literal_division,
        )
        records = [
            record_from_ranked(e.image_id, beam_search(model, e.inputs, cfg)) for e in images
        ]
        tag = f"{b:g}".replace(".", "_")
        path = out / f"records-ib{tag}.json" if sweep else out
        save_decode_records(path, records)
        meta = {
            "model": str(args.model), "data": str(args.data), "split": args.split,
            "ib": b, "beam": args.beam, "bigram_penalty": args.bigram_penalty,
            "length_normalize": not args.no_length_norm,
            "copy_once": not args.no_copy_once,
            "literal_division": args.literal_division,
        }
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1) + "\n")
        print(f"decoded {len(records)} images (ib={b:g}) -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------


def _add_score(sub) -> None:
    p = sub.add_parser("score", help="score decode records against a split")
    p.add_argument("--records", required=True, help="file from decode")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="val_out", choices=SPLITS)
    p.add_argument("--out", help="also write the report as JSON")


def score_records(records, corpus: SyntheticCorpus, split: str) -> dict:
    ds = corpus.datasets[split]
    by_id = {r.image_id: r for r in records}
    want = [img.id for img in ds.images]
    if set(by_id) != set(want):
        raise DataError(
            f"records do not cover split {split!r}: "
            f"{len(set(want) - set(by_id))} missing, {len(set(by_id) - set(want))} extra"
        )
    stats = build_corpus_stats(corpus.datasets["train"].references())
    universe = tuple(corpus.config.target_labels())
    ordered = [by_id[i] for i in want]
    captions = [r.best_surface() for r in ordered]
    events = [r.best for r in ordered]
    refs = [img.tokenized_references() for img in ds.images]
    gold = [mentioned_labels(r, universe, corpus.morph) for r in refs]
    return {
        "split": split,
        "images": len(ordered),
        "cider": corpus_cider(captions, refs, stats),
        "object_f1": object_f1(captions, gold, corpus.morph, universe),
        "object_cider": object_cider(events, refs, stats),
        "avg_objects": avg_objects(events),
    }


def cmd_score(args) -> int:
    corpus = load_corpus_dir(args.data)
    try:
        records = load_decode_records(args.records)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{args.records}: {exc}") from exc
    report = score_records(records, corpus, args.split)
    for key in ("cider", "object_f1", "object_cider", "avg_objects"):
        print(f"{key:>13}: {report[key]:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def _add_ablate(sub) -> None:
    from .experiments import ABLATION_ROWS

    p = sub.add_parser("ablate", help="run the copy-encouragement ladder")
    p.add_argument("--data", help="dataset directory (default: generate the desk corpus)")
    p.add_argument("--out", help="write the plain-text report here")
    p.add_argument("--json", help="write the full report as JSON")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--rows", nargs="+", default=list(ABLATION_ROWS), choices=ABLATION_ROWS)
    p.add_argument("--splits", nargs="+", default=["val_in", "val_out"], choices=SPLITS)
    p.add_argument("--budget-minutes", type=float, default=60.0,
                   help="warn when the ladder overruns this")


def cmd_ablate(args) -> int:
    from .experiments import Experiment, desk_corpus, format_ablation_report, run_ablation

    corpus = load_corpus_dir(args.data) if args.data else desk_corpus()
    started = time.time()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        exp = Experiment(corpus)
        report = run_ablation(exp, rows=args.rows, seeds=args.seeds, splits=args.splits)
    elapsed = (time.time() - started) / 60.0
    text = format_ablation_report(report)
    print(text)
    print(f"ladder wall time: {elapsed:.1f} min")
    if elapsed > args.budget_minutes:
        warnings.warn(
            f"ablation ladder took {elapsed:.1f} min, over the {args.budget_minutes:.0f} min budget"
        )
    if args.out:
        Path(args.out).write_text(text + f"\nladder wall time: {elapsed:.1f} min\n")
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=1) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="copycap", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen_data(sub)
    _add_train(sub)
    _add_decode(sub)
    _add_score(sub)
    _add_ablate(sub)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "train":
            return cmd_train(args, parser)
        if args.command == "decode":
            return cmd_decode(args)
        if args.command == "score":
            return cmd_score(args)
        if args.command == "ablate":
            return cmd_ablate(args)
        parser.error(f"unknown command {args.command!r}")
    except DataError as exc:
        print(f"copycap: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"copycap: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
