"""Command-line entry point.

Every command prints a one-line run manifest (command name, resolved
arguments, artifact version) sufficient to replay the run; for training the
manifest is also the first line of the log file. Exit statuses: 0 success,
1 runtime/data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__, checkpoint, corpus, evalbench, sampler, trainer
from .errors import DombertError
from .masking import MaskingPolicy
from .model import ModelConfig

PACKED_FILE = "packed.tsv"
VOCAB_FILE = "vocab.tsv"
DOMAINS_FILE = "domains.tsv"
STATS_FILE = "stats.tsv"


def manifest_line(command: str, args: dict) -> str:
    payload = {"command": command, "version": __version__, **args}
    return "MANIFEST\t" + json.dumps(payload, sort_keys=True)


def _ingest(args: argparse.Namespace) -> int:
    print(manifest_line("ingest", {
        "corpus": args.corpus, "target": args.target, "max_len": args.max_len,
        "min_count": args.min_count, "max_vocab": args.max_vocab,
        "out": args.out,
    }))
    table, records = corpus.load_corpus(args.corpus, args.target)
    vocab = corpus.build_vocab([text for _, text in records],
                               args.min_count, args.max_vocab)
    packed = corpus.pack_corpus(table, records, vocab, args.max_len)
    corpus.validate_packed(packed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus.write_packed(out / PACKED_FILE, packed)
    corpus.write_vocab(out / VOCAB_FILE, vocab)
    corpus.write_domain_table(out / DOMAINS_FILE, table)
    corpus.write_stats(out / STATS_FILE, corpus.corpus_stats(table))
    print(f"packed {len(packed.examples)} examples over {table.n_plus_1} domains;"
          f" vocabulary size {vocab.size}")
    return 0


def _load_packed_dir(packed_arg: str) -> tuple[corpus.PackedCorpus, corpus.Vocabulary]:
    root = Path(packed_arg)
    if root.is_dir():
        packed_path = root / PACKED_FILE
        vocab_path = root / VOCAB_FILE
        domains_path = root / DOMAINS_FILE
    else:
        packed_path = root
        vocab_path = root.parent / VOCAB_FILE
        domains_path = root.parent / DOMAINS_FILE
    table = corpus.read_domain_table(domains_path)
    vocab = corpus.read_vocab(vocab_path)
    packed = corpus.read_packed(packed_path, table)
    return packed, vocab


def _train(args: argparse.Namespace) -> int:
    line = manifest_line("train", {
        "packed": args.packed, "lam": args.lam, "tau": args.tau,
        "lr": args.lr, "batch": args.batch, "accum": args.accum,
        "epochs": args.epochs, "seed": args.seed, "m": args.m,
        "out": args.out, "checkpoint_interval": args.checkpoint_interval,
        "target_only": args.target_only,
    })
    print(line)
    packed, _ = _load_packed_dir(args.packed)
    model_config = ModelConfig(
        vocab_size=packed.vocab_size,
        n_domains=packed.table.n_plus_1,
        max_len=packed.max_len,
        d_domain=args.m,
    )
    train_config = trainer.TrainConfig(
        lam=args.lam, tau=args.tau, lr=args.lr, micro_batch=args.batch,
        accum_steps=args.accum, epochs=args.epochs, seed=args.seed,
        checkpoint_interval=args.checkpoint_interval,
        target_only=args.target_only,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = trainer.train(train_config, packed, model_config, out_dir=out)

    with open(out / "log.tsv", "w", encoding="utf-8") as fh:
        fh.write(line + "\n")
        for row in result.log_lines:
            fh.write(row + "\n")
    checkpoint.save_model(
        out / "final.ckpt", result.model_config, result.params,
        domain_names=list(packed.table.names),
        target_index=packed.table.target_index,
    )
    k = min(trainer.REPORT_K, packed.table.n_plus_1 - 1)
    with open(out / "top_domains.tsv", "w", encoding="utf-8") as fh:
        if k > 0:
            report = sampler.report_top_domains(
                result.params["dom_emb"], packed.table.target_index, k,
                packed.table.names,
            )
            for row in sampler.format_top_domains(report):
                fh.write(row + "\n")
    print(f"trained {len(result.records)} optimizer steps; outputs in {args.out}")
    return 0


def _report(args: argparse.Namespace) -> int:
    print(manifest_line("report", {"ckpt": args.ckpt, "top": args.top}))
    bundle = checkpoint.load(args.ckpt)
    n_sources = bundle.config.n_domains - 1
    names = bundle.domain_names or [f"domain_{i}" for i in range(bundle.config.n_domains)]
    target = bundle.target_index if bundle.target_index is not None else 0
    k = min(args.top, n_sources)
    report = sampler.report_top_domains(bundle.params["dom_emb"], target, k, names)
    for row in sampler.format_top_domains(report):
        print(row)
    return 0


def _gen_synth(args: argparse.Namespace) -> int:
    print(manifest_line("gen-synth", {
        "clusters": args.clusters, "domains_per_cluster": args.domains_per_cluster,
        "shared_vocab": args.shared_vocab, "unique_vocab": args.unique_vocab,
        "background_vocab": args.background_vocab,
        "docs_per_domain": args.docs_per_domain,
        "min_len": args.min_len, "max_len": args.max_len,
        "mix": args.mix, "seed": args.seed,
        "out": args.out, "truth_out": args.truth_out,
    }))
    mix = tuple(float(v) for v in args.mix.split(","))
    if len(mix) != 3:
        raise DombertError("--mix expects three comma-separated ratios")
    spec = evalbench.SyntheticSpec(
        n_clusters=args.clusters,
        domains_per_cluster=args.domains_per_cluster,
        shared_vocab=args.shared_vocab,
        unique_vocab=args.unique_vocab,
        background_vocab=args.background_vocab,
        docs_per_domain=args.docs_per_domain,
        doc_len_min=args.min_len,
        doc_len_max=args.max_len,
        mix=mix,
        seed=args.seed,
    )
    records, truth = evalbench.gen_synthetic_corpus(spec)
    evalbench.write_corpus(args.out, records)
    truth_out = args.truth_out or args.out + ".truth"
    evalbench.write_truth(truth_out, truth)
    print(f"wrote {len(records)} documents over {spec.n_domains} domains")
    return 0


def _eval(args: argparse.Namespace) -> int:
    print(manifest_line("eval", {
        "ckpt": args.ckpt, "truth": args.truth, "heldout": args.heldout,
        "vocab": args.vocab, "mask_seed": args.mask_seed,
    }))
    if args.truth is None and args.heldout is None:
        raise DombertError("nothing to evaluate: pass --truth and/or --heldout")
    bundle = checkpoint.load(args.ckpt)
    names = bundle.domain_names or [f"domain_{i}" for i in range(bundle.config.n_domains)]
    target = bundle.target_index if bundle.target_index is not None else 0
    if args.truth is not None:
        truth = evalbench.read_truth(args.truth)
        precision = evalbench.eval_domain_recovery(
            bundle.params["dom_emb"], target, names, truth
        )
        k = len(evalbench.cluster_mates(truth, names, target))
        print(f"precision_at_{k}\t{precision:.6f}")
    if args.heldout is not None:
        if args.vocab is None:
            raise DombertError("--heldout requires --vocab")
        vocab = corpus.read_vocab(args.vocab)
        with open(args.heldout, encoding="utf-8") as fh:
            texts = []
            for line in fh:
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                texts.append(line.split("\t", 1)[1] if "\t" in line else line)
        ppl = evalbench.eval_pseudo_perplexity(
            bundle.params, bundle.config, texts, vocab,
            MaskingPolicy(), args.mask_seed,
        )
        print(f"pseudo_perplexity\t{ppl:.6f}")
    return 0


def _bench_eal(args: argparse.Namespace) -> int:
    print(manifest_line("bench-eal", {
        "vocab": args.vocab, "len": args.len, "mask_rate": args.mask_rate,
        "reps": args.reps, "batch": args.batch,
    }))
    config = ModelConfig(vocab_size=args.vocab, n_domains=2, max_len=args.len)
    report = evalbench.bench_eal(config, mask_rate=args.mask_rate,
                                 reps=args.reps, batch_size=args.batch)
    for row in evalbench.format_bench_report(report):
        print(row)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dombert",
        description="Domain-oriented masked-LM training at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="pack a domain-tagged corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--max-len", type=int, default=128, dest="max_len")
    p.add_argument("--min-count", type=int, default=1, dest="min_count")
    p.add_argument("--max-vocab", type=int, default=8000, dest="max_vocab")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_ingest)

    p = sub.add_parser("train", help="run domain-oriented training")
    p.add_argument("--packed", required=True,
                   help="ingest output directory (or the packed file inside it)")
    p.add_argument("--lambda", type=float, default=0.9, dest="lam")
    p.add_argument("--tau", type=float, default=0.13)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--accum", type=int, default=4)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint-interval", type=int, default=50,
                   dest="checkpoint_interval")
    p.add_argument("--target-only", action="store_true", dest="target_only",
                   help="pin sampling to the target domain (comparison runs)")
    p.set_defaults(func=_train)

    p = sub.add_parser("report", help="top-k relevant domains from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--top", type=int, default=20)
    p.set_defaults(func=_report)

    p = sub.add_parser("gen-synth", help="generate a synthetic clustered corpus")
    p.add_argument("--clusters", type=int, default=3)
    p.add_argument("--domains-per-cluster", type=int, default=4,
                   dest="domains_per_cluster")
    p.add_argument("--shared-vocab", type=int, default=200, dest="shared_vocab")
    p.add_argument("--unique-vocab", type=int, default=100, dest="unique_vocab")
    p.add_argument("--background-vocab", type=int, default=500,
                   dest="background_vocab")
    p.add_argument("--docs-per-domain", type=int, default=300,
                   dest="docs_per_domain")
    p.add_argument("--min-len", type=int, default=20, dest="min_len")
    p.add_argument("--max-len", type=int, default=60, dest="max_len")
    p.add_argument("--mix", default="0.5,0.3,0.2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--truth-out", default=None, dest="truth_out")
    p.set_defaults(func=_gen_synth)

    p = sub.add_parser("eval", help="relevance recovery and pseudo-perplexity")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--truth", default=None)
    p.add_argument("--heldout", default=None)
    p.add_argument("--vocab", default=None)
    p.add_argument("--mask-seed", type=int, default=0, dest="mask_seed")
    p.set_defaults(func=_eval)

    p = sub.add_parser("bench-eal", help="sparse vs dense masked-token timing")
    p.add_argument("--vocab", type=int, default=8000)
    p.add_argument("--len", type=int, default=128)
    p.add_argument("--mask-rate", type=float, default=0.15, dest="mask_rate")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--batch", type=int, default=8)
    p.set_defaults(func=_bench_eal)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DombertError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
