"""Command-line interface.

Subcommands: gen-data, pretrain-base, train, modules, generate, eval,
bench. Every command accepts --seed; the MULTIBOOTH_SEED environment
variable overrides the default seed when the flag is absent. Exit codes:
0 on success, 1 with a structured error message, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .concept import load_module, save_module
from .dataset import generate_dataset, load_concept, save_dataset, save_image_png
from .denoiser import (DenoiserConfig, file_digest, load_checkpoint,
                       make_schedule, save_checkpoint)
from .encoders import ImageEncoder, LatentCoder
from .evaluate import SampleConfig, bench, evaluate
from .rcm import load_layout
from .sampler import sample
from .training import TrainConfig, pretrain_base, train_concept
from .vocab import Vocabulary

DEFAULT_BASE = "checkpoints/base_v1.mbnt"


class CliError(RuntimeError):
    pass


def _default_seed() -> int:
    return int(os.environ.get("MULTIBOOTH_SEED", "0"))


def _add_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None,
                   help="random seed (default: $MULTIBOOTH_SEED or 0)")


def _seed_of(args) -> int:
    return args.seed if args.seed is not None else _default_seed()


def _load_base(path):
    path = Path(path)
    if not path.exists():
        raise CliError(f"base checkpoint not found: {path}")
    net, meta = load_checkpoint(path)
    vocab = Vocabulary(seed=int(meta.get("vocab_seed", 0)))
    return net, meta, vocab


def _check_layout_vocab(layout, base_meta) -> None:
    base_vs = int(base_meta.get("vocab_seed", 0))
    for spec in layout.regions:
        mod_vs = spec.module.metadata.get("vocab_seed")
        if mod_vs is not None and int(mod_vs) != base_vs:
            raise CliError(
                f"module {spec.module.placeholder!r} was trained with vocab seed "
                f"{mod_vs}, base checkpoint uses {base_vs}"
            )


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    seed = _seed_of(args)
    concepts = generate_dataset(seed, args.num_concepts, args.images)
    vocab = Vocabulary(seed=args.vocab_seed)
    save_dataset(concepts, args.out, seed=seed, vocab=vocab)
    print(f"wrote {len(concepts)} concepts x {args.images} images to {args.out}")
    return 0


def cmd_pretrain_base(args) -> int:
    data_dir = Path(args.data)
    if not data_dir.exists():
        raise CliError(f"dataset directory not found: {data_dir}")
    from .dataset import load_dataset
    concepts = load_dataset(data_dir)
    vocab = Vocabulary.load(data_dir / "vocabulary.mbvc") \
        if (data_dir / "vocabulary.mbvc").exists() else Vocabulary(seed=0)
    seed = _seed_of(args)
    net, log = pretrain_base(concepts, DenoiserConfig(), steps=args.steps,
                             lr=args.lr, seed=seed, vocab=vocab,
                             latent_coder=LatentCoder())
    net.freeze()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, args.out, extra_meta={
        "vocab_seed": vocab.seed,
        "pretrain_steps": args.steps,
        "pretrain_lr": args.lr,
    })
    digest = file_digest(args.out)
    print(f"pretrained {args.steps} steps; final loss {log[-1]['loss']:.3f}")
    print(f"checkpoint {args.out}")
    print(f"sha256 {digest}")
    return 0


def cmd_train(args) -> int:
    concept_dir = Path(args.concept)
    if not concept_dir.exists():
        raise CliError(f"concept directory not found: {concept_dir}")
    concept = load_concept(concept_dir)
    net, meta, vocab = _load_base(args.base)
    cfg = TrainConfig(steps=args.steps, lr=args.lr, lambda_reg=getattr(args, "lambda"),
                      rank=args.rank, seed=_seed_of(args))
    module, log = train_concept(concept, cfg, net, vocab, ImageEncoder(),
                                LatentCoder(), placeholder=args.placeholder)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_module(module, args.out)
    if args.log:
        Path(args.log).write_text(json.dumps(log, indent=2))
    print(f"trained {concept.concept_id} ({concept.class_noun}) for {cfg.steps} steps")
    print(f"module {args.out} ({module.param_count()} stored parameters)")
    return 0


def cmd_modules(args) -> int:
    if args.action == "list":
        root = Path(args.path)
        if not root.exists():
            raise CliError(f"no such directory: {root}")
        files = sorted(root.glob("*.mbcm"))
        if not files:
            print(f"no modules under {root}")
            return 0
        for f in files:
            m = load_module(f)
            print(f"{f.name}: placeholder={m.placeholder} noun={m.class_noun} "
                  f"rank={m.rank} params={m.param_count()} bytes={f.stat().st_size}")
        return 0
    # inspect
    path = Path(args.path)
    if not path.exists():
        raise CliError(f"no such module file: {path}")
    m = load_module(path)
    vocab = Vocabulary(seed=int(m.metadata.get("vocab_seed", 0)))
    print(f"module {path}")
    print(f"  placeholder     {m.placeholder}")
    print(f"  class noun      {m.class_noun}")
    print(f"  rank            {m.rank}")
    print(f"  stored params   {m.param_count()}")
    print(f"  adapted layers  {', '.join(sorted(m.lora))}")
    print(f"  metadata        {json.dumps(m.metadata, sort_keys=True)}")
    raw = float(np.linalg.norm(m.embedding_raw.astype(np.float64)))
    fin = float(np.linalg.norm(m.embedding_final.astype(np.float64)))
    print("  norm diagnostics:")
    print(f"    |raw embedding|    {raw:.4f}")
    print(f"    |final embedding|  {fin:.4f}")
    print(f"    |class noun|       {vocab.norm(m.class_noun):.4f}")
    words = f"a {m.placeholder} {m.class_noun} on the beach".split()
    norms = []
    for w in words:
        if w == m.placeholder:
            norms.append(fin)
        else:
            norms.append(vocab.norm(w))
    print("    prompt norm table:")
    print("      " + "  ".join(f"{w:>8}" for w in words))
    print("      " + "  ".join(f"{n:8.2f}" for n in norms))
    return 0


def cmd_generate(args) -> int:
    layout_path = Path(args.layout)
    if not layout_path.exists():
        raise CliError(f"layout file not found: {layout_path}")
    net, meta, vocab = _load_base(args.base)
    layout = load_layout(layout_path)
    _check_layout_vocab(layout, meta)
    cfg = SampleConfig(steps=args.steps, guidance=args.guidance,
                       seed=_seed_of(args), overlap_literal=args.overlap_literal)
    img = sample(layout, cfg, net, vocab, LatentCoder())
    save_image_png(img, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    net, meta, vocab = _load_base(args.base)
    layouts = []
    for lp in args.layout:
        p = Path(lp)
        if not p.exists():
            raise CliError(f"layout file not found: {p}")
        layout = load_layout(p)
        _check_layout_vocab(layout, meta)
        layouts.append(layout)
    data_dir = Path(args.data)
    references = {}
    for layout in layouts:
        for spec in layout.regions:
            cid = spec.module.metadata.get("concept_id")
            if cid is None:
                raise CliError(
                    f"module {spec.module.placeholder!r} lacks a concept_id; "
                    "cannot resolve reference images"
                )
            references[spec.module.placeholder] = \
                load_concept(data_dir / "concepts" / cid)
    seed = _seed_of(args)
    seeds = [seed + i for i in range(args.num_seeds)]
    cfg = SampleConfig(steps=args.steps, guidance=args.guidance, seed=seed,
                       overlap_literal=args.overlap_literal)
    bench_modules = [load_module(p) for p in args.bench_modules.split(",")] \
        if args.bench_modules else None
    report = evaluate(layouts, references, net, vocab, LatentCoder(),
                      ImageEncoder(), cfg, seeds, bench_modules=bench_modules)
    report.save(args.out)
    print(f"wrote {args.out} ({len(report.fidelity)} fidelity rows)")
    return 0


def _parse_counts(text: str) -> tuple[int, ...]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(x) for x in text.split(","))


def cmd_bench(args) -> int:
    net, meta, vocab = _load_base(args.base)
    module_paths = [Path(p) for p in args.modules.split(",")]
    for p in module_paths:
        if not p.exists():
            raise CliError(f"module file not found: {p}")
    modules = [load_module(p) for p in module_paths]
    counts = _parse_counts(args.concepts)
    timing, flops = bench(modules, net, vocab, LatentCoder(), counts,
                          steps=args.steps, guidance=args.guidance,
                          seed=_seed_of(args))
    payload = json.dumps({"timing": timing, "flops": {"by_concepts": flops}},
                         indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(payload)
        print(f"wrote {args.out}")
    else:
        print(payload)
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multibooth",
        description="Desk-scale multi-concept image customization pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic concept dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-concepts", type=int, default=8)
    p.add_argument("--images", type=int, default=4)
    p.add_argument("--vocab-seed", type=int, default=0)
    _add_seed(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-base", help="pretrain and freeze the base denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--lr", type=float, default=2e-3)
    _add_seed(p)
    p.set_defaults(func=cmd_pretrain_base)

    p = sub.add_parser("train", help="train one concept into a module file")
    p.add_argument("--concept", required=True, help="concept directory")
    p.add_argument("--base", default=DEFAULT_BASE)
    p.add_argument("--out", required=True, help="output .mbcm path")
    p.add_argument("--steps", type=int, default=900)
    p.add_argument("--lr", type=float, default=8e-5)
    p.add_argument("--lambda", type=float, default=0.01, dest="lambda")
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--placeholder", default="S*")
    p.add_argument("--log", default=None, help="write per-step JSON training log")
    _add_seed(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("modules", help="list or inspect concept modules")
    p.add_argument("action", choices=["list", "inspect"])
    p.add_argument("path")
    _add_seed(p)
    p.set_defaults(func=cmd_modules)

    p = sub.add_parser("generate", help="compose modules per a layout into an image")
    p.add_argument("--layout", required=True)
    p.add_argument("--base", default=DEFAULT_BASE)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--overlap-literal", action="store_true")
    _add_seed(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="fidelity/timing/FLOP report over layouts")
    p.add_argument("--layout", action="append", required=True)
    p.add_argument("--base", default=DEFAULT_BASE)
    p.add_argument("--data", required=True, help="dataset directory with references")
    p.add_argument("--out", required=True)
    p.add_argument("--num-seeds", type=int, default=4)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--overlap-literal", action="store_true")
    p.add_argument("--bench-modules", default=None,
                   help="comma-separated module files for the timing sweep")
    _add_seed(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="timing/FLOP table vs number of concepts")
    p.add_argument("--concepts", default="1..4", help="e.g. 1..4 or 2,3")
    p.add_argument("--modules", required=True, help="comma-separated module files")
    p.add_argument("--base", default=DEFAULT_BASE)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--out", default=None)
    _add_seed(p)
    p.set_defaults(func=cmd_bench)

    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (CliError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))
