"""Command-line interface: train, build-mask, generate, ppl, sweep, ot-check.

Every run prints a JSON manifest of the resolved configuration, and writes
it next to the primary output file when there is one. All randomness
derives from --seed. Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .decoder import DecoderConfig, generate
from .metrics import full_report, sweep_epsilon
from .model import ModelConfig, MultiHeadModel, load_checkpoint, save_checkpoint, transfer_from_base
from .ngram import build_mask, count_ngrams, load_mask, save_mask
from .ot import theorem_check
from .training import TrainingConfig, train
from .vocab import build_vocab, corpus_sequences, load_corpus_text, split_corpus

OT_TOLERANCE = 1e-6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_corpus_flags(p):
    p.add_argument("--corpus", required=True, help="plain UTF-8 text, one sequence per line")
    p.add_argument("--token-mode", choices=("byte", "char"), default="byte")
    p.add_argument("--split", type=float, default=0.97, help="training fraction")
    p.add_argument("--max-seq-len", type=int, default=256)


def _add_decode_flags(p):
    p.add_argument("--epsilon-b", default="0.5")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--rep-penalty", type=float, default=1.1)
    p.add_argument("--alpha-c", type=float, default=1.0)
    p.add_argument("--adaptive", choices=("on", "off"), default="on")
    p.add_argument("--blur", default="3", help="odd kernel size or 'off'")
    p.add_argument("--mask2", help="order-2 mask file")
    p.add_argument("--mask3", help="order-3 mask file")
    p.add_argument("--mask4", help="order-4 mask file")


def build_parser() -> _Parser:
    parser = _Parser(
        prog="multitok",
        description="dynamic multi-token generation toolkit",
        epilog="DYNAMO_THREADS shards n-gram counting; everything else is single-threaded.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model (optionally growing a single-head base)")
    _add_corpus_flags(p)
    p.add_argument("--config", help="key=value file; explicit flags override it")
    p.add_argument("--out", required=True)
    p.add_argument("--from-base", help="single-head checkpoint to transfer from")
    p.add_argument("--heads", type=int, default=3)
    p.add_argument("--copy-init", action="store_true", help="initialize extra heads from head 1")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--stem-layers", type=int, default=2)
    p.add_argument("--attn-heads", type=int, default=4)
    p.add_argument("--context", type=int, default=None, help="defaults to --max-seq-len")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr-b", type=float, default=1e-3)
    p.add_argument("--lr-m", type=float, default=1e-2)
    p.add_argument("--lr-mb", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    train_defaults = {a.dest: a.default for a in p._actions}
    p.set_defaults(func=cmd_train, parser_defaults=train_defaults)

    p = sub.add_parser("build-mask", help="estimate a co-occurrence mask from the training split")
    _add_corpus_flags(p)
    p.add_argument("--order", type=int, choices=(2, 3, 4), required=True)
    p.add_argument("--floor", type=float, default=0.5)
    p.add_argument("--subsample", type=float, default=1.0, help="sequence fraction for counting (order 4 practice)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_mask)

    p = sub.add_parser("generate", help="dynamic multi-token generation from a prompt")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-tokens", type=int, default=200)
    p.add_argument("--trace", help="write per-step CSV here")
    p.add_argument("--seed", type=int, default=0)
    _add_decode_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ppl", help="multi-token perplexities on the validation split")
    p.add_argument("--model", required=True)
    p.add_argument("--order", type=int, default=3)
    _add_corpus_flags(p)
    _add_decode_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ppl)

    p = sub.add_parser("sweep", help="epsilon_b sweep: dynamic perplexity, speed-up and mix CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    _add_corpus_flags(p)
    _add_decode_flags(p)
    p.add_argument("--val-limit", type=int, default=None, help="cap validation sequences")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ot-check", help="verify the masked joint against the transport minimizer")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--vocab", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ot_check)
    return parser


def _emit_manifest(args, extra=None):
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "parser_defaults")}
    if extra:
        resolved.update(extra)
    line = json.dumps({"manifest": resolved}, sort_keys=True, default=str)
    print(line)
    out = getattr(args, "out", None) or getattr(args, "trace", None)
    if out:
        Path(str(out) + ".manifest.json").write_text(line + "\n", encoding="utf-8")


def _load_split(args, vocab=None):
    """Corpus split under an existing vocab (a checkpoint's) or a fresh one."""
    text = load_corpus_text(args.corpus)
    if vocab is None:
        vocab = build_vocab(text, args.token_mode)
    seqs = corpus_sequences(text, vocab, args.max_seq_len)
    split = split_corpus(seqs, args.split, args.seed)
    return vocab, split


def _apply_config_file(args, parser_defaults):
    """Fill values from a key=value file for flags left at their defaults."""
    if not getattr(args, "config", None):
        return
    for raw in Path(args.config).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (expected key=value): {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ValueError(f"unknown config key {key!r}")
        if getattr(args, attr) == parser_defaults.get(attr):
            current = getattr(args, attr)
            caster = type(current) if current is not None else str
            setattr(args, attr, caster(value) if caster is not bool else value.lower() in ("1", "true", "on"))


def _decoder_config(args, n_max=3, seed=None, epsilon_b=None) -> DecoderConfig:
    eps = float(args.epsilon_b) if epsilon_b is None else epsilon_b
    return DecoderConfig(
        n_max=n_max,
        k=args.k,
        temperature=args.temperature,
        repetition_penalty=args.rep_penalty,
        epsilon_b=eps,
        alpha_c=args.alpha_c,
        adaptive_thresholding=args.adaptive == "on",
        blur_kernel=None if args.blur == "off" else int(args.blur),
        rng_seed=args.seed if seed is None else seed,
    )


def _load_masks(args) -> dict:
    masks = {}
    for order in (2, 3, 4):
        path = getattr(args, f"mask{order}", None)
        if path:
            masks[order] = load_mask(path)
    return masks


def cmd_train(args) -> int:
    _apply_config_file(args, args.parser_defaults)
    vocab, split = _load_split(args)
    context = args.context if args.context is not None else args.max_seq_len
    if args.from_base:
        base, base_vocab = load_checkpoint(args.from_base)
        vocab = base_vocab or vocab
        model = transfer_from_base(base, n_heads=args.heads, copy_init=args.copy_init, seed=args.seed)
    else:
        cfg = ModelConfig(
            vocab_size=vocab.size,
            dim=args.dim,
            stem_layers=args.stem_layers,
            n_heads=args.heads,
            context_len=context,
            attn_heads=args.attn_heads,
        )
        model = MultiHeadModel(cfg, seed=args.seed)
    tcfg = TrainingConfig(
        lr_b=args.lr_b,
        lr_m=args.lr_m,
        lr_mb=args.lr_mb,
        weight_decay=args.weight_decay,
        steps=args.steps,
        batch_size=args.batch_size,
        seed=args.seed,
        eval_every=args.eval_every,
    )
    report = train(model, split, tcfg)
    save_checkpoint(args.out, model, vocab)
    _emit_manifest(args, {"final_losses": report.final_losses.tolist(), "wall_clock_s": report.wall_clock_s})
    print(f"trained {model.n_params} parameters in {report.wall_clock_s:.1f}s; saved to {args.out}")
    return 0


def cmd_build_mask(args) -> int:
    vocab, split = _load_split(args)
    unigrams = count_ngrams(split, 1, vocab.size)
    joint = count_ngrams(split, args.order, vocab.size, subsample=args.subsample, seed=args.seed)
    mask = build_mask(unigrams, joint, floor=args.floor)
    report = save_mask(mask, args.out)
    _emit_manifest(args, {"entries": mask.n_entries, "file_bytes": report["file_bytes"]})
    print(f"order-{args.order} mask: {mask.n_entries} entries, {report['file_bytes']} bytes -> {args.out}")
    return 0


def cmd_generate(args) -> int:
    model, vocab = load_checkpoint(args.model)
    if vocab is None:
        raise ValueError("checkpoint carries no vocabulary; re-train with this toolkit")
    config = _decoder_config(args, n_max=min(3, model.config.n_heads) if model.config.n_heads >= 2 else 2)
    masks = _load_masks(args)
    prompt = vocab.encode(args.prompt)
    if prompt.size == 0:
        raise ValueError("prompt must encode to at least one token")
    heads_fn = lambda ctx: model.head_distributions(ctx)  # noqa: E731
    t0 = time.perf_counter()
    out_ids, trace = generate(heads_fn, prompt, args.max_tokens, config, masks)
    wall = time.perf_counter() - t0
    new_tokens = out_ids.size - prompt.size
    _emit_manifest(args)
    print(vocab.decode(out_ids, errors="replace"))
    tokens_per_pass = new_tokens / max(trace.steps, 1)
    print(
        f"[{new_tokens} tokens in {trace.steps} forward passes: "
        f"{tokens_per_pass:.3f} tokens/pass, {new_tokens / max(wall, 1e-9):.0f} tokens/s wall-clock]"
    )
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write("step,n_emitted,backoffs,max_joint_value\n")
            for i, (m, b, v) in enumerate(
                zip(trace.emitted_counts, trace.backoff_counts, trace.max_joint_values)
            ):
                fh.write(f"{i},{m},{b},{v:.12g}\n")
    return 0


def cmd_ppl(args) -> int:
    model, vocab = load_checkpoint(args.model)
    _, split = _load_split(args, vocab=vocab)
    n_max = min(args.order, model.config.n_heads)
    config = _decoder_config(args, n_max=max(2, n_max))
    report = full_report(model, split.validation, config, _load_masks(args))
    _emit_manifest(args)
    for n, v in enumerate(report.ppl_heads, start=1):
        print(f"PPL_{n} = {v:.4f}")
    for n in sorted(report.ppl_joints):
        print(f"PPL_1:{n} = {report.ppl_joints[n]:.4f}")
    print(f"PPL_d(eps_b={report.epsilon_b}) = {report.ppl_dynamic:.4f} at {report.speedup:.3f}x")
    return 0


def _parse_grid(spec: str) -> list[float]:
    parts = spec.split(":")
    if len(parts) != 3:
        raise ValueError(f"grid must be start:stop:step, got {spec!r}")
    start, stop, step = (float(s) for s in parts)
    if step <= 0:
        raise ValueError("grid step must be positive")
    values = []
    i = 0
    while True:
        v = start + i * step
        if v > stop + 1e-12:
            break
        values.append(round(v, 12))
        i += 1
    return values


def cmd_sweep(args) -> int:
    model, vocab = load_checkpoint(args.model)
    _, split = _load_split(args, vocab=vocab)
    validation = split.validation[: args.val_limit] if args.val_limit else split.validation
    grid = _parse_grid(args.epsilon_b)
    config = _decoder_config(args, n_max=min(3, max(2, model.config.n_heads)), epsilon_b=grid[0])
    rows = sweep_epsilon(model, validation, config, masks=_load_masks(args), eps_values=grid)
    mix_cols = [f"mix{m}" for m in range(1, config.n_max + 1)]
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(",".join(["epsilon_b", "ppl_d", "speedup"] + mix_cols) + "\n")
        for row in rows:
            cells = [f"{row['epsilon_b']:.12g}", f"{row['ppl_d']:.12g}", f"{row['speedup']:.12g}"]
            cells += [f"{row[c]:.12g}" for c in mix_cols]
            fh.write(",".join(cells) + "\n")
    _emit_manifest(args, {"rows": len(rows)})
    print(f"swept {len(rows)} epsilon_b values -> {args.out}")
    return 0


def cmd_ot_check(args) -> int:
    result = theorem_check(trials=args.trials, vocab=args.vocab, seed=args.seed)
    _emit_manifest(args, {"max_tv": result["max_tv"]})
    ok = result["max_tv"] < OT_TOLERANCE
    print(f"max total-variation over {args.trials} trials: {result['max_tv']:.3e} "
          f"({'PASS' if ok else 'FAIL'} at {OT_TOLERANCE:g})")
    return 0 if ok else 2


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
