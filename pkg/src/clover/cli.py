"""Command-line surface tying the pipeline together.

Every subcommand is a thin wrapper over the library operations; results
are identical to calling them in-process. Exit codes: 0 success, 1
operation failure, 2 usage error.
"""

import argparse
import sys

import numpy as np

from .archive import (
    load_factors,
    load_weights,
    read_archive,
    save_factors,
    save_weights,
)
from .attention import RopeSpec, mha_forward, mha_forward_factored
from .exceptions import CloverError
from .finetune import make_toy_task, train_toy
from .masks import MaskSpec
from .synth import low_rank_weights, random_inputs, random_weights
from .transform import (
    count_params,
    decompose_factors,
    merge_back,
    prune_factors,
    spectrum_report,
)

__all__ = ["cli_dispatch", "main"]


def _build_parser():
    parser = argparse.ArgumentParser(prog="clover", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="print dims and per-head spectra summary")
    p.add_argument("archive")
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("transform", help="decompose weights into factors")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--mode", choices=["svd", "qr"], default="svd")
    p.add_argument("--seed", type=int, default=0, help="reserved; the decomposition is deterministic")
    p.set_defaults(func=_cmd_transform)

    p = sub.add_parser("prune", help="drop near-zero singular directions")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--threshold-qk", type=float, required=True)
    p.add_argument("--threshold-vo", type=float, required=True)
    p.add_argument("--csv", help="also write the stats CSV to this path")
    p.set_defaults(func=_cmd_prune)

    p = sub.add_parser("verify", help="random-input equivalence of weights vs factors")
    p.add_argument("weights")
    p.add_argument("factors")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--mask", default="none", help="none | causal | window:W")
    p.add_argument("--rope", action="store_true")
    p.add_argument("--rope-base", type=float, default=10000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seq", type=int, default=6)
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("spectrum", help="emit singular-value and norm curves as CSV")
    p.add_argument("input")
    p.add_argument("--csv", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.set_defaults(func=_cmd_spectrum)

    p = sub.add_parser("count-params", help="closed-form trainable parameter counts")
    p.add_argument("--D", type=int, required=True)
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--method", required=True, help="clover | lora:R | dora:R | full")
    p.set_defaults(func=_cmd_count_params)

    p = sub.add_parser("train-toy", help="fine-tune the cores on a toy task")
    p.add_argument("factors")
    p.add_argument("--task", choices=["recall", "regress"], required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seq", type=int, default=8)
    p.add_argument("--mask", default="none")
    p.add_argument("--rope", action="store_true")
    p.add_argument("--rope-base", type=float, default=10000.0)
    p.add_argument("--out", help="write the final train state to this archive")
    p.add_argument("--loss-csv", help="write the loss history CSV to this path")
    p.set_defaults(func=_cmd_train_toy)

    p = sub.add_parser("merge", help="fold the cores back into plain weights")
    p.add_argument("factors")
    p.add_argument("output")
    p.set_defaults(func=_cmd_merge)

    p = sub.add_parser("gen", help="generate synthetic weights for testing")
    p.add_argument("output")
    p.add_argument("--D", type=int, required=True)
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--heads-rank", type=int, default=0, help="true per-head rank; 0 = full rank")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--bias", action="store_true")
    p.set_defaults(func=_cmd_gen)

    return parser


def _cmd_inspect(args):
    tensors, meta = read_archive(args.archive)
    kind = meta.get("kind", "?")
    dims = meta.get("dims", {})
    print(f"kind    : {kind}")
    print(f"dims    : D={dims.get('D')} h={dims.get('h')} d={dims.get('d')}")
    print(f"mode    : {meta.get('mode')}")
    print(f"mask    : {meta.get('mask')}  rope: {meta.get('rope')}")
    print(f"tensors : {', '.join(sorted(tensors))}")
    if kind == "weights":
        w, _ = load_weights(args.archive)
        print(spectrum_report(w).summary())
    elif kind == "factors":
        f, _ = load_factors(args.archive)
        if f.mode == "svd":
            for i in range(f.dims[1]):
                print(
                    f"head {i}: rank_qk {int(f.rank_qk[i])} sv_qk max {f.s_qk[i].max():.6g}; "
                    f"rank_vo {int(f.rank_vo[i])} sv_vo max {f.s_vo[i].max():.6g}"
                )
        else:
            for i in range(f.dims[1]):
                print(f"head {i}: qr query/key; rank_vo {int(f.rank_vo[i])} sv_vo max {f.s_vo[i].max():.6g}")
    return 0


def _cmd_transform(args):
    w, _ = load_weights(args.input)
    f = decompose_factors(w, mode=args.mode)
    save_factors(args.output, f)
    print(f"wrote {args.mode} factors for D={w.dims[0]} h={w.dims[1]} d={w.dims[2]} to {args.output}")
    return 0


def _cmd_prune(args):
    f, _ = load_factors(args.input)
    pruned, stats = prune_factors(f, args.threshold_qk, args.threshold_vo)
    save_factors(args.output, pruned)
    print(stats.to_table())
    print()
    csv_text = stats.to_csv()
    print(csv_text, end="")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
    return 0


def _cmd_verify(args):
    w, _ = load_weights(args.weights)
    f, _ = load_factors(args.factors)
    mask = MaskSpec.parse(args.mask)
    rope = RopeSpec.on(args.rope_base) if args.rope else RopeSpec.off()
    x = random_inputs(args.batch, args.seq, w.dims[0], seed=args.seed)
    print(f"probe seed {args.seed}: batch={args.batch} seq={args.seq} mask={args.mask} rope={args.rope}")
    plain = mha_forward(x, w, mask, rope)
    factored = mha_forward_factored(x, f, mask, rope)
    deviation = float(np.max(np.abs(plain - factored)))
    print(f"max-abs deviation {deviation:.3e} (tol {args.tol:.3e})")
    if deviation <= args.tol:
        print("equivalent")
        return 0
    print("NOT equivalent", file=sys.stderr)
    return 1


def _cmd_spectrum(args):
    w, _ = load_weights(args.input)
    report = spectrum_report(w)
    with open(args.csv, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv(layer=args.layer))
    print(report.summary())
    print(f"wrote {args.csv}")
    return 0


def _cmd_count_params(args):
    method = args.method
    rank = None
    if ":" in method:
        method, rank_text = method.split(":", 1)
        try:
            rank = int(rank_text)
        except ValueError:
            raise CloverError(f"bad rank in method spec {args.method!r}") from None
    report = count_params((args.D, args.h, args.d), method, rank=rank)
    print(report.to_text())
    return 0


def _cmd_train_toy(args):
    f, _ = load_factors(args.factors)
    kind = "associative-recall" if args.task == "recall" else "sequence-regression"
    task = make_toy_task(kind, args.seed, (args.batch, args.seq, f.dims[0]))
    mask = MaskSpec.parse(args.mask)
    rope = RopeSpec.on(args.rope_base) if args.rope else RopeSpec.off()
    state = train_toy(f, task, steps=args.steps, lr=args.lr, optimizer=args.optimizer, mask=mask, rope=rope)
    first, last = state.loss_history[0], state.loss_history[-1]
    print(f"steps {state.step}: loss {first:.6g} -> {last:.6g}")
    if args.out:
        from .archive import save_train_state

        save_train_state(args.out, state, mask_kind=args.mask, rope=rope, task=task)
        print(f"wrote train state to {args.out}")
    if args.loss_csv:
        with open(args.loss_csv, "w", encoding="utf-8") as fh:
            fh.write(state.loss_csv())
        print(f"wrote loss history to {args.loss_csv}")
    return 0


def _cmd_merge(args):
    f, _ = load_factors(args.factors)
    w = merge_back(f)
    save_weights(args.output, w)
    print(f"wrote merged plain weights (inner dim {w.dims[2]}) to {args.output}")
    return 0


def _cmd_gen(args):
    if args.heads_rank:
        w = low_rank_weights(args.D, args.h, args.d, args.heads_rank, seed=args.seed, noise=args.noise, bias=args.bias)
        detail = f"per-head rank {args.heads_rank}"
    else:
        w = random_weights(args.D, args.h, args.d, seed=args.seed, bias=args.bias)
        detail = "full rank"
    save_weights(args.output, w)
    print(f"wrote {detail} weights D={args.D} h={args.h} d={args.d} (seed {args.seed}) to {args.output}")
    return 0


def cli_dispatch(argv):
    """Run one CLI invocation; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CloverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
