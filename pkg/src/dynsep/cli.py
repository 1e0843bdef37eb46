"""``dynsep`` command line: train, eval, enumerate, select, extract, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Files are only
written below ``--out``; human-readable output goes to stdout and every
table is also written as CSV when ``--out`` is given.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig, load_config
from .deploy import (
    BudgetTooSmall,
    CheckpointError,
    SubnetConfig,
    enumerate_costs,
    extract_subnet,
    load_checkpoint,
    save_checkpoint,
    select_config,
)
from .model import check_subnet, init_model
from .spectral import read_wav, snr_db
from .training import (
    DataSpec,
    EpochRecord,
    TrainingDiverged,
    evaluate_snr,
    make_batch,
    make_test_set,
    separate,
    subnet_loss,
    synth_batch,
    train,
)

METRICS_HEADER = ["epoch", "train_loss", "val_loss", "lr", "histogram"]


class UsageError(Exception):
    pass


def _out_dir(args, required=False) -> Path | None:
    if args.out is None:
        if required:
            raise UsageError(f"{args.command} needs --out")
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    try:
        return load_config(args.config, overrides)
    except ConfigError as e:
        raise UsageError(str(e)) from e


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def _subnet_arg(args, config) -> tuple[int, int]:
    w = config.max_width if args.w is None else args.w
    d = config.max_depth if args.d is None else args.d
    try:
        check_subnet(config, w, d)
    except ValueError as e:
        raise UsageError(str(e)) from e
    return w, d


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    run = _run_config(args)
    out = _out_dir(args, required=True)
    (out / "config.txt").write_text(run.snapshot())
    metrics = open(out / "metrics.csv", "w", newline="")
    wr = csv.writer(metrics, lineterminator="\n")
    wr.writerow(METRICS_HEADER)

    def on_epoch(rec: EpochRecord):
        wr.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_loss), repr(rec.lr), rec.histogram_str()])
        metrics.flush()
        print(f"epoch {rec.epoch:3d}  train {rec.train_loss:.5f}  val {rec.val_loss:.5f}  lr {rec.lr:.6g}")

    try:
        result = train(init_model(run.model, seed=run.train.seed), run.data, run.train, on_epoch=on_epoch)
    finally:
        metrics.close()
    save_checkpoint(result.params, out / "best.ckpt")
    print(f"best epoch {result.best_epoch}; checkpoint {out / 'best.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint, dtype=args.dtype)
    w, d = _subnet_arg(args, params.config)
    out = _out_dir(args)
    rows = []
    if args.mixture or args.target:
        if not args.target:
            raise UsageError("eval with WAV files needs --target")
        target = read_wav(args.target)
        if args.oracle:
            estimate = target.samples
        else:
            if not args.mixture:
                raise UsageError("eval needs --mixture unless --oracle is given")
            mixture = read_wav(args.mixture)
            if mixture.sample_rate != params.config.sample_rate:
                raise UsageError(
                    f"{args.mixture}: sample rate {mixture.sample_rate}, model expects {params.config.sample_rate}"
                )
            if mixture.samples.shape != target.samples.shape:
                raise UsageError("mixture and target WAVs differ in shape")
            estimate = separate(params, mixture.samples, w, d)
        rows.append((Path(args.target).name, snr_db(target.samples, estimate)))
    else:
        run = _run_config(args)
        items = make_test_set(run.data, args.batches, args.seed if args.seed is not None else 0)
        if args.oracle:
            snrs = [snr_db(t[b], t[b]) for _, t in items for b in range(t.shape[0])]
        else:
            snrs = evaluate_snr(params, items, w, d)
        rows.extend((f"synth{i}", s) for i, s in enumerate(snrs))
    mean = float(np.mean([s for _, s in rows]))
    for name, s in rows:
        print(f"{name}\t{s:.4f}")
    print(f"mean SNR at (w={w}, d={d}): {mean:.4f} dB")
    if out is not None:
        _write_csv(out / "eval.csv", ["item", "w", "d", "snr_db"],
                   [(n, w, d, repr(float(s))) for n, s in rows] + [("mean", w, d, repr(mean))])
    return 0


def cmd_enumerate(args) -> int:
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint, dtype=args.dtype)
        config = params.config
    else:
        params, config = None, _run_config(args).model
    table = enumerate_costs(config)
    if params is not None and args.measure:
        run = _run_config(args)
        items = make_test_set(run.data, args.batches, args.seed if args.seed is not None else 0)
        for r in table.rows:
            r.snr_db = float(np.mean(evaluate_snr(params, items, r.w, r.d)))
    print(f"{'w':>3} {'d':>3} {'params':>10} {'MACs/s':>14}" + ("  SNR dB" if args.measure and params else ""))
    for r in table.rows:
        tail = f"  {r.snr_db:.3f}" if r.snr_db is not None else ""
        print(f"{r.w:>3} {r.d:>3} {r.params:>10} {r.macs_per_s:>14.6g}{tail}")
    print(f"{len(table)} subnetworks")
    out = _out_dir(args)
    if out is not None:
        table.to_csv(out / "costs.csv")
    return 0


def _budget_config(args):
    if args.checkpoint:
        return load_checkpoint(args.checkpoint, dtype=args.dtype).config
    return _run_config(args).model


def cmd_select(args) -> int:
    if args.max_macs is None and args.max_params is None:
        raise UsageError("select needs --max-macs and/or --max-params")
    table = enumerate_costs(_budget_config(args))
    sub = select_config(table, args.max_macs, args.max_params, prefer=args.prefer)
    row = table.lookup(sub.w, sub.d)
    print(f"selected w={sub.w} d={sub.d}  params={row.params}  macs_per_s={row.macs_per_s:.6g}")
    out = _out_dir(args)
    if out is not None:
        _write_csv(out / "selection.csv", ["w", "d", "params", "macs_per_s"],
                   [(row.w, row.d, row.params, repr(float(row.macs_per_s)))])
    return 0


def cmd_extract(args) -> int:
    params = load_checkpoint(args.checkpoint, dtype=args.dtype)
    out = _out_dir(args, required=True)
    if args.max_macs is not None or args.max_params is not None:
        if args.w is not None or args.d is not None:
            raise UsageError("give either --w/--d or a budget, not both")
        sub = select_config(enumerate_costs(params.config), args.max_macs, args.max_params, prefer=args.prefer)
    else:
        sub = SubnetConfig(*_subnet_arg(args, params.config))
    small = extract_subnet(params, sub)
    path = out / f"subnet_w{sub.w}_d{sub.d}.ckpt"
    save_checkpoint(small, path)
    print(f"extracted w={sub.w} d={sub.d} ({small.num_parameters()} parameters) -> {path}")
    return 0


def cmd_gradcheck(args) -> int:
    run = _run_config(args)
    config = run.model.replace(dtype="float64")
    w, d = _subnet_arg(args, config)
    seed = args.seed if args.seed is not None else 0
    params = init_model(config, seed=seed)
    rng = np.random.default_rng([seed, 4])
    probe = DataSpec(duration=args.samples / config.sample_rate, sample_rate=config.sample_rate, batch_size=1)
    mixture, target = synth_batch(rng, probe)
    batch = make_batch(mixture, target, config.window, config.hop)
    err = T.grad_check(lambda _: subnet_loss(params, batch, w, d), params.parameters(),
                       max_coords=args.coords, seed=seed)
    ok = err < args.tol
    print(f"gradcheck (w={w}, d={d}): max relative error {err:.3e} ({'ok' if ok else 'FAIL'}, tolerance {args.tol:g})")
    out = _out_dir(args)
    if out is not None:
        _write_csv(out / "gradcheck.csv", ["w", "d", "max_rel_error", "ok"], [(w, d, repr(err), int(ok))])
    return 0 if ok else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynsep", description="Dynamic width/depth source separation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="INI file or preset name (desk, paper)")
            sp.add_argument("--set", action="append", metavar="K=V", help="override, e.g. model.max_width=2")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")

    def subnet(sp):
        sp.add_argument("--w", type=int, help="width (default: maximum)")
        sp.add_argument("--d", type=int, help="depth (default: maximum)")

    def budget(sp):
        sp.add_argument("--max-macs", type=float)
        sp.add_argument("--max-params", type=float)
        sp.add_argument("--prefer", choices=("depth", "width"), default="depth")

    def ckpt(sp, required):
        sp.add_argument("--checkpoint", required=required)
        sp.add_argument("--dtype", choices=("float32", "float64"), default="float32",
                        help="precision to run a loaded checkpoint in")

    sp = sub.add_parser("train", help="train the full dynamic model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="SNR of a subnetwork on synthetic clips or WAV files")
    common(sp)
    ckpt(sp, True)
    subnet(sp)
    sp.add_argument("--batches", type=int, default=4, help="synthetic batches")
    sp.add_argument("--mixture", help="mixture WAV")
    sp.add_argument("--target", help="reference target WAV")
    sp.add_argument("--oracle", action="store_true", help="score the target against itself")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("enumerate", help="cost table of every subnetwork")
    common(sp)
    ckpt(sp, False)
    sp.add_argument("--measure", action="store_true", help="also measure synthetic SNR (needs --checkpoint)")
    sp.add_argument("--batches", type=int, default=2)
    sp.set_defaults(func=cmd_enumerate)

    sp = sub.add_parser("select", help="largest subnetwork inside a budget")
    common(sp)
    ckpt(sp, False)
    budget(sp)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("extract", help="save a subnetwork as its own checkpoint")
    common(sp, config=False)
    ckpt(sp, True)
    subnet(sp)
    budget(sp)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("gradcheck", help="autodiff vs finite differences on a fresh model")
    common(sp)
    subnet(sp)
    sp.add_argument("--coords", type=int, help="check a random subset of this many coordinates")
    sp.add_argument("--samples", type=int, default=192, help="length of the probe clip")
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"dynsep {args.command}: {e}", file=sys.stderr)
        return 2
    except BudgetTooSmall as e:
        print(f"dynsep {args.command}: {e}", file=sys.stderr)
        return 1
    except (CheckpointError, TrainingDiverged, OSError, ValueError, FloatingPointError) as e:
        print(f"dynsep {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
