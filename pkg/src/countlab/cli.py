"""Command-line entry point: construct, analyze, sweep, protocol, plot.

Exit codes: 0 success, 1 verification failure, 2 usage error. Every run
writes ``manifest.json`` into the output directory (``--out-dir``, else
``$COUNTLAB_OUT``, else ``./countlab_out``), including failed runs.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from countlab import __version__

log = logging.getLogger("countlab")

OUT_ENV = "COUNTLAB_OUT"
MAX_EXHAUSTIVE = 2_000_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    return path


def _fmt(x) -> str:
    if x is None:
        return "none"
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


# --------------------------------------------------------------------------
# construct


def _sequences(m: int, n: int, exhaustive: bool, count: int, seed: int) -> np.ndarray:
    if exhaustive:
        if m**n > MAX_EXHAUSTIVE:
            raise UsageError(f"exhaustive check of {m}^{n} sequences is too large")
        return np.array(list(itertools.product(range(1, m + 1), repeat=n)), dtype=np.int64)
    rng = np.random.default_rng(seed)
    return rng.integers(1, m + 1, size=(count, n))


def _embeddings(args):
    from countlab.analysis import random_rademacher_embeddings
    from countlab.embeddings import one_hot

    d = args.d if args.d is not None else args.m
    if args.embedding == "onehot":
        if d < args.m:
            raise UsageError("one-hot embeddings need --d >= --m")
        return one_hot(args.m, d)
    return random_rademacher_embeddings(args.m, d, args.seed)


def cmd_construct(args, out: Path) -> int:
    from countlab import constructions as C
    from countlab.nn import forward_many
    from countlab.serialize import save_model

    m, n = args.m, args.n
    if args.task == "qc-hist":
        report = C.build_qc_histogram(m, n)
    elif args.task == "mfe-hist":
        report = C.build_mfe_histogram(m, n)
    else:
        emb = _embeddings(args)
        build = C.build_qc_countattend if args.task == "qc-attend" else C.build_mfe_two_layer
        report = build(m, emb.d, n, emb)

    seqs = _sequences(m, n, args.exhaustive, args.random, args.seed)
    oracle_fn = C.count_query if args.task.startswith("qc") else C.most_frequent_count
    oracle = np.array([oracle_fn(s) for s in seqs], dtype=np.float64)
    y = forward_many(report.model, seqs)
    if args.task == "mfe-2layer":
        with np.errstate(divide="ignore"):
            value = 1.0 / y
        pred = C.decode_inverse_count(y, n)
    else:
        value = y
        pred = np.floor(y + 0.5)
    failures = int(np.count_nonzero(pred != oracle))
    err = np.abs(value - oracle)
    doc = {
        "task": args.task,
        "m": m,
        "d": report.model.config.model_dim if args.d is None else args.d,
        "n": n,
        "embedding": args.embedding,
        "seed": args.seed,
        "mode": "exhaustive" if args.exhaustive else "random",
        "instances": int(len(seqs)),
        "failures": failures,
        "exact": int(len(seqs)) - failures,
        "max_abs_error": float(err.max()) if np.all(np.isfinite(err)) else None,
        "certified_n": report.certified_n,
        "mlp_width": report.mlp_width,
        "mlp_parameters": report.mlp_parameters,
        "temperature": report.temperature,
        "max_cross_inner": report.max_cross_inner,
    }
    save_model(report.model, out / f"{args.task}_model.json")
    write_json(out / f"{args.task}_report.json", doc)
    log.info("%s: %d/%d exact", args.task, doc["exact"], doc["instances"])
    return 0 if failures == 0 else 1


# --------------------------------------------------------------------------
# analyze


def cmd_analyze(args, out: Path) -> int:
    from countlab import analysis as A

    rows = []
    if args.check == "welch":
        header = ["m", "d", "seed", "max_inner", "welch_bound", "ok"]
        for seed in range(args.seed, args.seed + args.seeds):
            emb = A.random_rademacher_embeddings(args.m, args.d, seed)
            inner, _ = A.max_pairwise_inner(emb)
            bound = A.welch_lower_bound(args.m, args.d)
            rows.append([args.m, args.d, seed, inner, bound, inner >= bound])
    elif args.check == "hoeffding":
        header = ["d", "t", "draws", "seed", "empirical_tail", "hoeffding_bound", "ok"]
        tail = A.empirical_inner_tail(args.d, args.t, args.draws, args.seed)
        bound = A.hoeffding_bound(args.d, args.t)
        rows.append([args.d, args.t, args.draws, args.seed, tail, bound, tail <= bound])
    elif args.check == "pieces":
        header = ["n", "eps", "pieces", "lower_bound", "ok"]
        for n in args.n:
            pieces = A.min_pieces_inverse(n, args.eps)
            lb = A.lemma1_lower_bound(n)
            rows.append([n, args.eps, pieces, lb, pieces >= lb])
    else:  # temperature
        header = ["n", "J", "T", "n_exp_T_J_minus_1", "ok"]
        for n in args.n:
            T = A.required_temperature(n, args.J)
            slack = n * float(np.exp(T * (args.J - 1)))
            rows.append([n, args.J, T, slack, slack <= 0.5])
    path = Path(args.csv) if args.csv else out / f"{args.check}.csv"
    write_csv(path, header, [[_fmt(x) for x in r] for r in rows])
    bad = [r for r in rows if not r[-1]]
    for r in bad:
        log.warning("%s check failed: %s", args.check, dict(zip(header, r)))
    return 0 if not bad else 1


# --------------------------------------------------------------------------
# sweep


def default_m_grid(d: int, points: int = 8) -> list[int]:
    """``points`` roughly geometric vocabulary sizes spanning [4, 4d]."""
    grid = sorted({int(round(x)) for x in np.geomspace(4, 4 * d, points)})
    return grid


def cmd_sweep(args, out: Path) -> int:
    from countlab.training import TrainConfig, sweep_mthr

    cfg = TrainConfig(steps=args.steps, step_size=args.lr, seed=args.seed,
                      eval_examples=args.eval_examples, batch_size=args.batch_size,
                      schedule=args.schedule, warmup=args.warmup)
    grid = {d: (sorted(args.m_list) if args.m_list else default_m_grid(d)) for d in args.d_list}

    def progress(cell):
        log.info("%s d=%d m=%d acc=%s", cell.task, cell.d, cell.m, cell.accuracy)

    res = sweep_mthr(args.task, args.d_list, grid, cfg, threshold=args.threshold,
                     expected_count=args.expected_count, seed=args.seed, jobs=args.jobs,
                     stop_after_fail=args.stop_after_fail, progress=progress)
    results = Path(args.out) if args.out else out / "results.csv"
    write_csv(results, ["task", "d", "m", "n", "steps", "seed", "accuracy"],
              [[c.task, c.d, c.m, c.n, c.steps, c.seed, _fmt(c.accuracy)] for c in res.cells])
    thr_path = results.with_name("thresholds.csv")
    write_csv(thr_path, ["task", "d", "m_thr"], [[args.task, d, _fmt(t)] for d, t in res.thresholds])
    if args.svg:
        from countlab.plots import emit_plot

        emit_plot(thr_path, "mthr", args.svg)
    return 0 if all(c.accuracy is not None for c in res.cells) else 1


# --------------------------------------------------------------------------
# protocol


def cmd_protocol(args, out: Path) -> int:
    from countlab import protocol as P

    insts = list(P.all_instances(args.nbits)) if args.exhaustive else P.random_instances(
        args.nbits, args.random, args.seed)
    transcripts, hits, valid = [], 0, True
    d = P.vocab_size_for(args.nbits)
    for inst in insts:
        t = P.run_protocol(inst, p=args.p)
        ok = t.output == P.disjointness_oracle(inst)
        hits += ok
        valid &= t.valid and t.total_bits == P.expected_bits(d, args.p, 1)
        doc = t.to_dict()
        doc.update(a=list(inst.a), b=list(inst.b), oracle=P.disjointness_oracle(inst))
        transcripts.append(doc)
    rate = hits / len(insts)
    write_json(out / "transcripts.json", transcripts)
    write_csv(out / "protocol_summary.csv", ["nbits", "p", "d", "h", "total_bits", "agreement_rate"],
              [[args.nbits, args.p, d, 1, P.expected_bits(d, args.p, 1), _fmt(rate)]])
    log.info("agreement %.4f over %d instances", rate, len(insts))
    return 0 if rate == 1.0 and valid else 1


# --------------------------------------------------------------------------
# plot


def cmd_plot(args, out: Path) -> int:
    from countlab.plots import PlotSchemaError, emit_plot

    try:
        path = emit_plot(args.csv, args.kind, args.svg or out / f"{Path(args.csv).stem}.svg")
    except (PlotSchemaError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from exc
    log.info("wrote %s", path)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="countlab", description="counting constructions, bounds and training sweeps")
    p.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_ENV} or ./countlab_out)")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("construct", help="build a hand-set model and verify it against the oracle")
    c.add_argument("--task", required=True, choices=["qc-hist", "qc-attend", "mfe-hist", "mfe-2layer"])
    c.add_argument("--m", type=int, required=True)
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--d", type=int, default=None)
    c.add_argument("--embedding", choices=["onehot", "rademacher"], default="onehot")
    c.add_argument("--seed", type=int, default=0)
    mode = c.add_mutually_exclusive_group()
    mode.add_argument("--exhaustive", action="store_true")
    mode.add_argument("--random", type=int, default=1000, metavar="N")

    a = sub.add_parser("analyze", help="numeric checks of the bounds")
    a.add_argument("--check", required=True, choices=["welch", "hoeffding", "pieces", "temperature"])
    a.add_argument("--m", type=int, default=1000)
    a.add_argument("--d", type=int, default=128)
    a.add_argument("--n", type=int, nargs="+", default=[64])
    a.add_argument("--eps", type=float, default=0.5)
    a.add_argument("--t", type=float, default=0.4)
    a.add_argument("--J", type=float, default=0.0)
    a.add_argument("--draws", type=int, default=100_000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--seeds", type=int, default=1)
    a.add_argument("--csv", default=None)

    s = sub.add_parser("sweep", help="train models over (d, m) and locate m_thr(d)")
    s.add_argument("--task", required=True, choices=["QC", "MFE"])
    s.add_argument("--d-list", type=int, nargs="+", default=[8, 16, 32])
    s.add_argument("--m-list", type=int, nargs="+", default=None)
    s.add_argument("--steps", type=int, default=20000)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--schedule", choices=["constant", "linear"], default="linear")
    s.add_argument("--warmup", type=int, default=500)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--eval-examples", type=int, default=1600)
    s.add_argument("--expected-count", type=int, default=10)
    s.add_argument("--threshold", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--stop-after-fail", action="store_true")
    s.add_argument("--out", default=None)
    s.add_argument("--svg", default=None)

    q = sub.add_parser("protocol", help="simulate the set-disjointness protocol")
    q.add_argument("--nbits", type=int, required=True)
    q.add_argument("--p", type=int, default=32)
    qm = q.add_mutually_exclusive_group()
    qm.add_argument("--exhaustive", action="store_true")
    qm.add_argument("--random", type=int, default=1000, metavar="N")
    q.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("plot", help="render a CSV artifact as SVG")
    g.add_argument("--csv", required=True)
    g.add_argument("--kind", required=True, choices=["mthr", "gemini-style-error", "pieces"])
    g.add_argument("--svg", default=None)
    return p


COMMANDS = {
    "construct": cmd_construct,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
    "protocol": cmd_protocol,
    "plot": cmd_plot,
}


def _guess_out_dir(argv: list[str]) -> Path:
    for i, tok in enumerate(argv):
        if tok == "--out-dir" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if tok.startswith("--out-dir="):
            return Path(tok.split("=", 1)[1])
    return Path(os.environ.get(OUT_ENV) or "countlab_out")


def _versions() -> dict:
    import matplotlib

    return {"countlab": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "matplotlib": matplotlib.__version__}


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    start = time.perf_counter()
    out = _guess_out_dir(argv)
    flags: dict = {}
    command = None
    code = 2
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "out_dir")}
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(message)s", stream=sys.stderr, force=True)
        out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[command](args, out)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        code = 2
    except ValueError as exc:
        print(f"countlab: error: {exc}", file=sys.stderr)
        code = 2
    finally:
        manifest = {
            "subcommand": command,
            "argv": argv,
            "flags": flags,
            "seed": flags.get("seed"),
            "versions": _versions(),
            "wall_time_s": round(time.perf_counter() - start, 3),
            "exit_code": code,
        }
        try:
            write_json(out / "manifest.json", manifest)
        except OSError as exc:
            print(f"countlab: could not write manifest: {exc}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(dispatch())
