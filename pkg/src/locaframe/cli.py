"""Command-line interface.

Exit codes: 0 success, 1 invalid input or configuration, 2 a numerical
self-check failed.
"""
from __future__ import annotations

import os

# single-threaded BLAS by default so repeated runs are bitwise reproducible
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import logging
import sys

import numpy as np

from . import bench, experiments
from .errors import DecompositionFailed, LocaframeError, TrainingDiverged
from .frames import frame_equivariance_error
from .group import random_rotation_matrices
from .model import build_model, equivariance_error, radius_graph
from .reps import RepKind, decompose_cartesian, parse_repspec, representation_errors

EXIT_OK, EXIT_INVALID, EXIT_CHECK = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _write(path: str | None, text: str):
    if not path:
        return
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def _dump_json(path, obj):
    _write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _int_list(text: str) -> list[int]:
    """``"0-4"`` or ``"1,3,5"`` or a mix."""
    out = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


# ---------------------------------------------------------------------------
# reps
# ---------------------------------------------------------------------------


def cmd_reps_parse(args) -> int:
    report = {}
    for kind in (RepKind.CARTESIAN, RepKind.IRREP):
        try:
            spec = parse_repspec(args.spec, kind)
        except LocaframeError as exc:
            print(f"{kind.value}: {exc}")
            report[kind.value] = {"error": str(exc)}
            continue
        dims = "+".join(str(b.dim) for b in spec.blocks)
        blocks = ", ".join(f"{b.multiplicity}x{b.degree}{b.parity.value}" for b in spec.blocks)
        print(f"{kind.value}: blocks [{blocks}] total_dim {dims}={spec.total_dim}")
        report[kind.value] = {
            "blocks": [[b.multiplicity, b.degree, b.parity.value] for b in spec.blocks],
            "total_dim": spec.total_dim,
        }
    if all("error" in v for v in report.values()):
        return EXIT_INVALID
    _dump_json(args.out, report)
    return EXIT_OK


def cmd_reps_check(args) -> int:
    errs = representation_errors(args.l, args.n, args.pairs, np.random.default_rng(args.seed))
    worst_h = max(v["homomorphism"] for v in errs.values())
    worst_o = max(v["orthogonality"] for v in errs.values())
    for key, v in errs.items():
        print(f"{key:16s} homomorphism {v['homomorphism']:.2e}  orthogonality {v['orthogonality']:.2e}")
    ok = worst_h < args.tol and worst_o < args.tol
    print(f"max homomorphism {worst_h:.2e}, max orthogonality {worst_o:.2e}, tol {args.tol:g}: {'PASS' if ok else 'FAIL'}")
    _dump_json(args.out, {"tol": args.tol, "passed": ok, "reps": errs})
    return EXIT_OK if ok else EXIT_CHECK


def cmd_reps_decompose(args) -> int:
    try:
        tw = decompose_cartesian(args.order)
    except DecompositionFailed as exc:
        print(f"decomposition failed: {exc}")
        return EXIT_CHECK
    plain = " + ".join(f"{b.multiplicity}x{b.degree}" for b in tw.target.blocks)
    print(f"{plain}, residual < 1e-9")
    print(f"with parity: {tw.target}, dims {'+'.join(str(b.dim) for b in tw.target.blocks)}={tw.target.total_dim}, residual {tw.residual:.2e}")
    _dump_json(args.out, {
        "order": args.order,
        "irreps": str(tw.target),
        "multiset": {str(k): v for k, v in tw.multiset.items()},
        "residual": tw.residual,
        "matrix": tw.matrix.tolist(),
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# frames / equivariance
# ---------------------------------------------------------------------------


def cmd_frames_check(args) -> int:
    ds = experiments.ToyDataset.load(args.dataset)
    rng = np.random.default_rng(args.seed)
    worst, degenerate, nodes = 0.0, 0, 0
    for mol in ds.molecules:
        edges = radius_graph(mol.positions, np.zeros(len(mol.charges), dtype=np.int64), args.cutoff)
        rots = random_rotation_matrices(rng, args.transforms)
        shifts = rng.normal(scale=5.0, size=(args.transforms, 3))
        err, deg = frame_equivariance_error(mol.positions, edges, rots, shifts)
        worst, degenerate, nodes = max(worst, err), degenerate + deg, nodes + len(mol.charges)
    ok = worst < args.tol
    print(f"{len(ds)} molecules, {nodes} nodes ({degenerate} degenerate), max frame error {worst:.2e}, tol {args.tol:g}: {'PASS' if ok else 'FAIL'}")
    _dump_json(args.out, {"molecules": len(ds), "nodes": nodes, "degenerate": degenerate, "max_error": worst, "tol": args.tol, "passed": ok})
    return EXIT_OK if ok else EXIT_CHECK


def cmd_equivariance(args) -> int:
    cfg = _load_config(args)
    modes = experiments.MODES if args.all_modes else (cfg.model.mode,)
    rng = np.random.default_rng(cfg.seed)
    ds = experiments.generate_dataset(rng, args.molecules, tuple(cfg.dataset.get("nodes_range", (3, 12))))
    tol = args.tol if args.tol is not None else (1e-10 if cfg.model.dtype == "float64" else 1e-6)
    report, ok = {}, True
    for mode in modes:
        mcfg = cfg.replace(model_changes={"mode": mode}).model
        if mcfg.frames != "predicted":
            raise UsageError("equivariance checks need predicted frames")
        model = build_model(mcfg, seed=cfg.seed)
        worst, skipped = 0.0, 0
        for mol in ds.molecules:
            rots = random_rotation_matrices(rng, args.transforms)
            shifts = rng.normal(scale=5.0, size=(args.transforms, 3))
            err, degenerate = equivariance_error(model, mol.positions, mol.charges[:, None], rots, shifts)
            if degenerate:
                skipped += 1
                continue
            worst = max(worst, err)
        passed = worst < tol
        ok &= passed
        report[mode] = {"max_error": worst, "skipped_degenerate": skipped, "passed": passed}
        print(f"{mode:10s} target {mcfg.target:6s} max error {worst:.2e} ({skipped} degenerate molecules skipped): {'PASS' if passed else 'FAIL'}")
    _dump_json(args.out, {"tol": tol, "modes": report})
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------------------
# bench / data / training
# ---------------------------------------------------------------------------


def cmd_bench_reps(args) -> int:
    results = bench.bench_transforms(
        degrees=_int_list(args.degrees),
        multiplicities=_int_list(args.mult),
        batch=args.batch,
        reps=args.reps,
        cartesian_orders=_int_list(args.orders),
        wigner_batch=args.wigner_batch,
        threads=args.threads,
        seed=args.seed,
    )
    for r in results:
        print(f"{r.kind:9s} degree {r.degree:2d} mult {r.multiplicity:3d} batch {r.batch:5d} components {r.components:3d} median {r.median_seconds * 1e6:10.1f} us")
    diag = bench.diagnostics(results)
    print(f"wigner exponent {diag['wigner_exponent']:.2f} (expected in [2, 4])")
    print("cartesian ratios " + ", ".join(f"t({n + 1})/t({n})={v:.2f}" for n, v in diag["cartesian_ratios"].items()))
    _write(args.out, bench.to_csv(results))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    lo, hi = args.nodes
    ds = experiments.generate_dataset(np.random.default_rng(args.seed), args.n, (lo, hi), args.box)
    text = ds.to_jsonl()
    if args.out:
        _write(args.out, text)
        print(f"wrote {len(ds)} molecules to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _load_config(args) -> experiments.ExperimentConfig:
    cfg = experiments.ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.seeds = [args.seed + k for k in range(len(cfg.seeds))]
    return cfg


def _out_dir(args, cfg) -> str | None:
    return args.out or cfg.out


def cmd_train(args) -> int:
    cfg = _load_config(args)
    ds = experiments.dataset_from_config(cfg)
    rep = experiments.train(cfg, ds, out_dir=_out_dir(args, cfg))
    for epoch, (tl, vl) in enumerate(zip(rep.train_loss, rep.val_loss or [float("nan")] * len(rep.train_loss)), 1):
        print(f"epoch {epoch:3d} train {tl:.5f} val {vl:.5f}")
    print(f"test rmse {rep.test_rmse:.5f} mae {rep.test_mae:.5f} ({cfg.model.target} target, {cfg.model.mode} mode)")
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = _load_config(args)
    ds = experiments.dataset_from_config(cfg)
    res = experiments.representation_study(cfg, ds, out_dir=_out_dir(args, cfg))
    for mode, rmse in sorted(res.median_rmse().items(), key=lambda kv: kv[1]):
        print(f"{mode:10s} median test rmse {rmse:.5f}")
    for check, ok in res.ordering().items():
        print(f"{check}: {'yes' if ok else 'no'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    ds = experiments.dataset_from_config(cfg)
    res = experiments.data_efficiency_sweep(cfg, ds, out_dir=_out_dir(args, cfg))
    for (variant, frac), err in res.median_errors().items():
        print(f"{variant:12s} fraction {frac:.2f} median test rmse {err:.5f}")
    for variant, slope in res.slopes().items():
        print(f"{variant:12s} log-log slope {slope:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="locaframe", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(sp, seed_default=0):
        sp.add_argument("--out", help="machine-readable output file or directory")
        sp.add_argument("--seed", type=int, default=seed_default)

    reps = sub.add_parser("reps", help="representation utilities")
    rsub = reps.add_subparsers(dest="reps_command", parser_class=_Parser, required=True)
    sp = rsub.add_parser("parse", help="parse a rep spec such as 8x0p+4x1n")
    sp.add_argument("spec")
    common(sp)
    sp.set_defaults(fn=cmd_reps_parse)
    sp = rsub.add_parser("check", help="homomorphism and orthogonality suite")
    sp.add_argument("--l", type=int, default=8, help="highest irrep degree")
    sp.add_argument("--n", type=int, default=4, help="highest Cartesian order")
    sp.add_argument("--pairs", type=int, default=50)
    sp.add_argument("--tol", type=float, default=1e-9)
    common(sp)
    sp.set_defaults(fn=cmd_reps_check)
    sp = rsub.add_parser("decompose", help="Cartesian tensor to irreps")
    sp.add_argument("--order", type=int, required=True)
    common(sp)
    sp.set_defaults(fn=cmd_reps_decompose)

    frames = sub.add_parser("frames", help="local frame utilities")
    fsub = frames.add_subparsers(dest="frames_command", parser_class=_Parser, required=True)
    sp = fsub.add_parser("check", help="frame equivariance on a JSONL dataset")
    sp.add_argument("dataset")
    sp.add_argument("--cutoff", type=float, default=5.0)
    sp.add_argument("--transforms", type=int, default=20)
    sp.add_argument("--tol", type=float, default=1e-10)
    common(sp)
    sp.set_defaults(fn=cmd_frames_check)

    sp = sub.add_parser("equivariance", help="end-to-end model invariance report")
    sp.add_argument("config")
    sp.add_argument("--molecules", type=int, default=20)
    sp.add_argument("--transforms", type=int, default=20)
    sp.add_argument("--tol", type=float)
    sp.add_argument("--all-modes", action="store_true")
    common(sp, None)
    sp.set_defaults(fn=cmd_equivariance)

    b = sub.add_parser("bench", help="benchmarks")
    bsub = b.add_subparsers(dest="bench_command", parser_class=_Parser, required=True)
    sp = bsub.add_parser("reps", help="time irrep and Cartesian transforms")
    sp.add_argument("--degrees", default="0-16")
    sp.add_argument("--orders", default="0-4")
    sp.add_argument("--mult", default="16")
    sp.add_argument("--batch", type=int, default=2048)
    sp.add_argument("--wigner-batch", type=int, default=64)
    sp.add_argument("--reps", type=int, default=30)
    sp.add_argument("--threads", type=int, default=1)
    common(sp)
    sp.set_defaults(fn=cmd_bench_reps)

    sp = sub.add_parser("gen-data", help="write a synthetic JSONL dataset")
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--nodes", type=int, nargs=2, default=(3, 12), metavar=("MIN", "MAX"))
    sp.add_argument("--box", type=float, default=1.0)
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    for name, fn, text in (
        ("train", cmd_train, "train one model"),
        ("study", cmd_study, "compare message modes"),
        ("sweep", cmd_sweep, "data-efficiency sweep"),
    ):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("config")
        common(sp, None)
        sp.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DecompositionFailed, TrainingDiverged) as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (LocaframeError, ValueError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
