"""End-to-end acceptance checks, one test per criterion.

Every test records a one-line verdict that is printed in the pytest terminal
summary, then asserts. Thresholds here are the acceptance thresholds; they
are not tuned to the observed numbers.
"""
import csv
import io
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from harmonics import random_unit_vectors, real_sph_harm
from locaframe import bench, nn
from locaframe.cli import main
from locaframe.embeddings import BesselConfig, angular_embed, init_bessel, radial_embed
from locaframe.experiments import (
    ExperimentConfig,
    data_efficiency_sweep,
    dataset_from_config,
    generate_dataset,
    representation_study,
    train,
)
from locaframe.frames import compute_frames, frame_equivariance_error
from locaframe.group import random_rotation_matrices
from locaframe.model import (
    MessageMode,
    ModelConfig,
    attention_block,
    build_context,
    build_model,
    edge_embedding,
    edge_layer,
    equivariance_error,
    init_attention,
    init_edge_layer,
    make_graph,
    radius_graph,
)
from locaframe.reps import (
    MAX_CARTESIAN_ORDER,
    RepAction,
    decompose_cartesian,
    init_mlp_rep,
    mlp_rep_apply,
    parse_repspec,
    representation_errors,
    wigner_d_stack,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def verdict(request):
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(number: int, name: str, ok: bool, detail: str):
        lines.append((number, f"criterion {number:2d} {name}: {'PASS' if ok else 'FAIL'} ({detail})"))
        return ok

    return record


# 1 -----------------------------------------------------------------------------


def test_c01_homomorphism_suite(verdict):
    t0 = time.perf_counter()
    errs = representation_errors(8, MAX_CARTESIAN_ORDER, 50, np.random.default_rng(1))
    elapsed = time.perf_counter() - t0
    worst = max(v["homomorphism"] for v in errs.values())
    both_parities = {k.split(":")[1][-1] for k in errs} == {"n", "p"}
    ok = worst < 1e-9 and elapsed < 10 and len(errs) == 2 * (9 + 5) and both_parities
    verdict(1, "homomorphism suite", ok, f"{len(errs)} reps, max rel error {worst:.1e}, {elapsed:.1f}s")
    assert ok


# 2 -----------------------------------------------------------------------------


def test_c02_wigner_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    rots = random_rotation_matrices(rng, 100)
    u = random_unit_vectors(rng, 100)
    stack = wigner_d_stack(4, rots)
    worst = 0.0
    for l in range(5):
        lhs = np.asarray(real_sph_harm(l, np.einsum("bij,bj->bi", rots, u))).reshape(100, -1)
        rhs = np.einsum("bij,bj->bi", stack[l], np.asarray(real_sph_harm(l, u)).reshape(100, -1))
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 5
    verdict(2, "Wigner oracle", ok, f"l <= 4, 100 (g, u), max error {worst:.1e}, {elapsed:.2f}s")
    assert ok


# 3 -----------------------------------------------------------------------------


def test_c03_decomposition(verdict, capsys):
    t0 = time.perf_counter()
    decompose_cartesian.cache_clear()
    lines = {}
    for order in (2, 3):
        assert main(["reps", "decompose", "--order", str(order)]) == 0
        lines[order] = capsys.readouterr().out.splitlines()[0]
    rng = np.random.default_rng(3)
    worst = 0.0
    dims = {}
    for order in (2, 3):
        tw = decompose_cartesian(order)
        dims[order] = sum(b.multiplicity * (2 * b.degree + 1) for b in tw.target.blocks)
        rots = random_rotation_matrices(rng, 100)
        cart = RepAction(parse_repspec(f"1x{order}n", "cartesian"), rots, np.ones(100)).dense()
        irr = RepAction(tw.target, rots, np.ones(100)).dense()
        worst = max(worst, float(np.max(np.abs(tw.matrix @ cart @ tw.matrix.T - irr))))
    elapsed = time.perf_counter() - t0
    ok = (
        lines[2] == "1x0 + 1x1 + 1x2, residual < 1e-9"
        and lines[3] == "1x0 + 3x1 + 2x2 + 1x3, residual < 1e-9"
        and dims == {2: 9, 3: 27}
        and worst < 1e-9
        and elapsed < 30
    )
    verdict(3, "decomposition", ok, f"'{lines[2]}' / '{lines[3]}', fresh-rotation residual {worst:.1e}, {elapsed:.1f}s")
    assert ok


# 4 -----------------------------------------------------------------------------


def test_c04_frame_equivariance(verdict):
    rng = np.random.default_rng(4)
    worst, degenerate, nodes = 0.0, 0, 0
    for _ in range(50):
        n = int(rng.integers(5, 20))
        pos = rng.uniform(-2, 2, size=(n, 3))
        edges = radius_graph(pos, np.zeros(n, dtype=np.int64), 3.0)
        err, deg = frame_equivariance_error(pos, edges, random_rotation_matrices(rng, 20), rng.normal(scale=3, size=(20, 3)))
        worst, degenerate, nodes = max(worst, err), degenerate + deg, nodes + n
    ok = worst < 1e-10
    verdict(4, "frame equivariance", ok, f"50 clouds x 20 transforms, {nodes} nodes ({degenerate} degenerate skipped), max error {worst:.1e}")
    assert ok


# 5 -----------------------------------------------------------------------------

E2E_MODEL = dict(
    rep="4x0n+2x1n+1x2p", num_layers=3, num_heads=2, attn_dim=8, value_dim=8, mlp_hidden=16, gate_hidden=8,
    mlp_rep_hidden=[8], head_hidden=[16, 8], num_radial=8, num_angular=6, cutoff=2.5,
)


def test_c05_end_to_end_equivariance(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    mols = generate_dataset(rng, 20, (5, 12)).molecules
    train_ds = generate_dataset(np.random.default_rng(50), 40, (5, 10))
    results = {}
    for mode in ("scalar", "cartesian", "irrep", "mlp"):
        for target in ("scalar", "vector", "tensor"):
            for dtype, tol in (("float64", 1e-10), ("float32", 1e-6)):
                cfg = ExperimentConfig.from_dict({
                    "model": {**E2E_MODEL, "mode": mode, "target": target, "dtype": dtype},
                    "epochs": 1, "warmup_epochs": 1, "lr": 1e-2, "seed": 0,
                })
                untrained = build_model(cfg.model, seed=0)
                trained = train(cfg, train_ds).model
                for state, model in (("untrained", untrained), ("trained", trained)):
                    worst, skipped = 0.0, 0
                    for m in mols:
                        err, degenerate = equivariance_error(
                            model, m.positions, m.charges[:, None],
                            random_rotation_matrices(rng, 20), rng.normal(scale=3, size=(20, 3)),
                        )
                        if degenerate:
                            skipped += 1
                            continue
                        worst = max(worst, err)
                    results[(mode, target, dtype, state)] = (worst, tol, skipped)
    elapsed = time.perf_counter() - t0
    failures = [k for k, (w, tol, _) in results.items() if not w < tol]
    skipped = max(s for _, _, s in results.values())
    w64 = max(w for (_, _, d, _), (w, _, _) in results.items() if d == "float64")
    w32 = max(w for (_, _, d, _), (w, _, _) in results.items() if d == "float32")
    ok = not failures and skipped <= 5 and elapsed < 120
    verdict(5, "end-to-end invariance/equivariance", ok,
            f"4 modes x 3 targets, untrained+trained, max error {w64:.1e} (f64) / {w32:.1e} (f32), "
            f"{skipped} degenerate molecules skipped, {elapsed:.0f}s" + (f", failing {failures}" if failures else ""))
    assert ok


# 6 -----------------------------------------------------------------------------


def test_c06_gradient_checks(verdict):
    rng = np.random.default_rng(6)
    pos = rng.uniform(0, 1.8, size=(6, 3))
    g = make_graph(pos, np.zeros((6, 1)), 2.5)
    ctx = build_context(g, compute_frames(pos, g.edge_index))
    cfg = ModelConfig.from_dict({**E2E_MODEL, "mode": "cartesian"})
    bessel = cfg.bessel
    edge_dim = bessel.num_radial + 3 * bessel.num_angular
    reports = {}

    # EDGE layer, cartesian and irrep transport
    for kind in ("cartesian", "irrep"):
        p = nn.ParamStore()
        init_bessel(p, bessel, "embed")
        mode = MessageMode.build(kind, "2x0n+1x1n+1x2n")
        init_edge_layer(p, "edge", mode.dim, mode.dim, edge_dim, 8, rng)
        p.add("f", rng.standard_normal((6, mode.dim)))
        w = rng.standard_normal((len(ctx.src), mode.dim))
        reports[f"edge[{kind}]"] = nn.grad_check(lambda: nn.tsum(edge_layer(p, "edge", mode, ctx, p["f"], edge_embedding(p, bessel, ctx)) * w), p, max_entries=None)

    # attention block
    p = nn.ParamStore()
    init_bessel(p, bessel, "embed")
    mode = MessageMode.build("cartesian", cfg.rep)
    init_attention(p, "attn", mode, cfg, rng)
    p.add("f", rng.standard_normal((6, mode.dim)))
    w = rng.standard_normal((6, mode.dim))
    reports["attention"] = nn.grad_check(lambda: nn.tsum(attention_block(p, "attn", mode, ctx, p["f"], edge_embedding(p, bessel, ctx), cfg.num_heads) * w), p, max_entries=None)

    # LayerNorm
    p = nn.ParamStore()
    nn.init_layernorm(p, "ln", 7)
    p["ln.scale"].data[:] = rng.standard_normal(7)
    p["ln.shift"].data[:] = rng.standard_normal(7)
    p.add("x", rng.standard_normal((5, 7)))
    w = rng.standard_normal((5, 7))
    reports["layernorm"] = nn.grad_check(lambda: nn.tsum(nn.layernorm(p, "ln", p["x"]) * w), p, max_entries=None)

    # embeddings with learnable frequencies
    bc = BesselConfig(num_radial=6, num_angular=5, cutoff=2.0)
    p = nn.ParamStore()
    init_bessel(p, bc, "e")
    p.add("r", rng.uniform(0.2, 1.9, size=9))
    u = random_unit_vectors(rng, 9)
    w1, w2 = rng.standard_normal((9, 6)), rng.standard_normal((9, 15))
    reports["radial"] = nn.grad_check(lambda: nn.tsum(radial_embed(bc, p["r"], p["e.radial_freq"]) * w1), p, names=["r", "e.radial_freq"], max_entries=None)
    reports["angular"] = nn.grad_check(lambda: nn.tsum(angular_embed(bc, u, p["e.angular_freq"]) * w2), p, names=["e.angular_freq"], max_entries=None)

    # MLP representation
    p = nn.ParamStore()
    init_mlp_rep(p, "m", 5, (8,), rng)
    p.add("x", rng.standard_normal((7, 5)))
    rots = random_rotation_matrices(rng, 7)
    w = rng.standard_normal((7, 5))
    reports["mlp_rep"] = nn.grad_check(lambda: nn.tsum(mlp_rep_apply(p, rots, p["x"], name="m") * w), p, max_entries=None)

    worst = max(r.max_rel_error for r in reports.values())
    ok = all(r.passed for r in reports.values()) and worst < 1e-6
    verdict(6, "gradient checks", ok, ", ".join(f"{k} {r.max_rel_error:.1e}" for k, r in reports.items()))
    assert ok


# 7 -----------------------------------------------------------------------------


@pytest.mark.slow
def test_c07_representation_study_ordering(verdict, tmp_path):
    cfg = ExperimentConfig.load(CONFIGS / "study_vector.json")
    cfg = cfg.replace(modes=["scalar", "cartesian", "irrep"])
    assert cfg.model.target == "vector" and len(cfg.seeds) == 3
    ds = dataset_from_config(cfg)
    t0 = time.perf_counter()
    res = representation_study(cfg, ds, out_dir=str(tmp_path))
    elapsed = time.perf_counter() - t0
    med = res.median_rmse()
    order = res.ordering()
    ok = order["cartesian<scalar"] and order["irrep<scalar"] and elapsed < 1800
    verdict(7, "representation-study ordering", ok,
            f"median test RMSE scalar {med['scalar']:.4f}, cartesian {med['cartesian']:.4f}, irrep {med['irrep']:.4f}, {elapsed / 60:.1f} min")
    assert ok


# 8 -----------------------------------------------------------------------------


@pytest.mark.slow
def test_c08_data_efficiency_slopes(verdict, tmp_path):
    cfg = ExperimentConfig.load(CONFIGS / "sweep_vector.json")
    assert list(cfg.fractions) == [0.1, 0.3, 1.0] and len(cfg.seeds) == 3
    ds = dataset_from_config(cfg)
    t0 = time.perf_counter()
    res = data_efficiency_sweep(cfg, ds, out_dir=str(tmp_path))
    elapsed = time.perf_counter() - t0
    slopes = res.slopes()
    ok = slopes["equivariant"] <= slopes["augmented"] and elapsed < 1800
    med = res.median_errors()
    errs = "; ".join(f"{v} " + "/".join(f"{med[(v, f)]:.3f}" for f in cfg.fractions) for v in ("equivariant", "augmented"))
    verdict(8, "data-efficiency slopes", ok,
            f"slope equivariant {slopes['equivariant']:.3f} vs augmented {slopes['augmented']:.3f}; RMSE at 0.1/0.3/1.0: {errs}; {elapsed / 60:.1f} min")
    assert ok


# 9 -----------------------------------------------------------------------------


@pytest.mark.slow
def test_c09_complexity_diagnostics(verdict, tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "reps", "--degrees", "0-16", "--orders", "0-4", "--out", str(out)]) == 0
    rows = bench.read_csv(out.read_text())
    exponent = bench.wigner_exponent(rows, 4, 16)
    ratios = bench.cartesian_ratios(rows)
    counts_ok = all(r.components == (3**r.degree if r.kind == "cartesian" else 2 * r.degree + 1) for r in rows)
    degrees = {r.degree for r in rows if r.kind == "wigner"}
    ok = 2 <= exponent <= 4 and all(ratios[n] >= 2 for n in (1, 2, 3)) and counts_ok and degrees >= set(range(4, 17))
    verdict(9, "complexity diagnostics", ok,
            f"Wigner exponent {exponent:.2f}, cartesian ratios " + ", ".join(f"t({n + 1})/t({n})={ratios[n]:.2f}" for n in (1, 2, 3))
            + f", component counts {'exact' if counts_ok else 'WRONG'}")
    assert ok


# 10 ----------------------------------------------------------------------------

DET_CONFIG = {
    "model": {
        "rep": "2x0n+1x1n", "num_layers": 1, "num_heads": 1, "attn_dim": 4, "value_dim": 4, "mlp_hidden": 8,
        "gate_hidden": 4, "mlp_rep_hidden": [4], "head_hidden": [8], "num_radial": 4, "num_angular": 3,
        "cutoff": 2.5, "target": "vector",
    },
    "epochs": 2, "warmup_epochs": 1, "seeds": [0, 1], "fractions": [0.5, 1.0], "modes": ["scalar", "cartesian", "irrep", "mlp"],
    "dataset": {"n_molecules": 24, "nodes_range": [4, 8], "seed": 3},
}


def _strip_timing(text: str) -> str:
    rows = list(csv.reader(io.StringIO(text)))
    k = rows[0].index("median_seconds")
    return "\n".join(",".join(r[:k] + r[k + 1 :]) for r in rows)


def test_c10_determinism(verdict, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(DET_CONFIG))
    data = "{run}/data.jsonl"
    commands = {
        "reps check": ["reps", "check", "--l", "4", "--n", "3", "--pairs", "10", "--out", "{run}/check.json"],
        "reps decompose": ["reps", "decompose", "--order", "3", "--out", "{run}/decompose.json"],
        "gen-data": ["gen-data", "--n", "12", "--nodes", "4", "9", "--out", data],
        "frames check": ["frames", "check", data, "--transforms", "3", "--out", "{run}/frames.json"],
        "equivariance": ["equivariance", str(cfg_path), "--molecules", "3", "--transforms", "2", "--all-modes", "--out", "{run}/eq.json"],
        "train": ["train", str(cfg_path), "--out", "{run}/train"],
        "study": ["study", str(cfg_path), "--out", "{run}/study"],
        "sweep": ["sweep", str(cfg_path), "--out", "{run}/sweep"],
        "bench reps": ["bench", "reps", "--degrees", "0-3", "--orders", "0-2", "--mult", "2", "--batch", "8", "--wigner-batch", "4", "--out", "{run}/bench.csv"],
    }
    for run in ("a", "b"):
        root = tmp_path / run
        for name, argv in commands.items():
            args = [a.replace("{run}", str(root)) for a in argv]
            assert main(args + ["--seed", "7"]) == 0, name
    mismatched, compared = [], 0
    for path_a in sorted((tmp_path / "a").rglob("*")):
        if path_a.is_dir():
            continue
        path_b = tmp_path / "b" / path_a.relative_to(tmp_path / "a")
        a, b = path_a.read_bytes(), path_b.read_bytes()
        if path_a.name == "bench.csv":
            # wall-clock medians cannot repeat; every other column must
            a, b = _strip_timing(a.decode()), _strip_timing(b.decode())
        compared += 1
        if a != b:
            mismatched.append(str(path_a.relative_to(tmp_path / "a")))
    ok = not mismatched and compared == 11
    verdict(10, "determinism", ok, f"{len(commands)} commands, {compared} output files compared bitwise (bench timing column excluded)"
            + (f", mismatched {mismatched}" if mismatched else ""))
    assert ok
