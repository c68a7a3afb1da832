"""Toy-scale experiments: synthetic molecules, training, representation study, data-efficiency sweep."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, TrainingDiverged
from .frames import LocalFrames, compute_frames
from .group import random_rotation_matrices
from .model import Graph, Model, ModelConfig, build_model, forward, radius_graph

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "split", "target", "metric", "value"]
SWEEP_HEADER = ["variant", "fraction", "seed", "test_rmse"]
STUDY_HEADER = ["mode", "seed", "target", "test_rmse", "test_mae"]
MODES = ("scalar", "cartesian", "irrep", "mlp")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Molecule:
    positions: np.ndarray
    charges: np.ndarray
    targets: dict


def compute_targets(positions: np.ndarray, charges: np.ndarray) -> dict:
    """Coulomb-like energy, charge-weighted dipole and second moment about the centroid."""
    positions = np.asarray(positions, dtype=np.float64)
    q = np.asarray(charges, dtype=np.float64)
    rel = positions - positions.mean(axis=0)
    iu, ju = np.triu_indices(len(q), k=1)
    dist = np.linalg.norm(positions[iu] - positions[ju], axis=1)
    scalar = float(np.sum(q[iu] * q[ju] / dist))
    vector = np.sum(q[:, None] * rel, axis=0)
    tensor = np.einsum("i,ia,ib->ab", q, rel, rel)
    tensor = 0.5 * (tensor + tensor.T)
    return {"scalar": scalar, "vector": vector, "tensor": tensor}


@dataclass
class ToyDataset:
    molecules: list
    split: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.molecules)

    def subset(self, name: str) -> list:
        return [self.molecules[i] for i in self.split[name]]

    def to_jsonl(self) -> str:
        buf = io.StringIO()
        for m in self.molecules:
            rec = {
                "positions": m.positions.tolist(),
                "charges": m.charges.tolist(),
                "targets": {
                    "scalar": m.targets["scalar"],
                    "vector": m.targets["vector"].tolist(),
                    "tensor": m.targets["tensor"].tolist(),
                },
            }
            buf.write(json.dumps(rec) + "\n")
        return buf.getvalue()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def load(cls, path, split_seed: int = 0, fractions=(0.8, 0.1, 0.1)) -> "ToyDataset":
        mols = []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                t = rec["targets"]
                mols.append(
                    Molecule(
                        np.array(rec["positions"], dtype=np.float64),
                        np.array(rec["charges"], dtype=np.float64),
                        {"scalar": float(t["scalar"]), "vector": np.array(t["vector"]), "tensor": np.array(t["tensor"])},
                    )
                )
        return cls(mols, split_indices(len(mols), np.random.default_rng(split_seed), fractions))


def split_indices(n: int, rng: np.random.Generator, fractions=(0.8, 0.1, 0.1)) -> dict:
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }


def generate_dataset(rng: np.random.Generator, n_molecules: int, nodes_range=(3, 12), box_scale: float = 1.0, fractions=(0.8, 0.1, 0.1)) -> ToyDataset:
    """Random point clouds with charges in [-1, 1], rescaled to mean nearest-neighbour distance 1."""
    lo, hi = nodes_range
    if lo < 3 or hi > 64 or lo > hi:
        raise ValueError("nodes_range must lie within [3, 64]")
    mols = []
    for _ in range(n_molecules):
        n = int(rng.integers(lo, hi + 1))
        pos = rng.uniform(0.0, box_scale, size=(n, 3))
        d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        pos = pos / d.min(axis=1).mean()
        q = rng.uniform(-1.0, 1.0, size=n)
        mols.append(Molecule(pos, q, compute_targets(pos, q)))
    return ToyDataset(mols, split_indices(n_molecules, rng, fractions))


def rotate_targets(targets: dict, rot: np.ndarray) -> dict:
    return {
        "scalar": targets["scalar"],
        "vector": rot @ targets["vector"],
        "tensor": rot @ targets["tensor"] @ rot.T,
    }


def target_array(mols: list, target: str) -> np.ndarray:
    if target == "scalar":
        return np.array([[m.targets["scalar"]] for m in mols])
    if target == "vector":
        return np.stack([m.targets["vector"] for m in mols])
    return np.stack([np.asarray(m.targets["tensor"]).reshape(9) for m in mols])


# ---------------------------------------------------------------------------
# batching with cached geometry
# ---------------------------------------------------------------------------


class GeometryCache:
    """Per-molecule edges and predicted frames, computed once per cutoff."""

    def __init__(self, cutoff: float, weight_params: nn.ParamStore | None = None, embed_cfg=None):
        self.cutoff = cutoff
        self.weight_params = weight_params
        self.embed_cfg = embed_cfg
        self._store: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def get(self, mol: Molecule):
        key = id(mol)
        if key not in self._store:
            n = len(mol.charges)
            edges = radius_graph(mol.positions, np.zeros(n, dtype=np.int64), self.cutoff)
            fr = compute_frames(mol.positions, edges, self.weight_params, self.embed_cfg)
            self._store[key] = (edges, fr.matrices, fr.degenerate_mask)
        return self._store[key]


def cache_for(model: Model) -> GeometryCache:
    wp = model.params if model.config.frame_weights == "learned" else None
    return GeometryCache(model.config.cutoff, wp, model.config.bessel)


def collate(mols: list, cache: GeometryCache | None, cutoff: float, rotations: np.ndarray | None = None):
    """Batch molecules into one Graph plus the predicted frames.

    With ``rotations`` (one matrix per molecule) positions are rotated first
    and frames are recomputed rather than cached.
    """
    pos, feats, bids, edges, mats, masks = [], [], [], [], [], []
    offset = 0
    for b, m in enumerate(mols):
        n = len(m.charges)
        p = m.positions if rotations is None else m.positions @ rotations[b].T
        if rotations is None and cache is not None:
            e, fm, dm = cache.get(m)
        else:
            e = radius_graph(p, np.zeros(n, dtype=np.int64), cutoff)
            wp = cache.weight_params if cache is not None else None
            fr = compute_frames(p, e, wp, cache.embed_cfg if cache is not None else None)
            fm, dm = fr.matrices, fr.degenerate_mask
        pos.append(p)
        feats.append(m.charges[:, None])
        bids.append(np.full(n, b, dtype=np.int64))
        edges.append(e + offset)
        mats.append(fm)
        masks.append(dm)
        offset += n
    graph = Graph(
        np.concatenate(pos),
        np.concatenate(feats),
        np.concatenate(edges, axis=1) if edges else np.zeros((2, 0), dtype=np.int64),
        np.concatenate(bids),
        len(mols),
    )
    return graph, LocalFrames(np.concatenate(mats), np.concatenate(masks))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    epochs: int = 20
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 5e-3
    warmup_epochs: int = 5
    grad_clip: float = 0.5
    augmentation: bool = False
    train_fraction: float = 1.0
    loss: str = "smooth_l1"
    dataset: dict = field(default_factory=lambda: {"n_molecules": 200, "nodes_range": [3, 12], "box_scale": 1.0, "seed": 0})
    out: str | None = None
    modes: list = field(default_factory=lambda: list(MODES))
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    fractions: list = field(default_factory=lambda: [0.1, 0.3, 1.0])

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(k, "unknown field")
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}), "model")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def validate(self):
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction", "must be in (0, 1]")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.loss not in ("smooth_l1", "mse"):
            raise ConfigError("loss", "must be smooth_l1 or mse")
        if any(not 0 < f <= 1 for f in self.fractions) or list(self.fractions) != sorted(self.fractions):
            raise ConfigError("fractions", "must be ascending values in (0, 1]")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError("modes", f"unknown mode {m!r}")
        self.model.validate("model")

    def replace(self, **changes) -> "ExperimentConfig":
        model_changes = changes.pop("model_changes", None)
        cfg = dataclasses.replace(self, **changes)
        if model_changes:
            cfg.model = dataclasses.replace(cfg.model, **model_changes)
        return cfg


def dataset_from_config(cfg: ExperimentConfig) -> ToyDataset:
    d = cfg.dataset
    if "path" in d:
        return ToyDataset.load(d["path"], d.get("seed", 0))
    return generate_dataset(
        np.random.default_rng(d.get("seed", 0)),
        int(d.get("n_molecules", 200)),
        tuple(d.get("nodes_range", (3, 12))),
        float(d.get("box_scale", 1.0)),
    )


@dataclass
class MetricsReport:
    target: str
    rows: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    test_rmse: float = float("nan")
    test_mae: float = float("nan")

    def add(self, epoch, split, metric, value):
        self.rows.append((epoch, split, self.target, metric, float(value)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.rows:
            w.writerow([r[0], r[1], r[2], r[3], repr(r[4])])
        return buf.getvalue()


class _Normalizer:
    """Affine target scaling from training statistics; non-scalar targets are only rescaled."""

    def __init__(self, y: np.ndarray, target: str):
        if target == "scalar":
            self.shift = float(y.mean())
            self.scale = float(y.std()) or 1.0
        else:
            self.shift = 0.0
            self.scale = float(np.sqrt(np.mean(y**2))) or 1.0

    def encode(self, y):
        return (y - self.shift) / self.scale

    def decode(self, y):
        return y * self.scale + self.shift


def lr_at(step: int, total: int, warmup: int, base: float) -> float:
    """Linear warmup then cosine decay to zero."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    if total <= warmup:
        return base
    progress = (step - warmup) / max(total - warmup, 1)
    return 0.5 * base * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[k : k + size] for k in range(0, n, size)]


def _frames_for(model: Model, graph: Graph, cached: LocalFrames, rng: np.random.Generator) -> LocalFrames:
    if model.config.frames == "random_shared":
        per_graph = random_rotation_matrices(rng, graph.num_graphs)
        return LocalFrames(per_graph[graph.batch_ids], np.zeros(graph.num_nodes, dtype=bool))
    return cached


def predict(model: Model, mols: list, cache: GeometryCache, batch_size: int = 64, rng: np.random.Generator | None = None) -> np.ndarray:
    """Raw (normalized-space) model outputs for a list of molecules."""
    rng = rng if rng is not None else np.random.default_rng(0)
    outs = []
    for idx in _batches(len(mols), batch_size, None):
        g, fr = collate([mols[i] for i in idx], cache, model.config.cutoff)
        outs.append(forward(model, g, _frames_for(model, g, fr, rng)).data)
    return np.concatenate(outs) if outs else np.zeros((0, model.output_dim))


def evaluate(model: Model, mols: list, cache: GeometryCache, norm: _Normalizer, target: str, rng=None) -> tuple[float, float]:
    """RMSE and MAE over all target components, in original units."""
    pred = norm.decode(predict(model, mols, cache, rng=rng))
    err = pred - target_array(mols, target)
    return float(np.sqrt(np.mean(err**2))), float(np.mean(np.abs(err)))


def _loss(cfg: ExperimentConfig, pred, y):
    return nn.smooth_l1(pred, y) if cfg.loss == "smooth_l1" else nn.mse(pred, y)


def train(cfg: ExperimentConfig, dataset: ToyDataset, out_dir: str | None = None, model: Model | None = None) -> MetricsReport:
    """Train one model; returns per-epoch losses and final test metrics.

    Writes ``metrics.csv`` and ``checkpoint.json`` into ``out_dir`` when given.
    """
    target = cfg.model.target
    rng = np.random.default_rng(cfg.seed)
    model = model or build_model(cfg.model, seed=cfg.seed)
    cache = cache_for(model)
    train_mols = dataset.subset("train")
    if cfg.train_fraction < 1.0:
        k = max(1, int(round(cfg.train_fraction * len(train_mols))))
        keep = np.sort(np.random.default_rng(cfg.seed + 7919).permutation(len(train_mols))[:k])
        train_mols = [train_mols[i] for i in keep]
    val_mols, test_mols = dataset.subset("val"), dataset.subset("test")
    norm = _Normalizer(target_array(train_mols, target), target)
    report = MetricsReport(target)
    steps_per_epoch = math.ceil(len(train_mols) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    step = 0
    params = model.params
    eval_rng_seed = cfg.seed + 104729

    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for b, idx in enumerate(_batches(len(train_mols), cfg.batch_size, rng)):
            mols = [train_mols[i] for i in idx]
            if cfg.augmentation:
                rots = random_rotation_matrices(rng, len(mols))
                g, fr = collate(mols, cache, cfg.model.cutoff, rotations=rots)
                ys = [rotate_targets(m.targets, r) for m, r in zip(mols, rots)]
                y = target_array([Molecule(None, None, t) for t in ys], target)
            else:
                g, fr = collate(mols, cache, cfg.model.cutoff)
                y = target_array(mols, target)
            frames = _frames_for(model, g, fr, rng)
            params.zero_grad()
            with nn.Tape() as tape:
                pred = forward(model, g, frames, training=True, rng=rng)
                loss = _loss(cfg, pred, norm.encode(y).astype(model.dtype))
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            nn.backward(tape, loss, params, warn_disconnected=False)
            gnorm = nn.clip_grad_norm(params, cfg.grad_clip)
            if not np.isfinite(gnorm):
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch}, batch {b} (grad norm {gnorm})")
            nn.adamw_step(params, lr=lr_at(step, total, warm, cfg.lr), weight_decay=cfg.weight_decay)
            step += 1
            losses.append(float(loss.data))
        train_loss = float(np.mean(losses))
        report.train_loss.append(train_loss)
        report.add(epoch, "train", "loss", train_loss)
        if val_mols:
            vp = predict(model, val_mols, cache, rng=np.random.default_rng(eval_rng_seed))
            vl = float(_loss(cfg, nn.Tensor(vp), norm.encode(target_array(val_mols, target))).data)
            report.val_loss.append(vl)
            report.add(epoch, "val", "loss", vl)
        log.info("epoch %d train %.5f val %.5f", epoch, train_loss, report.val_loss[-1] if report.val_loss else float("nan"))

    rmse, mae = evaluate(model, test_mols, cache, norm, target, rng=np.random.default_rng(eval_rng_seed))
    report.test_rmse, report.test_mae = rmse, mae
    report.add(cfg.epochs, "test", "rmse", rmse)
    report.add(cfg.epochs, "test", "mae", mae)
    report.model = model
    report.normalizer = norm
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
            fh.write(report.to_csv())
        params.save(os.path.join(out_dir, "checkpoint.json"))
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    return report


def initial_train_loss(cfg: ExperimentConfig, dataset: ToyDataset) -> float:
    """Loss of the untrained model over the training split (no dropout)."""
    model = build_model(cfg.model, seed=cfg.seed)
    mols = dataset.subset("train")
    norm = _Normalizer(target_array(mols, cfg.model.target), cfg.model.target)
    pred = predict(model, mols, cache_for(model))
    return float(_loss(cfg, nn.Tensor(pred), norm.encode(target_array(mols, cfg.model.target))).data)


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------


@dataclass
class StudyResult:
    rows: list
    target: str

    def median_rmse(self) -> dict:
        out = {}
        for mode in {r[0] for r in self.rows}:
            out[mode] = float(np.median([r[3] for r in self.rows if r[0] == mode]))
        return out

    def ordering(self) -> dict:
        """Tensorial modes beat scalar messages (median test RMSE)."""
        med = self.median_rmse()
        checks = {}
        for mode in ("cartesian", "irrep"):
            if mode in med and "scalar" in med:
                checks[f"{mode}<scalar"] = med[mode] < med["scalar"]
        return checks

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(STUDY_HEADER)
        for r in self.rows:
            w.writerow([r[0], r[1], r[2], repr(r[3]), repr(r[4])])
        return buf.getvalue()


def representation_study(base: ExperimentConfig, dataset: ToyDataset, out_dir: str | None = None) -> StudyResult:
    """Train one model per message mode and seed with identical budgets."""
    rows = []
    for mode in base.modes:
        for seed in base.seeds:
            cfg = base.replace(seed=seed, model_changes={"mode": mode})
            rep = train(cfg, dataset)
            rows.append((mode, seed, cfg.model.target, rep.test_rmse, rep.test_mae))
            log.info("study %s seed %d rmse %.5f", mode, seed, rep.test_rmse)
    result = StudyResult(rows, base.model.target)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "study.csv"), "w") as fh:
            fh.write(result.to_csv())
    return result


def loglog_slope(fractions, errors) -> float:
    x = np.log(np.asarray(fractions, dtype=float))
    y = np.log(np.asarray(errors, dtype=float))
    if len(x) < 2:
        return 0.0
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class SweepResult:
    rows: list

    def slopes(self) -> dict:
        """Per-variant median (over seeds) of the fitted log-log slope."""
        out = {}
        for variant in sorted({r[0] for r in self.rows}):
            per_seed = []
            for seed in sorted({r[2] for r in self.rows if r[0] == variant}):
                pts = sorted((r[1], r[3]) for r in self.rows if r[0] == variant and r[2] == seed)
                per_seed.append(loglog_slope([p[0] for p in pts], [p[1] for p in pts]))
            out[variant] = float(np.median(per_seed))
        return out

    def median_errors(self) -> dict:
        out = {}
        for variant in sorted({r[0] for r in self.rows}):
            for frac in sorted({r[1] for r in self.rows}):
                vals = [r[3] for r in self.rows if r[0] == variant and r[1] == frac]
                out[(variant, frac)] = float(np.median(vals))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in self.rows:
            w.writerow([r[0], repr(r[1]), r[2], repr(r[3])])
        return buf.getvalue()


def data_efficiency_sweep(base: ExperimentConfig, dataset: ToyDataset, fractions=None, out_dir: str | None = None) -> SweepResult:
    """Equivariant vs. augmented training at increasing training-set fractions.

    The augmented variant keeps the architecture but replaces predicted
    frames by one random frame per molecule and rotates every training
    sample at random.
    """
    fractions = list(fractions if fractions is not None else base.fractions)
    if fractions != sorted(fractions) or any(not 0 < f <= 1 for f in fractions):
        raise ConfigError("fractions", "must be ascending values in (0, 1]")
    rows = []
    variants = {
        "equivariant": dict(augmentation=False, model_changes={"frames": "predicted"}),
        "augmented": dict(augmentation=True, model_changes={"frames": "random_shared"}),
    }
    for variant, changes in variants.items():
        for seed in base.seeds:
            for frac in fractions:
                cfg = base.replace(seed=seed, train_fraction=frac, **{k: (dict(v) if isinstance(v, dict) else v) for k, v in changes.items()})
                rep = train(cfg, dataset)
                rows.append((variant, frac, seed, rep.test_rmse))
                log.info("sweep %s frac %.2f seed %d rmse %.5f", variant, frac, seed, rep.test_rmse)
    result = SweepResult(rows)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.csv"), "w") as fh:
            fh.write(result.to_csv())
    return result
