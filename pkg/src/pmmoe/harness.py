"""End-to-end experiment runner.

Every stage reads what it needs from the config and from files written by
earlier stages in the output directory, so stages can be run one at a time
from the command line or chained by :func:`run_experiment`. Data and
partitions are regenerated from the config (they are pure functions of it);
trained state travels through checkpoints.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from pmmoe import checkpoint, theory
from pmmoe.config import ExperimentConfig
from pmmoe.datagen import (
    LabeledDataset,
    Partition,
    generate_synthetic,
    load_idx,
    partition_dirichlet,
    train_test_split,
    write_partition_csv,
)
from pmmoe.energy import write_reports_csv
from pmmoe.errors import PMMoEError, StageError
from pmmoe.federation import ClientState, RoundMetrics, make_clients, pretrain
from pmmoe.metrics import a_total
from pmmoe.moe import ExpertPool, FinetuneResult, GatedModel, build_pools, finetune_client, write_finetune_csv
from pmmoe.splitmodel import SplitConfig, SplitModel, evaluate, split_params

log = logging.getLogger(__name__)

STAGES = ("partition", "pretrain", "finetune", "theorem", "eval")
MANIFEST = "MANIFEST"


class Layout:
    """File names inside an output directory."""

    def __init__(self, root):
        self.root = Path(root)

    config = property(lambda self: self.root / "config.yaml")
    partition = property(lambda self: self.root / "partition.csv")
    pretrain_metrics = property(lambda self: self.root / "metrics_pretrain.csv")
    finetune_metrics = property(lambda self: self.root / "metrics_finetune.csv")
    energy = property(lambda self: self.root / "energy.csv")
    theorem = property(lambda self: self.root / "theorem.csv")
    eval = property(lambda self: self.root / "eval.csv")
    summary = property(lambda self: self.root / "summary.json")
    ckpt = property(lambda self: self.root / "checkpoints")

    def server(self) -> Path:
        return self.ckpt / "server.bin"

    def client(self, j: int) -> Path:
        return self.ckpt / f"client_{j:03d}.bin"

    def gate(self, j: int) -> Path:
        return self.ckpt / f"gate_{j:03d}.bin"


# -- data ---------------------------------------------------------------------------


def load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    if cfg.dataset == "idx":
        return load_idx(cfg.idx_images, cfg.idx_labels)
    return generate_synthetic(cfg.C, cfg.U, cfg.per_class, cfg.spread, cfg.seed)


@dataclass
class Prepared:
    data: LabeledDataset
    part: Partition
    splits: list[tuple[LabeledDataset, LabeledDataset]]
    split_cfg: SplitConfig


def prepare(cfg: ExperimentConfig) -> Prepared:
    data = load_dataset(cfg)
    part = partition_dirichlet(data, cfg.partition_spec())
    splits = train_test_split(data, part, cfg.train_fraction, cfg.seed)
    return Prepared(data, part, splits, cfg.split_config(data.dim, data.n_classes))


# -- stages -------------------------------------------------------------------------


def stage_partition(cfg: ExperimentConfig, out: Layout) -> Prepared:
    prep = prepare(cfg)
    write_partition_csv(out.partition, prep.part, prep.data)
    log.info("partitioned %d samples over %d clients: %s", len(prep.data), cfg.M, prep.part.counts)
    return prep


def write_round_metrics(path, history: Sequence[RoundMetrics]) -> None:
    """One row per client per round, then a ``client_id = -1`` row with the weighted total."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "client_id", "train_loss", "test_accuracy", "a_total"])
        for m in history:
            for j, (loss, acc) in enumerate(zip(m.train_loss, m.test_accuracy)):
                w.writerow([m.round, j, repr(float(loss)), repr(float(acc)), ""])
            w.writerow([m.round, -1, repr(m.mean_train_loss), repr(m.a_total), repr(m.a_total)])


def stage_pretrain(cfg: ExperimentConfig, out: Layout, prep: Prepared | None = None) -> list[ClientState]:
    prep = prep or prepare(cfg)
    server, clients = make_clients(prep.split_cfg, prep.splits, cfg.seed)
    history = pretrain(server, clients, cfg.E_g, cfg.E_l, cfg.lr, cfg.batch_size, cfg.workers)
    write_round_metrics(out.pretrain_metrics, history)
    out.ckpt.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out.server(), server.W_g)
    for c in clients:
        checkpoint.save(out.client(c.id), c.model.state())
    return clients


def restore_clients(cfg: ExperimentConfig, out: Layout, prep: Prepared) -> tuple[dict, list[SplitModel]]:
    """Final global part and every client's model from the pre-training checkpoints."""
    W_g = checkpoint.load(out.server())
    models = []
    for j in range(cfg.M):
        m = SplitModel(prep.split_cfg, np.random.default_rng(0), np.random.default_rng(0))
        m.load_state(checkpoint.load(out.client(j)), strict=True)
        models.append(m)
    return W_g, models


def plant_noise_experts(parts: Sequence[dict], count: int, rng: np.random.Generator) -> list[dict]:
    """Random-parameter stand-ins for pool entries.

    Each tensor is drawn from a normal with the same per-tensor scale as the
    real entries, so planted experts are plausible in magnitude but carry no
    learned structure.
    """
    out = []
    for _ in range(count):
        fake = {}
        for name in parts[0]:
            scale = float(np.std(np.stack([p[name] for p in parts]))) or 1.0
            fake[name] = scale * rng.standard_normal(np.shape(parts[0][name]))
        out.append(fake)
    return out


def build_client_pool(cfg: ExperimentConfig, prep: Prepared, models: Sequence[SplitModel]) -> ExpertPool:
    parts = [split_params(m)[1] for m in models]
    planted = plant_noise_experts(parts, cfg.noise_experts, np.random.default_rng([cfg.seed, 30]))
    owners = list(range(len(parts))) + [-(i + 1) for i in range(len(planted))]
    return build_pools(parts + planted, prep.split_cfg, owners)


def _gated(cfg: ExperimentConfig, W_g, pool: ExpertPool, j: int) -> GatedModel:
    return GatedModel(W_g, pool, j, cfg.moe_config(), np.random.default_rng([cfg.seed, 20, j]))


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def stage_finetune(cfg: ExperimentConfig, out: Layout, prep: Prepared | None = None) -> list[FinetuneResult]:
    prep = prep or prepare(cfg)
    W_g, models = restore_clients(cfg, out, prep)
    pool = build_client_pool(cfg, prep, models)

    def one(j: int) -> FinetuneResult:
        train, test = prep.splits[j]
        return finetune_client(_gated(cfg, W_g, pool, j), train, test, np.random.default_rng([cfg.seed, 21, j]), j)

    results = _map(one, range(cfg.M), cfg.workers)
    write_finetune_csv(out.finetune_metrics, results)
    reports = [(r.client_id, r.report_pe if r.report_pe is not None else r.report_pp) for r in results]
    write_reports_csv(out.energy, reports)
    out.ckpt.mkdir(parents=True, exist_ok=True)
    for r in results:
        checkpoint.save(out.gate(r.client_id), r.model.export_state())
    log.info("fine-tuned %d clients; %d kept their local model", len(results), sum(r.fell_back for r in results))
    return results


def stage_theorem(cfg: ExperimentConfig, out: Layout) -> theory.BoundReport:
    report = theory.verify_bound(theory.DEFAULT_GRID, cfg.theorem_trials, cfg.seed)
    theory.write_report_csv(out.theorem, report)
    for f in report.failures():
        log.warning("bound check failed at %s", f)
    return report


@dataclass
class Summary:
    phase1_a_total: float
    phase2_a_total: float
    client_ids: list[int]
    deltas: list[float]

    @property
    def delta_a_total(self) -> float:
        return self.phase2_a_total - self.phase1_a_total

    def to_json(self) -> str:
        doc = {
            "phase1_a_total": self.phase1_a_total,
            "phase2_a_total": self.phase2_a_total,
            "delta_a_total": self.delta_a_total,
            "client_deltas": {str(j): d for j, d in zip(self.client_ids, self.deltas)},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def summarize_eval_csv(path) -> Summary:
    """Rebuild the summary from the per-client evaluation table alone."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = [int(r["client_id"]) for r in rows]
    n = [int(r["n_test"]) for r in rows]
    a1 = [float(r["phase1_accuracy"]) for r in rows]
    a2 = [float(r["phase2_accuracy"]) for r in rows]
    return Summary(a_total(list(zip(n, a1))), a_total(list(zip(n, a2))), ids, [y - x for x, y in zip(a1, a2)])


def stage_eval(cfg: ExperimentConfig, out: Layout, prep: Prepared | None = None) -> Summary:
    prep = prep or prepare(cfg)
    W_g, models = restore_clients(cfg, out, prep)
    pool = build_client_pool(cfg, prep, models)
    with open(out.eval, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "n_test", "phase1_accuracy", "phase2_accuracy", "delta", "fell_back"])
        for j, m in enumerate(models):
            test = prep.splits[j][1]
            gm = _gated(cfg, W_g, pool, j)
            gm.restore_state(checkpoint.load(out.gate(j)))
            a1 = evaluate(m, test)[1]
            a2 = gm.accuracy(gm.features(test.x), test.y)
            w.writerow([j, len(test), repr(a1), repr(a2), repr(a2 - a1), int(gm.use_local)])
    summary = summarize_eval_csv(out.eval)
    out.summary.write_text(summary.to_json())
    log.info("A_total phase 1 %.4f, phase 2 %.4f", summary.phase1_a_total, summary.phase2_a_total)
    return summary


# -- orchestration ------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(root, complete: bool, note: str = "") -> Path:
    """``status`` line, optional note, then ``sha256  relative/path`` per artifact."""
    root = Path(root)
    lines = [f"status: {'complete' if complete else 'incomplete'}"]
    if note:
        lines.append(f"note: {note}")
    for p in sorted(q for q in root.rglob("*") if q.is_file() and q.name != MANIFEST):
        lines.append(f"{sha256_file(p)}  {p.relative_to(root).as_posix()}")
    path = root / MANIFEST
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(root) -> tuple[str, dict[str, str]]:
    status, files = "", {}
    for line in (Path(root) / MANIFEST).read_text().splitlines():
        if line.startswith("status: "):
            status = line.split(": ", 1)[1]
        elif line and not line.startswith("note: "):
            digest, name = line.split("  ", 1)
            files[name] = digest
    return status, files


def run_stage(name: str, fn: Callable, *args, **kwargs):
    """Call one stage, re-raising any failure tagged with the stage name."""
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (PMMoEError, ValueError, OSError, KeyError) as e:
        raise StageError(name, f"{type(e).__name__}: {e}") from e


def open_output(cfg: ExperimentConfig, fresh: bool = False) -> Layout:
    out = Layout(cfg.out)
    if fresh and out.root.exists():
        shutil.rmtree(out.root)
    out.root.mkdir(parents=True, exist_ok=True)
    out.config.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return out


def run_experiment(cfg: ExperimentConfig) -> Summary:
    """partition, pretrain, finetune, theorem and eval in one go, into a clean ``cfg.out``."""
    out = open_output(cfg, fresh=True)
    done = []
    try:
        prep = run_stage("partition", stage_partition, cfg, out)
        done.append("partition")
        run_stage("pretrain", stage_pretrain, cfg, out, prep)
        done.append("pretrain")
        run_stage("finetune", stage_finetune, cfg, out, prep)
        done.append("finetune")
        run_stage("theorem", stage_theorem, cfg, out)
        done.append("theorem")
        summary = run_stage("eval", stage_eval, cfg, out, prep)
        done.append("eval")
    except StageError as e:
        write_manifest(out.root, False, f"stopped at stage {e.stage}; completed: {', '.join(done) or 'none'}")
        raise
    write_manifest(out.root, True)
    return summary

