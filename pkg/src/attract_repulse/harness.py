"""Run directories, metrics persistence, the ablation ladder, ensembling and exports.

A run directory holds everything needed to reproduce it::

    config.json        the exact RunConfig
    code_digest.txt    SHA-256 over the package sources that produced it
    metrics.csv        one row per evaluation epoch (deterministic content)
    timing.csv         wall-clock seconds per evaluation epoch
    final.ckpt         checkpoint after the last step
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, save_config
from .data import (Dataset, find_cifar10, load_cifar10_binary, make_synthetic_blobs,
                   subsample_per_class, train_val_split)
from .estimator import AttractRepulseClassifier
from .exceptions import InvalidInputError
from .model import ConvClassifier
from .train import evaluate

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "ATTRACT_REPULSE_OUTPUT_ROOT"

METRICS_COLUMNS = ("epoch", "step", "lr", "ce", "rce", "cr", "mt", "aux", "total",
                   "student_top1", "teacher_top1", "mean_positives")
TIMING_COLUMNS = ("epoch", "wall_seconds")

LADDER = ("baseline", "sce", "cr", "mt", "aux_classifier", "aux_fusion")
ABLATION_COLUMNS = ("stage", "n_seeds", "mean", "std", "teacher_mean", "teacher_std", "values")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def code_digest() -> str:
    """SHA-256 over the package's Python sources, in path order."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for f in sorted(root.rglob("*.py")):
        h.update(f.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Training subset and evaluation set described by ``cfg.data``."""
    d = cfg.data
    if d.kind == "synthetic":
        train = make_synthetic_blobs(d.num_classes, d.n_per_class, d.image_size,
                                     seed=d.subsample_seed, snr=d.snr, split="train")
        test = make_synthetic_blobs(d.num_classes, d.test_per_class, d.image_size,
                                    seed=d.subsample_seed, snr=d.snr, split="test")
    else:
        root = find_cifar10(d.path)
        if root is None:
            raise FileNotFoundError(
                "CIFAR-10 binary directory not found; set data.path or ATTRACT_REPULSE_CIFAR10 "
                "(see scripts/fetch_cifar10.sh)"
            )
        full = load_cifar10_binary(root, "train")
        train = subsample_per_class(full, d.n_per_class, d.subsample_seed)
        test = load_cifar10_binary(root, "test")
    if not d.use_test_split:
        train, test = train_val_split(train, d.val_fraction, d.subsample_seed)
    return train, test


# metrics -------------------------------------------------------------------


@dataclass
class MetricsRecord:
    epoch: int
    step: int
    lr: float
    ce: float
    rce: float
    cr: float
    mt: float
    aux: float
    total: float
    student_top1: float
    teacher_top1: float
    mean_positives: float
    wall_seconds: float = 0.0

    def metrics_row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in METRICS_COLUMNS]


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else f"{float(v):.8f}"


def _append_csv(path: Path, columns, row) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(columns)
        w.writerow(row)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


@dataclass
class RunResult:
    run_dir: Path
    records: list[MetricsRecord] = field(default_factory=list)
    estimator: AttractRepulseClassifier | None = None

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]


def run_training(cfg: RunConfig, run_dir=None, resume=None, eval_every: int = 1,
                 datasets: tuple[Dataset, Dataset] | None = None) -> RunResult:
    """Train one configuration and persist its run directory.

    ``resume`` is a checkpoint path; training continues from its step and
    appends to the run directory's CSVs.
    """
    run_dir = Path(run_dir or cfg.output_dir or output_root() / f"run-{cfg.digest()[:12]}")
    run_dir.mkdir(parents=True, exist_ok=True)
    train_ds, eval_ds = datasets or load_datasets(cfg)
    policy = cfg.augment.policy
    x_train, x_eval = train_ds.to_float(policy), eval_ds.to_float(policy)

    state = None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.header["config_digest"] != cfg.digest():
            raise InvalidInputError("checkpoint was written by a different configuration")
        state = ckpt.restore()
    else:
        for name in ("metrics.csv", "timing.csv"):
            (run_dir / name).unlink(missing_ok=True)
    save_config(cfg, run_dir / "config.json")
    (run_dir / "code_digest.txt").write_text(code_digest() + "\n")

    est = AttractRepulseClassifier.from_run_config(cfg)
    result = RunResult(run_dir, estimator=est)
    pending: list[dict] = []
    t0 = time.perf_counter()
    fusion = cfg.loss.fusion_weight

    def on_epoch(model_est, epoch, rows):
        nonlocal t0
        pending.extend(rows)
        last = epoch + 1 == cfg.train.total_epochs
        if not last and (epoch + 1) % eval_every:
            return True
        st = model_est.state_
        acc = evaluate(st.model, st.teacher.model, x_eval, eval_ds.labels,
                       use_fusion=cfg.eval.use_fusion, fusion_weight=fusion,
                       use_tencrop=cfg.eval.use_tencrop, crop_size=cfg.eval.tencrop_size)
        means = {k: float(np.mean([r[k] for r in pending]))
                 for k in ("ce", "rce", "cr", "mt", "aux", "total", "mean_positives")}
        rec = MetricsRecord(epoch=epoch, step=st.step, lr=pending[-1]["lr"], **means,
                            student_top1=acc["student_top1"], teacher_top1=acc["teacher_top1"],
                            wall_seconds=time.perf_counter() - t0)
        _append_csv(run_dir / "metrics.csv", METRICS_COLUMNS, rec.metrics_row())
        _append_csv(run_dir / "timing.csv", TIMING_COLUMNS, [epoch, f"{rec.wall_seconds:.3f}"])
        result.records.append(rec)
        pending.clear()
        t0 = time.perf_counter()
        logger.info("epoch %d  total %.4f  student %.2f  teacher %.2f",
                    epoch, rec.total, rec.student_top1, rec.teacher_top1)
        return True

    est.fit(x_train, train_ds.labels, callback=on_epoch, resume=state)
    save_checkpoint(est.state_, run_dir / "final.ckpt", cfg)
    return result


# ablation ------------------------------------------------------------------


def ladder_config(base: RunConfig, stage: str) -> RunConfig:
    """Configuration of one cumulative ladder stage.

    The baseline switches off every component; each later stage turns on
    one more component with the weight taken from ``base``.
    """
    if stage not in LADDER:
        raise InvalidInputError(f"unknown ladder stage {stage!r}; known: {LADDER}")
    upto = LADDER.index(stage)
    loss = dataclasses.replace(
        base.loss,
        alpha=base.loss.alpha if upto >= 1 else 0.0,
        beta=base.loss.beta if upto >= 2 else 0.0,
        gamma=base.loss.gamma if upto >= 3 else 0.0,
        aux_weight=base.loss.aux_weight if upto >= 4 else 0.0,
    )
    ev = dataclasses.replace(base.eval, use_fusion=upto >= 5)
    return base.replace(loss=loss, eval=ev)


@dataclass
class AblationRow:
    stage: str
    values: list[float]
    teacher_values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 else 0.0

    @property
    def teacher_mean(self) -> float:
        return float(np.mean(self.teacher_values)) if self.teacher_values else float("nan")

    @property
    def teacher_std(self) -> float:
        return float(np.std(self.teacher_values, ddof=1)) if len(self.teacher_values) > 1 else 0.0


@dataclass
class AblationReport:
    rows: list[AblationRow]
    failures: list[dict] = field(default_factory=list)

    def row(self, stage: str) -> AblationRow:
        return next(r for r in self.rows if r.stage == stage)

    def is_monotone(self) -> bool:
        """Every stage mean is at least the previous stage mean minus the previous std."""
        return all(cur.mean >= prev.mean - prev.std
                   for prev, cur in zip(self.rows, self.rows[1:]))

    def render(self) -> str:
        lines = [f"{'stage':<16}{'seeds':>6}{'student top-1':>22}{'teacher top-1':>22}"]
        for r in self.rows:
            lines.append(f"{r.stage:<16}{len(r.values):>6}"
                         f"{r.mean:>13.2f} ± {r.std:<6.2f}{r.teacher_mean:>13.2f} ± {r.teacher_std:<6.2f}")
        for f in self.failures:
            lines.append(f"FAILED {f['stage']} seed {f['seed']}: {f['error']}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path) -> None:
        with open(out_dir / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ABLATION_COLUMNS)
            for r in self.rows:
                w.writerow([r.stage, len(r.values), _fmt(r.mean), _fmt(r.std), _fmt(r.teacher_mean),
                            _fmt(r.teacher_std), ";".join(_fmt(v) for v in r.values)])
        (out_dir / "ablation.txt").write_text(self.render())
        if self.failures:
            (out_dir / "failures.json").write_text(json.dumps(self.failures, indent=2))


def _run_stage(cfg: RunConfig, run_dir: Path, eval_every: int) -> tuple[float, float]:
    torch.set_num_threads(1)
    res = run_training(cfg, run_dir, eval_every=eval_every)
    return res.final.student_top1, res.final.teacher_top1


def run_ablation(base: RunConfig, ladder=LADDER, seeds=(1, 2, 3), out_dir=None,
                 jobs: int = 1, eval_every: int = 0) -> AblationReport:
    """Train every (stage, seed) pair and summarize final top-1 per stage.

    Runs are archived under ``out_dir/<stage>/seed-<k>``.  A failing run is
    recorded and the remaining runs proceed.  ``eval_every = 0`` evaluates
    only after the last epoch.
    """
    out_dir = Path(out_dir or output_root() / f"ablation-{base.digest()[:12]}")
    out_dir.mkdir(parents=True, exist_ok=True)
    every = eval_every or base.train.total_epochs
    jobs_list = []
    for stage in ladder:
        stage_cfg = ladder_config(base, stage)
        for seed in seeds:
            jobs_list.append((stage, int(seed), stage_cfg.replace(seed=int(seed)),
                              out_dir / stage / f"seed-{seed}"))

    results: dict[tuple[str, int], tuple[float, float]] = {}
    failures = []
    if jobs > 1:
        import multiprocessing as mp

        with ProcessPoolExecutor(jobs, mp_context=mp.get_context("spawn")) as pool:
            futs = {pool.submit(_run_stage, c, d, every): (s, k) for s, k, c, d in jobs_list}
            for fut, key in futs.items():
                try:
                    results[key] = fut.result()
                except Exception as exc:  # noqa: BLE001 - recorded, run continues
                    failures.append({"stage": key[0], "seed": key[1], "error": repr(exc)})
    else:
        for stage, seed, cfg, run_dir in jobs_list:
            try:
                results[(stage, seed)] = _run_stage(cfg, run_dir, every)
            except Exception as exc:  # noqa: BLE001 - recorded, run continues
                logger.error("stage %s seed %d failed:\n%s", stage, seed, traceback.format_exc())
                failures.append({"stage": stage, "seed": seed, "error": repr(exc)})

    rows = []
    for stage in ladder:
        vals = [results[(stage, s)] for s in seeds if (stage, s) in results]
        rows.append(AblationRow(stage, [v[0] for v in vals], [v[1] for v in vals]))
    report = AblationReport(rows, failures)
    report.write(out_dir)
    return report


def read_ablation(path) -> AblationReport:
    """Rebuild a report from ``ablation.csv`` alone."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            vals = [float(v) for v in r["values"].split(";") if v]
            rows.append(AblationRow(r["stage"], vals, []))
    return AblationReport(rows)


# ensembling and exports ----------------------------------------------------


def ensemble_average(prob_sets) -> np.ndarray:
    """Arithmetic mean of per-model ``(n, C)`` probability arrays."""
    sets = [np.asarray(p, dtype=np.float64) for p in prob_sets]
    if not sets:
        raise InvalidInputError("need at least one model")
    shape = sets[0].shape
    if len(shape) != 2 or any(p.shape != shape for p in sets):
        raise InvalidInputError(f"probability arrays must share one (n, C) shape, got {[p.shape for p in sets]}")
    return np.mean(sets, axis=0)


def model_from_checkpoint(path, which: str = "student") -> tuple[ConvClassifier, RunConfig]:
    ckpt = load_checkpoint(path)
    cfg = ckpt.config
    model = ConvClassifier(cfg.model)
    if which == "teacher":
        model.load_state_dict(ckpt.payload["teacher"]["model"])
    else:
        model.load_state_dict(ckpt.payload["student"])
    model.eval()
    return model, cfg


@torch.no_grad()
def export_features(model: ConvClassifier, images: np.ndarray, labels, path) -> Path:
    """Write penultimate eval-mode features plus the label, one row per image."""
    model.eval()
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    feats = torch.cat([model(x[i:i + 256]).features for i in range(0, x.shape[0], 256)]).numpy()
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(feats.shape[1])] + ["label"])
        for row, lab in zip(feats, np.asarray(labels)):
            w.writerow([f"{v:.8g}" for v in row] + [int(lab)])
    return path


def plot_run(run_dir) -> list[Path]:
    """Render SVG figures from the CSV files of a run or ablation directory."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    written = []
    if (run_dir / "metrics.csv").exists():
        rows = read_metrics(run_dir / "metrics.csv")
        ep = [r["epoch"] for r in rows]
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
        for k in ("total", "ce", "rce", "cr", "mt", "aux"):
            a1.plot(ep, [r[k] for r in rows], label=k)
        a1.set_xlabel("epoch")
        a1.set_ylabel("loss")
        a1.legend()
        a2.plot(ep, [r["student_top1"] for r in rows], label="student")
        a2.plot(ep, [r["teacher_top1"] for r in rows], label="teacher")
        a2.set_xlabel("epoch")
        a2.set_ylabel("top-1 (%)")
        a2.legend()
        fig.tight_layout()
        out = run_dir / "curves.svg"
        fig.savefig(out)
        plt.close(fig)
        written.append(out)
    if (run_dir / "ablation.csv").exists():
        rep = read_ablation(run_dir / "ablation.csv")
        fig, ax = plt.subplots(figsize=(8, 4))
        ax.bar([r.stage for r in rep.rows], [r.mean for r in rep.rows],
               yerr=[r.std for r in rep.rows], capsize=4)
        ax.set_ylabel("top-1 (%)")
        fig.tight_layout()
        out = run_dir / "ablation.svg"
        fig.savefig(out)
        plt.close(fig)
        written.append(out)
    if not written:
        raise FileNotFoundError(f"no metrics.csv or ablation.csv in {run_dir}")
    return written
