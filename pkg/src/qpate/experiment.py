"""Accuracy-vs-epsilon experiment grid and its result files."""

import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_io import SplitSpec, load_mnist_binary, make_splits, synthetic_dataset
from .dp_mech import DEFAULT_DELTA
from .errors import QPateError, UsageError
from .models import BACKENDS
from .pate import (DataSplits, PateRun, TeacherEnsemble, TrainConfig, run_pate,
                   train_teachers)

log = logging.getLogger(__name__)

CSV_HEADER = ["backend", "epsilon", "delta", "epochs", "acc_mean", "acc_std",
              "eps_certified", "gamma", "seconds"]
TRIALS_HEADER = ["backend", "epsilon", "epochs", "trial", "split_seed", "teacher_seed",
                 "student_seed", "noise_seed", "teacher_val_acc", "label_acc", "test_acc",
                 "full_test_acc", "eps_certified", "gamma"]
TIMING_COLUMNS = ("seconds",)


@dataclass
class ExperimentConfig:
    backend: str = "both"
    epsilons: tuple = (0.01, 0.1, 1.0, 10.0)
    epochs: tuple = (1, 10, 20)
    trials: int = 10
    num_teachers: int = 4
    seed: int = 0
    data_dir: str = None
    out_dir: str = "results"
    synthetic: bool = False
    delta: float = DEFAULT_DELTA
    pool_size: int = 1000
    batch_size: int = 64
    grad_method: str = "adjoint"
    full_test: bool = True
    jobs: int = 1

    def __post_init__(self):
        if self.backend not in BACKENDS + ("both",):
            raise UsageError(f"backend must be classical, quantum or both, got {self.backend!r}")
        self.epsilons = tuple(float(e) for e in self.epsilons)
        self.epochs = tuple(int(e) for e in self.epochs)
        if not self.epsilons or any(not e > 0 for e in self.epsilons):
            raise UsageError("every epsilon must be positive")
        if not self.epochs or any(e < 0 for e in self.epochs):
            raise UsageError("epochs must be nonnegative")
        if self.trials < 1:
            raise UsageError("trials must be at least 1")
        if self.num_teachers < 1:
            raise UsageError("need at least one teacher")
        if not 0 < self.delta < 1:
            raise UsageError("delta must lie in (0, 1)")
        if self.pool_size < self.num_teachers:
            raise UsageError("pool size must be at least the number of teachers")
        if self.jobs < 1:
            raise UsageError("jobs must be at least 1")

    @property
    def backends(self):
        return BACKENDS if self.backend == "both" else (self.backend,)


@dataclass
class ResultRow:
    backend: str
    epsilon: float
    delta: float
    epochs: int
    acc_mean: float
    acc_std: float
    eps_certified: float
    gamma: float
    seconds: float
    seeds: list = field(default_factory=list)

    def __post_init__(self):
        assert self.eps_certified <= self.epsilon * (1 + 1e-9), "certified epsilon above target"
        assert 0.0 <= self.acc_mean <= 1.0 and self.acc_std >= 0.0


def derive_seed(*parts):
    """Stable 63-bit seed from any tuple of printable keys."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _splits_for_trial(config, full, full_test, trial):
    seed = derive_seed(config.seed, "split", trial)
    spec = SplitSpec(config.pool_size, config.pool_size, 100, 100, seed)
    teacher, student, val, test = make_splits(len(full), spec)
    return seed, DataSplits(full.subset(teacher), full.subset(student), full.subset(val),
                            full.subset(test), full_test if config.full_test else None)


def load_data(config):
    if config.synthetic:
        need = 2 * config.pool_size + 200
        full = synthetic_dataset(need, derive_seed(config.seed, "synthetic"))
        test = synthetic_dataset(500, derive_seed(config.seed, "synthetic-test"))
        return full, test
    return load_mnist_binary(config.data_dir, "train"), load_mnist_binary(config.data_dir, "test")


def run_experiment(config, progress=None):
    """Run every (backend, epochs, epsilon) cell for ``config.trials`` trials.

    Result files in ``config.out_dir`` are rewritten after each finished cell,
    so an interrupted run keeps its completed rows. A failing cell is logged
    and skipped. Returns ``(rows, trial_records, errors)``.
    """
    full, full_test = load_data(config)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, records, errors, ledgers = [], [], [], []
    splits = {t: _splits_for_trial(config, full, full_test, t) for t in range(config.trials)}

    for backend in config.backends:
        for epochs in config.epochs:
            train_cfg = TrainConfig(epochs, config.batch_size, grad_method=config.grad_method)
            teachers = {}  # trial -> (ensemble, val accs, seed); independent of epsilon
            for eps in config.epsilons:
                runs, seconds = [], 0.0
                try:
                    for trial in range(config.trials):
                        split_seed, data = splits[trial]
                        if trial not in teachers:
                            t_seed = derive_seed(config.seed, backend, epochs, trial, "teachers")
                            start = time.perf_counter()
                            trained = train_teachers(data.teacher, config.num_teachers, backend,
                                                     train_cfg, t_seed, data.validation,
                                                     config.jobs)
                            ens = TeacherEnsemble(trained)
                            counts = ens.votes(data.student.images)
                            teachers[trial] = (
                                TeacherEnsemble.from_votes(data.student.images, counts),
                                [t.val_accuracy for t in trained], t_seed,
                                time.perf_counter() - start)
                            log.debug("teachers %s epochs=%d trial=%d val=%s (%.1fs)", backend,
                                      epochs, trial, teachers[trial][1], teachers[trial][3])
                            del trained, ens
                        ensemble, val_accs, t_seed, t_seconds = teachers[trial]
                        run = PateRun(
                            backend, eps, config.num_teachers, config.delta, train_cfg,
                            teacher_seed=t_seed,
                            student_seed=derive_seed(config.seed, backend, eps, epochs, trial,
                                                     "student"),
                            noise_seed=derive_seed(config.seed, backend, eps, epochs, trial,
                                                   "noise"))
                        run_pate(run, data, ensemble)
                        run.teacher_accuracies = val_accs
                        seconds += run.seconds + t_seconds
                        runs.append(run)
                        records.append(_trial_record(run, epochs, trial, split_seed))
                        if progress:
                            progress(run, epochs, trial)
                except QPateError as exc:
                    log.error("cell %s eps=%g epochs=%d failed: %s", backend, eps, epochs, exc)
                    errors.append((backend, eps, epochs, str(exc)))
                    continue
                accs = np.array([r.student_accuracy for r in runs])
                rows.append(ResultRow(
                    backend, eps, config.delta, epochs, float(accs.mean()), float(accs.std()),
                    max(r.certified_epsilon for r in runs), runs[0].gamma, seconds,
                    [(r.teacher_seed, r.student_seed, r.noise_seed) for r in runs]))
                ledgers.append(_ledger_text(runs[0], epochs))
                write_outputs(out, rows, records, ledgers)
    return rows, records, errors


def _trial_record(run, epochs, trial, split_seed):
    return {
        "backend": run.backend, "epsilon": run.target_epsilon, "epochs": epochs,
        "trial": trial, "split_seed": split_seed, "teacher_seed": run.teacher_seed,
        "student_seed": run.student_seed, "noise_seed": run.noise_seed,
        "teacher_val_acc": ";".join(f"{a:.4f}" for a in run.teacher_accuracies),
        "label_acc": run.label_accuracy, "test_acc": run.student_accuracy,
        "full_test_acc": "" if run.full_test_accuracy is None else run.full_test_accuracy,
        "eps_certified": run.certified_epsilon, "gamma": run.gamma,
    }


def _ledger_text(run, epochs):
    head = f"== {run.backend} epsilon={run.target_epsilon:g} epochs={epochs}\n"
    return head + run.ledger.report()


def _fmt(x):
    return f"{x:.10g}"


def sort_rows(rows):
    return sorted(rows, key=lambda r: (r.backend, r.epsilon, r.epochs))


def emit_table(rows, out_dir):
    """Write ``results.csv`` and ``results.txt``; returns both paths."""
    if not rows:
        raise UsageError("no result rows to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = sort_rows(rows)
    csv_path = out / "results.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([r.backend, _fmt(r.epsilon), _fmt(r.delta), r.epochs,
                             _fmt(r.acc_mean), _fmt(r.acc_std), _fmt(r.eps_certified),
                             _fmt(r.gamma), f"{r.seconds:.2f}"])
    txt_path = out / "results.txt"
    txt_path.write_text(render_table(rows))
    return csv_path, txt_path


def render_table(rows):
    """Fixed-width text table: one block per epoch setting, one line per epsilon."""
    backends = sorted({r.backend for r in rows})
    cell = {(r.backend, r.epsilon, r.epochs): r for r in rows}
    lines = []
    for epochs in sorted({r.epochs for r in rows}):
        lines.append(f"epochs = {epochs}")
        lines.append(f"{'epsilon':>9} {'delta':>8}" + "".join(f" {b:>20}" for b in backends))
        for eps in sorted({r.epsilon for r in rows if r.epochs == epochs}):
            delta = next(r.delta for r in rows if r.epsilon == eps and r.epochs == epochs)
            parts = []
            for b in backends:
                r = cell.get((b, eps, epochs))
                parts.append(f" {r.acc_mean:>9.3f} +- {r.acc_std:<6.4f}" if r else f" {'-':>20}")
            lines.append(f"{eps:>9g} {delta:>8.0e}" + "".join(parts))
        lines.append("")
    return "\n".join(lines)


def read_table(path):
    """Parse ``results.csv`` back into :class:`ResultRow` objects (seeds are not stored)."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(ResultRow(rec["backend"], float(rec["epsilon"]), float(rec["delta"]),
                                  int(rec["epochs"]), float(rec["acc_mean"]),
                                  float(rec["acc_std"]), float(rec["eps_certified"]),
                                  float(rec["gamma"]), float(rec["seconds"])))
    return rows


def emit_curve(rows, out_dir):
    """One ``curve_<backend>_epochs<E>.dat`` per pair: ``epsilon mean std`` lines by epsilon."""
    if len({r.epsilon for r in rows}) < 2:
        raise UsageError("a curve needs at least two epsilon values")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for backend, epochs in sorted({(r.backend, r.epochs) for r in rows}):
        pts = sorted((r for r in rows if r.backend == backend and r.epochs == epochs),
                     key=lambda r: r.epsilon)
        path = out / f"curve_{backend}_epochs{epochs}.dat"
        path.write_text("".join(f"{_fmt(r.epsilon)} {_fmt(r.acc_mean)} {_fmt(r.acc_std)}\n"
                                for r in pts))
        paths.append(path)
    return paths


def write_trials(records, out_dir):
    path = Path(out_dir) / "trials.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, TRIALS_HEADER, lineterminator="\n")
        writer.writeheader()
        for rec in records:
            writer.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in rec.items()})
    return path


def write_outputs(out_dir, rows, records, ledgers):
    emit_table(rows, out_dir)
    if len({r.epsilon for r in rows}) >= 2:
        emit_curve(rows, out_dir)
    write_trials(records, out_dir)
    (Path(out_dir) / "ledgers.txt").write_text("\n".join(ledgers))


def strip_timing(csv_text):
    """CSV text with the timing columns removed, for determinism comparisons."""
    lines = csv_text.splitlines()
    header = lines[0].split(",")
    keep = [i for i, h in enumerate(header) if h not in TIMING_COLUMNS]
    return "\n".join(",".join(line.split(",")[i] for i in keep) for line in lines) + "\n"
