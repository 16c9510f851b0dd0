"""Teacher/student training with noisy-argmax label aggregation.

The student side only ever sees public images and a labelling callable;
teacher parameters and private data stay behind :class:`NoisyAggregator`.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data_io import Dataset
from .dp_mech import (DEFAULT_DELTA, LaplaceNoise, PrivacyLedger, VoteHistogram,
                      check_budget, noisy_argmax, noisy_argmax_batch, solve_gamma)
from .errors import UsageError
from .models import NUM_CLASSES, Classifier
from .tensor_core import AdamWConfig


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    grad_method: str = "adjoint"

    def __post_init__(self):
        if self.epochs < 0:
            raise UsageError("epochs must be nonnegative")
        if self.batch_size < 2:
            raise UsageError("batch size must be at least 2 (batch norm)")


@dataclass
class TrainedModel:
    model: Classifier
    losses: list
    val_accuracy: float = None


def partition_data(pool_size, n, seed):
    """Seeded shuffle of ``range(pool_size)`` dealt round-robin into ``n`` subsets."""
    if n <= 0:
        raise UsageError("number of teachers must be positive")
    if pool_size < n:
        raise UsageError(f"cannot split {pool_size} samples among {n} teachers")
    order = np.random.default_rng(seed).permutation(pool_size)
    return [order[i::n] for i in range(n)]


def evaluate(model, dataset):
    """Fraction of samples whose argmax prediction equals the label."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    return float(np.mean(model.predict(dataset.images) == dataset.labels))


def _train(images, labels, backend, config, seed):
    model = Classifier(backend, seed, config.optimizer, config.grad_method)
    losses = model.fit(images, labels, config.epochs, config.batch_size,
                       np.random.default_rng([seed, 1]))
    return model, losses


def train_teacher(subset, backend, config, seed, validation=None):
    """Non-private supervised training of one teacher on its shard."""
    if len(subset) == 0:
        raise UsageError("teacher subset is empty")
    model, losses = _train(subset.images, subset.labels, backend, config, seed)
    val = evaluate(model, validation) if validation is not None else None
    return TrainedModel(model, losses, val)


def train_teachers(pool, n, backend, config, seed, validation=None, jobs=1):
    """Partition ``pool`` and train one teacher per shard, optionally in threads."""
    shards = partition_data(len(pool), n, seed)
    seeds = np.random.SeedSequence(seed).spawn(n)
    tasks = [(pool.subset(idx), int(s.generate_state(1)[0])) for idx, s in zip(shards, seeds)]
    if jobs <= 1:
        return [train_teacher(sub, backend, config, s, validation) for sub, s in tasks]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        futures = [ex.submit(train_teacher, sub, backend, config, s, validation)
                   for sub, s in tasks]
        return [f.result() for f in futures]


class TeacherEnsemble:
    """Vote counts from a list of teacher models; caches the last batch it saw."""

    def __init__(self, teachers, num_classes=NUM_CLASSES):
        if not teachers:
            raise UsageError("need at least one teacher")
        self.teachers = [t.model if isinstance(t, TrainedModel) else t for t in teachers]
        self.num_classes = num_classes
        self._cached = None

    @classmethod
    def from_votes(cls, images, counts, num_classes=NUM_CLASSES):
        """An ensemble that only answers for ``images``, from counts computed earlier."""
        ens = cls.__new__(cls)
        ens.teachers = []
        ens.num_classes = num_classes
        ens._cached = (images, np.asarray(counts))
        return ens

    def votes(self, images):
        if self._cached is not None and self._cached[0] is images:
            return self._cached[1]
        if not self.teachers:
            raise UsageError("vote-only ensemble was asked about unseen images")
        preds = np.stack([t.predict(images) for t in self.teachers], axis=1)
        counts = np.stack([np.bincount(row, minlength=self.num_classes) for row in preds])
        self._cached = (images, counts)
        return counts


class NoisyAggregator:
    """Labelling callable handed to the student: images -> noisy plurality labels.

    Every labelled image is one query in ``ledger``.
    """

    def __init__(self, ensemble, noise, ledger):
        self._ensemble = ensemble
        self._noise = noise
        self.ledger = ledger

    def __call__(self, images):
        counts = self._ensemble.votes(images)
        labels = noisy_argmax_batch(counts, self._noise)
        self.ledger.record_query(len(labels))
        return labels


def aggregate_label(teachers, x, noise, ledger=None):
    """Label one image ``x`` (shape ``(1, H, W)``) by noisy plurality vote."""
    if not teachers:
        raise UsageError("need at least one teacher")
    models = [t.model if isinstance(t, TrainedModel) else t for t in teachers]
    preds = [int(m.predict(x[None])[0]) for m in models]
    label = noisy_argmax(VoteHistogram.from_predictions(preds, NUM_CLASSES), noise)
    if ledger is not None:
        ledger.record_query()
    return label


def train_student(public_images, labeler, backend, config, seed, target_epsilon):
    """Label the public pool once through ``labeler``, check the budget, then train.

    Returns ``(TrainedModel, certified_epsilon, noisy_labels)``.
    """
    labels = labeler(public_images)
    certified = check_budget(labeler.ledger, target_epsilon)
    model, losses = _train(public_images, labels, backend, config, seed)
    return TrainedModel(model, losses), certified, labels


@dataclass
class DataSplits:
    teacher: Dataset
    student: Dataset
    validation: Dataset
    test: Dataset
    full_test: Dataset = None


@dataclass
class PateRun:
    """One teacher/student run and its results."""

    backend: str
    target_epsilon: float
    num_teachers: int = 4
    delta: float = DEFAULT_DELTA
    train: TrainConfig = field(default_factory=TrainConfig)
    teacher_seed: int = 0
    student_seed: int = 0
    noise_seed: int = 0
    # results
    gamma: float = None
    certified_epsilon: float = None
    teacher_accuracies: list = None
    label_accuracy: float = None
    student_accuracy: float = None
    full_test_accuracy: float = None
    seconds: float = None
    ledger: PrivacyLedger = None


def run_pate(run, splits, ensemble=None, jobs=1):
    """Execute ``run`` on ``splits``; fills in and returns ``run``.

    ``ensemble`` may carry teachers trained earlier with the same teacher
    seed, backend and epochs (they do not depend on epsilon).
    """
    start = time.perf_counter()
    if ensemble is None:
        teachers = train_teachers(splits.teacher, run.num_teachers, run.backend, run.train,
                                  run.teacher_seed, splits.validation, jobs)
        ensemble = TeacherEnsemble(teachers)
        run.teacher_accuracies = [t.val_accuracy for t in teachers]
    queries = len(splits.student)
    run.gamma = solve_gamma(run.target_epsilon, queries, run.delta)
    ledger = run.ledger = PrivacyLedger(run.gamma, run.delta)
    labeler = NoisyAggregator(ensemble, LaplaceNoise.seeded(run.gamma, run.noise_seed), ledger)
    student, run.certified_epsilon, labels = train_student(
        splits.student.images, labeler, run.backend, run.train, run.student_seed,
        run.target_epsilon)
    assert ledger.query_count == queries
    run.label_accuracy = float(np.mean(labels == splits.student.labels))
    run.student_accuracy = evaluate(student.model, splits.test)
    if splits.full_test is not None:
        run.full_test_accuracy = evaluate(student.model, splits.full_test)
    run.seconds = time.perf_counter() - start
    return run
