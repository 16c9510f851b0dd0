"""Command-line entry point: ``qpate [flags]`` runs the accuracy-vs-epsilon grid.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import logging
import os
import sys

from .data_io import DATA_DIR_ENV
from .errors import QPateError, UsageError
from .experiment import ExperimentConfig, run_experiment

log = logging.getLogger("qpate")

# flag name -> (config field, converter)
_FIELDS = {
    "backend": ("backend", str),
    "epsilons": ("epsilons", lambda s: _float_list(s)),
    "epochs": ("epochs", lambda s: _int_list(s)),
    "trials": ("trials", int),
    "teachers": ("num_teachers", int),
    "seed": ("seed", int),
    "data-dir": ("data_dir", str),
    "out-dir": ("out_dir", str),
    "synthetic": ("synthetic", lambda s: _bool(s)),
    "delta": ("delta", float),
    "pool-size": ("pool_size", int),
    "batch-size": ("batch_size", int),
    "grad-method": ("grad_method", str),
    "full-test": ("full_test", lambda s: _bool(s)),
    "jobs": ("jobs", int),
}


def _float_list(text):
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def _int_list(text):
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}")


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def read_config_file(path):
    """Flat ``key=value`` file (``#`` comments) -> dict of config fields."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            key = key.replace("_", "-")
            if key not in _FIELDS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            name, conv = _FIELDS[key]
            try:
                values[name] = conv(value)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}")
    return values


def build_parser():
    p = argparse.ArgumentParser(
        prog="qpate",
        description="Teacher-ensemble (PATE) training with classical and hybrid quantum "
                    "classifiers on MNIST 0-vs-1.")
    p.add_argument("--backend", choices=["classical", "quantum", "both"])
    p.add_argument("--epsilons", type=_float_list, help="comma list, e.g. 0.01,0.1,1,10")
    p.add_argument("--epochs", type=_int_list, help="comma list, e.g. 1,10,20")
    p.add_argument("--trials", type=int)
    p.add_argument("--teachers", type=int)
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--data-dir", help=f"MNIST directory (default: ${DATA_DIR_ENV})")
    p.add_argument("--out-dir")
    p.add_argument("--synthetic", action="store_const", const=True,
                   help="use generated rings/bars instead of MNIST")
    p.add_argument("--delta", type=float)
    p.add_argument("--pool-size", type=int, help="teacher and student pool size (default 1000)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--grad-method", choices=["adjoint", "shift"])
    p.add_argument("--no-full-test", dest="full_test", action="store_const", const=False,
                   help="skip evaluation on the full MNIST 0/1 test partition")
    p.add_argument("--jobs", type=int, help="threads for teacher training")
    p.add_argument("--config", help="key=value file; explicit flags win")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_cli(argv=None):
    """Parse ``argv`` into an :class:`ExperimentConfig`.

    Precedence: explicit flags > ``--config`` file > built-in defaults.
    Raises :class:`SystemExit` with code 2 on any usage error.
    """
    return _parse(argv)[0]


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    values = {}
    try:
        if args.config:
            values.update(read_config_file(args.config))
        for flag, (name, _) in _FIELDS.items():
            value = getattr(args, flag.replace("-", "_"), None)
            if value is not None:
                values[name] = value
        if values.get("data_dir") is None and os.environ.get(DATA_DIR_ENV):
            values["data_dir"] = os.environ[DATA_DIR_ENV]
        return ExperimentConfig(**values), args.verbose
    except (UsageError, OSError) as exc:
        parser.error(str(exc))


def main(argv=None):
    config, verbose = _parse(argv)
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(message)s")

    def progress(run, epochs, trial):
        log.info("%-9s eps=%-6g epochs=%-3d trial=%d  acc=%.3f  labels=%.3f  gamma=%.3g",
                 run.backend, run.target_epsilon, epochs, trial, run.student_accuracy,
                 run.label_accuracy, run.gamma)

    try:
        rows, _, errors = run_experiment(config, progress)
    except (QPateError, OSError) as exc:
        print(f"qpate: error: {exc}", file=sys.stderr)
        return 1
    for backend, eps, epochs, msg in errors:
        print(f"qpate: cell {backend} eps={eps:g} epochs={epochs} failed: {msg}", file=sys.stderr)
    print(f"wrote {len(rows)} rows to {config.out_dir}")
    return 1 if errors else 0


if __name__ == "__main__":
    sys.exit(main())
