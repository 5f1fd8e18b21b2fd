# main.py

import argparse
import sys

from colorama import Fore, Style, init as colorama_init
from loguru import logger

from src import config as settings
from src.errors import HdnnError
from src.pipeline import run_command
from src.recipes import RECIPES
from src.utils import setup_logging

colorama_init(autoreset=True)

BOOLEAN_TRUE = {"1", "true", "yes", "on"}

# name -> (default, type, help); None default with a `required` entry below means mandatory
MODEL_OPTIONS = {
    "arch": ("highway", str, "plain or highway"),
    "hidden": (16, int, "hidden units per layer (H)"),
    "layers": (4, int, "number of hidden layers (L)"),
    "gates": ("both", str, "both, transform, carry or constrained"),
}
TRAIN_OPTIONS = {
    "lr": (settings.LEARNING_RATE, float, "learning rate per sample"),
    "momentum": (settings.MOMENTUM_SCHEDULE[1], float, "momentum after the first epoch"),
    "epochs": (settings.EPOCHS, int, "training epochs"),
    "batch_size": (settings.BATCH_SIZE, int, "minibatch size"),
    "update": ("all", str, "parameter groups to update: all or a list of hidden,gates,output"),
    "n_jobs": (1, int, "worker threads per minibatch"),
    "metrics": (None, str, "per-epoch metrics CSV"),
    "model_out": (None, str, "where to write the trained model"),
}

COMMAND_OPTIONS = {
    "gen-data": {
        "out": (None, str, "output directory"),
        "classes": (4, int, "number of classes (J)"),
        "dim": (8, int, "feature dimension before splicing"),
        "frames_per_class": (200, int, "training frames per class"),
        "test_frames_per_class": (50, int, "held-out frames per class"),
        "adapt_frames_per_class": (0, int, "frames per class for the shifted adaptation split"),
        "shift": (0.0, float, "length of the adaptation-split offset"),
        "separation": (6.0, float, "pairwise class-mean distance in noise std units"),
        "noise_std": (1.0, float, "per-dimension noise std"),
        "splice": (0, int, "context frames spliced on each side"),
        "utterances": (0, int, "toy utterances with lattices cut from the training split"),
        "frames_per_utt": (8, int, "frames per toy utterance"),
        "confusion": (3, int, "maximum states offered per lattice frame"),
    },
    "train": {
        "data": (None, str, "dataset directory from gen-data"),
        "init_model": (None, str, "start from this model instead of a fresh init"),
        "output": (None, int, "number of classes (default: inferred from labels)"),
        **MODEL_OPTIONS,
        **TRAIN_OPTIONS,
    },
    "distill": {
        "data": (None, str, "dataset directory from gen-data"),
        "teacher": (None, str, "teacher model file"),
        "init_model": (None, str, "start from this model instead of a fresh init"),
        "output": (None, int, "number of classes (default: inferred from labels)"),
        "q": (settings.HYBRID_WEIGHT, float, "weight of the hard-label CE term"),
        "temperature": (settings.TEMPERATURE, float, "softmax temperature for teacher and student"),
        **MODEL_OPTIONS,
        **TRAIN_OPTIONS,
    },
    "smbr": {
        "data": (None, str, "dataset directory with utterances and lattices"),
        "init_model": (None, str, "CE-trained model to start from"),
        "teacher": (None, str, "teacher model for KL smoothing"),
        "mode": ("ce", str, "smoothing loss: ce or kl"),
        "p": (settings.SMBR_SMOOTHING, float, "smoothing weight"),
        "k": (settings.ACOUSTIC_SCALE, float, "acoustic scale"),
        "temperature": (settings.TEMPERATURE, float, "softmax temperature"),
        **TRAIN_OPTIONS,
        "lr": (settings.SMBR_LEARNING_RATE, float, "learning rate per utterance"),
        "epochs": (settings.SMBR_EPOCHS, int, "passes over the utterances"),
    },
    "adapt": {
        "model": (None, str, "model to adapt"),
        "data": (None, str, "dataset directory from gen-data"),
        "split": ("adapt", str, "train, test or adapt"),
        "labels": ("hard_pseudo", str, "hard_pseudo, oracle_hard or soft_teacher"),
        "teacher": (None, str, "teacher model for soft_teacher labels"),
        "lr": (settings.ADAPT_LEARNING_RATE, float, "learning rate per sample"),
        "epochs": (settings.ADAPT_EPOCHS, int, "adaptation epochs"),
        "batch_size": (settings.ADAPT_BATCH_SIZE, int, "minibatch size"),
        "update": ("gates", str, "parameter groups to update"),
        "temperature": (settings.TEMPERATURE, float, "softmax temperature for soft labels"),
        "metrics": (None, str, "per-epoch metrics CSV"),
        "model_out": (None, str, "where to write the adapted model"),
    },
    "eval": {
        "model": (None, str, "model file"),
        "data": (None, str, "dataset directory from gen-data"),
        "split": ("test", str, "train, test or adapt"),
    },
    "gradcheck": {
        "report": (None, str, "CSV report of every checked array"),
    },
    "count-params": {
        "arch": ("highway", str, "plain or highway"),
        "input": (600, int, "input dimension after splicing"),
        "hidden": (2048, int, "hidden units per layer (H)"),
        "layers": (6, int, "number of hidden layers (L)"),
        "output": (3972, int, "number of classes (J)"),
        "gates": ("both", str, "both, transform, carry or constrained"),
    },
    "recipe": {
        "seeds": (5, int, "number of consecutive seeds (at least 1)"),
        "out": (None, str, "CSV with the recipe table"),
    },
}

REQUIRED = {
    "gen-data": ("out",),
    "train": ("data",),
    "distill": ("data", "teacher"),
    "smbr": ("data", "init_model"),
    "adapt": ("model", "data"),
    "eval": ("model", "data"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="hdnn", description="🧠 Highway DNN training toolkit")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, options in COMMAND_OPTIONS.items():
        sub = subparsers.add_parser(command)
        if command == "recipe":
            sub.add_argument("name", choices=sorted(RECIPES))
        for name, (default, kind, help_text) in options.items():
            sub.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind, default=None,
                             help=f"{help_text} (default: {default})")
        sub.add_argument("--seed", type=int, default=None, help="random seed (default: $HDNN_SEED or 0)")
        sub.add_argument("--config", default=None, help="`key = value` file; flags override its values")
        sub.add_argument("--manifest", default=None, help="run manifest path")
        sub.add_argument("--log-dir", default=None, help=f"log directory (default: {settings.LOG_DIR})")
        sub.add_argument("--mlflow", action="store_true", default=None, help="track the run with MLflow")
    return parser


def resolve_options(parser, args):
    """Flag > config file > built-in default, converted with each option's type."""
    command = args.command
    options = dict(COMMAND_OPTIONS[command])
    options["seed"] = (settings.DEFAULT_SEED, int, "")
    options["log_dir"] = (settings.LOG_DIR, str, "")
    options["mlflow"] = (settings.MLFLOW_ENABLED, lambda v: str(v).strip().lower() in BOOLEAN_TRUE, "")
    file_values = settings.read_config_file(args.config) if args.config else {}
    unknown = set(file_values) - set(options) - {"manifest"}
    if unknown:
        parser.error(f"unknown keys in {args.config}: {', '.join(sorted(unknown))}")

    opts = {}
    for name, (default, kind, _) in options.items():
        value = getattr(args, name, None)
        if value is None and name in file_values:
            try:
                value = kind(file_values[name])
            except ValueError:
                parser.error(f"{args.config}: bad value for {name}: {file_values[name]!r}")
        opts[name] = default if value is None else value
    if command == "recipe":
        opts["name"] = args.name

    missing = [name for name in REQUIRED.get(command, ()) if opts.get(name) is None]
    if missing:
        parser.error(f"{command}: missing required option(s): "
                     + ", ".join(f"--{m.replace('_', '-')}" for m in missing))
    return opts, args.manifest or file_values.get("manifest")


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        opts, manifest = resolve_options(parser, args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    except (HdnnError, OSError) as e:
        parser.print_usage(sys.stderr)
        print(Fore.RED + f"❌ {e}", file=sys.stderr)
        return 2

    setup_logging(opts["log_dir"], settings.LOG_LEVEL)
    use_mlflow = opts.pop("mlflow")
    try:
        metrics = run_command(args.command, opts, manifest_path=manifest, use_mlflow=use_mlflow)
    except (HdnnError, OSError) as e:
        print(Fore.RED + f"❌ {args.command} failed: {e}", file=sys.stderr)
        return 1

    if args.command == "gradcheck" and metrics["failed_cases"]:
        print(Fore.RED + f"❌ {metrics['failed_cases']} gradient check case(s) failed", file=sys.stderr)
        return 1
    if args.command == "recipe" and not metrics["passed"]:
        print(Fore.YELLOW + f"⚠️ recipe {opts['name']} verdict: not reproduced", file=sys.stderr)
    print(Fore.GREEN + Style.BRIGHT + f"✅ {args.command} done", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(run_cli())
