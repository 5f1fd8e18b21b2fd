# src/pipeline.py: subcommand implementations and run manifests

import os
from dataclasses import asdict, dataclass, field
from datetime import datetime

import numpy as np
from loguru import logger

from src import config as settings
from src.errors import ConfigurationError
from src.gradcheck import run_suite
from src.mlflow_logger import log_artifacts, log_params_and_metrics, start_experiment_run
from src.model_io import load_model, save_model
from src.model_trainer import AdaptConfig, TeacherModel, TrainConfig, adapt, evaluate, train
from src.network import GATE_VARIANTS, ModelConfig, ParamMask, init_params, param_count
from src.recipes import RECIPES
from src.synthetic_data import (
    SPLITS,
    DatasetSpec,
    generate_synthetic,
    generate_utterances,
    load_dataset,
    load_utterances,
    random_shift,
    save_dataset,
    splice_frames,
)
from src.utils import write_json_atomic

ARCH_NAMES = {"plain": "plain_dnn", "plain_dnn": "plain_dnn", "highway": "highway"}


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    started_at: str
    finished_at: str = ""
    status: str = "running"
    metric_files: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    error: str = ""

    def write(self, path):
        return write_json_atomic(asdict(self), path)


def model_config_from(opts, input_dim, output_dim):
    arch = ARCH_NAMES.get(opts["arch"])
    if arch is None:
        raise ConfigurationError(f"unknown architecture {opts['arch']!r}; use plain or highway")
    gate = GATE_VARIANTS.get(opts["gates"])
    if gate is None:
        raise ConfigurationError(f"unknown gate variant {opts['gates']!r}; expected one of {sorted(GATE_VARIANTS)}")
    return ModelConfig(int(input_dim), int(opts["hidden"]), int(opts["layers"]), int(output_dim), arch, gate)


def _split(data, name):
    if name not in SPLITS:
        raise ConfigurationError(f"unknown split {name!r}; expected one of {sorted(SPLITS)}")
    part = data.speaker(SPLITS[name])
    if len(part) == 0:
        raise ConfigurationError(f"dataset has no {name!r} frames")
    return part


def _output_dim(opts, data):
    return int(opts.get("output") or int(data.labels.max()) + 1)


def _teacher(opts):
    if not opts.get("teacher"):
        return None
    params, config = load_model(opts["teacher"])
    return TeacherModel(params, config)


def _train_config(opts, objective, **overrides):
    values = dict(
        objective=objective,
        learning_rate=float(opts["lr"]),
        momentum_schedule=(0.0, float(opts["momentum"])),
        epochs=int(opts["epochs"]),
        batch_size=int(opts["batch_size"]),
        temperature=float(opts.get("temperature", settings.TEMPERATURE)),
        q=float(opts.get("q", settings.HYBRID_WEIGHT)),
        p=float(opts.get("p", settings.SMBR_SMOOTHING)),
        k=float(opts.get("k", settings.ACOUSTIC_SCALE)),
        mask=ParamMask.parse(opts["update"]),
        seed=int(opts["seed"]),
        n_jobs=int(opts.get("n_jobs", 1)),
    )
    values.update(overrides)
    return TrainConfig(**values)


def _log_dir(opts):
    return opts.get("log_dir") or settings.LOG_DIR


def _metrics_path(opts, command):
    return opts.get("metrics") or os.path.join(_log_dir(opts), f"{command}_metrics.csv")


def _final(history):
    last = history.iloc[-1]
    return {
        key: (None if last[key] is None or (isinstance(last[key], float) and np.isnan(last[key])) else float(last[key]))
        for key in ("loss", "fer", "expected_accuracy")
        if key in history
    }


# === Subcommands ===
def cmd_gen_data(opts):
    dim = int(opts["dim"])
    shift = random_shift(dim, float(opts["shift"]), int(opts["seed"]) + 1) if float(opts["shift"]) else None
    spec = DatasetSpec(
        num_classes=int(opts["classes"]),
        feature_dim=dim,
        frames_per_class=int(opts["frames_per_class"]),
        separation=float(opts["separation"]),
        noise_std=float(opts["noise_std"]),
        shift=shift,
        adapt_frames_per_class=int(opts["adapt_frames_per_class"]),
        test_frames_per_class=int(opts["test_frames_per_class"]),
        seed=int(opts["seed"]),
    )
    data = generate_synthetic(spec)
    if int(opts["splice"]) > 0:
        data.features = splice_frames(data.features, int(opts["splice"]))
    utterances = None
    if int(opts["utterances"]) > 0:
        utterances = generate_utterances(
            data.speaker(SPLITS["train"]), int(opts["utterances"]), int(opts["frames_per_utt"]),
            spec.num_classes, int(opts["seed"]), int(opts["confusion"]),
        )
    save_dataset(data, opts["out"], utterances)
    return {"frames": len(data), "utterances": len(utterances or [])}, [opts["out"]], []


def cmd_train(opts, objective="ce"):
    data = load_dataset(opts["data"])
    train_data = _split(data, "train")
    teacher = _teacher(opts)
    if opts.get("init_model"):
        params, config = load_model(opts["init_model"])
    else:
        config = model_config_from(opts, train_data.features.shape[1], _output_dim(opts, train_data))
        params = init_params(config, int(opts["seed"]))
    tcfg = _train_config(opts, objective)
    metrics_path = _metrics_path(opts, objective)
    result = train(params, config, train_data, tcfg, teacher=teacher, metrics_path=metrics_path)
    model_out = opts.get("model_out") or os.path.join(settings.MODEL_DIR, f"{config.describe()}_{objective}.hdn")
    save_model(result.params, config, model_out)
    metrics = _final(result.history)
    if (data.speakers == SPLITS["test"]).any():
        metrics["test_fer"] = evaluate(result.params, config, _split(data, "test")).fer
    metrics["param_count"] = param_count(config)
    return metrics, [model_out], [metrics_path]


def cmd_distill(opts):
    if not opts.get("teacher"):
        raise ConfigurationError("distill needs --teacher")
    objective = "hybrid" if float(opts["q"]) > 0 else "kd"
    return cmd_train(opts, objective)


def cmd_smbr(opts):
    params, config = load_model(opts["init_model"])
    utterances = load_utterances(opts["data"])
    teacher = _teacher(opts)
    objective = {"ce": "smbr_ce", "kl": "smbr_kl"}.get(opts["mode"])
    if objective is None:
        raise ConfigurationError(f"unknown sMBR smoothing mode {opts['mode']!r}; use ce or kl")
    tcfg = _train_config(opts, objective)
    metrics_path = _metrics_path(opts, objective)
    result = train(params, config, None, tcfg, teacher=teacher, utterances=utterances, metrics_path=metrics_path)
    model_out = opts.get("model_out") or os.path.join(settings.MODEL_DIR, f"{config.describe()}_{objective}.hdn")
    save_model(result.params, config, model_out)
    metrics = _final(result.history)
    metrics["initial_expected_accuracy"] = float(result.history["expected_accuracy"].iloc[0])
    return metrics, [model_out], [metrics_path]


def cmd_adapt(opts):
    params, config = load_model(opts["model"])
    data = _split(load_dataset(opts["data"]), opts["split"])
    acfg = AdaptConfig(
        learning_rate=float(opts["lr"]),
        epochs=int(opts["epochs"]),
        label_source=opts["labels"],
        mask=ParamMask.parse(opts["update"]),
        batch_size=int(opts["batch_size"]),
        temperature=float(opts["temperature"]),
        seed=int(opts["seed"]),
    )
    metrics_path = _metrics_path(opts, "adapt")
    before = evaluate(params, config, data).fer
    result = adapt(params, config, data, acfg, teacher=_teacher(opts), metrics_path=metrics_path)
    model_out = opts.get("model_out") or os.path.join(settings.MODEL_DIR, f"{config.describe()}_adapted.hdn")
    save_model(result.params, config, model_out)
    after = evaluate(result.params, config, data).fer
    logger.info(f"📊 Adaptation FER {before:.4f} -> {after:.4f}")
    return {"fer_before": before, "fer_after": after}, [model_out], [metrics_path]


def cmd_eval(opts):
    params, config = load_model(opts["model"])
    data = _split(load_dataset(opts["data"]), opts["split"])
    result = evaluate(params, config, data)
    print(f"FER {result.fer:.6f}  CE {result.ce:.6f}  frames {result.frames}")
    return {"fer": result.fer, "ce": result.ce, "frames": result.frames}, [], []


def cmd_gradcheck(opts):
    report = run_suite(int(opts["seed"]))
    failed = report.loc[~report["passed"], ["case", "array", "max_abs_err", "max_rel_err"]]
    if not failed.empty:
        logger.error(f"❌ Gradient check failed:\n{failed.to_string(index=False)}")
    out = opts.get("report") or os.path.join(_log_dir(opts), "gradcheck.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    report.to_csv(out, index=False)
    metrics = {
        "cases": int(report["case"].nunique()),
        "failed_cases": int(failed["case"].nunique()),
        "max_rel_err": float(report["max_rel_err"].max()),
    }
    return metrics, [out], []


def cmd_count_params(opts):
    config = model_config_from(opts, opts["input"], opts["output"])
    count = param_count(config)
    print(count)
    return {"param_count": count}, [], []


def cmd_recipe(opts):
    name = opts["name"]
    if name not in RECIPES:
        raise ConfigurationError(f"unknown recipe {name!r}; expected one of {sorted(RECIPES)}")
    if int(opts["seeds"]) < 1:
        raise ConfigurationError(f"recipe {name}: --seeds must be at least 1, got {opts['seeds']}")
    seeds = [int(opts["seed"]) + i for i in range(int(opts["seeds"]))]
    result = RECIPES[name](seeds=seeds)
    out = opts.get("out") or os.path.join(_log_dir(opts), "recipes", f"{name}.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    result.table.to_csv(out, index=False)
    status = "✅" if result.passed else "⚠️"
    logger.info(f"{status} recipe {name}: {result.summary}")
    return {"passed": float(result.passed)}, [out], []


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "distill": cmd_distill,
    "smbr": cmd_smbr,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "count-params": cmd_count_params,
    "recipe": cmd_recipe,
}


def run_command(command, opts, manifest_path=None, use_mlflow=False):
    """Run one subcommand, always leaving a manifest behind; returns final metrics."""
    started = datetime.now()
    manifest = RunManifest(command=command, config=dict(opts), seed=int(opts["seed"]), started_at=started.isoformat())
    manifest_path = manifest_path or os.path.join(
        _log_dir(opts), "manifests", f"{command}_{started.strftime('%Y%m%d_%H%M%S_%f')}.json"
    )
    try:
        metrics, outputs, metric_files = COMMANDS[command](opts)
        manifest.status = "ok"
        manifest.final_metrics = metrics
        manifest.outputs = outputs
        manifest.metric_files = metric_files
    except Exception as e:
        manifest.status = "failed"
        manifest.error = f"{type(e).__name__}: {e}"
        raise
    finally:
        manifest.finished_at = datetime.now().isoformat()
        manifest.write(manifest_path)
        logger.debug(f"📄 Manifest written to {manifest_path}")

    if use_mlflow:
        with start_experiment_run(run_name=f"{command}_{started.strftime('%Y%m%d_%H%M%S')}"):
            log_params_and_metrics(params={k: v for k, v in opts.items() if v is not None}, metrics=metrics)
            log_artifacts(*outputs, *metric_files, manifest_path)
    return metrics
