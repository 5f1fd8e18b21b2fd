# src/recipes.py: toy-scale ablations: convergence, gates, parameter groups,
# sMBR smoothing, distillation, sequence-trained teachers and adaptation

import math
from typing import NamedTuple

import numpy as np
import pandas as pd
from loguru import logger

from src import config as settings
from src.model_trainer import AdaptConfig, TeacherModel, TrainConfig, adapt, evaluate, train
from src.network import (
    GATE_VARIANTS,
    GateConfig,
    ModelConfig,
    Parameters,
    ParamMask,
    forward,
    gate_summary,
    init_params,
)
from src.synthetic_data import (
    SPLITS,
    DatasetSpec,
    generate_synthetic,
    generate_utterances,
    random_shift,
)

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
SMBR_COLUMNS = ["seed", "update", "p", "initial_expected_accuracy", "final_expected_accuracy",
                "initial_fer", "final_fer"]
ADAPT_COLUMNS = ["seed", "update", "labels", "epoch", "heldout_fer"]


class RecipeResult(NamedTuple):
    name: str
    table: pd.DataFrame
    passed: bool
    summary: str


def _enough(wins, total, fraction):
    return wins >= math.ceil(fraction * total)


def _toy_data(seed, num_classes=4, feature_dim=8, frames_per_class=100, test_frames_per_class=50,
              adapt_frames_per_class=0, shift=0.0, separation=6.0):
    spec = DatasetSpec(
        num_classes=num_classes,
        feature_dim=feature_dim,
        frames_per_class=frames_per_class,
        separation=separation,
        shift=random_shift(feature_dim, shift, seed + 1) if shift else None,
        adapt_frames_per_class=adapt_frames_per_class,
        test_frames_per_class=test_frames_per_class,
        seed=seed,
    )
    data = generate_synthetic(spec)
    return {name: data.speaker(code) for name, code in SPLITS.items()}


def _highway(data, hidden, layers, gate=None):
    return ModelConfig(data.features.shape[1], hidden, layers, int(data.labels.max()) + 1, "highway",
                       gate or GateConfig())


def _ce_model(data, hidden, layers, seed, epochs):
    config = _highway(data, hidden, layers)
    result = train(init_params(config, seed), config, data, TrainConfig(epochs=epochs, seed=seed))
    return result.params, config


# === Deep and thin: highway vs plain from the same weights ===
def convergence(seeds=DEFAULT_SEEDS, hidden=16, layers=20, epochs=30, frames_per_class=1000, batch_size=16):
    rows = []
    for seed in seeds:
        split = _toy_data(seed, frames_per_class=frames_per_class)
        hw_config = _highway(split["train"], hidden, layers)
        hw_params = init_params(hw_config, seed)
        plain_config = ModelConfig(hw_config.input_dim, hidden, layers, hw_config.output_dim, "plain_dnn")
        plain_params = Parameters(list(hw_params.hidden), hw_params.output).copy()
        tcfg = TrainConfig(epochs=epochs, batch_size=batch_size, seed=seed)
        plain = train(plain_params, plain_config, split["train"], tcfg).history.iloc[-1]
        highway = train(hw_params, hw_config, split["train"], tcfg).history.iloc[-1]
        rows.append({"seed": seed, "plain_ce": plain["loss"], "highway_ce": highway["loss"],
                     "plain_fer": plain["fer"], "highway_fer": highway["fer"]})
    table = pd.DataFrame(rows, columns=["seed", "plain_ce", "highway_ce", "plain_fer", "highway_fer"])
    wins = int((table["highway_ce"] < table["plain_ce"]).sum())
    return RecipeResult("convergence", table, _enough(wins, len(seeds), 0.8),
                        f"highway reached lower training CE in {wins}/{len(seeds)} seeds")


# === Gate ablation ===
def gates(seeds=DEFAULT_SEEDS, hidden=16, layers=6, epochs=10):
    frames = []
    for seed in seeds:
        split = _toy_data(seed)
        test = split["test"]
        for variant, gate in GATE_VARIANTS.items():
            config = _highway(split["train"], hidden, layers, gate)

            def track(epoch, current):
                summary = gate_summary(forward(current, config, test.features))
                return {
                    "valid_fer": evaluate(current, config, test).fer,
                    "transform_mean": float(summary["transform_mean"].mean()),
                    "carry_mean": float(summary["carry_mean"].mean()),
                }

            result = train(init_params(config, seed), config, split["train"],
                           TrainConfig(epochs=epochs, seed=seed), on_epoch_end=track)
            history = result.history.assign(seed=seed, variant=variant)
            frames.append(history)
    table = pd.concat(frames, ignore_index=True)
    ends = table.groupby(["seed", "variant"])["valid_fer"].agg(["first", "last"])
    improved = int((ends["last"] <= ends["first"]).sum())
    return RecipeResult("gates", table, improved == len(ends),
                        f"{improved}/{len(ends)} gate runs ended at or below their initial validation FER")


# === sMBR after CE: which groups move ===
def _sequence_task(seed, hidden, layers, ce_epochs, num_utterances, frames_per_utt, separation, confusion):
    """Overlapping classes, a CE-trained start and competitor-rich toy lattices."""
    split = _toy_data(seed, separation=separation)
    params, config = _ce_model(split["train"], hidden, layers, seed, ce_epochs)
    utterances = generate_utterances(split["train"], num_utterances, frames_per_utt, config.output_dim, seed,
                                     confusion=confusion, rejoin=True)
    return split, params, config, utterances


def _smbr_runs(seeds, settings_grid, hidden, layers, ce_epochs, smbr_epochs, num_utterances, frames_per_utt,
               separation, confusion):
    rows = []
    for seed in seeds:
        split, params, config, utterances = _sequence_task(seed, hidden, layers, ce_epochs, num_utterances,
                                                           frames_per_utt, separation, confusion)
        for update, p in settings_grid:
            tcfg = TrainConfig(objective="smbr_ce", learning_rate=settings.SMBR_LEARNING_RATE,
                               epochs=smbr_epochs, p=p, mask=ParamMask.parse(update), seed=seed)
            result = train(params, config, None, tcfg, utterances=utterances)
            history = result.history
            rows.append({
                "seed": seed, "update": update, "p": p,
                "initial_expected_accuracy": float(history["expected_accuracy"].iloc[0]),
                "final_expected_accuracy": float(history["expected_accuracy"].iloc[-1]),
                "initial_fer": evaluate(params, config, split["test"]).fer,
                "final_fer": evaluate(result.params, config, split["test"]).fer,
            })
    return pd.DataFrame(rows, columns=SMBR_COLUMNS)


def param_groups(seeds=DEFAULT_SEEDS, hidden=16, layers=4, ce_epochs=5, smbr_epochs=settings.SMBR_EPOCHS,
                 p=settings.SMBR_SMOOTHING, num_utterances=20, frames_per_utt=10, separation=2.0, confusion=4):
    grid = [(update, p) for update in ("all", "gates,output", "gates")]
    table = _smbr_runs(seeds, grid, hidden, layers, ce_epochs, smbr_epochs, num_utterances, frames_per_utt,
                       separation, confusion)
    held = int((table["final_expected_accuracy"] >= table["initial_expected_accuracy"]).sum())
    return RecipeResult("param-groups", table, held == len(table),
                        f"expected accuracy did not drop in {held}/{len(table)} runs")


def smbr_regularization(seeds=DEFAULT_SEEDS, hidden=16, layers=4, ce_epochs=5,
                        smbr_epochs=settings.SMBR_EPOCHS, num_utterances=20, frames_per_utt=10,
                        separation=2.0, confusion=4):
    grid = [(update, p) for update in ("all", "gates") for p in (0.0, settings.SMBR_SMOOTHING)]
    table = _smbr_runs(seeds, grid, hidden, layers, ce_epochs, smbr_epochs, num_utterances, frames_per_utt,
                       separation, confusion)
    gates_free = table[(table["update"] == "gates") & (table["p"] == 0.0)]
    held = int((gates_free["final_expected_accuracy"] >= gates_free["initial_expected_accuracy"]).sum())
    return RecipeResult("smbr-reg", table, held == len(gates_free),
                        f"gates-only sMBR without smoothing held expected accuracy in {held}/{len(gates_free)} seeds")


# === Teacher-student ===
def distillation(seeds=DEFAULT_SEEDS, teacher_hidden=64, teacher_layers=3, student_hidden=8,
                 student_layers=6, epochs=10, qs=(0.2, 0.5, 1.0), temperatures=(1.0, 2.0, 3.0),
                 teacher_epochs=30, test_frames_per_class=250):
    rows = []
    for seed in seeds:
        split = _toy_data(seed, separation=3.0, test_frames_per_class=test_frames_per_class)
        teacher = TeacherModel(*_ce_model(split["train"], teacher_hidden, teacher_layers, seed, teacher_epochs))
        config = _highway(split["train"], student_hidden, student_layers)
        init = init_params(config, seed + 1)
        runs = [("hard", "ce", 0.0, 1.0)]
        runs += [("kd", "kd", 0.0, t) for t in temperatures]
        runs += [("hybrid", "hybrid", q, 1.0) for q in qs]
        for label, objective, q, temperature in runs:
            tcfg = TrainConfig(objective=objective, epochs=epochs, q=q, temperature=temperature, seed=seed)
            result = train(init, config, split["train"], tcfg, teacher=None if objective == "ce" else teacher)
            history = result.history
            rows.append({
                "seed": seed, "student": label, "q": q, "temperature": temperature,
                "initial_loss": float(history["loss"].iloc[0]), "final_loss": float(history["loss"].iloc[-1]),
                "test_fer": evaluate(result.params, config, split["test"]).fer,
            })
        logger.info(f"📊 distillation seed {seed}: teacher test FER {evaluate(*teacher, split['test']).fer:.4f}")
    table = pd.DataFrame(rows, columns=["seed", "student", "q", "temperature", "initial_loss", "final_loss",
                                        "test_fer"])
    hard = table[table["student"] == "hard"].set_index("seed")["test_fer"]
    kd = table[(table["student"] == "kd") & (table["temperature"] == 1.0)].set_index("seed")["test_fer"]
    wins = int((kd <= hard).sum())
    hybrid = table[table["student"] == "hybrid"]
    converged = bool(np.all(np.isfinite(hybrid["final_loss"])) and (hybrid["final_loss"] < hybrid["initial_loss"]).all())
    return RecipeResult("distillation", table, _enough(wins, len(seeds), 0.6) and converged,
                        f"KL student matched or beat the hard-label student in {wins}/{len(seeds)} seeds; "
                        f"hybrid runs converged: {converged}")


# === Sequence-trained teacher for a sequence-trained student ===
def teacher_smbr(seeds=DEFAULT_SEEDS, teacher_hidden=32, teacher_layers=3, student_hidden=8, student_layers=6,
                 ce_epochs=10, kd_epochs=10, smbr_epochs=settings.SMBR_EPOCHS, p=settings.SMBR_SMOOTHING,
                 num_utterances=20, frames_per_utt=10, separation=2.0, confusion=4):
    """CE teacher -> sMBR teacher; each supervises a KL student that is then
    sequence trained with the KL-smoothed sMBR loss against the same teacher."""
    rows = []
    for seed in seeds:
        split, ce_params, teacher_config, utterances = _sequence_task(
            seed, teacher_hidden, teacher_layers, ce_epochs, num_utterances, frames_per_utt, separation, confusion)
        smbr_tcfg = TrainConfig(objective="smbr_ce", learning_rate=settings.SMBR_LEARNING_RATE,
                                epochs=smbr_epochs, p=p, seed=seed)
        smbr_params = train(ce_params, teacher_config, None, smbr_tcfg, utterances=utterances).params
        config = _highway(split["train"], student_hidden, student_layers)
        init = init_params(config, seed + 1)
        for route, teacher_params in (("ce", ce_params), ("smbr", smbr_params)):
            teacher = TeacherModel(teacher_params, teacher_config)
            student = train(init, config, split["train"], TrainConfig(objective="kd", epochs=kd_epochs, seed=seed),
                            teacher=teacher).params
            sequence = train(student, config, None,
                             TrainConfig(objective="smbr_kl", learning_rate=settings.SMBR_LEARNING_RATE,
                                         epochs=smbr_epochs, p=p, seed=seed),
                             teacher=teacher, utterances=utterances)
            history = sequence.history
            rows.append({
                "seed": seed, "teacher": route,
                "teacher_fer": evaluate(teacher_params, teacher_config, split["test"]).fer,
                "kd_fer": evaluate(student, config, split["test"]).fer,
                "final_fer": evaluate(sequence.params, config, split["test"]).fer,
                "initial_expected_accuracy": float(history["expected_accuracy"].iloc[0]),
                "final_expected_accuracy": float(history["expected_accuracy"].iloc[-1]),
            })
    table = pd.DataFrame(rows, columns=["seed", "teacher", "teacher_fer", "kd_fer", "final_fer",
                                        "initial_expected_accuracy", "final_expected_accuracy"])
    by_route = table.pivot(index="seed", columns="teacher", values="final_fer")
    better = int((by_route["smbr"] <= by_route["ce"]).sum()) if len(by_route) else 0
    held = int((table["final_expected_accuracy"] >= table["initial_expected_accuracy"]).sum())
    return RecipeResult("teacher-smbr", table, held == len(table),
                        f"KL-smoothed sMBR held expected accuracy in {held}/{len(table)} student runs; "
                        f"sMBR-teacher students matched or beat CE-teacher students in {better}/{len(by_route)} seeds")


# === Adaptation to a shifted speaker ===
def adaptation(seeds=DEFAULT_SEEDS, hidden=16, layers=4, epochs=10, learning_rate=settings.ADAPT_LEARNING_RATE,
               shift=4.0, base_epochs=10, adapt_frames_per_class=500,
               sources=("hard_pseudo", "oracle_hard", "soft_teacher"), updates=("gates", "all")):
    rows = []
    for seed in seeds:
        split = _toy_data(seed, adapt_frames_per_class=adapt_frames_per_class, shift=shift)
        params, config = _ce_model(split["train"], hidden, layers, seed, base_epochs)
        teacher = TeacherModel(*_ce_model(split["train"], 2 * hidden, 2, seed + 1, base_epochs))
        adapt_data, held_out = split["adapt"].split(0.5, seed)
        for update in updates:
            for source in sources:
                acfg = AdaptConfig(learning_rate=learning_rate, epochs=epochs, label_source=source,
                                   mask=ParamMask.parse(update), seed=seed)
                result = adapt(params, config, adapt_data, acfg,
                               teacher=teacher if source == "soft_teacher" else None,
                               on_epoch_end=lambda epoch, current: {
                                   "heldout_fer": evaluate(current, config, held_out).fer})
                history = result.history.assign(seed=seed, update=update, labels=source)
                rows.append(history[ADAPT_COLUMNS])
    table = pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=ADAPT_COLUMNS)
    mid = min(settings.ADAPT_EPOCHS, epochs)
    wins, stable = adaptation_verdict(table, "gates", "hard_pseudo", mid, epochs)
    return RecipeResult("adaptation", table, _enough(wins, len(seeds), 0.8) and stable,
                        f"gates-only pseudo-label adaptation lowered held-out FER in {wins}/{len(seeds)} seeds "
                        f"after {mid} epochs; no later rise: {stable}")


def adaptation_verdict(table, update, labels, mid, last, tolerance=0.01):
    """(seeds whose held-out FER at `mid` is below epoch 0, FER at `last` within tolerance of `mid` everywhere)."""
    runs = table[(table["update"] == update) & (table["labels"] == labels)]
    if runs.empty:
        return 0, False
    fer = runs.pivot(index="seed", columns="epoch", values="heldout_fer")
    return int((fer[mid] < fer[0]).sum()), bool((fer[last] <= fer[mid] + tolerance).all())


RECIPES = {
    "convergence": convergence,
    "gates": gates,
    "param-groups": param_groups,
    "smbr-reg": smbr_regularization,
    "distillation": distillation,
    "teacher-smbr": teacher_smbr,
    "adaptation": adaptation,
}
