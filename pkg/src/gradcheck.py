# src/gradcheck.py: central-difference check of every training objective

from typing import NamedTuple

import numpy as np
import pandas as pd
from loguru import logger

from src.config import GRADCHECK_ATOL, GRADCHECK_RTOL, GRADCHECK_SMBR_RTOL, GRADCHECK_STEP
from src.lattice import ReferencePath
from src.model_trainer import SEQUENCE_OBJECTIVES, loss_and_gradients
from src.network import ModelConfig, init_params
from src.synthetic_data import make_toy_lattice


class GradCase(NamedTuple):
    name: str
    objective: str
    temperature: float = 1.0
    q: float = 0.0
    p: float = 0.0


def default_cases():
    cases = [GradCase("ce", "ce")]
    cases += [GradCase(f"kd_T{t:g}", "kd", temperature=t) for t in (1.0, 2.0, 3.0)]
    cases += [GradCase(f"hybrid_q{q:g}", "hybrid", q=q) for q in (0.0, 0.2, 1.0)]
    for objective in SEQUENCE_OBJECTIVES:
        cases += [GradCase(f"{objective}_p{p:g}", objective, p=p) for p in (0.0, 0.2, 0.5)]
    return cases


def numerical_gradient(loss_fn, params, step=GRADCHECK_STEP):
    """Central differences (f(θ+h) - f(θ-h)) / 2h for every scalar parameter."""
    probe = params.copy()
    grads = []
    for array in probe.arrays():
        flat = array.reshape(-1)
        grad = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn(probe)
            flat[i] = orig - step
            down = loss_fn(probe)
            flat[i] = orig
            grad[i] = (up - down) / (2 * step)
        grads.append(grad.reshape(array.shape))
    return params.rebuild(grads)


def compare_gradients(analytic, numeric, rtol=GRADCHECK_RTOL, atol=GRADCHECK_ATOL):
    """Per-array comparison; an entry passes when |a - n| <= rtol * max(|a|, |n|) + atol."""
    rows = []
    for (group, name, a), n in zip(analytic.named_arrays(), numeric.arrays()):
        diff = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        rel = diff / np.maximum(scale, np.finfo(np.float64).tiny)
        rows.append({
            "group": group,
            "array": name,
            "max_abs_err": float(diff.max()),
            "max_rel_err": float(rel[scale > atol].max()) if np.any(scale > atol) else 0.0,
            "passed": bool(np.all(diff <= rtol * scale + atol)),
        })
    return pd.DataFrame(rows)


def random_problem(seed, input_dim=5, hidden_dim=6, num_layers=3, output_dim=4, batch=4):
    """A small highway net with nonzero biases, a batch, labels, teacher posteriors and a lattice."""
    rng = np.random.default_rng(seed)
    config = ModelConfig(input_dim, hidden_dim, num_layers, output_dim, "highway")
    params = init_params(config, seed)
    params = params.rebuild(
        rng.uniform(-0.5, 0.5, size=a.shape) if name.startswith("b") else a
        for _, name, a in params.named_arrays()
    )
    features = rng.standard_normal((batch, input_dim))
    labels = rng.integers(0, output_dim, size=batch)
    teacher = rng.dirichlet(np.ones(output_dim), size=batch)
    reference = ReferencePath(labels)
    lattice = make_toy_lattice(reference.states, output_dim, rng, confusion=3)
    return config, params, features, labels, teacher, lattice, reference


def check_case(case, problem):
    config, params, features, labels, teacher, lattice, reference = problem
    kwargs = dict(
        labels=labels, teacher_posteriors=teacher, q=case.q, p=case.p, temperature=case.temperature,
    )
    if case.objective in SEQUENCE_OBJECTIVES:
        kwargs.update(lattice=lattice, reference=reference)

    def loss_fn(candidate):
        return loss_and_gradients(candidate, config, features, case.objective, **kwargs)[0].value

    _, analytic, _, _ = loss_and_gradients(params, config, features, case.objective, **kwargs)
    numeric = numerical_gradient(loss_fn, params)
    rtol = GRADCHECK_SMBR_RTOL if case.objective in SEQUENCE_OBJECTIVES else GRADCHECK_RTOL
    report = compare_gradients(analytic, numeric, rtol=rtol)
    report.insert(0, "case", case.name)
    return report


def run_suite(seed, cases=None):
    """Check every case on one random problem; returns one row per (case, array)."""
    problem = random_problem(seed)
    reports = []
    for case in cases or default_cases():
        report = check_case(case, problem)
        status = "✅" if report["passed"].all() else "❌"
        logger.info(f"{status} gradcheck {case.name}: max rel err {report['max_rel_err'].max():.2e}")
        reports.append(report)
    return pd.concat(reports, ignore_index=True)
