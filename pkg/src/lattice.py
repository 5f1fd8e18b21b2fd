# src/lattice.py: frame-level hypothesis lattices and the sMBR objective
#
# Every arc spans exactly one frame. Node 0 is the start node (time 0) and
# node num_nodes - 1 the end node (time num_frames). Acoustic scores are
# k * log y[t, state]; path posteriors are a softmax over complete-path scores.

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from loguru import logger
from scipy.special import softmax

from src.config import MAX_ENUMERATED_PATHS
from src.errors import (
    CapacityError,
    ConsistencyError,
    FormatError,
    ParameterError,
    ShapeError,
    StructuralError,
)
from src.losses import LossResult

SEQUENCE_MODES = ("ce_smoothed", "kl_smoothed")
BRUTE_FORCE_STEP = 1e-6


class Arc(NamedTuple):
    src: int
    dst: int
    state: int
    lm_score: float


class Lattice:
    def __init__(self, num_frames, num_nodes, arcs):
        if num_frames < 1:
            raise StructuralError("a lattice needs at least one frame")
        if num_nodes < 2:
            raise StructuralError("a lattice needs a start and an end node")
        self.num_frames = int(num_frames)
        self.num_nodes = int(num_nodes)
        self.arcs = tuple(Arc(int(a[0]), int(a[1]), int(a[2]), float(a[3])) for a in arcs)
        if not self.arcs:
            raise StructuralError("a lattice needs at least one arc")
        self.node_times = self._assign_times()
        self._check_on_complete_path()

        self.arc_src = np.array([a.src for a in self.arcs], dtype=np.int64)
        self.arc_dst = np.array([a.dst for a in self.arcs], dtype=np.int64)
        self.arc_state = np.array([a.state for a in self.arcs], dtype=np.int64)
        self.arc_lm = np.array([a.lm_score for a in self.arcs], dtype=np.float64)
        self.arc_frame = self.node_times[self.arc_src]
        self.frame_arcs = [np.flatnonzero(self.arc_frame == t) for t in range(self.num_frames)]

    @property
    def start(self):
        return 0

    @property
    def end(self):
        return self.num_nodes - 1

    def _assign_times(self):
        out_arcs = [[] for _ in range(self.num_nodes)]
        for a in self.arcs:
            if not (0 <= a.src < self.num_nodes and 0 <= a.dst < self.num_nodes):
                raise StructuralError(f"arc {a} references a node outside [0, {self.num_nodes})")
            if a.state < 0:
                raise StructuralError(f"arc {a} has a negative state id")
            out_arcs[a.src].append(a.dst)
        times = np.full(self.num_nodes, -1, dtype=np.int64)
        times[0] = 0
        queue = deque([0])
        while queue:
            node = queue.popleft()
            for nxt in out_arcs[node]:
                if times[nxt] == -1:
                    times[nxt] = times[node] + 1
                    queue.append(nxt)
                elif times[nxt] != times[node] + 1:
                    raise StructuralError(f"node {nxt} is reached at inconsistent times (cycle or skip arc)")
        if np.any(times < 0):
            raise StructuralError(f"nodes {np.flatnonzero(times < 0).tolist()} are unreachable from the start")
        if times[self.end] != self.num_frames:
            raise StructuralError(f"end node sits at time {times[self.end]}, expected {self.num_frames}")
        if np.any(times > self.num_frames):
            raise StructuralError("arcs run past the last frame")
        return times

    def _check_on_complete_path(self):
        in_arcs = [[] for _ in range(self.num_nodes)]
        for a in self.arcs:
            in_arcs[a.dst].append(a.src)
        seen = np.zeros(self.num_nodes, dtype=bool)
        seen[self.end] = True
        queue = deque([self.end])
        while queue:
            node = queue.popleft()
            for prev in in_arcs[node]:
                if not seen[prev]:
                    seen[prev] = True
                    queue.append(prev)
        if not seen.all():
            raise StructuralError(f"nodes {np.flatnonzero(~seen).tolist()} cannot reach the end node")

    def num_paths(self):
        counts = [0] * self.num_nodes
        counts[0] = 1
        for t in range(self.num_frames):
            for i in self.frame_arcs[t]:
                counts[self.arc_dst[i]] += counts[self.arc_src[i]]
        return counts[self.end]

    def max_state(self):
        return int(self.arc_state.max())


@dataclass(frozen=True)
class ReferencePath:
    states: tuple

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(int(s) for s in self.states))

    def __len__(self):
        return len(self.states)

    def as_array(self):
        return np.array(self.states, dtype=np.int64)


@dataclass
class SmbrResult:
    expected_accuracy: float
    loss: float
    d_log_posteriors: np.ndarray
    log_partition: float = 0.0
    arc_posteriors: np.ndarray = None


def connect(num_frames, num_nodes, arcs):
    """Drop nodes and arcs that are not on a start-to-end path, renumbering
    the survivors so the start stays 0 and the end stays last."""
    end = num_nodes - 1
    fwd = {0}
    changed = True
    while changed:
        changed = False
        for a in arcs:
            if a[0] in fwd and a[1] not in fwd:
                fwd.add(a[1])
                changed = True
    bwd = {end}
    changed = True
    while changed:
        changed = False
        for a in arcs:
            if a[1] in bwd and a[0] not in bwd:
                bwd.add(a[0])
                changed = True
    keep = sorted(fwd & bwd)
    if 0 not in keep or end not in keep:
        raise StructuralError("no complete path from start to end")
    remap = {old: new for new, old in enumerate(keep)}
    kept_arcs = [
        (remap[a[0]], remap[a[1]], a[2], a[3]) for a in arcs if a[0] in remap and a[1] in remap
    ]
    return Lattice(num_frames, len(keep), kept_arcs)


def _check_inputs(lattice, log_posteriors, reference=None):
    if log_posteriors.ndim != 2 or log_posteriors.shape[0] != lattice.num_frames:
        raise ShapeError(
            f"log-posteriors {log_posteriors.shape} do not cover {lattice.num_frames} frames"
        )
    if lattice.max_state() >= log_posteriors.shape[1]:
        raise StructuralError(
            f"lattice state {lattice.max_state()} outside the {log_posteriors.shape[1]} posterior columns"
        )
    if reference is not None and len(reference) != lattice.num_frames:
        raise StructuralError(
            f"reference has {len(reference)} states for {lattice.num_frames} frames"
        )


def arc_scores(lattice, log_posteriors, k):
    return k * log_posteriors[lattice.arc_frame, lattice.arc_state] + lattice.arc_lm


def path_score(lattice, path, log_posteriors, k):
    """Score of a complete path given as a sequence of arc indices."""
    _check_inputs(lattice, log_posteriors)
    path = list(path)
    if len(path) != lattice.num_frames:
        raise StructuralError(f"path has {len(path)} arcs, lattice has {lattice.num_frames} frames")
    node = lattice.start
    for i in path:
        if not 0 <= i < len(lattice.arcs) or lattice.arcs[i].src != node:
            raise StructuralError(f"arc {i} does not continue the path from node {node}")
        node = lattice.arcs[i].dst
    if node != lattice.end:
        raise StructuralError("path does not finish at the end node")
    return float(arc_scores(lattice, log_posteriors, k)[path].sum())


def smbr_forward_backward(lattice, reference, log_posteriors, k=1.0):
    """Expected state accuracy over the lattice and its log-posterior gradient.

    Alongside the usual alpha/beta log-masses, alpha_acc[n] (beta_acc[n]) holds
    the posterior-weighted accuracy of partial paths ending (starting) at n.
    """
    _check_inputs(lattice, log_posteriors, reference)
    ref = reference.as_array()
    scores = arc_scores(lattice, log_posteriors, k)
    correct = (lattice.arc_state == ref[lattice.arc_frame]).astype(np.float64)
    src, dst = lattice.arc_src, lattice.arc_dst

    alpha = np.full(lattice.num_nodes, -np.inf)
    alpha_acc = np.zeros(lattice.num_nodes)
    alpha[lattice.start] = 0.0
    for idx in lattice.frame_arcs:
        through = alpha[src[idx]] + scores[idx]
        np.logaddexp.at(alpha, dst[idx], through)
        weight = np.exp(through - alpha[dst[idx]])
        np.add.at(alpha_acc, dst[idx], weight * (alpha_acc[src[idx]] + correct[idx]))

    beta = np.full(lattice.num_nodes, -np.inf)
    beta_acc = np.zeros(lattice.num_nodes)
    beta[lattice.end] = 0.0
    for idx in reversed(lattice.frame_arcs):
        through = beta[dst[idx]] + scores[idx]
        np.logaddexp.at(beta, src[idx], through)
        weight = np.exp(through - beta[src[idx]])
        np.add.at(beta_acc, src[idx], weight * (beta_acc[dst[idx]] + correct[idx]))

    log_z = alpha[lattice.end]
    if not np.isfinite(log_z):
        raise StructuralError("lattice has no path with finite score")
    if abs(log_z - beta[lattice.start]) > 1e-9 * max(1.0, abs(log_z)):
        raise ConsistencyError(f"forward mass {log_z} and backward mass {beta[lattice.start]} disagree")

    gamma = np.exp(alpha[src] + scores + beta[dst] - log_z)
    arc_accuracy = alpha_acc[src] + correct + beta_acc[dst]
    expected = float(alpha_acc[lattice.end])

    d_log_post = np.zeros_like(log_posteriors, dtype=np.float64)
    np.add.at(d_log_post, (lattice.arc_frame, lattice.arc_state), -k * gamma * (arc_accuracy - expected))
    return SmbrResult(
        expected_accuracy=expected,
        loss=lattice.num_frames - expected,
        d_log_posteriors=d_log_post,
        log_partition=float(log_z),
        arc_posteriors=gamma,
    )


def enumerate_paths(lattice, limit=MAX_ENUMERATED_PATHS):
    """All complete paths as a (num_paths, num_frames) array of arc indices."""
    total = lattice.num_paths()
    if total > limit:
        raise CapacityError(f"lattice has {total} complete paths, enumeration limit is {limit}")
    out_arcs = [[] for _ in range(lattice.num_nodes)]
    for i, a in enumerate(lattice.arcs):
        out_arcs[a.src].append(i)
    paths = []
    stack = [(lattice.start, [])]
    while stack:
        node, prefix = stack.pop()
        if node == lattice.end:
            paths.append(prefix)
            continue
        for i in reversed(out_arcs[node]):
            stack.append((lattice.arcs[i].dst, prefix + [i]))
    return np.array(paths, dtype=np.int64)


def brute_force_smbr(lattice, reference, log_posteriors, k=1.0, step=BRUTE_FORCE_STEP):
    """Enumeration oracle for smbr_forward_backward; gradient by central differences."""
    _check_inputs(lattice, log_posteriors, reference)
    paths = enumerate_paths(lattice)
    ref = reference.as_array()
    path_states = lattice.arc_state[paths]
    accuracy = (path_states == ref[np.arange(lattice.num_frames)]).sum(axis=1).astype(np.float64)
    frames = np.broadcast_to(np.arange(lattice.num_frames), paths.shape)
    lm = lattice.arc_lm[paths].sum(axis=1)

    def expected_accuracy(logp):
        scores = k * logp[frames, path_states].sum(axis=1) + lm
        return float(softmax(scores) @ accuracy)

    value = expected_accuracy(log_posteriors)
    grad = np.zeros_like(log_posteriors, dtype=np.float64)
    for t in range(log_posteriors.shape[0]):
        for s in range(log_posteriors.shape[1]):
            bumped = log_posteriors.astype(np.float64, copy=True)
            bumped[t, s] += step
            up = expected_accuracy(bumped)
            bumped[t, s] -= 2 * step
            down = expected_accuracy(bumped)
            grad[t, s] = -(up - down) / (2 * step)
    return SmbrResult(value, lattice.num_frames - value, grad)


def regularized_sequence_loss(smbr, frame_loss, p, mode, posteriors, temperature=1.0):
    """sMBR risk smoothed with a frame loss (CE or teacher KL) weighted by p.

    The sMBR gradient is chained from log y to the logits through the
    log-softmax Jacobian: dz = (g - y * sum(g)) / T.
    """
    if mode not in SEQUENCE_MODES:
        raise ParameterError(f"unknown sequence mode {mode!r}; expected one of {SEQUENCE_MODES}")
    if p < 0:
        raise ParameterError(f"smoothing weight p must be nonnegative, got {p}")
    expected_kind = "ce" if mode == "ce_smoothed" else "kl"
    if frame_loss.kind != expected_kind:
        raise ParameterError(f"{mode} needs a {expected_kind} frame loss, got {frame_loss.kind}")
    g = smbr.d_log_posteriors
    if not (g.shape == frame_loss.d_logits.shape == posteriors.shape):
        raise ConsistencyError(
            f"frame counts differ: sMBR {g.shape}, frame loss {frame_loss.d_logits.shape}, posteriors {posteriors.shape}"
        )
    d_logits = (g - posteriors * g.sum(axis=1, keepdims=True)) / temperature
    return LossResult(
        value=smbr.loss + p * frame_loss.value,
        d_logits=d_logits + p * frame_loss.d_logits,
        kind=mode,
        floored=frame_loss.floored,
    )


# ==== Lattice text format ====

def write_lattice(lattice, reference, path):
    lines = [f"LAT {lattice.num_frames} {lattice.num_nodes}"]
    lines += [f"ARC {a.src} {a.dst} {a.state} {a.lm_score!r}" for a in lattice.arcs]
    lines.append("REF " + " ".join(str(s) for s in reference.states))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_lattice(path):
    header, arcs, reference = None, [], None
    with open(path, "r") as f:
        for lineno, raw in enumerate(f, start=1):
            fields = raw.split()
            if not fields:
                continue
            try:
                if fields[0] == "LAT" and len(fields) == 3:
                    header = (int(fields[1]), int(fields[2]))
                elif fields[0] == "ARC" and len(fields) == 5:
                    arcs.append((int(fields[1]), int(fields[2]), int(fields[3]), float(fields[4])))
                elif fields[0] == "REF":
                    reference = ReferencePath([int(s) for s in fields[1:]])
                else:
                    raise ValueError(f"unrecognised record {fields[0]!r}")
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from e
    if header is None:
        raise FormatError(f"{path}: missing LAT header")
    if reference is None:
        raise FormatError(f"{path}: missing REF line")
    lattice = Lattice(header[0], header[1], arcs)
    if len(reference) != lattice.num_frames:
        raise StructuralError(f"{path}: reference length {len(reference)} != {lattice.num_frames} frames")
    logger.debug(f"📄 Loaded lattice {path}: {lattice.num_frames} frames, {len(lattice.arcs)} arcs")
    return lattice, reference
