# src/synthetic_data.py: class-conditional Gaussian frames and toy lattices

import os
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from loguru import logger
from scipy.stats import ortho_group
from sklearn.datasets import make_blobs

from src.errors import FormatError, ParameterError
from src.lattice import ReferencePath, connect, read_lattice, write_lattice

BASE_SPEAKER = 0
ADAPT_SPEAKER = 1
TEST_SPEAKER = 2
SPLITS = {"train": BASE_SPEAKER, "adapt": ADAPT_SPEAKER, "test": TEST_SPEAKER}


@dataclass
class FrameDataset:
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    speakers: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.features)

    def subset(self, idx):
        return FrameDataset(
            self.features[idx],
            None if self.labels is None else self.labels[idx],
            None if self.speakers is None else self.speakers[idx],
        )

    def speaker(self, speaker_id):
        if self.speakers is None:
            return self if speaker_id == BASE_SPEAKER else self.subset(np.array([], dtype=np.int64))
        return self.subset(np.flatnonzero(self.speakers == speaker_id))

    def split(self, fraction, seed):
        """Seeded random split into (first, second) with `fraction` in the first."""
        order = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))


class Utterance(NamedTuple):
    features: np.ndarray
    lattice: object
    reference: ReferencePath


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int
    feature_dim: int
    frames_per_class: int
    separation: float = 6.0      # pairwise distance of class means, in units of noise_std
    noise_std: float = 1.0
    shift: Optional[tuple] = None
    adapt_frames_per_class: int = 0
    test_frames_per_class: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.feature_dim < 1 or self.frames_per_class < 1:
            raise ParameterError("need at least 2 classes, 1 feature dimension and 1 frame per class")
        if self.adapt_frames_per_class < 0 or self.test_frames_per_class < 0:
            raise ParameterError("split sizes must be nonnegative")
        if self.separation <= 0 or self.noise_std <= 0:
            raise ParameterError("separation and noise_std must be positive")
        if self.shift is not None and len(self.shift) != self.feature_dim:
            raise ParameterError(f"shift has {len(self.shift)} entries, feature_dim is {self.feature_dim}")


def class_means(spec):
    """Means at exactly spec.separation * noise_std pairwise distance when D >= J."""
    rng = np.random.default_rng(spec.seed)
    J, D = spec.num_classes, spec.feature_dim
    target = spec.separation * spec.noise_std
    if D >= J:
        rotation = ortho_group.rvs(D, random_state=rng) if D > 1 else np.ones((1, 1))
        return (target / np.sqrt(2.0)) * np.eye(J, D) @ rotation.T
    means = rng.standard_normal((J, D))
    gaps = [np.linalg.norm(means[i] - means[j]) for i in range(J) for j in range(i + 1, J)]
    return means * (target / min(gaps))


def random_shift(feature_dim, magnitude, seed):
    """A fixed-length offset in a seeded random direction."""
    direction = np.random.default_rng(seed).standard_normal(feature_dim)
    return tuple(magnitude * direction / np.linalg.norm(direction))


def generate_synthetic(spec):
    """Training frames plus optional held-out test and shifted adaptation splits.

    All splits share the class means; only the adaptation split is offset by
    `spec.shift`. `FrameDataset.speakers` marks the split of every frame.
    """
    means = class_means(spec)
    J = spec.num_classes
    shift = np.zeros(spec.feature_dim) if spec.shift is None else np.asarray(spec.shift, dtype=np.float64)
    splits = [
        (BASE_SPEAKER, spec.frames_per_class, means),
        (TEST_SPEAKER, spec.test_frames_per_class, means),
        (ADAPT_SPEAKER, spec.adapt_frames_per_class, means + shift),
    ]
    features, labels, speakers = [], [], []
    for offset, (speaker, per_class, centers) in enumerate(splits):
        if per_class == 0:
            continue
        x, y = make_blobs(
            n_samples=[per_class] * J,
            centers=centers,
            cluster_std=spec.noise_std,
            random_state=spec.seed + offset,
            shuffle=True,
        )
        features.append(x)
        labels.append(y)
        speakers.append(np.full(len(y), speaker, dtype=np.int64))
    logger.debug(f"🎲 Generated {sum(map(len, labels))} frames, {J} classes, dim {spec.feature_dim}")
    return FrameDataset(
        np.ascontiguousarray(np.vstack(features), dtype=np.float64),
        np.concatenate(labels).astype(np.int64),
        np.concatenate(speakers),
    )


def splice_frames(features, context):
    """Stack each frame with its ±context neighbours (edges repeat the boundary frame)."""
    if context < 0:
        raise ParameterError("context must be nonnegative")
    if context == 0:
        return features.copy()
    padded = np.pad(features, ((context, context), (0, 0)), mode="edge")
    n = len(features)
    return np.hstack([padded[offset:offset + n] for offset in range(2 * context + 1)])


def make_toy_lattice(reference, num_classes, rng, confusion=3, lm_scale=1.0, rejoin=False):
    """Frame-level lattice around a reference state sequence.

    Frame t offers the reference state plus up to confusion-1 competitors;
    each competitor arc leaves a random node of time t. Nodes at time t+1 are
    keyed by the state of their incoming arc, and everything off a complete
    path is pruned. With `rejoin`, every competitor node also gets a
    reference-state arc back onto the reference path, so no competitor is
    pruned.
    """
    T = len(reference)
    node_ids = {(0, None): 0}
    arcs = []

    def node(t, state):
        if t == T:
            return ("end",)
        return node_ids.setdefault((t, state), len(node_ids))

    prev_nodes = [0]
    prev_ref = 0
    for t, ref_state in enumerate(reference):
        others = [s for s in range(num_classes) if s != ref_state]
        n_comp = min(len(others), int(rng.integers(0, confusion)))
        competitors = rng.choice(others, size=n_comp, replace=False) if n_comp else []
        next_nodes = []
        ref_dst = node(t + 1, ref_state)
        arcs.append((prev_ref, ref_dst, int(ref_state), -lm_scale * float(rng.uniform(0.0, 1.0))))
        if rejoin:
            for src in prev_nodes:
                if src != prev_ref:
                    arcs.append((src, ref_dst, int(ref_state), -lm_scale * float(rng.uniform(0.0, 1.0))))
        next_nodes.append(ref_dst)
        for s in competitors:
            src = prev_nodes[int(rng.integers(0, len(prev_nodes)))]
            dst = node(t + 1, int(s))
            arcs.append((src, dst, int(s), -lm_scale * float(rng.uniform(0.0, 1.0))))
            next_nodes.append(dst)
        prev_nodes = list(dict.fromkeys(next_nodes))
        prev_ref = ref_dst

    end = len(node_ids)
    arcs = [(a[0], end if a[1] == ("end",) else a[1], a[2], a[3]) for a in arcs]
    return connect(T, end + 1, arcs)


def generate_utterances(data, num_utterances, frames_per_utterance, num_classes, seed, confusion=3, rejoin=False):
    """Cut contiguous frame chunks from `data` and give each a toy lattice."""
    if num_utterances * frames_per_utterance > len(data):
        raise ParameterError(
            f"{num_utterances} x {frames_per_utterance} frames exceed the {len(data)} available"
        )
    rng = np.random.default_rng(seed)
    utterances = []
    for u in range(num_utterances):
        sl = slice(u * frames_per_utterance, (u + 1) * frames_per_utterance)
        reference = ReferencePath(data.labels[sl])
        lattice = make_toy_lattice(reference.states, num_classes, rng, confusion, rejoin=rejoin)
        utterances.append(Utterance(data.features[sl], lattice, reference))
    return utterances


# === Dataset IO ===
def save_dataset(data, out_dir, utterances=None):
    os.makedirs(out_dir, exist_ok=True)
    np.savez(
        os.path.join(out_dir, "frames.npz"),
        features=data.features,
        labels=data.labels,
        speakers=data.speakers if data.speakers is not None else np.zeros(len(data), dtype=np.int64),
    )
    if utterances:
        lat_dir = os.path.join(out_dir, "lattices")
        os.makedirs(lat_dir, exist_ok=True)
        np.savez(os.path.join(out_dir, "utterances.npz"), features=np.stack([u.features for u in utterances]))
        for i, utt in enumerate(utterances):
            write_lattice(utt.lattice, utt.reference, os.path.join(lat_dir, f"utt_{i:04d}.lat"))
    logger.info(f"💾 Dataset saved to {out_dir} ({len(data)} frames, {len(utterances or [])} utterances)")


def load_dataset(data_dir):
    path = os.path.join(data_dir, "frames.npz")
    if not os.path.exists(path):
        raise FileNotFoundError(f"❌ Dataset not found: {path}")
    with np.load(path) as f:
        data = FrameDataset(f["features"], f["labels"], f["speakers"])
    return data


def load_utterances(data_dir):
    path = os.path.join(data_dir, "utterances.npz")
    lat_dir = os.path.join(data_dir, "lattices")
    if not os.path.exists(path) or not os.path.isdir(lat_dir):
        raise FileNotFoundError(f"❌ No utterances/lattices under {data_dir}")
    with np.load(path) as f:
        features = f["features"]
    lattice_files = sorted(name for name in os.listdir(lat_dir) if name.endswith(".lat"))
    if len(lattice_files) != len(features):
        raise FormatError(f"{len(lattice_files)} lattice files for {len(features)} utterances")
    utterances = []
    for feats, name in zip(features, lattice_files):
        lattice, reference = read_lattice(os.path.join(lat_dir, name))
        utterances.append(Utterance(np.ascontiguousarray(feats), lattice, reference))
    return utterances
