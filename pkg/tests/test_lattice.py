# tests/test_lattice.py

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import log_softmax

from src.errors import CapacityError, ConsistencyError, FormatError, ParameterError, ShapeError, StructuralError
from src.lattice import (
    Lattice,
    ReferencePath,
    brute_force_smbr,
    connect,
    enumerate_paths,
    path_score,
    read_lattice,
    regularized_sequence_loss,
    smbr_forward_backward,
    write_lattice,
)
from src.losses import TargetBatch, ce_loss, kl_loss, softmax_temperature
from src.synthetic_data import make_toy_lattice
from tests.helpers import onehot


def diamond():
    """Two frames, two competing paths: states (0, 0) and (1, 1)."""
    arcs = [(0, 1, 0, 0.0), (0, 2, 1, 0.0), (1, 3, 0, 0.0), (2, 3, 1, 0.0)]
    return Lattice(2, 4, arcs)


def random_case(rng, max_frames=8, num_states=4):
    frames = int(rng.integers(1, max_frames + 1))
    reference = ReferencePath(rng.integers(0, num_states, size=frames))
    lattice = make_toy_lattice(reference.states, num_states, rng, confusion=3)
    log_post = log_softmax(rng.standard_normal((frames, num_states)) * 2.0, axis=1)
    return lattice, reference, log_post


# === hand examples ===
def test_diamond_expected_accuracy():
    log_post = np.log(np.full((2, 2), 0.5))
    result = smbr_forward_backward(diamond(), ReferencePath([0, 0]), log_post)
    assert result.expected_accuracy == pytest.approx(1.0, abs=1e-12)
    assert result.loss == pytest.approx(1.0, abs=1e-12)
    assert_allclose(result.arc_posteriors, 0.5, atol=1e-12)
    # raising the reference state's score helps, the competitor's hurts
    assert result.d_log_posteriors[0, 0] < 0 < result.d_log_posteriors[0, 1]


def test_single_path_lattice_has_no_gradient():
    lattice = Lattice(3, 4, [(0, 1, 2, -0.3), (1, 2, 0, 0.0), (2, 3, 1, -1.0)])
    log_post = log_softmax(np.random.default_rng(0).standard_normal((3, 3)), axis=1)
    result = smbr_forward_backward(lattice, ReferencePath([2, 1, 1]), log_post)
    assert result.expected_accuracy == pytest.approx(2.0, abs=1e-12)
    assert_allclose(result.d_log_posteriors, 0.0, atol=1e-15)
    assert path_score(lattice, [0, 1, 2], log_post, 1.0) == pytest.approx(
        log_post[0, 2] + log_post[1, 0] + log_post[2, 1] - 1.3)


def test_num_paths_and_enumeration():
    lattice = diamond()
    assert lattice.num_paths() == 2
    assert sorted(map(tuple, enumerate_paths(lattice))) == [(0, 2), (1, 3)]
    with pytest.raises(CapacityError):
        enumerate_paths(lattice, limit=1)


# === oracle equivalence ===
def test_forward_backward_matches_brute_force_on_random_lattices():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        lattice, reference, log_post = random_case(rng)
        k = float(rng.choice([0.5, 1.0, 2.0]))
        fast = smbr_forward_backward(lattice, reference, log_post, k)
        slow = brute_force_smbr(lattice, reference, log_post, k)
        assert fast.expected_accuracy == pytest.approx(slow.expected_accuracy, abs=1e-10)
        assert_allclose(fast.d_log_posteriors, slow.d_log_posteriors, rtol=0, atol=1e-5)


def test_expected_accuracy_bounds_and_frame_sums():
    rng = np.random.default_rng(5)
    for _ in range(20):
        lattice, reference, log_post = random_case(rng)
        result = smbr_forward_backward(lattice, reference, log_post)
        assert -1e-12 <= result.expected_accuracy <= lattice.num_frames + 1e-12
        assert_allclose(result.d_log_posteriors.sum(axis=1), 0.0, atol=1e-12)
        gamma_per_frame = np.bincount(lattice.arc_frame, weights=result.arc_posteriors, minlength=lattice.num_frames)
        assert_allclose(gamma_per_frame, 1.0, atol=1e-12)


def test_per_frame_score_shift_is_invariant():
    rng = np.random.default_rng(9)
    lattice, reference, log_post = random_case(rng, max_frames=6)
    shifted = log_post + rng.standard_normal((lattice.num_frames, 1)) * 5.0
    a = smbr_forward_backward(lattice, reference, log_post)
    b = smbr_forward_backward(lattice, reference, shifted)
    assert a.expected_accuracy == pytest.approx(b.expected_accuracy, abs=1e-12)
    assert_allclose(a.d_log_posteriors, b.d_log_posteriors, atol=1e-12)


def without_lm(lattice):
    return Lattice(lattice.num_frames, lattice.num_nodes, [(a.src, a.dst, a.state, 0.0) for a in lattice.arcs])


def test_acoustic_scale_is_irrelevant_when_all_paths_score_alike():
    rng = np.random.default_rng(17)
    for _ in range(20):
        lattice, reference, _ = random_case(rng)
        lattice = without_lm(lattice)
        flat = np.full((lattice.num_frames, 4), np.log(0.25))
        one = smbr_forward_backward(lattice, reference, flat, k=1.0)
        two = smbr_forward_backward(lattice, reference, flat, k=2.0)
        assert one.expected_accuracy == pytest.approx(two.expected_accuracy, abs=1e-12)
        paths = lattice.arc_state[enumerate_paths(lattice)]
        mean_accuracy = np.mean(np.sum(paths == reference.as_array(), axis=1))
        assert one.expected_accuracy == pytest.approx(mean_accuracy, abs=1e-12)


def test_dominant_reference_path_gives_full_accuracy():
    rng = np.random.default_rng(23)
    for _ in range(20):
        lattice, reference, _ = random_case(rng)
        lattice = without_lm(lattice)
        log_post = log_softmax(50.0 * onehot(reference.as_array(), 4), axis=1)
        result = smbr_forward_backward(lattice, reference, log_post)
        assert result.expected_accuracy == pytest.approx(lattice.num_frames, abs=1e-12)
        assert result.loss == pytest.approx(0.0, abs=1e-12)


def test_small_step_along_negative_gradient_lowers_risk():
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(100):
        lattice, reference, log_post = random_case(rng)
        result = smbr_forward_backward(lattice, reference, log_post)
        if np.sum(result.d_log_posteriors ** 2) < 1e-6:
            continue  # single-path lattice or already saturated
        stepped = smbr_forward_backward(lattice, reference, log_post - 1e-3 * result.d_log_posteriors)
        assert stepped.loss < result.loss
        checked += 1
    assert checked > 50


# === structure checks ===
def test_structural_errors():
    with pytest.raises(StructuralError):
        Lattice(2, 3, [(0, 1, 0, 0.0), (1, 2, 0, 0.0), (0, 2, 1, 0.0)])  # skip arc
    with pytest.raises(StructuralError):
        Lattice(2, 4, [(0, 1, 0, 0.0), (1, 3, 0, 0.0), (0, 2, 1, 0.0)])  # node 2 is a dead end
    with pytest.raises(StructuralError):
        Lattice(1, 3, [(0, 2, 0, 0.0)])  # node 1 unreachable
    with pytest.raises(StructuralError):
        smbr_forward_backward(diamond(), ReferencePath([0]), np.zeros((2, 2)))
    with pytest.raises(StructuralError):
        smbr_forward_backward(diamond(), ReferencePath([0, 0]), np.zeros((2, 1)))
    with pytest.raises(ShapeError):
        smbr_forward_backward(diamond(), ReferencePath([0, 0]), np.zeros((3, 2)))
    with pytest.raises(StructuralError):
        path_score(diamond(), [0, 3], np.zeros((2, 2)), 1.0)


def test_connect_prunes_dead_ends():
    arcs = [(0, 1, 0, 0.0), (0, 2, 1, 0.0), (1, 3, 0, 0.0)]
    lattice = connect(2, 4, arcs)
    assert lattice.num_nodes == 3
    assert lattice.num_paths() == 1
    with pytest.raises(StructuralError):
        connect(2, 4, [(0, 1, 0, 0.0)])


# === regularized objective ===
def test_regularized_loss_combines_terms(rng):
    lattice, reference = diamond(), ReferencePath([0, 1])
    z = rng.standard_normal((2, 3))
    y = softmax_temperature(z)
    smbr = smbr_forward_backward(lattice, reference, np.log(y))
    frame = ce_loss(y, TargetBatch.from_labels(reference.as_array()))
    plain = regularized_sequence_loss(smbr, frame, 0.0, "ce_smoothed", y)
    assert plain.value == smbr.loss
    mixed = regularized_sequence_loss(smbr, frame, 0.2, "ce_smoothed", y)
    assert mixed.value == pytest.approx(smbr.loss + 0.2 * frame.value)
    assert_allclose(mixed.d_logits.sum(axis=1), 0.0, atol=1e-12)
    teacher = kl_loss(y, TargetBatch.from_posteriors(softmax_temperature(z * 0.5)))
    assert regularized_sequence_loss(smbr, teacher, 0.5, "kl_smoothed", y).kind == "kl_smoothed"


def test_regularized_loss_errors(rng):
    lattice, reference = diamond(), ReferencePath([0, 1])
    y = softmax_temperature(rng.standard_normal((2, 2)))
    smbr = smbr_forward_backward(lattice, reference, np.log(y))
    frame = ce_loss(y, TargetBatch.from_labels([0, 1]))
    with pytest.raises(ParameterError):
        regularized_sequence_loss(smbr, frame, 0.2, "kl_smoothed", y)
    with pytest.raises(ParameterError):
        regularized_sequence_loss(smbr, frame, -1.0, "ce_smoothed", y)
    short = ce_loss(y[:1], TargetBatch.from_labels([0]))
    with pytest.raises(ConsistencyError):
        regularized_sequence_loss(smbr, short, 0.2, "ce_smoothed", y)


# === text format ===
def test_lattice_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    lattice, reference, _ = random_case(rng, max_frames=6)
    path = tmp_path / "utt.lat"
    write_lattice(lattice, reference, str(path))
    loaded, loaded_ref = read_lattice(str(path))
    assert loaded.arcs == lattice.arcs
    assert loaded.num_nodes == lattice.num_nodes
    assert loaded_ref == reference


def test_lattice_file_errors(tmp_path):
    bad = tmp_path / "bad.lat"
    bad.write_text("LAT 2 4\nARC 0 1 zero 0.0\n")
    with pytest.raises(FormatError, match="bad.lat:2"):
        read_lattice(str(bad))
    missing_ref = tmp_path / "noref.lat"
    missing_ref.write_text("LAT 1 2\nARC 0 1 0 0.0\n")
    with pytest.raises(FormatError):
        read_lattice(str(missing_ref))
