import math

import numpy as np
import pytest

from sicl import losses, oracles
from sicl.errors import ContractError
from sicl.losses import EmbeddingBatch
from sicl.verify import (loss_fn_with_fixed_q, oracle_value, random_aligned, random_two_view,
                         reduction_gaps, unit_rows)
from sicl import numerics as nx


def two_subject_batch():
    """Subject 0 sits in a tight clump; subject 1 has its two pairs on opposite poles."""
    e1, e2 = np.eye(4)[0], np.eye(4)[1]
    z1 = np.stack([e1, e1, e2, -e2])
    z2 = z1.copy()
    return EmbeddingBatch.two_view(z1, z2, subject_ids=[0, 0, 1, 1])


# -- nce ----------------------------------------------------------------------

def test_nce_identical_embeddings_is_log_n_minus_one():
    z = np.tile(np.eye(3)[0], (8, 1))
    b = EmbeddingBatch.two_view(z[:4], z[4:])
    assert losses.nce_loss(b, 0.3).value == pytest.approx(math.log(7), abs=1e-12)


def test_nce_hand_computed_orthogonal_pairs():
    # pairs aligned, different pairs orthogonal: loss = -1/t + log(e^{1/t} + 2)
    e = np.eye(2)
    b = EmbeddingBatch.two_view(e, e)
    tau = 0.5
    assert losses.nce_loss(b, tau).value == pytest.approx(-1 / tau + math.log(math.exp(1 / tau) + 2), abs=1e-12)


def test_nce_rejects_tiny_batch():
    b = EmbeddingBatch(np.eye(2), view_of=[1, 0])
    with pytest.raises(ContractError):
        losses.nce_loss(b, 0.1)


@pytest.mark.parametrize("name", losses.LOSSES)
def test_matches_oracle(name):
    rng = np.random.default_rng(123)
    for _ in range(10):
        tau = float(rng.choice([0.1, 0.5, 1.0]))
        if name in losses.MULTIMODAL:
            b, bm = random_aligned(rng)
        else:
            b, bm = random_two_view(rng), None
        got = losses.compute(name, b, tau, bm).value
        assert abs(got - oracle_value(name, b, tau, bm)) < 1e-10


@pytest.mark.parametrize("name", losses.LOSSES)
def test_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(7)
    for _ in range(3):
        if name in losses.MULTIMODAL:
            b, bm = random_aligned(rng, n=8, d=4)
            x0 = np.concatenate([b.z, bm.z])
        else:
            b, bm = random_two_view(rng, n=8, d=4), None
            x0 = b.z
        res, f = loss_fn_with_fixed_q(name, b, 0.5, bm)
        analytic = res.grad_z if bm is None else np.concatenate([res.grad_z, res.grad_z_m])
        assert nx.rel_error(analytic, nx.numeric_grad(f, x0)) < 1e-5


# -- q weights ----------------------------------------------------------------

def test_q_single_subject_is_one():
    b = random_two_view(np.random.default_rng(0), n=16, d=8, groups=1)
    b = EmbeddingBatch(b.z, np.zeros(16, dtype=int), view_of=b.view_of)
    qw = losses.q_weight(b, 0.2)
    np.testing.assert_allclose(qw.p, 1.0, atol=1e-15)
    np.testing.assert_allclose(qw.q, 1.0, atol=1e-15)


def test_q_unique_subjects_falls_back_to_one(caplog):
    b = random_two_view(np.random.default_rng(1), n=8, d=4)
    b = EmbeddingBatch(b.z, np.arange(8), view_of=b.view_of)
    with caplog.at_level("INFO"):
        qw = losses.q_weight(b, 0.2)
    assert not qw.has_same.any()
    np.testing.assert_array_equal(qw.q, 1.0)


def test_q_two_subject_direction():
    b = two_subject_batch()
    qw = losses.q_weight(b, 0.2)
    subj = b.subject_ids
    assert (qw.q[subj == 0] > 1).all()
    assert (qw.q[subj == 1] < 1).all()
    assert qw.q[qw.has_same].mean() == pytest.approx(1.0, abs=1e-12)


def test_q_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        b = random_two_view(rng)
        expected = oracles.sicl_q(b.z, b.view_of, b.subject_ids, 0.3)
        np.testing.assert_allclose(losses.q_weight(b, 0.3).q, expected, atol=1e-12)


def test_subject_pressure_raises_loss():
    b = two_subject_batch()
    assert losses.sicl_loss(b, 0.2).value > losses.nce_loss(b, 0.2).value


# -- reductions ---------------------------------------------------------------

def test_reduction_lattice():
    gaps = reduction_gaps(n_batches=5, seed=3)
    assert max(gaps.values()) < 1e-12, gaps


def test_supcon_single_class_is_log_n_minus_one_when_identical():
    z = np.tile(np.eye(3)[1], (6, 1))
    b = EmbeddingBatch(z, labels=np.zeros(6))
    assert losses.supcon_loss(b, 0.1).value == pytest.approx(math.log(5), abs=1e-12)


def test_supcon_names_lonely_class():
    z = unit_rows(np.random.default_rng(0), 5, 3)
    b = EmbeddingBatch(z, labels=[0, 0, 1, 1, 7])
    with pytest.raises(ContractError, match="7"):
        losses.supcon_loss(b, 0.1)


def test_cmc_hand_computed():
    e = np.eye(2)
    bk, bm = EmbeddingBatch(e, [0, 1]), EmbeddingBatch(e, [0, 1])
    tau = 0.25
    expected = -1 / tau + math.log(math.exp(1 / tau) + 1)
    assert losses.cmc_loss(bk, bm, tau).value == pytest.approx(expected, abs=1e-12)


def test_cmc_length_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        losses.cmc_loss(EmbeddingBatch(unit_rows(rng, 4, 3)), EmbeddingBatch(unit_rows(rng, 5, 3)), 0.1)


# -- properties ---------------------------------------------------------------

@pytest.mark.parametrize("name", ["nce", "sicl", "supcon", "si_supcon"])
def test_permutation_invariance(name):
    rng = np.random.default_rng(11)
    b = random_two_view(rng, n=16, d=8)
    perm = rng.permutation(16)
    inv = np.argsort(perm)
    pb = EmbeddingBatch(b.z[perm], b.subject_ids[perm], b.labels[perm], inv[b.view_of[perm]])
    r, pr = losses.compute(name, b, 0.2), losses.compute(name, pb, 0.2)
    assert pr.value == pytest.approx(r.value, abs=1e-12)
    np.testing.assert_allclose(pr.grad_z, r.grad_z[perm], atol=1e-12)


def test_nce_temperature_monotone_when_positive_is_nearest():
    e = np.eye(3)
    b = EmbeddingBatch.two_view(e, e)
    vals = [losses.nce_loss(b, t).value for t in (0.1, 0.2, 0.5, 1.0)]
    assert all(a < c for a, c in zip(vals, vals[1:]))


@pytest.mark.parametrize("name", losses.LOSSES)
def test_values_finite_and_nonnegative(name):
    rng = np.random.default_rng(2)
    b, bm = (random_aligned(rng) if name in losses.MULTIMODAL else (random_two_view(rng), None))
    r = losses.compute(name, b, 0.05, bm)
    assert np.isfinite(r.value) and r.value >= 0
    assert np.isfinite(r.grad_z).all()


def test_rejects_non_unit_rows():
    with pytest.raises(ContractError):
        EmbeddingBatch(np.ones((4, 2)), view_of=[1, 0, 3, 2])


def test_rejects_bad_view_of():
    with pytest.raises(ContractError):
        EmbeddingBatch(np.eye(4), view_of=[1, 2, 3, 0])


def test_rejects_non_positive_temperature():
    b = random_two_view(np.random.default_rng(0), n=8, d=4)
    with pytest.raises(ContractError):
        losses.nce_loss(b, 0.0)


def test_anchor_csv(tmp_path):
    b = two_subject_batch()
    path = losses.write_anchor_csv(tmp_path / "anchors.csv", losses.sicl_loss(b, 0.2))
    rows = path.read_text().strip().splitlines()
    assert len(rows) == 1 + len(b)
