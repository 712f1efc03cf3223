import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import oracles
from helpers import grad_check, unit_rows
from tscir.config import LossConfig
from tscir.objectives import (
    ContractError,
    composed_loss,
    contrastive_loss,
    mapping_loss,
    mine_batch_hard_negatives,
    mine_hard_negatives,
    mixing_weights,
    normalize,
    soft_alignment_loss,
    stage1_loss,
    stage2_loss,
)

E2 = torch.eye(2, dtype=torch.float64)
SWAP = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
UNIT_GAMMA = LossConfig(tau_stage1=1.0, tau_stage2=1.0)

# Frozen oracle values (computed by tests/oracles.py and closed forms).
CONTRASTIVE_2x2 = 0.31326168751822286  # log(1 + e^-1)
MAPPING_2x2 = 0.6265233750364457  # 2 log(1 + e^-1)
STA_2x2 = 0.46211715726000974  # 2 sigma(1) - 1 = tanh(1/2)
MAPPING_SWAPPED = 2.6265233750364456  # 2 log(1 + e)


seeds = st.integers(0, 2**32 - 1)
batch = st.integers(1, 8)
dims = st.integers(2, 16)


# ----------------------------------------------------------------- worked examples


def test_contrastive_worked_example():
    assert contrastive_loss(E2, E2, 1.0).item() == pytest.approx(CONTRASTIVE_2x2, abs=1e-12)
    assert oracles.naive_contrastive(E2, E2, 1.0) == pytest.approx(CONTRASTIVE_2x2, abs=1e-12)


def test_single_pair_batch_is_zero():
    u = torch.tensor([[0.6, 0.8]], dtype=torch.float64)
    assert contrastive_loss(u, u, 20.0).item() == 0.0


def test_mapping_worked_example():
    assert mapping_loss(E2, E2, 1.0).item() == pytest.approx(MAPPING_2x2, abs=1e-12)


def test_soft_alignment_worked_example():
    value = soft_alignment_loss(E2, SWAP, E2, 1.0).item()
    assert value == pytest.approx(STA_2x2, abs=1e-12)
    assert oracles.naive_soft_alignment(E2, SWAP, E2, 1.0) == pytest.approx(STA_2x2, abs=1e-12)


def test_stage1_worked_examples():
    total, parts = stage1_loss(E2, E2, E2, UNIT_GAMMA)
    assert total.item() == pytest.approx(MAPPING_2x2, abs=1e-12)
    assert parts["L_sta"] == 0.0
    # the soft-alignment batch: s swapped against v changes both terms
    total, parts = stage1_loss(E2, SWAP, E2, UNIT_GAMMA)
    assert parts["L_map"] == pytest.approx(MAPPING_SWAPPED, abs=1e-12)
    assert total.item() == pytest.approx(MAPPING_SWAPPED + 0.2 * STA_2x2, abs=1e-12)


def test_stage1_alpha_zero_is_mapping_loss():
    rng = np.random.default_rng(0)
    v, s, c = (unit_rows(rng, 5, 6) for _ in range(3))
    cfg = LossConfig(alpha=0.0)
    total, _ = stage1_loss(v, s, c, cfg)
    assert total.item() == mapping_loss(s, v, cfg.scale(1)).item()


def test_stage1_breakdown_recombines():
    rng = np.random.default_rng(1)
    v, s, c = (unit_rows(rng, 6, 5) for _ in range(3))
    cfg = LossConfig()
    total, parts = stage1_loss(v, s, c, cfg)
    assert abs(total.item() - cfg.alpha * parts["L_sta"] - parts["L_map"]) < 1e-9


def test_beta_worked_example():
    sims = torch.tensor([0.9, 0.5, 0.1], dtype=torch.float64)
    assert mixing_weights(sims, beta_clamp_max=1.0).tolist() == [1.0, 0.5, 0.0]
    assert mixing_weights(sims, beta_clamp_max=0.9).tolist() == [0.9, 0.5, 0.0]


def test_hard_negatives_on_constructed_candidates():
    t_gt = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    cands = torch.tensor([
        [0.9, math.sqrt(1 - 0.81), 0.0],
        [0.5, 0.0, math.sqrt(1 - 0.25)],
        [0.1, -math.sqrt(1 - 0.01), 0.0],
    ], dtype=torch.float64)
    # rank candidates in the same order as their similarity to t_gt
    mixed, beta = mine_hard_negatives(t_gt, t_gt, cands, 3, beta_clamp_max=1.0, return_beta=True)
    assert beta.tolist() == [1.0, 0.5, 0.0]
    assert torch.allclose(mixed[0], t_gt, atol=1e-12)
    assert torch.allclose(mixed[2], cands[2], atol=1e-12)
    expected_mid = normalize(0.5 * t_gt + 0.5 * cands[1])
    assert torch.allclose(mixed[1], expected_mid, atol=1e-12)


def test_identical_candidate_without_clamp_returns_target():
    t_gt = torch.tensor([0.0, 1.0], dtype=torch.float64)
    cands = torch.stack([t_gt, torch.tensor([1.0, 0.0], dtype=torch.float64)])
    mixed = mine_hard_negatives(t_gt, t_gt, cands, 2, beta_clamp_max=1.0)
    assert torch.allclose(mixed[0], t_gt, atol=1e-15)


def test_degenerate_range_gives_midpoints():
    t_gt = torch.tensor([1.0, 0.0], dtype=torch.float64)
    c = math.sqrt(0.5)
    cands = torch.tensor([[c, c], [c, -c]], dtype=torch.float64)
    mixed, beta = mine_hard_negatives(t_gt, t_gt, cands, 2, return_beta=True)
    assert beta.tolist() == [0.5, 0.5]
    for i in range(2):
        assert torch.allclose(mixed[i], normalize(0.5 * t_gt + 0.5 * cands[i]), atol=1e-15)


def test_hard_negative_k_too_large():
    rng = np.random.default_rng(0)
    T = unit_rows(rng, 3, 4)
    with pytest.raises(ValueError):
        mine_hard_negatives(T[0], T[0], T[1:], 3)


def test_batch_mining_excludes_ground_truth():
    rng = np.random.default_rng(3)
    Z, T = unit_rows(rng, 6, 5), unit_rows(rng, 6, 5)
    cfg = LossConfig(hard_negative_k=5, beta_clamp_max=0.0)
    negs = mine_batch_hard_negatives(Z, T, cfg)
    # with beta clamped to 0 the negatives are exactly the other rows
    for i in range(6):
        others = {tuple(np.round(r, 12)) for j, r in enumerate(T.numpy()) if j != i}
        got = {tuple(np.round(r, 12)) for r in negs[i].numpy()}
        assert got == others


def test_composed_worked_example():
    Z = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    T = normalize(torch.tensor([[1.0, 0.2], [0.3, 1.0]], dtype=torch.float64))
    N = normalize(torch.tensor([[[0.8, 0.6]], [[-0.6, 0.8]]], dtype=torch.float64))
    got = composed_loss(Z, T, N, 1.0).item()
    assert got == pytest.approx(oracles.naive_composed(Z, T, N.numpy(), 1.0), abs=1e-12)


def test_composed_k0_is_symmetric_contrastive():
    rng = np.random.default_rng(4)
    Z, T = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
    empty = torch.zeros(5, 0, 4, dtype=torch.float64)
    assert composed_loss(Z, T, empty, 3.0).item() == mapping_loss(Z, T, 3.0).item()
    assert composed_loss(Z, T, None, 3.0).item() == mapping_loss(Z, T, 3.0).item()


def test_orthogonal_hard_negative_increases_loss():
    Z = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=torch.float64)
    T = Z.clone()
    N = torch.tensor([[[0.0, 0.0, 1.0]], [[0.0, 0.0, 1.0]]], dtype=torch.float64)
    assert composed_loss(Z, T, N, 1.0).item() > composed_loss(Z, T, None, 1.0).item()


def test_stage2_worked_example():
    Z = E2
    T = normalize(torch.tensor([[1.0, 0.2], [0.3, 1.0]], dtype=torch.float64))
    N = normalize(torch.tensor([[[0.8, 0.6]], [[-0.6, 0.8]]], dtype=torch.float64))
    total, parts = stage2_loss(Z, T, E2, E2, SWAP, N, UNIT_GAMMA)
    comp = oracles.naive_composed(Z, T, N.numpy(), 1.0)
    sta = oracles.naive_soft_alignment(E2, E2, SWAP, 1.0)
    assert parts["L_comp"] == pytest.approx(comp, abs=1e-12)
    assert total.item() == pytest.approx(comp + MAPPING_2x2 + 0.2 * sta, abs=1e-12)


def test_stage2_alpha0_k0():
    rng = np.random.default_rng(5)
    z, t, zm, v, c = (unit_rows(rng, 4, 6) for _ in range(5))
    cfg = LossConfig(alpha=0.0, hard_negative_k=0)
    total, parts = stage2_loss(z, t, zm, v, c, None, cfg)
    assert total.item() == parts["L_comp"] + parts["L_map"]
    full, parts = stage2_loss(z, t, zm, v, c, None, LossConfig())
    assert abs(full.item() - parts["L_comp"] - parts["L_map"] - 0.2 * parts["L_sta"]) < 1e-9


def test_stage2_without_mapping_terms():
    rng = np.random.default_rng(6)
    z, t, zm, v, c = (unit_rows(rng, 4, 6) for _ in range(5))
    total, parts = stage2_loss(z, t, zm, v, c, None, LossConfig(), mapping_enabled=False)
    assert parts["L_map"] == 0.0 and parts["L_sta"] == 0.0
    assert total.item() == parts["L_comp"]


# ------------------------------------------------------------------------ contracts


def test_non_unit_rows_rejected():
    bad = torch.tensor([[2.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    with pytest.raises(ContractError):
        contrastive_loss(bad, E2, 1.0)
    with pytest.raises(ContractError):
        soft_alignment_loss(E2, bad, E2, 1.0)


def test_hard_negative_shape_mismatch():
    with pytest.raises(ValueError):
        composed_loss(E2, E2, torch.zeros(3, 1, 2, dtype=torch.float64), 1.0)


def test_logit_conventions():
    assert LossConfig().scale(1) == pytest.approx(20.0)
    assert LossConfig().scale(2) == pytest.approx(1 / 0.07)
    assert LossConfig(logit_convention="multiply_by_tau").scale(1) == pytest.approx(0.05)


# ------------------------------------------------------------------------ properties


@given(seeds, batch, dims)
def test_contrastive_matches_naive(seed, B, d):
    rng = np.random.default_rng(seed)
    U, O = unit_rows(rng, B, d), unit_rows(rng, B, d)
    gamma = float(rng.uniform(0.5, 25))
    assert abs(contrastive_loss(U, O, gamma).item() - oracles.naive_contrastive(U, O, gamma)) < 1e-9


@given(seeds, batch, dims)
def test_losses_finite_and_non_negative(seed, B, d):
    rng = np.random.default_rng(seed)
    v, s, c = (unit_rows(rng, B, d) for _ in range(3))
    for value in (contrastive_loss(v, s, 20.0), mapping_loss(v, s, 20.0),
                  soft_alignment_loss(v, s, c, 20.0), composed_loss(v, s, None, 14.0)):
        assert math.isfinite(value.item()) and value.item() >= -1e-12


@given(seeds, batch, dims)
def test_permutation_invariance(seed, B, d):
    rng = np.random.default_rng(seed)
    U, O = unit_rows(rng, B, d), unit_rows(rng, B, d)
    perm = torch.from_numpy(rng.permutation(B))
    a = contrastive_loss(U, O, 10.0).item()
    b = contrastive_loss(U[perm], O[perm], 10.0).item()
    assert abs(a - b) < 1e-12


@given(seeds, batch, dims)
def test_mapping_loss_symmetric(seed, B, d):
    rng = np.random.default_rng(seed)
    S, V = unit_rows(rng, B, d), unit_rows(rng, B, d)
    assert abs(mapping_loss(S, V, 5.0).item() - mapping_loss(V, S, 5.0).item()) < 1e-12


def test_mapping_loss_perfect_alignment_limit():
    assert mapping_loss(torch.eye(4, dtype=torch.float64), torch.eye(4, dtype=torch.float64),
                        200.0).item() < 1e-80


@given(seeds, batch, dims)
def test_soft_alignment_zero_when_equal(seed, B, d):
    rng = np.random.default_rng(seed)
    v, c = unit_rows(rng, B, d), unit_rows(rng, B, d)
    assert soft_alignment_loss(v, v, c, 20.0).item() == 0.0


@given(seeds, st.integers(2, 8), dims)
def test_halving_tau_sharpens(seed, B, d):
    rng = np.random.default_rng(seed)
    U, O = unit_rows(rng, B, d), unit_rows(rng, B, d)
    sims = U @ O.T
    tau = float(rng.uniform(0.05, 1.0))
    p1 = torch.softmax(LossConfig(tau_stage1=tau).scale(1) * sims, dim=1).max(dim=1).values
    p2 = torch.softmax(LossConfig(tau_stage1=tau / 2).scale(1) * sims, dim=1).max(dim=1).values
    assert bool((p2 >= p1 - 1e-15).all())


@given(seeds, st.integers(1, 10), st.integers(2, 12), st.floats(0.0, 1.0))
def test_hard_negative_properties(seed, k, d, clamp):
    rng = np.random.default_rng(seed)
    cands = unit_rows(rng, k + int(rng.integers(0, 4)), d)
    z, t_gt = unit_rows(rng, 1, d)[0], unit_rows(rng, 1, d)[0]
    mixed, beta = mine_hard_negatives(z, t_gt, cands, k, beta_clamp_max=clamp, return_beta=True)
    assert bool(((beta >= 0) & (beta <= clamp)).all())
    chosen = cands[torch.sort(-(cands @ z), stable=True).indices[:k]]
    for m, b, t in zip(mixed, beta, chosen):
        raw = b * t_gt + (1 - b) * t
        # the renormalized mixture stays on the ray of the raw convex combination
        residual = (m * raw.norm() - raw).norm().item()
        assert residual < 1e-9
        assert abs(m.norm().item() - 1) < 1e-12


@given(seeds, st.integers(2, 10))
def test_degenerate_rule_exactly_below_threshold(seed, k):
    rng = np.random.default_rng(seed)
    base = float(rng.uniform(-1, 1))
    spread = float(10 ** rng.uniform(-15, -9))
    sims = torch.full((k,), base, dtype=torch.float64)
    sims[0] += spread
    beta = mixing_weights(sims, 1.0, 0.5)
    actual_range = (sims.max() - sims.min()).item()
    if actual_range < 1e-12:
        assert beta.tolist() == [0.5] * k
    else:
        assert beta.max().item() == 1.0 and beta.min().item() == 0.0


# ------------------------------------------------------------------------- gradients


def _features(rng, B, d):
    return [torch.from_numpy(rng.standard_normal((B, d))).requires_grad_() for _ in range(5)]


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    B, d = 4, 6
    a, b, c, e, f = _features(rng, B, d)
    negs = torch.from_numpy(rng.standard_normal((B, 2, d))).requires_grad_()
    cases = {
        "contrastive": (lambda: contrastive_loss(normalize(a), normalize(b), 5.0), [a, b]),
        "mapping": (lambda: mapping_loss(normalize(a), normalize(b), 5.0), [a, b]),
        "soft_alignment": (
            lambda: soft_alignment_loss(normalize(a), normalize(b), normalize(c), 5.0), [a, b, c]),
        "composed": (
            lambda: composed_loss(normalize(a), normalize(b), normalize(negs), 5.0), [a, b, negs]),
        "stage2": (lambda: stage2_loss(normalize(a), normalize(b), normalize(c), normalize(e),
                                       normalize(f), normalize(negs), LossConfig())[0],
                   [a, b, c, e, f, negs]),
    }
    for name, (fn, inputs) in cases.items():
        assert grad_check(fn, inputs) < 1e-4, name
