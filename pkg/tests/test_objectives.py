import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from mgreid.config import ConfigError
from mgreid.objectives import (
    PrototypeMemory,
    build_vpm1,
    centroids,
    loss_cmp,
    loss_i2tce,
    loss_id,
    loss_imp,
    loss_mask,
    smoothed_targets,
    stage_losses,
    update_prototypes,
)

E = torch.eye(2, dtype=torch.float64)
Y0 = torch.tensor([0])


def test_loss_cmp_two_classes():
    assert loss_cmp(E[:1], E, Y0).item() == pytest.approx(0.3133, abs=5e-5)
    assert loss_cmp(E[:1], E, Y0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)


def test_loss_cmp_identical_rows_is_log_c():
    rows = torch.ones(2, 3, dtype=torch.float64)
    assert loss_cmp(torch.randn(1, 3, dtype=torch.float64), rows, Y0).item() == pytest.approx(0.6931, abs=5e-5)


def test_loss_id_examples():
    # logits are v_bn @ W^T; with W = I they are v_bn itself
    assert loss_id(torch.tensor([[1.0, 0.0]], dtype=torch.float64), E, Y0).item() == pytest.approx(0.3133, abs=5e-5)
    assert loss_id(torch.zeros(3, 5), torch.randn(5, 5), torch.tensor([0, 1, 2])).item() == pytest.approx(math.log(5))


def test_loss_imp_examples():
    assert loss_imp(E[:1], E, Y0, tau=0.01).item() == pytest.approx(0.0, abs=1e-40)
    x = torch.randn(4, 3, dtype=torch.float64)
    rows = torch.randn(6, 3, dtype=torch.float64)
    assert loss_imp(x, rows, torch.arange(4), tau=1e6).item() == pytest.approx(math.log(6), abs=1e-3)
    assert loss_imp(x[:1], torch.ones(6, 3, dtype=torch.float64), Y0, tau=0.3).item() == pytest.approx(math.log(6))
    with pytest.raises(ConfigError):
        loss_imp(x, rows, Y0, tau=0.0)


def test_loss_i2tce_examples():
    assert loss_i2tce(E[:1], E, Y0, eps=0.0).item() == pytest.approx(0.3133, abs=5e-5)
    value = loss_i2tce(E[:1], E, Y0, eps=0.1).item()
    assert value == pytest.approx(0.3633, abs=5e-5)
    assert value == pytest.approx(0.95 * math.log(1 + math.e ** -1) + 0.05 * math.log(1 + math.e), abs=1e-12)
    same = torch.ones(3, 2, dtype=torch.float64)
    assert loss_i2tce(torch.randn(1, 2, dtype=torch.float64), same, Y0, eps=0.4).item() == pytest.approx(math.log(3))


def test_smoothed_targets_sum_to_one():
    q = smoothed_targets(torch.tensor([0, 2]), 4, 0.1)
    assert torch.allclose(q.sum(1), torch.ones(2))
    assert q[0, 0].item() == pytest.approx(0.925)


def test_memory_update_example():
    rows = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    out = update_prototypes(rows, torch.tensor([[0.0, 1.0]], dtype=torch.float64), Y0, momentum=0.2)
    assert out[0].tolist() == pytest.approx([0.2425, 0.9701], abs=5e-5)


def test_memory_update_fixed_point_and_full_momentum():
    rows = F.normalize(torch.randn(3, 4, dtype=torch.float64), dim=1)
    assert torch.allclose(update_prototypes(rows, rows[1:2].clone(), torch.tensor([1]), 0.2), rows)
    feats = torch.randn(6, 4, dtype=torch.float64)
    assert torch.allclose(update_prototypes(rows, feats, torch.tensor([0, 0, 1, 1, 2, 2]), 1.0), rows)


def test_memory_update_uses_hardest_sample():
    rows = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    feats = torch.tensor([[0.9, 0.1], [0.0, 1.0], [0.99, 0.01]], dtype=torch.float64)
    out = update_prototypes(rows, feats, torch.zeros(3, dtype=torch.long), 0.2)
    assert out[0].tolist() == pytest.approx([0.2425, 0.9701], abs=5e-5)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), gamma=st.floats(0, 1))
def test_memory_rows_stay_unit(seed, gamma):
    gen = torch.Generator().manual_seed(seed)
    memory = PrototypeMemory(torch.randn(4, 5, generator=gen, dtype=torch.float64), "vpm2", gamma)
    memory.update(torch.randn(8, 5, generator=gen, dtype=torch.float64), torch.randint(0, 4, (8,), generator=gen))
    assert torch.allclose(memory.rows.norm(dim=1), torch.ones(4, dtype=torch.float64))


def test_vpm1_centroids_match_recomputation():
    gen = torch.Generator().manual_seed(0)
    feats = torch.randn(30, 6, generator=gen, dtype=torch.float64)
    labels = torch.arange(30) % 5
    memory = build_vpm1(feats, labels, 5)
    for c in range(5):
        expected = feats[labels == c].mean(0)
        assert torch.allclose(memory.rows[c], expected / expected.norm(), atol=1e-6)
    single = build_vpm1(feats[:5], torch.arange(5), 5)
    assert torch.allclose(single.rows, F.normalize(feats[:5], dim=1))


def test_vpm1_errors():
    with pytest.raises(ValueError):
        centroids(torch.randn(3, 4), torch.tensor([0, 0, 1]), 3)
    antipodal = torch.tensor([[1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(ValueError):
        centroids(antipodal, torch.tensor([0, 0]), 1)


def test_mask_loss_examples():
    bce, dice, total = loss_mask(torch.tensor([[[[0.5]]]], dtype=torch.float64), torch.ones(1, 1, 1, dtype=torch.float64))
    assert bce.item() == pytest.approx(0.6931, abs=5e-5)
    assert dice.item() == pytest.approx(1 / 3, abs=5e-5)
    assert total.item() == pytest.approx(math.log(2) + 1 / 3, abs=1e-5)
    ones = torch.ones(2, 3, 8, dtype=torch.float64)
    bce, dice, _ = loss_mask(ones, torch.ones(3, 8, dtype=torch.float64))
    assert bce.item() == pytest.approx(0.0, abs=1e-12)
    assert dice.item() == pytest.approx(1e-6 / (2 + 1e-6), rel=1e-6)
    with pytest.raises(ValueError):
        loss_mask(ones, torch.ones(3, 7, dtype=torch.float64))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mask_loss_is_nonnegative_and_shrinks_towards_labels(seed):
    gen = torch.Generator().manual_seed(seed)
    g = (torch.rand(3, 8, generator=gen) < 0.5).double()
    probs = torch.rand(2, 3, 8, generator=gen, dtype=torch.float64).clamp(0.01, 0.99)
    far = loss_mask(probs, g)[2]
    near = loss_mask(0.1 * probs + 0.9 * g.clamp(0.01, 0.99), g)[2]
    assert far.item() >= 0 and near.item() >= 0
    assert near.item() < far.item()


def test_mask_loss_part_selection():
    probs = torch.full((1, 3, 4), 0.5, dtype=torch.float64)
    g = torch.ones(3, 4, dtype=torch.float64)
    bce, dice, total = loss_mask(probs, g, parts=torch.zeros(3, dtype=torch.bool))
    assert total.item() == 0.0


def test_stage_totals():
    assert stage_losses({"cmp": 0.5}, 1) == 0.5
    report = {k: torch.tensor(1.0) for k in ("id", "imp", "i2tce", "mask")}
    assert stage_losses(report, 2).item() == 4.0
    report["imp"] = torch.tensor(float("nan"))
    with pytest.raises(FloatingPointError):
        stage_losses(report, 2)


def test_cmp_loss_has_a_floor_for_raw_cosines():
    """Without a temperature the logits live in [-1, 1], so C=20 cannot reach log(20)/2."""
    c = 20
    rows = F.normalize(torch.randn(c, 8, dtype=torch.float64), dim=1)
    loss = loss_cmp(rows, rows, torch.arange(c)).item()
    floor = math.log(1 + (c - 1) * math.exp(-c / (c - 1)))
    assert loss >= floor - 1e-9
    assert floor > 0.5 * math.log(c)
    np.testing.assert_allclose(floor, 2.0323, atol=1e-4)
