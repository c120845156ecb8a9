import numpy as np
import pytest

from hpmseg.masking import MaskSchedule, alpha_at, generate_mask, guided_count, masked_count


def test_schedule_endpoints():
    s = MaskSchedule(0.0, 0.5, 100)
    assert alpha_at(s, 0) == 0.0
    assert alpha_at(s, 100) == 0.5
    assert alpha_at(s, 50) == 0.25


def test_schedule_rejects_out_of_range_epoch():
    s = MaskSchedule(0.0, 0.5, 10)
    with pytest.raises(ValueError):
        alpha_at(s, 11)
    with pytest.raises(ValueError):
        alpha_at(s, -1)


def test_schedule_validates_fractions():
    with pytest.raises(ValueError):
        MaskSchedule(alpha_0=-0.1)
    with pytest.raises(ValueError):
        MaskSchedule(mask_ratio=1.0)


def test_rounding_half_up():
    assert masked_count(216, 0.75) == 162
    assert masked_count(64, 0.75) == 48
    assert masked_count(2, 0.25) == 1  # 0.5 rounds up
    assert masked_count(10, 0.25) == 3  # 2.5 rounds up


def test_full_scale_counts():
    m = generate_mask(np.random.default_rng(0).random(216), 0.5, 0.75, seed=0)
    assert m.num_masked == 162
    assert m.guided_count == 81 and m.random_count == 81
    assert guided_count(162, 0.5) == 81


def test_random_masking_is_uniform():
    counts = np.zeros(8)
    for seed in range(10_000):
        counts += generate_mask(np.zeros(8), 0.0, 0.5, seed=seed).as_bool()
    freq = counts / 10_000
    assert np.all(np.abs(freq - 0.5) <= 0.02)


def test_full_guidance_takes_top_losses():
    losses = np.linspace(1.0, 0.0, 20)
    m = generate_mask(losses, 1.0, 0.75, seed=0)
    assert m.masked_indices.tolist() == list(range(15))
    assert m.random_count == 0


def test_ties_resolve_to_lower_index():
    m = generate_mask(np.ones(8), 1.0, 0.5, seed=0)
    assert m.guided.tolist() == [0, 1, 2, 3]


def test_visible_complements_masked():
    m = generate_mask(np.random.default_rng(1).random(64), 0.3, 0.75, seed=2)
    assert sorted(np.concatenate([m.masked_indices, m.visible_indices]).tolist()) == list(range(64))
    assert len(np.intersect1d(m.guided, m.random)) == 0
    assert m.visible_indices.size == 16


def test_seeded_masks_repeat():
    a = generate_mask(np.zeros(64), 0.0, 0.75, seed=9)
    b = generate_mask(np.zeros(64), 0.0, 0.75, seed=9)
    assert np.array_equal(a.random, b.random)


@pytest.mark.parametrize("bad", [dict(alpha=1.5), dict(r=0.0), dict(r=1.0)])
def test_invalid_fractions(bad):
    kw = dict(alpha=0.5, r=0.75)
    kw.update(bad)
    with pytest.raises(ValueError):
        generate_mask(np.zeros(8), kw["alpha"], kw["r"], seed=0)


def test_non_vector_rejected():
    with pytest.raises(ValueError):
        generate_mask(np.zeros((2, 4)), 0.0, 0.5)


def test_counts_survive_float_error():
    # 0.7 * 30 evaluates to 20.999999999999996
    assert guided_count(30, 0.7) == 21
    assert masked_count(10, 0.45) == 5
