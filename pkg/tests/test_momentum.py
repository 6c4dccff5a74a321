import numpy as np
import pytest
from hypothesis import given, strategies as st

from transda.autodiff import ParameterStore, ShapeError, Tensor, precision
from transda.momentum import (
    MOMENTUM_GRID,
    MomentumPair,
    SmoothingConfig,
    ema_update,
    init_momentum,
    init_pairs,
    teacher_branches,
)


def store(kind="extractor", seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    ps = ParameterStore(kind)
    ps.add("a", rng.standard_normal((3, 4)).astype(dtype))
    ps.add("b", rng.standard_normal(5).astype(dtype))
    return ps


def live():
    return {"extractor": store("extractor", 1), "classifier": store("classifier", 2)}


def test_init_copies_without_grad():
    src = store()
    pair = init_momentum(src)
    assert pair.target.equals(src)
    assert all(not t.requires_grad for t in pair.target.values())
    assert pair.target["a"].data is not src["a"].data
    assert init_momentum(src).target.equals(pair.target)


@pytest.mark.parametrize("m", MOMENTUM_GRID)
def test_fixed_point(m):
    pair = init_momentum(store(), m)
    ema_update(pair)
    for name in pair.source:  # m*t + (1-m)*t rounds to within an ulp of t at 32-bit
        np.testing.assert_allclose(pair.target[name].data, pair.source[name].data, rtol=1e-6)


def test_m_zero_copies_exactly():
    pair = init_momentum(store(seed=0), 0.0)
    pair.source["a"].data[...] = store(seed=5)["a"].data
    ema_update(pair)
    assert pair.target.equals(pair.source)


def test_m_near_one_leaves_target():
    pair = init_momentum(store(seed=0, dtype=np.float64), 1 - 1e-12)
    before = pair.target["a"].data.copy()
    pair.source["a"].data[...] += 1.0
    ema_update(pair)
    np.testing.assert_allclose(pair.target["a"].data, before, atol=1e-11)


@pytest.mark.parametrize("m", MOMENTUM_GRID)
def test_closed_form_geometric_series(m):
    c = 1.7
    with precision(np.float64):
        src = ParameterStore("extractor")
        src.add("w", np.full((4, 4), c))
        tgt = ParameterStore("extractor")
        tgt.add("w", np.zeros((4, 4)), requires_grad=False)
        pair = MomentumPair(src, tgt, m)
        for _ in range(100):
            ema_update(pair)
    np.testing.assert_allclose(tgt["w"].data, (1 - m ** 100) * c, rtol=0, atol=1e-10)


@given(st.sampled_from(MOMENTUM_GRID), st.integers(0, 100))
def test_contraction_when_source_frozen(m, seed):
    pair = MomentumPair(store(seed=seed, dtype=np.float64), store(seed=seed + 1, dtype=np.float64), m)
    gaps = []
    for _ in range(10):
        gaps.append(max(np.abs(pair.target[n].data - pair.source[n].data).max() for n in pair.source))
        ema_update(pair)
    assert all(b <= a for a, b in zip(gaps, gaps[1:]))


def test_misaligned_pairs_rejected():
    other = ParameterStore("extractor")
    other.add("a", np.zeros((3, 4)))
    with pytest.raises(KeyError):
        MomentumPair(store(), other, 0.9)
    bad = ParameterStore("extractor")
    bad.add("a", np.zeros((3, 3)))
    bad.add("b", np.zeros(5))
    with pytest.raises(ShapeError):
        MomentumPair(store(), bad, 0.9)


def test_update_clears_stray_grad():
    pair = init_momentum(store(), 0.9)
    pair.target["a"].grad = np.ones((3, 4))
    ema_update(pair)
    assert pair.target["a"].grad is None


def test_smoothing_config_bounds():
    with pytest.raises(ValueError):
        SmoothingConfig(True, True, 1.0)
    with pytest.raises(ValueError):
        SmoothingConfig(True, False, -0.1)
    assert SmoothingConfig().smoothed_kinds() == ()
    assert SmoothingConfig(mo_fa=True).smoothed_kinds() == ("extractor",)
    assert SmoothingConfig(mo_pl=True).smoothed_kinds() == ("extractor", "classifier")


def test_no_pairs_without_flags():
    assert init_pairs(SmoothingConfig(), live()) == {}


def test_branches_without_smoothing():
    nets = live()
    (F, C), fa = teacher_branches(SmoothingConfig(), nets, None)
    assert fa is nets["extractor"]
    assert F.equals(nets["extractor"]) and C.equals(nets["classifier"])
    assert not any(t.requires_grad for t in list(F.values()) + list(C.values()))
    assert F["a"].data is nets["extractor"]["a"].data  # a gradient-free view, not a copy


def test_branches_mopl_only():
    nets = live()
    cfg = SmoothingConfig(mo_pl=True)
    pairs = init_pairs(cfg, nets)
    (F, C), fa = teacher_branches(cfg, nets, pairs)
    assert F is pairs["extractor"].target and C is pairs["classifier"].target
    assert fa is nets["extractor"]


def test_branches_mofa_only():
    nets = live()
    cfg = SmoothingConfig(mo_fa=True)
    pairs = init_pairs(cfg, nets)
    (F, C), fa = teacher_branches(cfg, nets, pairs)
    assert fa is pairs["extractor"].target
    assert F is not pairs["extractor"].target and F.equals(nets["extractor"])
    assert "classifier" not in pairs


def test_missing_pair_is_an_error():
    with pytest.raises(ValueError, match="momentum pair"):
        teacher_branches(SmoothingConfig(True, True, 0.9), live(), None)


def test_pair_repr_and_tensor_type():
    pair = init_momentum(store(), 0.99)
    assert "extractor" in repr(pair) and "0.99" in repr(pair)
    assert isinstance(pair.target["a"], Tensor)
