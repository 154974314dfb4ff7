import numpy as np
import pytest

from nlnet import oracles
from nlnet.errors import ConfigError, ShapeError
from nlnet.nonlocal_block import (MaskMode, NonLocalBlock, NonLocalConfig, NonLocalParams, attention_mask,
                                  block_forward, count_block_cost, nonlocal_affinity, nonlocal_forward)
from nlnet.pairwise import PairwiseKind
from nlnet.tensor import Tensor, no_grad
from nlnet.verify import block_combinations, block_grad_error, block_oracle_case, random_block_params

KINDS = list(PairwiseKind)


def run(x, p, cfg, **kw):
    with no_grad():
        return block_forward(Tensor(x), p, cfg, **kw).data


def test_config_defaults_and_validation():
    cfg = NonLocalConfig(channels_in=8)
    assert cfg.kind is PairwiseKind.EMBEDDED_GAUSSIAN and cfg.mask is MaskMode.SPACETIME
    assert cfg.width == 4 and cfg.subsample_spatial == 1 and cfg.use_bn_on_Wz
    with pytest.raises(ConfigError):
        NonLocalConfig(subsample_spatial=3)
    with pytest.raises(ConfigError):
        NonLocalConfig(bottleneck=0)
    assert NonLocalConfig.from_dict(cfg.to_dict()) == cfg


def test_input_checks(rng):
    cfg = NonLocalConfig(channels_in=4, subsample_spatial=2)
    p = NonLocalParams.init(cfg, rng)
    with pytest.raises(ShapeError):
        run(np.zeros((1, 1, 4, 4, 3)), p, cfg)
    with pytest.raises(ConfigError, match="divide"):
        run(np.zeros((1, 1, 3, 4, 4)), p, cfg)
    with pytest.raises(ConfigError):
        NonLocalParams.init(NonLocalConfig(), rng)


def test_parameter_shapes(rng):
    for kind in KINDS:
        p = NonLocalParams.init(NonLocalConfig(kind, channels_in=6), rng)
        names = set(p.named())
        assert {"W_g", "W_z", "bn_gamma", "bn_beta"} <= names
        assert ("W_theta" in names) == (kind is not PairwiseKind.GAUSSIAN)
        assert ("w_f" in names) == (kind is PairwiseKind.CONCATENATION)
        assert np.all(p.bn_gamma.data == 0)
    p = NonLocalParams.init(NonLocalConfig(channels_in=6, use_bn_on_Wz=False), rng)
    assert p.bn_gamma is None and np.all(p.W_z.data == 0)


@pytest.mark.parametrize("kind", KINDS)
def test_constant_field_gives_g_of_c(kind, rng):
    cfg = NonLocalConfig(kind, channels_in=3, bottleneck=2)
    p = random_block_params(cfg, rng)
    c = np.array([0.3, -0.2, 0.5])
    x = np.broadcast_to(c, (1, 2, 3, 3, 3)).copy()
    with no_grad():
        y = nonlocal_forward(Tensor(x), p, cfg).data
    g = c @ p.W_g.data
    if kind.uses_softmax:
        np.testing.assert_allclose(y, np.broadcast_to(g, y.shape), rtol=0, atol=1e-14)
    else:
        # 1/M kinds: identical rows, scaled by the (constant) score
        flat = y.reshape(-1, 2)
        np.testing.assert_allclose(flat, np.broadcast_to(flat[0], flat.shape), rtol=0, atol=1e-14)


def test_self_attention_form(rng):
    cfg = NonLocalConfig(channels_in=5, bottleneck=3)
    p = NonLocalParams.init(cfg, rng)
    x = rng.normal(size=(1, 1, 2, 2, 5))  # N = 4
    with no_grad():
        y = nonlocal_forward(Tensor(x), p, cfg).data.reshape(1, 4, 3)
    ref = oracles.self_attention(x.reshape(1, 4, 5), p.W_theta.data, p.W_phi.data, p.W_g.data)
    np.testing.assert_allclose(y, ref, rtol=0, atol=1e-10)


@pytest.mark.parametrize("kind", KINDS)
def test_space_only_ignores_other_frames(kind, rng):
    cfg = NonLocalConfig(kind, channels_in=4, mask="space_only")
    p = random_block_params(cfg, rng)
    x = rng.normal(size=(1, 2, 3, 3, 4)) * 0.5
    x2 = x.copy()
    x2[:, 1] = rng.normal(size=(1, 3, 3, 4))
    with no_grad():
        a = nonlocal_forward(Tensor(x), p, cfg).data
        b = nonlocal_forward(Tensor(x2), p, cfg).data
    np.testing.assert_array_equal(a[:, 0], b[:, 0])


def test_time_only_ignores_other_locations(rng):
    cfg = NonLocalConfig("dot_product", channels_in=4, mask="time_only")
    p = random_block_params(cfg, rng)
    x = rng.normal(size=(1, 3, 2, 2, 4))
    x2 = x.copy()
    x2[:, :, 1, 1] += 1.0
    with no_grad():
        a = nonlocal_forward(Tensor(x), p, cfg).data
        b = nonlocal_forward(Tensor(x2), p, cfg).data
    np.testing.assert_array_equal(a[:, :, 0], b[:, :, 0])


def test_mask_shapes():
    m = attention_mask((2, 2, 2), (2, 2, 2), "space_only")
    assert m.shape == (8, 8) and m.sum() == 32
    m = attention_mask((2, 2, 2), (2, 2, 2), "time_only")
    assert m.sum() == 16
    assert attention_mask((2, 2, 2), (2, 1, 1), "spacetime") is None
    with pytest.raises(ShapeError):
        attention_mask((2, 2, 2), (2, 3, 3), "time_only")


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("use_bn", [True, False])
def test_fresh_block_is_identity(kind, use_bn, rng):
    cfg = NonLocalConfig(kind, channels_in=4, subsample_spatial=2, use_bn_on_Wz=use_bn)
    p = NonLocalParams.init(cfg, rng)
    x = rng.normal(size=(2, 2, 4, 4, 4))
    for training in (True, False):
        assert np.array_equal(run(x, p, cfg, training=training), x)


def test_unit_bn_zero_wz_is_identity(rng):
    cfg = NonLocalConfig(channels_in=4)
    p = NonLocalParams.init(cfg, rng)
    p.bn_gamma.data[:] = 1.0
    p.W_z.data[:] = 0.0
    x = rng.normal(size=(1, 2, 2, 2, 4))
    assert np.array_equal(run(x, p, cfg, training=False), x)


def test_trained_block_matches_loops(rng):
    cfg = NonLocalConfig(channels_in=8, bottleneck=4)
    p = random_block_params(cfg, rng)
    x = rng.normal(size=(1, 2, 4, 4, 8)) * 0.5
    params = {k: v.data for k, v in p.named().items()}
    params.update({k: v.copy() for k, v in p.buffers().items()})
    ref = oracles.block_loops(x, params, cfg, bn_training=False)
    np.testing.assert_allclose(run(x, p, cfg, training=False), ref, rtol=0, atol=1e-8)


@pytest.mark.parametrize("kind,mask,sub", block_combinations())
def test_oracle_equivalence_sample(kind, mask, sub):
    rng = np.random.default_rng([7, KINDS.index(kind), list(MaskMode).index(mask), sub])
    assert max(block_oracle_case(kind, mask, sub, rng) for _ in range(3)) <= 1e-8


def test_time_only_mask_under_subsampling():
    m = attention_mask((2, 4, 4), (2, 2, 2), MaskMode.TIME_ONLY)
    assert m.shape == (32, 8) and np.all(m.sum(axis=1) == 2)
    # query (t=1, h=3, w=2) sits in pooled cell (1, 1) at both key times
    q = (1 * 4 + 3) * 4 + 2
    assert np.flatnonzero(m[q]).tolist() == [0 * 4 + 1 * 2 + 1, 1 * 4 + 1 * 2 + 1]
    with pytest.raises(ShapeError):
        attention_mask((2, 5, 5), (2, 2, 2), MaskMode.TIME_ONLY)


@pytest.mark.parametrize("kind", KINDS)
def test_block_gradients(kind, rng):
    assert block_grad_error(kind, rng) <= 1e-4


def test_affinity_rows(rng):
    cfg = NonLocalConfig(channels_in=4, subsample_spatial=2)
    p = NonLocalParams.init(cfg, rng)
    with no_grad():
        aff, v, kgrid = nonlocal_affinity(Tensor(rng.normal(size=(1, 2, 4, 4, 4))), p, cfg)
    assert aff.values.shape == (1, 32, 8) and kgrid == (2, 2, 2) and v.shape == (1, 8, 2)
    np.testing.assert_allclose(aff.values.data.sum(-1), 1.0, atol=1e-12)


def test_module_records_attention(rng):
    blk = NonLocalBlock(NonLocalConfig(channels_in=4), rng)
    blk.record_attention = True
    x = Tensor(rng.normal(size=(1, 2, 2, 2, 4)))
    assert np.array_equal(blk(x).data, x.data)
    assert blk.last_record["affinity"].shape == (1, 8, 8)
    assert blk.last_record["query_grid"] == (2, 2, 2)


# cost

def test_weight_count_full_width():
    rep = count_block_cost(NonLocalConfig(channels_in=1024, bottleneck=512), 4, 14, 14)
    assert rep.params_of("embedding") + rep.params_of("output") == 4 * 1024 * 512 == 2_097_152


@pytest.mark.parametrize("kind", KINDS)
def test_subsample_quarters_pairwise(kind):
    one = count_block_cost(NonLocalConfig(kind, channels_in=64), 4, 8, 8)
    two = count_block_cost(NonLocalConfig(kind, channels_in=64, subsample_spatial=2), 4, 8, 8)
    for part in ("pairwise", "aggregate"):
        assert 4 * two.macs_of(part) == one.macs_of(part)


@pytest.mark.parametrize("kind", KINDS)
def test_bottleneck_halves_embedding(kind):
    half = count_block_cost(NonLocalConfig(kind, channels_in=64), 4, 8, 8)
    full = count_block_cost(NonLocalConfig(kind, channels_in=64, bottleneck=64), 4, 8, 8)
    assert 2 * half.macs_of("embedding") == full.macs_of("embedding")


def test_module_cost_matches_parameters(rng):
    for kind in KINDS:
        blk = NonLocalBlock(NonLocalConfig(kind, channels_in=8), rng)
        n = sum(p.size for p in blk.parameters())
        assert blk.cost((2, 4, 4, 8)).total_params == n
