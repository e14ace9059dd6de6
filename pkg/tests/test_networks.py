import numpy as np
import pytest

from gigpc import autodiff as ad
from gigpc.autodiff import Tensor
from gigpc.networks import (PRESETS, DiagonalGaussian, Model, encode, generate, point_features,
                            pooled_feature, preset, reparameterize)
from gigpc.pointcloud import synthetic_shape

from conftest import gradcheck, rel_err

TABLE = [
    ("Input", "-", "1×128"),
    ("FC", "128×18432", "1×18432"),
    ("Reshape", "-", "512×6×6"),
    ("Padding and Conv", "3×3, 384", "384×6×6"),
    ("Padding and Conv", "3×3, 384", "384×6×6"),
    ("Upsample", "×2", "384×12×12"),
    ("Padding and Conv", "3×3, 256", "256×12×12"),
    ("Padding and Conv", "3×3, 256", "256×12×12"),
    ("Upsample", "×2", "256×24×24"),
    ("Padding and Conv", "3×3, 128", "128×24×24"),
    ("Padding and Conv", "3×3, 128", "128×24×24"),
    ("Upsample", "×2", "128×48×48"),
    ("Padding and Conv", "3×3, 128", "128×48×48"),
    ("Padding and Conv", "3×3, 128", "128×48×48"),
    ("Conv", "3×3, 64", "64×46×46"),
    ("Conv and tanh", "1×1, 3", "3×46×46"),
    ("Reshape", "-", "3×2116"),
]


@pytest.fixture(scope="module")
def full_model():
    return Model.create("full", seed=0)


def test_full_generator_reproduces_layer_table(full_model):
    trace = []
    out = generate(np.zeros((1, 128)), full_model.generator, full_model.params, trace=trace)
    assert trace == TABLE
    assert out.shape == (1, 3, 46, 46)
    assert full_model.generator.n_points == 2116


def test_full_encoder_widths(full_model):
    P = synthetic_shape("sphere", 64, 0)
    feats = point_features(P, full_model.encoder, full_model.params)
    assert feats.shape == (1, 64, 35)
    q = full_model.encode(P)
    assert q.mu.shape == (1, 128) and q.logvar.shape == (1, 128)


def test_desk_and_tiny_presets():
    desk_enc, desk_gen = PRESETS["desk"]
    assert desk_gen.n_points == 256 and desk_gen.latent_dim == desk_enc.latent_dim == 16
    full_gen = PRESETS["full"][1]
    # desk channels are the full schedule divided by 8
    assert desk_gen.base_channels * 8 == full_gen.base_channels
    assert [c * 8 for s in desk_gen.stages for c in s] == [c for s in full_gen.stages for c in s]
    assert desk_gen.final_channels * 8 == full_gen.final_channels
    m = Model.create("tiny", 0)
    assert m.decode(np.zeros(16)).shape == (1, 64, 3)
    with pytest.raises(ValueError, match="preset"):
        preset("huge")


def test_outputs_in_tanh_range_and_deterministic_init():
    a, b = Model.create("desk", 3), Model.create("desk", 3)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    out = a.decode(np.random.default_rng(0).normal(size=(4, 16)))
    assert out.shape == (4, 256, 3) and np.all(np.abs(out) < 1)


def test_encoder_is_point_order_invariant():
    m = Model.create("desk", 1)
    P = synthetic_shape("ellipsoid", 128, 2)
    perm = np.random.default_rng(0).permutation(128)
    q1, q2 = m.encode(P), m.encode(P[perm])
    assert rel_err(q1.mu.data, q2.mu.data) < 1e-12
    assert rel_err(q1.logvar.data, q2.logvar.data) < 1e-12


def test_pooling_stage_ignores_duplicated_points():
    m = Model.create("desk", 1)
    P = synthetic_shape("sphere", 64, 2)
    feats = point_features(P, m.encoder, m.params)
    doubled = ad.concat([feats, feats], axis=1)
    g1 = pooled_feature(feats, m.encoder, m.params).data
    g2 = pooled_feature(doubled, m.encoder, m.params).data
    assert rel_err(g1, g2) < 1e-14


def test_encode_rejects_too_small_clouds():
    m = Model.create("desk", 0)
    with pytest.raises(ValueError, match="too small"):
        m.encode(np.zeros((5, 3)))


def test_logvar_is_clamped():
    m = Model.create("tiny", 0)
    m.params["enc.out.b"].data[16:] = 50.0
    q = m.encode(synthetic_shape("sphere", 20, 0))
    assert np.all(q.logvar.data == 10.0)


def test_reparameterize_values():
    q = DiagonalGaussian(Tensor([[1.0, -1.0]]), Tensor([[0.0, np.log(4.0)]]))
    z = reparameterize(q, [[0.5, 2.0]])
    np.testing.assert_allclose(z.data, [[1.5, 3.0]], rtol=1e-15)
    with pytest.raises(ValueError):
        reparameterize(q, [[0.5]])


def test_conditional_labels():
    m = Model.create("tiny", 0, label_dim=3)
    z = np.zeros((2, 16))
    a = m.decode(z, np.eye(3)[[0, 0]])
    b = m.decode(z, np.eye(3)[[0, 1]])
    assert np.array_equal(a[0], b[0]) and not np.array_equal(a[1], b[1])
    with pytest.raises(ValueError, match="label"):
        m.decode(z)
    with pytest.raises(ValueError, match="unconditional"):
        Model.create("tiny", 0).decode(z, np.eye(3)[[0, 0]])


def test_parameter_groups_partition():
    m = Model.create("desk", 0)
    enc, gen = m.encoder_params(), m.generator_params()
    assert len(enc) + len(gen) == len(m.params)
    assert {id(t) for t in enc}.isdisjoint({id(t) for t in gen})


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient_on_selected_parameters(seed):
    m = Model.create("tiny", seed)
    P = synthetic_shape("sphere", 24, seed)
    eps = np.random.default_rng(seed).normal(size=(1, 16))
    names = ["enc.kernels", "enc.out.b", "gen.out.K", "gen.s1c0.b"]

    def loss(*arrays):
        params = dict(m.params)
        params.update({n: a for n, a in zip(names, arrays)})
        q = encode(P, m.encoder, params)
        img = generate(reparameterize(q, eps), m.generator, params)
        return ad.sum(ad.square(img))

    # the kernel gradient is small next to the loss, so a smaller step drowns in roundoff
    assert gradcheck(loss, [m.params[n].data for n in names], h=1e-5) < 1e-4
