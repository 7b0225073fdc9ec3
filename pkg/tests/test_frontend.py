"""Spectral compression and patch tokenization contracts."""

import numpy as np
import pytest

from cagu import autodiff as ad
from cagu.autodiff import Tensor, finite_diff_check
from cagu.errors import ConfigError
from cagu.frontend import (FrontendParams, compress, compression_schedule,
                           tokenize)


def make_params(bands=8, channels=6, dim=6, m=4, seed=0):
    rng = np.random.default_rng(seed)
    return FrontendParams.initialize(rng, bands, channels, dim, dim, m)


def test_compression_schedule_halves_then_quarters():
    assert compression_schedule(8, 5) == (4, 2, 5)
    assert compression_schedule(60, 32) == (30, 15, 32)
    assert compression_schedule(7, 3) == (4, 2, 3)  # ceilings


def test_compress_preserves_spatial_extent():
    params = make_params()
    out = compress(params, Tensor(np.random.default_rng(1).random((8, 9, 7))))
    assert out.shape == (6, 9, 7)


def test_compress_zero_input_zero_biases_gives_zero():
    params = make_params()
    out = compress(params, Tensor(np.zeros((8, 4, 4))))
    np.testing.assert_array_equal(out.data, np.zeros((6, 4, 4)))


def test_compress_single_pixel_matches_hand_composition():
    params = make_params()
    spectrum = np.random.default_rng(2).random(8)
    image = Tensor(spectrum.reshape(8, 1, 1))
    out = compress(params, image)

    def lrelu(v):
        return np.where(v > 0, v, 0.01 * v)

    # apply the three channel maps by hand (conv kernels are 1x1)
    mu, sd = spectrum.mean(), spectrum.std()
    h = (spectrum - mu) / sd
    for w, b in ((params.conv1_w, params.conv1_b),
                 (params.conv2_w, params.conv2_b),
                 (params.conv3_w, params.conv3_b)):
        h = lrelu(w.data[:, :, 0, 0] @ h + b.data)
    np.testing.assert_allclose(out.data[:, 0, 0], h, atol=1e-12)


def test_compress_requires_four_bands():
    params = make_params()
    with pytest.raises(ConfigError):
        compress(params, Tensor(np.zeros((3, 4, 4))))


def test_tokenize_patch_count():
    params = make_params()
    fmap = Tensor(np.random.default_rng(3).random((6, 8, 8)))
    tokens = tokenize(params, fmap)
    assert tokens.n_tokens == 4
    assert tokens.patch_grid == (2, 2)
    assert tokens.spectral.shape == (4, 6)
    assert tokens.spatial.shape == (4, 6)


def test_tokenize_edge_patches_padded():
    params = make_params(m=4)
    fmap = Tensor(np.random.default_rng(4).random((6, 9, 10)))
    tokens = tokenize(params, fmap)
    assert tokens.patch_grid == (3, 3)
    assert tokens.n_tokens == 9


def test_tokenize_patch_too_large():
    params = make_params(m=4)
    with pytest.raises(ConfigError):
        tokenize(params, Tensor(np.zeros((6, 3, 3))))


def test_spectral_token_pooling_invariant_to_pixel_order():
    params = make_params()
    rng = np.random.default_rng(5)
    fmap = rng.random((6, 4, 4))
    shuffled = fmap.reshape(6, 16)[:, rng.permutation(16)].reshape(6, 4, 4)
    tok_a = tokenize(params, Tensor(fmap))
    tok_b = tokenize(params, Tensor(shuffled))
    np.testing.assert_allclose(tok_a.spectral.data, tok_b.spectral.data,
                               atol=1e-12)


def test_tokens_are_patch_local():
    params = make_params()
    rng = np.random.default_rng(6)
    base = rng.random((6, 8, 8))
    poked = base.copy()
    poked[:, 5:, :] += rng.random((6, 3, 8))  # patches 2 and 3 only
    tok_a = tokenize(params, Tensor(base))
    tok_b = tokenize(params, Tensor(poked))
    for branch in ("spectral", "spatial"):
        a = getattr(tok_a, branch).data
        b = getattr(tok_b, branch).data
        np.testing.assert_array_equal(a[:2], b[:2])   # top-row patches
        assert not np.allclose(a[2:], b[2:])


def test_frontend_gradients_pass_finite_differences():
    # Use the production init path: scale calibration keeps pre-activations
    # well away from the LeakyReLU kinks that central differences straddle.
    from cagu.config import TrainConfig
    from cagu.model import initialize_from_scene
    from cagu.train import make_desk_scene

    config = TrainConfig(channels=4, token_dim=4, fused_channels=4,
                         patch_size=2, k_steps=2).validate()
    cube = make_desk_scene(40.0, 3, dict(height=4, width=4, bands=6,
                                         endmembers=2))
    params = initialize_from_scene(cube, config).frontend
    image = Tensor(cube.data)
    rng = np.random.default_rng(9)
    spe_dir = Tensor(rng.normal(size=(4, 4)))
    spa_dir = Tensor(rng.normal(size=(4, 4)))

    def loss(_):
        tokens = tokenize(params, compress(params, image))
        return ad.add(ad.sum(ad.mul(tokens.spectral, spe_dir)),
                      ad.sum(ad.mul(tokens.spatial, spa_dir)))

    # h trades rounding noise (shrinks with h) against LeakyReLU kink
    # straddling (grows with h); 2e-5 is comfortably inside both margins for
    # this fixed scene.
    for name, tensor in params.named().items():
        err = finite_diff_check(loss, tensor, h=2e-5)
        assert err < 1e-4, f"{name}: {err}"
