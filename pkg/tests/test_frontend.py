import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lipvsr.frontend import (AttentiveFusion, Frontend, FrontendConfig, RelativePositionEncoder, TubeletEncoder,
                             extract_patches, lip_geometry, motion_vectors, pairwise_offsets)
from lipvsr.tensor import init_uniform_


def _small_cfg(**kw):
    base = dict(num_landmarks=4, patch_size=8, patch_resolution=8, fps_set=(8, 10), tubelet_channels=(4, 6, 8),
                temporal_depth=3, relpos_hidden=8, fusion_layers=1, fusion_heads=2, fusion_mlp_dim=8,
                motion_dim=4, output_dim=12, mouth_patch_size=16, geometry_pairs=((0, 2), (1, 3)))
    base.update(kw)
    return FrontendConfig(**base)


def test_patch_is_central_block():
    clip = np.arange(100 * 100, dtype=np.float32).reshape(1, 100, 100)
    track = np.array([[[50.0, 50.0]]])
    p = extract_patches(clip, track, 24, 24)
    assert np.array_equal(p[0, 0], clip[0, 38:62, 38:62])


def test_corner_landmark_is_three_quarters_padding():
    clip = np.ones((1, 100, 100), np.float32)
    p = extract_patches(clip, np.zeros((1, 1, 2)), 24, 24)[0, 0]
    assert (p == 0).sum() == 24 * 24 * 3 // 4
    assert (p[12:, 12:] == 1).all()


def test_constant_image_resizes_to_constant():
    clip = np.full((2, 40, 40), 0.3, np.float32)
    p = extract_patches(clip, np.full((2, 3, 2), 20.0), 12, 8)
    assert p.shape == (2, 3, 8, 8)
    assert np.allclose(p, 0.3, atol=1e-6)


def test_no_resize_when_window_equals_resolution():
    rng = np.random.default_rng(0)
    clip = rng.random((1, 30, 30)).astype(np.float32)
    p = extract_patches(clip, np.array([[[15.0, 12.0]]]), 8, 8)
    assert np.array_equal(p[0, 0], clip[0, 8:16, 11:19])


def test_tubelet_zero_input_gives_zero_embeddings():
    enc = TubeletEncoder((4, 6, 8), 3).double().eval()
    for bn in (enc.bn3d, enc.bn2, enc.bn3):
        bn.bias.data.zero_()
    out = enc(torch.zeros(2, 5, 3, 8, 8, dtype=torch.float64))
    assert out.shape == (2, 5, 3, 8)
    assert out.abs().max() == 0


def test_tubelet_is_shift_equivariant_in_time():
    torch.manual_seed(0)
    enc = TubeletEncoder((4, 6, 8), 3).double().eval()
    x = torch.zeros(1, 12, 1, 8, 8, dtype=torch.float64)
    x[0, 3:6] = torch.rand(3, 1, 8, 8, dtype=torch.float64)
    shifted = torch.roll(x, 2, dims=1)
    a, b = enc(x), enc(shifted)
    assert torch.allclose(a[:, 1:9], b[:, 3:11], atol=1e-12)


def test_relpos_offsets():
    track = torch.tensor([[[10.0, 10.0], [10.0, 10.0], [30.0, 50.0]]])
    off = pairwise_offsets(track, 100.0)
    assert off.shape == (1, 3, 4)
    assert off[0, 0, :2].abs().max() == 0        # coincident with landmark 1
    assert torch.allclose(off[0, 2], torch.tensor([0.2, 0.4, 0.2, 0.4]))


@settings(max_examples=25, deadline=None)
@given(dx=st.floats(-20, 20), dy=st.floats(-20, 20))
def test_relpos_translation_invariant(dx, dy):
    torch.manual_seed(1)
    enc = RelativePositionEncoder(5, 8, 6).double()
    track = torch.rand(2, 5, 2, dtype=torch.float64) * 50
    moved = track + torch.tensor([dx, dy], dtype=torch.float64)
    assert torch.allclose(enc(track, 48.0), enc(moved, 48.0), atol=1e-9)


def test_relpos_sensitive_to_landmark_order():
    torch.manual_seed(2)
    enc = RelativePositionEncoder(4, 8, 6).double()
    track = torch.rand(1, 4, 2, dtype=torch.float64) * 40
    swapped = track[:, [1, 0, 2, 3]]
    assert not torch.allclose(enc(track, 48.0)[:, 0], enc(swapped, 48.0)[:, 0])


def test_fusion_identical_tokens_get_uniform_attention():
    fusion = AttentiveFusion(8, 2, 2, 16).double()
    u = torch.randn(1, 3, 1, 8, dtype=torch.float64).expand(1, 3, 5, 8)
    _, attn = fusion(u)
    assert torch.allclose(attn, torch.full_like(attn, 0.2), atol=1e-12)


def test_fusion_rows_sum_to_one_and_permutation_equivariance():
    torch.manual_seed(3)
    fusion = AttentiveFusion(8, 2, 2, 16).double()
    u = torch.randn(2, 3, 6, 8, dtype=torch.float64)
    f, attn = fusion(u)
    assert attn.shape == (2, 2, 2, 3, 6, 6)
    assert torch.allclose(attn.sum(-1), torch.ones_like(attn.sum(-1)), atol=1e-6)
    perm = torch.tensor([4, 2, 0, 5, 1, 3])
    f2, attn2 = fusion(u[:, :, perm])
    assert torch.allclose(f, f2, atol=1e-12)
    assert torch.allclose(attn2, attn[..., perm, :][..., perm], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(T=st.integers(1, 10), seed=st.integers(0, 1000))
def test_first_motion_vector_is_zero(T, seed):
    g = torch.Generator().manual_seed(seed)
    track = torch.rand(1, T, 20, 2, generator=g, dtype=torch.float64) * 96
    m = motion_vectors(lip_geometry(track, 96.0, ((0, 6), (14, 18))))
    assert m.shape == (1, T, 42)
    assert m[:, 0].abs().max() == 0


def test_static_track_has_no_motion_and_is_translation_invariant():
    track = torch.rand(1, 1, 20, 2, dtype=torch.float64).expand(1, 6, 20, 2) * 90
    assert motion_vectors(lip_geometry(track, 96.0, ((0, 6),))).abs().max() == 0
    moving = torch.rand(1, 6, 20, 2, dtype=torch.float64) * 80
    pairs = ((0, 6), (3, 9))
    a = motion_vectors(lip_geometry(moving, 96.0, pairs))
    b = motion_vectors(lip_geometry(moving + 7.0, 96.0, pairs))
    assert torch.allclose(a, b, atol=1e-12)


def _inputs(cfg, B=2, T=5, W=32):
    rng = np.random.default_rng(0)
    clips = rng.random((B, T, W, W)).astype(np.float32)
    tracks = rng.uniform(8, W - 8, size=(B, T, cfg.num_landmarks, 2))
    return clips, tracks


@pytest.mark.parametrize("kw", [{}, {"use_relpos": False}, {"use_motion": False}, {"temporal_depth": 1},
                                {"patch_mode": "mouth"}])
def test_frontend_shapes_and_variants(kw):
    cfg = _small_cfg(**kw)
    fe = Frontend(cfg)
    init_uniform_(fe, torch.Generator().manual_seed(0))
    clips, tracks = _inputs(cfg)
    patches = fe.prepare_patches(clips, tracks)
    K = 1 if cfg.patch_mode == "mouth" else cfg.num_landmarks
    assert patches.shape == (2, 5, K, 8, 8)
    h0, attn = fe(torch.from_numpy(patches), torch.from_numpy(tracks).float(), 32.0)
    assert h0.shape == (2, 5, 12)
    assert attn.shape == (2, 1, 2, 5, K, K)
    assert torch.isfinite(h0).all()


def test_ablation_flags_cut_their_paths():
    cfg = _small_cfg(use_relpos=False, use_motion=False)
    fe = Frontend(cfg).eval()
    clips, tracks = _inputs(cfg)
    patches = torch.from_numpy(fe.prepare_patches(clips, tracks))
    t = torch.from_numpy(tracks).float()
    # neither relpos nor motion in play: the landmark coordinates stop mattering
    assert torch.equal(fe(patches, t, 32.0)[0], fe(patches, t + 3.0, 32.0)[0])
    full = Frontend(_small_cfg()).eval()
    assert not torch.equal(full(patches, t, 32.0)[0], full(patches, t * 0.5, 32.0)[0])


def test_flexible_patch_size_sampling():
    fe = Frontend(_small_cfg())
    rng = np.random.default_rng(0)
    sizes = {fe.sample_patch_size(rng, True) for _ in range(50)}
    assert sizes == {8, 10}
    assert fe.sample_patch_size(rng, False) == 8


def test_config_validation():
    with pytest.raises(ValueError):
        _small_cfg(patch_size=9)
    with pytest.raises(ValueError):
        _small_cfg(temporal_depth=2)
    with pytest.raises(ValueError):
        _small_cfg(patch_mode="face")
