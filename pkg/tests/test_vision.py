import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridmm.layers import ConfigError
from hybridmm.netpbm import NetPBMError, encode_p6, parse_p6, read_frames, write_p6
from hybridmm.numerics import Rng
from hybridmm.ssm import DomainError
from hybridmm.vision import (
    TRAIN_ASPECTS, Image, PatchEncoder, count_visual_tokens, encode_frames, encode_tiles, frame_indices,
    inference_grid, layout_for, match_aspect_ratio, resize_bilinear, sample_frames, tile_image,
)


def _random_image(w, h, seed=0):
    return Image(Rng(seed).integers(0, 256, (h, w, 3)).astype(np.uint8))


# -- aspect matching -----------------------------------------------------------


@pytest.mark.parametrize("w,h,grid", [(672, 336, (2, 1)), (336, 336, (1, 1)), (1000, 400, (2, 1))])
def test_aspect_examples(w, h, grid):
    assert match_aspect_ratio(w, h) == grid


def test_aspect_tie_enumeration():
    # 2.5 sits exactly between 2:1 and 3:1; every other candidate is farther
    from fractions import Fraction

    dist = {a: abs(Fraction(1000, 400) - Fraction(*a)) for a in TRAIN_ASPECTS}
    best = min(dist.values())
    assert sorted(a for a, d in dist.items() if d == best) == [(2, 1), (3, 1)]


def test_aspect_empty_set():
    with pytest.raises(ConfigError):
        match_aspect_ratio(10, 10, [])


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 5000), st.integers(1, 5000))
def test_aspect_scale_invariant(w, h):
    assert match_aspect_ratio(w, h) == match_aspect_ratio(2 * w, 2 * h)


# -- tiling and token accounting -----------------------------------------------


def test_single_tile_576_tokens():
    lay = tile_image(_random_image(336, 336), (1, 1), 336, include_global=True)
    assert len(lay.tiles) == 1 and lay.global_image is None and lay.token_count == 576


def test_1344_grid_with_global_9792():
    img = Image.solid(1344, 1344, (10, 20, 30))
    lay = tile_image(img, inference_grid(1344, 1344, 336), 336, include_global=True)
    assert lay.grid == (4, 4) and lay.token_count == 9792


@pytest.mark.parametrize("w,glob,want", [(672, True, 2880), (672, False, 2304), (1344, True, 9792),
                                         (2688, True, 37440)])
def test_reference_token_counts(w, glob, want):
    assert count_visual_tokens(w, w, 336, 14, glob) == want


def test_token_count_rejects_indivisible_tile():
    with pytest.raises(ConfigError):
        count_visual_tokens(100, 100, 30, 14)


def test_exact_fit_partition():
    img = _random_image(672, 672, seed=3)
    lay = tile_image(img, (2, 2), 336)
    rows = [np.concatenate([t.pixels for t in lay.tiles[r * 2 : r * 2 + 2]], axis=1) for r in range(2)]
    assert np.array_equal(np.concatenate(rows, axis=0), lay.resized.pixels)
    assert np.array_equal(lay.resized.pixels, img.pixels)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4))
def test_partition_property(cols, rows, tile):
    tile *= 7
    img = _random_image(cols * tile + 5, rows * tile + 3, seed=cols * 10 + rows)
    lay = tile_image(img, (cols, rows), tile, include_global=True, patch=7)
    assert len(lay.tiles) == cols * rows
    assert lay.token_count == (cols * rows + ((cols, rows) != (1, 1))) * (tile // 7) ** 2
    stitched = np.concatenate(
        [np.concatenate([t.pixels for t in lay.tiles[r * cols : (r + 1) * cols]], axis=1) for r in range(rows)], axis=0
    )
    assert np.array_equal(stitched, lay.resized.pixels)


def test_bilinear_corner_aligned():
    img = Image(np.array([[[0, 0, 0], [100, 100, 100]]], dtype=np.uint8))
    out = resize_bilinear(img, 3, 1).pixels[0, :, 0]
    assert out.tolist() == [0, 50, 100]


def test_layout_phases():
    img = Image.solid(1000, 400, (1, 2, 3))
    assert layout_for(img, 336, 14, False, "train").grid == (2, 1)
    assert layout_for(img, 336, 14, True, "inference").grid == (3, 2)


# -- encoder -------------------------------------------------------------------


@pytest.fixture(scope="module")
def encoder():
    return PatchEncoder(Rng(0), tile_size=56, patch=14, width=8)


def test_encoder_feature_counts(encoder):
    img = _random_image(112, 112)
    lay = tile_image(img, (2, 2), 56, include_global=True)
    feats = encode_tiles(encoder, lay)
    assert feats.shape == (5 * 16, 8)
    # grid order, global last
    blocks = feats.reshape(5, 16, 8)
    assert np.array_equal(blocks[0], encoder([lay.tiles[0]])[0])
    assert np.array_equal(blocks[4], encoder([lay.global_image])[0])


def test_identical_tiles_identical_features(encoder):
    t = _random_image(56, 56, seed=9)
    f = encoder([t, t])
    assert np.array_equal(f[0], f[1])


def test_encoder_default_geometry():
    enc = PatchEncoder(Rng(0), width=8, n_layers=1)
    assert encode_tiles(enc, tile_image(_random_image(336, 336), (1, 1))).shape == (576, 8)


def test_encoder_frozen(encoder):
    before = encoder.checksum()
    encoder.set_trainable(True)
    assert all(not p.requires_grad for p in encoder.parameters())
    assert encoder.checksum() == before


def test_encode_frames_grid(encoder):
    frames = [_random_image(30, 20, seed=i) for i in range(3)]
    assert encode_frames(encoder, frames).shape == (3, 4, 4, 8)


# -- frame sampling ------------------------------------------------------------


def test_frame_examples():
    assert frame_indices(64, 8) == [0, 9, 18, 27, 36, 45, 54, 63]
    assert frame_indices(12, 12) == list(range(12))
    assert frame_indices(10, 1) == [5]


def test_frame_errors():
    with pytest.raises(DomainError):
        frame_indices(0, 3)
    with pytest.raises(DomainError):
        sample_frames([], 2)


def test_frame_rounding_matches_exact_rational():
    from fractions import Fraction
    import math

    for F_ in range(1, 40):
        for n in range(2, 40):
            want = [math.floor(Fraction(i * (F_ - 1), n - 1) + Fraction(1, 2)) for i in range(n)]
            assert frame_indices(F_, n) == want


@settings(max_examples=500, deadline=None)
@given(st.integers(1, 10_000), st.integers(1, 500))
def test_frame_invariants(F_, n):
    idx = frame_indices(F_, n)
    assert len(idx) == n
    assert all(0 <= i < F_ for i in idx)
    assert idx == sorted(idx)
    if n >= 2:
        assert idx[0] == 0 and idx[-1] == F_ - 1


# -- P6 ------------------------------------------------------------------------


def test_p6_roundtrip(tmp_path):
    img = _random_image(5, 3)
    write_p6(tmp_path / "a.ppm", img)
    assert np.array_equal(parse_p6((tmp_path / "a.ppm").read_bytes()).pixels, img.pixels)


def test_p6_comments_and_whitespace():
    body = bytes(range(12))
    img = parse_p6(b"P6 # comment\n2 2\n# another\n255\n" + body)
    assert img.pixels.reshape(-1).tolist() == list(range(12))


@pytest.mark.parametrize("blob,offset", [(b"P3\n1 1\n255\n", 0), (b"P6\n2 2\n255\n" + bytes(5), 16),
                                         (b"P6\n1 1\n65535\n" + bytes(6), None), (b"P6\n1 x\n255\n", None)])
def test_p6_errors_carry_offset(blob, offset):
    with pytest.raises(NetPBMError) as exc:
        parse_p6(blob)
    assert f"byte {exc.value.offset}" in str(exc.value)
    if offset is not None:
        assert exc.value.offset == offset


def test_read_frames_sorted(tmp_path):
    for name in ("b.ppm", "a.ppm", "c.txt"):
        (tmp_path / name).write_bytes(encode_p6(Image.solid(1, 1, (0, 0, 0))))
    assert [p.name for p in read_frames(tmp_path)] == ["a.ppm", "b.ppm"]
