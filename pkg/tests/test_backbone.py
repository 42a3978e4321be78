import numpy as np
import pytest

from cgtrack import ndcore as nd
from cgtrack.backbone import (VARIANTS, Backbone, BackboneConfig, PositionEncoding, Segments, join_tokens,
                              split_tokens)
from cgtrack.harness.gradcheck import TINY_BACKBONE
from cgtrack.ndcore import NDArray


def test_segments_and_strided_indices():
    seg = Segments(8, 16)
    assert (seg.boundary, seg.length) == (64, 320)
    idx = seg.strided_indices()
    assert len(idx) == 16 + 64 == seg.shrunk().length
    assert idx[:4].tolist() == [0, 2, 4, 6] and idx[4] == 16
    assert idx[16] == 64 and idx[17] == 66


def test_join_split_round_trip(rng):
    z = NDArray(rng.standard_normal((2, 5, 4, 4)))
    x = NDArray(rng.standard_normal((2, 5, 8, 8)))
    tokens, seg = join_tokens(z, x)
    assert tokens.shape == (2, 80, 5)
    # token t of the template is pixel (t // 4, t % 4)
    np.testing.assert_array_equal(tokens.data[:, 6], z.data[:, :, 1, 2])
    z2, x2 = split_tokens(tokens, seg)
    np.testing.assert_array_equal(z2.data, z.data)
    np.testing.assert_array_equal(x2.data, x.data)


def test_join_rejects_channel_mismatch(rng):
    with pytest.raises(nd.DimensionError):
        join_tokens(NDArray(np.zeros((1, 4, 2, 2))), NDArray(np.zeros((1, 5, 4, 4))))


def test_position_tables_b_config():
    pos = PositionEncoding(384, 8, 16)
    assert pos.template_table.shape == (64, 384) and pos.search_table.shape == (256, 384)


def test_tiny_backbone_shapes_and_embed_channels(rng):
    bb = Backbone(TINY_BACKBONE, rng=rng)
    z = NDArray(rng.standard_normal((2, 3, 64, 64)), dtype=np.float32)
    x = NDArray(rng.standard_normal((2, 3, 128, 128)), dtype=np.float32)
    assert bb.embed(x).shape == (2, 16, 8, 8)
    pyr = bb(z, x)
    assert [m.shape for m in pyr.maps()] == [(2, 16, 8, 8), (2, 24, 4, 4), (2, 32, 2, 2)]


def test_template_influences_search_features(rng):
    """One-stream: the search-region maps depend on the template."""
    bb = Backbone(TINY_BACKBONE, rng=rng)
    x = NDArray(rng.standard_normal((1, 3, 128, 128)))
    a = bb(NDArray(rng.standard_normal((1, 3, 64, 64))), x).m_shallow.data
    b = bb(NDArray(rng.standard_normal((1, 3, 64, 64))), x).m_shallow.data
    assert not np.allclose(a, b)


def test_variant_table():
    assert VARIANTS["B"].stage_dims == (384, 512, 768)
    assert VARIANTS["T"].stage_depths == (2, 3, 4)
    assert VARIANTS["B"].template_grid == 8 and VARIANTS["B"].search_grid == 16


@pytest.mark.parametrize("kw", [dict(stage_dims=(64, 64, 96)), dict(stage_dims=(12, 24, 36)),
                                dict(template_size=100)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        BackboneConfig(**kw)


def test_patch_embed_rejects_bad_size(rng):
    bb = Backbone(TINY_BACKBONE, rng=rng)
    with pytest.raises(nd.DimensionError):
        bb.embed(NDArray(np.zeros((1, 3, 60, 60))))
