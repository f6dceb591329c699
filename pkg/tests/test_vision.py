import numpy as np
import pytest

from omnistage.errors import DataError, InputError, ShapeError
from omnistage.model import OmniModel
from omnistage.vision import (TOKENS_PER_TILE, frame_count, image_tiles, patchify, plan_patches, read_ppm,
                              read_video_dir, resize_bilinear, sample_frames, video_frames, write_ppm)

FRAME_TABLE = {0.5: 4, 3.0: 4, 4.0: 4, 7.3: 7, 10.0: 10, 16.0: 16, 16.1: 16, 20.0: 16, 60.0: 16}


@pytest.mark.parametrize("duration,count", sorted(FRAME_TABLE.items()))
def test_frame_count_table(duration, count):
    assert frame_count(duration) == count
    assert len(sample_frames(duration)) == count


def test_frame_timestamps_are_midpoints():
    ts = sample_frames(8.0).timestamps
    assert ts == tuple(i + 0.5 for i in range(8))
    assert all(0 < t < 60.0 for t in sample_frames(60.0).timestamps)


def test_frame_count_rejects_nonpositive():
    with pytest.raises(InputError):
        frame_count(0.0)


@pytest.mark.parametrize("w,h,tiles,tokens", [
    (448, 448, 1, 256),
    (896, 448, 3, 768),
    (448, 896, 3, 768),
    (100, 100, 1, 256),
    (1344, 448, 4, 1024),
])
def test_patch_plan_token_law(w, h, tiles, tokens):
    plan = plan_patches(w, h)
    assert plan.n_tiles == tiles
    assert plan.n_tokens == tokens


def test_patch_plan_budget_and_thumbnail():
    plan = plan_patches(448 * 20, 448)
    assert plan.grid_rows * plan.grid_cols <= 12
    assert plan.include_thumbnail and plan.n_tiles == plan.grid_rows * plan.grid_cols + 1


def test_patch_plan_oracle_nearest_aspect():
    # exhaustive oracle over the grid set, independent of the planner loop
    for w, h in [(300, 1000), (1000, 640), (1920, 1080), (50, 700)]:
        plan = plan_patches(w, h)
        grids = [(r, c) for r in range(1, 13) for c in range(1, 13) if r * c <= 12]
        best = min(abs(c / r - w / h) for r, c in grids)
        assert abs(plan.grid_cols / plan.grid_rows - w / h) == pytest.approx(best)


def test_image_tiles_shapes():
    img = np.random.default_rng(0).random((200, 400, 3)).astype(np.float32)
    plan, tiles = image_tiles(img)
    assert len(tiles) == plan.n_tiles
    assert all(t.shape == (448, 448, 3) for t in tiles)


def test_patchify_row_major():
    tile = np.zeros((448, 448, 3), np.float32)
    tile[28:56, 0:28] = 1.0  # patch (row 1, col 0) -> token 16
    rows = patchify(tile)
    assert rows.shape == (256, 28 * 28 * 3)
    assert rows[16].min() == 1.0 and rows.sum() == rows[16].sum()
    with pytest.raises(ShapeError):
        patchify(np.zeros((10, 10, 3)))


def test_ppm_round_trip_and_comments(tmp_path):
    img = np.random.default_rng(0).random((5, 7, 3))
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    np.testing.assert_allclose(back, np.rint(img * 255) / 255, atol=1e-6)
    raw = (tmp_path / "a.ppm").read_bytes().replace(b"P6\n", b"P6\n# comment\n", 1)
    (tmp_path / "b.ppm").write_bytes(raw)
    np.testing.assert_array_equal(read_ppm(tmp_path / "b.ppm"), back)
    (tmp_path / "c.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(DataError):
        read_ppm(tmp_path / "c.ppm")


def test_resize_identity_and_constant():
    img = np.full((10, 20, 3), 0.25, np.float32)
    np.testing.assert_array_equal(resize_bilinear(img, 10, 20), img)
    np.testing.assert_allclose(resize_bilinear(img, 33, 7), 0.25, atol=1e-7)


def test_video_dir_sampling(small_corpus):
    clip = read_video_dir(small_corpus / "video/vid_001")
    schedule, frames = video_frames(clip)
    assert len(frames) == frame_count(clip.duration) == 7
    with pytest.raises(DataError):
        read_video_dir(small_corpus / "images")


def test_visual_tokens_in_llm_width():
    model = OmniModel(seed=0)
    tokens = model.encode_image(np.zeros((448, 896, 3), np.float32))
    assert tokens.shape == (768, model.cfg.llm.d_model)
    for k in (1, 3):
        frames = [np.zeros((448, 448, 3), np.float32)] * k
        assert model.encode_tiles(frames).shape[0] == TOKENS_PER_TILE * k
