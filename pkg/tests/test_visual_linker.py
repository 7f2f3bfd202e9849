import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from app.modules.errors import ContractError, ProbabilityMapError
from app.modules.ingest import TextRegion
from app.modules.synth import phrase_quads, word_quad
from app.modules.visual_linker import (
    GRAY,
    ProbabilityMap,
    ProbabilityMapDirectory,
    RasterFrame,
    SurrogateMaps,
    binarize,
    candidate_frame,
    compatibility,
    find_sheet_image,
    load_probability_map,
    phrase_scores,
    polygon_mask,
    render_model_input,
    resize_area,
    surrogate_probability_map,
    write_probability_map,
)


def box(region_id, text, x0, y0, x1, y1):
    return TextRegion.from_polygon(region_id, text, ((x0, y0), (x1, y0), (x1, y1), (x0, y1)))


@pytest.fixture
def wide_frame():
    return candidate_frame(box("q", "Fall", 0, 0, 50, 40), [box("c", "River", 60, 0, 100, 40)])


def test_candidate_frame_pads_short_side(wide_frame):
    assert (wide_frame.x0, wide_frame.y0) == (0.0, 0.0)
    assert (wide_frame.width, wide_frame.height) == (100.0, 40.0)
    assert wide_frame.side == 100.0
    assert wide_frame.offset == (0.0, 30.0)
    assert wide_frame.scale == pytest.approx(256 / 100)
    assert wide_frame.pad_color == GRAY
    assert wide_frame.square.bounds == (0.0, -30.0, 100.0, 70.0)


def test_candidate_frame_single_candidate_equal_to_query():
    q = box("q", "Fall", 10, 10, 90, 30)
    frame = candidate_frame(q, [box("c", "Fall", 10, 10, 90, 30)], size=64)
    assert frame.side == 80.0
    assert frame.size == 64


def test_candidate_frame_needs_candidates():
    with pytest.raises(ContractError):
        candidate_frame(box("q", "Fall", 0, 0, 10, 4), [])


def test_candidate_frame_pad_color_from_image():
    image = np.zeros((60, 120, 3), dtype=np.uint8)
    image[:, :] = (10, 20, 30)
    image[50:, :] = (255, 255, 255)  # outside the bbox
    frame = candidate_frame(box("q", "Fall", 0, 0, 50, 40), [box("c", "River", 60, 0, 100, 40)], image)
    assert frame.pad_color == pytest.approx((10.0, 20.0, 30.0))


@given(st.floats(0, 100), st.floats(0, 40))
def test_frame_round_trip_stays_within_a_pixel(x, y):
    frame = RasterFrame(0.0, 0.0, 100.0, 40.0, 256)
    gx, gy = frame.to_grid(x, y)
    sx, sy = frame.to_sheet(gx, gy)
    assert abs(sx - x) < 1.0 and abs(sy - y) < 1.0
    assert 0.0 <= gx <= 256 and 0.0 <= gy <= 256


def test_polygon_mask_left_half_of_square_frame():
    frame = RasterFrame(0.0, 0.0, 100.0, 100.0, 64)
    mask = polygon_mask(box("l", "x", 0, 0, 50, 100).shape, frame)
    assert abs(int(mask.sum()) - 64 * 64 // 2) <= 64
    assert mask[:, 0].all() and not mask[:, -1].any()


def test_surrogate_fills_touching_twin_with_one():
    q = box("q", "Fall", 0, 0, 40, 20)
    c = box("c", "Fall", 40, 0, 80, 20)
    assert compatibility(q, c) == pytest.approx(1.0)
    frame = candidate_frame(q, [c], size=32)
    prob = surrogate_probability_map(q, [c], frame)
    footprint = polygon_mask(c.shape, frame)
    np.testing.assert_allclose(prob.grid[footprint], 1.0)
    assert np.all(prob.grid[~footprint] == 0.0)


def test_surrogate_penalizes_orthogonal_large_font():
    q = box("q", "Fall", 0, 0, 40, 20)
    # vertical, 10x the font area of the query
    big = TextRegion.from_polygon("c", "Fall", word_quad(60, 0, "Fall", 63.25, 90.0))
    assert big.angle == pytest.approx(0.0)
    assert compatibility(q, big) < 0.5


def test_surrogate_is_permutation_invariant(fall_river):
    q = fall_river.region("f")
    cands = [fall_river.region("r"), fall_river.region("b")]
    frame = candidate_frame(q, cands, size=64)
    a = surrogate_probability_map(q, cands, frame).grid
    b = surrogate_probability_map(q, cands[::-1], frame).grid
    np.testing.assert_array_equal(a, b)
    assert a.max() <= 1.0 and a.min() == 0.0


def black_crater_lake():
    words = ("Black", "Crater", "Lake")
    quads = phrase_quads(0, 0, words, 20)
    return [TextRegion.from_polygon(f"w{i}", w, q) for i, (w, q) in enumerate(zip(words, quads))]


def test_phrase_scores_follow_the_weakest_link():
    black, crater, lake = black_crater_lake()
    assert compatibility(black, crater) == pytest.approx(math.exp(-0.4))
    assert compatibility(black, lake) < 0.05
    scores = phrase_scores(black, [crater, lake])
    assert scores[0] == compatibility(black, crater)
    assert scores[1] == min(compatibility(black, crater), compatibility(crater, lake))


def test_phrase_scores_never_below_direct_compatibility(fall_river):
    q = fall_river.region("f")
    cands = [fall_river.region("r"), fall_river.region("b")]
    scores = phrase_scores(q, cands)
    assert scores[0] == compatibility(q, cands[0])
    assert scores[1] == compatibility(q, cands[1]) < 0.5
    assert phrase_scores(q, cands[::-1]).tolist() == scores[::-1].tolist()


def test_surrogate_marks_the_whole_phrase():
    black, crater, lake = black_crater_lake()
    frame = candidate_frame(black, [crater, lake], size=64)
    grid = surrogate_probability_map(black, [crater, lake], frame).grid
    assert np.all(grid[polygon_mask(lake.shape, frame)] > 0.5)


def test_load_probability_map_pgm(tmp_path):
    path = tmp_path / "q.pgm"
    Image.fromarray(np.full((256, 256), 255, dtype=np.uint8)).save(path)
    frame = RasterFrame(0.0, 0.0, 10.0, 10.0, 256)
    np.testing.assert_array_equal(load_probability_map(path, frame).grid, np.ones((256, 256)))


def test_load_probability_map_wrong_size(tmp_path):
    path = tmp_path / "q.pgm"
    Image.fromarray(np.zeros((128, 128), dtype=np.uint8)).save(path)
    with pytest.raises(ProbabilityMapError, match="frame expects"):
        load_probability_map(path, RasterFrame(0.0, 0.0, 10.0, 10.0, 256))


def test_load_probability_map_out_of_range(tmp_path):
    path = tmp_path / "q.txt"
    path.write_text("0.1 0.2\n1.2 0.0\n")
    with pytest.raises(ProbabilityMapError, match=r"\[0, 1\]"):
        load_probability_map(path, RasterFrame(0.0, 0.0, 10.0, 10.0, 2))


def test_load_probability_map_unreadable(tmp_path):
    path = tmp_path / "q.txt"
    path.write_text("0.1 zero\n")
    with pytest.raises(ProbabilityMapError):
        load_probability_map(path, RasterFrame(0.0, 0.0, 10.0, 10.0, 2))


@pytest.mark.parametrize("suffix", [".pgm", ".npy", ".txt"])
def test_written_maps_load_back(tmp_path, suffix):
    frame = RasterFrame(0.0, 0.0, 10.0, 10.0, 4)
    grid = np.zeros((4, 4))
    grid[1:3, 1:3] = 1.0
    path = write_probability_map(ProbabilityMap(grid, frame), tmp_path / f"m{suffix}")
    np.testing.assert_allclose(load_probability_map(path, frame).grid, grid)


def test_binarize_is_strict():
    frame = RasterFrame(0.0, 0.0, 10.0, 10.0, 2)
    prob = ProbabilityMap(np.array([[0.5, 0.51], [0.0, 1.0]]), frame)
    np.testing.assert_array_equal(binarize(prob, 0.5).grid, [[0.0, 1.0], [0.0, 1.0]])
    ones = ProbabilityMap(np.ones((2, 2)), frame)
    np.testing.assert_array_equal(binarize(ones, 0.5).grid, np.ones((2, 2)))
    capped = ProbabilityMap(np.full((2, 2), 0.9), frame)
    assert not binarize(capped, 0.999).grid.any()


@pytest.mark.parametrize("p", [0.0, 1.0, -0.2])
def test_binarize_threshold_must_be_open_interval(p):
    frame = RasterFrame(0.0, 0.0, 10.0, 10.0, 2)
    with pytest.raises(ContractError):
        binarize(ProbabilityMap(np.zeros((2, 2)), frame), p)


@pytest.mark.parametrize("value", [0.0, 0.1, 0.25, 0.7, 1.0])
@pytest.mark.parametrize("small, large", [(8, 32), (20, 40), (7, 24)])
def test_resize_area_preserves_constant_maps(value, small, large):
    up = resize_area(np.full((small, small), value), large)
    down = resize_area(up, small)
    assert up.shape == (large, large) and down.shape == (small, small)
    assert np.array_equal(up, np.full((large, large), value))
    assert np.array_equal(down, np.full((small, small), value))


def test_resize_area_accepts_rows_and_cols():
    out = resize_area(np.full((40, 40), 0.1), (20, 10))
    assert out.shape == (20, 10)
    assert np.array_equal(out, np.full((20, 10), 0.1))


def test_resize_area_averages_blocks():
    grid = np.array([[0.0, 1.0, 0.5, 0.5],
                     [1.0, 0.0, 0.5, 0.5]])
    np.testing.assert_allclose(resize_area(grid, (1, 2)), [[0.5, 0.5]])
    # a 3 -> 2 downsample splits the middle cell between both outputs
    np.testing.assert_allclose(resize_area(np.array([[0.0, 0.3, 0.9]]), (1, 2)), [[0.1, 0.7]])


def test_resize_area_stays_in_input_range():
    rng = np.random.default_rng(5)
    for _ in range(50):
        grid = rng.uniform(0.0, 1.0, tuple(rng.integers(1, 30, size=2)))
        out = resize_area(grid, int(rng.integers(1, 40)))
        assert grid.min() <= out.min() and out.max() <= grid.max()


@pytest.mark.parametrize("shape, size", [((0, 4), 4), ((4,), 4), ((4, 4), 0)])
def test_resize_area_rejects_bad_shapes(shape, size):
    with pytest.raises(ContractError):
        resize_area(np.zeros(shape), size)


def test_load_probability_map_sixteen_bit_pgm(tmp_path):
    path = tmp_path / "q.pgm"
    values = np.array([[0, 65535], [32768, 13107]], dtype=">u2")
    path.write_bytes(b"P5\n2 2\n65535\n" + values.tobytes())
    grid = load_probability_map(path, RasterFrame(0.0, 0.0, 10.0, 10.0, 2)).grid
    np.testing.assert_allclose(grid, values.astype(np.float64) / 65535.0, atol=1e-9)
    assert grid[0, 1] == 1.0


def test_load_probability_map_resample_opt_in(tmp_path):
    path = tmp_path / "q.npy"
    np.save(path, np.full((128, 128), 0.1))
    frame = RasterFrame(0.0, 0.0, 10.0, 10.0, 256)
    with pytest.raises(ProbabilityMapError, match="frame expects"):
        load_probability_map(path, frame)
    assert np.array_equal(load_probability_map(path, frame, resample=True).grid, np.full((256, 256), 0.1))


def test_render_model_input(wide_frame):
    image = np.full((60, 120, 3), 200, dtype=np.uint8)
    rgb, mask = render_model_input(image, box("q", "Fall", 0, 0, 50, 40), wide_frame)
    assert rgb.shape == (256, 256, 3)
    assert mask.shape == (256, 256)
    # pad rows above the bbox keep the gray pad color
    assert tuple(rgb[0, 128]) == (128, 128, 128)
    assert tuple(rgb[128, 10]) == (200, 200, 200)
    assert mask[128, 10] and not mask[128, 250]


def test_find_sheet_image(tmp_path):
    Image.fromarray(np.zeros((5, 7, 3), dtype=np.uint8)).save(tmp_path / "s1.png")
    assert find_sheet_image(tmp_path, "s1").shape == (5, 7, 3)
    assert find_sheet_image(tmp_path, "s2") is None
    assert find_sheet_image(None, "s1") is None


def test_map_directory_prefers_files_and_falls_back(tmp_path, fall_river):
    q = fall_river.region("f")
    cands = [fall_river.region("r")]
    frame = candidate_frame(q, cands, size=16)
    (tmp_path / fall_river.sheet_id).mkdir()
    np.save(tmp_path / fall_river.sheet_id / "f.npy", np.full((16, 16), 0.75))

    maps = ProbabilityMapDirectory(tmp_path)
    assert maps(fall_river, q, cands, frame).grid[0, 0] == 0.75
    r = fall_river.region("r")
    surrogate = SurrogateMaps()(fall_river, r, [q], candidate_frame(r, [q], size=16))
    np.testing.assert_array_equal(maps(fall_river, r, [q], candidate_frame(r, [q], size=16)).grid, surrogate.grid)

    with pytest.raises(ProbabilityMapError, match="no probability map"):
        ProbabilityMapDirectory(tmp_path, fallback=False)(fall_river, r, [q], frame)


def test_map_directory_resamples_when_asked(tmp_path, fall_river):
    q, r = fall_river.region("f"), fall_river.region("r")
    frame = candidate_frame(q, [r], size=16)
    (tmp_path / fall_river.sheet_id).mkdir()
    np.save(tmp_path / fall_river.sheet_id / "f.npy", np.full((64, 64), 0.3))

    with pytest.raises(ProbabilityMapError):
        ProbabilityMapDirectory(tmp_path)(fall_river, q, [r], frame)
    grid = ProbabilityMapDirectory(tmp_path, resample=True)(fall_river, q, [r], frame).grid
    assert np.array_equal(grid, np.full((16, 16), 0.3))
