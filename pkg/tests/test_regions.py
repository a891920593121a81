import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sonochain.errors import ConfigError, SplitError
from sonochain.regions import LayoutConfig, Raster, load_layouts, pixel_box, split, validate_layout


def raster(w, h, channels=None):
    shape = (h, w) if channels is None else (h, w, channels)
    return Raster(np.arange(np.prod(shape), dtype=np.uint32).reshape(shape).astype(np.uint8))


def layout(**regions):
    regions.setdefault("main", (0.0, 0.0, 1.0, 1.0))
    regions.setdefault("probe_mark", (0.8, 0.0, 1.0, 0.2))
    return LayoutConfig("t", regions)


def test_identity_rectangle():
    crops = split(raster(100, 100), layout())
    assert (crops["main"].width, crops["main"].height) == (100, 100)


def test_probe_mark_pixels():
    # origin: floor(0.85*640)=544, floor(0.05*480)=24
    # extent: ceil(0.13*640 = 83.2)=84, ceil(0.20*480 = 96)=96
    assert pixel_box((0.85, 0.05, 0.98, 0.25), 640, 480) == (544, 24, 84, 96)
    frame = raster(640, 480)
    crop = split(frame, layout(probe_mark=(0.85, 0.05, 0.98, 0.25)))["probe_mark"]
    assert (crop.width, crop.height) == (84, 96)
    assert crop == Raster(frame.pixels[24:120, 544:628])


def test_collapsed_rectangle():
    with pytest.raises(SplitError) as info:
        split(raster(4, 4), layout(ocr_strip=(0.5, 0.5, 0.5001, 0.5001)))
    assert info.value.region == "ocr_strip"


def test_extent_clamped_at_frame_edge():
    # ceil(0.3 * 7 = 2.1) = 3 columns from x = floor(0.7 * 7) = 4 stays inside a 7-wide frame
    assert pixel_box((0.7, 0.0, 1.0, 1.0), 7, 3) == (4, 0, 3, 3)
    assert pixel_box((0.5, 0.5, 1.0, 1.0), 3, 3) == (1, 1, 2, 2)


def test_colour_frames_keep_channels():
    crops = split(raster(10, 10, channels=3), layout())
    assert crops["probe_mark"].pixels.shape == (2, 2, 3)


def test_validate_ok():
    assert validate_layout(layout()) == []


def test_validate_missing_main():
    bad = LayoutConfig("t", {"probe_mark": (0.0, 0.0, 0.5, 0.5)})
    assert "mandatory region absent: main" in validate_layout(bad)


def test_validate_reports_every_violation():
    bad = LayoutConfig("t", {"main": (0.6, 0.0, 0.5, 1.0), "ocr_strip": (0.0, 0.2, 0.5, 0.1), "legend": (0, 0, 1, 1)})
    violations = validate_layout(bad)
    assert "mandatory region absent: probe_mark" in violations
    assert any("main" in v and "x0 >= x1" in v for v in violations)
    assert any("ocr_strip" in v and "y0 >= y1" in v for v in violations)
    assert "unknown region name: legend" in violations


def test_validate_out_of_bounds_and_shape():
    bad = layout(main=(0.0, 0.0, 1.5, 1.0), probe_mark=(0.1, 0.2))
    violations = validate_layout(bad)
    assert any("outside [0, 1]" in v for v in violations)
    assert any("4 coordinates" in v for v in violations)


def test_split_rejects_invalid_layout():
    with pytest.raises(ConfigError):
        split(raster(10, 10), LayoutConfig("t", {"main": (0, 0, 1, 1)}))


def test_load_layouts(tmp_path):
    path = tmp_path / "layouts.json"
    path.write_text(json.dumps([
        {"layout_id": "a", "regions": {"main": [0, 0, 1, 1], "probe_mark": [0.8, 0, 1, 0.2]}},
        {"layout_id": "b", "regions": {"main": [0, 0, 0.5, 1], "probe_mark": [0.5, 0, 1, 0.5]}},
    ]))
    layouts = load_layouts(path)
    assert sorted(layouts) == ["a", "b"]
    assert layouts["b"].regions["probe_mark"] == (0.5, 0, 1, 0.5)
    assert LayoutConfig.from_dict(layouts["a"].to_dict()) == layouts["a"]


def test_load_layouts_invalid(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"layout_id": "x", "regions": {"main": [0, 0, 1, 1]}}))
    with pytest.raises(ConfigError, match="probe_mark"):
        load_layouts(path)
    with pytest.raises(ConfigError):
        load_layouts(tmp_path / "missing.json")


def test_split_is_deterministic():
    frame = raster(33, 17, channels=3)
    lay = layout(ocr_strip=(0.0, 0.0, 0.5, 0.3))
    a, b = split(frame, lay), split(frame, lay)
    assert {k: v.tobytes() for k, v in a.items()} == {k: v.tobytes() for k, v in b.items()}


coord = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def rects(draw):
    x0, x1 = sorted(draw(st.tuples(coord, coord)))
    y0, y1 = sorted(draw(st.tuples(coord, coord)))
    if x0 == x1 or y0 == y1:
        return (0.0, 0.0, 1.0, 1.0)
    return (x0, y0, x1, y1)


@given(rects(), rects(), st.integers(1, 700), st.integers(1, 700))
def test_crops_stay_inside_frame(main, probe, w, h):
    lay = layout(main=main, probe_mark=probe)
    assert validate_layout(lay) == []
    for rect in (main, probe):
        x, y, cw, ch = pixel_box(rect, w, h)
        assert 0 <= x and 0 <= y and x + cw <= w and y + ch <= h
    try:
        crops = split(Raster(np.zeros((h, w), dtype=np.uint8)), lay)
    except SplitError:
        return
    for crop in crops.values():
        assert 1 <= crop.width <= w and 1 <= crop.height <= h
