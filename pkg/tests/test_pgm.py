import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kagprompt.pgm import quantize, read_pgm, render_pgm


def test_zero_map(tmp_path):
    p = tmp_path / "z.pgm"
    render_pgm(np.zeros((2, 3)), str(p))
    assert p.read_text() == "P2\n3 2\n255\n0 0 0\n0 0 0\n"


def test_half_rounds_away_from_zero():
    assert quantize(np.array([0.5]))[0] == 128
    assert quantize(np.array([0.0, 1.0, 1.5 / 255]))[[0, 1, 2]].tolist() == [0, 255, 2]


def test_out_of_range_rejected(tmp_path):
    for bad in (np.array([[1.01]]), np.array([[-0.1]]), np.array([[np.nan]])):
        with pytest.raises(ValueError):
            render_pgm(bad, str(tmp_path / "x.pgm"))
    with pytest.raises(ValueError):
        render_pgm(np.zeros(4), str(tmp_path / "x.pgm"))


def test_reader_rejects_other_formats(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_text("P5\n1 1\n255\n0\n")
    with pytest.raises(ValueError):
        read_pgm(str(p))


@settings(max_examples=30, deadline=None)
@given(v=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(0, 1)))
def test_roundtrip_within_one_level(tmp_path_factory, v):
    p = tmp_path_factory.mktemp("pgm") / "m.pgm"
    render_pgm(v, str(p))
    back = read_pgm(str(p))
    assert back.shape == v.shape
    assert np.abs(back - v).max() <= 1 / 255 + 1e-15
