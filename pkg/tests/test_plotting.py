import pandas as pd
import pytest

from services.errors import ConfigError
from services.plotting import axis_columns, build_figure, emit_plot


def _frame():
    return pd.DataFrame({
        "experiment": "ttt-rate",
        "k": [32, 64, 128],
        "metric": "excess_error",
        "mean": [0.4, 0.2, 0.1],
        "ci_low": [0.3, 0.15, 0.08],
        "ci_high": [0.5, 0.25, 0.12],
        "n": 50,
        "seed": 0,
    })


def test_axis_columns():
    assert axis_columns(_frame()) == ["k"]


def test_svg_bytes_are_deterministic(tmp_path):
    a = emit_plot(_frame(), "band", tmp_path / "a.svg", logx=True)
    b = emit_plot(_frame(), "band", tmp_path / "b.svg", logx=True)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes().lstrip().startswith(b"<?xml")


def test_band_spans_interval():
    fig = build_figure(_frame(), "band")
    band = fig.axes[0].collections[0]
    ys = band.get_paths()[0].vertices[:, 1]
    assert ys.min() == pytest.approx(0.08)
    assert ys.max() == pytest.approx(0.5)


def test_single_point_is_marker_only():
    fig = build_figure(_frame().iloc[:1], "band")
    ax = fig.axes[0]
    assert len(ax.collections) == 0
    assert ax.lines[0].get_linestyle() == "None"
    assert ax.lines[0].get_marker() == "o"


@pytest.mark.parametrize("kind", ["line", "hist"])
def test_other_kinds(tmp_path, kind):
    path = emit_plot(_frame(), kind, tmp_path / f"{kind}.svg")
    assert path.stat().st_size > 0


def test_empty_frame():
    with pytest.raises(ConfigError):
        build_figure(_frame().iloc[:0])
