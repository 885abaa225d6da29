"""Figure rendering: files written, shape validation."""

import numpy as np
import pytest

from gapa.errors import ShapeError
from gapa.figures import coverage_figure, uncertainty_band_figure

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def test_uncertainty_band_figure_writes_png(tmp_path):
    x = np.linspace(-1.0, 1.0, 20)
    mean = np.sin(x)
    path = tmp_path / "band.png"
    out = uncertainty_band_figure(x, mean, mean - 0.5, mean + 0.5, path, train_x=x, train_y=mean)
    assert out == path
    assert path.read_bytes()[:8] == PNG_MAGIC


def test_coverage_figure_writes_png(tmp_path):
    alphas = np.arange(1, 100) / 100.0
    path = tmp_path / "coverage.png"
    coverage_figure(alphas, alphas**1.2, path)
    assert path.read_bytes()[:8] == PNG_MAGIC


def test_band_figure_shape_validation(tmp_path):
    x = np.linspace(0.0, 1.0, 5)
    with pytest.raises(ShapeError):
        uncertainty_band_figure(x, x, x, x[:-1], tmp_path / "bad.png")
    with pytest.raises(ShapeError):
        coverage_figure(x, x[:-1], tmp_path / "bad.png")
