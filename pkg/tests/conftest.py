from __future__ import annotations

import numpy as np
import pytest

from flowdistill.data import SynthConfig, extract_windows, generate_synthetic, make_windows
from flowdistill.model import ModelConfig


@pytest.fixture(scope="session")
def small_series():
    """4 regions on a 2x2 grid, two channels, 400 half-hour steps."""
    series, graph, _ = generate_synthetic(SynthConfig(n_regions=4, n_steps=400, seed=0))
    return series, graph


@pytest.fixture
def small_batch(small_series):
    series, _ = small_series
    starts = make_windows(series, 4, 4)[:6]
    return extract_windows(series, starts, 4, 4, split="train")


@pytest.fixture
def small_cfg():
    return ModelConfig(n_regions=4, n_channels=2, T1=48, T2=7, d=4, L=2, K=4, H_in=4, H_out=4)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-12)))
