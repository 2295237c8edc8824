import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import string

import numpy as np
import pytest

from stablab.data import StabilityDataset
from stablab.lmm import ModelSpec, Theta, build_design


def balanced_dataset(L, months, values=None, lsl=90.0, rng=None):
    """Balanced dataset with lots labeled A, B, C, ... in schedule order."""
    months = np.asarray(months, dtype=float)
    labels = list(string.ascii_uppercase[:L])
    lots = tuple(lab for lab in labels for _ in months)
    t = np.tile(months, L)
    if values is None:
        rng = rng or np.random.default_rng(0)
        values = 100.0 - (10.0 / 57.0) * t + rng.standard_normal(t.size)
    return StabilityDataset(lots, t, np.asarray(values, dtype=float), lsl=lsl)


@pytest.fixture
def ds_10x7():
    rng = np.random.default_rng(42)
    return balanced_dataset(10, (0, 3, 6, 9, 12, 24, 36), rng=rng)


@pytest.fixture
def design_ri_10x7(ds_10x7):
    return build_design(ds_10x7, ModelSpec("ri"))


def simulated_ri(L, months, vcfrac, seed, beta0=100.0, beta1=-10.0 / 57.0, lsl=90.0):
    """Dataset generated under the random-intercept model with known truth."""
    rng = np.random.default_rng(seed)
    months = np.asarray(months, dtype=float)
    b = np.sqrt(vcfrac) * rng.standard_normal(L)
    eps = np.sqrt(1.0 - vcfrac) * rng.standard_normal(L * months.size)
    t = np.tile(months, L)
    lot_idx = np.repeat(np.arange(L), months.size)
    y = beta0 + beta1 * t + b[lot_idx] + eps
    labels = list(string.ascii_uppercase[:L])
    lots = tuple(labels[i] for i in lot_idx)
    return StabilityDataset(lots, t, y, lsl=lsl), b


WORKED_THETA = Theta(0.004491, None, 0.2360)
WORKED_OMEGA = np.array([[1.57e-4, -1.11e-4], [-1.11e-4, 1.00e-3]])
WORKED_MONTHS = (0.0, 3.0, 6.0, 9.0, 12.0, 24.0, 36.0, 48.0, 60.0)
