import csv

import numpy as np
import pytest

from core.errors import DimensionError, ParameterError
from core.modulation import (ModulationKind, cooperate, sample_field, transfer, transfer_partials,
                             transfer_values, write_field_csv)
from core.tensor import Parameter, Tensor, gradient_check, sum_all, track_kinks

TM_KINDS = [ModulationKind.TM1, ModulationKind.TM2, ModulationKind.TM3, ModulationKind.TM4]
GRID = np.linspace(-4.0, 4.0, 201)


def _coop(r, c):
    return cooperate(Tensor([r]), Tensor([c])).item()


@pytest.mark.parametrize("r, c, expected", [
    (0.0, 0.0, 0.0),
    (-1.0, 4.0, 6.0),
    (1.0, 0.0, 3.0),
    (-1.0, 0.0, 0.0),
])
def test_cooperate_examples(r, c, expected):
    assert _coop(r, c) == expected


@pytest.mark.parametrize("kind, r, c, expected", [
    (ModulationKind.TM1, 1.0, 0.0, 1.0),
    (ModulationKind.TM2, 2.0, 3.0, 8.0),
    (ModulationKind.TM4, 2.0, 1.0, 8.0),
])
def test_transfer_closed_forms(kind, r, c, expected):
    assert transfer(kind, Tensor([r]), Tensor([c])).item() == pytest.approx(expected, abs=1e-12)


def test_transfer_cooperation_delegates():
    r, c = np.meshgrid(GRID[::20], GRID[::20])
    a = transfer(ModulationKind.COOPERATION, Tensor(r), Tensor(c)).value
    assert np.array_equal(a, cooperate(Tensor(r), Tensor(c)).value)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        cooperate(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_parse_tags():
    assert ModulationKind.parse("TM3") is ModulationKind.TM3
    assert ModulationKind.parse(" Cooperation ") is ModulationKind.COOPERATION
    with pytest.raises(ParameterError):
        ModulationKind.parse("tm5")


def test_cooperate_range_and_monotone_in_context():
    rr, cc = np.meshgrid(GRID, GRID, indexing="ij")
    out = transfer_values(ModulationKind.COOPERATION, rr, cc)
    assert out.min() >= 0.0 and out.max() <= 6.0
    assert np.all(np.diff(out, axis=1) >= 0.0)


def test_zero_drive_contrast():
    zeros = np.zeros_like(GRID)
    assert np.array_equal(transfer_values(ModulationKind.COOPERATION, zeros, GRID), np.clip(GRID, 0, 6))
    for kind in TM_KINDS:
        assert np.all(transfer_values(kind, zeros, GRID) == 0.0), kind


def test_sign_override_at_negative_drive():
    out = transfer_values(ModulationKind.COOPERATION, np.full_like(GRID, -1.0), GRID)
    assert np.array_equal(out > 0.0, GRID > 0.5)


def test_cooperate_gradient_away_from_kinks():
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 100:
        r = rng.uniform(-3, 3, 6)
        c = rng.uniform(-3, 3, 6)
        pre = r * r + 2 * r + c * (1 + np.abs(r))
        if np.min(np.abs(r)) < 0.1 or np.min(np.abs(pre)) < 0.1 or np.min(np.abs(pre - 6)) < 0.1:
            continue
        R, C = Parameter(r, "R"), Parameter(c, "C")
        weights = Tensor(rng.normal(size=6))
        result = gradient_check(lambda: sum_all(cooperate(R, C) * weights), [R, C])
        assert result.passed(1e-6), result
        checked += 1


@pytest.mark.parametrize("kind", TM_KINDS)
def test_tm_gradients(kind):
    rng = np.random.default_rng(2)
    R = Parameter(rng.uniform(-2, 2, 8), "R")
    C = Parameter(rng.uniform(-2, 2, 8), "C")
    with track_kinks() as kinks:
        transfer(kind, R, C)
    assert kinks.observed == 0
    result = gradient_check(lambda: sum_all(transfer(kind, R, C)), [R, C])
    assert result.passed(1e-6), result


def test_partials_agree_with_field_differences():
    grid = sample_field(ModulationKind.TM3, -1.0, 1.0, -1.0, 1.0, 401)
    rr, cc = np.meshgrid(grid.r_axis, grid.c_axis, indexing="ij")
    d_r, d_c = transfer_partials(ModulationKind.TM3, rr, cc)
    assert np.allclose(grid.dvalue_dR, d_r, atol=1e-4)
    assert np.allclose(grid.dvalue_dC, d_c, atol=1e-4)


def test_exponent_clamp_keeps_values_finite():
    out = transfer_values(ModulationKind.TM1, np.array([100.0]), np.array([100.0]))
    assert np.isfinite(out).all()


def test_sample_field_center_and_extents():
    grid = sample_field(ModulationKind.COOPERATION, -1, 1, -1, 1, 3)
    assert grid.value.shape == (3, 3) == grid.dvalue_dR.shape == grid.dvalue_dC.shape
    assert grid.value[1, 1] == 0.0


def test_sample_field_tm2_identity():
    grid = sample_field(ModulationKind.TM2, -2, 2, -3, 3, 11)
    rr, cc = np.meshgrid(grid.r_axis, grid.c_axis, indexing="ij")
    assert np.allclose(grid.value, rr * (1 + cc))


def test_sample_field_monotone_in_context():
    grid = sample_field(ModulationKind.COOPERATION, -4, 4, -4, 4, 201)
    assert np.all(np.diff(grid.value, axis=1) >= 0.0)


@pytest.mark.parametrize("args", [(-1, -1, -1, 1, 5), (-1, 1, 2, 2, 5), (-1, 1, -1, 1, 1)])
def test_sample_field_rejects_degenerate(args):
    with pytest.raises(ParameterError):
        sample_field(ModulationKind.COOPERATION, *args)


def test_write_field_csv(tmp_path):
    grid = sample_field(ModulationKind.COOPERATION, -1, 1, -1, 1, 3)
    path = write_field_csv(grid, tmp_path / "field.csv")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["R", "C", "value", "dR", "dC"]
    assert len(rows) == 1 + 9
    assert float(rows[5][2]) == 0.0
