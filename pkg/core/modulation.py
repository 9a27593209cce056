"""Modulatory transfer functions combining a driving input R with a context C.

Cooperation lets a strong context override the sign of R; TM1..TM4 leave the
output at zero whenever R is zero, whatever the context.
"""

import csv
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from core.errors import DimensionError, ParameterError
from core.tensor import Tensor, kinks_tracked, note_kinks

logger = logging.getLogger(__name__)

# Numerical guard for the exponential variants, not part of their definition.
EXPONENT_CLAMP = 30.0
LN2 = float(np.log(2.0))


class ModulationKind(str, Enum):
    COOPERATION = "cooperation"
    TM1 = "tm1"
    TM2 = "tm2"
    TM3 = "tm3"
    TM4 = "tm4"

    @classmethod
    def parse(cls, tag: Union[str, "ModulationKind"]) -> "ModulationKind":
        if isinstance(tag, ModulationKind):
            return tag
        try:
            return cls(str(tag).strip().lower())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ParameterError(f"unknown modulation kind '{tag}' (expected one of {valid})") from None


def cooperation_preactivation(r: np.ndarray, c: np.ndarray) -> np.ndarray:
    return r * r + 2.0 * r + c * (1.0 + np.abs(r))


def transfer_values(kind: ModulationKind, r: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Elementwise value of the selected transfer function on plain arrays."""
    kind = ModulationKind.parse(kind)
    if kind is ModulationKind.COOPERATION:
        return np.clip(cooperation_preactivation(r, c), 0.0, 6.0)
    if kind is ModulationKind.TM2:
        return r + r * c
    u = np.clip(r * c, -EXPONENT_CLAMP, EXPONENT_CLAMP)
    if kind is ModulationKind.TM1:
        return 0.5 * r * (1.0 + np.exp(u))
    if kind is ModulationKind.TM3:
        return r * (1.0 + np.tanh(u))
    return r * np.exp2(u)


def transfer_partials(kind: ModulationKind, r: np.ndarray, c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic (d/dR, d/dC) of the selected transfer function.

    Kinks take derivative 0: the relu6 clip boundaries, d|R|/dR at R = 0, and
    the clamp on R*C for the exponential variants.
    """
    kind = ModulationKind.parse(kind)
    if kind is ModulationKind.COOPERATION:
        z = cooperation_preactivation(r, c)
        inside = (z > 0.0) & (z < 6.0)
        d_r = inside * (2.0 * r + 2.0 + c * np.sign(r))
        d_c = inside * (1.0 + np.abs(r))
        return d_r, d_c
    if kind is ModulationKind.TM2:
        return 1.0 + c + 0.0 * r, r + 0.0 * c

    rc = r * c
    live = np.abs(rc) < EXPONENT_CLAMP
    u = np.clip(rc, -EXPONENT_CLAMP, EXPONENT_CLAMP)
    if kind is ModulationKind.TM1:
        e = np.exp(u)
        return 0.5 * (1.0 + e) + live * 0.5 * r * c * e, live * 0.5 * r * r * e
    if kind is ModulationKind.TM3:
        t = np.tanh(u)
        sech2 = 1.0 - t * t
        return 1.0 + t + live * r * c * sech2, live * r * r * sech2
    p = np.exp2(u)
    return p + live * r * c * LN2 * p, live * r * r * LN2 * p


def transfer_with_partials(kind: ModulationKind, r: np.ndarray,
                           c: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Value and both partials in one pass; ``r`` may broadcast against ``c``.

    For Cooperation the pre-activation is computed once and the R-only terms
    stay at the (smaller) shape of ``r``.
    """
    kind = ModulationKind.parse(kind)
    if kind is not ModulationKind.COOPERATION:
        d_r, d_c = transfer_partials(kind, r, c)
        return transfer_values(kind, r, c), d_r, d_c
    gain = 1.0 + np.abs(r)
    z = c * gain
    z += r * r + 2.0 * r
    inside = (z > 0.0) & (z < 6.0)
    d_c = gain * inside
    d_r = c * np.sign(r)
    d_r += 2.0 * r + 2.0
    d_r *= inside
    np.clip(z, 0.0, 6.0, out=z)
    return z, d_r, d_c


def note_transfer_kinks(kind: ModulationKind, r: np.ndarray, c: np.ndarray) -> None:
    if kind is ModulationKind.COOPERATION and kinks_tracked():
        note_kinks(cooperation_preactivation(r, c), (0.0, 6.0))
        note_kinks(r, (0.0,))


def _check_pair(r: Tensor, c: Tensor, op: str) -> None:
    if r.shape != c.shape:
        raise DimensionError(op, r.shape, c.shape)


def transfer(kind: ModulationKind, R: Tensor, C: Tensor) -> Tensor:
    """Differentiable elementwise transfer function of the given kind."""
    kind = ModulationKind.parse(kind)
    _check_pair(R, C, kind.value)
    rv, cv = R.value, C.value
    note_transfer_kinks(kind, rv, cv)
    out = transfer_values(kind, rv, cv)

    def backward_fn(g):
        d_r, d_c = transfer_partials(kind, rv, cv)
        return g * d_r, g * d_c

    return Tensor._from_op(out, (R, C), backward_fn, kind.value)


def cooperate(R: Tensor, C: Tensor) -> Tensor:
    """relu6(R^2 + 2R + C(1 + |R|)), elementwise."""
    return transfer(ModulationKind.COOPERATION, R, C)


@dataclass
class FieldGrid:
    kind: ModulationKind
    r_axis: np.ndarray
    c_axis: np.ndarray
    value: np.ndarray       # value[i, j] at (r_axis[i], c_axis[j])
    dvalue_dR: np.ndarray
    dvalue_dC: np.ndarray

    def rows(self):
        for i, r in enumerate(self.r_axis):
            for j, c in enumerate(self.c_axis):
                yield float(r), float(c), float(self.value[i, j]), \
                    float(self.dvalue_dR[i, j]), float(self.dvalue_dC[i, j])


def sample_field(kind: ModulationKind, r_min: float, r_max: float,
                 c_min: float, c_max: float, steps: int) -> FieldGrid:
    """Sample a transfer function on an evenly spaced R x C grid.

    Partials are central differences at the grid step, evaluated off-grid so
    the edges of the grid get the same treatment as its interior.
    """
    kind = ModulationKind.parse(kind)
    if steps < 2:
        raise ParameterError(f"steps must be at least 2, got {steps}")
    if not r_max > r_min or not c_max > c_min:
        raise ParameterError(
            f"degenerate range R=[{r_min}, {r_max}], C=[{c_min}, {c_max}]")

    r_axis = np.linspace(r_min, r_max, steps)
    c_axis = np.linspace(c_min, c_max, steps)
    hr = (r_max - r_min) / (steps - 1)
    hc = (c_max - c_min) / (steps - 1)
    rr, cc = np.meshgrid(r_axis, c_axis, indexing="ij")

    value = transfer_values(kind, rr, cc)
    d_r = (transfer_values(kind, rr + hr, cc) - transfer_values(kind, rr - hr, cc)) / (2.0 * hr)
    d_c = (transfer_values(kind, rr, cc + hc) - transfer_values(kind, rr, cc - hc)) / (2.0 * hc)
    return FieldGrid(kind, r_axis, c_axis, value, d_r, d_c)


def write_field_csv(grid: FieldGrid, path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["R", "C", "value", "dR", "dC"])
        for row in grid.rows():
            writer.writerow([repr(x) for x in row])
    logger.info("wrote %d field samples for %s to %s",
                grid.value.size, grid.kind.value, path)
    return path
