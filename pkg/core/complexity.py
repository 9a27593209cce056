"""Closed-form MAC models and an instrumented counter for attention layers.

Only matmul multiply-accumulates count toward the dominant terms.  Elementwise
work (modulation, softmax, layer norm) is itemised separately as the extra
term, and bias additions are not counted at all.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from core.co4_block import Co4BlockConfig, Co4Layer, StandardLayer
from core.errors import ContractError, ParameterError
from core.modulation import ModulationKind
from core.tensor import Tensor, count_macs, instrumentation_enabled, no_grad

logger = logging.getLogger(__name__)

COUNTING_CONVENTION = "matmul MACs only; bias additions excluded; elementwise work reported as extra"

# term -> (counter scopes that realise it, how many matmuls of that size the layer performs)
TERM_LAYOUT: Dict[str, Dict[str, Tuple[Tuple[str, ...], int]]] = {
    "standard": {
        "P*E^2": (("projection_q", "projection_kv"), 3),
        "P^2*E": (("attention",), 2),
    },
    "co4": {
        "L_q*E^2": (("projection_q",), 1),
        "P*E^2": (("projection_kv",), 2),
        "L_q*P*E": (("attention",), 2),
    },
}


def _require_positive(**values: int) -> None:
    for name, value in values.items():
        if int(value) != value or value < 1:
            raise ParameterError(f"{name} must be a positive integer, got {value}")


def standard_terms(P: int, E: int, layers: int) -> Dict[str, int]:
    _require_positive(P=P, E=E, layers=layers)
    return {"P*E^2": layers * P * E * E, "P^2*E": layers * P * P * E}


def co4_terms(P: int, E: int, layers: int, L_q: int) -> Dict[str, int]:
    _require_positive(P=P, E=E, layers=layers, L_q=L_q)
    if L_q > P:
        logger.warning("L_q=%d exceeds P=%d; the latent bottleneck no longer saves work", L_q, P)
    return {"L_q*E^2": layers * L_q * E * E, "P*E^2": layers * P * E * E,
            "L_q*P*E": layers * L_q * P * E}


def macs_standard(P: int, E: int, layers: int) -> int:
    """layers * (P*E^2 + P^2*E)."""
    return sum(standard_terms(P, E, layers).values())


def macs_co4(P: int, E: int, layers: int, L_q: int) -> int:
    """layers * (L_q*E^2 + P*E^2 + L_q*P*E)."""
    return sum(co4_terms(P, E, layers, L_q).values())


@dataclass
class MacReport:
    arch: str
    shape: Dict[str, int]
    closed_form: int
    measured: int
    elementwise_extra: int
    breakdown: Dict[str, Dict[str, int]] = field(default_factory=dict)
    elementwise: Dict[str, int] = field(default_factory=dict)
    convention: str = COUNTING_CONVENTION
    # closed form with each term scaled by its multiplicity; what `measured` should equal
    weighted_closed_form: int = 0

    def terms_match(self) -> bool:
        """True when every measured term equals multiplicity x its closed form."""
        return all(t["measured"] == t["multiplicity"] * t["closed_form"]
                   for t in self.breakdown.values())

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def closed_form_report(arch: str, P: int, E: int, layers: int, L_q: Optional[int] = None) -> MacReport:
    if arch == "standard":
        terms = standard_terms(P, E, layers)
        shape = {"P": P, "E": E, "layers": layers}
    elif arch == "co4":
        if L_q is None:
            raise ParameterError("co4 MACs need the latent count L_q")
        terms = co4_terms(P, E, layers, L_q)
        shape = {"P": P, "E": E, "layers": layers, "L_q": L_q}
    else:
        raise ParameterError(f"unknown architecture '{arch}'")
    breakdown = {name: {"closed_form": value, "multiplicity": TERM_LAYOUT[arch][name][1], "measured": 0}
                 for name, value in terms.items()}
    weighted = sum(t["multiplicity"] * t["closed_form"] for t in breakdown.values())
    return MacReport(arch, shape, sum(terms.values()), 0, 0, breakdown,
                     weighted_closed_form=weighted)


def measure(model_run: Callable[[], Any], arch: str, P: int, E: int, layers: int,
            L_q: Optional[int] = None) -> MacReport:
    """Run ``model_run`` under the MAC counter and compare with the closed form."""
    if not instrumentation_enabled():
        raise ContractError("MAC measurement unavailable: instrumentation is disabled")
    report = closed_form_report(arch, P, E, layers, L_q)
    with no_grad(), count_macs() as counter:
        model_run()

    for name, (scopes, _) in TERM_LAYOUT[arch].items():
        report.breakdown[name]["measured"] = sum(counter.matmul.get(s, 0) for s in scopes)
    report.measured = counter.total_matmul
    report.elementwise = dict(sorted(counter.elementwise.items()))
    report.elementwise_extra = counter.total_elementwise
    return report


def layer_stack_run(arch: str, P: int, E: int, layers: int, L_q: int = 8, heads: int = 1,
                    modulation: ModulationKind = ModulationKind.COOPERATION,
                    seed: int = 0) -> Callable[[], Tensor]:
    """A single-item forward pass through ``layers`` freshly initialised layers."""
    cfg = Co4BlockConfig(embed_dim=E, latents=L_q, heads=heads, layers=layers,
                         modulation=modulation, dropout_p=0.0).validate()
    rng = np.random.default_rng(seed)
    tokens = Tensor(rng.normal(0.0, 1.0, (1, P, E)))
    if arch == "co4":
        stack = [Co4Layer(cfg, rng) for _ in range(layers)]
        latents = Tensor(rng.normal(0.0, 1.0, (1, L_q, E)))

        def run() -> Tensor:
            x = latents
            for layer in stack:
                x = layer(x, tokens)
            return x
    elif arch == "standard":
        stack = [StandardLayer(cfg, rng) for _ in range(layers)]

        def run() -> Tensor:
            x = tokens
            for layer in stack:
                x = layer(x)
            return x
    else:
        raise ParameterError(f"unknown architecture '{arch}'")
    return run


def measure_layers(arch: str, P: int, E: int, layers: int = 1, L_q: int = 8,
                   heads: int = 1, modulation: ModulationKind = ModulationKind.COOPERATION,
                   seed: int = 0) -> MacReport:
    run = layer_stack_run(arch, P, E, layers, L_q, heads, modulation, seed)
    return measure(run, arch, P, E, layers, L_q if arch == "co4" else None)


def scaling_slope(arch: str, ns: Sequence[int], E: int, layers: int = 1, L_q: int = 8) -> float:
    """Least-squares slope of log(measured MACs) against log(N)."""
    if len(ns) < 2:
        raise ParameterError("scaling_slope needs at least two sequence lengths")
    measured = [measure_layers(arch, n, E, layers, L_q).measured for n in ns]
    slope, _ = np.polyfit(np.log(np.asarray(ns, dtype=float)), np.log(np.asarray(measured, dtype=float)), 1)
    logger.debug("%s measured MACs %s over N=%s -> slope %.4f", arch, measured, list(ns), slope)
    return float(slope)
