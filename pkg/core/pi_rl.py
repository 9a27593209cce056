"""Permutation-invariant sensory layer, a cart-pole balance task and a Gaussian ES trainer.

Every observation component is an independent "sensor".  Sensor i only sees
O[i] (plus the previous action for its key), so reordering the sensors
permutes the keys and values but leaves the fixed latent queries alone; the
attention pool over sensors is therefore order-free.

Everything here runs on plain numpy arrays: ES needs no gradients.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from core.co4_block import triadic_forward
from core.errors import ContractError, DimensionError, ParameterError
from core.modulation import ModulationKind

logger = logging.getLogger(__name__)

ENCODERS = ("standard", "co4", "tm1", "tm2", "tm3", "tm4")


# --- cart-pole ---

@dataclass
class CartPoleConfig:
    gravity: float = 9.8
    mass_cart: float = 1.0
    mass_pole: float = 0.1
    half_length: float = 0.5
    dt: float = 0.02
    force_mag: float = 10.0
    x_limit: float = 2.4
    theta_limit_deg: float = 12.0
    max_steps: int = 1000
    init_noise: float = 0.05

    def validate(self) -> "CartPoleConfig":
        for name in ("gravity", "mass_cart", "mass_pole", "half_length", "dt", "force_mag",
                     "x_limit", "theta_limit_deg"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_steps < 1:
            raise ParameterError(f"max_steps must be >= 1, got {self.max_steps}")
        return self

    @property
    def theta_limit(self) -> float:
        return math.radians(self.theta_limit_deg)


@dataclass(frozen=True)
class CartPoleState:
    x: float = 0.0
    x_dot: float = 0.0
    theta: float = 0.0
    theta_dot: float = 0.0
    step_count: int = 0
    terminated: bool = False

    def observation(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot])


def out_of_bounds(state: CartPoleState, cfg: CartPoleConfig) -> bool:
    return abs(state.x) > cfg.x_limit or abs(state.theta) > cfg.theta_limit


def cartpole_step(state: CartPoleState, force: float,
                  cfg: Optional[CartPoleConfig] = None) -> CartPoleState:
    """One explicit Euler step of the classic cart-pole; ``force`` is clipped to +/-force_mag newtons."""
    cfg = cfg or CartPoleConfig()
    if state.terminated:
        raise ContractError(f"cart-pole state already terminated at step {state.step_count}")
    force = float(np.clip(force, -cfg.force_mag, cfg.force_mag))

    total_mass = cfg.mass_cart + cfg.mass_pole
    pole_moment = cfg.mass_pole * cfg.half_length
    cos_t, sin_t = math.cos(state.theta), math.sin(state.theta)
    temp = (force + pole_moment * state.theta_dot ** 2 * sin_t) / total_mass
    theta_acc = (cfg.gravity * sin_t - cos_t * temp) / (
        cfg.half_length * (4.0 / 3.0 - cfg.mass_pole * cos_t ** 2 / total_mass))
    x_acc = temp - pole_moment * theta_acc * cos_t / total_mass

    nxt = CartPoleState(
        x=state.x + cfg.dt * state.x_dot,
        x_dot=state.x_dot + cfg.dt * x_acc,
        theta=state.theta + cfg.dt * state.theta_dot,
        theta_dot=state.theta_dot + cfg.dt * theta_acc,
        step_count=state.step_count + 1,
    )
    done = out_of_bounds(nxt, cfg) or nxt.step_count >= cfg.max_steps
    return replace(nxt, terminated=done)


def initial_state(rng: np.random.Generator, cfg: CartPoleConfig) -> CartPoleState:
    x, x_dot, theta, theta_dot = rng.uniform(-cfg.init_noise, cfg.init_noise, 4)
    return CartPoleState(float(x), float(x_dot), float(theta), float(theta_dot))


# --- sensory encoder ---

@dataclass
class SensoryObs:
    components: np.ndarray      # (N,) one reading per sensor
    prev_action: float = 0.0

    def __post_init__(self):
        self.components = np.asarray(self.components, dtype=np.float64).reshape(-1)
        if not np.isfinite(self.components).all() or not math.isfinite(self.prev_action):
            raise ContractError("sensory observation contains non-finite values")

    def permuted(self, order: Sequence[int]) -> "SensoryObs":
        return SensoryObs(self.components[np.asarray(order)], self.prev_action)


@dataclass
class PIEncoderConfig:
    sensors: int = 4
    width: int = 16
    latents: int = 4
    encoder: str = "co4"

    def validate(self) -> "PIEncoderConfig":
        if self.encoder not in ENCODERS:
            raise ParameterError(f"unknown encoder '{self.encoder}' (expected one of {', '.join(ENCODERS)})")
        for name in ("sensors", "width", "latents"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        return self

    @property
    def modulation(self) -> Optional[ModulationKind]:
        if self.encoder == "standard":
            return None
        return ModulationKind.COOPERATION if self.encoder == "co4" else ModulationKind.parse(self.encoder)

    def layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        d = self.width
        return [
            ("key_map.weight", (2, d)), ("key_map.bias", (d,)),
            ("value_map.weight", (1, d)), ("value_map.bias", (d,)),
            ("latents", (self.latents, d)),
            ("q_proj", (d, d)), ("k_proj", (d, d)), ("v_proj", (d, d)),
            ("head.weight", (self.latents * d,)), ("head.bias", ()),
        ]

    def genome_size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout())


@dataclass
class Genome:
    params: np.ndarray
    fitness: Optional[float] = None

    def unpack(self, cfg: PIEncoderConfig) -> Dict[str, np.ndarray]:
        if self.params.size != cfg.genome_size():
            raise DimensionError("genome", [self.params.size], [cfg.genome_size()])
        out, offset = {}, 0
        for name, shape in cfg.layout():
            n = int(np.prod(shape))
            out[name] = self.params[offset:offset + n].reshape(shape)
            offset += n
        return out


def init_genome(cfg: PIEncoderConfig, seed: Union[int, Sequence[int]], scale: float = 0.5) -> Genome:
    """N(0, scale) everywhere except the head weight, which starts at 1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    genome = Genome(rng.normal(0.0, scale, cfg.validate().genome_size()))
    head = genome.unpack(cfg)["head.weight"]   # a view into genome.params
    head[...] = rng.normal(0.0, 1.0 / math.sqrt(head.size), head.shape)
    return genome


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def pi_encode(obs: SensoryObs, genome: Genome, cfg: PIEncoderConfig) -> np.ndarray:
    """Message of shape (latents, width) pooled over all sensors."""
    if obs.components.size != cfg.sensors:
        raise DimensionError("pi_encode", [obs.components.size], [cfg.sensors])
    p = genome.unpack(cfg)
    readings = obs.components[:, None]
    key_in = np.concatenate([readings, np.full_like(readings, obs.prev_action)], axis=1)
    keys = np.tanh(key_in @ p["key_map.weight"] + p["key_map.bias"]) @ p["k_proj"]
    values = np.tanh(readings @ p["value_map.weight"] + p["value_map.bias"]) @ p["v_proj"]
    queries = p["latents"] @ p["q_proj"]

    kind = cfg.modulation
    if kind is not None:
        queries, keys, values, _ = triadic_forward(queries, keys, values, kind)
    weights = _softmax(queries @ keys.T / math.sqrt(cfg.width))
    return weights @ values


def _normalize_rows(message: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    centered = message - message.mean(axis=-1, keepdims=True)
    return centered / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)


def act(obs: SensoryObs, genome: Genome, cfg: PIEncoderConfig) -> float:
    """Action in [-1, 1] from the flattened, per-latent normalized message.

    Cooperation messages sit in [0, 6]; without the normalization the head
    sees a large common offset and tanh saturates.
    """
    p = genome.unpack(cfg)
    message = _normalize_rows(pi_encode(obs, genome, cfg)).reshape(-1)
    return float(np.tanh(message @ p["head.weight"] + p["head.bias"]))


def rollout(genome: Genome, seed: Union[int, Sequence[int]], cfg: Optional[PIEncoderConfig] = None,
            env: Optional[CartPoleConfig] = None, order: Optional[Sequence[int]] = None) -> int:
    """Survival steps of one episode; ``order`` reorders the sensors fed to the encoder."""
    cfg = (cfg or PIEncoderConfig()).validate()
    env = (env or CartPoleConfig()).validate()
    rng = np.random.default_rng(seed)
    state = initial_state(rng, env)
    action = 0.0
    while not state.terminated:
        obs = SensoryObs(state.observation(), action)
        if order is not None:
            obs = obs.permuted(order)
        action = act(obs, genome, cfg)
        state = cartpole_step(state, env.force_mag * action, env)
    return state.step_count


def evaluate(genome: Genome, episodes: int, seed: int, cfg: Optional[PIEncoderConfig] = None,
             env: Optional[CartPoleConfig] = None, shuffle: bool = False) -> Tuple[float, float]:
    """Mean and std of fitness over ``episodes``; ``shuffle`` draws a fresh sensor order per episode."""
    cfg = (cfg or PIEncoderConfig()).validate()
    scores = []
    for episode in range(episodes):
        order = None
        if shuffle:
            order = np.random.default_rng([seed, episode, 1]).permutation(cfg.sensors)
        scores.append(rollout(genome, [seed, episode], cfg, env, order))
    return float(np.mean(scores)), float(np.std(scores))


def random_baseline(count: int, seed: int, cfg: Optional[PIEncoderConfig] = None,
                    env: Optional[CartPoleConfig] = None) -> float:
    """Monte-Carlo mean fitness of freshly drawn random genomes."""
    cfg = (cfg or PIEncoderConfig()).validate()
    return float(np.mean([rollout(init_genome(cfg, [seed, i]), [seed, i, 2], cfg, env)
                          for i in range(count)]))


# --- evolution strategies ---

@dataclass
class ESConfig:
    population: int = 32
    generations: int = 20
    sigma: float = 0.1
    elite_fraction: float = 0.25
    episodes: int = 3
    seed: int = 0
    encoder: PIEncoderConfig = field(default_factory=PIEncoderConfig)
    env: CartPoleConfig = field(default_factory=CartPoleConfig)

    def validate(self) -> "ESConfig":
        if self.population < 4:
            raise ParameterError(f"population must be >= 4, got {self.population}")
        if self.generations < 1:
            raise ParameterError(f"generations must be >= 1, got {self.generations}")
        if self.sigma < 0:
            raise ParameterError(f"sigma must be >= 0, got {self.sigma}")
        if not 0 < self.elite_fraction <= 1:
            raise ParameterError(f"elite_fraction must lie in (0, 1], got {self.elite_fraction}")
        if self.episodes < 1:
            raise ParameterError(f"episodes must be >= 1, got {self.episodes}")
        self.encoder.validate()
        self.env.validate()
        return self

    @property
    def elite(self) -> int:
        return max(1, int(self.population * self.elite_fraction))

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "ESConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown ES config keys: {sorted(unknown)}")
        data = dict(data)
        data["encoder"] = PIEncoderConfig(**data.get("encoder", {}))
        data["env"] = CartPoleConfig(**data.get("env", {}))
        return cls(**data).validate()


@dataclass
class CurveRow:
    generation: int
    best: float     # best fitness seen so far
    mean: float
    std: float


@dataclass
class ESResult:
    best: Genome
    curve: List[CurveRow]
    mean: np.ndarray    # search mean after the last generation


def _fitness(genome: Genome, cfg: ESConfig, stream: Sequence[int]) -> float:
    # episode starts are keyed by (seed, generation, member, episode)
    scores = [rollout(genome, [*stream, episode], cfg.encoder, cfg.env)
              for episode in range(cfg.episodes)]
    return float(np.mean(scores))


def es_train(cfg: ESConfig, progress: bool = True) -> ESResult:
    """(mu, lambda) Gaussian ES: move the mean to the average of the fitness-ranked elite."""
    cfg.validate()
    mean = init_genome(cfg.encoder, cfg.seed).params
    best = Genome(mean.copy(), _fitness(Genome(mean), cfg, (cfg.seed,)))
    curve: List[CurveRow] = []

    bar = tqdm(range(cfg.generations), desc=f"es/{cfg.encoder.encoder}", disable=not progress)
    for generation in bar:
        candidates, scores = [], []
        for member in range(cfg.population):
            noise = np.random.default_rng([cfg.seed, generation, member]).standard_normal(mean.size)
            candidate = Genome(mean + cfg.sigma * noise)
            candidate.fitness = _fitness(candidate, cfg, (cfg.seed, generation, member))
            candidates.append(candidate)
            scores.append(candidate.fitness)

        scores_arr = np.asarray(scores)
        ranked = np.argsort(-scores_arr, kind="stable")
        mean = np.mean([candidates[i].params for i in ranked[:cfg.elite]], axis=0)
        leader = candidates[ranked[0]]
        if leader.fitness > best.fitness:
            best = Genome(leader.params.copy(), leader.fitness)

        row = CurveRow(generation, best.fitness, float(scores_arr.mean()), float(scores_arr.std()))
        curve.append(row)
        bar.set_postfix(best=f"{row.best:.0f}", mean=f"{row.mean:.1f}")
        logger.info("generation %d: best %.1f mean %.1f std %.1f",
                    generation, row.best, row.mean, row.std)
    return ESResult(best, curve, mean)


def write_curve_csv(curve: Sequence[CurveRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["generation", "best", "mean", "std"])
        for row in curve:
            writer.writerow([row.generation, f"{row.best:.6f}", f"{row.mean:.6f}", f"{row.std:.6f}"])
    logger.info("wrote %d generations to %s", len(curve), path)
    return path


def write_baseline_json(path: Union[str, Path], baseline: float, count: int, seed: int,
                        encoder: str) -> Path:
    """Record the random-genome reference next to an ES curve."""
    path = Path(path)
    record = {"encoder": encoder, "genomes": count, "seed": seed, "mean_fitness": baseline}
    path.write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    logger.info("random-genome baseline %.2f over %d genomes written to %s", baseline, count, path)
    return path
