"""Supervised training runs for the bAbI-style and CIFAR-10 tasks.

A run directory holds:
  config.json      the fully resolved TrainConfig
  metrics.csv      one MetricsRow per epoch (without wall-clock time)
  timing.csv       epoch, wall_ms
  grad_norms.csv   global gradient norm of every optimisation step
  checkpoint.co4   final weights
  samples.txt      a few validation stories with predictions (bAbI only)
"""

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from core.checkpoint import load_checkpoint, save_checkpoint
from core.co4_block import Co4BlockConfig, build_model
from core.errors import ContractError, DivergenceError, ParameterError
from core.metrics import accuracy, cross_entropy, macro_f1, predictions
from core.modulation import ModulationKind
from core.optim import SCHEDULES, AdamW, LRSchedule
from core.tensor import backward, no_grad
from utils import babi, cifar

logger = logging.getLogger(__name__)

TASKS = ("babi", "cifar")
CHECKPOINT_NAME = "checkpoint.co4"
METRICS_COLUMNS = ["epoch", "train_loss", "val_loss", "val_accuracy", "macro_f1", "lr"]

# short bAbI run that should at least halve the train loss in 10 epochs
SMOKE_PRESET = dict(samples=512, epochs=10, batch_size=8, lr=3e-3, dropout_p=0.0)


@dataclass
class TrainConfig:
    task: str = "babi"
    arch: str = "co4"
    modulation: ModulationKind = ModulationKind.COOPERATION
    epochs: int = 100
    batch_size: int = 64
    eval_batch_size: int = 256
    lr: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 1e-2
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "plateau"
    seed: int = 0
    # block
    embed_dim: int = 64
    latents: int = 4
    heads: int = 1
    layers: int = 1
    dropout_p: float = 0.1
    use_positional: bool = True
    # data
    samples: int = 10000
    max_tokens: int = 60
    data_dir: Optional[str] = None
    subset: int = 5000
    patch_size: int = 4
    augment: bool = True
    train_fraction: float = 0.8

    def __post_init__(self):
        self.modulation = ModulationKind.parse(self.modulation)
        self.betas = tuple(self.betas)

    @classmethod
    def for_task(cls, task: str, preset: Optional[str] = None, **overrides: Any) -> "TrainConfig":
        if preset not in (None, "smoke"):
            raise ParameterError(f"unknown preset '{preset}' (expected 'smoke')")
        if preset == "smoke" and task != "babi":
            raise ParameterError("the smoke preset is defined for the babi task only")
        if task == "babi":
            base = dict(task="babi", embed_dim=64, latents=4, schedule="plateau", epochs=100,
                        use_positional=True)
            if preset == "smoke":
                base.update(SMOKE_PRESET)
        elif task == "cifar":
            base = dict(task="cifar", embed_dim=256, latents=8, schedule="cosine", epochs=10,
                        use_positional=True)
        else:
            raise ParameterError(f"unknown task '{task}' (expected one of {', '.join(TASKS)})")
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)

    def validate(self) -> "TrainConfig":
        if self.task not in TASKS:
            raise ParameterError(f"unknown task '{self.task}'")
        if self.arch not in ("co4", "standard"):
            raise ParameterError(f"unknown architecture '{self.arch}'")
        if self.schedule not in SCHEDULES:
            raise ParameterError(f"unknown schedule '{self.schedule}'")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ParameterError("batch sizes must be >= 1")
        if self.lr <= 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if not 0 < self.train_fraction < 1:
            raise ParameterError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        self.block_config(num_classes=1)
        return self

    def block_config(self, num_classes: int) -> Co4BlockConfig:
        return Co4BlockConfig(embed_dim=self.embed_dim, latents=self.latents, heads=self.heads,
                              layers=self.layers, modulation=self.modulation,
                              dropout_p=self.dropout_p, use_positional=self.use_positional,
                              num_classes=num_classes).validate()

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["modulation"] = self.modulation.value
        data["betas"] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    macro_f1: float
    lr: float
    wall_ms: float = 0.0

    def csv_fields(self) -> List[str]:
        return [str(self.epoch), f"{self.train_loss:.6f}", f"{self.val_loss:.6f}",
                f"{self.val_accuracy:.6f}", f"{self.macro_f1:.6f}", f"{self.lr:.6g}"]


@dataclass
class TaskData:
    task: str
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    num_classes: int
    vocab: Optional[babi.Vocab] = None
    val_stories: List[babi.StorySample] = field(default_factory=list)
    class_names: List[str] = field(default_factory=list)


@dataclass
class TrainResult:
    run_dir: Path
    history: List[MetricsRow]
    grad_norms: List[float]
    checkpoint: Path
    model: Any
    initial_train_loss: float = float("nan")    # before the first update


def prepare_data(cfg: TrainConfig) -> TaskData:
    if cfg.task == "babi":
        story_cfg = babi.StoryConfig(max_tokens=cfg.max_tokens, seed=cfg.seed)
        stories, vocab = babi.generate_dataset(story_cfg, cfg.samples)
        train_idx, val_idx = babi.split_indices(len(stories), cfg.seed, cfg.train_fraction)
        ids = np.asarray([s.token_ids for s in stories], dtype=np.int64)
        answers = np.asarray([s.answer for s in stories], dtype=np.int64)
        return TaskData("babi", ids[train_idx], answers[train_idx], ids[val_idx], answers[val_idx],
                        len(story_cfg.places), vocab, [stories[i] for i in val_idx],
                        list(story_cfg.places))

    if not cfg.data_dir:
        raise FileNotFoundError("the CIFAR task needs --data-dir pointing at the binary batches")
    images, labels = cifar.load_cifar_dir(cfg.data_dir, "train")
    images, labels = images[:cfg.subset], labels[:cfg.subset]
    train_idx, val_idx = babi.split_indices(len(labels), cfg.seed, cfg.train_fraction)
    return TaskData("cifar", images[train_idx], labels[train_idx], images[val_idx], labels[val_idx],
                    cifar.NUM_CLASSES, class_names=list(cifar.LABEL_NAMES))


def build_task_model(cfg: TrainConfig, data: TaskData):
    block = cfg.block_config(data.num_classes)
    if data.task == "babi":
        return build_model(cfg.arch, block, vocab_size=len(data.vocab), num_tokens=cfg.max_tokens,
                           seed=cfg.seed)
    patches = (cifar.IMAGE_SIZE // cfg.patch_size) ** 2
    return build_model(cfg.arch, block, patch_dim=cfg.patch_size ** 2 * cifar.CHANNELS,
                       num_tokens=patches, seed=cfg.seed)


def _inputs(cfg: TrainConfig, data: TaskData, x: np.ndarray, indices: np.ndarray,
            epoch: int, training: bool) -> np.ndarray:
    if data.task == "babi":
        return x
    if training and cfg.augment:
        x = np.stack([cifar.augment(img, cfg.seed, epoch * len(data.train_y) + int(i))
                      for img, i in zip(x, indices)])
    return cifar.patchify_batch(x, cfg.patch_size)


def _loss_and_predictions(model, cfg: TrainConfig, data: TaskData, x: np.ndarray,
                          y: np.ndarray) -> Tuple[float, np.ndarray]:
    model.eval()
    total, preds = 0.0, []
    with no_grad():
        for start in range(0, len(y), cfg.eval_batch_size):
            batch = np.arange(start, min(start + cfg.eval_batch_size, len(y)))
            logits = model(_inputs(cfg, data, x[batch], batch, 0, training=False))
            total += cross_entropy(logits, y[batch]).item() * len(batch)
            preds.append(predictions(logits))
    preds = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    return total / max(len(y), 1), preds


def evaluate(model, cfg: TrainConfig, data: TaskData) -> Tuple[float, float, float, np.ndarray]:
    """Validation loss, accuracy, macro F1 and the predictions."""
    loss, preds = _loss_and_predictions(model, cfg, data, data.val_x, data.val_y)
    return loss, accuracy(preds, data.val_y), macro_f1(preds, data.val_y, data.num_classes), preds


def train_loss_at_rest(model, cfg: TrainConfig, data: TaskData) -> float:
    """Mean train-set loss in eval mode, without augmentation or dropout."""
    return _loss_and_predictions(model, cfg, data, data.train_x, data.train_y)[0]


def _global_norm(params) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))


def train(cfg: TrainConfig, out_dir: Union[str, Path], dry_run: bool = False,
          progress: bool = True, data: Optional[TaskData] = None) -> TrainResult:
    """Run the full loop and write the run directory.

    ``dry_run`` skips optimisation entirely: the history stays empty and the
    checkpoint holds the initial weights.
    """
    cfg.validate()
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)

    data = data or prepare_data(cfg)
    model = build_task_model(cfg, data)
    logger.info("%s/%s: %d parameters, %d train / %d val samples", cfg.task, cfg.arch,
                model.parameter_count(), len(data.train_y), len(data.val_y))

    params = model.parameters()
    optimizer = AdamW(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    schedule = LRSchedule(cfg.schedule, cfg.lr, cfg.epochs, cfg.lr_min)
    history: List[MetricsRow] = []
    grad_norms: List[float] = []
    epochs = 0 if dry_run else cfg.epochs
    initial_loss = train_loss_at_rest(model, cfg, data) if epochs else float("nan")
    if epochs:
        logger.info("initial train loss %.4f", initial_loss)

    bar = tqdm(range(epochs), desc=f"{cfg.task}/{cfg.arch}", disable=not progress)
    for epoch in bar:
        started = time.perf_counter()
        model.train()
        lr = schedule.lr
        optimizer.lr = lr
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data.train_y))
        losses, counts = [], []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            last_norm = grad_norms[-1] if grad_norms else None
            try:
                logits = model(_inputs(cfg, data, data.train_x[batch], batch, epoch, training=True))
                loss = cross_entropy(logits, data.train_y[batch])
                optimizer.zero_grad()
                backward(loss)
                norm = _global_norm(params)
                if not np.isfinite(norm):
                    raise DivergenceError(epoch, step, loss.item(), last_norm)
                optimizer.step()
            except ContractError as e:
                raise DivergenceError(epoch, step, float("nan"), last_norm) from e
            grad_norms.append(norm)
            losses.append(loss.item())
            counts.append(len(batch))

        train_loss = float(np.average(losses, weights=counts))
        val_loss, val_acc, f1, _ = evaluate(model, cfg, data)
        row = MetricsRow(epoch, train_loss, val_loss, val_acc, f1, lr,
                         (time.perf_counter() - started) * 1000.0)
        history.append(row)
        schedule.step(val_loss)
        bar.set_postfix(loss=f"{train_loss:.3f}", acc=f"{val_acc:.3f}")
        logger.info("epoch %d: train_loss %.4f val_loss %.4f acc %.4f macro_f1 %.4f lr %.3g",
                    epoch, train_loss, val_loss, val_acc, f1, lr)

    checkpoint = save_checkpoint(model, run_dir / CHECKPOINT_NAME,
                                 {"task": cfg.task, "epochs_run": len(history)})
    write_run_files(run_dir, history, grad_norms)
    if data.task == "babi" and data.val_stories:
        write_samples(run_dir / "samples.txt", model, cfg, data)
    return TrainResult(run_dir, history, grad_norms, checkpoint, model, initial_loss)


def write_run_files(run_dir: Path, history: Sequence[MetricsRow], grad_norms: Sequence[float]) -> None:
    with open(run_dir / "metrics.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for row in history:
            writer.writerow(row.csv_fields())
    with open(run_dir / "timing.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "wall_ms"])
        for row in history:
            writer.writerow([row.epoch, f"{row.wall_ms:.1f}"])
    with open(run_dir / "grad_norms.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "grad_norm"])
        for step, norm in enumerate(grad_norms):
            writer.writerow([step, f"{norm:.6g}"])


def write_samples(path: Path, model, cfg: TrainConfig, data: TaskData, count: int = 5) -> None:
    count = min(count, len(data.val_stories))
    _, _, _, preds = evaluate(model, cfg, data)
    with open(path, "w", encoding="utf-8") as f:
        for story, pred in zip(data.val_stories[:count], preds[:count]):
            f.write("\n".join(f"{i + 1} {s}." for i, s in enumerate(story.sentences)) + "\n")
            f.write(f"Q: {story.question}\n")
            f.write(f"A: {story.answer_text}  predicted: {data.class_names[int(pred)]}\n\n")


def load_run(run_dir: Union[str, Path], data: Optional[TaskData] = None):
    """Rebuild the model of a finished run and load its checkpoint."""
    run_dir = Path(run_dir)
    with open(run_dir / "config.json", encoding="utf-8") as f:
        cfg = TrainConfig.from_dict(json.load(f))
    data = data or prepare_data(cfg)
    model = build_task_model(cfg, data)
    load_checkpoint(model, run_dir / CHECKPOINT_NAME)
    return cfg, data, model
