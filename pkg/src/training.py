"""
Training loop for the two-stage schedule: pretraining on traffic-light and motion tokens, then finetuning
with the agent-state heads enabled. Handles checkpoints, loss curves and teacher-forced accuracy.
"""
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from src.console import console
from src.errors import ConfigurationError, NumericError
from src.map_codec import segment_polylines
from src.model import HEADS, ModelConfig, SceneStreamerModel, SequenceBatch, loss
from src.sequence_builder import build_sequence

STAGES = ("pretrain", "finetune")
STAGE_MODE = {"pretrain": "pretrain", "finetune": "full"}


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.0
    warmup_steps: int = 2000
    total_steps: int = 5000
    grad_clip: float = 1.0
    log_every: int = 50
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"training.lr: must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"training.weight_decay: must be >= 0, got {self.weight_decay}")
        if self.warmup_steps < 0:
            raise ConfigurationError(f"training.warmup_steps: must be >= 0, got {self.warmup_steps}")
        if self.total_steps < 1:
            raise ConfigurationError(f"training.total_steps: must be >= 1, got {self.total_steps}")
        if self.grad_clip <= 0:
            raise ConfigurationError(f"training.grad_clip: must be > 0, got {self.grad_clip}")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigurationError("training.log_every and training.checkpoint_every must be >= 1")


def lr_factor(step, warmup_steps, total_steps):
    """
    Linear warmup from 0 to 1 over `warmup_steps`, then cosine decay to 0 at `total_steps`.
    """
    if warmup_steps > 0 and step < warmup_steps:
        return step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def build_optimizer(model, config):
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: lr_factor(step, config.warmup_steps, config.total_steps))
    return optimizer, scheduler


def prepare_batches(scenarios, stage, model_config, tokenizer=None, ranges=None):
    """
    Segment, tokenize and tensorize scenarios for a training stage.

    Parameters:
    - scenarios (list of ScenarioDescription): Training corpus.
    - stage (str): "pretrain" or "finetune".
    - model_config (ModelConfig): Model configuration.
    - tokenizer (TokenizerConfig): Segmenting and agent-cap options; defaults when None.
    - ranges (FieldRanges): Relative-state quantizer table.

    Returns:
    - list of SequenceBatch
    """
    if stage not in STAGES:
        raise ConfigurationError(f"unknown stage '{stage}', expected one of {STAGES}")
    batches = []
    for scenario in scenarios:
        if tokenizer is None:
            segments = segment_polylines(scenario)
            n_max = None
        else:
            segments = segment_polylines(scenario, max_length=tokenizer.segment_length,
                                         max_records=tokenizer.points_per_segment,
                                         max_segments=tokenizer.max_segments)
            n_max = tokenizer.max_agents
        sequence = build_sequence(scenario, segments, STAGE_MODE[stage], n_max=n_max, ranges=ranges)
        batches.append(SequenceBatch.from_sequence(sequence, segments, model_config))
    console.print(f"[success]{len(batches)} sequences prepared for {stage}.[/success]", style="success")
    return batches


def save_checkpoint(path, model, optimizer=None, scheduler=None, step=0, stage="pretrain", train_config=None):
    """
    Write a torch archive with the model configuration, parameters, optimizer and scheduler state,
    the step counter and the torch RNG state.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "config": model.config.to_dict(),
        "train_config": None if train_config is None else asdict(train_config),
        "stage": stage,
        "step": int(step),
        "model": model.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "scheduler": None if scheduler is None else scheduler.state_dict(),
        "rng": torch.get_rng_state(),
    }, path)
    return path


def load_checkpoint(path, expected_config=None):
    """
    Load a checkpoint archive.

    Parameters:
    - path (str or Path): Archive path.
    - expected_config (ModelConfig): When given, the stored configuration must match it.

    Returns:
    - tuple: (model, archive dict).
    """
    try:
        archive = torch.load(Path(path), map_location="cpu")
    except (OSError, RuntimeError) as e:
        console.print(f"[error]Error loading checkpoint {path}: {e}[/error]", style="error")
        raise ConfigurationError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(archive, dict) or "config" not in archive or "model" not in archive:
        raise ConfigurationError(f"{path} is not a model checkpoint")
    config = ModelConfig.from_dict(archive["config"])
    if expected_config is not None and config != expected_config:
        raise ConfigurationError(f"checkpoint {path} was trained with a different model configuration")
    model = SceneStreamerModel(config)
    try:
        model.load_state_dict(archive["model"])
    except RuntimeError as e:
        raise ConfigurationError(f"checkpoint {path} does not match the model layout: {e}") from e
    console.print(f"[success]Checkpoint loaded from {path} (stage {archive.get('stage')}, "
                  f"step {archive.get('step')}).[/success]", style="success")
    return model, archive


def train(batches, stage, model=None, model_config=None, config=None, checkpoint_path=None, resume=None,
          init_from=None, show_progress=True):
    """
    Optimize the model on prepared batches, one sequence per optimizer step in a fixed cyclic order.

    Parameters:
    - batches (list of SequenceBatch): Training sequences for the stage.
    - stage (str): "pretrain" or "finetune".
    - model (SceneStreamerModel): Model to train; built from model_config when None.
    - model_config (ModelConfig): Used when neither model, resume nor init_from is given.
    - config (TrainConfig): Optimizer and schedule options.
    - checkpoint_path (str or Path): Where periodic and final checkpoints go.
    - resume (str or Path): Continue from a checkpoint (model, optimizer, scheduler, step).
    - init_from (str or Path): Initialize weights from a checkpoint with a fresh optimizer (finetuning).
    - show_progress (bool): Show a rich progress bar.

    Returns:
    - tuple: (model, history DataFrame with step, lr, total and per-head means).
    """
    if stage not in STAGES:
        raise ConfigurationError(f"unknown stage '{stage}', expected one of {STAGES}")
    if not batches:
        raise ConfigurationError("no training sequences")
    config = config or TrainConfig()
    torch.manual_seed(config.seed)
    start = 0
    archive = None
    if resume is not None:
        model, archive = load_checkpoint(resume)
    elif init_from is not None:
        model, _ = load_checkpoint(init_from)
    elif model is None:
        model = SceneStreamerModel(model_config or ModelConfig())

    optimizer, scheduler = build_optimizer(model, config)
    if archive is not None:
        if archive.get("optimizer") is not None:
            optimizer.load_state_dict(archive["optimizer"])
        if archive.get("scheduler") is not None:
            scheduler.load_state_dict(archive["scheduler"])
        start = int(archive.get("step", 0))
        torch.set_rng_state(archive["rng"])

    model.train()
    history = []
    progress = Progress(TextColumn("[info]{task.description}"), BarColumn(), TextColumn("{task.completed}/{task.total}"),
                        TimeElapsedColumn(), console=console, disable=not show_progress)
    with progress:
        task = progress.add_task(f"{stage}", total=config.total_steps, completed=start)
        for step in range(start, config.total_steps):
            batch = batches[step % len(batches)]
            optimizer.zero_grad()
            objective, report = loss(model(batch))
            if not torch.isfinite(objective):
                details = ", ".join(f"{name}={values['mean']:.4g}" for name, values in report.items())
                console.print(f"[error]Non-finite loss at step {step}: {details}[/error]", style="error")
                raise NumericError(f"loss became {float(objective)} at step {step} ({details})")
            objective.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            lr = optimizer.param_groups[0]["lr"]
            optimizer.step()
            scheduler.step()
            history.append({"step": step, "lr": lr, "total": float(objective.detach()),
                            **{name: report[name]["mean"] for name in HEADS}})
            progress.update(task, advance=1)
            if (step + 1) % config.log_every == 0:
                progress.console.print(f"[info]step {step + 1}: loss {history[-1]['total']:.4f}[/info]")
            if checkpoint_path is not None and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, model, optimizer, scheduler, step + 1, stage, config)

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, optimizer, scheduler, config.total_steps, stage, config)
        console.print(f"[success]Checkpoint saved at {checkpoint_path}.[/success]", style="success")
    model.eval()
    return model, pd.DataFrame(history, columns=["step", "lr", "total", *HEADS])


@torch.no_grad()
def evaluate_accuracy(model, batches):
    """
    Teacher-forced next-token accuracy per head (argmax against the target; relative-state bins count
    individually). Heads without targets are reported as NaN.
    """
    was_training = model.training
    model.eval()
    hits = {name: 0 for name in HEADS}
    counts = {name: 0 for name in HEADS}
    for batch in batches:
        for name, (logits, targets) in model(batch).items():
            if targets.numel() == 0:
                continue
            predicted = logits.argmax(dim=-1)
            hits[name] += int((predicted == targets).sum())
            counts[name] += int(targets.numel())
    model.train(was_training)
    return {name: hits[name] / counts[name] if counts[name] else float("nan") for name in HEADS}


def write_loss_csv(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history.to_csv(path, index=False)
    console.print(f"[success]Loss curve written to {path}.[/success]", style="success")
    return path


def display_losses(history, accuracy=None):
    """
    Print the final per-head losses (and accuracies when given) as a table.
    """
    table = Table(title="Per-head training summary", show_lines=True)
    table.add_column("Head", justify="left", style="info")
    table.add_column("Final loss", justify="center", style="highlight")
    if accuracy is not None:
        table.add_column("Accuracy", justify="center")
    last = history.iloc[-1] if len(history) else None
    for name in HEADS:
        value = "-" if last is None else f"{last[name]:.4f}"
        row = [name, value]
        if accuracy is not None:
            row.append("-" if np.isnan(accuracy[name]) else f"{accuracy[name]:.3f}")
        table.add_row(*row)
    console.print(table)
