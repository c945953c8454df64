import numpy as np
import pandas as pd
import pytest
import torch
from src.errors import ConfigurationError, NumericError
from src.model import HEADS, ModelConfig
from src.scenario_synth import synth_corpus
from src.training import (
    TrainConfig, evaluate_accuracy, load_checkpoint, lr_factor, prepare_batches, save_checkpoint, train,
    write_loss_csv,
)


def tiny_config():
    return ModelConfig(d_model=16, heads=2, encoder_layers=1, decoder_layers=1, rs_head_layers=1, relative_dim=4,
                       max_segments=512, max_agents=16)


@pytest.fixture
def sample_corpus():
    """Two short straight-road scenarios."""
    return synth_corpus("straight", 2, 3, seed=0)


@pytest.fixture
def pretrain_batches(sample_corpus):
    return prepare_batches(sample_corpus, "pretrain", tiny_config())


def test_lr_schedule():
    assert lr_factor(1000, 2000, 5000) == pytest.approx(0.5), "Halfway through warmup"
    assert lr_factor(2000, 2000, 5000) == pytest.approx(1.0)
    assert lr_factor(3500, 2000, 5000) == pytest.approx(0.5), "Halfway through the cosine decay"
    assert lr_factor(5000, 2000, 5000) == pytest.approx(0.0)
    assert lr_factor(9000, 2000, 5000) == pytest.approx(0.0)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(total_steps=0)


def test_pretrain_targets(pretrain_batches):
    batch = pretrain_batches[0]
    for name in ("type", "map_id", "rs", "next"):
        assert batch.targets[name].numel() == 0, f"Pretraining carries no {name} targets"
    assert batch.targets["motion"].numel() == 3 * 18, "Three agents with 18 motion targets each"


def test_finetune_targets(sample_corpus):
    batch = prepare_batches(sample_corpus, "finetune", tiny_config())[0]
    assert batch.targets["rs"].shape == (3 * 19, 8)
    assert batch.targets["next"].numel() == 19 + 3 * 19


def test_unknown_stage(sample_corpus):
    with pytest.raises(ConfigurationError):
        prepare_batches(sample_corpus, "distill", tiny_config())


def test_loss_decreases(pretrain_batches):
    config = TrainConfig(lr=3e-3, warmup_steps=0, total_steps=60, log_every=100, checkpoint_every=100)
    _, history = train(pretrain_batches[:1], "pretrain", model_config=tiny_config(), config=config,
                       show_progress=False)
    assert list(history.columns) == ["step", "lr", "total", *HEADS]
    assert len(history) == 60
    assert history["total"].tail(5).mean() < history["total"].head(5).mean(), "Training should reduce the loss"


def test_checkpoint_roundtrip(pretrain_batches, tmp_path):
    torch.manual_seed(0)
    config = TrainConfig(lr=1e-3, warmup_steps=1, total_steps=2)
    model, _ = train(pretrain_batches, "pretrain", model_config=tiny_config(), config=config,
                     checkpoint_path=tmp_path / "model.pt", show_progress=False)
    loaded, archive = load_checkpoint(tmp_path / "model.pt", expected_config=tiny_config())
    assert archive["stage"] == "pretrain" and archive["step"] == 2
    assert set(archive) == {"config", "train_config", "stage", "step", "model", "optimizer", "scheduler", "rng"}
    for (name, original), restored in zip(model.state_dict().items(), loaded.state_dict().values()):
        assert torch.equal(original, restored), f"Parameter {name} changed through the checkpoint"
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "model.pt", expected_config=ModelConfig(d_model=32, heads=2))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "absent.pt")


def test_resume_continues_step_counter(pretrain_batches, tmp_path):
    path = tmp_path / "resume.pt"
    train(pretrain_batches, "pretrain", model_config=tiny_config(),
          config=TrainConfig(warmup_steps=2, total_steps=4), checkpoint_path=path, show_progress=False)
    _, history = train(pretrain_batches, "pretrain", config=TrainConfig(warmup_steps=2, total_steps=6),
                       checkpoint_path=path, resume=path, show_progress=False)
    assert history["step"].tolist() == [4, 5], "Resuming should pick up after the stored step"
    assert load_checkpoint(path)[1]["step"] == 6


def test_non_finite_loss_raises(pretrain_batches):
    batch = pretrain_batches[0]
    batch.tensors["velocity"] = torch.full_like(batch.tensors["velocity"], float("nan"))
    with pytest.raises(NumericError):
        train([batch], "pretrain", model_config=tiny_config(), config=TrainConfig(total_steps=1),
              show_progress=False)


def test_accuracy_and_csv(pretrain_batches, tmp_path):
    model, history = train(pretrain_batches, "pretrain", model_config=tiny_config(),
                           config=TrainConfig(total_steps=2, warmup_steps=0), show_progress=False)
    accuracy = evaluate_accuracy(model, pretrain_batches)
    assert 0.0 <= accuracy["motion"] <= 1.0
    assert np.isnan(accuracy["rs"]), "Heads without targets report NaN"
    frame = pd.read_csv(write_loss_csv(history, tmp_path / "loss.csv"))
    assert len(frame) == 2 and "motion" in frame.columns


@pytest.mark.slow
def test_overfits_small_corpus():
    """The default model memorizes the motion labels of a handful of scenarios."""
    batches = prepare_batches(synth_corpus("straight", 8, 4, seed=0), "pretrain", ModelConfig())
    model, _ = train(batches, "pretrain", model_config=ModelConfig(), config=TrainConfig(), show_progress=False)
    assert evaluate_accuracy(model, batches)["motion"] >= 0.95
