import json

import pytest
from main import build_parser, flag_overrides, main
from src.config import load_config
from src.rollout_engine import ROLLOUT_MODES
from src.scenario_model import load_scenario


@pytest.fixture
def sample_ini(tmp_path):
    """Tiny model and short rollouts so the whole pipeline runs in seconds."""
    path = tmp_path / "run.ini"
    path.write_text(
        f"[paths]\ncorpus = {tmp_path / 'corpus'}\noutputs = {tmp_path / 'outputs'}\n"
        f"checkpoint = {tmp_path / 'outputs' / 'finetune.pt'}\n\n"
        "[model]\nd_model = 16\nheads = 2\nencoder_layers = 1\ndecoder_layers = 1\nrs_head_layers = 1\n"
        "relative_dim = 4\nmax_segments = 512\nmax_agents = 16\n\n"
        "[tokenizer]\nmax_segments = 512\nmax_agents = 16\n\n"
        "[training]\nwarmup_steps = 1\ntotal_steps = 4\ncheckpoint_every = 100\n\n"
        "[rollout]\nhorizon = 3\nmax_agents = 6\n\n"
        "[seeds]\nglobal = 0\n",
        encoding="utf-8")
    return path


def test_pipeline(sample_ini, tmp_path):
    config = ["--config", str(sample_ini)]
    outputs = tmp_path / "outputs"
    assert main([*config, "synth", "--template", "straight", "--count", "2", "--agents", "3"]) == 0
    scenario_path = tmp_path / "corpus" / "straight_3_0.json"
    assert scenario_path.exists() and (tmp_path / "corpus" / "straight_3_1.json").exists()

    tokens = tmp_path / "tokens"
    assert main([*config, "tokenize", "--in", str(tmp_path / "corpus"), "--out", str(tokens), "--plot"]) == 0
    assert (tokens / "straight_3_0.tokens.jsonl").exists() and (tokens / "straight_3_0.mask.csv").exists()
    assert (tokens / "motion_labels.png").exists()

    assert main([*config, "train", "--stage", "pretrain"]) == 0
    assert (outputs / "pretrain.pt").exists() and (outputs / "pretrain_loss.csv").exists()
    assert main([*config, "train", "--stage", "finetune", "--init-from", str(outputs / "pretrain.pt")]) == 0
    assert (outputs / "finetune.pt").exists()

    for mode in ROLLOUT_MODES:
        out = tmp_path / mode
        assert main([*config, "rollout", "--scenario", str(scenario_path), "--mode", mode, "--num-rollouts", "2",
                     "--out", str(out)]) == 0, f"Rollout in {mode} mode should succeed"
        for k in range(2):
            generated = load_scenario(out / f"straight_3_0_{mode}_{k}.json")
            assert generated.num_steps == 4, "Exports cover the horizon plus the initial step"
            assert (out / f"straight_3_0_{mode}_{k}.log.jsonl").exists()

    report_path = tmp_path / "report.json"
    assert main([*config, "eval", "--pred", str(tmp_path / "motion_prediction"), "--gt", str(scenario_path),
                 "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert {"ADE_avg", "ADE_min", "FDE_avg", "FDE_min", "ADD", "FDD"} <= set(report)
    assert len(report) == 10

    geojson = tmp_path / "segments.geojson"
    assert main([*config, "inspect-map", "--scenario", str(scenario_path), "--out", str(geojson)]) == 0
    assert len(json.loads(geojson.read_text(encoding="utf-8"))["features"]) == 84


def test_finetune_needs_pretrained_weights(sample_ini, tmp_path):
    assert main(["--config", str(sample_ini), "synth", "--count", "1", "--agents", "2"]) == 0
    assert main(["--config", str(sample_ini), "train", "--stage", "finetune"]) == 2


def test_usage_errors(sample_ini):
    assert main(["teleport"]) == 2, "Unknown commands are usage errors"
    assert main(["--config", str(sample_ini), "--seed", "x", "synth"]) == 2
    assert main(["--help"]) == 0


def test_scenario_errors(sample_ini, tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text("{ not json", encoding="utf-8")
    assert main(["--config", str(sample_ini), "inspect-map", "--scenario", str(broken),
                 "--out", str(tmp_path / "x.geojson")]) == 3
    assert main(["--config", str(sample_ini), "synth", "--template", "curve", "--agents", "40"]) == 3, \
        "Templates that cannot hold the agents fail with a placement error"


def test_seed_flag_after_subcommand(sample_ini):
    """--seed is accepted on either side of the command and wins over the file."""
    args = build_parser().parse_args(["rollout", "--scenario", "s.json", "--mode", "motion_prediction",
                                      "--seed", "9", "--out", "out"])
    config = load_config(sample_ini, flag_overrides(args))
    assert (config.seed, config.rollout.seed, config.training.seed) == (9, 9, 9)
    assert build_parser().parse_args(["--seed", "4", "synth"]).seed == 4, "A seed before the command still counts"
    assert build_parser().parse_args(["synth"]).seed is None


def test_seeded_commands(sample_ini, tmp_path):
    config = ["--config", str(sample_ini)]
    assert main([*config, "synth", "--count", "1", "--agents", "3", "--seed", "5"]) == 0
    scenario_path = tmp_path / "corpus" / "straight_3_5.json"
    assert scenario_path.exists(), "The synthetic corpus should start at the given seed"
    assert main([*config, "train", "--stage", "pretrain", "--seed", "5"]) == 0
    exports = []
    for run in range(2):
        out = tmp_path / f"rollout_{run}"
        assert main([*config, "rollout", "--checkpoint", str(tmp_path / "outputs" / "pretrain.pt"),
                     "--scenario", str(scenario_path), "--mode", "motion_prediction", "--seed", "3",
                     "--out", str(out)]) == 0
        exports.append((out / "straight_3_5_motion_prediction_0.json").read_text(encoding="utf-8"))
    assert exports[0] == exports[1], "Equal seeds give identical rollouts"
