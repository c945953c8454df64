import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from rich.panel import Panel
from rich.table import Table

from src.config import load_config, print_config
from src.console import console
from src.errors import ConfigurationError, SceneStreamerError
from src.geo_utils import GeoUtils
from src.map_codec import segment_polylines, summarize_segments
from src.metrics import PROTOCOLS, display_results, evaluate
from src.rollout_engine import ROLLOUT_MODES, RolloutEngine
from src.scenario_model import load_scenario, save_scenario
from src.scenario_synth import TEMPLATES, synth_corpus
from src.sequence_builder import MODES, count_tokens, mask_summary, tokenize_scenario
from src.training import STAGES, display_losses, evaluate_accuracy, load_checkpoint, prepare_batches, train, \
    write_loss_csv
from src.visualizer import Visualizer

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 4

welcome_message = Panel(
    "Welcome to [highlight]SceneStreamer[/highlight]\n"
    "\nAvailable commands:\n"
    "- [bold #29339B]synth[/bold #29339B]: Write a synthetic scenario corpus\n"
    "- [bold #ADF5FF]tokenize[/bold #ADF5FF]: Build token streams and mask summaries\n"
    "- [bold #0496FF]train[/bold #0496FF]: Pretrain or finetune the model\n"
    "- [bold #EEFC57]rollout[/bold #EEFC57]: Generate scenarios with a checkpoint\n"
    "- [bold #FF3A20]eval[/bold #FF3A20]: Compare generated scenarios with ground truth\n"
    "- [bold #028090]inspect-map[/bold #028090]: Export and summarize map segments",
    title="[bold #028090]Welcome[/bold #028090]",
    border_style="bold #F9B5AC"
)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="scenestreamer",
        description="Token-stream traffic scenario generation. Settings are merged as built-in defaults < "
                    "--config file < command-line flags.")
    parser.add_argument("--config", help="INI configuration file")
    parser.add_argument("--print-config", action="store_true", help="print the merged configuration")
    parser.add_argument("--seed", type=int, help="global seed (overrides [seeds] global)")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="write synthetic scenarios")
    synth.add_argument("--template", choices=TEMPLATES, default="straight")
    synth.add_argument("--count", type=int, default=8)
    synth.add_argument("--agents", type=int, default=6, help="agents per scenario")
    synth.add_argument("--out", help="output directory (default: [paths] corpus)")

    tokenize = commands.add_parser("tokenize", help="tokenize scenarios")
    tokenize.add_argument("--in", dest="inputs", required=True, help="scenario file or directory")
    tokenize.add_argument("--mode", choices=MODES, default="full")
    tokenize.add_argument("--out", required=True, help="output directory")
    tokenize.add_argument("--plot", action="store_true", help="write the motion-label histogram")

    training = commands.add_parser("train", help="train the model")
    training.add_argument("--stage", choices=STAGES, required=True)
    training.add_argument("--data", help="scenario directory (default: [paths] corpus)")
    training.add_argument("--checkpoint", help="checkpoint to write (default: <outputs>/<stage>.pt)")
    training.add_argument("--resume", help="continue from this checkpoint")
    training.add_argument("--init-from", help="initialize finetuning from a pretrain checkpoint")
    training.add_argument("--from-scratch", action="store_true", help="allow finetuning without a pretrain checkpoint")
    training.add_argument("--steps", type=int, help="total optimizer steps")
    training.add_argument("--warmup", type=int, help="warmup steps")
    training.add_argument("--lr", type=float, help="peak learning rate")

    rollout = commands.add_parser("rollout", help="generate scenarios")
    rollout.add_argument("--checkpoint", help="model checkpoint (default: [paths] checkpoint)")
    rollout.add_argument("--scenario", required=True, help="source scenario file")
    rollout.add_argument("--mode", choices=ROLLOUT_MODES)
    rollout.add_argument("--horizon", type=int)
    rollout.add_argument("--target", type=int, help="agent count to reach (densification)")
    rollout.add_argument("--force-end-off", action="store_true", help="never stop injecting before the target")
    rollout.add_argument("--num-rollouts", type=int, default=1)
    rollout.add_argument("--out", required=True, help="output directory")
    rollout.add_argument("--plot", action="store_true", help="write a plot per rollout")

    evaluation = commands.add_parser("eval", help="evaluate generated scenarios")
    evaluation.add_argument("--pred", required=True, help="predicted scenario file or directory")
    evaluation.add_argument("--gt", required=True, help="ground-truth scenario file or directory")
    evaluation.add_argument("--protocol", choices=PROTOCOLS, default="relaxed")
    evaluation.add_argument("--out", required=True, help="JSON report path")

    inspect = commands.add_parser("inspect-map", help="export the map segments of a scenario")
    inspect.add_argument("--scenario", required=True)
    inspect.add_argument("--out", required=True, help="GeoJSON path")
    for command in (synth, training, rollout, evaluation):
        # SUPPRESS keeps a seed given before the subcommand
        command.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                             help="global seed (overrides [seeds] global)")
    return parser


def scenario_paths(location):
    location = Path(location)
    if location.is_dir():
        paths = sorted(location.glob("*.json"))
    else:
        paths = [location]
    if not paths:
        raise ConfigurationError(f"no scenario files in {location}")
    return paths


def segments_for(scenario, tokenizer):
    return segment_polylines(scenario, max_length=tokenizer.segment_length,
                             max_records=tokenizer.points_per_segment, max_segments=tokenizer.max_segments)


def run_synth(args, config):
    out = Path(args.out or config.paths["corpus"])
    for scenario in synth_corpus(args.template, args.count, args.agents, config.seed):
        save_scenario(scenario, out / f"{scenario.scenario_id}.json")
    console.print(f"[success]{args.count} {args.template} scenarios written to {out}.[/success]", style="success")


def run_tokenize(args, config):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = Table(title="Token counts", show_lines=True)
    table.add_column("Scenario", justify="left", style="info")
    table.add_column("Tokens", justify="center")
    table.add_column("Expected", justify="center")
    table.add_column("Map tokens", justify="center", style="highlight")
    labels = []
    for path in scenario_paths(args.inputs):
        scenario = load_scenario(path)
        segments = segments_for(scenario, config.tokenizer)
        sequence, mask = tokenize_scenario(scenario, segments, args.mode, n_max=config.tokenizer.max_agents,
                                           ranges=config.quantizer, k=config.tokenizer.knn_k)
        sequence.to_jsonl(out / f"{scenario.scenario_id}.tokens.jsonl")
        mask_summary(sequence, mask).to_csv(out / f"{scenario.scenario_id}.mask.csv")
        per_step = [sum(1 for tok in sequence.tokens if tok.group == "MO" and tok.step == t)
                    for t in range(scenario.num_steps)]
        expected = count_tokens(len(scenario.traffic_lights), per_step, args.mode)
        table.add_row(scenario.scenario_id, str(len(sequence)), str(expected), str(len(segments)))
        labels.extend(tok.target["motion"] for tok in sequence.tokens if tok.group == "MO" and tok.target)
    console.print(table)
    if args.plot:
        Visualizer.plot_label_histogram(labels, save_path=str(out / "motion_labels.png"))


def run_train(args, config):
    if args.stage == "finetune" and args.init_from is None and args.resume is None and not args.from_scratch:
        raise ConfigurationError("finetuning needs --init-from <pretrain checkpoint> (or --from-scratch)")
    outputs = Path(config.paths["outputs"])
    checkpoint = Path(args.checkpoint) if args.checkpoint else outputs / f"{args.stage}.pt"
    model_config = config.model
    source = args.resume or args.init_from
    if source is not None:
        _, archive = load_checkpoint(source)
        if args.init_from is not None and archive.get("stage") != "pretrain":
            console.print(f"[warning]{args.init_from} holds a '{archive.get('stage')}' checkpoint.[/warning]",
                          style="warning")
        model_config = replace(model_config, **archive["config"])
    scenarios = [load_scenario(path) for path in scenario_paths(args.data or config.paths["corpus"])]
    batches = prepare_batches(scenarios, args.stage, model_config, config.tokenizer, config.quantizer)
    model, history = train(batches, args.stage, model_config=model_config, config=config.training,
                           checkpoint_path=checkpoint, resume=args.resume, init_from=args.init_from)
    write_loss_csv(history, outputs / f"{args.stage}_loss.csv")
    Visualizer.plot_loss_curve(history, title=f"{args.stage} loss", save_path=str(outputs / f"{args.stage}_loss.png"))
    display_losses(history, evaluate_accuracy(model, batches))


def run_rollout(args, config):
    model, archive = load_checkpoint(args.checkpoint or config.paths["checkpoint"])
    scenario = load_scenario(args.scenario)
    segments = segments_for(scenario, config.tokenizer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.num_rollouts):
        rollout_config = replace(config.rollout, seed=config.rollout.seed + k)
        engine = RolloutEngine(model, segments, rollout_config, config.quantizer, archive.get("stage", "finetune"))
        engine.run(scenario)
        name = f"{scenario.scenario_id}_{rollout_config.mode}_{k}"
        save_scenario(engine.export(), out / f"{name}.json")
        engine.write_log(out / f"{name}.log.jsonl")
        if args.plot:
            Visualizer.plot_scenario(engine.export(), title=name, save_path=str(out / f"{name}.png"))


def run_eval(args, config):
    predictions = [load_scenario(path) for path in scenario_paths(args.pred)]
    ground_truth = [load_scenario(path) for path in scenario_paths(args.gt)]
    report = evaluate(predictions, ground_truth, args.protocol)
    display_results(report, title=f"Evaluation ({args.protocol})")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2), encoding="utf-8")
    console.print(f"[success]Report written to {out}.[/success]", style="success")


def run_inspect_map(args, config):
    scenario = load_scenario(args.scenario)
    segments = segments_for(scenario, config.tokenizer)
    frame = GeoUtils.segments_to_geodataframe(segments).drop(columns=["centroid"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_file(out, driver="GeoJSON")
    console.print(f"[success]{len(frame)} segments saved in {out}.[/success]", style="success")
    summarize_segments(segments)


COMMANDS = {
    "synth": run_synth,
    "tokenize": run_tokenize,
    "train": run_train,
    "rollout": run_rollout,
    "eval": run_eval,
    "inspect-map": run_inspect_map,
}


def flag_overrides(args):
    """Command-line flags as {"section.key": value}; absent flags are None and ignored."""
    overrides = {"seeds.global": args.seed}
    if args.seed is not None:
        overrides.update({"training.seed": args.seed, "rollout.seed": args.seed})
    if args.command == "train":
        overrides.update({"training.total_steps": args.steps, "training.warmup_steps": args.warmup,
                          "training.lr": args.lr})
    if args.command == "rollout":
        overrides.update({"rollout.mode": args.mode, "rollout.horizon": args.horizon,
                          "rollout.target_agents": args.target,
                          "rollout.force_end_logit_off": True if args.force_end_off else None})
    return overrides


def main(argv=None):
    console.print(welcome_message)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        config = load_config(args.config, flag_overrides(args))
        if args.print_config:
            print_config(config)
        COMMANDS[args.command](args, config)
    except SceneStreamerError as e:
        console.print(f"[error]{type(e).__name__}: {e}[/error]", style="error")
        return e.exit_code
    except OSError as e:
        console.print(f"[error]I/O error: {e}[/error]", style="error")
        return EXIT_RUNTIME
    except Exception as e:
        console.print(f"[error]Unexpected error: {e}[/error]", style="error")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
