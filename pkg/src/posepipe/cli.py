"""Command-line interface.

Subcommands: simulate, run, tune, evaluate, serve. Exit codes: 0 success,
2 config error, 3 stream error, 4 evaluation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bayesopt import write_history_csv
from .config import ConfigError, default_config, load_config, save_config
from .ingest import IngestServer, drain_queue
from .pipeline import evaluate_run, run_pipeline, tune_pipeline
from .protocol import ProtocolError
from .simulate import SceneData, SceneSpec, load_scene, simulate_scene, write_scene

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STREAM = 3
EXIT_EVAL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="posepipe",
        description="Desk-scale pose pipeline: simulate, run, tune, evaluate, serve.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", type=Path, default=None,
                           help="pipeline config JSON (defaults apply if omitted)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured seed")
        p.add_argument("--output", type=Path, required=True,
                       help="output directory")

    p_sim = sub.add_parser("simulate", help="generate a synthetic scene")
    common(p_sim, needs_config=False)
    p_sim.add_argument("--persons", type=int, default=1)
    p_sim.add_argument("--frames", type=int, default=8)
    p_sim.add_argument("--width", type=int, default=64)
    p_sim.add_argument("--height", type=int, default=64)
    p_sim.add_argument("--fps", type=float, default=30.0)
    p_sim.add_argument("--margin", type=float, default=4.0)
    p_sim.add_argument("--motion", type=float, default=1.0)

    p_run = sub.add_parser("run", help="run the pipeline over a scene manifest")
    common(p_run)
    p_run.add_argument("--manifest", type=Path, required=True)
    p_run.add_argument("--overlay", action="store_true",
                       help="also write per-frame overlay .ppm files")

    p_tune = sub.add_parser("tune", help="tune configured hyperparameters")
    common(p_tune)
    p_tune.add_argument("--manifest", type=Path, required=True)
    p_tune.add_argument("--budget", type=int, default=None)

    p_eval = sub.add_parser("evaluate", help="run and score against ground truth")
    common(p_eval)
    p_eval.add_argument("--manifest", type=Path, required=True)

    p_serve = sub.add_parser("serve", help="ingest frames over TCP and decode")
    common(p_serve)
    p_serve.add_argument("--port", type=int, default=None,
                         help="listen port (default: IE_INGEST_PORT or ephemeral)")
    return parser


def _load_config(args):
    config = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        from dataclasses import replace

        config = replace(config, seed=args.seed)
    return config


def cmd_simulate(args) -> int:
    spec = SceneSpec(
        persons=args.persons,
        frames=args.frames,
        height=args.height,
        width=args.width,
        fps=args.fps,
        margin=args.margin,
        motion_scale=args.motion,
    )
    seed = args.seed if args.seed is not None else 0
    scene = simulate_scene(spec, seed)
    manifest = write_scene(scene, args.output)
    print(manifest)
    return EXIT_OK


def cmd_run(args) -> int:
    config = _load_config(args)
    scene = load_scene(args.manifest)
    result = run_pipeline(config, scene, output_dir=args.output,
                          overlay=args.overlay)
    for err in result.errors:
        print(f"clip error: {err}", file=sys.stderr)
    print(args.output / "skeletons.jsonl")
    return EXIT_OK


def cmd_tune(args) -> int:
    config = _load_config(args)
    scene = load_scene(args.manifest)
    outcome = tune_pipeline(config, scene, budget=args.budget)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    save_config(outcome.best_config, outdir / "best_config.json")
    write_history_csv(outdir / "history.csv", config.tuner.space(), outcome.result)
    print(outdir / "best_config.json")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    scene = load_scene(args.manifest)
    result = run_pipeline(config, scene, output_dir=args.output)
    try:
        report = evaluate_run(config, scene, result)
    except Exception as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    metrics_path = outdir / "metrics.json"
    metrics_path.write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
    )
    print(metrics_path)
    return EXIT_OK


def cmd_serve(args) -> int:
    config = _load_config(args)
    with IngestServer(port=args.port) as server:
        print(f"listening on {server.host}:{server.port}", flush=True)
        thread = server.start_background()
        frames = drain_queue(server.frames)
        imu = drain_queue(server.imu)
        thread.join()
        if server.error is not None:
            print(f"stream error: {server.error}", file=sys.stderr)
            return EXIT_STREAM
    if not frames:
        print("no frames received", file=sys.stderr)
        return EXIT_STREAM
    fps = 1_000_000 / max(
        1, (frames[-1].timestamp_us - frames[0].timestamp_us) / max(1, len(frames) - 1)
    ) if len(frames) > 1 else 30.0
    scene = SceneData(
        seed=config.seed,
        fps=fps,
        topology=config.decoder.topology(),
        frames=frames,
        imu=imu,
        ground_truth=[[] for _ in frames],
        depth_maps=[],
        heatmaps=[],
        pafs=[],
        heatmap_sigma=0.0,
    )
    from dataclasses import replace as dc_replace

    live_config = config
    if config.decoder.source != "heads":
        live_config = dc_replace(
            config, decoder=dc_replace(config.decoder, source="heads")
        )
    result = run_pipeline(live_config, scene, output_dir=args.output)
    for err in result.errors:
        print(f"clip error: {err}", file=sys.stderr)
    print(args.output / "skeletons.jsonl")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "simulate": cmd_simulate,
        "run": cmd_run,
        "tune": cmd_tune,
        "evaluate": cmd_evaluate,
        "serve": cmd_serve,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        print(f"stream error: {exc}", file=sys.stderr)
        return EXIT_STREAM
    except FileNotFoundError as exc:
        print(f"stream error: {exc}", file=sys.stderr)
        return EXIT_STREAM
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
