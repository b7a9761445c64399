"""Command-line surface: data, training, sampling, pipeline, eval, audits.

Exit codes: 0 success, 1 operational failure (missing prerequisite, pipeline
error, failed audit), 2 usage error (unknown flag or subcommand, malformed
value). Every run logs one JSON line to stderr with the resolved
configuration and seed before doing any work. Subcommand configuration
resolves in three layers: built-in defaults, then an optional --config
key=value file, then explicit flags (--set key=value wins last).
"""

import argparse
import difflib
import json
import os
import sys
from dataclasses import fields

import numpy as np

from triflow.config import load_config, parse_value
from triflow.errors import (CheckpointError, ConfigError, ContractError,
                            NonFiniteError, PlanParseError, ShapeError,
                            StageError, UnknownWordError)


def _log_run(command: str, config: dict, seed) -> None:
    """One structured stderr line per invocation: the resolved config and seed."""
    print(json.dumps({"command": command, "seed": seed, "config": config},
                     sort_keys=True), file=sys.stderr)


def _parse_sets(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key] = parse_value(value.strip())
    return out


def _layered(defaults: dict, config_path, flag_values: dict, sets: dict) -> dict:
    """defaults <- config file <- named flags <- --set pairs."""
    merged = dict(defaults)
    if config_path:
        for key, value in load_config(config_path).items():
            if key not in merged:
                raise ConfigError(f"unknown config key {key!r} in {config_path}")
            merged[key] = value
    for key, value in flag_values.items():
        if value is not None:
            merged[key] = value
    for key, value in sets.items():
        if key not in merged:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = value
    return merged


def _dataclass_defaults(cls) -> dict:
    probe = cls()
    return {f.name: getattr(probe, f.name) for f in fields(cls)}


# ---- runners ----

def _run_make_data(args) -> int:
    from triflow.toyworld import (DatasetConfig, SceneSpec, make_dataset,
                                  render, save_manifest)
    from triflow.image_io import save_png, save_raw

    flat = _layered(_dataclass_defaults(DatasetConfig), args.config, {},
                    _parse_sets(args.set))
    cfg = DatasetConfig(**flat)
    _log_run("make-data", flat, args.seed)
    manifest = make_dataset(cfg, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_manifest(os.path.join(args.out, "manifest.json"), manifest)
    n_images = 0
    if args.previews:
        img_dir = os.path.join(args.out, "images")
        os.makedirs(img_dir, exist_ok=True)
        for split in ("train", "val"):
            for rec in manifest[split]:
                image = render(SceneSpec.from_dict(rec["scene"]))
                stem = os.path.join(
                    img_dir, f"{split}_{rec['task']}_{rec['index']:04d}")
                save_png(stem + ".png", image)
                save_raw(stem + ".raw", image)
                n_images += 1
    print(f"wrote {len(manifest['train'])} train + {len(manifest['val'])} val "
          f"records to {args.out}" +
          (f" ({n_images} preview images)" if n_images else ""))
    return 0


def _run_train(args) -> int:
    from triflow.train import TrainConfig, train

    named = {"stage": args.stage, "steps": args.steps,
             "batch_size": args.batch_size, "lr": args.lr,
             "warmup": args.warmup, "seed": args.seed,
             "init_from": args.init_from,
             "checkpoint_every": args.checkpoint_every,
             "prompt_templates": args.prompt_templates}
    flat = _layered(TrainConfig().to_flat(), args.config, named,
                    _parse_sets(args.set))
    cfg = TrainConfig.from_flat(flat)
    _log_run("train", cfg.to_flat(), cfg.seed)
    result = train(cfg, args.out, resume=args.resume)
    print(f"trained {result['steps_run']} steps; "
          f"checkpoint {result['checkpoint']}; metrics {result['metrics']}")
    final = result["final"]
    if final is not None:
        print(f"final: task {final['task']} combined {final['combined']:.6f} "
              f"(lm {final['lm']:.6f}, rf {final['rf']:.6f}, "
              f"hm {final['hm']:.6f})")
    return 0


def _run_sample(args) -> int:
    from triflow.checkpoint import load_checkpoint
    from triflow.image_io import save_png, save_raw
    from triflow.sampling import SamplerConfig, sample_image
    from triflow.sequencing import TextPart
    from triflow.vocab import Vocabulary, tokenize

    _log_run("sample", {"checkpoint": args.checkpoint, "prompt": args.prompt,
                        "steps": args.steps, "out": args.out}, args.seed)
    stack, _, _ = load_checkpoint(args.checkpoint)
    ids = tokenize(args.prompt, Vocabulary.default())
    image = sample_image(stack, [TextPart(ids, lm_from=None)],
                         SamplerConfig(steps=args.steps, seed=args.seed))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_png(args.out + ".png", image)
    save_raw(args.out + ".raw", image)
    print(f"wrote {args.out}.png and {args.out}.raw")
    return 0


def _run_mcot(args) -> int:
    from triflow.checkpoint import load_checkpoint
    from triflow.mcot import McotConfig, run_mcot, save_trace

    cfg = McotConfig(steps=args.steps, max_plan_tokens=args.max_plan_tokens,
                     tau=args.tau, dilation=args.dilation, rounds=args.rounds,
                     seed=args.seed)
    _log_run("mcot", {"checkpoint": args.checkpoint, "prompt": args.prompt,
                      "mode": args.mode, **vars(cfg)}, args.seed)
    stack, _, _ = load_checkpoint(args.checkpoint)
    trace = run_mcot(stack, args.prompt, args.mode, cfg)
    save_trace(trace, args.out)
    print(f"trace written to {args.out}")
    for stage, seconds in sorted(trace.timings.items()):
        print(f"  {stage}: {seconds:.3f}s")
    for name, score in sorted(trace.scores.items()):
        print(f"  score {name}: {score}")
    if trace.error:
        print(f"pipeline failed at {trace.error_stage}: {trace.error}",
              file=sys.stderr)
        return 1
    return 0


def _run_eval(args) -> int:
    from triflow.evalharness import evaluate, make_cases
    from triflow.mcot import McotConfig

    _log_run("eval", {"checkpoint": args.checkpoint, "mode": args.mode,
                      "n_per_category": args.n_per_category,
                      "steps": args.steps}, args.seed)
    cases = make_cases(args.n_per_category, seed=args.seed)
    report = evaluate(args.checkpoint, cases, args.mode,
                      McotConfig(steps=args.steps, seed=args.seed))
    print(report.format())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")
        print(f"report written to {args.out}")
    return 0


def _run_ablate(args) -> int:
    from triflow.evalharness import ablation, make_cases
    from triflow.mcot import McotConfig

    _log_run("ablate", {"checkpoint": args.checkpoint,
                        "n_per_category": args.n_per_category,
                        "steps": args.steps}, args.seed)
    cases = make_cases(args.n_per_category, seed=args.seed)
    report = ablation(args.checkpoint, cases,
                      McotConfig(steps=args.steps, seed=args.seed))
    print(report.format())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")
        print(f"report written to {args.out}")
    return 0


def _run_gradcheck(args) -> int:
    from triflow.gradcheck import GradcheckConfig, gradcheck

    cfg = GradcheckConfig(d_model=args.d_model, n_layers=args.n_layers,
                          n_heads=args.n_heads, seed=args.seed,
                          samples_per_param=args.samples_per_param,
                          h=args.h, tol=args.tol)
    _log_run("gradcheck", vars(cfg), args.seed)
    report = gradcheck(cfg)
    print(report.format())
    return 0 if report.passed else 1


def _run_inspect(args) -> int:
    from triflow.checkpoint import load_checkpoint

    _log_run("inspect-checkpoint", {"checkpoint": args.checkpoint}, None)
    stack, opt_state, meta = load_checkpoint(args.checkpoint)
    print(json.dumps({"meta": meta}, sort_keys=True, indent=1))
    total = 0
    for name in sorted(stack.params):
        shape = stack.params[name].data.shape
        total += int(np.prod(shape)) if shape else 1
        print(f"  {name}  {shape}")
    print(f"parameters: {total}")
    print(f"optimizer state: "
          + (f"step {opt_state['step']}" if opt_state else "absent"))
    return 0


# ---- parser construction ----

def build_parser() -> tuple:
    top = argparse.ArgumentParser(
        prog="triflow",
        description="three-expert multimodal model: data, training, "
                    "generation pipeline, evaluation")
    subs = top.add_subparsers(dest="command", required=True)
    registry = {}

    def sub(name, runner, help_text):
        parser = subs.add_parser(name, help=help_text)
        parser.set_defaults(runner=runner)
        registry[name] = parser
        return parser

    p = sub("make-data", _run_make_data, "write a dataset manifest and previews")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="key=value file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--previews", action="store_true",
                   help="also render every record to PNG + raw")

    p = sub("train", _run_train, "run one training stage")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", default=None, help="key=value file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--stage", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--init-from", default=None, dest="init_from")
    p.add_argument("--checkpoint-every", type=int, default=None,
                   dest="checkpoint_every")
    p.add_argument("--prompt-templates", default=None, dest="prompt_templates")

    p = sub("sample", _run_sample, "generate one image from a text prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", required=True, help="output stem (.png/.raw added)")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    p = sub("mcot", _run_mcot, "run the plan/act/reflect/correct pipeline")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--mode", default="full",
                   choices=("t2i_only", "plan_act", "full"))
    p.add_argument("--out", required=True, help="trace directory")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--dilation", type=int, default=1)
    p.add_argument("--max-plan-tokens", type=int, default=96,
                   dest="max_plan_tokens")
    p.add_argument("--seed", type=int, default=0)

    p = sub("eval", _run_eval, "score category prompts with the oracle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", default="full",
                   choices=("t2i_only", "plan_act", "full"))
    p.add_argument("--n-per-category", type=int, default=8,
                   dest="n_per_category")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional JSON report path")

    p = sub("ablate", _run_ablate, "paired three-mode comparison table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-per-category", type=int, default=8,
                   dest="n_per_category")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional JSON report path")

    p = sub("gradcheck", _run_gradcheck, "finite-difference gradient audit")
    p.add_argument("--d-model", type=int, default=64, dest="d_model")
    p.add_argument("--n-layers", type=int, default=2, dest="n_layers")
    p.add_argument("--n-heads", type=int, default=4, dest="n_heads")
    p.add_argument("--samples-per-param", type=int, default=4,
                   dest="samples_per_param")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)

    p = sub("inspect-checkpoint", _run_inspect, "print checkpoint contents")
    p.add_argument("checkpoint", help="path to a .tfck file")

    return top, registry


def _suggest(flag: str, parser: argparse.ArgumentParser) -> str:
    options = sorted(parser._option_string_actions)
    name = flag.split("=", 1)[0]
    close = difflib.get_close_matches(name, options, n=1)
    return f"; did you mean {close[0]!r}?" if close else ""


def _run(argv: list) -> int:
    top, registry = build_parser()
    args, extras = top.parse_known_args(argv)
    if extras:
        parser = registry[args.command]
        first = extras[0]
        if first.startswith("-"):
            print(f"triflow {args.command}: unknown flag {first!r}"
                  + _suggest(first, parser), file=sys.stderr)
        else:
            print(f"triflow {args.command}: unexpected argument {first!r}",
                  file=sys.stderr)
        return 2
    return args.runner(args)


def main(argv=None) -> int:
    try:
        return _run(list(sys.argv[1:] if argv is None else argv))
    except SystemExit as exc:
        code = exc.code
        if code is None:
            return 0
        return code if isinstance(code, int) else 2
    except (ConfigError, UnknownWordError) as exc:
        print(f"triflow: usage error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, ContractError, NonFiniteError, PlanParseError,
            ShapeError, StageError, OSError) as exc:
        print(f"triflow: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
