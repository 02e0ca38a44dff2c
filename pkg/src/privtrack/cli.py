"""Command-line entry point: ``privtrack <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. A seed given by
flag wins over ``P4R_SEED``, which wins over the built-in default.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path


SEED_ENV = "P4R_SEED"
DEFAULT_SEED = 0


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)


def _flag(p, name, type=str, default=None, help="", **kw):
    tname = kw.pop("type_name", getattr(type, "__name__", str(type)))
    shown = "required" if kw.get("required") else repr(default)
    p.add_argument(name, type=type, default=default, help=f"{help} [type: {tname}; default: {shown}]", **kw)


def _switch(p, name, help):
    p.add_argument(name, action="store_true", help=f"{help} [type: flag; default: off]")


def _seed_flag(p, help="random seed"):
    p.add_argument("--seed", type=int, default=None,
                   help=f"{help}; falls back to ${SEED_ENV}, then {DEFAULT_SEED} [type: int; default: None]")


def resolve_seed(flag: int | None, fallback: int = DEFAULT_SEED) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise SystemExit(f"error: {SEED_ENV}={env!r} is not an integer") from None
    return fallback


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="privtrack", description="Point-track auxiliary supervision toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate scripted demonstrations with point tracks (P4RD)")
    _flag(p, "--task", str, "drawer", "task slug(s), comma separated: drawer, door, pick_place")
    _flag(p, "--episodes", int, 100, "number of episodes")
    _flag(p, "--np", int, 1024, "surface points tracked per episode", dest="np")
    _seed_flag(p)
    _flag(p, "--out", str, None, "output dataset path", required=True)
    _flag(p, "--crop-half-extent", float, 0.6, "half side of the gripper-centred sampling cube (m)")
    _flag(p, "--robot-fraction", float, 0.5, "fraction of points drawn on robot meshes")

    p = sub.add_parser("train", help="train a policy from a JSON config")
    _flag(p, "--config", str, None, "train config JSON", required=True)
    _flag(p, "--out-dir", str, None, "override the config's output directory")
    _seed_flag(p, "override the config seed")
    _switch(p, "--no-wall-time", "write wall_ms = 0 so logs are byte-reproducible")

    p = sub.add_parser("eval", help="closed-loop success rate of a checkpoint")
    _flag(p, "--checkpoint", str, None, "policy checkpoint (P4RK + .json sidecar)", required=True)
    _flag(p, "--task", str, "drawer", "task slug")
    _flag(p, "--trials", int, 50, "rollouts")
    _seed_flag(p)
    _flag(p, "--max-steps", int, 200, "env steps per rollout")
    _flag(p, "--flow-steps", int, 10, "Euler steps for the flow sampler")
    _flag(p, "--out", str, None, "also write the result as JSON here")

    p = sub.add_parser("ablate", help="run an ablation matrix from a JSON spec")
    _flag(p, "--spec", str, None, "ablation spec JSON", required=True)
    _flag(p, "--out", str, None, "result CSV path", required=True)
    _flag(p, "--report", str, None, "write the baseline comparison text here")
    _flag(p, "--workers", int, None, "parallel cells (overrides the spec)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _flag(p, "--instances", int, 100, "random instances per op / architecture")
    _seed_flag(p)
    _switch(p, "--ops-only", "skip the full-policy checks")

    p = sub.add_parser("strip", help="drop the point-track head from a checkpoint")
    _flag(p, "--checkpoint-in", str, None, "trained checkpoint", required=True)
    _flag(p, "--checkpoint-out", str, None, "inference checkpoint", required=True)

    p = sub.add_parser("export-plots", help="SVG charts from train logs or ablation CSVs")
    p.add_argument("inputs", nargs="+", help="CSV files (train_log/validation or ablation results) [type: str]")
    _flag(p, "--out", str, None, "SVG output path", required=True)
    _flag(p, "--column", str, "loss_pt", "log column to plot for training logs")
    _flag(p, "--task", str, None, "restrict ablation bars to one task")

    p = sub.add_parser("validate-tracks", help="check a P4RT external track file")
    p.add_argument("path", help="P4RT file [type: str]")
    return parser


# commands ---------------------------------------------------------------------

def cmd_gen_data(a) -> int:
    from .datasets import generate, save_dataset
    tasks = [t.strip() for t in a.task.split(",") if t.strip()]
    ds = generate(tasks, a.episodes, a.np, resolve_seed(a.seed), a.crop_half_extent, a.robot_fraction)
    save_dataset(ds, a.out)
    lengths = [ep.length for ep in ds.episodes]
    print(f"wrote {a.out}: {len(lengths)} episodes, Np={a.np}, steps {min(lengths)}-{max(lengths)}")
    return 0


def _eval_callback(cfg, dataset):
    from .evaluation import PolicyAgent, success_rate
    from .policy import PtInput

    def on_eval(policy, step):
        p = policy
        if p.config.head_enabled and p.config.head_pt_input is not PtInput.BACKBONE_TOKEN:
            p = p.strip_head()
        agent = PolicyAgent(p, cfg.flow_steps, n_points=cfg.Np)
        tasks = dataset.tasks
        k = sum(success_rate(agent, t, cfg.seed, cfg.eval_trials, cfg.eval_max_steps)[0] for t in tasks)
        return k / (cfg.eval_trials * len(tasks))
    return on_eval


def cmd_train(a) -> int:
    from .datasets import load_dataset
    from .trainer import TrainConfig, train
    cfg = TrainConfig.from_json(a.config)
    cfg = replace(cfg, seed=resolve_seed(a.seed, cfg.seed))
    if a.out_dir:
        cfg = replace(cfg, out_dir=a.out_dir)
    elif cfg.out_dir and not Path(cfg.out_dir).is_absolute():
        # paths inside a config file are relative to that file
        cfg = replace(cfg, out_dir=str(Path(a.config).parent / cfg.out_dir))
    if a.no_wall_time:
        cfg = replace(cfg, record_wall_time=False)
    if not cfg.out_dir:
        raise ValueError("no output directory: set out_dir in the config or pass --out-dir")
    path = Path(cfg.dataset)
    if not path.is_absolute():
        path = Path(a.config).parent / path
    dataset = load_dataset(path)
    result = train(cfg, dataset, _eval_callback(cfg, dataset) if cfg.eval_interval else None)
    final = result.final_validation
    print(f"trained {cfg.steps} steps; validation loss_act={final['val_loss_act']:.6g} "
          f"loss_pt={final['val_loss_pt']:.6g}; outputs in {cfg.out_dir}")
    return 0


def cmd_eval(a) -> int:
    from .evaluation import PolicyAgent, success_rate
    from .policy import Policy
    policy = Policy.load(a.checkpoint)
    seed = resolve_seed(a.seed)
    k, n = success_rate(PolicyAgent(policy, a.flow_steps), a.task, seed, a.trials, a.max_steps)
    res = {"task": a.task, "seed": seed, "successes": k, "trials": n, "success_rate": k / n}
    print(f"{a.task}: success rate {k}/{n} = {k / n:.3f}")
    if a.out:
        Path(a.out).write_text(json.dumps(res, sort_keys=True) + "\n")
    return 0


def cmd_ablate(a) -> int:
    from .evaluation import AblationSpec, compare, run_ablation, write_results
    spec = AblationSpec.from_json(a.spec)
    if a.workers:
        spec.workers = a.workers
    base = Path(a.spec).parent
    spec.datasets = {k: str(v if Path(v).is_absolute() else base / v) for k, v in spec.datasets.items()}
    rows = run_ablation(spec)
    write_results(a.out, rows)
    lines = []
    values = [str(v) for v in spec.values]
    reference = "baseline" if "baseline" in values else values[0]
    for v in values:
        if v != reference:
            lines.extend(c.describe() for c in compare(rows, reference, v))
    text = "\n".join(lines) + ("\n" if lines else "")
    print(text, end="")
    if a.report:
        Path(a.report).write_text(text)
    errors = [r for r in rows if r["row_type"] == "error"]
    for r in errors:
        print(f"cell {r['value']}/seed {r['seed']}/{r['task']} failed: {r['error']}", file=sys.stderr)
    return 1 if errors else 0


def cmd_gradcheck(a) -> int:
    from .gradcheck import TOLERANCE, run_suite
    results = run_suite(a.instances, resolve_seed(a.seed), policies=not a.ops_only)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  n={r.instances}  max_rel_err={r.max_rel_err:.3e}  {status}")
    bad = [r for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} checks within {TOLERANCE:g}")
    return 1 if bad else 0


def cmd_strip(a) -> int:
    from .policy import Policy
    policy = Policy.load(a.checkpoint_in)
    stripped = policy.strip_head()
    stripped.save(a.checkpoint_out)
    print(f"stripped {policy.num_parameters() - stripped.num_parameters()} head parameters; "
          f"{stripped.num_parameters()} remain")
    return 0


def _is_results_csv(path) -> bool:
    with open(path) as fh:
        return fh.readline().startswith("row_type,")


def cmd_export_plots(a) -> int:
    from .evaluation import read_results
    from .plots import ablation_bars, training_curves, write_svg
    from .trainer import read_log
    if all(_is_results_csv(p) for p in a.inputs):
        rows = [r for p in a.inputs for r in read_results(p)]
        svg = ablation_bars(rows, a.task)
    else:
        logs = {Path(p).parent.name + "/" + Path(p).stem: read_log(p) for p in a.inputs}
        svg = training_curves(logs, a.column)
    write_svg(a.out, svg)
    print(f"wrote {a.out}")
    return 0


def cmd_validate_tracks(a) -> int:
    from .supervision import import_external_tracks
    tracks, labels = import_external_tracks(a.path)
    T, Np, _ = tracks.shape
    print(f"ok: T={T} Np={Np} robot={int((labels == 0).sum())} scene={int((labels == 1).sum())}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "strip": cmd_strip, "export-plots": cmd_export_plots,
            "validate-tracks": cmd_validate_tracks}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report, do not trace
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
