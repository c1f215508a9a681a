"""Command line entry point: ``stochweave <verb> [--config PATH | --preset NAME] ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from stochweave.diffcore import ConfigError, DomainError, NumericalFailure, load_checkpoint
from stochweave.envs import uncorrelated_batch, write_transitions
from stochweave.harness.config import (
    VARIANTS,
    ExperimentConfig,
    load_config,
    preset,
    with_variant,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("--config and --preset are mutually exclusive")
    cfg = load_config(args.config) if args.config else preset(args.preset or "toy")
    if getattr(args, "variant", None):
        cfg = with_variant(cfg, args.variant)
    if args.steps is not None:
        cfg = cfg.replace(n_steps=args.steps,
                          dqn={**cfg.dqn, "total_steps": args.steps} if cfg.dqn else {})
    if args.seed is not None:
        cfg = cfg.replace(seeds=(args.seed,))
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    from stochweave.harness.experiment import grid_eval_data, layout_of, toy_data

    cfg, out = _config(args), _out(args)
    seed = cfg.seeds[0]
    if cfg.domain == "toy":
        for name, (X, Y) in zip(("train", "val", "test"), toy_data(cfg, seed)):
            np.savetxt(out / f"toy_{name}.csv", np.column_stack([X, Y]), delimiter=",",
                       header="x,y", comments="", fmt="%.17g")
    else:
        layout = layout_of(cfg)
        (Xv, Yv), (Xt, Yt) = grid_eval_data(cfg, seed, layout)
        Xtr, Ytr = uncorrelated_batch(layout, args.n, np.random.default_rng([seed, 0]))
        for name, X, Y in (("train", Xtr, Ytr), ("val", Xv, Yv), ("test", Xt, Yt)):
            write_transitions(out / f"grid_{name}", X, Y, seed, layout)
        (out / "layout.json").write_text(layout.to_json())
    print(f"wrote datasets for seed {seed} to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from stochweave.harness.experiment import run_seed

    cfg, out = _config(args), _out(args)
    (out / "config.json").write_text(cfg.to_json())
    record = run_seed(cfg, cfg.seeds[0], str(out))
    (out / f"run_seed{cfg.seeds[0]}.json").write_text(json.dumps(record, indent=2, default=str))
    print(json.dumps(record, default=str))
    if record["failed"]:
        print(f"error: {record['error']}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _load_model(args, cfg):
    from stochweave.cvae import TransitionModel

    path = Path(args.model) if args.model else Path(args.out) / f"model_seed{cfg.seeds[0]}"
    return TransitionModel.load(path.with_suffix(""))


def cmd_eval(args) -> int:
    from stochweave.estimators import ConditionalVAE
    from stochweave.harness import experiment as ex

    cfg, out = _config(args), _out(args)
    if cfg.variant.startswith("mlp"):
        raise ConfigError("eval works on saved VAE checkpoints; use `report` for MLP baselines")
    model = _load_model(args, cfg)
    est = ConditionalVAE.from_model(model, n_eval_samples=cfg.eval_samples)
    seed = cfg.seeds[0]
    if cfg.domain == "toy":
        result = ex.evaluate_toy(est, ex.toy_data(cfg, seed)[2], cfg, seed)
    else:
        layout = ex.layout_of(cfg)
        result = ex.evaluate_grid(est, layout, ex.grid_eval_data(cfg, seed, layout),
                                  ex.probe_set(cfg, layout), cfg, seed)
    text = json.dumps(ex._jsonable(result), indent=2)
    (out / f"eval_seed{seed}.json").write_text(text)
    print(text)
    return EXIT_OK


def _policy(args, layout):
    from stochweave.agent import DqnAgent, DqnConfig
    from stochweave.harness.render import policy_of

    if not args.policy:
        return lambda state, rng: int(rng.integers(4))
    agent = DqnAgent(layout, DqnConfig(), np.random.default_rng(0))
    agent.params = {k: v for k, v in load_checkpoint(args.policy).items()}
    agent.sync()
    return policy_of(agent, args.epsilon)


def cmd_rollout(args) -> int:
    from stochweave.harness.experiment import layout_of
    from stochweave.harness.render import rollout_in_model

    cfg, out = _config(args), _out(args)
    layout = layout_of(cfg)
    model = _load_model(args, cfg)
    rng = np.random.default_rng(cfg.seeds[0])
    traj = rollout_in_model(model, layout, _policy(args, layout), layout.start_state,
                            args.steps_rollout, rng, out_dir=out / "rollout")
    print(json.dumps({"steps": len(traj["actions"]), "violations": traj["violations"],
                      "samples": traj["samples"]}))
    return EXIT_OK


def cmd_render(args) -> int:
    from stochweave.harness.experiment import layout_of, probe_set
    from stochweave.harness.render import render_grid_predictions

    cfg, out = _config(args), _out(args)
    layout = layout_of(cfg)
    probes = probe_set(cfg, layout)[:args.count]
    paths = render_grid_predictions(_load_model(args, cfg), layout, [s for s, _ in probes],
                                    [a for _, a in probes], out / "renders",
                                    np.random.default_rng(cfg.seeds[0]))
    print(f"wrote {len(paths)} renders to {out / 'renders'}")
    return EXIT_OK


def cmd_report(args) -> int:
    from stochweave.harness.experiment import run_experiment

    cfg = _config(args)
    report = run_experiment(cfg, _out(args), workers=args.workers)
    print(json.dumps(report.to_dict()["aggregate"], indent=2))
    return EXIT_NUMERIC if report.failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochweave", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    verbs = {
        "gen-data": (cmd_gen_data, "write train/val/test datasets"),
        "train": (cmd_train, "train and evaluate one seed, saving its checkpoint"),
        "eval": (cmd_eval, "evaluate a saved checkpoint"),
        "rollout": (cmd_rollout, "roll a saved grid model forward on its own samples"),
        "render": (cmd_render, "SVG renders of grid model predictions on probe states"),
        "report": (cmd_report, "run every seed of a config and write report.json/.csv"),
    }
    for name, (fn, help_text) in verbs.items():
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="TOML or JSON experiment config")
        p.add_argument("--preset", help="toy | grid | grid-onpolicy")
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--seed", type=int)
        p.add_argument("--steps", type=int, help="override the number of training steps")
        p.add_argument("--out", default="runs")
        if name in ("eval", "rollout", "render"):
            p.add_argument("--model", help="checkpoint path (default: OUT/model_seedN)")
        if name == "gen-data":
            p.add_argument("--n", type=int, default=100000, help="grid training transitions")
        if name == "rollout":
            p.add_argument("--policy", help="DQN checkpoint; default is a uniform random policy")
            p.add_argument("--epsilon", type=float, default=0.05)
            p.add_argument("--steps-rollout", type=int, default=12)
        if name == "render":
            p.add_argument("--count", type=int, default=8)
        if name == "report":
            p.add_argument("--workers", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DomainError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
