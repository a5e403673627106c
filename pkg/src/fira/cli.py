"""Command line front end.

Five subcommands: ``train`` runs one configured training loop and
writes metrics.csv plus summary.json; ``compare`` fans a config out
over methods, ranks and seeds into comparison.csv; ``rank-sim``
computes rank correlations between scaling-factor rankings (built-in
reference rankings or metrics files); ``var-sim`` runs the variance
Monte-Carlo over a list of ranks; ``mem`` estimates weight and
optimizer memory for an architecture.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence
or non-convergence, 4 I/O error.  All outputs are deterministic
functions of the inputs: repeated runs produce byte-identical files.
"""

import argparse
import configparser
import json
import math
import os
import statistics
import sys
from dataclasses import replace

from fira import analysis, linalg, memory, models, optimizers

OUTPUT_DIR_ENV = "FIRA_OUTPUT_DIR"


class ConfigError(ValueError):
    """Invalid configuration file or flag combination."""


class DivergenceError(RuntimeError):
    """A training run hit a non-finite loss or gradient."""


# ---------------------------------------------------------------------------
# Config file parsing.

_TASK_KEYS = {
    "kind", "size", "batch", "in_dim", "out_dim", "noise",
    "spike_steps", "spike_amplification",
}
_MODEL_KEYS = {"hidden", "activation", "loss"}
_OPTIMIZER_KEYS = {
    "method", "learning_rate", "beta1", "beta2", "epsilon", "alpha",
    "gamma", "clip_threshold", "rank", "switch_period",
    "alpha_on_residual",
}
_RUN_KEYS = {"steps", "seed", "warmup_fraction"}
_COMPARE_KEYS = {"methods", "ranks", "seeds"}
_SECTIONS = {
    "task": _TASK_KEYS,
    "model": _MODEL_KEYS,
    "optimizer": _OPTIMIZER_KEYS,
    "run": _RUN_KEYS,
    "compare": _COMPARE_KEYS,
}


def _read_config(path: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
    return parser


def _get(parser, section, key, convert, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        return convert(raw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(
            f"bad value for {key!r} in [{section}]: {raw!r} ({exc})"
        ) from exc


def _as_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("true", "yes", "1", "on"):
        return True
    if value in ("false", "no", "0", "off"):
        return False
    raise ValueError("expected a boolean")


def _int_list(raw: str) -> tuple:
    items = [x.strip() for x in raw.split(",") if x.strip()]
    return tuple(int(x) for x in items)


def _str_list(raw: str) -> tuple:
    return tuple(x.strip() for x in raw.split(",") if x.strip())


def load_run_config(path: str, require_rank: bool = True) -> models.RunConfig:
    """Build a RunConfig from a key=value config file.

    require_rank is dropped by the compare command, whose rank grid
    lives in the [compare] section instead of [optimizer].
    """
    parser = _read_config(path)
    try:
        task = models.TaskSpec(
            kind=_get(parser, "task", "kind", models.TaskKind,
                      models.TaskKind.MATRIX_FACTORIZATION),
            size=_get(parser, "task", "size", int, 16),
            batch=_get(parser, "task", "batch", int, 32),
            in_dim=_get(parser, "task", "in_dim", int, 16),
            out_dim=_get(parser, "task", "out_dim", int, 8),
            noise=_get(parser, "task", "noise", float, 0.1),
            spike_steps=_get(parser, "task", "spike_steps", _int_list,
                             (250, 500, 750)),
            spike_amplification=_get(parser, "task", "spike_amplification",
                                     float, 100.0),
            hidden=_get(parser, "model", "hidden", _int_list, (32,)),
            activation=_get(parser, "model", "activation", models.Activation,
                            models.Activation.TANH),
            loss=_get(parser, "model", "loss", models.Loss, models.Loss.MSE),
        )
        rank = _get(parser, "optimizer", "rank", int, None)
        hp = optimizers.Hyperparams(
            learning_rate=_get(parser, "optimizer", "learning_rate", float, 0.01),
            beta1=_get(parser, "optimizer", "beta1", float, 0.9),
            beta2=_get(parser, "optimizer", "beta2", float, 0.999),
            epsilon=_get(parser, "optimizer", "epsilon", float, 1e-8),
            galore_scale=_get(parser, "optimizer", "alpha", float, 0.25),
            limiter_threshold=_get(parser, "optimizer", "gamma", float, 1.01),
            clip_threshold=_get(parser, "optimizer", "clip_threshold", float, 1.0),
            rank=rank,
            switch_period=_get(parser, "optimizer", "switch_period", int, 200),
            alpha_on_residual=_get(parser, "optimizer", "alpha_on_residual",
                                   _as_bool, True),
        )
        method = _get(parser, "optimizer", "method", str, "fira")
        config = models.RunConfig(
            task=task,
            method=method,
            hp=hp,
            steps=_get(parser, "run", "steps", int, 1000),
            seed=_get(parser, "run", "seed", int, 0),
            warmup_fraction=_get(parser, "run", "warmup_fraction", float, 0.1),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if require_rank:
        _require_rank(config.method, config.hp)
    return config


def _require_rank(method: str, hp: optimizers.Hyperparams) -> None:
    needs_rank = method in models.PROJECTED_METHODS or method == "lora"
    if needs_rank and hp.rank is None:
        raise ConfigError(f"method {method!r} requires optimizer rank")


def load_compare_config(path: str):
    """RunConfig template plus the (methods, ranks, seeds) grid."""
    base = load_run_config(path, require_rank=False)
    parser = _read_config(path)
    methods = _get(parser, "compare", "methods", _str_list, (base.method,))
    ranks = _get(parser, "compare", "ranks", _int_list,
                 (base.hp.rank,) if base.hp.rank is not None else ())
    seeds = _get(parser, "compare", "seeds", _int_list, (base.seed,))
    if not methods:
        raise ConfigError("compare needs at least one method")
    if not seeds:
        raise ConfigError("compare needs at least one seed")
    for method in methods:
        if method not in models.METHODS:
            raise ConfigError(f"unknown method {method!r} in [compare]")
        if (method in models.PROJECTED_METHODS or method == "lora") and not ranks:
            raise ConfigError(f"method {method!r} requires ranks in [compare]")
    if any(r < 1 for r in ranks):
        raise ConfigError("ranks must be >= 1")
    if any(s < 0 for s in seeds):
        raise ConfigError("seeds must be >= 0")
    return base, methods, ranks, seeds


# ---------------------------------------------------------------------------
# Output helpers.


def _resolve_output_dir(flag_value: str | None) -> str:
    env = os.environ.get(OUTPUT_DIR_ENV)
    out = env or flag_value or "."
    os.makedirs(out, exist_ok=True)
    return out


def _json_clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_clean(v) for k, v in value.items()}
    return value


def _write_json(path: str, obj: dict) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(_json_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_text(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# Subcommands.


def _cmd_train(args) -> int:
    config = load_run_config(args.config)
    record = models.train(config)
    out = _resolve_output_dir(args.output_dir)
    models.record_to_csv(record, os.path.join(out, "metrics.csv"))
    _write_json(os.path.join(out, "summary.json"), models.run_summary(record))
    if record.diverged_at is not None:
        print(f"diverged at step {record.diverged_at}", file=sys.stderr)
        return 3
    print(
        f"steps={len(record.steps)} final_loss={record.final_loss()!r}"
    )
    return 0


def _cmd_compare(args) -> int:
    base, methods, ranks, seeds = load_compare_config(args.config)
    rows = []
    diverged = False
    for method in sorted(methods):
        needs_rank = method in models.PROJECTED_METHODS or method == "lora"
        method_ranks = sorted(ranks) if needs_rank else [0]
        for rank in method_ranks:
            finals = {}
            for seed in sorted(seeds):
                hp = replace(base.hp, rank=rank) if needs_rank else base.hp
                config = replace(
                    base, method=method, hp=hp, seed=seed
                )
                record = models.train(config)
                if record.diverged_at is not None:
                    diverged = True
                finals[seed] = (record.final_loss(),
                                min(record.losses()))
            median = statistics.median(v[0] for v in finals.values())
            for seed in sorted(finals):
                final_loss, min_loss = finals[seed]
                rows.append((method, rank, seed, final_loss, min_loss, median))
    out = _resolve_output_dir(args.output_dir)
    path = os.path.join(out, "comparison.csv")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("method,rank,seed,final_loss,min_loss,median_final_loss\n")
        for method, rank, seed, final_loss, min_loss, median in rows:
            fh.write(
                f"{method},{rank},{seed},{float(final_loss)!r},"
                f"{float(min_loss)!r},{float(median)!r}\n"
            )
    if diverged:
        print("at least one run diverged", file=sys.stderr)
        return 3
    print(f"runs={len(rows)}")
    return 0


def _pair_rows(named_rankings) -> str:
    lines = ["pair,kendall,kendall_p,spearman,spearman_p"]
    names = list(named_rankings)
    for i in range(len(names) - 1):
        for j in range(i + 1, len(names)):
            a = named_rankings[names[i]]
            b = named_rankings[names[j]]
            k = analysis.kendall_tau(a, b)
            s = analysis.spearman_rho(a, b)
            lines.append(
                f"{names[i]}-{names[j]},{k.coefficient!r},{k.p_value!r},"
                f"{s.coefficient!r},{s.p_value!r}"
            )
    return "\n".join(lines) + "\n"


def _cmd_rank_sim(args) -> int:
    if args.builtin is not None and args.traces:
        raise ConfigError("give either --builtin or trace files, not both")
    if args.builtin is not None:
        named = {
            name: analysis.as_ranking(values)
            for name, values in analysis.REFERENCE_RANKINGS.items()
        }
    else:
        if len(args.traces) < 2:
            raise ConfigError("need at least two trace files")
        named = {}
        sizes = set()
        for path in args.traces:
            record = models.record_from_csv(path)
            if not record.steps:
                raise ConfigError(f"trace {path} holds no steps")
            stem = os.path.splitext(os.path.basename(path))[0]
            name = stem
            suffix = 2
            while name in named:
                name = f"{stem}-{suffix}"
                suffix += 1
            named[name] = analysis.trace_to_ranking(analysis.average_phi(record))
            sizes.add(len(record.matrix_names))
        if len(sizes) > 1:
            raise ConfigError("traces disagree on matrix count")
    _write_text(args.output, _pair_rows(named))
    return 0


_VAR_MODES = {"exclude-current": True, "full": False}


def _cmd_var_sim(args) -> int:
    try:
        ranks = _int_list(args.ranks)
    except ValueError as exc:
        raise ConfigError(f"bad --ranks: {args.ranks!r}") from exc
    if not ranks:
        raise ConfigError("need at least one rank")
    lines = ["rank,var_phi,var_psi,var_phi_sq,var_psi_sq,sq_ratio"]
    for rank in ranks:
        try:
            cfg = analysis.VarianceSimConfig(
                rank=rank,
                steps=args.steps,
                trials=args.trials,
                beta2=args.beta2,
                sigma=args.sigma,
                seed=args.seed,
                exclude_current=_VAR_MODES[args.mode],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        res = analysis.simulate_variance(cfg)
        lines.append(
            f"{rank},{res.var_phi!r},{res.var_psi!r},"
            f"{res.var_phi_sq!r},{res.var_psi_sq!r},{res.sq_ratio!r}"
        )
    _write_text(args.output, "\n".join(lines) + "\n")
    return 0


def _load_arch(spec: str) -> tuple:
    if spec in memory.BUILTIN_ARCHS:
        return spec, memory.BUILTIN_ARCHS[spec]
    if not os.path.exists(spec):
        raise ConfigError(
            f"unknown architecture {spec!r}; builtins: "
            + ", ".join(sorted(memory.BUILTIN_ARCHS))
        )
    with open(spec, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse {spec}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{spec} must hold a JSON object")
    allowed = {"hidden", "intermediate", "heads", "layers", "vocab", "max_seq"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
    try:
        arch = memory.ArchSpec(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad architecture in {spec}: {exc}") from exc
    return os.path.basename(spec), arch


def _cmd_mem(args) -> int:
    name, arch = _load_arch(args.arch)
    if args.method != "full" and args.rank is None:
        raise ConfigError(f"method {args.method!r} requires --rank")
    try:
        est = memory.estimate(arch, args.method, args.rank)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    payload = {
        "arch": name,
        "method": est.method,
        "rank": est.rank,
        "weight_bytes": est.weight_bytes,
        "optimizer_state_bytes": est.optimizer_state_bytes,
        "total_bytes": est.total_bytes,
        "total_gb": est.total_gb,
    }
    text = json.dumps(_json_clean(payload), indent=2, sort_keys=True) + "\n"
    _write_text(args.output, text)
    return 0


# ---------------------------------------------------------------------------
# Parser plumbing.


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fira",
        description="Low-rank-state training experiments and analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training config")
    p_train.add_argument("config", help="key=value config file")
    p_train.add_argument("--output-dir", default=None,
                         help=f"output directory (overridden by ${OUTPUT_DIR_ENV})")
    p_train.set_defaults(func=_cmd_train)

    p_cmp = sub.add_parser("compare",
                           help="run a config across methods, ranks and seeds")
    p_cmp.add_argument("config", help="config file with a [compare] section")
    p_cmp.add_argument("--output-dir", default=None,
                       help=f"output directory (overridden by ${OUTPUT_DIR_ENV})")
    p_cmp.set_defaults(func=_cmd_compare)

    p_rank = sub.add_parser("rank-sim",
                            help="rank correlations between scaling-factor rankings")
    p_rank.add_argument("traces", nargs="*",
                        help="metrics.csv files to rank by average phi")
    p_rank.add_argument("--builtin", choices=["appendix"], default=None,
                        help="use the built-in reference rankings")
    p_rank.add_argument("--output", default=None,
                        help="write CSV here instead of stdout")
    p_rank.set_defaults(func=_cmd_rank_sim)

    p_var = sub.add_parser("var-sim",
                           help="scaling-factor variance Monte-Carlo")
    p_var.add_argument("--ranks", required=True,
                       help="comma-separated list, e.g. 1,5,10,50,100")
    p_var.add_argument("--steps", type=int, default=100)
    p_var.add_argument("--trials", type=int, default=100_000)
    p_var.add_argument("--beta2", type=float, default=0.999)
    p_var.add_argument("--sigma", type=float, default=1.0)
    p_var.add_argument("--seed", type=int, default=42)
    p_var.add_argument("--mode", choices=sorted(_VAR_MODES), default="exclude-current")
    p_var.add_argument("--output", default=None,
                       help="write CSV here instead of stdout")
    p_var.set_defaults(func=_cmd_var_sim)

    p_mem = sub.add_parser("mem", help="weight and optimizer memory estimate")
    p_mem.add_argument("--arch", required=True,
                       help="builtin name (llama-60m .. llama-7b) or JSON file")
    p_mem.add_argument("--method", choices=memory.ESTIMATE_METHODS,
                       required=True)
    p_mem.add_argument("--rank", type=int, default=None)
    p_mem.add_argument("--output", default=None,
                       help="write JSON here instead of stdout")
    p_mem.set_defaults(func=_cmd_mem)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except linalg.ConvergenceError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        # validation raised after config parsing, e.g. a rank larger
        # than the task's matrices
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
