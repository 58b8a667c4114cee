"""Command-line entry points: generate | train | eval | collect.

Configuration lives in a flat key-value text file (``key = value`` per
line, ``#`` comments); command-line flags override file entries. The full
key list is documented in the README.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields

import numpy as np

from .calibrator import CalibratorState
from .collector import CollectorConfig, collect_corpus
from .env import EnvConfig
from .policy import ConformalPolicy, load_policy, save_policy
from .trainer import (
    ArgmaxRule,
    FixedThresholdRule,
    MetricsRecord,
    RandomRule,
    RunConfig,
    RunResult,
    TrainingError,
    evaluate,
    logs_to_ndjson,
    run_baseline,
    run_ccpo,
    state_from_dict,
    state_to_dict,
)
from .traces import (
    PriceTable,
    SyntheticConfig,
    TraceFormatError,
    TraceValidationError,
    generate_synthetic,
    read_trace_file,
    save_traces,
)

CSV_COLUMNS = ("method", "alpha", "lam", "seed", "cost_cents", "coverage", "avg_len", "set_size", "n_episodes")


def parse_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line.strip()!r}")
            key, value = text.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(value: str, target_type):
    if target_type is bool:
        return value.lower() in ("1", "true", "yes", "on")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    return value


_PRICE_KEYS = {f"price_{name}": name for name in ("base_in", "base_out", "guide_in", "guide_out")}
_SYN_PREFIX = "synthetic_"


def build_configs(entries: dict[str, str]) -> tuple[RunConfig, SyntheticConfig | None, dict[str, str]]:
    """Assemble run and synthetic-generator configs from flat key-value entries."""
    run_kwargs = {}
    price_kwargs = {}
    syn_kwargs = {}
    rest = {}
    run_fields = {f.name: f for f in fields(RunConfig)}
    syn_fields = {f.name: f for f in fields(SyntheticConfig)}
    for key, value in entries.items():
        if key in _PRICE_KEYS:
            price_kwargs[_PRICE_KEYS[key]] = float(value)
        elif key.startswith(_SYN_PREFIX) and key[len(_SYN_PREFIX):] in syn_fields:
            name = key[len(_SYN_PREFIX):]
            run_type = type(getattr(SyntheticConfig(num_traces=1), name))
            syn_kwargs[name] = _coerce(value, run_type)
        elif key == "hidden":
            run_kwargs["hidden"] = tuple(int(x) for x in value.split(",") if x.strip())
        elif key in run_fields:
            default = getattr(RunConfig(), key)
            target = type(default) if default is not None else float
            run_kwargs[key] = _coerce(value, target)
        else:
            rest[key] = value
    if price_kwargs:
        run_kwargs["prices"] = PriceTable(**price_kwargs)
    run = RunConfig(**run_kwargs)
    syn = None
    if syn_kwargs:
        syn_kwargs.setdefault("horizon", run.horizon)
        syn_kwargs.setdefault("seed", run.seed)
        syn = SyntheticConfig(**syn_kwargs)
    return run, syn, rest


def _load_entries(args) -> dict[str, str]:
    entries = parse_config_file(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def cmd_generate(args) -> int:
    try:
        entries = _load_entries(args)
        _, syn, _ = build_configs(entries)
        if syn is None:
            print("error: no synthetic_* keys in the config", file=sys.stderr)
            return 2
        traces = generate_synthetic(syn)
        unsolvable = sum(1 for t in traces if t.solvable_hint is False)
        save_traces(args.output, traces, syn.horizon, syn.answer_vocab_size)
        print(
            f"wrote {len(traces)} traces (T={syn.horizon}, vocab={syn.answer_vocab_size}, "
            f"unsolvable={unsolvable / max(1, len(traces)):.3f}) to {args.output}"
        )
        return 0
    except (OSError, ValueError, TraceValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _split_traces(traces, config: RunConfig, n_cal: int):
    # Deterministic split: calibration from the tail, training from the head.
    if len(traces) <= n_cal:
        raise ValueError(f"need more than {n_cal} traces for a calibration split, got {len(traces)}")
    return list(traces[:-n_cal]), list(traces[-n_cal:])


def cmd_train(args) -> int:
    try:
        entries = _load_entries(args)
        run, syn, rest = build_configs(entries)
        n_cal = int(rest.get("calibration_traces", "200"))
        if rest.get("trace_path"):
            tf = read_trace_file(rest["trace_path"])
            if tf.horizon != run.horizon:
                print(
                    f"error: trace horizon {tf.horizon} does not match configured horizon {run.horizon}",
                    file=sys.stderr,
                )
                return 2
            traces = list(tf.traces)
        elif syn is not None:
            traces = generate_synthetic(syn)
        else:
            print("error: config needs trace_path or synthetic_* keys", file=sys.stderr)
            return 2
        train_traces, cal_traces = _split_traces(traces, run, n_cal)

        resume_state = None
        if args.resume:
            with open(args.resume, "r", encoding="utf-8") as fh:
                resume_state = state_from_dict(json.load(fh))

        if run.baseline == "ccpo":
            result = run_ccpo(run, train_traces, cal_traces, resume_state)
            policy, logs = result.policy, result.logs
            if result.calibration is not None:
                logs = logs + [
                    {
                        "calibration_kappa": result.calibration.kappa,
                        "calibration_coverage": result.calibration.empirical_coverage,
                        "calibration_n": result.calibration.n_calibration,
                    }
                ]
            save_policy(args.checkpoint, policy, extras={"method": "ccpo", "horizon": run.horizon,
                                                         "token_scale": run.token_scale,
                                                         "alpha": run.alpha, "lam": run.lam, "seed": run.seed})
            if args.state:
                with open(args.state, "w", encoding="utf-8") as fh:
                    json.dump(state_to_dict(result.state), fh)
        else:
            target, logs = run_baseline(run.baseline, run, train_traces, cal_traces)
            _save_target(args.checkpoint, target, run)
        with open(args.log, "w", encoding="utf-8") as fh:
            fh.write(logs_to_ndjson(logs))
        print(f"trained method={run.baseline}; checkpoint={args.checkpoint}; log={args.log}")
        return 0
    except TrainingError as exc:
        with open(args.log, "w", encoding="utf-8") as fh:
            fh.write(logs_to_ndjson(exc.logs))
        print(f"error: {exc} (partial logs kept at {args.log})", file=sys.stderr)
        return 1
    except (OSError, ValueError, TraceFormatError, TraceValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _save_target(path: str, target, run: RunConfig) -> None:
    common = {"horizon": run.horizon, "token_scale": run.token_scale,
              "alpha": run.alpha, "lam": run.lam, "seed": run.seed}
    if isinstance(target, ConformalPolicy):
        save_policy(path, target, extras={"method": run.baseline, **common})
        return
    if isinstance(target, RandomRule):
        obj = {"method": "random", **common}
    elif isinstance(target, FixedThresholdRule):
        obj = {"method": "fixed-threshold", "low": target.low, "high": target.high, **common}
    elif isinstance(target, ArgmaxRule):
        obj = {
            "method": "cpo",
            "shape": list(target.net.sizes),
            "params": target.theta.tolist(),
            **common,
        }
    else:
        raise ValueError(f"cannot checkpoint target {target!r}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)


def _load_target(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    method = obj.get("method", "ccpo")
    if method in ("ccpo", "cpo-batch", "cpo-online"):
        policy, extras = load_policy(path)
        return policy, method, extras
    if method == "random":
        return RandomRule(), method, obj
    if method == "fixed-threshold":
        return FixedThresholdRule(float(obj["low"]), float(obj["high"])), method, obj
    if method == "cpo":
        from .numerics import MLP

        sizes = obj["shape"]
        net = MLP(sizes[0], tuple(sizes[1:-1]), sizes[-1])
        theta = np.asarray(obj["params"], dtype=np.float64)
        if theta.shape != (net.n_params,):
            raise ValueError("parameter vector does not match the shape descriptor")
        return ArgmaxRule(net, theta), method, obj
    raise ValueError(f"unknown checkpoint method {method!r}")


def cmd_eval(args) -> int:
    try:
        entries = _load_entries(args)
        run, _, _ = build_configs(entries)
        tf = read_trace_file(args.traces)
        if not tf.traces:
            print("error: empty test set", file=sys.stderr)
            return 2
        rows = []
        for ckpt in args.checkpoint:
            target, method, extras = _load_target(ckpt)
            horizon = int(extras.get("horizon", run.horizon))
            if horizon != tf.horizon:
                print(
                    f"error: checkpoint horizon {horizon} does not match trace horizon {tf.horizon}",
                    file=sys.stderr,
                )
                return 2
            env_cfg = EnvConfig(horizon=horizon, token_scale=float(extras.get("token_scale", run.token_scale)))
            metrics = evaluate(
                target, list(tf.traces), run.prices, env_cfg, run.eval_cost_mode, seed=run.seed
            )
            rows.append(
                {
                    "method": method,
                    "alpha": extras.get("alpha", run.alpha),
                    "lam": extras.get("lam", run.lam),
                    "seed": extras.get("seed", run.seed),
                    "cost_cents": metrics.total_cost_cents,
                    "coverage": metrics.coverage,
                    "avg_len": metrics.avg_length,
                    "set_size": metrics.avg_set_size,
                    "n_episodes": metrics.n_episodes,
                }
            )
        with open(args.output, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote {len(rows)} rows to {args.output}")
        return 0
    except (OSError, ValueError, TraceFormatError, TraceValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def cmd_collect(args) -> int:
    try:
        entries = _load_entries(args)
        collector_keys = {f.name for f in fields(CollectorConfig)}
        kwargs = {}
        for key, value in entries.items():
            name = key[len("collector_"):] if key.startswith("collector_") else key
            if name in collector_keys:
                default = getattr(CollectorConfig("http://x", "m", "http://x", "m"), name)
                kwargs[name] = _coerce(value, type(default))
        config = CollectorConfig(**kwargs)
        questions = []
        with open(args.questions, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    questions.append((obj["question"], obj["answer"]))
        traces, skipped, vocab = collect_corpus(questions, config, log=lambda msg: print(msg, file=sys.stderr))
        save_traces(
            args.output,
            traces,
            config.horizon,
            vocab.size,
            extras={"collector_framing": "recorded"},
        )
        print(f"collected {len(traces)} traces ({len(skipped)} skipped) to {args.output}")
        return 0
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ccpo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic trace corpus")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", help="override a config key (key=value)")
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a policy or baseline")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--state", help="write full trainer state for resume")
    p.add_argument("--resume", help="resume from a trainer state file")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on a test corpus")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("collect", help="collect traces from live endpoints")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append")
    p.add_argument("--questions", required=True, help="NDJSON of {question, answer}")
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_collect)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
