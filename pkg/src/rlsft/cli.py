"""``rlsft`` command line: synth, train, eval, oracle-check.

Every command reads one JSON config, validates it against a schema (unknown
keys are rejected), and writes its artifacts under ``--out``. Outputs are a
pure function of config and seed; wall-clock figures go to ``timing.log``
only.

Exit status: 0 success, 2 config/schema/data error (including an oversized
oracle instance), 3 numerical divergence, 4 oracle failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from pathlib import Path

import jsonschema

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .domain import (DatasetError, PrefSet, Vocab, chosen_only, load_demo_set, load_pref_set,
                     save_demo_set, save_pref_set, unique_prompts)
from .evaluation import (ImplicitReward, bt_diagnostic, convergence_stats, log_prob_gap,
                         win_rate)
from .oracle import OracleRefusal, format_table, report_lines
from .policies import AutoregressivePolicy, DomainError, TabularPolicy, make_rng
from .rewards import FeaturizedReward, TabularReward
from .synth import (SynthesisError, World, example1_demos, example1_world, load_world,
                    random_tabular_world, synth_demo, synth_pref)
from .trainers import (TrainerConfig, TrainingDivergence, TrainTrace,
                       inner_iterations_for_epochs, run_irft, run_rft, run_sft)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_ORACLE = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ schemas

_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_SEED = {"type": "integer"}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


WORLD_SCHEMA = {"oneOf": [
    _obj({"kind": {"const": "example1"}, "R": _POS_NUM, "beta_star": _POS_NUM}, ["kind"]),
    _obj({"kind": {"const": "random_tabular"}, "n_prompts": _POS_INT,
          "n_continuations": _POS_INT, "vocab_size": {"type": "integer", "minimum": 2},
          "cont_len": _POS_INT, "reward_scale": {"type": "number", "minimum": 0},
          "ref_scale": {"type": "number", "minimum": 0}, "beta_star": _POS_NUM}, ["kind"]),
]}

SYNTH_SCHEMA = _obj({
    "world": WORLD_SCHEMA,
    "n_demos": _POS_INT,
    "demo_source": {"enum": ["expert", "example1"]},
    "n_prefs": _NONNEG_INT,
    "n_heldout": _NONNEG_INT,
    "pref_sampler": {"enum": ["ref", "expert"]},
    "bt_noise": {"type": "boolean"},
    "seed": _SEED,
}, ["world", "n_demos"])

TRAINER_SCHEMA = _obj({
    "T": _POS_INT, "K": _POS_INT, "epochs": _POS_NUM, "eta": _POS_NUM,
    "eta_schedule": {"enum": ["constant", "inv_sqrt_TK"]}, "beta": _POS_NUM,
    "batch_size": _POS_INT, "h": {"enum": ["identity", "log_sigmoid"]},
    "reward_clamp_R": {"oneOf": [_POS_NUM, {"type": "null"}]},
    "refresh_ref": {"type": "boolean"},
})

TRAIN_SCHEMA = _obj({
    "method": {"enum": ["sft", "rft", "irft"]},
    "data": {"type": "string"},
    "data_kind": {"enum": ["demos", "prefs_chosen"]},
    "world": {"type": "string"},
    "policy": _obj({
        "family": {"enum": ["tabular", "autoregressive"]},
        "init": {"type": "string"},
        "max_len": _POS_INT, "end_token": {"oneOf": [_NONNEG_INT, {"type": "null"}]},
        "context": _POS_INT, "n_buckets": _POS_INT}),
    "ref": {"type": "string"},
    "reward": _obj({"family": {"enum": ["tabular", "featurized"]}, "init": {"type": "string"}}),
    "trainer": TRAINER_SCHEMA,
    "seed": _SEED,
    "derived": {"type": "object"},
}, ["method", "data", "trainer"])

EVAL_SCHEMA = _obj({
    "policy": {"type": "string"},
    "ref": {"type": "string"},
    "beta": _POS_NUM,
    "metrics": _obj({
        "gap": _obj({"prefs": {"type": "string"}}, ["prefs"]),
        "win_rate": _obj({"opponent": {"type": "string"}, "judge": {"type": "string"},
                          "prompts": {"type": "string"}, "n_per_prompt": _POS_INT,
                          "coupling": {"enum": ["common", "independent"]}},
                         ["opponent", "judge", "prompts"]),
        "bt_diagnostic": _obj({"prefs": {"type": "string"}, "reward": {"type": "string"}},
                              ["prefs"]),
        "convergence_stats": _obj({"trace": {"type": "string"}}, ["trace"]),
    }),
    "seed": _SEED,
}, ["metrics"])

ORACLE_SCHEMA = _obj({
    "n_configs": _POS_INT, "max_prompts": _POS_INT, "max_continuations": _POS_INT,
    "seed": _SEED,
})

SCHEMAS = {"synth": SYNTH_SCHEMA, "train": TRAIN_SCHEMA, "eval": EVAL_SCHEMA,
           "oracle-check": ORACLE_SCHEMA}


def validate_config(command, config):
    try:
        jsonschema.validate(config, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid {command} config at {where}: {exc.message}") from None


def load_config(path, command, seed=None):
    """Read and validate; ``seed`` (from --seed) overrides the config value."""
    if path is None:
        config = {}
    else:
        try:
            config = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    validate_config(command, config)
    config = copy.deepcopy(config)
    if seed is not None:
        config["seed"] = int(seed)
    return config


# ------------------------------------------------------------------ helpers


def _dump_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class _Run:
    """Output directory, stdout echo and the timing log."""

    def __init__(self, out, quiet):
        self.out = None if out is None else Path(out)
        self.quiet = quiet
        self._t0 = time.perf_counter()
        self._timing = []
        if self.out is not None:
            try:
                self.out.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise ConfigError(f"cannot create output directory {out}: {exc}") from None

    def path(self, name):
        return self.out / name

    def say(self, text):
        if not self.quiet:
            print(text)

    def time(self, label):
        self._timing.append(f"{label}\t{(time.perf_counter() - self._t0) * 1e3:.3f} ms")

    def step_times(self, trace):
        self._timing += [f"step {r.step}\t{r.elapsed_ms:.3f} ms" for r in trace.records]

    def close(self, command):
        if self.out is None:
            return
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        lines = [f"# rlsft {__version__} {command} started {stamp}"] + self._timing
        self.path("timing.log").write_text("\n".join(lines) + "\n")


def _resolve(base, name):
    p = Path(name)
    return p if p.is_absolute() or base is None else Path(base) / p


# ------------------------------------------------------------------ synth


def _build_world(spec, rng) -> World:
    if spec["kind"] == "example1":
        return example1_world(spec["R"], spec["beta_star"])
    return random_tabular_world(rng, spec["n_prompts"], spec["n_continuations"],
                                spec["vocab_size"], spec["cont_len"], spec["reward_scale"],
                                spec["ref_scale"], spec["beta_star"])


def resolve_synth(config):
    c = copy.deepcopy(config)
    w = c["world"]
    if w["kind"] == "example1":
        w.setdefault("R", 1.0)
        w.setdefault("beta_star", 1.0)
    else:
        for key, val in (("n_prompts", 3), ("n_continuations", 5), ("vocab_size", 6),
                         ("cont_len", 2), ("reward_scale", 1.0), ("ref_scale", 1.0),
                         ("beta_star", 1.0)):
            w.setdefault(key, val)
    c.setdefault("demo_source", "example1" if w["kind"] == "example1" else "expert")
    if c["demo_source"] == "example1" and w["kind"] != "example1":
        raise ConfigError("demo_source 'example1' needs the example1 world")
    c.setdefault("n_prefs", 0)
    c.setdefault("n_heldout", 0)
    c.setdefault("pref_sampler", "ref")
    c.setdefault("bt_noise", False)
    c.setdefault("seed", 0)
    return c


def cmd_synth(config, run: _Run):
    c = resolve_synth(config)
    seed = c["seed"]
    world = _build_world(c["world"], make_rng(seed, 10))
    world.save(run.out)
    if c["demo_source"] == "example1":
        one = example1_demos()
        demos = type(one)(one.items * c["n_demos"], one.vocab)
    else:
        demos = synth_demo(world, c["n_demos"], make_rng(seed, 11))
    save_demo_set(demos, run.path("demos.jsonl"))
    summary = {"command": "synth", "n_demos": len(demos), "n_prompts": world.support.n_prompts,
               "n_cells": world.support.size}
    n_pairs = c["n_prefs"] + c["n_heldout"]
    if n_pairs:
        sampler = world.ref if c["pref_sampler"] == "ref" else world.expert
        prefs = synth_pref(world, sampler, n_pairs, make_rng(seed, 12), bt_noise=c["bt_noise"])
        # tie-skipped items shrink the set; the held-out side absorbs the shortfall
        order = make_rng(seed, 13).permutation(len(prefs))
        n_train = min(c["n_prefs"], len(prefs))
        parts = {"prefs.jsonl": order[:n_train], "prefs_heldout.jsonl": order[n_train:]}
        for name, idx in parts.items():
            if len(idx):
                save_pref_set(PrefSet(tuple(prefs.items[i] for i in idx), prefs.vocab),
                              run.path(name))
        summary.update(n_prefs=n_train, n_heldout=len(prefs) - n_train)
    _dump_json(run.path("resolved_config.json"), c)
    _dump_json(run.path("summary.json"), summary)
    run.time("synth done")
    run.say(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------ train


def _load_model(name, base, kind):
    model = load_checkpoint(_resolve(base, name))
    if kind == "policy" and not isinstance(model, (TabularPolicy, AutoregressivePolicy)):
        raise ConfigError(f"{name} is not a policy checkpoint")
    if kind == "reward" and not isinstance(model, (TabularReward, FeaturizedReward)):
        raise ConfigError(f"{name} is not a reward checkpoint")
    return model


def resolve_train(config, base=None):
    """Fill defaults and compute K (epoch mode), eta_t and the SPIN flag."""
    c = copy.deepcopy(config)
    c.setdefault("seed", 0)
    c.setdefault("data_kind", "demos")
    pol = c.setdefault("policy", {})
    pol.setdefault("family", "tabular")
    if pol["family"] == "autoregressive":
        pol.setdefault("init", "zeros")
        pol.setdefault("max_len", 4)
        pol.setdefault("end_token", None)
        pol.setdefault("context", 1)
        pol.setdefault("n_buckets", 1)
        c.setdefault("ref", "init")
    else:
        for key in ("max_len", "end_token", "context", "n_buckets"):
            if key in pol:
                raise ConfigError(f"policy.{key} only applies to the autoregressive family")
        pol.setdefault("init", "ref")
        c.setdefault("ref", "world")
    if c["method"] == "rft":
        if pol["family"] != "tabular":
            raise ConfigError("method 'rft' on autoregressive models is unsupported: "
                              "closed-form policy alignment needs a tabular policy")
        rw = c.setdefault("reward", {})
        rw.setdefault("family", "tabular")
        rw.setdefault("init", "zeros")
    elif "reward" in c:
        raise ConfigError("the reward section only applies to method 'rft'")
    tr = c["trainer"]
    tr.setdefault("T", 1)
    if "epochs" in tr and "K" in tr:
        raise ConfigError("give either trainer.K or trainer.epochs, not both")
    derived = {}
    if "epochs" in tr:
        n = len(_load_train_data(c, base))
        tr["K"] = inner_iterations_for_epochs(n, tr.get("batch_size", 1), tr.pop("epochs"),
                                              tr["T"])
        derived["K_from_epochs"] = {"n_samples": n, "K": tr["K"]}
    tr.setdefault("K", 1)
    for key, val in (("eta", 0.1), ("eta_schedule", "constant"), ("beta", 1.0),
                     ("batch_size", 1), ("h", "identity"), ("reward_clamp_R", None),
                     ("refresh_ref", False)):
        tr.setdefault(key, val)
    try:
        tc = TrainerConfig(seed=c["seed"], **tr)
    except ValueError as exc:
        raise ConfigError(f"invalid trainer section: {exc}") from None
    derived["eta_t"] = tc.stepsize()
    derived["total_steps"] = tc.total_steps
    derived["spin_equivalent"] = c["method"] == "irft" and tc.T == 1
    c["derived"] = derived
    return c, tc


def _load_train_data(c, base):
    path = _resolve(base, c["data"])
    if c.get("data_kind", "demos") == "prefs_chosen":
        return chosen_only(load_pref_set(path))
    return load_demo_set(path)


def _build_models(c, base, data):
    pol = c["policy"]
    world = load_world(_resolve(base, c["world"])) if "world" in c else None
    if pol["family"] == "autoregressive":
        vocab = data.vocab
        if pol["init"] == "zeros":
            init = AutoregressivePolicy(vocab, pol["max_len"], end_token=pol["end_token"],
                                        context=pol["context"], n_buckets=pol["n_buckets"])
        else:
            init = _load_model(pol["init"], base, "policy")
        ref = init if c["ref"] == "init" else _load_model(c["ref"], base, "policy")
        return init, ref
    if c["ref"] == "world":
        if world is None:
            raise ConfigError("ref 'world' needs a world descriptor in config key 'world'")
        ref = world.ref
    elif c["ref"] == "uniform":
        if world is None:
            raise ConfigError("ref 'uniform' needs a world descriptor for the support")
        ref = TabularPolicy(world.support)
    else:
        ref = _load_model(c["ref"], base, "policy")
    if pol["init"] == "ref":
        init = ref
    elif pol["init"] == "uniform":
        init = TabularPolicy(ref.support)
    else:
        init = _load_model(pol["init"], base, "policy")
    return init, ref


def _check_vocab(model_vocab: Vocab, data_vocab: Vocab, what):
    if model_vocab.size != data_vocab.size:
        raise ConfigError(f"vocab mismatch: {what} has vocab size {model_vocab.size}, "
                          f"dataset has {data_vocab.size}")


_KEYWORDS = ("world", "uniform", "ref", "init", "zeros")


def _absolute_paths(c, base):
    """Rewrite file references as absolute paths so the echo runs from anywhere."""
    def fix(v):
        return v if v in _KEYWORDS else str(_resolve(base, v).resolve())

    for key in ("data", "world", "ref"):
        if key in c:
            c[key] = fix(c[key])
    for sec in ("policy", "reward"):
        if sec in c and "init" in c[sec]:
            c[sec]["init"] = fix(c[sec]["init"])
    return c


def cmd_train(config, run: _Run, base=None):
    c, tc = resolve_train(config, base)
    c = _absolute_paths(c, base)
    base = None
    data = _load_train_data(c, base)
    init, ref = _build_models(c, base, data)
    _check_vocab(ref.vocab, data.vocab, "the reference policy")
    _dump_json(run.path("resolved_config.json"), c)
    run.time("setup done")
    summary = {"command": "train", "method": c["method"], "steps": tc.total_steps}
    if c["method"] == "sft":
        policy, trace = run_sft(init, data, tc)
    elif c["method"] == "irft":
        policy, trace = run_irft(init, ref, data, tc)
    else:
        if c["reward"]["init"] == "zeros":
            reward = (TabularReward(ref.support) if c["reward"]["family"] == "tabular"
                      else FeaturizedReward(ref.vocab))
        else:
            reward = _load_model(c["reward"]["init"], base, "reward")
        reward, policy, trace = run_rft(reward, ref, data, tc)
        save_checkpoint(reward, run.path("reward.ckpt"))
    run.time("training done")
    run.step_times(trace)
    save_checkpoint(policy, run.path("policy.ckpt"))
    trace.to_csv(run.path("trace.csv"), timing=False)
    summary["final_grad_norm"] = float(trace.records[-1].grad_norm)
    summary["final_objective"] = float(trace.records[-1].objective)
    _dump_json(run.path("summary.json"), summary)
    run.say(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------ eval


def _load_prompts(path):
    path = Path(path)
    if path.suffix == ".json":
        return list(load_world(path).prompts)
    try:
        return unique_prompts(d.prompt for d in load_demo_set(path))
    except DatasetError:
        return unique_prompts(t.prompt for t in load_pref_set(path))


def _load_prefs(path, vocab, base):
    prefs = load_pref_set(_resolve(base, path))
    _check_vocab(vocab, prefs.vocab, "the policy checkpoint")
    return prefs


def cmd_eval(config, run: _Run, base=None):
    c = copy.deepcopy(config)
    c.setdefault("seed", 0)
    for key in ("policy", "ref"):
        if key in c:
            c[key] = str(_resolve(base, c[key]).resolve())
    for section in c["metrics"].values():
        for key, val in section.items():
            if isinstance(val, str) and key != "coupling" and val != "implicit":
                section[key] = str(_resolve(base, val).resolve())
    base = None
    m = c["metrics"]
    if not m:
        raise ConfigError("no metrics selected")
    needs_policy = any(k in m for k in ("gap", "win_rate")) or (
        "bt_diagnostic" in m and m["bt_diagnostic"].get("reward", "implicit") == "implicit")
    policy = None
    if needs_policy:
        if "policy" not in c:
            raise ConfigError("the selected metrics need a 'policy' checkpoint")
        policy = _load_model(c["policy"], base, "policy")
    summary = {"command": "eval"}
    if "gap" in m:
        rep = log_prob_gap(policy, _load_prefs(m["gap"]["prefs"], policy.vocab, base))
        rep.to_csv(run.path("gap.csv"))
        summary["gap"] = rep.summary()
    if "win_rate" in m:
        w = m["win_rate"]
        w.setdefault("n_per_prompt", 1)
        w.setdefault("coupling", "common")
        opponent = _load_model(w["opponent"], base, "policy")
        judge = _load_model(w["judge"], base, "reward")
        _check_vocab(policy.vocab, opponent.vocab, "the opponent checkpoint")
        prompts = _load_prompts(_resolve(base, w["prompts"]))
        rep = win_rate(policy, opponent, judge, prompts, make_rng(c["seed"], 20),
                       w["n_per_prompt"], w["coupling"])
        rep.to_csv(run.path("win_rate.csv"))
        summary["win_rate"] = rep.summary()
    if "bt_diagnostic" in m:
        b = m["bt_diagnostic"]
        if b.get("reward", "implicit") != "implicit":
            scorer = _load_model(b["reward"], base, "reward")
        else:
            if "ref" not in c:
                raise ConfigError("bt_diagnostic on the implicit reward needs 'ref'")
            c.setdefault("beta", 1.0)
            scorer = ImplicitReward(policy, _load_model(c["ref"], base, "policy"), c["beta"])
            b["reward"] = "implicit"
        vocab = scorer.vocab if hasattr(scorer, "vocab") else scorer.policy.vocab
        rep = bt_diagnostic(scorer, _load_prefs(b["prefs"], vocab, base))
        rep.to_csv(run.path("bt_diagnostic.csv"))
        summary["bt_diagnostic"] = rep.summary()
    if "convergence_stats" in m:
        rep = convergence_stats(TrainTrace.from_csv(_resolve(base, m["convergence_stats"]["trace"])))
        rep.to_csv(run.path("convergence.csv"))
        summary["convergence_stats"] = rep.summary()
    _dump_json(run.path("resolved_config.json"), c)
    _dump_json(run.path("summary.json"), summary)
    run.time("eval done")
    run.say(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------ oracle-check


def cmd_oracle_check(config, run: _Run, kernels=None):
    from .battery import run_battery

    c = copy.deepcopy(config)
    for key, val in (("n_configs", 10), ("max_prompts", 3), ("max_continuations", 5),
                     ("seed", 0)):
        c.setdefault(key, val)
    reports = run_battery(c["seed"], c["n_configs"], kernels, c["max_prompts"],
                          c["max_continuations"])
    failed = [r.quantity for r in reports if not r.passed]
    summary = {"command": "oracle-check", "checks": len(reports), "failed": len(failed),
               "failures": failed}
    if run.out is not None:
        run.path("oracle_report.jsonl").write_text("\n".join(report_lines(reports)) + "\n")
        _dump_json(run.path("resolved_config.json"), c)
        _dump_json(run.path("summary.json"), summary)
    run.time("battery done")
    run.say(format_table(reports))
    if failed:
        print(f"oracle-check: {len(failed)} of {len(reports)} checks failed: "
              + ", ".join(failed), file=sys.stderr)
        return EXIT_ORACLE
    run.say(f"oracle-check: all {len(reports)} checks passed")
    return EXIT_OK


# ------------------------------------------------------------------ entry point

COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "oracle-check": cmd_oracle_check}


def build_parser():
    parser = argparse.ArgumentParser(prog="rlsft", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rlsft {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--quiet", action="store_true", help="suppress stdout summaries")
    return parser


def main(argv=None, kernels=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command != "oracle-check":
            if args.config is None:
                raise ConfigError(f"{args.command} needs --config")
            if args.out is None:
                raise ConfigError(f"{args.command} needs --out")
        config = load_config(args.config, args.command, args.seed)
        run = _Run(args.out, args.quiet)
        base = None if args.config is None else Path(args.config).parent
        if args.command == "synth":
            code = cmd_synth(config, run)
        elif args.command == "oracle-check":
            code = cmd_oracle_check(config, run, kernels)
        else:
            code = COMMANDS[args.command](config, run, base)
        run.close(args.command)
        return code
    except TrainingDivergence as exc:
        print(f"rlsft: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OracleRefusal as exc:
        print(f"rlsft: oracle refused: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, DatasetError, CheckpointError, DomainError, SynthesisError,
            FileNotFoundError, ValueError) as exc:
        print(f"rlsft: {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
