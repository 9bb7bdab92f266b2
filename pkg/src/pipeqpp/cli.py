"""Command-line entry point: generate, trace, train, eval, report.

Every command reads one YAML config; ``PIPEQPP_OUTPUT_DIR`` overrides its
``output_dir``.  Exit codes: 0 success, 1 usage error, 2 data or contract
violation.
"""
from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import harness
from .domain import QueryTrace, TraceMode, read_traces, validate_trace, write_traces
from .dataflow import DataflowError
from .models import (CheckpointError, ModelConfig, UnknownOperatorType, load_bundle, load_ocp,
                     save_ocp)
from .tracesim import (CostGroundTruthModel, PipelineSpec, SpecError, WorkloadTemplate,
                       execute_parallel,
                       execute_probe, execute_serial, generate_workload, make_templates)

ENV_OUTPUT_DIR = "PIPEQPP_OUTPUT_DIR"

DEFAULTS = {
    "output_dir": "runs/default",
    "workload": {"n_templates": 20, "queries_per_template": 100, "templates": None},
    "simulator": {"probe_chunks": 8, "noise": 0.03, "util_sensitivity": 0.6,
                  "penalties": {"CPU": 0.35, "MEM": 0.25, "IO": 0.45}},
    "model": ModelConfig().to_dict(),
    "training": {"held_out_templates": [3, 8, 13, 18]},
    "evaluation": {"sigmas": [], "group_percentiles": [25, 50, 75], "scans_only": False},
}


class UsageError(Exception):
    pass


class ContractError(Exception):
    pass


# ------------------------------------------------------------------ config

def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except yaml.YAMLError as e:
        raise UsageError(f"config file {path} is not valid YAML: {e}") from None
    if not isinstance(raw, dict):
        raise UsageError("config must be a mapping")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}")
    cfg = _merge(DEFAULTS, raw)
    # seeds must be explicit: no implicit entropy anywhere
    if cfg["workload"].get("seed") is None:
        raise UsageError("config is missing workload.seed")
    if cfg["training"].get("seed") is None:
        raise UsageError("config is missing training.seed")
    if cfg["evaluation"].get("sigmas") and cfg["evaluation"].get("noise_seed") is None:
        raise UsageError("config is missing evaluation.noise_seed")
    if os.environ.get(ENV_OUTPUT_DIR):
        cfg["output_dir"] = os.environ[ENV_OUTPUT_DIR]
    return cfg


def config_hash(cfg) -> str:
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def _train_config(cfg, **flags) -> harness.TrainConfig:
    try:
        return harness.TrainConfig.from_dict({**cfg["training"], **flags})
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad training section: {e}") from None


def _sim_model(cfg) -> CostGroundTruthModel:
    sim = cfg["simulator"]
    try:
        return CostGroundTruthModel.from_dict({"noise": sim["noise"],
                                               "util_sensitivity": sim["util_sensitivity"],
                                               "penalties": sim["penalties"],
                                               "types": sim.get("types") or {}})
    except (TypeError, ValueError, KeyError) as e:
        raise UsageError(f"bad simulator section: {e}") from None


# ------------------------------------------------------------------ files

class Run:
    def __init__(self, cfg):
        self.cfg = cfg
        self.root = Path(cfg["output_dir"])
        self.hash = config_hash(cfg)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def ensure(self, *parts) -> Path:
        p = self.path(*parts)
        try:
            p.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ContractError(f"cannot create output directory {p}: {e}") from None
        if not os.access(p, os.W_OK):
            raise ContractError(f"output directory {p} is not writable")
        return p

    def manifest(self, command, outputs, extra=None):
        files = {}
        for f in outputs:
            f = Path(f)
            files[str(f.relative_to(self.root))] = hashlib.sha256(f.read_bytes()).hexdigest()
        doc = {"command": command, "config_hash": self.hash, "files": files,
               "created": _dt.datetime.now(_dt.timezone.utc).isoformat(), **(extra or {})}
        out = self.ensure("manifests") / f"{command}.json"
        out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return out


def _write_text(path: Path, text: str):
    path.write_text(text, encoding="utf-8", newline="\n")


def _read_specs(run: Run):
    p = run.path("specs", "specs.jsonl")
    if not p.exists():
        raise ContractError(f"no specs at {p}; run 'generate' first")
    with open(p, encoding="utf-8") as f:
        return [PipelineSpec.from_dict(json.loads(line)) for line in f if line.strip()]


def _read(run: Run, name) -> list[QueryTrace]:
    p = run.path("traces", f"{name}.jsonl")
    if not p.exists():
        raise ContractError(f"no {name} traces at {p}; run 'trace --mode' first")
    return read_traces(p)


def _labeled_probe(run: Run):
    probe = _read(run, "probe")
    if all(t.total_latency for t in probe):
        return probe
    labels = {t.query_id: t.total_latency for t in _read(run, "parallel")}
    missing = [t.query_id for t in probe if t.query_id not in labels]
    if missing:
        raise ContractError(f"{len(missing)} probe traces have no latency label "
                            f"(first: {missing[0]})")
    return [t.with_latency(labels[t.query_id]) for t in probe]


def _templates(cfg):
    w = cfg["workload"]
    if w.get("templates"):
        try:
            return [WorkloadTemplate.from_dict(t) for t in w["templates"]]
        except (TypeError, ValueError) as e:
            raise UsageError(f"bad workload template: {e}") from None
    return make_templates(int(w["n_templates"]), int(w["seed"]))


def _ckpt_name(no_res_attn, no_ocp):
    parts = ["qpp"] + (["no_res_attn"] if no_res_attn else []) + (["no_ocp"] if no_ocp else [])
    return "_".join(parts)


# ------------------------------------------------------------------ commands

def cmd_generate(run: Run, args):
    cfg = run.cfg
    templates = _templates(cfg)
    specs = []
    for t in templates:
        try:
            specs += generate_workload(t, int(cfg["workload"]["queries_per_template"]),
                                       int(cfg["workload"]["seed"]))
        except ValueError as e:
            raise ContractError(f"template {t.template_id}: {e}") from None
    out = run.ensure("specs")
    spec_file = out / "specs.jsonl"
    _write_text(spec_file, "".join(json.dumps(s.to_dict(), sort_keys=True,
                                              separators=(",", ":")) + "\n" for s in specs))
    tpl_file = out / "templates.json"
    _write_text(tpl_file, json.dumps([t.to_dict() for t in templates], indent=1,
                                     sort_keys=True) + "\n")
    run.manifest("generate", [spec_file, tpl_file],
                 {"n_specs": len(specs), "seed": cfg["workload"]["seed"],
                  "query_seeds": {s.query_id: s.seed for s in specs}})
    print(f"wrote {len(specs)} specs to {spec_file}")


def cmd_trace(run: Run, args):
    specs = _read_specs(run)
    model = _sim_model(run.cfg)
    budget = int(run.cfg["simulator"]["probe_chunks"])
    if args.mode == "full":
        traces = [execute_serial(s, model, s.seed) for s in specs]
        name = "full"
    elif args.mode == "probe":
        traces = [execute_probe(s, model, s.seed, budget) for s in specs]
        name = "probe"
    else:
        traces = [execute_parallel(s, model, s.seed) for s in specs]
        name = "parallel"
    bad = [(t.query_id, v) for t in traces for v in validate_trace(t)]
    if bad:
        raise ContractError(f"{len(bad)} trace violations, first: {bad[0][0]}: {bad[0][1]}")
    out = run.ensure("traces") / f"{name}.jsonl"
    write_traces(out, traces)
    run.manifest(f"trace-{name}", [out], {"n_traces": len(traces), "probe_chunks": budget})
    print(f"wrote {len(traces)} {args.mode} traces to {out}")


def cmd_train(run: Run, args):
    cfg = run.cfg
    ckpts = run.ensure("checkpoints")
    reports = run.ensure("reports")
    if args.stage == "ocp":
        tc = _train_config(cfg)
        full = [t for t in _read(run, "full") if t.mode is TraceMode.FULL_COLLECTION]
        try:
            ocp, history = harness.train_ocp(full, tc, tuple(cfg["model"]["ocp_hidden"]))
        except ValueError as e:
            raise ContractError(str(e)) from None
        path = ckpts / "ocp.ckpt"
        save_ocp(ocp, path, meta={"train": tc.to_dict()})
        curve = reports / "curve_ocp.csv"
        rows = ["op_type,epoch,train_loss"] + [f"{t},{i + 1},{loss:.9g}"
                                              for t, ls in history.items()
                                              for i, loss in enumerate(ls)]
        _write_text(curve, "\n".join(rows) + "\n")
        run.manifest("train-ocp", [path, curve])
        print(f"wrote {path}")
        return
    tc = _train_config(cfg, no_res_attn=args.no_res_attn, no_ocp=args.no_ocp)
    ocp = None
    if not args.no_ocp:
        p = ckpts / "ocp.ckpt"
        if not p.exists():
            raise ContractError("stage qpp needs a trained ocp checkpoint "
                                "(run 'train --stage ocp' first, or pass --no-ocp)")
        ocp = load_ocp(p)
    traces = _labeled_probe(run)
    held = set(tc.held_out_templates)
    eval_traces = [t for t in traces if t.template_id in held] or None
    try:
        bundle, curve = harness.train_qpp(traces, ocp, tc, ModelConfig.from_dict(cfg["model"]),
                                          eval_traces=eval_traces)
    except ValueError as e:
        raise ContractError(str(e)) from None
    bundle.meta["config_hash"] = run.hash
    name = _ckpt_name(args.no_res_attn, args.no_ocp)
    path = ckpts / f"{name}.ckpt"
    bundle.save(path)
    curve_path = reports / f"curve_{name}.csv"
    _write_text(curve_path, harness.curve_csv(curve))
    run.manifest(f"train-{name}", [path, curve_path], {"ablation": bundle.ablation.to_dict()})
    print(f"wrote {path}")


def cmd_eval(run: Run, args):
    ev = run.cfg["evaluation"]
    ckpt = Path(args.checkpoint) if args.checkpoint else run.path("checkpoints", "qpp.ckpt")
    if not ckpt.exists():
        raise ContractError(f"checkpoint {ckpt} not found")
    bundle = load_bundle(ckpt)
    held = set(_train_config(run.cfg).held_out_templates)
    traces = [t for t in _labeled_probe(run) if t.template_id in held]
    if not traces:
        raise ContractError("no held-out traces to evaluate")
    report = harness.evaluate(bundle, traces, tuple(ev["group_percentiles"]))
    name = ckpt.stem
    out = run.ensure("reports")
    csv_path, md_path = out / f"eval_{name}.csv", out / f"summary_{name}.md"
    _write_text(csv_path, harness.report_csv(report))
    _write_text(md_path, harness.summary_markdown(report, name))
    outputs = [csv_path, md_path]
    sigmas = args.sigmas if args.sigmas is not None else ev.get("sigmas") or []
    if sigmas:
        if ev.get("noise_seed") is None:
            raise UsageError("config is missing evaluation.noise_seed")
        rows = harness.robustness_suite(bundle, traces, sigmas, int(ev["noise_seed"]),
                                        bool(ev.get("scans_only")))
        rob = out / f"robustness_{name}.md"
        _write_text(rob, harness.robustness_markdown(rows, name))
        outputs.append(rob)
    run.manifest(f"eval-{name}", outputs, {"checkpoint": str(ckpt)})
    print(harness.summary_markdown(report, name), end="")


def cmd_report(run: Run, args):
    out = run.path("reports")
    parts = sorted(out.glob("summary_*.md")) if out.exists() else []
    if not parts:
        raise ContractError(f"no evaluation summaries in {out}; run 'eval' first")
    lines = ["# Latency prediction report", ""]
    for p in parts:
        lines += [f"## {p.stem.removeprefix('summary_')}", "", p.read_text().rstrip(), ""]
    for p in sorted(out.glob("robustness_*.md")):
        lines += [f"## Robustness: {p.stem.removeprefix('robustness_')}", "",
                  p.read_text().rstrip(), ""]
    path = out / "report.md"
    _write_text(path, "\n".join(lines))
    run.manifest("report", [path])
    print(f"wrote {path}")


# ------------------------------------------------------------------ entry

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sigmas(text):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sigma list {text!r}") from None
    if any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("sigmas must be >= 0")
    return vals


def build_parser():
    p = _Parser(prog="pipeqpp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="YAML run configuration")
        return s

    add("generate", "generate pipeline specs from workload templates")
    t = add("trace", "simulate specs and write JSONL traces")
    t.add_argument("--mode", required=True, choices=["full", "probe", "parallel-label"])
    tr = add("train", "train cost predictors or the latency model")
    tr.add_argument("--stage", required=True, choices=["ocp", "qpp"])
    tr.add_argument("--no-res-attn", action="store_true",
                    help="feed expanded competition matrices without attention adjustment")
    tr.add_argument("--no-ocp", action="store_true",
                    help="feed encoded raw operator features instead of predicted costs")
    e = add("eval", "evaluate a checkpoint on the held-out templates")
    e.add_argument("--checkpoint", help="defaults to checkpoints/qpp.ckpt")
    e.add_argument("--sigmas", type=_sigmas, help="comma-separated noise levels, e.g. 0,1.0,1.5")
    add("report", "collect evaluation summaries into one markdown report")
    return p


COMMANDS = {"generate": cmd_generate, "trace": cmd_trace, "train": cmd_train,
            "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "train" and args.stage == "ocp" and (args.no_res_attn or args.no_ocp):
            raise UsageError("ablation flags apply to --stage qpp only")
        run = Run(load_config(args.config))
        COMMANDS[args.command](run, args)
        return 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ContractError, CheckpointError, DataflowError, SpecError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except UnknownOperatorType as e:
        print(f"error: {e.args[0]}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as e:
        print(f"error: unreadable input file: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
