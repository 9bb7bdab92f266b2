"""Staged training, Q-Error evaluation, ablations and cardinality-noise robustness."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataflow import tree_from_trace
from .domain import DEFAULT_CATALOG
from .models.encoding import FeatureEncoder, TargetScaler, operator_features
from .models.ocp import OcpModel, OperatorCostPredictor
from .models.qpp import (Ablation, ModelBundle, ModelConfig, build_graph, collate,
                         node_raw_features, vertex_sample)
from .tracesim.costs import aggregate_costs

log = logging.getLogger(__name__)

PERCENTILES = (50, 90, 95, 99)


# ------------------------------------------------------------------ data

@dataclass
class Corpus:
    """Specs with their serial full-collection traces and labeled probe traces."""

    specs: list
    full: list
    probe: list

    def by_templates(self, ids, which="probe"):
        ids = set(ids)
        return [t for t in getattr(self, which) if t.template_id in ids]


def simulate_corpus(n_templates, queries_per_template, seed, model=None, probe_chunks=8):
    from .tracesim import (CostGroundTruthModel, execute_parallel, execute_probe,
                           execute_serial, generate_workload, make_templates)
    model = model or CostGroundTruthModel()
    specs, full, probe = [], [], []
    for tpl in make_templates(n_templates, seed):
        for spec in generate_workload(tpl, queries_per_template, seed):
            specs.append(spec)
            full.append(execute_serial(spec, model, spec.seed))
            label = execute_parallel(spec, model, spec.seed).total_latency
            probe.append(execute_probe(spec, model, spec.seed, probe_chunks).with_latency(label))
    return Corpus(specs, full, probe)


# ------------------------------------------------------------------ metrics

def q_error(prediction, actual) -> float:
    """max(p, a) / min(p, a); both must be positive."""
    p, a = float(prediction), float(actual)
    if not (p > 0 and a > 0) or not (math.isfinite(p) and math.isfinite(a)):
        raise ValueError(f"q_error needs positive finite inputs, got {p}, {a}")
    return max(p, a) / min(p, a)


def nearest_rank(values, pct) -> float:
    """Smallest value with at least ``pct`` percent of the data at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile of an empty list")
    rank = max(1, math.ceil(pct / 100.0 * v.size))
    return float(v[rank - 1])


def summarize(qerrors) -> dict:
    q = np.asarray(qerrors, dtype=np.float64)
    if q.size == 0:
        raise ValueError("cannot summarize zero Q-Errors")
    out = {"mean": float(q.mean())}
    for p in PERCENTILES:
        out[f"p{p}"] = nearest_rank(q, p)
    out["max"] = float(q.max())
    return out


# ------------------------------------------------------------------ configuration

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.03
    momentum: float = 0.9
    clip_norm: float = 5.0
    weight_decay: float = 0.0
    seed: int = 0
    no_res_attn: bool = False
    no_ocp: bool = False
    held_out_templates: tuple = ()
    train_templates: tuple | None = None
    ocp_epochs: int = 50
    ocp_batch_size: int = 32
    ocp_learning_rate: float = 0.05
    # "constant" or "cosine" (step size annealed to zero over the run)
    lr_schedule: str = "cosine"

    def __post_init__(self):
        self.held_out_templates = tuple(int(t) for t in self.held_out_templates)
        if self.train_templates is not None:
            self.train_templates = tuple(int(t) for t in self.train_templates)
            if set(self.train_templates) & set(self.held_out_templates):
                raise ValueError("held-out templates overlap the training templates")
        if self.learning_rate <= 0 or self.ocp_learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 1 or self.ocp_epochs < 1 or self.batch_size < 1 or self.ocp_batch_size < 1:
            raise ValueError("epochs and batch sizes must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    @property
    def ablation(self):
        return Ablation(no_res_attn=self.no_res_attn, no_ocp=self.no_ocp)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["held_out_templates"] = list(self.held_out_templates)
        if self.train_templates is not None:
            d["train_templates"] = list(self.train_templates)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training keys {sorted(unknown)}")
        return cls(**d)


def training_split(traces, config: TrainConfig):
    """Traces the trainer may read; held-out templates are never returned."""
    held = set(config.held_out_templates)
    out = [t for t in traces if t.template_id not in held]
    if config.train_templates is not None:
        out = [t for t in out if t.template_id in set(config.train_templates)]
    return out


class SGD:
    """Mini-batch gradient descent with momentum, L2 decay and global-norm clipping."""

    def __init__(self, params, lr, momentum=0.0, clip_norm=5.0, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.params]
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        k = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm else 1.0
        for p, g, v in zip(self.params, grads, self.velocity):
            v *= self.momentum
            v += g * k
            if self.weight_decay:
                v += self.weight_decay * p.value
            p.value = p.value - self.lr * v
        return norm


# ------------------------------------------------------------------ OCP stage

def ocp_samples(traces, catalog=DEFAULT_CATALOG):
    """Per-type (feature dicts, target cost arrays) from full-collection traces.

    Target is the operator's cost over all its chunks; the row and chunk
    features are the counts it actually processed.
    """
    out = {}
    for tr in traces:
        for op_id in sorted(tr.operators):
            rec = tr.operators[op_id]
            if not rec.records:
                continue
            rows = sum(r.rows for r in rec.records)
            target = aggregate_costs([r.cost for r in rec.records]).to_array()
            feats = operator_features(rec.instance, rec.utilization, rows, catalog,
                                      chunks=len(rec.records))
            xs, ys = out.setdefault(rec.instance.op_type, ([], []))
            xs.append(feats)
            ys.append(target)
    return {k: (xs, np.array(ys)) for k, (xs, ys) in out.items()}


def step_size(base, schedule, epoch, epochs):
    """Learning rate for a 1-based ``epoch``."""
    if schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / epochs))
    return base


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def train_ocp(traces, config: TrainConfig, hidden=(64, 64, 64), catalog=DEFAULT_CATALOG):
    """Fit one MLP per operator type; returns ``(OcpModel, {type: epoch losses})``."""
    traces = training_split(traces, config)
    if not traces:
        raise ValueError("no training traces for the cost predictors")
    samples = ocp_samples(traces, catalog)
    if not samples:
        raise ValueError("training traces contain no operator cost records")
    for t in catalog.names:
        if t not in samples:
            log.warning("operator type %s has no training samples; skipped", t)
    predictors, history = {}, {}
    for op_type in catalog.names:
        if op_type not in samples:
            continue
        feats, y = samples[op_type]
        rng = np.random.default_rng([config.seed, 1, catalog.index(op_type)])
        enc = FeatureEncoder.fit(feats)
        scaler = TargetScaler.fit(y)
        pred = OperatorCostPredictor(op_type, enc, scaler, hidden, rng)
        x, z = enc.encode_many(feats), scaler.transform(y)
        opt = SGD(pred.parameters(), config.ocp_learning_rate, config.momentum, config.clip_norm)
        losses = []
        for epoch in range(1, config.ocp_epochs + 1):
            opt.lr = step_size(config.ocp_learning_rate, config.lr_schedule, epoch,
                               config.ocp_epochs)
            total = 0.0
            for idx in _batches(len(x), config.ocp_batch_size, rng):
                opt.zero_grad()
                with T.Tape() as tape:
                    loss = T.mse(pred.forward(x[idx]), z[idx])
                tape.backward(loss)
                opt.step()
                total += float(loss.value) * len(idx)
            losses.append(total / len(x))
        predictors[op_type] = pred
        history[op_type] = losses
    pooled = TargetScaler.fit(np.vstack([samples[t][1] for t in predictors]))
    return OcpModel(predictors, pooled, catalog), history


# ------------------------------------------------------------------ QPP stage

def fit_encoders(traces, catalog=DEFAULT_CATALOG):
    """Vertex and raw-operator encoders from the nodes of the training trees."""
    vertex, raw = [], []
    for tr in traces:
        tree = tree_from_trace(tr, catalog)
        ops, extras, _ = node_raw_features(tr, tree, catalog)
        raw += ops
        vertex += [vertex_sample(o, e) for o, e in zip(ops, extras)]
    return FeatureEncoder.fit(vertex), FeatureEncoder.fit(raw)


def _label_stats(latencies):
    logs = np.log(latencies)
    sd = float(logs.std())
    return float(logs.mean()), sd if sd > 1e-12 else 1.0


def train_qpp(traces, ocp: OcpModel | None, config: TrainConfig,
              model_config: ModelConfig | None = None, eval_traces=None,
              catalog=DEFAULT_CATALOG):
    """Jointly train fusion weights, calibrator and summarizer on labeled traces.

    Returns ``(bundle, curve)`` with one curve row per epoch:
    ``(epoch, train_loss, eval_mean_qerror)`` (NaN without ``eval_traces``).
    """
    ablation = config.ablation
    if ocp is None and not ablation.no_ocp:
        raise ValueError("train the cost predictors first, or use the no_ocp ablation")
    traces = [t for t in training_split(traces, config) if t.total_latency]
    if not traces:
        raise ValueError("no labeled training traces")
    vertex_enc, raw_enc = fit_encoders(traces, catalog)
    latencies = np.array([t.total_latency for t in traces])
    bundle = ModelBundle(vertex_enc, ocp=None if ablation.no_ocp else ocp,
                         raw_encoder=raw_enc if ablation.no_ocp else None,
                         config=model_config, ablation=ablation, seed=config.seed,
                         catalog=catalog, label_stats=_label_stats(latencies),
                         meta={"train": config.to_dict()})
    graphs = [build_graph(t, bundle) for t in traces]
    _fit_baselines(bundle, graphs, latencies)
    labels = bundle.normalize_latency(latencies).reshape(-1, 1)
    eval_graphs = [build_graph(t, bundle) for t in eval_traces] if eval_traces else None

    opt = SGD(bundle.qpp_parameters(), config.learning_rate, config.momentum, config.clip_norm,
              config.weight_decay)
    rng = np.random.default_rng([config.seed, 3])
    curve = []
    for epoch in range(1, config.epochs + 1):
        opt.lr = step_size(config.learning_rate, config.lr_schedule, epoch, config.epochs)
        total = 0.0
        for idx in _batches(len(graphs), config.batch_size, rng):
            batch = collate([graphs[i] for i in idx])
            opt.zero_grad()
            with T.Tape() as tape:
                loss = T.mse(bundle.forward(batch), labels[idx])
            tape.backward(loss)
            opt.step()
            total += float(loss.value) * len(idx)
        ev = float("nan")
        if eval_graphs:
            pred = bundle.predict_graphs(eval_graphs)
            ev = float(np.mean([q_error(p, g.latency) for p, g in zip(pred, eval_graphs)]))
        curve.append((epoch, total / len(graphs), ev))
    return bundle, curve


def _fit_baselines(bundle, graphs, latencies):
    bundle.meta["baseline_median"] = float(np.median(latencies))
    if not bundle.ablation.no_ocp:
        sums = np.array([max(g.ocp_elapsed, 1e-12) for g in graphs])
        # one scale factor, fitted in log space, turns summed work into latency
        bundle.meta["baseline_ocp_scale"] = float(np.exp(np.mean(np.log(latencies / sums))))


# ------------------------------------------------------------------ evaluation

@dataclass
class EvalReport:
    rows: list  # (query_id, template_id, prediction, actual, q_error)
    summary: dict
    groups: list = field(default_factory=list)  # (label, lo, hi, count, mean q_error)
    baselines: dict = field(default_factory=dict)

    @property
    def qerrors(self):
        return [r[4] for r in self.rows]


def latency_groups(actual, qerrors, percentiles=(25, 50, 75)):
    actual, qerrors = np.asarray(actual), np.asarray(qerrors)
    edges = [float(actual.min())] + [nearest_rank(actual, p) for p in percentiles] \
        + [float(actual.max())]
    groups = []
    for k, (lo, hi) in enumerate(zip(edges, edges[1:])):
        # (lo, hi], with the first group also taking its lower edge
        sel = ((actual > lo) | ((k == 0) & (actual >= lo))) & (actual <= hi)
        n = int(sel.sum())
        groups.append((f"G{k + 1}", lo, hi, n, float(qerrors[sel].mean()) if n else float("nan")))
    return groups


def evaluate(bundle: ModelBundle, traces, group_percentiles=(25, 50, 75), graphs=None) -> EvalReport:
    traces = [t for t in traces if t.total_latency]
    if not traces:
        raise ValueError("no labeled traces to evaluate")
    graphs = graphs or [build_graph(t, bundle) for t in traces]
    preds = bundle.predict_graphs(graphs)
    rows = [(t.query_id, t.template_id, float(p), float(t.total_latency),
             q_error(p, t.total_latency)) for t, p in zip(traces, preds)]
    actual = [r[3] for r in rows]
    qs = [r[4] for r in rows]
    baselines = {}
    if "baseline_median" in bundle.meta:
        c = bundle.meta["baseline_median"]
        baselines["constant_median"] = summarize([q_error(c, a) for a in actual])
    if "baseline_ocp_scale" in bundle.meta:
        k = bundle.meta["baseline_ocp_scale"]
        baselines["ocp_elapsed_sum"] = summarize(
            [q_error(max(k * g.ocp_elapsed, 1e-12), a) for g, a in zip(graphs, actual)])
    return EvalReport(rows, summarize(qs), latency_groups(actual, qs, group_percentiles),
                      baselines)


# ------------------------------------------------------------------ robustness

def noise_multipliers(sigma, size, rng) -> np.ndarray:
    """Cardinality multipliers f with ln f ~ Normal(0, sigma^2)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    return np.exp(rng.normal(0.0, sigma, size=size)) if sigma > 0 else np.ones(size)


def inject_cardinality_noise(traces, sigma, seed, scans_only=False):
    """Multiply operators' input_rows by log-normal factors; labels are untouched."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    traces = list(traces)
    if sigma == 0:
        return traces
    out = []
    for i, tr in enumerate(traces):
        rng = np.random.default_rng([int(seed), i])
        ids = sorted(tr.operators)
        mult = noise_multipliers(sigma, len(ids), rng)
        ops = dict(tr.operators)
        for op_id, f in zip(ids, mult):
            rec = ops[op_id]
            if scans_only and rec.instance.op_type != "Scan":
                continue
            inst = rec.instance.with_rows(int(round(rec.instance.input_rows * f)))
            ops[op_id] = dataclasses.replace(rec, instance=inst)
        out.append(dataclasses.replace(tr, operators=ops))
    return out


def robustness_suite(bundle, traces, sigmas, seed=0, scans_only=False):
    """One evaluation per sigma on noise-injected inputs; rows of (sigma, summary)."""
    sigmas = list(sigmas)
    if not sigmas:
        raise ValueError("no sigmas given")
    rows = []
    for s in sigmas:
        rep = evaluate(bundle, inject_cardinality_noise(traces, s, seed, scans_only))
        rows.append((float(s), rep.summary))
    return rows


# ------------------------------------------------------------------ reports

SUMMARY_COLUMNS = ("mean", "p50", "p90", "p95", "p99", "max")


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_id", "template_id", "prediction", "actual", "q_error"])
    for qid, tid, p, a, q in report.rows:
        w.writerow([qid, tid, f"{p:.9g}", f"{a:.9g}", f"{q:.9g}"])
    return buf.getvalue()


def _md_row(name, s):
    return f"| {name} | " + " | ".join(f"{s[c]:.3f}" for c in SUMMARY_COLUMNS) + " |"


def summary_markdown(report: EvalReport, name="model") -> str:
    head = "| method | " + " | ".join(SUMMARY_COLUMNS) + " |"
    lines = [head, "|" + "---|" * (len(SUMMARY_COLUMNS) + 1), _md_row(name, report.summary)]
    for b, s in report.baselines.items():
        lines.append(_md_row(b, s))
    lines += ["", "| latency group | from (s) | to (s) | queries | mean Q-Error |",
              "|---|---|---|---|---|"]
    for label, lo, hi, n, m in report.groups:
        lines.append(f"| {label} | {lo:.6g} | {hi:.6g} | {n} | {m:.3f} |")
    return "\n".join(lines) + "\n"


def robustness_markdown(rows, name="model") -> str:
    head = "| method | " + " | ".join(f"sigma={s:g} mean | sigma={s:g} max" for s, _ in rows) + " |"
    sep = "|" + "---|" * (2 * len(rows) + 1)
    body = f"| {name} | " + " | ".join(f"{r['mean']:.3f} | {r['max']:.3f}" for _, r in rows) + " |"
    return "\n".join([head, sep, body]) + "\n"


def curve_csv(curve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "eval_mean_qerror"])
    for e, loss, ev in curve:
        w.writerow([e, f"{loss:.9g}", "" if math.isnan(ev) else f"{ev:.9g}"])
    return buf.getvalue()
