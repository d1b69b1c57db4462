"""Training and evaluation harness: the end-to-end risk-recognition run.

One epoch = full forward over the training window (spatial pass per snapshot,
temporal pass per node chain), responsibilities + mixture statistics, the
semi-supervised loss with the reconstruction penalty, one backward sweep and
one Adam step. Reports are canonical (byte-reproducible for a fixed config
and seed); wall-clock timing goes to a separate log.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tape
from .config import RunConfig
from .encoder import (EncoderConfig, EncoderParams, EmbeddingTable, encode,
                      init_encoder_params, pack_window, recon_entry_count,
                      reconstruction_loss, PackedWindow)
from .graphs import (CsvSchema, DynamicGraph, FeatureTable, GraphError, LabelSet,
                     LabelStatus, bucket_snapshots, compute_features, derive_labels,
                     parse_edge_csv, train_test_split, write_manifest)
from .risk import (RiskHeadConfig, RiskHeadParams, designate_risk_components,
                   gmm_moments, init_risk_head, responsibilities, risk_score,
                   semi_supervised_loss, auc)
from .synth import synth_trust_edges
from .tape import (Param, adam_step, backward, constant, save_tensors, load_tensors,
                   scale, zero_grads)


class TrainError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# dataset loading
# ---------------------------------------------------------------------------

def _parse_synth_spec(spec: str) -> dict[str, int]:
    # synth:trust:nodes=500,weeks=40,seed=0
    parts = spec.split(":")
    if len(parts) < 2 or parts[0] != "synth" or parts[1] != "trust":
        raise GraphError(f"unknown synthetic dataset {spec!r}")
    kw: dict[str, int] = {}
    if len(parts) > 2 and parts[2]:
        for item in parts[2].split(","):
            key, _, val = item.partition("=")
            kw[key.strip()] = int(val)
    return kw


def load_edges(cfg: RunConfig):
    path = cfg.dataset_path()
    if path.startswith("synth:"):
        kw = _parse_synth_spec(path)
        return synth_trust_edges(
            n_nodes=kw.get("nodes", 500), weeks=kw.get("weeks", 40),
            edges_per_week=kw.get("edges", 180),
            risk_fraction=kw.get("riskpct", 10) / 100.0,
            n_communities=kw.get("comms", 8), seed=kw.get("seed", 0))
    schema = CsvSchema(src=cfg.col_src, dst=cfg.col_dst, weight=cfg.col_weight,
                       time=cfg.col_time, delimiter=cfg.delimiter,
                       has_header=cfg.has_header)
    return parse_edge_csv(path, schema)


@dataclass
class DataBundle:
    graph: DynamicGraph
    labels: LabelSet
    features: FeatureTable
    train_steps: int

    @property
    def test_steps(self) -> list[int]:
        first = self.graph.snapshots[0].index
        return [s.index for s in self.graph.snapshots[self.train_steps:]]

    @property
    def train_step_ids(self) -> list[int]:
        return [s.index for s in self.graph.snapshots[:self.train_steps]]


def prepare_data(cfg: RunConfig) -> DataBundle:
    edges = load_edges(cfg)
    graph = bucket_snapshots(edges, cfg.freq)
    train_steps = cfg.train_steps if cfg.train_steps > 0 else max(1, int(0.7 * graph.n_steps))
    if train_steps >= graph.n_steps:
        raise GraphError(f"train_steps {train_steps} leaves no test steps (T={graph.n_steps})")
    labels = derive_labels(graph, cfg.risk_ratio, cfg.unlabeled_ratio, cfg.seed)
    features = compute_features(graph, train_steps)
    return DataBundle(graph=graph, labels=labels, features=features, train_steps=train_steps)


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

@dataclass
class Model:
    enc_cfg: EncoderConfig
    head_cfg: RiskHeadConfig
    enc_params: EncoderParams
    head_params: RiskHeadParams

    def all_params(self) -> list[Param]:
        return self.enc_params.all_params() + self.head_params.all_params()

    def tensors(self) -> dict[str, np.ndarray]:
        out = {p.name: p.value for p in self.all_params()}
        for li, nm in enumerate(self.head_params.norms):
            out[f"head.bn{li}.running_mean"] = nm.running_mean.reshape(1, -1)
            out[f"head.bn{li}.running_var"] = nm.running_var.reshape(1, -1)
        return out

    def load_tensors_dict(self, data: dict[str, np.ndarray]) -> None:
        for p in self.all_params():
            if p.name not in data:
                raise TrainError(f"checkpoint missing tensor {p.name!r}")
            if data[p.name].shape != p.value.shape:
                raise TrainError(f"checkpoint tensor {p.name!r} has shape "
                                 f"{data[p.name].shape}, expected {p.value.shape}")
            p.value = data[p.name].copy()
        for li, nm in enumerate(self.head_params.norms):
            nm.running_mean = data[f"head.bn{li}.running_mean"].ravel().copy()
            nm.running_var = data[f"head.bn{li}.running_var"].ravel().copy()


def build_model(cfg: RunConfig, graph: DynamicGraph, rng: np.random.Generator) -> Model:
    enc_cfg = EncoderConfig(dim=cfg.dim, layers=cfg.layers, heads=cfg.heads,
                            feature_dim=8, recon_mode=cfg.recon_mode)
    head_cfg = RiskHeadConfig(in_dim=cfg.dim, components=cfg.components,
                              hidden=tuple(cfg.head_hidden))
    enc_params = init_encoder_params(enc_cfg, graph.type_set, rng)
    head_params = init_risk_head(head_cfg, rng)
    return Model(enc_cfg=enc_cfg, head_cfg=head_cfg, enc_params=enc_params,
                 head_params=head_params)


def label_component_mask(pw: PackedWindow, labels: LabelSet, k_count: int,
                         risky_components: set[int] | None = None) -> np.ndarray:
    """(N, K) indicator: labeled rows get ones on their class's components.

    With K = 2 risky maps to component 2 and safe to component 1; larger K
    spreads each class over its designated component set.
    """
    risky_set = sorted(risky_components or {k_count})
    safe_set = sorted(set(range(1, k_count + 1)) - set(risky_set)) or [1]
    mask = np.zeros((pw.n_rows, k_count))
    for r, (t, node) in enumerate(pw.rows):
        status = labels.status(node, t)
        if status is LabelStatus.UNLABELED:
            continue
        targets = risky_set if status is LabelStatus.RISKY else safe_set
        for k in targets:
            mask[r, k - 1] = 1.0
    return mask


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    bundle: DataBundle
    loss_curve: list[float]
    train_rows: int
    runtime_s: float
    risk_components: set[int] = field(default_factory=lambda: {2})


def train_model(cfg: RunConfig, bundle: DataBundle | None = None,
                progress: bool = False) -> TrainResult:
    cfg.validate()
    t_start = time.perf_counter()
    if bundle is None:
        bundle = prepare_data(cfg)
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg, bundle.graph, rng)
    pw = pack_window(bundle.graph, bundle.features, bundle.train_step_ids)
    mask = label_component_mask(pw, bundle.labels, cfg.components)
    if mask.sum() == 0 and cfg.tau3 > 0:
        raise TrainError("no labeled samples in the training window with tau3 > 0")
    n_entries = max(recon_entry_count(pw), 1)
    params = model.all_params()
    epochs = cfg.resolved_epochs()
    drop_unlabeled = cfg.ablation == "supervised"
    loss_curve: list[float] = []

    prev_guard = tape.set_finite_guard(False)
    try:
        for epoch in range(epochs):
            erng = np.random.default_rng([cfg.seed, 7919, epoch])
            table = encode(bundle.graph, model.enc_cfg, model.enc_params,
                           bundle.features, packed=pw)
            gamma = responsibilities(table.z, model.head_params, train=True)
            stats = gmm_moments(table.z, gamma)
            c_rec = reconstruction_loss(table.z, pw, model.enc_cfg, rng=erng)
            if cfg.normalize_recon:
                c_rec = scale(c_rec, 1.0 / n_entries)
            loss = semi_supervised_loss(table.z, gamma, stats, mask, cfg.tau3, c_rec,
                                        drop_unlabeled=drop_unlabeled,
                                        normalize_label=cfg.normalize_label_term)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainError(f"epoch {epoch}: loss is not finite")
            loss_curve.append(value)
            backward(loss)
            adam_step(params, cfg.lr)
            zero_grads(params)
            if progress and (epoch % 10 == 0 or epoch == epochs - 1):
                print(f"epoch {epoch:4d} loss {value:.6f}", flush=True)
        if epochs == 0:
            # initial loss only, no update
            with tape.no_grad():
                table = encode(bundle.graph, model.enc_cfg, model.enc_params,
                               bundle.features, packed=pw)
                gamma = responsibilities(table.z, model.head_params, train=True)
                stats = gmm_moments(table.z, gamma)
                c_rec = reconstruction_loss(table.z, pw, model.enc_cfg,
                                            rng=np.random.default_rng([cfg.seed, 7919, 0]))
                if cfg.normalize_recon:
                    c_rec = scale(c_rec, 1.0 / n_entries)
                loss = semi_supervised_loss(table.z, gamma, stats, mask, cfg.tau3,
                                            c_rec, drop_unlabeled=drop_unlabeled,
                                            normalize_label=cfg.normalize_label_term)
                loss_curve.append(loss.item())
    finally:
        tape.set_finite_guard(prev_guard)

    risk_comps = {2} if cfg.components == 2 else _designate(model, bundle, pw, mask)
    return TrainResult(model=model, bundle=bundle, loss_curve=loss_curve,
                       train_rows=pw.n_rows, runtime_s=time.perf_counter() - t_start,
                       risk_components=risk_comps)


def _designate(model: Model, bundle: DataBundle, pw: PackedWindow,
               mask: np.ndarray) -> set[int]:
    with tape.no_grad():
        table = encode(bundle.graph, model.enc_cfg, model.enc_params,
                       bundle.features, packed=pw)
        gamma = responsibilities(table.z, model.head_params, train=False).value
    labeled_rows = np.where(mask.sum(axis=1) > 0)[0]
    labeled_risky = np.array([bundle.labels.truth(pw.rows[r][1], pw.rows[r][0])
                              for r in labeled_rows])
    return designate_risk_components(gamma, labeled_rows, labeled_risky,
                                     model.head_cfg.components)


# ---------------------------------------------------------------------------
# evaluation and scoring
# ---------------------------------------------------------------------------

@dataclass
class ScoreTable:
    rows: list[tuple[int, int]]           # (t, node)
    risk: np.ndarray                      # (N,)
    component: np.ndarray                 # argmax responsibility, 1-based

    def by_step(self) -> dict[int, dict[int, float]]:
        out: dict[int, dict[int, float]] = {}
        for (t, node), r in zip(self.rows, self.risk):
            out.setdefault(t, {})[node] = float(r)
        return out


def score_all(result: TrainResult) -> ScoreTable:
    """Eval-mode risk probabilities for every active (snapshot, node) pair of
    the full span (running batch-norm statistics, frozen parameters)."""
    model, bundle = result.model, result.bundle
    pw = pack_window(bundle.graph, bundle.features)
    with tape.no_grad():
        table = encode(bundle.graph, model.enc_cfg, model.enc_params,
                       bundle.features, packed=pw)
        gamma = responsibilities(table.z, model.head_params, train=False).value
    if not np.all(np.isfinite(gamma)):
        raise TrainError("evaluation produced non-finite responsibilities")
    risk = risk_score(gamma, result.risk_components)
    comp = gamma.argmax(axis=1) + 1
    return ScoreTable(rows=pw.rows, risk=risk, component=comp)


@dataclass
class MetricsReport:
    run_id: str
    config: RunConfig
    loss_curve: list[float]
    per_step_auc: dict[int, float]
    skipped_steps: list[int]
    mean_test_auc: float | None
    train_rows: int
    total_rows: int
    n_steps: int
    train_steps: int
    runtime_s: float

    def canonical_json(self) -> str:
        """Byte-reproducible report body; excludes wall-clock runtime."""
        payload = {
            "run_id": self.run_id,
            "config": dict(self.config.canonical_items()),
            "loss_curve": self.loss_curve,
            "test_auc_per_step": {str(t): v for t, v in sorted(self.per_step_auc.items())},
            "skipped_steps": self.skipped_steps,
            "mean_test_auc": self.mean_test_auc,
            "train_rows": self.train_rows,
            "total_rows": self.total_rows,
            "snapshots": self.n_steps,
            "train_snapshots": self.train_steps,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def evaluate(result: TrainResult, cfg: RunConfig, scores: ScoreTable | None = None) -> MetricsReport:
    bundle = result.bundle
    if scores is None:
        scores = score_all(result)
    by_step = scores.by_step()
    per_step_auc: dict[int, float] = {}
    skipped: list[int] = []
    for t in bundle.test_steps:
        step_scores = by_step.get(t, {})
        nodes = sorted(step_scores)
        if not nodes:
            skipped.append(t)
            continue
        truth = [bundle.labels.truth(u, t) for u in nodes]
        if all(truth) or not any(truth):
            skipped.append(t)
            continue
        per_step_auc[t] = auc([step_scores[u] for u in nodes], truth)
    mean_auc = float(np.mean(list(per_step_auc.values()))) if per_step_auc else None
    return MetricsReport(run_id=cfg.run_id(), config=cfg, loss_curve=result.loss_curve,
                         per_step_auc=per_step_auc, skipped_steps=skipped,
                         mean_test_auc=mean_auc, train_rows=result.train_rows,
                         total_rows=len(scores.rows), n_steps=bundle.graph.n_steps,
                         train_steps=bundle.train_steps, runtime_s=result.runtime_s)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def write_scores(path, scores: ScoreTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("node\tt\trisk_probability\tcomponent\n")
        for (t, node), r, c in zip(scores.rows, scores.risk, scores.component):
            fh.write(f"{node}\t{t}\t{r:.10g}\t{c}\n")


def read_scores(path) -> ScoreTable:
    rows: list[tuple[int, int]] = []
    risk: list[float] = []
    comp: list[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            node, t, r, c = line.rstrip("\n").split("\t")
            rows.append((int(t), int(node)))
            risk.append(float(r))
            comp.append(int(c))
    return ScoreTable(rows=rows, risk=np.asarray(risk), component=np.asarray(comp))


def run_training(cfg: RunConfig, out_dir: str, progress: bool = False) -> MetricsReport:
    """Full pipeline: train, score, evaluate, and write the run directory.

    Writes checkpoint.bin, report.json (canonical), scores.tsv, config.txt,
    manifest.txt, and run.log (timings; not byte-reproducible).
    """
    os.makedirs(out_dir, exist_ok=True)
    result = train_model(cfg, progress=progress)
    scores = score_all(result)
    report = evaluate(result, cfg, scores)
    save_tensors(os.path.join(out_dir, "checkpoint.bin"), result.model.tensors())
    write_scores(os.path.join(out_dir, "scores.tsv"), scores)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.canonical_json())
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.canonical_text())
    write_manifest(result.bundle.graph, os.path.join(out_dir, "manifest.txt"))
    with open(os.path.join(out_dir, "run.log"), "w", encoding="utf-8") as fh:
        fh.write(f"run_id {report.run_id}\n")
        fh.write(f"runtime_s {result.runtime_s:.3f}\n")
        mean = "nan" if report.mean_test_auc is None else f"{report.mean_test_auc:.6f}"
        fh.write(f"mean_test_auc {mean}\n")
    return report


def load_run(run_dir: str) -> tuple[RunConfig, Model, DataBundle]:
    """Rebuild a trained model from a run directory (config + checkpoint)."""
    from .config import load_config

    cfg = load_config(os.path.join(run_dir, "config.txt"))
    bundle = prepare_data(cfg)
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg, bundle.graph, rng)
    model.load_tensors_dict(load_tensors(os.path.join(run_dir, "checkpoint.bin")))
    return cfg, model, bundle
