"""Command-line driver: synth -> features -> graph -> train / tune / explain.

Every stage reads and writes under one work directory::

    data/       recordings (CSV)
    features/   BandFeatureSet tensors
    graphs/     SparseGraph JSON (node features referenced, not copied)
    results/    metrics, tuning journal, Pareto archive, topology export
    models/     per-fold checkpoints written by ``train --save-models``

Failures print a JSON envelope ``{"stage", "message", "hint"}`` on stderr and
exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .connectivity import KINDS, SparseGraph, connectivity_matrix, knn_sparsify
from .eeg_io import Montage, RecordingFormatError, SynthSpec, generate_synthetic, load_recording, write_recording
from .ggcn import GgcnConfig, ParamStore
from .motpe import OBJECTIVES, SearchSpace, Study
from .pipeline import GraphConfig, RunConfig, explain_cv, group_by_subject, run_cv
from .spectral import BANDS, BandFeatureSet, WindowPlan, extract_band_features, multitaper_spectra
from .training import Split, SplitPlan, TrainConfig

log = logging.getLogger("eeggraph")


class StageError(Exception):
    def __init__(self, message: str, hint: str = "", code: int = 1):
        super().__init__(message)
        self.hint, self.code = hint, code


@dataclass
class TuneConfig:
    n_trials: int = 50
    repeats: int = 1  # CV repeats per trial; the outer fold count stays 5
    sampler: str = "motpe"
    space: dict = field(default_factory=dict)  # keyword overrides of SearchSpace.default

    def __post_init__(self):
        self.search_space()
        if self.n_trials < 1 or self.repeats < 1:
            raise ValueError("n_trials and repeats must be positive")
        if self.sampler not in ("motpe", "random"):
            raise ValueError(f"sampler must be 'motpe' or 'random', got {self.sampler!r}")

    def search_space(self) -> SearchSpace:
        allowed = {"max_blocks", "k_range", "width_range", "steps_range", "lr_range", "batch_sizes"}
        if set(self.space) - allowed:
            raise ValueError(f"unknown search-space overrides {sorted(set(self.space) - allowed)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in self.space.items()}
        return SearchSpace.default(**kw)


@dataclass
class CliConfig:
    workdir: str = "run"
    data_dir: str | None = None  # real recordings; synthetic data is generated when absent
    synth: SynthSpec = field(default_factory=SynthSpec)
    run: RunConfig = field(default_factory=RunConfig)
    tune: TuneConfig = field(default_factory=TuneConfig)
    repeats: int = 5

    @classmethod
    def from_dict(cls, d: dict) -> "CliConfig":
        unknown = set(d) - {"workdir", "data_dir", "synth", "graph", "model", "train", "seed", "tune", "repeats"}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        run = RunConfig.from_dict({k: d[k] for k in ("graph", "model", "train", "seed") if k in d})
        cfg = cls(d.get("workdir", "run"), d.get("data_dir"), SynthSpec.from_dict(d.get("synth", {})), run,
                  TuneConfig(**d.get("tune", {})), int(d.get("repeats", 5)))
        cfg.validate()
        return cfg

    def validate(self):
        g = self.run.graph
        if g.band not in BANDS:
            raise ValueError(f"band must be one of {sorted(BANDS)}, got {g.band!r}")
        if g.kind not in KINDS:
            raise ValueError(f"feature kind must be one of {KINDS}, got {g.kind!r}")
        if self.data_dir is not None and not Path(self.data_dir).is_dir():
            raise ValueError(f"data_dir {self.data_dir} does not exist")
        if not 1 <= self.repeats <= 50:
            raise ValueError("repeats must be in 1..50")

    def to_dict(self) -> dict:
        d = {"workdir": self.workdir, "data_dir": self.data_dir, "synth": json.loads(self.synth.to_json()),
             "tune": asdict(self.tune), "repeats": self.repeats}
        d.update(self.run.to_dict())
        return d

    @property
    def root(self) -> Path:
        return Path(self.workdir)

    def dir(self, name: str) -> Path:
        return self.root / name


# --- helpers ----------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _feature_name(subject: str, segment: int, band: str) -> str:
    return f"{subject}_seg{segment}_{band}"


def _graph_tag(g: GraphConfig) -> str:
    return f"{g.band}_{g.kind}_k{g.k_neighbors}"


def _require(paths, what: str, stage: str):
    paths = sorted(paths)
    if not paths:
        raise StageError(f"no {what} found: run {stage} first", hint=f"run {stage} first", code=2)
    return paths


def _load_features(cfg: CliConfig, band: str):
    files = _require(cfg.dir("features").glob(f"*_{band}.json"), f"{band} features", "features")
    return [BandFeatureSet.load(p) for p in files]


def _graphs_from_features(features, gcfg: GraphConfig):
    out = []
    for f in features:
        if not gcfg.keeps(f.segment_id):
            continue
        k = min(gcfg.k_neighbors, f.n_nodes - 1)
        out.append(knn_sparsify(connectivity_matrix(f, gcfg.kind), k, f))
    return out


def _load_graphs(cfg: CliConfig):
    g = cfg.run.graph
    files = _require(cfg.dir("graphs").glob(f"*_{_graph_tag(g)}.json"), f"{_graph_tag(g)} graphs", "graph")
    graphs = [SparseGraph.load(p) for p in files]
    graphs = [x for x in graphs if g.keeps(x.segment_id)]
    if not graphs:
        raise StageError(f"no graphs for segment {g.segments}", hint="run graph first", code=2)
    return sorted(graphs, key=lambda x: (x.subject_id, x.segment_id))


def _report_rows(results):
    rows = []
    for k, r in enumerate(results):
        s: Split = r["split"]
        rows.append({"iteration": k, "repeat": s.repeat, "fold": s.fold, "test": list(s.test),
                     "best_epoch": r["best_epoch"], "epochs": r["epochs"],
                     "best_val_loss": r["best_val_loss"], **r["report"].to_dict()})
    return rows


# --- commands ---------------------------------------------------------------

def cmd_synth(cfg: CliConfig) -> dict:
    out = cfg.dir("data")
    out.mkdir(parents=True, exist_ok=True)
    recs = generate_synthetic(cfg.synth)
    for rec in recs:
        write_recording(rec, out / f"{rec.subject_id}_seg{rec.segment_id}.csv")
    (cfg.root / "synth_spec.json").write_text(cfg.synth.to_json() + "\n")
    return {"recordings": len(recs), "dir": str(out)}


def cmd_features(cfg: CliConfig) -> dict:
    src = Path(cfg.data_dir) if cfg.data_dir else cfg.dir("data")
    files = _require(src.glob("*.csv"), f"recordings in {src}", "synth")
    out = cfg.dir("features")
    out.mkdir(parents=True, exist_ok=True)
    band = cfg.run.graph.band
    for p in files:
        try:
            rec = load_recording(p)
        except RecordingFormatError as exc:
            raise StageError(f"{p.name}: {exc}", hint="fix or remove the recording") from exc
        feats = extract_band_features(multitaper_spectra(rec, WindowPlan()), band)
        feats.save(out / (_feature_name(rec.subject_id, rec.segment_id, band) + ".json"))
    return {"features": len(files), "band": band, "dir": str(out)}


def cmd_graph(cfg: CliConfig) -> dict:
    g = cfg.run.graph
    features = _load_features(cfg, g.band)
    out = cfg.dir("graphs")
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for f in features:
        k = min(g.k_neighbors, f.n_nodes - 1)
        graph = knn_sparsify(connectivity_matrix(f, g.kind), k, f)
        name = _feature_name(f.subject_id, f.segment_id, g.band)
        graph.save(out / f"{name}_{g.kind}_k{g.k_neighbors}.json", feature_ref=f"../features/{name}.json")
        n += 1
    return {"graphs": n, "tag": _graph_tag(g), "dir": str(out)}


def _metrics_payload(cfg: CliConfig, results, summary) -> dict:
    return {"config": cfg.run.to_dict(), "summary": summary, "iterations": _report_rows(results),
            "n_iterations": len(results)}


def cmd_train(cfg: CliConfig, jobs: int = 1, save_models: bool = False) -> dict:
    graphs = _load_graphs(cfg)
    started = time.time()
    results, summary = run_cv(graphs, cfg.run, SplitPlan(repeats=cfg.repeats), jobs=jobs,
                              keep_models=save_models)
    res_dir = cfg.dir("results")
    name = f"metrics_{_graph_tag(cfg.run.graph)}"
    _write_json(res_dir / f"{name}.json", _metrics_payload(cfg, results, summary))
    _write_json(res_dir / f"{name}.timestamps.json",
                {"started": started, "finished": time.time(), "elapsed_s": time.time() - started})
    if save_models:
        model_cfg = cfg.run.ggcn_config(graphs[0].node_features.shape[1])
        for k, r in enumerate(results):
            r["store"].save(cfg.dir("models") / f"{_graph_tag(cfg.run.graph)}_iter{k:02d}.json",
                            meta={"ggcn": model_cfg.to_dict(), "test": list(r["split"].test)})
    return {"metrics": str(res_dir / f"{name}.json"),
            "auc_mean": summary["auc"]["mean"], "auc_sd": summary["auc"]["sd"]}


def effective_widths(params: dict, in_features: int) -> tuple:
    """Sampled block widths raised to the running input width, so that a
    block is never narrower than what feeds it."""
    widths, w = [], in_features
    for b in range(params["n_blocks"]):
        w = max(w, params[f"out_channels_{b}"])
        widths.append(w)
    return tuple(widths)


def assignment_to_run(base: RunConfig, params: dict, in_features: int) -> RunConfig:
    n_blocks = params["n_blocks"]
    model = {**base.model, "dropout": params["dropout"], "asap_ratio": params["asap_ratio"],
             "block_channels": effective_widths(params, in_features),
             "block_steps": tuple(params[f"prop_steps_{b}"] for b in range(n_blocks))}
    train = replace(base.train, learning_rate=params["lr"], batch_size=params["batch_size"])
    graph = replace(base.graph, k_neighbors=params["k_neighbors"])
    return RunConfig(graph, model, train, base.seed)


def cmd_tune(cfg: CliConfig, jobs: int = 1) -> dict:
    features = _load_features(cfg, cfg.run.graph.band)
    res_dir = cfg.dir("results")
    res_dir.mkdir(parents=True, exist_ok=True)
    tag = f"{cfg.run.graph.band}_{cfg.run.graph.kind}"
    journal = res_dir / f"tune_{tag}.jsonl"
    journal.unlink(missing_ok=True)
    study = Study(cfg.tune.search_space(), seed=cfg.run.seed, journal=journal, sampler=cfg.tune.sampler)
    cache = {}

    def objective(params, seed):
        run = assignment_to_run(cfg.run, params, features[0].features.shape[1])
        k = run.graph.k_neighbors
        if k not in cache:
            cache[k] = _graphs_from_features(features, run.graph)
        _, summary = run_cv(cache[k], run, SplitPlan(repeats=cfg.tune.repeats), jobs=jobs)
        vals = tuple(summary[m]["mean"] for m in OBJECTIVES)
        if any(v is None or not math.isfinite(v) for v in vals):
            raise ValueError("objective undefined for this trial")
        return vals

    study.optimize(objective, cfg.tune.n_trials)
    _write_json(res_dir / f"archive_{tag}.json", study.archive.to_dict())
    names = [p.name for p in study.space.params]
    with open(res_dir / f"front_{tag}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", *OBJECTIVES, *names])
        for t in sorted(study.archive.members, key=lambda t: t.number):
            w.writerow([t.number, *t.objectives, *[t.params.get(n, "") for n in names]])
    n_failed = sum(t.state == "failed" for t in study.trials)
    return {"journal": str(journal), "trials": len(study.trials), "failed": n_failed,
            "front_size": len(study.archive.members)}


def cmd_explain(cfg: CliConfig, checkpoint: str | None = None, correct_only: bool = False,
                csv_dump: bool = False) -> dict:
    from .explain import embedded_adjacency, export_topology, group_average

    graphs = _load_graphs(cfg)
    meta = {"band": cfg.run.graph.band, "segment": cfg.run.graph.segments, "kind": cfg.run.graph.kind}
    if checkpoint:
        if not Path(checkpoint).exists():
            raise StageError(f"checkpoint {checkpoint} not found", hint="run train --save-models first", code=2)
        store, ck_meta = ParamStore.load(checkpoint)
        model_cfg = GgcnConfig.from_dict(ck_meta["ggcn"])
        test = set(ck_meta.get("test") or [g.subject_id for g in graphs])
        chosen = [g for g in graphs if g.subject_id in test]
        mats, probs = embedded_adjacency(chosen, model_cfg, store)
        labels = [g.label for g in chosen]
        preds = (probs > 0.5).astype(int)
        g_hc = group_average(mats, labels, "HC", preds, correct_only, **meta)
        g_ad = group_average(mats, labels, "AD", preds, correct_only, **meta)
    else:
        g_hc, g_ad = explain_cv(graphs, cfg.run, correct_only=correct_only)
    channels = graphs[0].channels
    default = Montage.default()
    if set(channels) - set(default.channels):
        raise StageError("graph channels are not in the default montage", hint="use the 17-channel 10-20 set")
    montage = Montage(tuple(channels), tuple(default.coords[default.index(c)] for c in channels))
    path = cfg.dir("results") / f"topology_{_graph_tag(cfg.run.graph)}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    d = export_topology(g_hc, g_ad, montage, path, csv=csv_dump)
    return {"topology": str(path), "top_edges": [e["pair"] for e in d["top_edges"]]}


# --- argument handling ------------------------------------------------------

def _load_config(args) -> CliConfig:
    d = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise StageError(f"config file {path} not found", hint="pass an existing JSON file")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise StageError(f"config is not valid JSON: {exc}", hint="check the file syntax") from exc
    if args.workdir:
        d["workdir"] = args.workdir
    graph = d.setdefault("graph", {})
    for flag, key in (("band", "band"), ("feature", "kind"), ("k", "k_neighbors"), ("segment", "segments")):
        if getattr(args, flag) is not None:
            graph[key] = getattr(args, flag)
    if args.seed is not None:
        d["seed"] = args.seed
        d.setdefault("train", {})["seed"] = args.seed
        d.setdefault("synth", {})["rng_seed"] = args.seed
    if getattr(args, "n_trials", None) is not None:
        d.setdefault("tune", {})["n_trials"] = args.n_trials
    try:
        return CliConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise StageError(f"invalid config: {exc}", hint="see README for the config layout") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--workdir", help="artifact directory (overrides config)")
    common.add_argument("--seed", type=int)
    common.add_argument("--band", choices=sorted(BANDS))
    common.add_argument("--feature", choices=KINDS)
    common.add_argument("--k", type=int, help="k nearest neighbours per node")
    common.add_argument("--segment", help="segment id or 'all'")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="eeggraph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "features", "graph"):
        sub.add_parser(name, parents=[common])
    p = sub.add_parser("train", parents=[common])
    p.add_argument("--save-models", action="store_true")
    p = sub.add_parser("tune", parents=[common])
    p.add_argument("--n-trials", type=int)
    p = sub.add_parser("explain", parents=[common])
    p.add_argument("--checkpoint")
    p.add_argument("--correct-only", action="store_true", help="average correctly classified subjects only")
    p.add_argument("--csv", action="store_true", help="also dump matrices as CSV")
    sub.add_parser("show-config", parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
        if args.command == "synth":
            out = cmd_synth(cfg)
        elif args.command == "features":
            out = cmd_features(cfg)
        elif args.command == "graph":
            out = cmd_graph(cfg)
        elif args.command == "train":
            out = cmd_train(cfg, args.jobs, args.save_models)
        elif args.command == "tune":
            out = cmd_tune(cfg, args.jobs)
        elif args.command == "explain":
            out = cmd_explain(cfg, args.checkpoint, args.correct_only, args.csv)
        else:
            out = cfg.to_dict()
    except StageError as exc:
        print(json.dumps({"stage": args.command, "message": str(exc), "hint": exc.hint}), file=sys.stderr)
        return exc.code
    except (ValueError, FloatingPointError, OSError) as exc:
        print(json.dumps({"stage": args.command, "message": str(exc), "hint": "rerun with -v for details"}),
              file=sys.stderr)
        log.debug("failure", exc_info=True)
        return 1
    print(json.dumps(out, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
