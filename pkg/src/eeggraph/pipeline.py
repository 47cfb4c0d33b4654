"""Glue from recordings to graphs to cross-validated metrics."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field

from .connectivity import connectivity_matrix, knn_sparsify
from .eeg_io import Recording
from .ggcn import GgcnConfig
from .spectral import WindowPlan, extract_band_features, multitaper_spectra
from .training import SplitPlan, TrainConfig, cross_validate, summarize


@dataclass(frozen=True)
class GraphConfig:
    band: str = "alpha"
    kind: str = "PLV"
    k_neighbors: int = 5
    segments: str = "all"  # "all" or a single segment id, e.g. "1"

    def __post_init__(self):
        # k >= n_channels is allowed and means the complete graph
        if self.k_neighbors < 1:
            raise ValueError(f"k_neighbors must be positive, got {self.k_neighbors}")
        object.__setattr__(self, "segments", str(self.segments))
        if self.segments != "all" and not self.segments.isdigit():
            raise ValueError(f"segments must be 'all' or a segment id, got {self.segments!r}")

    def keeps(self, segment_id: int) -> bool:
        return self.segments == "all" or int(self.segments) == segment_id


def select(recordings, gcfg: GraphConfig):
    return [r for r in recordings if gcfg.keeps(r.segment_id)]


def recording_features(rec: Recording, band: str, plan: WindowPlan | None = None):
    return extract_band_features(multitaper_spectra(rec, plan or WindowPlan()), band)


def build_graphs(recordings, gcfg: GraphConfig = GraphConfig(), plan: WindowPlan | None = None):
    graphs = []
    for rec in select(recordings, gcfg):
        feats = recording_features(rec, gcfg.band, plan)
        k = min(gcfg.k_neighbors, feats.n_nodes - 1)
        graphs.append(knn_sparsify(connectivity_matrix(feats, gcfg.kind), k, feats))
    return graphs


def group_by_subject(graphs):
    by_subject = defaultdict(list)
    labels = {}
    for g in graphs:
        by_subject[g.subject_id].append(g)
        if labels.setdefault(g.subject_id, g.label) != g.label:
            raise ValueError(f"subject {g.subject_id} has graphs with conflicting labels")
    return dict(by_subject), labels


@dataclass
class RunConfig:
    graph: GraphConfig = field(default_factory=GraphConfig)
    model: dict = field(default_factory=dict)  # GgcnConfig fields except in_features
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def ggcn_config(self, in_features: int) -> GgcnConfig:
        return GgcnConfig(in_features=in_features, **self.model)

    def to_dict(self) -> dict:
        return {"graph": asdict(self.graph), "model": dict(self.model), "train": self.train.to_dict(),
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        model = dict(d.get("model", {}))
        for key in ("block_channels", "block_steps"):
            if key in model:
                model[key] = tuple(model[key])
        return cls(GraphConfig(**d.get("graph", {})), model, TrainConfig(**d.get("train", {})),
                   int(d.get("seed", 0)))


def run_cv(graphs, run: RunConfig, plan: SplitPlan = SplitPlan(), jobs: int = 1, keep_models: bool = False):
    """Cross-validate on prebuilt graphs; returns (per-iteration results, summary)."""
    by_subject, labels = group_by_subject(graphs)
    cfg = run.ggcn_config(graphs[0].node_features.shape[1])
    results = cross_validate(by_subject, labels, cfg, run.train, plan, seed=run.seed, jobs=jobs,
                             keep_models=keep_models)
    return results, summarize([r["report"] for r in results])


def explain_cv(graphs, run: RunConfig, plan: SplitPlan = SplitPlan(repeats=1), correct_only: bool = False):
    """Train one model per outer fold and average the channel-space pooled
    adjacency of each fold's test graphs per true group.

    With a single repeat every subject is explained exactly once, by a model
    that never saw it during training.
    """
    from .explain import embedded_adjacency, group_average

    results, _ = run_cv(graphs, run, plan, keep_models=True)
    by_subject, _ = group_by_subject(graphs)
    cfg = run.ggcn_config(graphs[0].node_features.shape[1])
    mats, labels, preds = [], [], []
    for res in results:
        test = [g for s in res["split"].test for g in by_subject[s]]
        m, p = embedded_adjacency(test, cfg, res["store"])
        mats += m
        labels += [g.label for g in test]
        preds += list((p > 0.5).astype(int))
    meta = {"band": run.graph.band, "segment": run.graph.segments, "kind": run.graph.kind}
    return (group_average(mats, labels, "HC", preds, correct_only, **meta),
            group_average(mats, labels, "AD", preds, correct_only, **meta))
