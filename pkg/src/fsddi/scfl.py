"""Sample-clustered federated learning and the baselines it is compared with.

The full pipeline (:func:`run_scfl`) is

1. FedAvg pretraining for ``split_round`` rounds, giving ``w_init``;
2. deep domain isolation of every training sample (:mod:`fsddi.ddi`);
3. a domain classifier trained with SCAFFOLD on (image -> cluster);
4. one FedAvg refinement per cluster, all starting from ``w_init``, in
   which a client only trains on its samples of that cluster.

At test time :func:`infer` sends each image to the model of the cluster
the classifier picks. Nothing about the test sample besides its pixels is
used, so evaluating on shifted client shards cannot change the result.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data import iid_shards, matching_shards
from .ddi import Clustering, GmmFitConfig, deep_domain_isolation, spectral_cluster
from .errors import ConfigurationError
from .fed import ClientData, RoundConfig, local_train, make_clients, run_federated
from .metrics import SegMetrics, confusion_counts, macro_f1
from .nn import ClassifierConfig, ModelParams, network_for, predict
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class ClassifierTrainConfig:
    rounds: int = 100
    lr: float = 0.005
    weight_decay: float = 0.001
    local_epochs: int = 10
    batch_size: Optional[int] = None  # full local batch
    optimizer: str = "scaffold"
    channels: tuple = (8, 16)
    min_f1: float = 0.6

    def round_config(self):
        return RoundConfig(local_epochs=self.local_epochs, batch_size=self.batch_size, lr=self.lr,
                           lr_decay=1.0, weight_decay=self.weight_decay, rounds=self.rounds,
                           optimizer=self.optimizer)


@dataclass
class PipelineConfig:
    split_round: int = 30
    total_rounds: int = 120
    M: int = 2
    alpha: float = 1.0
    gmm: GmmFitConfig = field(default_factory=GmmFitConfig)
    classifier: ClassifierTrainConfig = field(default_factory=ClassifierTrainConfig)
    refine_optimizer: str = "fedavg"
    fedavg_plus_epochs: int = 100
    exclude_classes: tuple = ()

    def __post_init__(self):
        if not 0 < self.split_round < self.total_rounds:
            raise ConfigurationError("need 0 < split_round < total_rounds")
        if self.M < 1:
            raise ConfigurationError("M must be >= 1")
        if not 0 < self.alpha <= 1:
            raise ConfigurationError("alpha must lie in (0, 1]")


@dataclass
class DomainClassifier:
    params: ModelParams
    val_f1: float = float("nan")
    converged: bool = True
    log: list = field(default_factory=list)

    @property
    def M(self):
        return self.params.arch["num_outputs"]

    def predict(self, images):
        return predict(self.params, images)


@dataclass
class ClusterModels:
    models: dict  # cluster id -> ModelParams
    w_init: Optional[ModelParams] = None
    results: dict = field(default_factory=dict)

    def __getitem__(self, m):
        return self.models[m]

    def __len__(self):
        return len(self.models)


@dataclass
class ScflResult:
    cluster_models: ClusterModels
    classifier: DomainClassifier
    clustering: Clustering
    log: list
    diagnostics: dict = field(default_factory=dict)
    w_init: Optional[ModelParams] = None


# ---------------------------------------------------------------- evaluation

def segment(params, images):
    return predict(params, images)


def evaluate(params, samples, C=None):
    C = C or params.arch["num_classes"]
    if len(samples) == 0:
        z = np.zeros(C, dtype=np.int64)
        return SegMetrics(z, z.copy(), z.copy())
    return confusion_counts(segment(params, samples.images), samples.masks, C)


def val_scorer(samples):
    return lambda params: evaluate(params, samples).miou


def infer_batch(images, cluster_models, classifier):
    """Masks and the chosen cluster for a stack of images (pixels only)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    chosen = classifier.predict(images) if len(cluster_models) > 1 else \
        np.full(len(images), next(iter(cluster_models.models)), dtype=np.int64)
    masks = np.zeros(images.shape, dtype=np.int64)
    for m in np.unique(chosen):
        sel = chosen == m
        masks[sel] = segment(cluster_models[int(m)], images[sel])
    return masks, chosen


def infer(image, cluster_models, classifier):
    """Segment one image with the model of the cluster the classifier selects."""
    masks, _ = infer_batch(np.asarray(image)[None], cluster_models, classifier)
    return masks[0]


def evaluate_scfl(cluster_models, classifier, samples, C=5):
    if len(samples) == 0:
        z = np.zeros(C, dtype=np.int64)
        return SegMetrics(z, z.copy(), z.copy())
    masks, _ = infer_batch(samples.images, cluster_models, classifier)
    return confusion_counts(masks, samples.masks, C)


def pooled(metrics_list):
    total = metrics_list[0]
    for m in metrics_list[1:]:
        total = total + m
    return total


def shard_eval(predict_for_client, samples, shards, C=5):
    """Sum confusion counts of each client's predictor over its own shard."""
    parts = []
    for k, ids in enumerate(shards):
        sub = samples.subset(ids)
        if len(sub) == 0:
            continue
        parts.append(confusion_counts(predict_for_client(k, sub.images), sub.masks, C))
    return pooled(parts)


# ---------------------------------------------------------------- stages

def clustered_refinement(clustering, w_init, clients, cfg, rounds, start_round=0, seed=0,
                         evaluators=None, threads=1, trace=None):
    """Independent FedAvg per cluster, every one starting at ``w_init``.

    Each client keeps its id but contributes only its samples assigned to
    the cluster, so aggregation weights are ``n_{k,m} / N_m``. Clients with
    none skip the cluster. Returns :class:`ClusterModels` keyed by cluster.
    ``trace`` collects ``(cluster, round, client, sample_ids)`` per batch.
    """
    lut = clustering.assignments()
    models, results = {}, {}
    for m in range(clustering.M):
        sub = []
        for c in clients:
            keep = np.array([lut[int(s)] == m for s in c.sample_ids], dtype=bool)
            sub.append(ClientData(c.client_id, c.sample_ids[keep], c.images[keep], c.targets[keep]))
        if sum(len(c) for c in sub) == 0:
            log.warning("cluster %d is empty; dropped", m)
            continue
        evaluate_fn = evaluators.get(m) if evaluators else None
        # clusters share the pretraining shuffle stream, so one cluster continues FedAvg exactly
        local = [] if trace is not None else None
        res = run_federated(sub, w_init, cfg, rounds=rounds, seed=seed, evaluate=evaluate_fn,
                            start_round=start_round, threads=threads, tag="main", trace=local)
        for row in res.log:
            row["tag"] = f"cluster{m}"
        if trace is not None:
            trace.extend((m,) + entry for entry in local)
        models[m] = res.best
        results[m] = res
    return ClusterModels(models, w_init, results)


def classifier_init(height, width, M, channels=(8, 16), seed=0):
    arch = ClassifierConfig(height, width, tuple(channels), M).arch()
    return network_for(arch).init(stream(seed, "init:classifier"))


def train_domain_classifier(clients, clustering, cfg=None, seed=0, val=None, threads=1):
    """Federated training of the image -> cluster classifier.

    ``clients`` supply images; labels come from ``clustering`` (each client
    only needs the labels of its own samples). ``val`` is an optional
    ``(images, labels)`` pair for macro-F1.
    """
    cfg = cfg or ClassifierTrainConfig()
    M = clustering.M
    lut = clustering.assignments()
    labelled = [ClientData(c.client_id, c.sample_ids, c.images,
                           np.array([lut[int(s)] for s in c.sample_ids], dtype=np.int64))
                for c in clients]
    H, W = clients[0].images.shape[1:] if len(clients[0]) else next(
        c.images.shape[1:] for c in clients if len(c))
    init = classifier_init(H, W, M, cfg.channels, seed)
    score = None
    if val is not None:
        v_img, v_lab = val
        score = lambda p: macro_f1(predict(p, v_img), v_lab, M)  # noqa: E731
    res = run_federated(labelled, init, cfg.round_config(), seed=seed, evaluate=None,
                        tag="classifier", threads=threads)
    params = res.final
    f1 = score(params) if score else float("nan")
    converged = not (score and f1 < cfg.min_f1)
    if not converged:
        log.warning("domain classifier did not converge: validation macro-F1 %.3f", f1)
    return DomainClassifier(params, f1, converged, res.log)


def cluster_domain_map(clustering, samples):
    """Majority hidden domain of each cluster (evaluation harness only)."""
    dom = dict(zip(samples.ids.tolist(), samples.domains.tolist()))
    out = {}
    for m in range(clustering.M):
        d = [dom[int(s)] for s in clustering.sample_ids[clustering.labels == m]]
        out[m] = int(np.bincount(d).argmax()) if d else -1
    return out


def classifier_domain_f1(classifier, clustering, dataset):
    """Validation macro-F1 with val labels = the cluster holding their domain."""
    to_dom = cluster_domain_map(clustering, dataset.train)
    dom_to_cluster = {}
    for m, d in sorted(to_dom.items()):
        dom_to_cluster.setdefault(d, m)
    val = dataset.val
    if not all(int(d) in dom_to_cluster for d in np.unique(val.domains)):
        return float("nan")
    truth = np.array([dom_to_cluster[int(d)] for d in val.domains])
    return macro_f1(classifier.predict(val.images), truth, clustering.M)


def scfl_stages(dataset, split, config, round_cfg, w_init, clustering, seed, threads,
                 trace=None, domains_visible=True):
    """Stages 3 and 4 given a fixed ``w_init`` and clustering."""
    clustering = clustering.compacted() if clustering.degenerate else clustering
    clients = make_clients(dataset.train, split.clients)
    val = dataset.val
    classifier = None
    if clustering.M > 1:
        # validation labels come from the classifier itself, never from domains
        classifier = train_domain_classifier(clients, clustering, config.classifier, seed,
                                             threads=threads)
        routed = classifier.predict(val.images)
        evaluators = {m: val_scorer(val.subset(val.ids[routed == m])) for m in range(clustering.M)}
        if domains_visible:
            classifier.val_f1 = classifier_domain_f1(classifier, clustering, dataset)
    else:
        evaluators = {0: val_scorer(val)}
    rcfg = replace(round_cfg, optimizer=config.refine_optimizer)
    models = clustered_refinement(clustering, w_init, clients, rcfg,
                                  config.total_rounds - config.split_round,
                                  start_round=config.split_round, seed=seed,
                                  evaluators=evaluators, threads=threads, trace=trace)
    if classifier is None:
        classifier = DomainClassifier(classifier_init(*dataset.train.images.shape[1:], 1, seed=seed))
    if len(models) < clustering.M:
        # keep dispatch total: an empty cluster falls back to w_init
        for m in range(clustering.M):
            models.models.setdefault(m, w_init)
    return models, classifier


def run_scfl(dataset, split, config=None, round_cfg=None, seed=0, threads=1, pretrained=None,
             domains_visible=True, trace=None, init=None):
    """End-to-end SCFL.

    ``init`` is the untrained segmentation model (default architecture if
    omitted); ``pretrained`` skips stage 1 and is used as ``w_init``.
    """
    config = config or PipelineConfig()
    round_cfg = round_cfg or RoundConfig(rounds=config.total_rounds)
    clients = make_clients(dataset.train, split.clients)
    logs = []
    if pretrained is None:
        res = run_federated(clients, init or _seg_init(dataset, seed), round_cfg,
                            rounds=config.split_round, seed=seed, tag="main",
                            threads=threads)
        w_init = res.final
        logs += res.log
    else:
        w_init = pretrained
    domains = dict(zip(dataset.train.ids.tolist(), dataset.train.domains.tolist())) \
        if domains_visible else None
    iso = deep_domain_isolation(w_init, clients, config.M, config.alpha, config.gmm, seed,
                                exclude=config.exclude_classes, domains=domains)
    models, classifier = scfl_stages(dataset, split, config, round_cfg, w_init, iso.clustering,
                                      seed, threads, trace=trace, domains_visible=domains_visible)
    for r in models.results.values():
        logs += r.log
    logs += [dict(row, tag="classifier") for row in classifier.log]
    return ScflResult(models, classifier, iso.clustering, logs, iso.diagnostics, w_init)


def prior_clustering(samples, domain_map=None):
    """Clustering equal to the hidden domains (evaluation-harness only)."""
    labels = samples.domains if domain_map is None else np.array(
        [domain_map[int(s)] for s in samples.ids])
    return Clustering(samples.ids.copy(), np.asarray(labels, dtype=np.int64),
                      int(labels.max()) + 1, "prior")


def prior_scfl(dataset, split, config=None, round_cfg=None, seed=0, threads=1, w_init=None,
               init=None):
    config = config or PipelineConfig()
    round_cfg = round_cfg or RoundConfig(rounds=config.total_rounds)
    logs = []
    if w_init is None:
        clients = make_clients(dataset.train, split.clients)
        res = run_federated(clients, init or _seg_init(dataset, seed), round_cfg,
                            rounds=config.split_round, seed=seed, tag="main",
                            threads=threads)
        w_init = res.final
        logs += res.log
    clustering = prior_clustering(dataset.train)
    models, classifier = scfl_stages(dataset, split, config, round_cfg, w_init, clustering,
                                      seed, threads)
    for r in models.results.values():
        logs += r.log
    return ScflResult(models, classifier, clustering, logs, {"rand_index_vs_domain": 1.0}, w_init)


def _seg_init(dataset, seed):
    from .nn import SegNetConfig, init_params
    H, W = dataset.train.images.shape[1:]
    return init_params(SegNetConfig(height=H, width=W), seed)


# ---------------------------------------------------------------- baselines

@dataclass
class PerClientModels:
    """One model per client; evaluation uses the client's identity."""

    models: list
    best_epochs: list = field(default_factory=list)
    client_cluster: Optional[np.ndarray] = None

    def predictor(self):
        return lambda k, images: segment(self.models[k], images)


def baseline_fedavg_plus(w_fedavg, clients, val_sets, epochs=100, round_cfg=None, lr=None,
                         seed=0):
    """Local fine-tuning of the FedAvg model, one epoch at a time.

    Each client keeps the epoch with the best mIoU on its own validation
    shard (``val_sets[k]``, a :class:`~fsddi.data.SampleSet`); epoch 0 is the
    unmodified FedAvg model.
    """
    round_cfg = round_cfg or RoundConfig()
    lr = round_cfg.lr if lr is None else lr
    one = replace(round_cfg, local_epochs=1)
    models, best_epochs = [], []
    for c in clients:
        best = w_fedavg
        cur = w_fedavg
        score = val_scorer(val_sets[c.client_id])
        best_score = score(best) if len(val_sets[c.client_id]) else -np.inf
        best_ep = 0
        if len(c):
            for ep in range(1, epochs + 1):
                u = local_train(c, cur, one, lr, stream(seed, "finetune", c.client_id, ep))
                cur = cur.with_values(cur.values + u.delta)
                s = score(cur) if len(val_sets[c.client_id]) else -np.inf
                if s > best_score:
                    best, best_score, best_ep = cur, s, ep
        models.append(best)
        best_epochs.append(best_ep)
    return PerClientModels(models, best_epochs)


def client_similarity(w, clients, cfg, lr, seed=0):
    """Pairwise cosine similarity of one round of local updates from ``w``."""
    deltas = []
    for c in clients:
        if len(c) == 0:
            deltas.append(np.zeros(w.size))
            continue
        u = local_train(c, w, cfg, lr, stream(seed, "cfl", c.client_id))
        deltas.append(u.delta * w.network.trainable)
    D = np.array(deltas)
    norms = np.linalg.norm(D, axis=1)
    norms[norms == 0] = 1.0
    U = D / norms[:, None]
    return U @ U.T


class NotApplicable(Exception):
    """The method has no meaning for this split (reported as skipped)."""


def baseline_cfl(dataset, split, w_split, round_cfg, split_round, total_rounds, seed=0,
                 threads=1, val_shards=None):
    """Simplified client-level clustered FL.

    At ``split_round`` clients are bipartitioned by spectral clustering of
    the cosine similarity of their updates; each client group then runs its
    own FedAvg. The model a client uses at test time is its group's.
    """
    if split.scheme == "iid":
        raise NotApplicable("client-level clustering is meaningless on an IID split")
    clients = make_clients(dataset.train, split.clients)
    active = [c for c in clients if len(c)]
    cos = client_similarity(w_split, active, round_cfg, round_cfg.lr_at(split_round), seed)
    affinity = 0.5 * (1.0 + cos)
    labels = spectral_cluster(affinity, 2, seed)
    group = np.full(len(clients), -1, dtype=np.int64)
    for c, g in zip(active, labels):
        group[c.client_id] = g
    val_shards = val_shards if val_shards is not None else matching_shards(split, dataset.val, seed)
    group_models, logs = {}, []
    for g in range(2):
        members = [c for c in active if group[c.client_id] == g]
        if not members:
            continue
        val_ids = np.concatenate([np.asarray(val_shards[c.client_id], dtype=np.int64)
                                  for c in members])
        res = run_federated(members, w_split, round_cfg, rounds=total_rounds - split_round,
                            seed=seed, evaluate=val_scorer(dataset.val.subset(val_ids)),
                            start_round=split_round, threads=threads, tag=f"cfl{g}")
        group_models[g] = res.best
        logs += res.log
    models = [group_models.get(int(group[k]), w_split) for k in range(len(clients))]
    out = PerClientModels(models, [], group)
    out.log = logs
    return out


def shift_report(per_client, dataset, split, seed=0, C=5):
    """Standard (client-matched test shards) and shifted (IID shards) scores."""
    std = shard_eval(per_client.predictor(), dataset.test,
                     matching_shards(split, dataset.test, seed), C)
    shift = shard_eval(per_client.predictor(), dataset.test,
                       iid_shards(dataset.test, split.num_clients, seed), C)
    return std, shift


def scfl_shift_report(result, dataset, split, seed=0, C=5):
    pred = lambda k, images: infer_batch(images, result.cluster_models, result.classifier)[0]  # noqa: E731
    std = shard_eval(pred, dataset.test, matching_shards(split, dataset.test, seed), C)
    shift = shard_eval(pred, dataset.test, iid_shards(dataset.test, split.num_clients, seed), C)
    return std, shift


__all__ = [
    "ClassifierTrainConfig", "ClusterModels", "DomainClassifier", "NotApplicable",
    "PerClientModels", "PipelineConfig", "ScflResult", "baseline_cfl", "baseline_fedavg_plus",
    "clustered_refinement", "evaluate", "evaluate_scfl", "infer", "infer_batch", "prior_clustering",
    "prior_scfl", "run_scfl", "scfl_shift_report", "shift_report",
    "train_domain_classifier",
]
