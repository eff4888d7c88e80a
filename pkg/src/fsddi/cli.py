"""Command line entry point and the experiment runner behind it.

Subcommands::

    fsddi generate-data --config cfg.json --out data/
    fsddi run           --config cfg.json --seed 0 --out runs/x [--threads 4]
    fsddi cluster       --checkpoint w.ckpt --split data/ --M 2 --alpha 0.05 --out runs/c
    fsddi evaluate      --checkpoint w.ckpt --split data/ --out runs/e

Exit status: 0 success, 2 bad configuration, 3 a pipeline stage failed,
4 the method does not apply to the split (skipped).
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .config import ExperimentConfig, config_from_dict, parse_config
from .data import (FederatedSplit, export_dataset, generate_dataset, import_dataset,
                   matching_shards, partition)
from .ddi import deep_domain_isolation
from .errors import ConfigurationError, FsddiError, StageError
from .fed import make_clients, run_federated, write_round_log
from .metrics import MetricsTable, rand_index
from .nn import init_params, load_checkpoint, save_checkpoint
from .scfl import (NotApplicable, PerClientModels, baseline_cfl, baseline_fedavg_plus,
                   evaluate, evaluate_scfl, prior_scfl, run_scfl, scfl_shift_report,
                   shift_report, val_scorer)

log = logging.getLogger("fsddi")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_SKIPPED = 0, 2, 3, 4
OUT_ENV = "FSDDI_OUT"


def _out_dir(arg, default_name):
    if arg:
        return arg
    root = os.environ.get(OUT_ENV, "runs")
    return os.path.join(root, default_name)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _domain_rows(table, phase, predict_masks, samples, C):
    """Per-domain mIoU rows (diagnostic; domains are never fed to models)."""
    from .metrics import confusion_counts
    for d in np.unique(samples.domains):
        sub = samples.subset(samples.ids[samples.domains == d])
        seg = confusion_counts(predict_masks(sub.images), sub.masks, C)
        table.add(phase + f"_domain{int(d)}", "miou", seg.miou)


def run_experiment(config: ExperimentConfig, out_dir, dataset=None):
    """Execute ``config.method`` and write every artifact into ``out_dir``.

    Returns the process exit status.
    """
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "config.json"), config.to_dict())
    seed = config.seed
    try:
        ds = dataset or generate_dataset(config.data)
        split = partition(ds, config.split.scheme, config.split.clients, seed,
                          config.split.dirichlet_alpha)
    except FsddiError as exc:
        raise StageError("data", exc) from exc
    _write_json(os.path.join(out_dir, "split.json"), split.to_json())
    manifest = {"seed": seed, "method": config.method, "split_scheme": split.scheme,
                "config_hash": config.hash(), "dataset_hash": ds.content_hash(),
                "iou_accumulation": "dataset-level, background included"}
    run_id = f"{config.method}-{split.scheme}-s{seed}"
    table = MetricsTable(run_id, config.method, split.scheme)
    C = config.model.num_classes
    rounds_path = os.path.join(out_dir, "rounds.jsonl")
    open(rounds_path, "w").close()
    cfg, pipe = config.rounds, config.pipeline
    threads = config.threads
    init = init_params(config.model, seed)
    clients = make_clients(ds.train, split.clients)
    status = EXIT_OK

    def global_training(optimizer):
        res = run_federated(clients, init, replace(cfg, optimizer=optimizer), seed=seed,
                            evaluate=val_scorer(ds.val), threads=threads,
                            checkpoints=(pipe.split_round,))
        write_round_log(res.log, rounds_path, append=True)
        save_checkpoint(res.best, os.path.join(ckpt_dir, "best.ckpt"))
        save_checkpoint(res.final, os.path.join(ckpt_dir, "final.ckpt"))
        table.add("val", "best_round", res.best_round)
        table.add("val", "miou", res.best_score)
        return res

    try:
        if config.method in ("fedavg", "scaffold"):
            res = global_training(config.method)
            seg = evaluate(res.best, ds.test, C)
            table.add_seg("test", seg)
            _domain_rows(table, "test", lambda im: _predict(res.best, im), ds.test, C)
        elif config.method == "fedavg_plus":
            res = global_training("fedavg")
            table.add_seg("test_global", evaluate(res.best, ds.test, C))
            val_shards = matching_shards(split, ds.val, seed)
            plus = _stage("fedavg_plus", baseline_fedavg_plus, res.best, clients,
                          [ds.val.subset(v) for v in val_shards], pipe.fedavg_plus_epochs,
                          cfg, cfg.lr_at(cfg.rounds), seed)
            for k, ep in enumerate(plus.best_epochs):
                table.add("finetune", "best_epoch", ep, cluster_id=f"client{k}")
            std, shift = shift_report(plus, ds, split, seed, C)
            table.add_seg("test", std)
            table.add_seg("test_shift", shift)
        elif config.method == "cfl":
            if split.scheme == "iid":
                raise NotApplicable("cfl on an IID split")
            pre = run_federated(clients, init, cfg, rounds=pipe.split_round, seed=seed,
                                threads=threads)
            write_round_log(pre.log, rounds_path, append=True)
            save_checkpoint(pre.final, os.path.join(ckpt_dir, "w_split.ckpt"))
            cfl = _stage("cfl", baseline_cfl, ds, split, pre.final, cfg, pipe.split_round,
                         pipe.total_rounds, seed, threads)
            write_round_log(cfl.log, rounds_path, append=True)
            for k, g in enumerate(cfl.client_cluster):
                table.add("clustering", "client_cluster", int(g), cluster_id=f"client{k}")
            std, shift = shift_report(cfl, ds, split, seed, C)
            table.add_seg("test", std)
            table.add_seg("test_shift", shift)
            _write_json(os.path.join(out_dir, "clustering.json"),
                        {"M": 2, "alpha": None, "provenance": "cfl",
                         "client_assignments": {str(k): int(g)
                                                for k, g in enumerate(cfl.client_cluster)}})
        else:  # scfl / prior_scfl
            runner = run_scfl if config.method == "scfl" else prior_scfl
            res = _stage(config.method, runner, ds, split, pipe, cfg, seed, threads, init=init)
            write_round_log(res.log, rounds_path, append=True)
            save_checkpoint(res.w_init, os.path.join(ckpt_dir, "w_init.ckpt"))
            for m, params in sorted(res.cluster_models.models.items()):
                save_checkpoint(params, os.path.join(ckpt_dir, f"cluster{m}.ckpt"))
            save_checkpoint(res.classifier.params, os.path.join(ckpt_dir, "classifier.ckpt"))
            dom = ds.train.domains[ds.train.position(res.clustering.sample_ids)]
            ri = rand_index(res.clustering.labels, dom)
            per_class = res.diagnostics.get("per_class_rand", {})
            _write_json(os.path.join(out_dir, "clustering.json"),
                        res.clustering.to_json(pipe.alpha if config.method == "scfl" else None,
                                               ri, per_class))
            table.add("clustering", "rand_index", ri)
            for c, r in sorted(per_class.items()):
                table.add("clustering", "rand_index", r, class_id=c)
            if "silhouette" in res.diagnostics:
                table.add("clustering", "silhouette", res.diagnostics["silhouette"])
            table.add("classifier", "macro_f1", res.classifier.val_f1)
            seg = evaluate_scfl(res.cluster_models, res.classifier, ds.test, C)
            table.add_seg("test", seg)
            std, shift = scfl_shift_report(res, ds, split, seed, C)
            table.add_seg("test_clients", std)
            table.add_seg("test_shift", shift)
            for m, params in sorted(res.cluster_models.models.items()):
                table.add("test", "miou", evaluate(params, ds.test, C).miou, cluster_id=m)
    except NotApplicable as exc:
        status = EXIT_SKIPPED
        manifest["skipped"] = str(exc)
        table.add("status", "skipped", 1)
    manifest["status"] = {EXIT_OK: "ok", EXIT_SKIPPED: "skipped"}[status]
    table.write(os.path.join(out_dir, "metrics.csv"))
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return status


def _predict(params, images):
    from .nn import predict
    return predict(params, images)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (StageError, NotApplicable):
        raise
    except FsddiError as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------- commands

def _load_config(args):
    cfg = parse_config(args.config) if args.config else config_from_dict({})
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "threads", None):
        changes["threads"] = args.threads
    return replace(cfg, **changes) if changes else cfg


def cmd_generate_data(args):
    cfg = _load_config(args)
    ds = generate_dataset(cfg.data)
    out = _out_dir(args.out, "data")
    export_dataset(ds, out)
    split = partition(ds, cfg.split.scheme, cfg.split.clients, cfg.seed, cfg.split.dirichlet_alpha)
    _write_json(os.path.join(out, "split.json"), split.to_json())
    print(out)
    return EXIT_OK


def cmd_run(args):
    cfg = _load_config(args)
    out = _out_dir(args.out, f"{cfg.method}-{cfg.split.scheme}-s{cfg.seed}")
    status = run_experiment(replace(cfg, out=out), out)
    print(out)
    return status


def _load_split_dir(path):
    ds = import_dataset(path)
    with open(os.path.join(path, "split.json")) as fh:
        split = FederatedSplit.from_json(json.load(fh))
    return ds, split


def cmd_cluster(args):
    params = load_checkpoint(args.checkpoint)
    ds, split = _load_split_dir(args.split)
    clients = make_clients(ds.train, split.clients)
    domains = dict(zip(ds.train.ids.tolist(), ds.train.domains.tolist()))
    res = deep_domain_isolation(params, clients, args.M, args.alpha, seed=args.seed or 0,
                                domains=domains)
    out = _out_dir(args.out, "cluster")
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "clustering.json"),
                res.clustering.to_json(args.alpha, res.diagnostics.get("rand_index_vs_domain"),
                                       res.diagnostics.get("per_class_rand")))
    print(out)
    return EXIT_OK


def cmd_evaluate(args):
    params = load_checkpoint(args.checkpoint)
    ds, split = _load_split_dir(args.split)
    C = params.arch["num_classes"]
    table = MetricsTable(os.path.basename(args.checkpoint), "checkpoint", split.scheme)
    table.add_seg("test", evaluate(params, ds.test, C))
    table.add_seg("val", evaluate(params, ds.val, C))
    per_client = PerClientModels([params] * split.num_clients)
    std, shift = shift_report(per_client, ds, split, args.seed or 0, C)
    table.add_seg("test_clients", std)
    table.add_seg("test_shift", shift)
    out = _out_dir(args.out, "evaluate")
    os.makedirs(out, exist_ok=True)
    table.write(os.path.join(out, "metrics.csv"))
    print(out)
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="fsddi", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="experiment JSON (defaults if omitted)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV}/...)")
        p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("generate-data", help="write the glyph dataset and client split")
    common(p)
    p.set_defaults(func=cmd_generate_data)
    p = sub.add_parser("run", help="run one method end to end")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("cluster", help="domain isolation from a checkpoint")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, help="directory written by generate-data")
    p.add_argument("--M", type=int, default=2)
    p.add_argument("--alpha", type=float, default=1.0)
    p.set_defaults(func=cmd_cluster)
    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
