"""
Clustered refinement against plain FedAvg
=========================================

The whole pipeline at toy scale: shared pretraining, domain isolation, a
federated domain classifier, then one FedAvg run per cluster. At test time
each image is routed by the classifier, so the score does not depend on
which client an image is assumed to come from.
"""
from dataclasses import replace

from fsddi import (ClassifierTrainConfig, DataConfig, PipelineConfig, RoundConfig, SegNetConfig,
                   evaluate, evaluate_scfl, generate_dataset, init_params, make_clients,
                   partition, run_federated, run_scfl)
from fsddi.scfl import val_scorer

ds = generate_dataset(DataConfig(train_size=200, val_size=40, test_size=40, height=32, width=48))
split = partition(ds, "full_noniid", K=10, seed=0)
model = SegNetConfig(height=32, width=48, channels=(8, 16, 8))
rounds = RoundConfig(lr=1.0, batch_size=4, rounds=30)
pipe = PipelineConfig(split_round=15, total_rounds=30,
                      classifier=ClassifierTrainConfig(rounds=80, local_epochs=2, batch_size=8))

# baseline: one global model for everyone, best round on validation
clients = make_clients(ds.train, split.clients)
fedavg = run_federated(clients, init_params(model, seed=0), rounds, seed=0,
                       evaluate=val_scorer(ds.val))
print(f"FedAvg test mIoU {evaluate(fedavg.best, ds.test).miou:.3f}")

res = run_scfl(ds, split, pipe, rounds, seed=0, init=init_params(model, seed=0))
print(f"clusters vs domains: rand index {res.diagnostics['rand_index_vs_domain']:.3f}")
print(f"classifier validation F1 {res.classifier.val_f1:.3f}")
print(f"clustered test mIoU {evaluate_scfl(res.cluster_models, res.classifier, ds.test).miou:.3f}")

# with one cluster the pipeline is exactly FedAvg continued past the split round
one = run_scfl(ds, split, replace(pipe, M=1), rounds, seed=0, init=init_params(model, seed=0))
print(f"M=1 test mIoU {evaluate_scfl(one.cluster_models, one.classifier, ds.test).miou:.3f}")
