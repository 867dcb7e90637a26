"""Builds datasets, clients and runs from an ``ExperimentConfig``."""

from __future__ import annotations

import numpy as np

from .config import ExperimentConfig, IdxData
from .data import ClientDataset, Dataset, PartitionSpec, build_clients, generate_synthetic, load_idx
from .federation import ClientState, make_client, warmup
from .nn import NetSpec, init_params
from .protocol import RoundConfig, Trace, run, run_baseline
from .rng import derive_seed


def repeat_seed(master: int, repeat: int) -> int:
    """Seed of one repeat; independent of how many repeats are requested."""
    return derive_seed(master, "repeat", repeat)


def build_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    ds = cfg.dataset
    if isinstance(ds, IdxData):
        data = load_idx(ds.images, ds.labels)
        if ds.limit is not None and ds.limit < len(data):
            data = Dataset(data.features[:ds.limit], data.labels[:ds.limit], data.class_count)
        return data
    return generate_synthetic(ds.class_count, ds.per_class, ds.cluster_spread,
                              derive_seed(seed, "data"), dim=ds.dim)


def build_partition(cfg: ExperimentConfig, data: Dataset, seed: int) -> list[ClientDataset]:
    p = cfg.partition
    spec = PartitionSpec(p.client_count, p.alpha, p.label_split_alpha, derive_seed(seed, "partition"))
    return build_clients(data, spec)


def build_net(cfg: ExperimentConfig, data: Dataset) -> NetSpec:
    widths = (data.dim, *cfg.net.hidden_widths, data.class_count)
    return NetSpec(widths, cfg.net.dropout_rate, cfg.net.activation)


def setup(cfg: ExperimentConfig, repeat: int = 0) -> tuple[RoundConfig, list[ClientState]]:
    """Dataset, partition, shared initial model and warmed-up clients for one repeat."""
    seed = repeat_seed(cfg.seed, repeat)
    data = build_dataset(cfg, seed)
    parts = build_partition(cfg, data, seed)
    spec = build_net(cfg, data)
    w0 = init_params(spec, derive_seed(seed, "init"))
    t = cfg.training
    corr_mode = cfg.ablation if cfg.method == "um_pfssl" else "en+ta"
    capacity = cfg.protocol.helper_list_size if cfg.method == "um_pfssl" else 1
    clients = [
        make_client(k, spec, w0, d, capacity, derive_seed(seed, "client", k),
                    t.learning_rate, t.momentum, corr_mode, cfg.protocol.mc_samples,
                    cfg.protocol.uncertainty_cap)
        for k, d in enumerate(parts)
    ]
    for c in clients:
        warmup(c, t.warmup_epochs, t.batch_size)
    return cfg.round_config(derive_seed(seed, "rounds")), clients


def run_experiment(cfg: ExperimentConfig, repeat: int = 0) -> Trace:
    rc, clients = setup(cfg, repeat)
    if cfg.method == "um_pfssl":
        return run(rc, clients, ablation=cfg.ablation)
    return run_baseline(rc, clients, cfg.method)


def mean_curve(traces: list[Trace]) -> list[tuple[int, float, float]]:
    """(round, mean over repeats of mean val acc, of mean test acc)."""
    if not traces:
        return []
    rows = []
    for i, m in enumerate(traces[0].metrics):
        rows.append((m.round,
                     float(np.mean([t.metrics[i].mean_val_acc for t in traces])),
                     float(np.mean([t.metrics[i].mean_test_acc for t in traces]))))
    return rows
