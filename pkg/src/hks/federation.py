"""Round engine: warm-up, local training with teacher fetch, logit upload,
server re-clustering, and method dispatch.

A round runs the client phase sequentially in client-id order (clients are
independent and own their RNG streams, so any scheduling order would produce
the same result), then applies buffered uploads and server-side aggregation
at a single barrier. The cluster tree clients read during a round is always
the snapshot built at the end of an earlier round.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .data import ClientShard, Dataset, PartitionSpec, batches, dirichlet_partition, split_local_test
from .errors import ConfigError, InvalidInputError, StaleHierarchyError
from .knowledge import (
    Granularity,
    HashVector,
    HnswIndex,
    KnowledgeCache,
    RandomProjectionEncoder,
    SampleId,
    build_hierarchy,
    fedcache_teacher,
    feddistill_teacher,
    fetch_teacher,
)
from .knowledge.hierarchy import ClusterTree
from .metrics import ExperimentSummary, RoundReport, evaluate, summarize
from .models import (
    CapacityTier,
    Model,
    aggregate_weights,
    build_model,
    fedavg_aggregate,
    train_step,
)
from .numerics import KdConfig, LossBreakdown

Array = np.ndarray


class Method(str, Enum):
    LOCAL_ONLY = "local_only"
    FEDAVG = "fedavg"
    FEDDISTILL = "feddistill"
    FEDCACHE = "fedcache"
    HKS = "hks"


LOGIT_METHODS = frozenset({Method.FEDDISTILL, Method.FEDCACHE, Method.HKS})

# Seed-stream tags; every derived stream is keyed by (seed, tag, ...).
_TAG_PARTITION = 1
_TAG_LOCAL_SPLIT = 2
_TAG_MODEL_INIT = 3
_TAG_ENCODER = 4
_TAG_HNSW = 5
_TAG_DATA = 6


def child_seed(*parts: int) -> int:
    """Stable 64-bit seed derived from nonnegative integer parts."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


@dataclass
class FederationConfig:
    method: Method = Method.HKS
    n_clients: int = 20
    rounds: int = 18
    local_epochs: int = 1
    # None resolves to min(10, rounds): ten warm-up rounds at the reference
    # scale, never more than the run itself.
    warmup_rounds: int | None = None
    lr: float = 0.01
    batch_size: int = 8
    kd: KdConfig = field(default_factory=KdConfig)
    granularity: Granularity = Granularity.ALL
    R: int = 4
    alpha_dir: float = 1.0
    seed: int = 0
    exclude_self: bool = True
    test_fraction: float = 0.2
    min_per_client: int | None = None
    fedavg_tier: CapacityTier = CapacityTier.SMALL
    d_hash: int = 32
    hnsw_m: int = 16
    hnsw_ef_construction: int = 200
    hnsw_ef_search: int = 64
    linkage: str = "average"
    cluster_space: str = "logits"

    def __post_init__(self) -> None:
        self.method = Method(self.method)
        self.granularity = Granularity(self.granularity)
        self.fedavg_tier = CapacityTier(self.fedavg_tier)
        if self.warmup_rounds is None:
            self.warmup_rounds = min(10, self.rounds)

    def validate(self) -> None:
        checks = [
            ("n_clients", self.n_clients >= 1),
            ("rounds", self.rounds >= 0),
            ("local_epochs", self.local_epochs >= 1),
            ("warmup_rounds", 0 <= self.warmup_rounds <= self.rounds),
            ("lr", self.lr > 0),
            ("batch_size", self.batch_size >= 1),
            ("R", self.R >= 1),
            ("alpha_dir", self.alpha_dir > 0),
            ("seed", self.seed >= 0),
            ("test_fraction", 0 < self.test_fraction < 1),
            ("min_per_client", self.min_per_client is None or self.min_per_client >= 0),
            ("d_hash", self.d_hash >= 1),
            ("hnsw_m", self.hnsw_m >= 2),
            ("hnsw_ef_construction", self.hnsw_ef_construction >= 1),
            ("hnsw_ef_search", self.hnsw_ef_search >= 1),
            ("linkage", self.linkage in ("average", "single", "complete")),
            ("cluster_space", self.cluster_space in ("logits", "soft")),
        ]
        for key, ok in checks:
            if not ok:
                raise ConfigError(f"constraint violation on '{key}' (got {getattr(self, key)!r})")

    @property
    def resolved_min_per_client(self) -> int:
        return self.min_per_client if self.min_per_client is not None else 2 * self.batch_size


@dataclass
class ClientState:
    client_id: int
    tier: CapacityTier
    model: Model
    shard: ClientShard


@dataclass
class FederationState:
    config: FederationConfig
    clients: list[ClientState]
    cache: KnowledgeCache
    encoder: RandomProjectionEncoder
    index: HnswIndex
    n_classes: int
    global_test: Dataset | None = None
    tree: ClusterTree | None = None
    round: int = 0


@dataclass
class ExperimentResult:
    reports: list[RoundReport]
    summary: ExperimentSummary
    state: FederationState


def init_federation(
    cfg: FederationConfig, dataset: Dataset, global_test: Dataset | None = None
) -> FederationState:
    """Partition data, build tiered clients, register hashes, index them."""
    cfg.validate()
    spec = PartitionSpec(
        n_clients=cfg.n_clients,
        alpha_dir=cfg.alpha_dir,
        seed=child_seed(cfg.seed, _TAG_PARTITION),
        min_per_client=cfg.resolved_min_per_client,
    )
    parts = dirichlet_partition(dataset, spec)
    store_labels = cfg.method in (Method.FEDDISTILL, Method.FEDCACHE)
    encoder = RandomProjectionEncoder(dataset.input_dim, cfg.d_hash, child_seed(cfg.seed, _TAG_ENCODER))
    cache = KnowledgeCache(dataset.n_classes, store_labels=store_labels)
    index = HnswIndex(
        cfg.d_hash,
        m=cfg.hnsw_m,
        ef_construction=cfg.hnsw_ef_construction,
        ef_search=cfg.hnsw_ef_search,
        seed=child_seed(cfg.seed, _TAG_HNSW),
    )
    clients: list[ClientState] = []
    for k in range(cfg.n_clients):
        shard = split_local_test(
            parts[k],
            dataset,
            cfg.test_fraction,
            child_seed(cfg.seed, _TAG_LOCAL_SPLIT, k),
            client_id=k,
        )
        tier = cfg.fedavg_tier if cfg.method is Method.FEDAVG else CapacityTier.for_client(k)
        model = build_model(
            tier, dataset.input_dim, dataset.n_classes, child_seed(cfg.seed, _TAG_MODEL_INIT, k)
        )
        clients.append(ClientState(k, tier, model, shard))
        hashes = encoder.encode_rows(shard.train.features)
        for i in range(len(shard.train)):
            sid = SampleId(k, i)
            label = int(shard.train.labels[i]) if store_labels else None
            cache.register(sid, hashes[i], label=label)
            index.insert(HashVector(sid, hashes[i]))
    return FederationState(
        config=cfg,
        clients=clients,
        cache=cache,
        encoder=encoder,
        index=index,
        n_classes=dataset.n_classes,
        global_test=global_test,
    )


def _teacher_entry(state: FederationState, client_id: int, local_index: int, label: int):
    """Teacher logits for one sample under the configured method, or None."""
    cfg = state.config
    if cfg.method is Method.HKS:
        entries = fetch_teacher(
            state.cache,
            state.tree,
            SampleId(client_id, local_index),
            cfg.granularity,
            exclude_self=cfg.exclude_self,
        )
        return entries or None
    if cfg.method is Method.FEDDISTILL:
        return feddistill_teacher(state.cache, label, client_id)
    if cfg.method is Method.FEDCACHE:
        return fedcache_teacher(state.cache, state.index, SampleId(client_id, local_index), cfg.R)
    return None


def client_train(
    client: ClientState, state: FederationState, round_index: int
) -> tuple[ClientState, LossBreakdown, dict[int, Array]]:
    """Local epochs on seeded batches; warm-up rounds are pure cross-entropy.

    Returns the trained client, the sample-weighted mean loss breakdown, and
    the last forward logits of every training sample for upload.
    """
    cfg = state.config
    distilling = cfg.method in LOGIT_METHODS and round_index >= cfg.warmup_rounds
    if cfg.method is Method.HKS and distilling:
        if state.tree is None:
            # The first hierarchy is built at the end of round W, so the
            # round-W client phase still trains on cross-entropy alone.
            if round_index > cfg.warmup_rounds:
                raise StaleHierarchyError(
                    f"round {round_index} has no hierarchy after warm-up"
                )
            distilling = False
        elif state.tree.built_at_round is not None and state.tree.built_at_round >= round_index:
            raise StaleHierarchyError("cluster tree must predate the round's client phase")

    model = client.model
    features = client.shard.train.features
    labels = client.shard.train.labels
    logits_out: dict[int, Array] = {}
    ce_sum = kd_sum = 0.0
    n_samples = 0
    for e in range(cfg.local_epochs):
        epoch_key = round_index * cfg.local_epochs + e
        for batch_idx in batches(client.shard, cfg.batch_size, cfg.seed, epoch_key):
            X = features[batch_idx]
            y = labels[batch_idx]
            teachers = None
            if distilling:
                teachers = [
                    _teacher_entry(state, client.client_id, int(i), int(labels[i]))
                    for i in batch_idx
                ]
            model, bd, Z = train_step(model, X, y, teachers, cfg.kd, cfg.lr)
            for row, i in enumerate(batch_idx):
                logits_out[int(i)] = Z[row]
            ce_sum += bd.ce * len(batch_idx)
            kd_sum += bd.kd * len(batch_idx)
            n_samples += len(batch_idx)
    ce = ce_sum / n_samples
    kd = kd_sum / n_samples
    breakdown = LossBreakdown(ce=ce, kd=kd, total=ce + cfg.kd.alpha_kd * kd)
    return replace(client, model=model), breakdown, logits_out


def run_round(state: FederationState) -> RoundReport:
    """One communication round: client phase, barrier, server phase, report."""
    cfg = state.config
    t = state.round
    if t >= cfg.rounds:
        raise InvalidInputError(f"round {t} exceeds configured rounds {cfg.rounds}")

    uploads: list[tuple[int, dict[int, Array]]] = []
    breakdowns: list[LossBreakdown] = []
    for i, client in enumerate(state.clients):
        trained, bd, logits = client_train(client, state, t)
        state.clients[i] = trained
        breakdowns.append(bd)
        uploads.append((client.client_id, logits))

    if cfg.method in LOGIT_METHODS:
        for client_id, logits in uploads:
            for local_index in sorted(logits):
                state.cache.update_logits(SampleId(client_id, local_index), logits[local_index], t)

    if cfg.method is Method.FEDAVG:
        weights = aggregate_weights([len(c.shard.train) for c in state.clients])
        merged = fedavg_aggregate([c.model for c in state.clients], weights)
        for i, client in enumerate(state.clients):
            state.clients[i] = replace(
                client, model=replace(merged, params=merged.params.copy(), seed=client.model.seed)
            )

    hierarchy_built = False
    if cfg.method is Method.HKS and t >= cfg.warmup_rounds:
        tree = build_hierarchy(
            state.cache,
            state.n_classes,
            linkage=cfg.linkage,
            space=cfg.cluster_space,
            temperature=cfg.kd.temperature,
        )
        tree.built_at_round = t
        state.tree = tree
        hierarchy_built = True

    if state.global_test is None or len(state.global_test) == 0:
        raise ConfigError("a nonempty global test set is required to report rounds")
    local_acc = np.array(
        [
            evaluate(c.model, c.shard.local_test) if len(c.shard.local_test) else 0.0
            for c in state.clients
        ]
    )
    global_acc = np.array([evaluate(c.model, state.global_test) for c in state.clients])
    report = RoundReport(
        round=t,
        per_client_local_acc=local_acc,
        global_acc_per_client=global_acc,
        mean_ce=float(np.mean([b.ce for b in breakdowns])),
        mean_kd=float(np.mean([b.kd for b in breakdowns])),
        hierarchy_built=hierarchy_built,
    )
    state.round = t + 1
    return report


def run_experiment(
    cfg: FederationConfig, dataset: Dataset, global_test: Dataset
) -> ExperimentResult:
    """Initialize and run all configured rounds, then summarize."""
    state = init_federation(cfg, dataset, global_test)
    reports = [run_round(state) for _ in range(cfg.rounds)]
    return ExperimentResult(reports=reports, summary=summarize(reports), state=state)
