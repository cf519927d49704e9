"""Federated round loop, server cache, and client updates.

The server is a pure cache: each round every client downloads the other
domains' latest encoder checkpoints, adapts them through its own
isolated embeddings/positions/head, trains for a fixed number of local
epochs, and uploads only its local encoder. Cache writes happen at the
round barrier in deterministic domain order, so client updates within a
round may run sequentially or on a thread pool with identical results.

Variants: local-only training, FedAvg with a single shared encoder,
uniform (no-gate) fusion, unfrozen global encoders, expert removal, and
a two-phase schedule with exactly one synchronization.
"""

from __future__ import annotations

import concurrent.futures
import copy
import dataclasses
import logging

import numpy as np

from . import autodiff as ad
from . import moe as moe_mod
from .autodiff import Tape, Tensor, backward
from .checkpoint import ExpertCheckpoint, checkpoint_from_params, load_into_params
from .config import RunConfig
from .data import DomainDataset, ScenarioSpec, augment_batch
from .errors import ConfigError
from .evaluation import DomainMetrics, MetricsReport, compute_metrics, rank_target
from .expert import BranchParams, encode_batch, encode_pair, init_branch, init_encoder
from .expert import contrastive_loss, lookup_table, rec_loss
from .moe import GateParams, fuse, gate_forward, init_gate, moe_loss, uniform_gate_weights
from .optim import Adam

logger = logging.getLogger(__name__)

# seed-stream tags so distinct purposes never share a stream
_TAG_INIT, _TAG_ROUND, _TAG_PRETRAIN, _TAG_SERVER = 11, 23, 37, 53

GATED_MODES = ("fmoe", "no_freeze", "drop_expert", "two_phase")
GLOBAL_MODES = GATED_MODES + ("no_gate",)


class ServerCache:
    """Domain id -> latest uploaded encoder checkpoint."""

    def __init__(self):
        self.checkpoints: dict[str, ExpertCheckpoint] = {}
        self.shared: ExpertCheckpoint | None = None  # fedavg baseline only
        self.round_index = 0
        self.upload_history: list[tuple[int, str, tuple[str, ...]]] = []

    def put(self, domain_id: str, ckpt: ExpertCheckpoint) -> None:
        self.upload_history.append((self.round_index, domain_id, tuple(ckpt.names)))
        self.checkpoints[domain_id] = ckpt

    def snapshot(self) -> dict[str, ExpertCheckpoint]:
        # checkpoints are immutable, a shallow copy is a true snapshot
        return dict(self.checkpoints)

    def state_bytes(self) -> bytes:
        parts = [f"round={self.round_index}".encode()]
        for dom in sorted(self.checkpoints):
            parts.append(dom.encode())
            parts.append(self.checkpoints[dom].to_bytes())
        if self.shared is not None:
            parts.append(b"shared")
            parts.append(self.shared.to_bytes())
        return b"|".join(parts)


@dataclasses.dataclass
class ClientState:
    domain_id: str
    dataset: DomainDataset
    cfg: RunConfig
    local: BranchParams
    global_branches: dict[str, BranchParams]  # keyed by source domain, sorted
    gate: GateParams | None
    optimizer: Adam
    domain_index: int

    def expert_order(self) -> list[str]:
        """Local domain first, then global branches in fixed id order."""
        return [self.domain_id] + sorted(self.global_branches)

    def branches_in_order(self) -> list[BranchParams]:
        return [self.local] + [self.global_branches[d] for d in sorted(self.global_branches)]

    def all_parameters(self):
        params = list(self.local.parameters())
        for dom in sorted(self.global_branches):
            params.extend(self.global_branches[dom].parameters())
        if self.gate is not None:
            params.extend(self.gate.parameters())
        return params

    def round_rng(self, tag: int, index: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.cfg.seed, self.domain_index, tag, index]))

    def local_encoder_checkpoint(self) -> ExpertCheckpoint:
        return checkpoint_from_params(self.local.encoder.parameters())

    def sync(self, snapshot: dict[str, ExpertCheckpoint]) -> None:
        """Download the other domains' encoders; they arrive frozen unless
        the run trains them deliberately (no_freeze)."""
        trainable = self.cfg.mode == "no_freeze"
        for dom, branch in self.global_branches.items():
            if dom not in snapshot:
                raise ConfigError(f"server cache is missing domain {dom!r}")
            params = branch.encoder.parameters()
            load_into_params(snapshot[dom], params)
            branch.encoder.set_trainable(trainable)
            self.optimizer.reset_state(params)

    def sync_shared(self, shared: ExpertCheckpoint) -> None:
        """FedAvg baseline: the local encoder is replaced by the shared one."""
        params = self.local.encoder.parameters()
        load_into_params(shared, params)
        self.optimizer.reset_state(params)

    def snapshot_parameters(self) -> dict[str, np.ndarray]:
        state = {}
        for prefix, params in self._named_groups():
            for p in params:
                state[f"{prefix}{p.name}"] = p.data.copy()
        return state

    def restore_parameters(self, state: dict[str, np.ndarray]) -> None:
        for prefix, params in self._named_groups():
            for p in params:
                p.tensor.data = state[f"{prefix}{p.name}"].astype(p.data.dtype)

    def _named_groups(self):
        groups = [("local.", self.local.parameters())]
        for dom in sorted(self.global_branches):
            groups.append((f"global.{dom}.", self.global_branches[dom].parameters()))
        if self.gate is not None:
            groups.append(("", self.gate.parameters()))
        return groups


def drop_expert(client: ClientState, domain_id: str) -> None:
    """Remove one synchronized expert from a client's branch set."""
    if domain_id == client.domain_id:
        raise ConfigError(f"cannot drop {domain_id!r} from its own domain")
    if domain_id not in client.global_branches:
        return
    del client.global_branches[domain_id]
    if client.gate is not None:
        client.gate = init_gate(1 + len(client.global_branches), client.cfg.width,
                                client.cfg.gate_hidden_dim,
                                client.round_rng(_TAG_INIT, 1))
        client.optimizer = Adam(client.all_parameters(), lr=client.cfg.learning_rate,
                                beta1=client.cfg.adam_beta1, beta2=client.cfg.adam_beta2,
                                eps=client.cfg.adam_eps)


def build_client(scenario: ScenarioSpec, domain_id: str, cfg: RunConfig) -> ClientState:
    ids = sorted(scenario.domain_ids)
    domain_index = ids.index(domain_id)
    dataset = next(d for d in scenario.domains if d.domain_id == domain_id)
    model_cfg = cfg.model_config()
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, domain_index, _TAG_INIT, 0]))

    local = init_branch(rng, dataset.num_items, model_cfg)
    global_branches: dict[str, BranchParams] = {}
    if cfg.mode in GLOBAL_MODES:
        # dropping an expert removes it from every *other* domain's branch
        # set; the dropped domain itself keeps its full set
        for other in ids:
            if other == domain_id or other == cfg.drop_domain:
                continue
            branch = init_branch(rng, dataset.num_items, model_cfg)
            branch.encoder.set_trainable(cfg.mode == "no_freeze")
            global_branches[other] = branch

    gate = None
    if cfg.mode in GATED_MODES:
        gate = init_gate(1 + len(global_branches), cfg.width,
                         cfg.gate_hidden_dim, rng)

    client = ClientState(domain_id=domain_id, dataset=dataset, cfg=cfg,
                         local=local, global_branches=global_branches, gate=gate,
                         optimizer=None, domain_index=domain_index)
    client.optimizer = Adam(client.all_parameters(), lr=cfg.learning_rate,
                            beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                            eps=cfg.adam_eps)
    return client


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def client_losses(client: ClientState, prefixes: np.ndarray, aug_prefixes: np.ndarray,
                  targets: np.ndarray, rng: np.random.Generator | None,
                  train: bool = True) -> tuple[Tensor, dict[str, float]]:
    """Weighted total of every branch objective plus the fusion objective.

    Components: next-item and contrastive losses for the local branch and
    each global branch, then the gated-mixture loss (2D + 1 terms for D
    visible experts).
    """
    cfg = client.cfg
    adj = client.dataset.adjacency
    order = client.expert_order()
    z_list, prob_list = [], []
    total = None
    components: dict[str, float] = {}

    for dom, branch in zip(order, client.branches_in_order()):
        tag = "local" if dom == client.domain_id else dom
        table = lookup_table(branch, adj)
        z, z_aug, logits = encode_pair(branch, adj, prefixes, aug_prefixes,
                                       train=train, rng=rng, table=table)
        rec = rec_loss(logits, targets)
        con = contrastive_loss(z, z_aug, cfg.temperature)
        components[f"rec:{tag}"] = float(rec.data)
        components[f"con:{tag}"] = float(con.data)
        term = ad.add(ad.scale(rec, cfg.rec_weight), ad.scale(con, cfg.con_weight))
        total = term if total is None else ad.add(total, term)
        z_list.append(z)
        prob_list.append(ad.softmax(logits, axis=-1))

    if len(order) > 1:
        if client.gate is not None:
            weights = gate_forward(z_list, client.gate)
        else:
            weights = uniform_gate_weights(prefixes.shape[0], len(order))
        fusion = fuse(prob_list, weights, train_experts=cfg.moe_grad_to_experts)
        fused = moe_loss(fusion, targets)
        components["moe"] = float(fused.data)
        total = ad.add(total, ad.scale(fused, cfg.moe_weight))

    return total, components


def client_update(client: ClientState, snapshot: dict[str, ExpertCheckpoint] | None,
                  round_index: int, local_epochs: int | None = None,
                  local_only: bool = False, rng_tag: int = _TAG_ROUND) -> ExpertCheckpoint:
    """Synchronize, run the local epochs, and return the local encoder."""
    cfg = client.cfg
    if snapshot is not None and client.global_branches:
        client.sync(snapshot)
    rng = client.round_rng(rng_tag, round_index)
    prefixes, targets = client.dataset.train_arrays()
    epochs = cfg.local_epochs if local_epochs is None else local_epochs

    for _ in range(epochs):
        order = rng.permutation(len(targets))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = prefixes[idx]
            aug = augment_batch(batch, cfg.shuffle_ratio, rng)
            client.optimizer.zero_grad()
            with Tape() as tape:
                if local_only:
                    total, components = _local_branch_losses(client, batch, aug,
                                                             targets[idx], rng)
                else:
                    total, components = client_losses(client, batch, aug,
                                                      targets[idx], rng)
                backward(total, tape)
            client.optimizer.step()
            if not np.isfinite(total.data):
                raise FloatingPointError(
                    f"non-finite loss in domain {client.domain_id}: {components}")
    return client.local_encoder_checkpoint()


def _local_branch_losses(client, prefixes, aug_prefixes, targets, rng):
    cfg = client.cfg
    adj = client.dataset.adjacency
    table = lookup_table(client.local, adj)
    z, z_aug, logits = encode_pair(client.local, adj, prefixes, aug_prefixes,
                                   train=True, rng=rng, table=table)
    rec = rec_loss(logits, targets)
    con = contrastive_loss(z, z_aug, cfg.temperature)
    total = ad.add(ad.scale(rec, cfg.rec_weight), ad.scale(con, cfg.con_weight))
    return total, {"rec:local": float(rec.data), "con:local": float(con.data)}


def fedavg_aggregate(checkpoints: list[ExpertCheckpoint]) -> ExpertCheckpoint:
    """Elementwise mean across identically shaped checkpoints."""
    if not checkpoints:
        raise ValueError("nothing to aggregate")
    names = checkpoints[0].names
    for c in checkpoints[1:]:
        if c.names != names:
            raise ValueError("checkpoint parameter names disagree")
        for n in names:
            if c.get(n).shape != checkpoints[0].get(n).shape:
                raise ValueError(f"shape mismatch for {n}")
    entries = []
    for n in names:
        stacked = np.stack([c.get(n).astype(np.float64) for c in checkpoints])
        entries.append((n, stacked.mean(axis=0).astype(np.float32)))
    return ExpertCheckpoint(entries)


# ---------------------------------------------------------------------------
# evaluation over clients
# ---------------------------------------------------------------------------


def _client_scores(client: ClientState, prefixes: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Item score matrix (batch, num_items) and per-sample gate weights."""
    cfg = client.cfg
    adj = client.dataset.adjacency
    if not client.global_branches:
        _, logits = encode_batch(client.local, adj, prefixes)
        probs = ad.softmax(logits, axis=-1)
        return probs.data, None
    z_list, prob_list = [], []
    for branch in client.branches_in_order():
        z, logits = encode_batch(branch, adj, prefixes)
        z_list.append(z)
        prob_list.append(ad.softmax(logits, axis=-1))
    if client.gate is not None:
        weights = gate_forward(z_list, client.gate)
    else:
        weights = uniform_gate_weights(prefixes.shape[0], len(prob_list))
    fusion = fuse(prob_list, weights)
    return fusion.mixture.data, fusion.gate_weights.data


def evaluate_client(client: ClientState, split: str) -> DomainMetrics:
    cfg = client.cfg
    prefixes, targets = client.dataset.eval_arrays(split)
    ranks = []
    gate_sum = None
    count = 0
    for start in range(0, len(targets), cfg.eval_batch):
        chunk = prefixes[start:start + cfg.eval_batch]
        tgt = targets[start:start + cfg.eval_batch]
        scores, gates = _client_scores(client, chunk)
        for i in range(len(tgt)):
            exclude = set(int(x) for x in chunk[i] if x) if cfg.exclude_seen else None
            if exclude and int(tgt[i]) in exclude:
                exclude.discard(int(tgt[i]))
            ranks.append(rank_target(scores[i], int(tgt[i]), exclude))
        if gates is not None:
            gate_sum = gates.sum(axis=0) if gate_sum is None else gate_sum + gates.sum(axis=0)
            count += gates.shape[0]
    mrr, hr, ndcg = compute_metrics(ranks)
    gate_weights = tuple(float(x) for x in gate_sum / count) if gate_sum is not None else None
    return DomainMetrics(mrr, hr, ndcg, gate_weights)


def evaluate_all(clients: list[ClientState], split: str, round_index: int,
                 mode: str) -> MetricsReport:
    per_domain = {c.domain_id: evaluate_client(c, split)
                  for c in sorted(clients, key=lambda c: c.domain_id)}
    return MetricsReport(mode=mode, round_index=round_index,
                         per_domain=per_domain, split=split)


# ---------------------------------------------------------------------------
# round loops
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class RunResult:
    mode: str
    history: list[MetricsReport]
    final_test: MetricsReport
    best_round: int
    cache: ServerCache
    clients: list[ClientState]


def _run_updates(clients, snapshot, round_index, cfg, **kwargs):
    if cfg.parallel_clients:
        with concurrent.futures.ThreadPoolExecutor(max_workers=len(clients)) as pool:
            futures = {c.domain_id: pool.submit(client_update, c, snapshot,
                                                round_index, **kwargs)
                       for c in clients}
            return {dom: fut.result() for dom, fut in futures.items()}
    return {c.domain_id: client_update(c, snapshot, round_index, **kwargs)
            for c in clients}


def _early_stop_loop(clients, cfg, mode, round_fn):
    """Shared round loop with early stopping on average validation MRR."""
    history: list[MetricsReport] = []
    best_mrr, best_round, stale = -np.inf, -1, 0
    best_states = None
    for t in range(cfg.rounds):
        round_fn(t)
        report = evaluate_all(clients, "valid", t, mode)
        history.append(report)
        logger.info("round %d [%s] avg valid MRR %.3f", t, mode, report.avg.mrr)
        if report.avg.mrr > best_mrr:
            best_mrr, best_round, stale = report.avg.mrr, t, 0
            best_states = [c.snapshot_parameters() for c in clients]
        else:
            stale += 1
            if stale >= cfg.patience > 0:
                logger.info("early stop after round %d (no improvement for %d rounds)",
                            t, stale)
                break
    if best_states is not None:
        for client, state in zip(clients, best_states):
            client.restore_parameters(state)
    return history, best_round


def run(scenario: ScenarioSpec, cfg: RunConfig) -> RunResult:
    """Train under the configured mode and return history plus the test
    report at the best validation round."""
    cfg.validate()
    if cfg.mode == "drop_expert" and cfg.drop_domain not in scenario.domain_ids:
        raise ConfigError(f"drop_domain {cfg.drop_domain!r} is not in the scenario")
    dtype = np.float64 if cfg.precision == "float64" else np.float32
    with ad.default_dtype(dtype):
        if cfg.mode == "two_phase":
            return _run_two_phase(scenario, cfg)
        if cfg.mode == "fedavg":
            return _run_fedavg(scenario, cfg)
        return _run_rounds(scenario, cfg)


def _run_rounds(scenario: ScenarioSpec, cfg: RunConfig) -> RunResult:
    clients = [build_client(scenario, d, cfg) for d in sorted(scenario.domain_ids)]
    cache = ServerCache()
    uses_cache = cfg.mode in GLOBAL_MODES
    cache.round_index = -1  # cache is seeded with the initial encoders
    for c in clients:
        cache.put(c.domain_id, c.local_encoder_checkpoint())

    def one_round(t):
        cache.round_index = t
        snapshot = cache.snapshot() if uses_cache else None
        updates = _run_updates(clients, snapshot, t, cfg,
                               local_only=cfg.mode == "local_only")
        if uses_cache:
            for dom in sorted(updates):
                cache.put(dom, updates[dom])

    history, best_round = _early_stop_loop(clients, cfg, cfg.mode, one_round)
    final = evaluate_all(clients, "test", best_round, cfg.mode)
    return RunResult(cfg.mode, history, final, best_round, cache, clients)


def _run_fedavg(scenario: ScenarioSpec, cfg: RunConfig) -> RunResult:
    clients = [build_client(scenario, d, cfg) for d in sorted(scenario.domain_ids)]
    cache = ServerCache()
    server_rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, _TAG_SERVER]))
    cache.shared = checkpoint_from_params(
        init_encoder(server_rng, cfg.model_config()).parameters())

    def one_round(t):
        cache.round_index = t
        shared = cache.shared
        for c in clients:
            c.sync_shared(shared)
        updates = _run_updates(clients, None, t, cfg, local_only=True)
        for dom in sorted(updates):
            cache.put(dom, updates[dom])
        cache.shared = fedavg_aggregate([updates[d] for d in sorted(updates)])

    history, best_round = _early_stop_loop(clients, cfg, "fedavg", one_round)
    final = evaluate_all(clients, "test", best_round, "fedavg")
    return RunResult("fedavg", history, final, best_round, cache, clients)


def _run_two_phase(scenario: ScenarioSpec, cfg: RunConfig) -> RunResult:
    """Independent pretraining, one synchronization, frozen fine-tuning."""
    clients = [build_client(scenario, d, cfg) for d in sorted(scenario.domain_ids)]
    cache = ServerCache()
    if cfg.pretrain_epochs > 0:
        for c in clients:
            client_update(c, None, 0, local_epochs=cfg.pretrain_epochs,
                          local_only=True, rng_tag=_TAG_PRETRAIN)
    for c in clients:
        cache.put(c.domain_id, c.local_encoder_checkpoint())
    snapshot = cache.snapshot()
    for c in clients:
        c.sync(snapshot)

    def one_round(t):
        _run_updates(clients, None, t, cfg)  # no further synchronization

    history, best_round = _early_stop_loop(clients, cfg, "two_phase", one_round)
    final = evaluate_all(clients, "test", best_round, "two_phase")
    return RunResult("two_phase", history, final, best_round, cache, clients)


def run_federation(scenario: ScenarioSpec, cfg: RunConfig) -> list[MetricsReport]:
    """Round-by-round validation metrics for the configured mode."""
    return run(scenario, cfg).history


def run_mode(scenario: ScenarioSpec, cfg: RunConfig, mode: str,
             drop_domain: str | None = None) -> MetricsReport:
    """Final test report for one mode (baselines and ablations)."""
    variant = dataclasses.replace(cfg, mode=mode,
                                  drop_domain=drop_domain or cfg.drop_domain)
    return run(scenario, variant).final_test


def run_two_phase(scenario: ScenarioSpec, cfg: RunConfig,
                  global_pretrain_epochs: int) -> MetricsReport:
    variant = dataclasses.replace(cfg, mode="two_phase",
                                  pretrain_epochs=global_pretrain_epochs)
    return run(scenario, variant).final_test
