"""Wires the chain, network, and FL engine into the asynchronous protocol:
miners mine and gossip continuously; clients aggregate the updates of each
newly delivered head block, train locally, and submit the result as a
transaction.

Clients cycle idle -> training -> uploading -> idle. A client that is mid
round ignores interim head deliveries and aggregates only from the newest
delivered head once it returns to idle. Aggregation replaces the client's
model with the FedAvg of the block's updates; an empty block leaves the
model unchanged but still starts a new round.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .chain import (
    Block,
    ChainParams,
    LedgerView,
    Mempool,
    Transaction,
    append_block,
    branch_diff,
    main_chain,
    make_block,
    prune_mempool,
    stale_rate,
)
from .config import FL_MODE_FULL, ExperimentConfig, run_id
from .data import (
    DataShard,
    EvalSplit,
    load_idx_images,
    load_idx_labels,
    shard_dataset,
    shard_sizes,
    split_test_set,
    synthetic_dataset,
)
from .des import (
    CLIENT_BLOCK_DELIVERED,
    CLIENT_TRAIN_DONE,
    MINE_BLOCK,
    RECEIVE_BLOCK,
    RECEIVE_TX,
    SIM_STOP,
    Engine,
    Event,
)
from .fnn import (
    ComputeProfile,
    ModelWeights,
    evaluate,
    fedavg,
    init_model,
    local_update,
    sample_compute_time,
)
from .network import MiningProcess, Network, Topology, build_attachment, transfer_delay

PHASE_IDLE = "idle-awaiting-block"
PHASE_TRAINING = "training"
PHASE_UPLOADING = "uploading"

INITIAL_MODEL_REF = 0  # update-store id of the initial global model


@dataclass
class ClientState:
    id: int
    attached_miner: int
    profile: ComputeProfile
    shard: DataShard | None        # None in chain-only mode
    num_samples: int
    weights: ModelWeights | None
    phase: str = PHASE_IDLE
    latest_delivered_head: int = -1
    consumed_head: int = -1


@dataclass
class MinerState:
    id: int
    view: LedgerView
    mempool: Mempool
    orphans: dict[int, list[Block]] = field(default_factory=dict)
    included: set[int] = field(default_factory=set)  # txs on the current head chain


@dataclass(frozen=True)
class AoBRecord:
    """Per-block freshness: ages of the carried updates at mine time."""

    block_id: int
    num_updates: int
    ages: tuple[float, ...]
    mean_age: float


@dataclass
class MetricsRow:
    index: int
    depth: int
    mine_time: float
    num_updates: int
    aob: float | None
    train_acc: float | None
    test_acc: float | None
    val_acc: float | None
    contrib_train_acc: float | None
    mean_client_loss: float | None


@dataclass
class RunResult:
    config: ExperimentConfig
    run_id: str
    blocks: dict[int, Block]              # every block ever mined, in mined order
    txs: dict[int, Transaction]
    main_chain_ids: list[int]             # genesis first
    stale_rate: float
    metrics: list[MetricsRow]
    aob_records: list[AoBRecord]          # main-chain blocks with updates
    client_losses: list[tuple[float, int, float]]
    attachment: dict[int, int]
    mean_aob: float | None
    final_train_acc: float | None
    final_test_acc: float | None
    trace: list | None
    global_models: list[tuple[int, ModelWeights]] | None = None


def compute_aob(block: Block, tx_store: dict[int, Transaction]) -> AoBRecord | None:
    """Mean inclusion age of a block's updates; undefined (None) for empty blocks."""
    if not block.txs:
        return None
    ages = tuple(block.mine_time - tx_store[tx_id].gen_time for tx_id in block.txs)
    return AoBRecord(block.block_id, len(ages), ages, sum(ages) / len(ages))


def global_model_at(
    prefix: list[Block],
    tx_store: dict[int, Transaction],
    update_store: dict[int, ModelWeights],
    initial: ModelWeights,
) -> ModelWeights:
    """Model after replaying a main-chain prefix.

    Each non-empty block replaces the running model with the FedAvg of its
    updates (replacement, not accumulation), so the last non-empty block
    fully determines the result; empty blocks change nothing.
    """
    model = initial
    for block in prefix:
        if block.txs:
            model = _aggregate_block(block, tx_store, update_store)
    return model


def _aggregate_block(
    block: Block,
    tx_store: dict[int, Transaction],
    update_store: dict[int, ModelWeights],
) -> ModelWeights:
    alpha = 1.0 / len(block.txs)
    return fedavg([(update_store[tx_store[tx_id].update_ref], alpha) for tx_id in block.txs])


class Simulation:
    """One seeded experiment; drive with run()."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.full_fl = cfg.fl_mode == FL_MODE_FULL
        self.engine = Engine(cfg.seed, trace=cfg.trace)

        miners = tuple(range(cfg.num_miners))
        clients = tuple(range(cfg.num_clients))
        attach = build_attachment(clients, miners, self.engine.rng_stream("attach"))
        self.topology = Topology(
            miners=miners,
            clients=clients,
            attach=attach,
            p2p_capacity=cfg.p2p_capacity_bps,
            client_capacity=cfg.client_capacity_bps,
        )
        self.network = Network(self.engine, self.topology, verify_delay=cfg.verify_delay_s)

        if cfg.hashpower is None:
            shares = {m: 1.0 / cfg.num_miners for m in miners}
        else:
            total = float(sum(cfg.hashpower))
            shares = {m: h / total for m, h in zip(miners, cfg.hashpower)}
        self.mining = MiningProcess(cfg.block_interval_s, shares)

        self.params = ChainParams(
            max_block_txs=cfg.max_block_txs,
            tx_size_bits=cfg.tx_size_bits,
            header_size_bits=cfg.header_size_bits,
        )

        # rng streams, one per stochastic component
        self._mining_rng = {m: self.engine.rng_stream(f"mining-{m}") for m in miners}
        self._compute_rng = {k: self.engine.rng_stream(f"compute-client-{k}") for k in clients}
        if self.full_fl:
            self._shuffle_rng = {k: self.engine.rng_stream(f"shuffle-client-{k}") for k in clients}

        self.split = self._load_data() if self.full_fl else None
        self.update_store: dict[int, ModelWeights] = {}
        self._store_dtype = np.float32 if cfg.update_store_dtype == "float32" else np.float64

        if self.full_fl:
            self.initial_model = init_model(list(cfg.layer_sizes), self.engine.rng_stream("model-init"))
            self.update_store[INITIAL_MODEL_REF] = self.initial_model.astype(self._store_dtype)
            shards = shard_dataset(
                self.split.train_x, self.split.train_y, cfg.num_clients,
                self.engine.rng_stream("shard"),
            )
        else:
            self.initial_model = None
            shards = None
        sizes = shard_sizes(cfg.synthetic_train, cfg.num_clients)

        self.miners = {
            m: MinerState(m, LedgerView.with_genesis(m), Mempool(m)) for m in miners
        }
        self.clients = {}
        for k in clients:
            profile = ComputeProfile(cfg.mips_for(k), cfg.work_per_update)
            shard = shards[k] if shards is not None else None
            self.clients[k] = ClientState(
                id=k,
                attached_miner=attach[k],
                profile=profile,
                shard=shard,
                num_samples=len(shard) if shard is not None else sizes[k],
                weights=self.initial_model,
            )

        self.blocks: dict[int, Block] = {0: self.miners[0].view.blocks[0]}
        self.txs: dict[int, Transaction] = {}
        self._next_block_id = itertools.count(1)
        self._next_tx_id = itertools.count(0)
        self._next_update_id = itertools.count(INITIAL_MODEL_REF + 1)
        self._max_depth = 0
        self._stopped = False
        self.client_losses: list[tuple[float, int, float]] = []

        self.engine.on(MINE_BLOCK, self._on_mine)
        self.engine.on(RECEIVE_BLOCK, self._on_receive_block)
        self.engine.on(RECEIVE_TX, self._on_receive_tx)
        self.engine.on(CLIENT_TRAIN_DONE, self._on_client_train_done)
        self.engine.on(CLIENT_BLOCK_DELIVERED, self._on_client_block)
        self.engine.on(SIM_STOP, self._on_stop)

        for m in miners:
            delay = self.mining.sample_mining_time(m, self._mining_rng[m])
            self.engine.schedule_in(delay, Event(MINE_BLOCK, m))

    def _load_data(self) -> EvalSplit:
        cfg = self.cfg
        if cfg.data_source == "idx":
            train_x = load_idx_images(cfg.train_images)
            train_y = load_idx_labels(cfg.train_labels)
            test_x = load_idx_images(cfg.test_images)
            test_y = load_idx_labels(cfg.test_labels)
        else:
            train_x, train_y, test_x, test_y = synthetic_dataset(
                cfg.synthetic_train,
                cfg.synthetic_test,
                features=cfg.layer_sizes[0],
                rng=self.engine.rng_stream("synthetic-data"),
                classes=cfg.layer_sizes[-1],
                noise=cfg.synthetic_noise,
            )
        if train_x.shape[1] != cfg.layer_sizes[0]:
            raise ValueError(
                f"dataset has {train_x.shape[1]} features but the model expects "
                f"{cfg.layer_sizes[0]}"
            )
        tx, ty, vx, vy = split_test_set(
            test_x, test_y, cfg.test_fraction, self.engine.rng_stream("test-split")
        )
        return EvalSplit(train_x, train_y, tx, ty, vx, vy)

    # ------------------------------------------------------------------
    # event handlers
    # ------------------------------------------------------------------

    def _on_mine(self, ev: Event) -> None:
        miner = self.miners[ev.actor]
        block = make_block(
            miner.view, miner.mempool, self.engine.now, self.params, next(self._next_block_id)
        )
        self.blocks[block.block_id] = block
        miner.included.update(block.txs)
        self._max_depth = max(self._max_depth, block.depth)
        self.network.broadcast_block(miner.id, block)
        self.network.deliver_block_to_clients(miner.id, block)
        # mining never stalls: the next attempt is scheduled unconditionally
        delay = self.mining.sample_mining_time(miner.id, self._mining_rng[miner.id])
        self.engine.schedule_in(delay, Event(MINE_BLOCK, miner.id))

    def _on_receive_block(self, ev: Event) -> None:
        miner = self.miners[ev.actor]
        block = self.blocks[ev.obj]
        if miner.view.has(block.block_id):
            return
        if not miner.view.has(block.parent_id):
            miner.orphans.setdefault(block.parent_id, []).append(block)
            return
        old_head = miner.view.head_id
        self._insert_with_orphans(miner, block)
        if miner.view.head_id != old_head:
            abandoned, adopted = branch_diff(miner.view, old_head, miner.view.head_id)
            for blk in abandoned:
                miner.included.difference_update(blk.txs)
            adopted_txs = {tx for blk in adopted for tx in blk.txs}
            miner.included.update(adopted_txs)
            prune_mempool(miner.mempool, adopted, abandoned)
            self.network.deliver_block_to_clients(miner.id, miner.view.head)

    def _insert_with_orphans(self, miner: MinerState, block: Block) -> None:
        queue = [block]
        while queue:
            blk = queue.pop(0)
            update = append_block(miner.view, blk)
            if update.accepted:
                queue.extend(miner.orphans.pop(blk.block_id, ()))

    def _on_receive_tx(self, ev: Event) -> None:
        miner = self.miners[ev.actor]
        tx = self.txs[ev.obj]
        first_receipt = not miner.mempool.seen(tx.tx_id)
        if tx.tx_id not in miner.included:
            miner.mempool.add(tx.tx_id)
        if first_receipt and self.topology.attach[tx.client_id] == miner.id:
            # fresh arrival from an attached client: gossip it, and the upload
            # finishing means the client is idle again
            self.network.broadcast_tx(miner.id, tx)
            self._on_upload_complete(self.clients[tx.client_id])

    def _on_upload_complete(self, client: ClientState) -> None:
        client.phase = PHASE_IDLE
        if client.latest_delivered_head >= 0 and client.latest_delivered_head != client.consumed_head:
            self._start_round(client)

    def _on_client_block(self, ev: Event) -> None:
        client = self.clients[ev.actor]
        client.latest_delivered_head = ev.obj
        if client.phase == PHASE_IDLE and ev.obj != client.consumed_head:
            self._start_round(client)

    def _start_round(self, client: ClientState) -> None:
        """Aggregate from the newest delivered head and begin local training."""
        block = self.blocks[client.latest_delivered_head]
        client.consumed_head = block.block_id
        if self.full_fl and block.txs:
            client.weights = _aggregate_block(block, self.txs, self.update_store)
        client.phase = PHASE_TRAINING
        delay = sample_compute_time(client.profile, self._compute_rng[client.id])
        self.engine.schedule_in(delay, Event(CLIENT_TRAIN_DONE, client.id))

    def _on_client_train_done(self, ev: Event) -> None:
        client = self.clients[ev.actor]
        cfg = self.cfg
        if self.full_fl:
            new_weights, mean_loss = local_update(
                client.weights,
                client.shard.samples,
                client.shard.labels,
                self._shuffle_rng[client.id],
                cfg.epochs,
                cfg.batch_size,
                cfg.learning_rate,
            )
            if not new_weights.all_finite():
                raise FloatingPointError(
                    f"client {client.id} produced non-finite weights at t={self.engine.now}"
                )
            client.weights = new_weights
            self.client_losses.append((self.engine.now, client.id, mean_loss))
            update_ref = next(self._next_update_id)
            self.update_store[update_ref] = new_weights.astype(self._store_dtype)
        else:
            update_ref = INITIAL_MODEL_REF
        tx = Transaction(
            tx_id=next(self._next_tx_id),
            client_id=client.id,
            update_ref=update_ref,
            num_samples=client.num_samples,
            gen_time=self.engine.now,
            size_bits=cfg.tx_size_bits,
        )
        self.txs[tx.tx_id] = tx
        client.phase = PHASE_UPLOADING
        delay = transfer_delay(tx.size_bits, self.topology.client_capacity)
        self.engine.schedule_in(delay, Event(RECEIVE_TX, client.attached_miner, tx.tx_id))

    def _on_stop(self, ev: Event) -> None:
        self._stopped = True

    # ------------------------------------------------------------------
    # run + metrics
    # ------------------------------------------------------------------

    def run(self) -> RunResult:
        target = self.cfg.num_blocks
        self.engine.run_until(lambda: self._stopped or self._max_depth >= target)
        return self._collect()

    def _collect(self) -> RunResult:
        chain = main_chain([m.view for m in self.miners.values()])
        chain_ids = [b.block_id for b in chain]
        rate = stale_rate(list(self.blocks.values()), chain)
        metrics, aob_records, models = self._metrics_for(chain)
        aob_values = [r.mean_age for r in aob_records]
        final = metrics[-1] if metrics else None
        return RunResult(
            config=self.cfg,
            run_id=run_id(self.cfg),
            blocks=self.blocks,
            txs=self.txs,
            main_chain_ids=chain_ids,
            stale_rate=rate,
            metrics=metrics,
            aob_records=aob_records,
            client_losses=self.client_losses,
            attachment=dict(self.topology.attach),
            mean_aob=sum(aob_values) / len(aob_values) if aob_values else None,
            final_train_acc=final.train_acc if final else None,
            final_test_acc=final.test_acc if final else None,
            trace=self.engine.trace,
            global_models=models if self.cfg.export_weights else None,
        )

    def _metrics_for(self, chain: list[Block]):
        """One row per main-chain block (genesis excluded), in depth order.

        Recomputed against the final main chain, so rows affected by reorgs
        during the run reflect the surviving history.
        """
        rows: list[MetricsRow] = []
        aob_records: list[AoBRecord] = []
        models: list[tuple[int, ModelWeights]] = []
        losses = sorted(self.client_losses, key=lambda item: item[0])
        loss_pos = 0
        model = self.initial_model
        cached_accs = None  # model only changes at non-empty blocks
        prev_time = chain[0].mine_time
        for index, block in enumerate(chain[1:], start=1):
            record = compute_aob(block, self.txs)
            if record is not None:
                aob_records.append(record)
            window: list[float] = []
            while loss_pos < len(losses) and losses[loss_pos][0] <= block.mine_time:
                if losses[loss_pos][0] > prev_time:
                    window.append(losses[loss_pos][2])
                loss_pos += 1
            train_acc = test_acc = val_acc = contrib_acc = None
            if self.full_fl:
                if block.txs:
                    model = _aggregate_block(block, self.txs, self.update_store)
                    cached_accs = None
                if cached_accs is None:
                    cached_accs = (
                        evaluate(model, self.split.train_x, self.split.train_y)[0],
                        evaluate(model, self.split.test_x, self.split.test_y)[0],
                        evaluate(model, self.split.val_x, self.split.val_y)[0],
                    )
                train_acc, test_acc, val_acc = cached_accs
                if block.txs:
                    contrib_acc = self._contributor_accuracy(model, block)
                if self.cfg.export_weights:
                    models.append((block.depth, model))
            rows.append(
                MetricsRow(
                    index=index,
                    depth=block.depth,
                    mine_time=block.mine_time,
                    num_updates=len(block.txs),
                    aob=record.mean_age if record else None,
                    train_acc=train_acc,
                    test_acc=test_acc,
                    val_acc=val_acc,
                    contrib_train_acc=contrib_acc,
                    mean_client_loss=sum(window) / len(window) if window else None,
                )
            )
            prev_time = block.mine_time
        return rows, aob_records, models

    def _contributor_accuracy(self, model: ModelWeights, block: Block) -> float:
        """Accuracy on the union of the contributing clients' shards."""
        owners = sorted({self.txs[tx_id].client_id for tx_id in block.txs})
        xs = np.concatenate([self.clients[k].shard.samples for k in owners])
        ys = np.concatenate([self.clients[k].shard.labels for k in owners])
        acc, _ = evaluate(model, xs, ys)
        return acc


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Build and run one simulation; pure apart from rng state held inside."""
    return Simulation(cfg).run()
