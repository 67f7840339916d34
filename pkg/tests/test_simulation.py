import math

import numpy as np
import pytest

from blockfed.chain import Block, Transaction, block_size_bits, main_chain
from blockfed.config import config_from_dict
from blockfed.des import CLIENT_BLOCK_DELIVERED, MINE_BLOCK, RECEIVE_BLOCK, Event
from blockfed.fnn import ModelWeights
from blockfed.simulation import (
    PHASE_IDLE,
    PHASE_TRAINING,
    PHASE_UPLOADING,
    Simulation,
    compute_aob,
    global_model_at,
    run_experiment,
)


def chain_only_sim(seed=1, miners=2, clients=2, **blockchain):
    raw = {
        "blockchain": {"num_miners": miners, "num_blocks": 10, **blockchain},
        "fl": {"num_clients": clients, "fl_mode": "chain-only"},
        "run": {"seed": seed},
    }
    return Simulation(config_from_dict(raw))


def register_block(sim, block_id, parent, depth, miner, txs=(), mine_time=0.0):
    block = Block(block_id, parent, depth, miner, tuple(txs), mine_time,
                  block_size_bits(len(txs), sim.params))
    sim.blocks[block_id] = block
    return block


def register_tx(sim, tx_id, client=0, gen_time=0.0):
    tx = Transaction(tx_id, client, 0, 10, gen_time, sim.cfg.tx_size_bits)
    sim.txs[tx_id] = tx
    return tx


def scheduled_events(sim):
    return [ev for _, _, ev in sim.engine._heap]


class TestForkHandling:
    def test_equal_depth_competitor_does_not_notify_clients(self):
        sim = chain_only_sim()
        m0 = sim.miners[0]
        first = register_block(sim, 1, 0, 1, miner=0, mine_time=1.0)
        sim.engine.now = 1.0
        sim._on_receive_block(Event(RECEIVE_BLOCK, 0, 1))
        assert m0.view.head_id == 1
        deliveries = [ev for ev in scheduled_events(sim) if ev.kind == CLIENT_BLOCK_DELIVERED]
        baseline = len(deliveries)
        competitor = register_block(sim, 2, 0, 1, miner=1, mine_time=1.1)
        sim.engine.now = 1.2
        sim._on_receive_block(Event(RECEIVE_BLOCK, 0, 2))
        assert m0.view.head_id == 1          # first seen wins
        assert m0.view.has(2)                # fork retained as side branch
        deliveries = [ev for ev in scheduled_events(sim) if ev.kind == CLIENT_BLOCK_DELIVERED]
        assert len(deliveries) == baseline   # no new client notification

    def test_reorg_switches_head_and_repopulates_mempool(self):
        sim = chain_only_sim()
        m0 = sim.miners[0]
        t1 = register_tx(sim, 0)
        t2 = register_tx(sim, 1)
        m0.mempool.add(0)
        m0.mempool.add(1)
        # miner 0 head: A1 carrying both txs
        a1 = register_block(sim, 1, 0, 1, miner=0, txs=(0, 1), mine_time=1.0)
        sim.engine.now = 1.0
        sim._on_receive_block(Event(RECEIVE_BLOCK, 0, 1))
        assert m0.view.head_id == 1
        assert len(m0.mempool) == 0
        assert m0.included == {0, 1}
        # competing empty branch B1 <- B2 wins on depth
        register_block(sim, 2, 0, 1, miner=1, mine_time=1.1)
        register_block(sim, 3, 2, 2, miner=1, mine_time=2.0)
        sim.engine.now = 2.1
        sim._on_receive_block(Event(RECEIVE_BLOCK, 0, 2))
        assert m0.view.head_id == 1
        sim._on_receive_block(Event(RECEIVE_BLOCK, 0, 3))
        assert m0.view.head_id == 3
        assert m0.mempool.pending_in_arrival_order() == [0, 1]  # back, in order
        assert m0.included == set()

    def test_orphan_buffered_until_parent_arrives(self):
        sim = chain_only_sim()
        m0 = sim.miners[0]
        parent = register_block(sim, 1, 0, 1, miner=1, mine_time=1.0)
        child = register_block(sim, 2, 1, 2, miner=1, mine_time=2.0)
        sim.engine.now = 2.5
        sim._on_receive_block(Event(RECEIVE_BLOCK, 0, 2))  # child first
        assert not m0.view.has(2)
        assert m0.view.head_id == 0
        sim._on_receive_block(Event(RECEIVE_BLOCK, 0, 1))
        assert m0.view.has(1) and m0.view.has(2)
        assert m0.view.head_id == 2
        assert m0.orphans == {}

    def test_duplicate_block_receipt_is_noop(self):
        sim = chain_only_sim()
        register_block(sim, 1, 0, 1, miner=1, mine_time=1.0)
        sim.engine.now = 1.0
        sim._on_receive_block(Event(RECEIVE_BLOCK, 0, 1))
        before = len(scheduled_events(sim))
        sim._on_receive_block(Event(RECEIVE_BLOCK, 0, 1))
        assert len(scheduled_events(sim)) == before


class TestMining:
    def test_empty_mempool_mines_empty_block_and_propagates(self):
        sim = chain_only_sim(miners=3)
        sim.engine.now = 5.0
        sim._on_mine(Event(MINE_BLOCK, 0))
        mined = [b for b in sim.blocks.values() if b.parent_id is not None]
        assert len(mined) == 1
        assert mined[0].txs == ()
        assert mined[0].size_bits == sim.cfg.header_size_bits
        kinds = [ev.kind for ev in scheduled_events(sim)]
        assert kinds.count(RECEIVE_BLOCK) == 2     # both peers
        assert MINE_BLOCK in kinds                 # next attempt scheduled

    def test_block_respects_capacity(self):
        sim = chain_only_sim(max_block_txs=10)
        m0 = sim.miners[0]
        for i in range(30):
            register_tx(sim, i)
            m0.mempool.add(i)
        sim.engine.now = 5.0
        sim._on_mine(Event(MINE_BLOCK, 0))
        block = [b for b in sim.blocks.values() if b.parent_id is not None][0]
        assert len(block.txs) == 10
        assert len(m0.mempool) == 20

    def test_mining_never_stalls(self):
        sim = chain_only_sim()
        sim.engine.now = 5.0
        sim._on_mine(Event(MINE_BLOCK, 0))
        mines = [ev for ev in scheduled_events(sim) if ev.kind == MINE_BLOCK and ev.actor == 0]
        assert len(mines) >= 1


class TestClientPhases:
    def full_sim(self, seed=3):
        raw = {
            "blockchain": {"num_miners": 2, "num_blocks": 10},
            "fl": {"num_clients": 2, "layer_sizes": [8, 6, 10], "mips": 83.0},
            "data": {"synthetic_train": 100, "synthetic_test": 40},
            "run": {"seed": seed},
        }
        return Simulation(config_from_dict(raw))

    def test_idle_client_with_empty_block_keeps_weights_and_trains(self):
        sim = self.full_sim()
        client = sim.clients[0]
        before = client.weights
        empty = register_block(sim, 1, 0, 1, miner=client.attached_miner, mine_time=1.0)
        sim.engine.now = 1.0
        sim._on_client_block(Event(CLIENT_BLOCK_DELIVERED, 0, 1))
        assert client.phase == PHASE_TRAINING
        assert client.weights is before  # unchanged before training completes

    def test_idle_client_aggregates_all_updates_of_block(self):
        sim = self.full_sim()
        client = sim.clients[0]
        u1 = sim.initial_model.copy()
        for w in u1.weights:
            w += 1.0
        u2 = sim.initial_model.copy()
        for w in u2.weights:
            w += 3.0
        sim.update_store[10] = u1
        sim.update_store[11] = u2
        sim.txs[0] = Transaction(0, 0, 10, 5, 0.5, sim.cfg.tx_size_bits)
        sim.txs[1] = Transaction(1, 1, 11, 5, 0.6, sim.cfg.tx_size_bits)
        register_block(sim, 1, 0, 1, miner=client.attached_miner, txs=(0, 1), mine_time=1.0)
        sim.engine.now = 1.0
        sim._on_client_block(Event(CLIENT_BLOCK_DELIVERED, 0, 1))
        expected = sim.initial_model.weights[0] + 2.0  # mean of +1 and +3
        assert client.weights.weights[0] == pytest.approx(expected)
        assert client.phase == PHASE_TRAINING

    def test_training_client_ignores_interim_heads_until_idle(self):
        sim = self.full_sim()
        client = sim.clients[0]
        register_block(sim, 1, 0, 1, miner=0, mine_time=1.0)
        sim.engine.now = 1.0
        sim._on_client_block(Event(CLIENT_BLOCK_DELIVERED, 0, 1))
        assert client.phase == PHASE_TRAINING
        consumed_first = client.consumed_head
        # two newer heads arrive while training
        register_block(sim, 2, 1, 2, miner=0, mine_time=2.0)
        register_block(sim, 3, 2, 3, miner=0, mine_time=3.0)
        sim.engine.now = 2.0
        sim._on_client_block(Event(CLIENT_BLOCK_DELIVERED, 0, 2))
        sim.engine.now = 3.0
        sim._on_client_block(Event(CLIENT_BLOCK_DELIVERED, 0, 3))
        assert client.consumed_head == consumed_first
        assert client.latest_delivered_head == 3
        # finish training then uploading: the newest head is consumed next
        sim.engine.now = 4.0
        sim._on_client_train_done(Event("client-train-done", 0))
        assert client.phase == PHASE_UPLOADING
        tx = sim.txs[max(sim.txs)]
        assert tx.gen_time == 4.0  # recorded at training completion, pre-uplink
        sim.engine.now = 4.0 + 796.84e3 / 1e6
        sim._on_receive_tx(Event("receive-tx", client.attached_miner, tx.tx_id))
        assert client.consumed_head == 3
        assert client.phase == PHASE_TRAINING  # immediately restarted on newest head

    def test_upload_complete_with_no_new_head_goes_idle(self):
        sim = self.full_sim()
        client = sim.clients[0]
        register_block(sim, 1, 0, 1, miner=client.attached_miner, mine_time=1.0)
        sim.engine.now = 1.0
        sim._on_client_block(Event(CLIENT_BLOCK_DELIVERED, 0, 1))
        sim.engine.now = 2.0
        sim._on_client_train_done(Event("client-train-done", 0))
        tx = sim.txs[max(sim.txs)]
        sim.engine.now = 2.8
        sim._on_receive_tx(Event("receive-tx", client.attached_miner, tx.tx_id))
        assert client.phase == PHASE_IDLE

    def test_tx_forwarded_to_peers_once(self):
        sim = self.full_sim()
        client = sim.clients[0]
        miner = client.attached_miner
        register_block(sim, 1, 0, 1, miner=miner, mine_time=1.0)
        sim.engine.now = 1.0
        sim._on_client_block(Event(CLIENT_BLOCK_DELIVERED, 0, 1))
        sim.engine.now = 2.0
        sim._on_client_train_done(Event("client-train-done", 0))
        tx_id = max(sim.txs)
        sim.engine.now = 2.8
        sim._on_receive_tx(Event("receive-tx", miner, tx_id))
        forwards = [ev for ev in scheduled_events(sim)
                    if ev.kind == "receive-tx" and ev.obj == tx_id and ev.actor != miner]
        assert len(forwards) == 1  # one peer in a 2-miner mesh
        assert tx_id in sim.miners[miner].mempool
        # peer receipt: mempool entry, no further forwarding
        peer = forwards[0].actor
        sim.engine.now = 3.0
        sim._on_receive_tx(Event("receive-tx", peer, tx_id))
        sim._on_receive_tx(Event("receive-tx", peer, tx_id))
        assert tx_id in sim.miners[peer].mempool
        again = [ev for ev in scheduled_events(sim)
                 if ev.kind == "receive-tx" and ev.obj == tx_id and ev.actor != miner]
        assert len(again) == 1  # unchanged


class TestAoB:
    def make_tx_store(self, gen_times):
        return {i: Transaction(i, i, 0, 1, t, 796.84e3) for i, t in enumerate(gen_times)}

    def test_hand_case_from_two_updates(self):
        store = self.make_tx_store([0.0, 2.0])
        block = Block(1, 0, 1, 0, (0, 1), 5.0, 0.0)
        record = compute_aob(block, store)
        assert record.ages == (5.0, 3.0)
        assert record.mean_age == 4.0

    def test_single_update(self):
        store = self.make_tx_store([7.0])
        block = Block(1, 0, 1, 0, (0,), 7.5, 0.0)
        assert compute_aob(block, store).mean_age == 0.5

    def test_zero_age(self):
        store = self.make_tx_store([4.0, 4.0, 4.0])
        block = Block(1, 0, 1, 0, (0, 1, 2), 4.0, 0.0)
        assert compute_aob(block, store).mean_age == 0.0

    def test_empty_block_undefined(self):
        block = Block(1, 0, 1, 0, (), 4.0, 0.0)
        assert compute_aob(block, {}) is None


class TestGlobalModelAt:
    def toy_update(self, value):
        return ModelWeights([np.full((2, 2), value)], [np.zeros(2)])

    def tx_store(self, n):
        # tx i references update i + 100
        return {i: Transaction(i, i, i + 100, 1, 0.0, 1.0) for i in range(n)}

    def test_empty_chain_keeps_initial(self):
        init = self.toy_update(0.0)
        blocks = [Block(i, i - 1, i, 0, (), float(i), 0.0) for i in range(1, 4)]
        out = global_model_at(blocks, {}, {}, init)
        assert out is init

    def test_last_nonempty_block_determines_output(self):
        init = self.toy_update(0.0)
        txs = self.tx_store(4)
        updates = {100: self.toy_update(1.0), 101: self.toy_update(5.0),
                   102: self.toy_update(9.0)}
        blocks = [
            Block(1, 0, 1, 0, (0, 1), 1.0, 0.0),   # mean 3.0
            Block(2, 1, 2, 0, (), 2.0, 0.0),
            Block(3, 2, 3, 0, (2,), 3.0, 0.0),     # replaced by 9.0
            Block(4, 3, 4, 0, (), 4.0, 0.0),
        ]
        out = global_model_at(blocks, txs, updates, init)
        assert np.all(out.weights[0] == 9.0)

    def test_replacement_not_accumulation(self):
        init = self.toy_update(100.0)
        txs = self.tx_store(1)
        updates = {100: self.toy_update(2.0)}
        blocks = [Block(1, 0, 1, 0, (0,), 1.0, 0.0)]
        out = global_model_at(blocks, txs, updates, init)
        assert np.all(out.weights[0] == 2.0)

    def test_dangling_update_ref_is_hard_fault(self):
        init = self.toy_update(0.0)
        txs = self.tx_store(1)  # references update 100 that is absent
        blocks = [Block(1, 0, 1, 0, (0,), 1.0, 0.0)]
        with pytest.raises(KeyError):
            global_model_at(blocks, txs, {}, init)


class TestEndToEnd:
    def test_metrics_rows_match_block_count_and_order(self):
        cfg = config_from_dict({
            "blockchain": {"num_blocks": 12, "num_miners": 3, "block_interval_s": 5.0},
            "fl": {"num_clients": 3, "layer_sizes": [8, 6, 10], "mips": 83.0},
            "data": {"synthetic_train": 120, "synthetic_test": 60},
            "run": {"seed": 11},
        })
        result = run_experiment(cfg)
        assert len(result.metrics) == 12
        assert [r.depth for r in result.metrics] == list(range(1, 13))
        times = [r.mine_time for r in result.metrics]
        assert times == sorted(times)
        for row in result.metrics:
            assert 0.0 <= row.train_acc <= 1.0
            assert 0.0 <= row.test_acc <= 1.0
            assert 0.0 <= row.val_acc <= 1.0
            if row.num_updates == 0:
                assert row.aob is None
            else:
                assert row.aob >= 0.0

    def test_aob_rows_match_independent_recomputation(self):
        cfg = config_from_dict({
            "blockchain": {"num_blocks": 15, "num_miners": 3, "block_interval_s": 4.0},
            "fl": {"num_clients": 4, "fl_mode": "chain-only", "mips": 83.0},
            "run": {"seed": 2},
        })
        result = run_experiment(cfg)
        by_id = {rec.block_id: rec for rec in result.aob_records}
        for block_id in result.main_chain_ids[1:]:
            block = result.blocks[block_id]
            if not block.txs:
                assert block_id not in by_id
                continue
            ages = [block.mine_time - result.txs[t].gen_time for t in block.txs]
            assert all(a >= 0 for a in ages)
            assert by_id[block_id].mean_age == sum(ages) / len(ages)

    def test_infinite_capacity_views_converge_and_no_stales(self):
        cfg = config_from_dict({
            "blockchain": {"num_blocks": 30, "num_miners": 5,
                           "block_interval_s": 2.0, "p2p_capacity_mbps": "inf"},
            "fl": {"num_clients": 5, "fl_mode": "chain-only", "mips": 83.0},
            "run": {"seed": 4},
        })
        sim = Simulation(cfg)
        result = sim.run()
        assert result.stale_rate == 0.0
        # the run stops with the final block's zero-delay receives still queued
        # at the same timestamp; drain them, then every view must agree
        while sim.engine._heap and sim.engine._heap[0][0] == sim.engine.now:
            _, _, ev = sim.engine.next()
            if ev.kind == RECEIVE_BLOCK:
                sim._on_receive_block(ev)
        heads = {m.view.head_id for m in sim.miners.values()}
        assert len(heads) == 1

    def test_client_liveness_under_fast_head_turnover(self):
        cfg = config_from_dict({
            "blockchain": {"num_blocks": 50, "num_miners": 3, "block_interval_s": 5.0},
            "fl": {"num_clients": 4, "fl_mode": "chain-only", "mips": 83.0},
            "run": {"seed": 6},
        })
        result = run_experiment(cfg)
        mean_tfl = 2.8464e8 / (83.0 * 1e6)
        blocks_per_round = math.ceil(mean_tfl / 5.0) + 1
        floor_rounds = 50 // blocks_per_round
        per_client = {k: 0 for k in range(4)}
        for tx in result.txs.values():
            per_client[tx.client_id] += 1
        assert all(count >= floor_rounds for count in per_client.values())

    def test_chain_only_and_full_mode_share_event_timing(self):
        base = {
            "blockchain": {"num_blocks": 8, "num_miners": 2, "block_interval_s": 4.0},
            "fl": {"num_clients": 2, "layer_sizes": [8, 6, 10], "mips": 83.0},
            "data": {"synthetic_train": 80, "synthetic_test": 40},
            "run": {"seed": 9},
        }
        full = run_experiment(config_from_dict(base))
        raw = {**base, "fl": {**base["fl"], "fl_mode": "chain-only"}}
        fast = run_experiment(config_from_dict(raw))
        assert [(b.block_id, b.mine_time, b.txs) for b in full.blocks.values()] == \
               [(b.block_id, b.mine_time, b.txs) for b in fast.blocks.values()]
        assert [(t.tx_id, t.gen_time) for t in full.txs.values()] == \
               [(t.tx_id, t.gen_time) for t in fast.txs.values()]

    def test_weights_stay_finite_through_a_run(self):
        cfg = config_from_dict({
            "blockchain": {"num_blocks": 10, "num_miners": 2, "block_interval_s": 3.0},
            "fl": {"num_clients": 3, "layer_sizes": [8, 6, 10], "mips": 83.0,
                   "learning_rate": 0.05},
            "data": {"synthetic_train": 90, "synthetic_test": 30},
            "run": {"seed": 13},
        })
        sim = Simulation(cfg)
        sim.run()
        for client in sim.clients.values():
            assert client.weights.all_finite()
