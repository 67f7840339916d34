"""Topology and delay model: fully connected miner mesh, client access links,
mining-time sampling, and broadcast scheduling.

Links are pure bandwidth: transfer delay is size/capacity, with infinite
capacity meaning zero delay. Gossip is one-hop over the full mesh with
send-once dedup per origin, so each block or tx crosses each link at most
once.
"""

import math
from dataclasses import dataclass

import numpy as np

from .chain import Block, Transaction
from .des import CLIENT_BLOCK_DELIVERED, RECEIVE_BLOCK, RECEIVE_TX, Engine, Event


@dataclass(frozen=True)
class Topology:
    miners: tuple[int, ...]
    clients: tuple[int, ...]
    attach: dict[int, int]      # client id -> miner id, fixed for a run
    p2p_capacity: float         # bits/s between miners; math.inf allowed
    client_capacity: float      # bits/s on client access links

    def __post_init__(self):
        if len(self.miners) < 1 or len(self.clients) < 1:
            raise ValueError("need at least one miner and one client")
        for client in self.clients:
            if client not in self.attach:
                raise ValueError(f"client {client} has no attached miner")

    def clients_of(self, miner: int) -> list[int]:
        return [c for c in self.clients if self.attach[c] == miner]


def build_attachment(
    clients: tuple[int, ...], miners: tuple[int, ...], rng: np.random.Generator
) -> dict[int, int]:
    """Uniform random client-to-miner attachment, fixed for the run."""
    picks = rng.integers(0, len(miners), size=len(clients))
    return {c: miners[int(i)] for c, i in zip(clients, picks)}


def transfer_delay(size_bits: float, capacity: float) -> float:
    """Seconds to push `size_bits` through a link of `capacity` bits/s."""
    if size_bits < 0:
        raise ValueError("size_bits must be >= 0")
    if capacity <= 0:
        raise ValueError("capacity must be positive (or infinite)")
    if math.isinf(capacity):
        return 0.0
    return size_bits / capacity


@dataclass
class MiningProcess:
    """Stochastic stand-in for PoW: exponential solve times per miner.

    With hashpower share h, a miner's inter-block time is Exp with mean
    BI / h; uniform shares superpose to a network-wide mean of BI.
    """

    block_interval: float
    hashpower: dict[int, float]

    def __post_init__(self):
        total = sum(self.hashpower.values())
        if not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"hashpower shares must sum to 1, got {total}")

    def sample_mining_time(self, miner: int, rng: np.random.Generator) -> float:
        return float(rng.exponential(self.block_interval / self.hashpower[miner]))


class Network:
    """Schedules propagation events over the topology."""

    def __init__(self, engine: Engine, topology: Topology, verify_delay: float = 0.0):
        self.engine = engine
        self.topology = topology
        self.verify_delay = verify_delay
        self._sent_blocks: dict[int, set[int]] = {m: set() for m in topology.miners}
        self._sent_txs: dict[int, set[int]] = {m: set() for m in topology.miners}

    def broadcast_block(self, origin: int, block: Block) -> None:
        """One-hop block push to every peer; repeated calls are no-ops."""
        if block.block_id in self._sent_blocks[origin]:
            return
        self._sent_blocks[origin].add(block.block_id)
        delay = transfer_delay(block.size_bits, self.topology.p2p_capacity)
        delay += self.verify_delay
        for peer in self.topology.miners:
            if peer == origin:
                continue
            self.engine.schedule_in(delay, Event(RECEIVE_BLOCK, peer, block.block_id))

    def broadcast_tx(self, origin: int, tx: Transaction) -> None:
        if tx.tx_id in self._sent_txs[origin]:
            return
        self._sent_txs[origin].add(tx.tx_id)
        delay = transfer_delay(tx.size_bits, self.topology.p2p_capacity)
        for peer in self.topology.miners:
            if peer == origin:
                continue
            self.engine.schedule_in(delay, Event(RECEIVE_TX, peer, tx.tx_id))

    def deliver_block_to_clients(self, miner: int, block: Block) -> None:
        """Push a new head block down the access links of attached clients."""
        delay = transfer_delay(block.size_bits, self.topology.client_capacity)
        for client in self.topology.clients_of(miner):
            self.engine.schedule_in(delay, Event(CLIENT_BLOCK_DELIVERED, client, block.block_id))
