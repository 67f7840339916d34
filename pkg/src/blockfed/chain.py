"""Blocks, transactions, per-miner mempools and ledger trees, fork creation,
and longest-chain resolution.

Every miner keeps its own tree of known blocks (`LedgerView`) and mines on a
deepest block in that tree. Competing blocks at equal depth are kept as side
branches; the head only moves to a strictly deeper block (first-seen wins on
ties), and a deeper side branch triggers a reorg.
"""

import heapq
import itertools
from dataclasses import dataclass, field

GENESIS_ID = 0


@dataclass(frozen=True)
class Transaction:
    """One local model update submitted by a client.

    Weights are carried by reference (`update_ref` into the run's update
    store); the chain layer only needs identity, size, and timing.
    """

    tx_id: int
    client_id: int
    update_ref: int
    num_samples: int
    gen_time: float   # instant the client finished computing the update
    size_bits: float


@dataclass(frozen=True)
class Block:
    block_id: int
    parent_id: int | None  # None only for genesis
    depth: int             # genesis = 0
    miner_id: int          # -1 for genesis
    txs: tuple[int, ...]
    mine_time: float
    size_bits: float


@dataclass(frozen=True)
class ChainParams:
    max_block_txs: int      # cap on transactions per block
    tx_size_bits: float
    header_size_bits: float


@dataclass
class ChainUpdate:
    accepted: bool
    head_changed: bool
    old_head: int
    new_head: int


def block_size_bits(num_txs: int, params: ChainParams) -> float:
    """Header plus a fixed-size payload per carried transaction."""
    if num_txs < 0:
        raise ValueError("num_txs must be >= 0")
    return params.header_size_bits + num_txs * params.tx_size_bits


def genesis_block() -> Block:
    return Block(GENESIS_ID, None, 0, -1, (), 0.0, 0.0)


class Mempool:
    """Arrival-ordered set of pending transaction ids.

    Arrival indices are remembered forever, so a tx re-inserted after a reorg
    keeps its original position in the queue.
    """

    def __init__(self, owner: int):
        self.owner = owner
        self._pending: set[int] = set()
        self._arrival: dict[int, int] = {}
        self._counter = itertools.count()

    def __len__(self) -> int:
        return len(self._pending)

    def __contains__(self, tx_id: int) -> bool:
        return tx_id in self._pending

    def seen(self, tx_id: int) -> bool:
        """Whether this mempool ever held the tx (including after removal)."""
        return tx_id in self._arrival

    def add(self, tx_id: int) -> bool:
        """Insert unless already pending. Returns True on a new entry."""
        if tx_id in self._pending:
            return False
        if tx_id not in self._arrival:
            self._arrival[tx_id] = next(self._counter)
        self._pending.add(tx_id)
        return True

    def remove(self, tx_id: int) -> None:
        self._pending.discard(tx_id)

    def pending_in_arrival_order(self) -> list[int]:
        return sorted(self._pending, key=self._arrival.__getitem__)

    def take_oldest(self, k: int) -> list[int]:
        """Remove and return the k earliest-arrived pending txs."""
        taken = heapq.nsmallest(k, self._pending, key=self._arrival.__getitem__)
        self._pending.difference_update(taken)
        return taken


@dataclass
class LedgerView:
    """One miner's known block tree plus the block it currently mines on."""

    owner: int
    blocks: dict[int, Block] = field(default_factory=dict)
    head_id: int = GENESIS_ID

    @classmethod
    def with_genesis(cls, owner: int) -> "LedgerView":
        view = cls(owner)
        g = genesis_block()
        view.blocks[g.block_id] = g
        return view

    @property
    def head(self) -> Block:
        return self.blocks[self.head_id]

    def has(self, block_id: int) -> bool:
        return block_id in self.blocks

    def path_to(self, block_id: int) -> list[Block]:
        """Root-to-block path inside this view."""
        path = []
        cur = self.blocks[block_id]
        while True:
            path.append(cur)
            if cur.parent_id is None:
                break
            cur = self.blocks[cur.parent_id]
        path.reverse()
        return path

    def head_chain(self) -> list[Block]:
        return self.path_to(self.head_id)


def make_block(
    view: LedgerView,
    mempool: Mempool,
    now: float,
    params: ChainParams,
    block_id: int,
) -> Block:
    """Assemble a block on the view's head from the oldest pending txs.

    The selected txs leave the mempool, the block joins the owner's view, and
    the head advances to it. An empty mempool still yields an (empty) block.
    """
    head = view.head
    txs = tuple(mempool.take_oldest(params.max_block_txs))
    block = Block(
        block_id=block_id,
        parent_id=head.block_id,
        depth=head.depth + 1,
        miner_id=view.owner,
        txs=txs,
        mine_time=now,
        size_bits=block_size_bits(len(txs), params),
    )
    view.blocks[block.block_id] = block
    view.head_id = block.block_id
    return block


def append_block(view: LedgerView, block: Block) -> ChainUpdate:
    """Insert a received block; advance the head only if strictly deeper.

    Equal-depth competitors are retained as side branches (first-seen head
    wins); a strictly deeper block on a side branch causes a reorg.
    """
    old_head = view.head_id
    if block.block_id in view.blocks:
        return ChainUpdate(False, False, old_head, old_head)
    if block.parent_id not in view.blocks:
        raise ValueError(
            f"block {block.block_id} arrived at miner {view.owner} "
            f"before its parent {block.parent_id}"
        )
    view.blocks[block.block_id] = block
    if block.depth > view.blocks[old_head].depth:
        view.head_id = block.block_id
        return ChainUpdate(True, True, old_head, block.block_id)
    return ChainUpdate(True, False, old_head, old_head)


def branch_diff(
    view: LedgerView, old_head: int, new_head: int
) -> tuple[list[Block], list[Block]]:
    """Blocks leaving / entering the head chain when the head moves.

    Returns (abandoned, adopted), each ordered root-side first. Walks both
    branches back to their common ancestor, so the cost is the reorg depth,
    not the chain length.
    """
    old_branch: list[Block] = []
    new_branch: list[Block] = []
    a = view.blocks[old_head]
    b = view.blocks[new_head]
    while b.depth > a.depth:
        new_branch.append(b)
        b = view.blocks[b.parent_id]
    while a.depth > b.depth:
        old_branch.append(a)
        a = view.blocks[a.parent_id]
    while a.block_id != b.block_id:
        old_branch.append(a)
        new_branch.append(b)
        a = view.blocks[a.parent_id]
        b = view.blocks[b.parent_id]
    old_branch.reverse()
    new_branch.reverse()
    return old_branch, new_branch


def prune_mempool(
    mempool: Mempool,
    adopted: list[Block],
    abandoned: list[Block] = (),
) -> None:
    """Reconcile a mempool with a head change.

    Every tx on the adopted part of the new head chain leaves the pool; txs
    that were only on the abandoned branch return, keeping their original
    arrival order.
    """
    adopted_txs = {tx for blk in adopted for tx in blk.txs}
    for tx in adopted_txs:
        mempool.remove(tx)
    for blk in abandoned:
        for tx in blk.txs:
            if tx not in adopted_txs:
                mempool.add(tx)


def main_chain(views: list[LedgerView]) -> list[Block]:
    """Root-to-tip path of the globally deepest block across all views.

    Depth ties break by earliest mine time, then smallest block id.
    """
    union: dict[int, Block] = {}
    for view in views:
        union.update(view.blocks)
    if not union:
        raise ValueError("no blocks: at least genesis must exist")
    tip = max(union.values(), key=lambda b: (b.depth, -b.mine_time, -b.block_id))
    path = []
    cur = tip
    while True:
        path.append(cur)
        if cur.parent_id is None:
            break
        cur = union[cur.parent_id]
    path.reverse()
    return path


def stale_rate(mined_blocks: list[Block], chain: list[Block]) -> float:
    """Fraction of mined (non-genesis) blocks that ended off the main chain."""
    mined = [b for b in mined_blocks if b.parent_id is not None]
    if not mined:
        return 0.0
    on_chain = {b.block_id for b in chain if b.parent_id is not None}
    n_stale = sum(1 for b in mined if b.block_id not in on_chain)
    return n_stale / len(mined)
