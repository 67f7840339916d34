"""Run-directory writers: manifest, metrics log, chain dump, tx log, AoB
records, client losses, optional event trace and weight snapshots.

Floats are written with repr so every value round-trips bit-exactly; the
empty string marks undefined cells (e.g. AoB of an empty block). A `DONE`
marker file is written last, so its absence flags a partial run.
"""

import csv
import struct
from pathlib import Path

import yaml

from .config import config_to_dict
from .fnn import ModelWeights
from .simulation import RunResult

DONE_MARKER = "DONE"

METRICS_COLUMNS = [
    "index", "depth", "mine_time", "num_updates", "aob",
    "train_acc", "test_acc", "val_acc", "contrib_train_acc", "mean_client_loss",
]
CHAIN_COLUMNS = [
    "block_id", "parent_id", "depth", "miner_id", "mine_time", "size_bits",
    "num_txs", "tx_ids", "on_main_chain",
]
TX_COLUMNS = ["tx_id", "client_id", "update_ref", "num_samples", "gen_time", "size_bits"]
AOB_COLUMNS = ["block_id", "num_updates", "aob", "ages"]
LOSS_COLUMNS = ["time", "client_id", "loss"]
TRACE_COLUMNS = ["time", "seq", "kind", "actor", "obj"]
SUMMARY_COLUMNS = [
    "run_id", "seed", "num_clients", "mips", "block_interval_s", "max_block_txs",
    "p2p_capacity_mbps", "num_blocks", "final_train_acc", "final_test_acc",
    "mean_aob", "stale_rate",
]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def write_manifest(result: RunResult, run_dir: Path) -> None:
    manifest = {
        "run_id": result.run_id,
        "seed": result.config.seed,
        "config": config_to_dict(result.config),
        "attachment": {int(c): int(m) for c, m in result.attachment.items()},
        "work_per_update": result.config.work_per_update,
    }
    with open(run_dir / "manifest.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(manifest, f, sort_keys=True)


def write_weights(model: ModelWeights, path: Path) -> None:
    """Flat binary snapshot: little-endian int32 shape header, float64 data."""
    arrays = []
    for w, b in zip(model.weights, model.biases):
        arrays.extend([w, b])
    with open(path, "wb") as f:
        f.write(struct.pack("<i", len(arrays)))
        for arr in arrays:
            f.write(struct.pack("<i", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}i", *arr.shape))
        for arr in arrays:
            f.write(arr.astype("<f8").tobytes())


def read_weights(path: Path) -> list:
    """Arrays from a weight snapshot, in written order."""
    import numpy as np

    with open(path, "rb") as f:
        (count,) = struct.unpack("<i", f.read(4))
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack("<i", f.read(4))
            shapes.append(struct.unpack(f"<{ndim}i", f.read(4 * ndim)))
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape))
            arrays.append(np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape))
    return arrays


def write_run(result: RunResult, out_dir: str) -> Path:
    """Write all artifacts of a finished run under <out_dir>/<run_id>/."""
    run_dir = Path(out_dir) / result.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    marker = run_dir / DONE_MARKER
    if marker.exists():
        marker.unlink()

    write_manifest(result, run_dir)

    on_chain = set(result.main_chain_ids)
    _write_csv(
        run_dir / "chain.csv",
        CHAIN_COLUMNS,
        (
            [
                b.block_id,
                b.parent_id if b.parent_id is not None else "",
                b.depth,
                b.miner_id,
                b.mine_time,
                b.size_bits,
                len(b.txs),
                " ".join(str(t) for t in b.txs),
                int(b.block_id in on_chain),
            ]
            for b in result.blocks.values()
        ),
    )
    _write_csv(
        run_dir / "txs.csv",
        TX_COLUMNS,
        (
            [t.tx_id, t.client_id, t.update_ref, t.num_samples, t.gen_time, t.size_bits]
            for t in result.txs.values()
        ),
    )
    _write_csv(
        run_dir / "metrics.csv",
        METRICS_COLUMNS,
        (
            [
                r.index, r.depth, r.mine_time, r.num_updates, r.aob,
                r.train_acc, r.test_acc, r.val_acc, r.contrib_train_acc,
                r.mean_client_loss,
            ]
            for r in result.metrics
        ),
    )
    _write_csv(
        run_dir / "aob.csv",
        AOB_COLUMNS,
        (
            [rec.block_id, rec.num_updates, rec.mean_age, " ".join(repr(a) for a in rec.ages)]
            for rec in result.aob_records
        ),
    )
    _write_csv(run_dir / "losses.csv", LOSS_COLUMNS, result.client_losses)
    if result.trace is not None:
        _write_csv(
            run_dir / "events.csv",
            TRACE_COLUMNS,
            ([t.time, t.seq, t.kind, t.actor, t.obj] for t in result.trace),
        )
    if result.global_models:
        weights_dir = run_dir / "weights"
        weights_dir.mkdir(exist_ok=True)
        for depth, model in result.global_models:
            write_weights(model, weights_dir / f"block_{depth:05d}.bin")

    summary = {
        "stale_rate": result.stale_rate,
        "mean_aob": result.mean_aob,
        "final_train_acc": result.final_train_acc,
        "final_test_acc": result.final_test_acc,
        "num_mined_blocks": sum(1 for b in result.blocks.values() if b.parent_id is not None),
        "main_chain_length": len(result.main_chain_ids) - 1,
    }
    with open(run_dir / "summary.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(summary, f, sort_keys=True)

    marker.touch()
    return run_dir


def summary_row(result: RunResult) -> list:
    cfg = result.config
    return [
        result.run_id,
        cfg.seed,
        cfg.num_clients,
        cfg.mips if not isinstance(cfg.mips, list) else "|".join(map(str, cfg.mips)),
        cfg.block_interval_s,
        cfg.max_block_txs,
        cfg.p2p_capacity_mbps,
        cfg.num_blocks,
        result.final_train_acc,
        result.final_test_acc,
        result.mean_aob,
        result.stale_rate,
    ]


def write_sweep_summary(rows: list[list], out_dir: str) -> Path:
    path = Path(out_dir) / "sweep_summary.csv"
    _write_csv(path, SUMMARY_COLUMNS, rows)
    return path
