"""Append-only run registry: one directory per run, an index file, and a
completed-runs-are-immutable discipline.

Run ids are "<config-hash-prefix>-s<seed>"; repeating the same (config,
seed) allocates a fresh "-rN" attempt directory instead of overwriting.
"""

from __future__ import annotations

import json
import time
from pathlib import Path


class RunRegistry:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.runs_dir = self.root / "runs"
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "index.jsonl"

    def allocate(self, config_hash: str, seed: int) -> Path:
        base_id = f"{config_hash[:12]}-s{seed}"
        run_dir = self.runs_dir / base_id
        attempt = 1
        while run_dir.exists():
            attempt += 1
            run_dir = self.runs_dir / f"{base_id}-r{attempt}"
        run_dir.mkdir(parents=True)
        return run_dir

    def record(self, run_dir: Path, config_hash: str, seed: int, status: str,
               metrics: dict | None = None) -> None:
        entry = {
            "run_id": run_dir.name,
            "config_hash": config_hash,
            "seed": seed,
            "status": status,
            "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        if metrics:
            entry["metrics"] = metrics
        with self.index_path.open("a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        (run_dir / "status.json").write_text(json.dumps(entry, indent=1, sort_keys=True))

    def find(self, run_id: str) -> Path:
        run_dir = self.runs_dir / run_id
        if not run_dir.is_dir():
            raise KeyError(f"unknown run id {run_id!r}")
        return run_dir

    def entries(self) -> list:
        if not self.index_path.exists():
            return []
        return [json.loads(line) for line in self.index_path.read_text().splitlines()
                if line.strip()]
