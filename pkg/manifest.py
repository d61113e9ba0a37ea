"""
Run manifest written next to every output artifact.

Two manifests that agree on everything but `wall_clock` describe bit-identical numeric
outputs.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

from config import Config

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'


@dataclass
class RunManifest:
    subcommand: str
    problem_digest: Optional[str]
    effective: Dict[str, str]
    seed: Optional[int]
    tool_version: str = Config.VERSION
    tool_name: str = Config.TOOL_NAME
    started_at: str = ''
    wall_clock: float = 0.0
    outputs: List[str] = field(default_factory=list)
    extra: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def start(cls, subcommand: str, spec=None, seed: Optional[int] = None, **extra) -> 'RunManifest':
        manifest = cls(
            subcommand=subcommand,
            problem_digest=spec.digest if spec is not None else None,
            effective=dict(spec.effective) if spec is not None else {},
            seed=seed,
            started_at=datetime.now(timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ'),
            extra=dict(extra),
        )
        manifest._t0 = time.perf_counter()
        return manifest

    def finish(self, outputs=()) -> 'RunManifest':
        self.outputs = sorted(Path(p).name for p in outputs)
        self.wall_clock = round(time.perf_counter() - getattr(self, '_t0', time.perf_counter()), 6)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def comparable(self) -> dict:
        """Everything except timing."""
        data = self.to_dict()
        data.pop('wall_clock')
        data.pop('started_at')
        return data

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True, default=str)
            f.write('\n')
        logger.info(f"Manifest written to {path}")
        return path


def load_manifest(path) -> dict:
    with open(path, encoding='utf-8') as f:
        return json.load(f)
