"""
Artifact Service - stage directories, deterministic writers and run manifests.

Every subcommand writes into its own directory under the output dir together with a
manifest.json recording the inputs and outputs (by SHA-256), the config hash, the seed and
the tool version. Only `created_at` and `timing` change between identical runs.
"""
import hashlib
import json
import logging
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from utils.exceptions import MissingArtifactError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

STAGE_DIRS = {
    "ingest": "corpus",
    "score": "scores",
    "panel": "panel",
    "estimate": "estimates",
    "event-study": "event_study",
    "synth": "synth",
    "mc": "mc",
    "report": "report",
}

# (artifact relative to the output dir, subcommand producing it), upstream first
PIPELINE_CHAIN: List[Tuple[str, str]] = [
    ("corpus/corpus.jsonl", "ingest"),
    ("scores/scores.csv", "score"),
    ("panel/panel.csv", "panel"),
    ("estimates/did.json", "estimate"),
]


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def to_jsonable(value: Any) -> Any:
    """Plain JSON types; NaN and infinities become null, dates become ISO strings."""
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        items = sorted(value) if isinstance(value, (set, frozenset)) else value
        return [to_jsonable(v) for v in items]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if hasattr(value, "isoformat"):
        return value.isoformat()
    return value


def write_json(payload: Any, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path: Union[str, Path]) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_frame(frame: pd.DataFrame, path: Union[str, Path], index: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, float_format="%.17g", na_rep="", lineterminator="\n")
    return path


class ArtifactStore:
    """Layout of one study's output directory."""

    def __init__(self, output_dir: Union[str, Path]):
        self.root = Path(output_dir)

    def stage_dir(self, subcommand: str) -> Path:
        path = self.root / STAGE_DIRS[subcommand]
        path.mkdir(parents=True, exist_ok=True)
        return path

    def path(self, relative: str) -> Path:
        return self.root / relative

    def exists(self, relative: str) -> bool:
        return (self.root / relative).exists()

    def require(self, relative: str, producer: str) -> Path:
        path = self.root / relative
        if not path.exists():
            raise MissingArtifactError(relative, producer)
        return path

    def require_upstream(self, artifact: str) -> Path:
        """
        Ensure `artifact` (an entry of the pipeline chain) exists. When it does not, the
        error names the earliest missing stage upstream of it.
        """
        names = [a for a, _ in PIPELINE_CHAIN]
        position = names.index(artifact)
        if self.exists(artifact):
            return self.path(artifact)
        for relative, producer in PIPELINE_CHAIN[: position + 1]:
            if not self.exists(relative):
                raise MissingArtifactError(relative, producer)
        return self.path(artifact)

    def relative(self, path: Union[str, Path]) -> str:
        path = Path(path)
        try:
            return path.resolve().relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return str(path)

    def write_manifest(
        self,
        subcommand: str,
        tool_version: str,
        config_hash: str,
        seed: Optional[int],
        inputs: Iterable[Union[str, Path]],
        outputs: Sequence[Union[str, Path]],
        timing: Optional[Mapping[str, float]] = None,
        extra: Optional[Mapping[str, Any]] = None,
    ) -> Path:
        manifest = {
            "subcommand": subcommand,
            "tool_version": tool_version,
            "config_hash": config_hash,
            "seed": seed,
            "inputs": {self.relative(p): sha256_file(p) for p in inputs if Path(p).exists()},
            "outputs": {self.relative(p): sha256_file(p) for p in outputs},
            "created_at": datetime.now(timezone.utc).isoformat(),
        }
        if timing:
            manifest["timing"] = dict(timing)
        if extra:
            manifest.update(extra)
        path = write_json(manifest, self.stage_dir(subcommand) / MANIFEST_NAME)
        logger.info(f"[{subcommand}] wrote {len(outputs)} artifact(s) and {self.relative(path)}")
        return path
