"""
Self-describing output files: `#` header lines carrying the run manifest,
comma-separated tables and sorted-key JSON reports.
"""
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import pandas as pd

from src import __version__
from src.core_model import PhysicsConfig, config_summary
from src.fitting import json_safe

logger = logging.getLogger("nv-relaxometry")

PathLike = Union[str, Path]

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def input_timestamp(paths: Iterable[PathLike]) -> str:
    """Newest modification time among the input files (UTC), or the Unix epoch."""
    times = [Path(p).stat().st_mtime for p in paths if p is not None and Path(p).is_file()]
    stamp = datetime.fromtimestamp(max(times), tz=timezone.utc) if times else EPOCH
    return stamp.isoformat(timespec="seconds")


@dataclass(frozen=True)
class RunManifest:
    """Provenance recorded at the top of every output file."""

    command: str
    seed: Optional[int]
    output: str
    config_path: Optional[str] = None
    inputs: Sequence[str] = field(default_factory=tuple)
    version: str = __version__
    timestamp: str = EPOCH.isoformat(timespec="seconds")

    @classmethod
    def create(
        cls,
        command: str,
        seed: Optional[int],
        output: PathLike,
        config_path: Optional[PathLike] = None,
        inputs: Sequence[PathLike] = (),
    ) -> "RunManifest":
        inputs = [str(p) for p in inputs]
        stamped = inputs + ([str(config_path)] if config_path else [])
        return cls(
            command=command,
            seed=seed,
            output=str(output),
            config_path=None if config_path is None else str(config_path),
            inputs=tuple(inputs),
            timestamp=input_timestamp(stamped),
        )

    def as_dict(self) -> Dict:
        return {
            "command": self.command,
            "config": self.config_path or "defaults",
            "inputs": list(self.inputs),
            "output": self.output,
            "seed": self.seed,
            "timestamp": self.timestamp,
            "version": self.version,
        }

    def header_lines(self, config: Optional[PhysicsConfig] = None) -> List[str]:
        lines = [f"tool = nv-relaxometry {self.version}"]
        for key, value in self.as_dict().items():
            if key == "version":
                continue
            if isinstance(value, list):
                value = ";".join(value) if value else "none"
            lines.append(f"{key} = {value}")
        if config is not None:
            lines.extend(config_summary(config))
        return lines


def write_table(
    path: PathLike,
    frame: pd.DataFrame,
    manifest: RunManifest,
    config: Optional[PhysicsConfig] = None,
    description: Optional[str] = None,
) -> Path:
    """CSV with a manifest header; floats at ten significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = manifest.header_lines(config)
    if description:
        header.insert(0, description)
    with open(path, "w", newline="") as f:
        for line in header:
            f.write(f"# {line}\n")
        frame.to_csv(f, index=False, float_format="%.10g", lineterminator="\n", na_rep="nan")
    logger.debug(f"Wrote {path}")
    return path


def write_report(path: PathLike, report: Dict, manifest: RunManifest) -> Path:
    """JSON report with the manifest under the ``manifest`` key."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    content = dict(report)
    content["manifest"] = manifest.as_dict()
    with open(path, "w", newline="") as f:
        json.dump(json_safe(content), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.debug(f"Wrote {path}")
    return path


def read_table(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def temperature_tag(temperature: float) -> str:
    return f"T{temperature:.2f}K"


def power_tag(power: float) -> str:
    return f"P{power:.4e}W"


def parse_float_list(text: str) -> List[float]:
    """Comma-separated numbers as given on the command line."""
    values = [float(token) for token in text.split(",") if token.strip()]
    if not values:
        raise ValueError("empty list")
    return values
