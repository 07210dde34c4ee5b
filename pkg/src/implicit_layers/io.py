"""CSV/JSON persistence and flat key=value experiment configs."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.17g}"
    return str(v)


def write_csv(path, header, rows):
    """UTF-8, comma-separated, reals at 17 significant digits, newline-terminated."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv(path):
    """``(header, rows)`` with every field parsed as float where possible."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        out = []
        for f in line.split(","):
            try:
                out.append(float(f))
            except ValueError:
                out.append(f)
        rows.append(out)
    return header, rows


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable) + "\n", encoding="utf-8")


@dataclass
class ExperimentConfig:
    """Subcommand, seed, output directory and free-form string knobs."""

    subcommand: str
    seed: int = 0
    out: str = "."
    knobs: dict = field(default_factory=dict)

    def to_text(self):
        lines = [f"subcommand={self.subcommand}", f"seed={self.seed}", f"out={self.out}"]
        lines += [f"{k}={v}" for k, v in sorted(self.knobs.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"malformed config line {line!r}")
            kv[key.strip()] = val.strip()
        if "subcommand" not in kv:
            raise ValueError("config lacks subcommand")
        sub = kv.pop("subcommand")
        seed = int(kv.pop("seed", 0))
        out = kv.pop("out", ".")
        return cls(sub, seed, out, kv)

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def digest(self):
        """Hash of everything except the output location."""
        body = [line for line in self.to_text().splitlines() if not line.startswith("out=")]
        return hashlib.sha256("\n".join(body).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    seed: int
    config_hash: str
    metric: str
    value: float


class RunLog:
    """Append-only list of :class:`RunRecord` rows for one run."""

    def __init__(self, run_id, seed, config_hash):
        self.run_id, self.seed, self.config_hash = run_id, seed, config_hash
        self._rows = []

    def add(self, metric, value):
        self._rows.append(RunRecord(self.run_id, self.seed, self.config_hash, metric, float(value)))

    @property
    def records(self):
        return tuple(self._rows)

    def write(self, path):
        write_csv(path, ["run_id", "seed", "config_hash", "metric", "value"], [tuple(asdict(r).values()) for r in self._rows])
