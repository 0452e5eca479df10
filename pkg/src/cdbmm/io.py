"""Run configuration, dataset ingestion and text output.

Every numeric value is written with ``%.17g`` so files round-trip exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .model import Dataset, Hyperparams

log = logging.getLogger(__name__)

OUTPUT_ENV = "CDBMM_OUTPUT_DIR"
DEFAULT_OUTPUT = "cdbmm_out"
FLOAT_FMT = "%.17g"


@dataclass
class RunConfig:
    """Everything a ``fit`` run needs.  Unset covariates means every other column."""

    input: str | None = None
    outcome: str = "y"
    treatment: str = "t"
    covariates: list[str] | None = None
    categorical: list[str] = field(default_factory=list)
    hyper: dict = field(default_factory=dict)
    n_iter: int = 3000
    burn_in: int = 1000
    thin: int = 2
    seed: int = 0
    loss: str = "vi"
    missing: str = "augment"
    match: bool = False
    caliper: float | None = None
    ridge: float = 0.0
    min_group_size: int = 5
    output_dir: str | None = None

    def __post_init__(self):
        Hyperparams.from_dict(self.hyper)  # validate early
        if self.loss not in ("vi", "binder"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.caliper is not None and self.caliper <= 0:
            raise ValueError("caliper must be positive")

    @property
    def hyperparams(self) -> Hyperparams:
        return Hyperparams.from_dict(self.hyper)

    def resolved_output(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


class DataError(ValueError):
    """Malformed input file; the message carries row and column coordinates."""


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: non-numeric value {cell!r}") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}, column {col!r}: non-finite value {cell!r}")
    return v


def load_dataset(path, config: RunConfig | None = None) -> Dataset:
    """Read a delimited file with a header row.

    Rows are numbered from 1 for the first data line.  The delimiter is
    sniffed among comma, tab and semicolon.
    """
    config = config or RunConfig()
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    text = path.read_text()
    try:
        dialect = csv.Sniffer().sniff(text.split("\n", 1)[0], delimiters=",\t;")
    except csv.Error:
        dialect = csv.excel
    reader = csv.reader(text.splitlines(), dialect)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError(f"{path} is empty") from None
    seen = set()
    for h in header:
        if h in seen:
            raise DataError(f"duplicated header name {h!r}")
        seen.add(h)

    covs = config.covariates
    if covs is None:
        covs = [h for h in header if h not in (config.outcome, config.treatment)]
    for name in [config.outcome, config.treatment, *covs, *config.categorical]:
        if name not in header:
            raise DataError(f"missing column {name!r}; header has {header}")
    idx = {h: j for j, h in enumerate(header)}

    y, t, X = [], [], []
    for row, cells in enumerate(reader, start=1):
        if not cells or all(not c.strip() for c in cells):
            continue
        if len(cells) != len(header):
            raise DataError(f"row {row}: expected {len(header)} fields, found {len(cells)}")
        cells = [c.strip() for c in cells]
        y.append(_parse_float(cells[idx[config.outcome]], row, config.outcome))
        tv = _parse_float(cells[idx[config.treatment]], row, config.treatment)
        if tv not in (0.0, 1.0):
            raise DataError(f"row {row}, column {config.treatment!r}: treatment value {cells[idx[config.treatment]]!r} is not 0 or 1")
        t.append(int(tv))
        X.append([_parse_float(cells[idx[c]], row, c) for c in covs])
    if not y:
        raise DataError(f"{path} has no data rows")
    t = np.array(t)
    for arm in (0, 1):
        if not np.any(t == arm):
            raise DataError(f"column {config.treatment!r}: treatment arm {arm} is empty")
    log.info("loaded %d rows (%d treated, %d control) from %s", t.size, t.sum(), t.size - t.sum(), path)
    cat = [c in config.categorical for c in covs]
    return Dataset(np.array(y), t, np.array(X, dtype=float).reshape(t.size, len(covs)), list(covs), cat)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % v
    return str(v)


def write_table(path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_table(path) -> tuple[list[str], np.ndarray]:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


def write_dataset(path, data: Dataset) -> Path:
    header = ["y", "t", *data.columns]
    rows = (
        [data.y[i], int(data.t[i]), *data.X[i]] for i in range(data.n)
    )
    return write_table(path, header, rows)


def write_traces(out_dir, draws) -> list[Path]:
    """One file per parameter block and arm, one row per stored iteration."""
    out_dir = Path(out_dir)
    it = draws.iterations
    L = draws.eta.shape[2]
    p = draws.beta.shape[3]
    n = draws.S.shape[2]
    written = []
    for a in (0, 1):
        blocks = {
            "S": ([f"unit_{i + 1}" for i in range(n)], draws.S[:, a] + 1),
            "y_imputed": ([f"unit_{i + 1}" for i in range(n)], draws.y_imp[:, a]),
            "eta": ([f"eta_{l + 1}" for l in range(L)], draws.eta[:, a]),
            "sigma2": ([f"sigma2_{l + 1}" for l in range(L)], draws.sigma2[:, a]),
            "beta0": ([f"beta0_{l + 1}" for l in range(L - 1)], draws.beta0[:, a]),
            "beta": (
                [f"beta_{l + 1}_{j + 1}" for l in range(L - 1) for j in range(p)],
                draws.beta[:, a].reshape(it.size, -1),
            ),
        }
        for name, (cols, values) in blocks.items():
            path = out_dir / f"trace_{name}_arm{a}.csv"
            rows = ([int(it[r]), *values[r].tolist()] for r in range(it.size))
            written.append(write_table(path, ["iteration", *cols], rows))
    return written


def software_versions() -> dict:
    import scipy

    from . import __version__

    return {
        "cdbmm": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def write_manifest(out_dir, command: str, config: dict, files: list[Path]) -> Path:
    """Plain-text manifest: command, seed, configuration, versions and output files."""
    out_dir = Path(out_dir)
    lines = [f"command: {command}"]
    if "seed" in config:
        lines.append(f"seed: {config['seed']}")
    lines.append("config: " + json.dumps(config, sort_keys=True))
    for k, v in software_versions().items():
        lines.append(f"version.{k}: {v}")
    for f in sorted(Path(f).resolve().relative_to(out_dir.resolve()).as_posix() for f in files):
        lines.append(f"file: {f}")
    path = out_dir / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path
