import hashlib
import io
import json
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd

from core.errors import DataFormatError
from core.model import LsmModel, MultiTaskModel
from core.textio import read_lines
from services.dataset_io import atomic_write_text

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TRACE_COLUMNS = ["epoch", "objective", "max_change", "skipped"]


def _plain(obj):
    """JSON-safe copy: numpy scalars and arrays become Python values, NaN becomes null."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


class ReportingManager:
    def config_hash(self, config: dict) -> str:
        return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()

    def results_document(self, subcommand: str, seed: int, config: dict, results: dict) -> str:
        """
        The self-describing results document. It carries no timestamps, so equal configs and
        seeds give byte-identical files.
        """
        document = {
            "schema_version": SCHEMA_VERSION,
            "subcommand": subcommand,
            "seed": seed,
            "config": config,
            "config_hash": self.config_hash(config),
            "results": results,
        }
        return json.dumps(_plain(document), sort_keys=True, indent=2, allow_nan=False) + "\n"

    def write_results(self, path, subcommand: str, seed: int, config: dict, results: dict) -> Path:
        path = Path(path)
        atomic_write_text(path, self.results_document(subcommand, seed, config, results))
        log.info(f"Results written to {path}")
        return path

    def read_results(self, path) -> dict:
        path = Path(path)
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except UnicodeDecodeError as exc:
            raise DataFormatError(f"invalid UTF-8 at byte {exc.start}", path) from None
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"malformed results document: {exc.msg}", path, exc.lineno) from None

    # --- Tables ---

    def trace_frame(self, trace) -> pd.DataFrame:
        df = pd.DataFrame([[r.epoch, r.objective, r.max_change, r.skipped] for r in trace], columns=TRACE_COLUMNS)
        return df.astype({"epoch": int, "skipped": int})

    def write_trace(self, path, trace) -> Path:
        """Space-delimited, header `epoch objective max_change skipped`."""
        output = io.StringIO()
        self.trace_frame(trace).to_csv(output, sep=" ", index=False)
        atomic_write_text(path, output.getvalue())
        return Path(path)

    def write_table(self, path, df: pd.DataFrame, index: bool = True) -> Path:
        output = io.StringIO()
        df.to_csv(output, index=index)
        atomic_write_text(path, output.getvalue())
        return Path(path)

    # --- Model files ---

    def format_model(self, model) -> str:
        """Header `K T d`, then the K shared vectors and, for T > 0, T*K bias vectors (dataset-major)."""
        if isinstance(model, MultiTaskModel):
            rows = list(model.shared) + [v for t in range(model.T) for v in model.bias[t]]
            header = f"{model.K} {model.T} {model.dim}"
        elif isinstance(model, LsmModel):
            rows = list(model.weights)
            header = f"{model.K} 0 {model.dim}"
        else:
            raise TypeError(f"cannot save object of type {type(model).__name__} as a model")
        return "\n".join([header] + [" ".join(repr(float(v)) for v in row) for row in rows]) + "\n"

    def save_model(self, path, model) -> Path:
        atomic_write_text(path, self.format_model(model))
        log.info(f"Model written to {path}")
        return Path(path)

    def load_model(self, path):
        """Inverse of save_model; T = 0 yields an LsmModel, otherwise a MultiTaskModel."""
        path = Path(path)
        lines = [(lineno, text.split()) for lineno, text in read_lines(path) if text.strip()]
        if not lines:
            raise DataFormatError("empty model file", path)
        try:
            K, T, d = (int(v) for v in lines[0][1])
        except ValueError:
            raise DataFormatError("model header must be three integers `K T d`", path, lines[0][0]) from None
        expected = K * (1 + T)
        if len(lines) - 1 != expected:
            raise DataFormatError(f"expected {expected} weight vectors, found {len(lines) - 1}", path)
        rows = []
        for lineno, tokens in lines[1:]:
            if len(tokens) != d + 1:
                raise DataFormatError(f"expected {d + 1} components, got {len(tokens)}", path, lineno)
            try:
                rows.append([float(v) for v in tokens])
            except ValueError as exc:
                raise DataFormatError(f"malformed number: {exc}", path, lineno) from exc
        W = np.array(rows)
        if T == 0:
            return LsmModel(W)
        return MultiTaskModel(W[:K], W[K:].reshape(T, K, d + 1))


# Create a single instance
reporting_manager = ReportingManager()
