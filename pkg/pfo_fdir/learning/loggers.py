import json
import logging
import pathlib
from abc import ABC, abstractmethod
from typing import Any, Dict, Optional

import numpy as np


class Logger(ABC):
    """Sink for the training run: one hyperparameter record, then interval metrics."""

    @abstractmethod
    def log_hyperparams(self, params):
        pass

    @abstractmethod
    def log_metrics(self, metrics, step=None):
        pass

    @staticmethod
    def _sanitize_params(params, prefix=""):
        """Flatten nested sections ({"train": {...}, "model": {...}}) into dotted keys with plain values.

        Normalizer statistics arrive as numpy arrays and the parameter counts as
        numpy or torch integers; both become JSON-ready lists and numbers.
        """
        flat = {}
        for key, val in params.items():
            name = f"{prefix}{key}"
            if isinstance(val, dict):
                flat.update(Logger._sanitize_params(val, prefix=f"{name}."))
            elif isinstance(val, (np.ndarray, np.generic)) or hasattr(val, "tolist"):
                flat[name] = np.asarray(val).tolist()
            elif isinstance(val, (tuple, list)):
                flat[name] = [np.asarray(v).tolist() for v in val]
            elif isinstance(val, pathlib.Path):
                flat[name] = str(val)
            else:
                flat[name] = val
        return flat


class LoggerCollection(Logger):
    """Fans every record out to the console and the JSON-lines file beside the checkpoint."""

    def __init__(self, loggers):
        super().__init__()
        self.loggers = [logger for logger in loggers if logger is not None]

    def __getitem__(self, index):
        return self.loggers[index]

    def log_metrics(self, metrics, step=None):
        for logger in self.loggers:
            logger.log_metrics(metrics, step)

    def log_hyperparams(self, params):
        for logger in self.loggers:
            logger.log_hyperparams(params)


class ConsoleLogger(Logger):
    def __init__(self, name="pfo_fdir.train"):
        super().__init__()
        self._log = logging.getLogger(name)

    def log_hyperparams(self, params):
        for key, val in sorted(self._sanitize_params(params).items()):
            self._log.info(f"{key}: {val}")

    def log_metrics(self, metrics, step=None):
        text = ", ".join(f"{k}={v:.4e}" for k, v in metrics.items())
        self._log.info(f"step {step}: {text}" if step is not None else text)


class JSONLinesLogger(Logger):
    """One JSON object per call, appended to `save_dir / filename`."""

    def __init__(self, save_dir: pathlib.Path, filename: str = "train_log.jsonl"):
        super().__init__()
        save_dir = pathlib.Path(save_dir)
        save_dir.mkdir(parents=True, exist_ok=True)
        self.path = save_dir / filename
        self.path.write_text("")

    def _write(self, record: Dict[str, Any]):
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def log_hyperparams(self, params):
        self._write({"step": "PARAMETER", "data": self._sanitize_params(params)})

    def log_metrics(self, metrics: Dict[str, float], step: Optional[int] = None):
        self._write({"step": step, "data": {k: float(v) for k, v in metrics.items()}})
