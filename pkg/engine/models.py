import logging
import os
from threading import Lock
from typing import Dict, Optional

from engine.baselines import linear_penalty_model
from engine.core import PenaltyModel
from engine.errors import BundleError, ConfigError

logger = logging.getLogger(__name__)


class ModelManager:
    """
    Process-wide cache of penalty-model checkpoints, keyed by absolute path.
    """

    _instance = None
    _lock = Lock()

    def __new__(cls):
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = super(ModelManager, cls).__new__(cls)
                    cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if self._initialized:
            return
        self._models: Dict[str, PenaltyModel] = {}
        self._initialized = True

    def load(self, path: str) -> PenaltyModel:
        key = os.path.abspath(path)
        with self._lock:
            if key not in self._models:
                if not os.path.exists(key):
                    raise BundleError(f"Model checkpoint not found: {path}")
                logger.info(f"Loading penalty model from {path}")
                try:
                    self._models[key] = PenaltyModel.load(key)
                except ValueError as e:
                    raise BundleError(f"Invalid model checkpoint {path}: {e}") from e
            return self._models[key]

    def save(self, model: PenaltyModel, path: str) -> None:
        model.save(path)
        with self._lock:
            self._models[os.path.abspath(path)] = model

    def clear(self) -> None:
        with self._lock:
            self._models.clear()

    def resolve(self, method: str, model_path: Optional[str] = None, k_max: int = 3) -> Optional[PenaltyModel]:
        """
        Penalty model behind a matching method; None for methods without one.
        """
        if method == "learned":
            if not model_path:
                raise ConfigError("Method 'learned' needs --model")
            return self.load(model_path)
        if method == "linear":
            return linear_penalty_model(k_max)
        if method in ("greedy", "spectral"):
            return None
        raise ConfigError(f"Unknown method '{method}'")
