"""Serving state: the loaded models and the in-memory store of internalized documents."""

import logging
import os
import uuid
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .adapters import LoraAdapter, PrefixKV
from .errors import MissingArtifactError
from .hypernet import Hypernet, init_hypernet, load_hypernet
from .models import HypernetConfig, LMConfig
from .target_lm import TinyLM, init_lm, load_lm

logger = logging.getLogger(__name__)


@dataclass
class Runtime:
    lm: TinyLM
    hypernet: Hypernet
    source: str = "random"

    @classmethod
    def from_run_dir(cls, path: Union[str, Path]) -> "Runtime":
        path = Path(path)
        for name in ("lm.d2lm", "hypernet.d2hn"):
            if not (path / name).exists():
                raise MissingArtifactError(f"{path / name} not found")
        hypernet, _ = load_hypernet(path / "hypernet.d2hn")
        return cls(load_lm(path / "lm.d2lm"), hypernet, str(path))

    @classmethod
    def random(cls, lm_config: LMConfig, hypernet_config: HypernetConfig, seed: int = 0) -> "Runtime":
        """Untrained models; answers are noise but every code path runs."""
        return cls(init_lm(lm_config, seed), init_hypernet(hypernet_config, lm_config, seed).eval())

    def describe(self) -> Dict[str, Any]:
        return {
            "source": self.source,
            "d_model": self.lm.config.d_model,
            "n_layers": self.lm.config.n_layers,
            "output_mode": self.hypernet.config.output_mode,
            "rank_per_chunk": self.hypernet.config.n_latents,
            "max_chunk_tokens": self.hypernet.config.max_chunk_tokens,
        }


def serving_dir() -> Path:
    return Path(os.environ.get("D2L_RUN_DIR", "runs")) / os.environ.get("D2L_RUN_NAME", "niah")


MAX_SESSIONS = int(os.environ.get("D2L_MAX_SESSIONS", "256"))
MAX_HISTORY = 50


@dataclass
class Session:
    adapter: Union[LoraAdapter, PrefixKV]
    context_tokens: int
    history: deque = field(default_factory=lambda: deque(maxlen=MAX_HISTORY))


# In-memory session storage, least recently used first
SESSIONS: "OrderedDict[str, Session]" = OrderedDict()


def init_session(adapter: Union[LoraAdapter, PrefixKV], context_tokens: int, session_id: Optional[str] = None) -> str:
    """Store an internalized document, replacing whatever the session held.

    Beyond MAX_SESSIONS the least recently used session is dropped.
    """
    session_id = session_id or uuid.uuid4().hex
    SESSIONS.pop(session_id, None)
    SESSIONS[session_id] = Session(adapter, context_tokens)
    while len(SESSIONS) > MAX_SESSIONS:
        evicted, _ = SESSIONS.popitem(last=False)
        logger.info("evicted session %s", evicted)
    logger.debug("session %s holds %d context tokens", session_id, context_tokens)
    return session_id


def get_session(session_id: str) -> Optional[Session]:
    session = SESSIONS.get(session_id)
    if session is not None:
        SESSIONS.move_to_end(session_id)
    return session
