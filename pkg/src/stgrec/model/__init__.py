from .config import ModelConfig, Variant
from .engine import TemporalState, advance, hiddens, replay, score_items, score_pairs
from .layers import attend, build_key_value, build_query, embed_node, position_encoding, score
from .memory import CausalityError, MemoryBank, apply_edges, gru_cell, memory_update
from .params import ModelParams

__all__ = [
    "ModelConfig", "Variant", "TemporalState", "advance", "hiddens", "replay", "score_items",
    "score_pairs", "attend", "build_key_value", "build_query", "embed_node", "position_encoding",
    "score", "CausalityError", "MemoryBank", "apply_edges", "gru_cell", "memory_update", "ModelParams",
]
