"""Models <-> checkpoints. The architecture is read back from array shapes."""
from __future__ import annotations

import re

from ..backbone import KEY_DIM, VALUE_DIM, VARIANTS
from ..model import CGTrack, ModelConfig
from .store import ParamStore, checkpoint_load, checkpoint_save


def infer_config(store: ParamStore) -> tuple[str, ModelConfig]:
    """(variant name, config) matching the arrays in ``store``."""
    def count(pattern: str) -> int:
        rx = re.compile(pattern)
        return len({m.group(1) for name in store if (m := rx.fullmatch(name))})

    try:
        dims = tuple(int(store[f"backbone.stage{s}.0.attn.proj.weight"].shape[0]) for s in range(3))
        depths = tuple(count(rf"backbone\.stage{s}\.(\d+)\.attn\.qkv\.weight") for s in range(3))
        heads = tuple(int(store[f"backbone.stage{s}.0.attn.qkv.weight"].shape[0]) // (2 * KEY_DIM + VALUE_DIM)
                      for s in range(3))
        gate = store["head.cls.0.expand_gate.weight"]
        width = int(store["head.reduce.weight"].shape[0])
        blocks = count(r"head\.cls\.(\d+)\.dw1\.weight")
        se = int(store["hfc.se1.fc2.weight"].shape[0]) // int(store["hfc.se1.fc1.weight"].shape[0])
    except KeyError as exc:
        raise ValueError(f"checkpoint lacks expected array {exc}") from None
    for name, bb in VARIANTS.items():
        if (bb.stage_dims, bb.stage_depths, bb.stage_heads) == (dims, depths, heads):
            cfg = ModelConfig(bb, se_reduction=se, head_width=width,
                              eg_ratio=int(gate.shape[0]) // int(gate.shape[1]), eg_blocks=blocks)
            return name, cfg
    raise ValueError(f"no known variant has stage dims {dims}, depths {depths}, heads {heads}")


def load_model(path, seed: int = 0) -> tuple[str, CGTrack]:
    store = checkpoint_load(path)
    name, cfg = infer_config(store)
    model = CGTrack(cfg, seed=seed)
    model.to(next(iter(store.values())).dtype)
    model.load_state(store)
    return name, model


def save_model(model: CGTrack, path) -> ParamStore:
    store = ParamStore.from_module(model)
    checkpoint_save(store, path)
    return store

