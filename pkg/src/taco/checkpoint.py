"""Versioned model checkpoints for the codec and the task classifiers."""

from __future__ import annotations

import os
from dataclasses import asdict
from typing import Any

import torch

from .errors import FormatError

MAGIC = "TACO-CKPT-1"


def save_checkpoint(path: str, kind: str, config: Any, state_dict: dict) -> None:
    payload = {
        "magic": MAGIC,
        "kind": kind,
        "config": asdict(config),
        "state_dict": state_dict,
    }
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str, expected_kind: str) -> tuple[dict, dict]:
    """Returns (config dict, state_dict); validates magic and kind."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("magic") != MAGIC:
        raise FormatError(f"{path!r} is not a {MAGIC} checkpoint")
    if payload.get("kind") != expected_kind:
        raise FormatError(
            f"{path!r} holds a {payload.get('kind')!r} model, wanted {expected_kind!r}"
        )
    return payload["config"], payload["state_dict"]
