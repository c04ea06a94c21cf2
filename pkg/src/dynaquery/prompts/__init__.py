"""Versioned prompt templates and helpers for reading fenced model output."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from string import Template

_SPLIT = "=== user ==="
_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\n?(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class Prompt:
    template_id: str
    system: str
    user: Template

    def render(self, **values: str) -> tuple[str, str]:
        return self.system, self.user.substitute(**values)


@lru_cache(maxsize=None)
def load_prompt(template_id: str) -> Prompt:
    text = resources.files(__name__).joinpath(f"{template_id}.txt").read_text(encoding="utf-8")
    if _SPLIT in text:
        system, user = text.split(_SPLIT, 1)
    else:
        system, user = "", text
    return Prompt(template_id, system.strip(), Template(user.strip("\n")))


def repair_text(original: str, previous: str, error: str) -> str:
    return load_prompt("repair.v1").user.substitute(original=original, previous=previous,
                                                   error=error)


def fenced_blocks(text: str) -> list[tuple[str, str]]:
    """All ```tag ...``` blocks as ``(tag, body)`` pairs, tags lower-cased."""
    return [(tag, body) for tag, body, _ in fenced_spans(text)]


def fenced_spans(text: str) -> list[tuple[str, str, int]]:
    return [(m.group(1).lower(), m.group(2), m.start()) for m in _FENCE.finditer(text)]
