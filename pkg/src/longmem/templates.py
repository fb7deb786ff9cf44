"""Prompt templates shipped with the package.

Templates are plain text with ``{name}`` placeholders. Their contents feed the
config hash, so editing one changes the hash recorded in saved state.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache
from importlib.resources import files

TEMPLATE_NAMES = (
    "summarize_level2.txt",
    "summarize_level3.txt",
    "persona_snapshot.txt",
    "persona_merge.txt",
    "judge.txt",
    "answer_probe.txt",
    "answer_free.txt",
)


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return (files("longmem") / "prompts" / name).read_text(encoding="utf-8")


def render(name: str, **values: object) -> str:
    return load_template(name).format_map(values)


def templates_digest() -> str:
    digest = hashlib.sha256()
    for name in TEMPLATE_NAMES:
        digest.update(name.encode())
        digest.update(load_template(name).encode("utf-8"))
    return digest.hexdigest()
