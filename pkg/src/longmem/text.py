"""Tokenization shared by the lexical scorer and the ROUGE metrics."""

from __future__ import annotations

import re

_CJK = (
    "\u2e80-\u2fdf"  # radicals
    "\u3000-\u303f"  # CJK punctuation
    "\u3040-\u30ff"  # kana
    "\u3400-\u4dbf"
    "\u4e00-\u9fff"
    "\uac00-\ud7af"  # hangul
    "\uf900-\ufaff"
    "\uff00-\uffef"  # full-width forms
    "\U00020000-\U0002fa1f"
)
_TOKEN = re.compile(f"[{_CJK}]|[^\\s{_CJK}]+")


def tokenize(text: str) -> list[str]:
    """Split CJK text per character and everything else on whitespace.

    >>> tokenize("I like 猫咪 a lot")
    ['I', 'like', '猫', '咪', 'a', 'lot']
    """
    return _TOKEN.findall(text)
