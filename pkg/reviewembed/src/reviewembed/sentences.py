"""Rule-based sentence splitting on terminal punctuation with abbreviation guards."""

from __future__ import annotations

import re

# Common abbreviations whose trailing period does not end a sentence.
_ABBREVIATIONS = {
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st",
    "vs", "etc", "inc", "ltd", "co", "corp",
    "e.g", "i.e", "cf", "al", "approx", "dept", "est", "fig", "no", "vol",
    "u.s", "u.k",
}

_BOUNDARY = re.compile(r"([.!?]+)(\s+|$)")


def split_sentences(text: str) -> list[str]:
    """Split text into sentences; never returns empty strings."""
    sentences = []
    start = 0
    for match in _BOUNDARY.finditer(text):
        candidate = text[start : match.end(1)]
        word = candidate.rstrip(".!?").rsplit(None, 1)
        last = word[-1].lower().lstrip("(\"'") if word else ""
        if match.group(1) == "." and (last in _ABBREVIATIONS or _is_initial(last)):
            continue  # abbreviation, not a boundary
        sentence = candidate.strip()
        if sentence:
            sentences.append(sentence)
        start = match.end()
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def _is_initial(token: str) -> bool:
    # "A." or dotted initials like "j.k." read as abbreviations, not boundaries
    return bool(re.fullmatch(r"[a-z](\.[a-z])*", token))
