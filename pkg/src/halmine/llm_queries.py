"""Text-query generation: drive the query-writing LLM, parse, validate.

The two-turn protocol sends the system prompt plus "object: <name>", then a
correction turn, and parses the final numbered list. Parsing is strict about
indices; validation of object-name leakage is warn-only because the protocol
examples themselves are not fully consistent with the stated rule.
"""
from __future__ import annotations

import re
from typing import Optional, Sequence

from .adapters import EmbedderAdapter, LlmAdapter
from .prompts import PromptProtocol
from .types import ObjectSpec, Query, stable_id

PROMPT_LINE = re.compile(r"^\s*(\d+)\s*:\s*(.*?)\s*$")

# Known compound objects whose pieces also count as leaks. Extend via the
# run config; splitting on whitespace/hyphens happens regardless.
DEFAULT_COMPOUND_PARTS = {
    "firetruck": ("fire", "truck"),
    "mountainbike": ("mountain", "bike"),
}


class PromptParseError(ValueError):
    """Numbered prompt list malformed: carries the offending indices."""

    def __init__(self, missing: Sequence[int], duplicates: Sequence[int], extras: Sequence[int]):
        self.missing = sorted(missing)
        self.duplicates = sorted(duplicates)
        self.extras = sorted(extras)
        parts = []
        if self.missing:
            parts.append(f"missing indices {self.missing}")
        if self.duplicates:
            parts.append(f"duplicate indices {self.duplicates}")
        if self.extras:
            parts.append(f"unexpected indices {self.extras}")
        super().__init__("; ".join(parts) or "malformed prompt list")


class QueryGenerationFailed(RuntimeError):
    """All regeneration attempts exhausted for one object."""

    def __init__(self, obj: ObjectSpec, attempts: int, last_error: Exception):
        self.object = obj
        self.attempts = attempts
        self.last_error = last_error
        super().__init__(f"query generation failed for {obj.name!r} after {attempts} attempts: {last_error}")


def parse_prompt_list(text: str, expected_count: int) -> list:
    """Parse "<i>: <prompt>" lines into prompts ordered 1..expected_count.

    Non-matching lines (preambles, prose) are ignored. Missing, duplicate or
    out-of-range indices raise :class:`PromptParseError`.
    """
    seen: dict = {}
    duplicates = set()
    extras = set()
    # Split strictly on newlines (the canonical renderer joins with "\n");
    # splitlines() would also split on form feeds inside a prompt.
    normalized = text.replace("\r\n", "\n").replace("\r", "\n")
    for line in normalized.split("\n"):
        m = PROMPT_LINE.match(line)
        if not m:
            continue
        idx = int(m.group(1))
        if idx in seen:
            duplicates.add(idx)
            continue
        seen[idx] = m.group(2).strip()
        if not 1 <= idx <= expected_count:
            extras.add(idx)
    missing = set(range(1, expected_count + 1)) - set(seen)
    if missing or duplicates or extras:
        raise PromptParseError(missing, duplicates, extras)
    return [seen[i] for i in range(1, expected_count + 1)]


def render_prompt_list(prompts: Sequence[str]) -> str:
    """Canonical renderer; parse_prompt_list is its left inverse."""
    return "\n".join(f"{i + 1}: {p}" for i, p in enumerate(prompts))


def leakage_terms(obj: ObjectSpec, compound_parts: Optional[dict] = None) -> list:
    """Terms whose whole-word presence in a prompt counts as a leak."""
    parts = DEFAULT_COMPOUND_PARTS if compound_parts is None else compound_parts
    terms = [obj.name.strip()]
    terms += [t for t in re.split(r"[\s\-]+", obj.name) if t]
    terms += list(parts.get(obj.name.strip().lower(), ()))
    seen, out = set(), []
    for t in terms:
        key = t.lower()
        if key and key not in seen:
            seen.add(key)
            out.append(t)
    return out


def find_leaks(prompt: str, obj: ObjectSpec, compound_parts: Optional[dict] = None) -> list:
    """Whole-word, case-insensitive matches of the object name or its parts."""
    leaks = []
    for term in leakage_terms(obj, compound_parts):
        pattern = r"(?<![\w])" + re.escape(term).replace(r"\ ", r"\s+") + r"(?![\w])"
        if re.search(pattern, prompt, flags=re.IGNORECASE):
            leaks.append(term.lower())
    return leaks


def validate_queries(queries: Sequence[Query], obj: ObjectSpec,
                     compound_parts: Optional[dict] = None) -> list:
    """Flag queries that leak the object name. Warn-only: every query is
    retained and returned flags align one-to-one with the input."""
    flags = []
    for q in queries:
        leaks = find_leaks(q.payload, obj, compound_parts)
        if leaks:
            q.flags["leakage"] = leaks
            flags.append("leaks_name")
        else:
            flags.append("clean")
    return flags


def generate_text_queries(llm: LlmAdapter, embedder: EmbedderAdapter, obj: ObjectSpec,
                          protocol: PromptProtocol, *, max_regenerations: int = 3,
                          compound_parts: Optional[dict] = None) -> list:
    """Run the query-writing protocol and return embedded text queries.

    The initial list plus the correction turn always run when the protocol
    has a follow-up prompt; only the final reply is parsed. After
    ``max_regenerations`` failed re-tries the object is given up on.
    """
    last_error: Exception = RuntimeError("no attempt made")
    for attempt in range(1 + max_regenerations):
        messages = [
            {"role": "system", "content": protocol.system_prompt},
            {"role": "user", "content": protocol.user_turn(obj.name)},
        ]
        first = llm.chat(messages)
        if protocol.followup_prompt is not None:
            messages = messages + [
                {"role": "assistant", "content": first},
                {"role": "user", "content": protocol.followup_prompt},
            ]
            final = llm.chat(messages)
        else:
            final = first
        try:
            prompts = parse_prompt_list(final, protocol.expected_count)
            break
        except PromptParseError as exc:
            last_error = exc
    else:
        raise QueryGenerationFailed(obj, 1 + max_regenerations, last_error)

    queries = [
        Query(
            id=stable_id("query", protocol.name, obj.name, str(i), prompt),
            object=obj,
            kind="text",
            payload=prompt,
            embedding=embedder.embed_text(prompt),
            origin="llm",
        )
        for i, prompt in enumerate(prompts)
    ]
    validate_queries(queries, obj, compound_parts)
    return queries
