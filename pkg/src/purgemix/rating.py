"""Quality rating: prompt rendering, score parsing, and the 1-10 -> 0-5 map.

Only the overall score drives the pipeline; the other three dimensions are
kept for logging.
"""
from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping

from .store import CorpusSample, DatasetSplit

logger = logging.getLogger(__name__)

RATING_DIMENSIONS = ("rarity", "complexity", "informativeness", "overall")

# Aliases seen in model replies, normalized to canonical keys.
_KEY_ALIASES = {
    "overall rating": "overall",
    "overall_rating": "overall",
}

RATING_SCHEMA = {
    "type": "object",
    "properties": {dim: {"type": "integer"} for dim in RATING_DIMENSIONS},
    "required": list(RATING_DIMENSIONS),
}


class ParseError(ValueError):
    """Rating reply could not be parsed; carries the raw text."""

    def __init__(self, message: str, raw_text: str = "") -> None:
        super().__init__(message)
        self.raw_text = raw_text


class RatingRangeError(ParseError):
    """A parsed score fell outside [1, 10]."""


class RatingError(ValueError):
    """Non-parse rating failures (e.g. splitting unscored samples)."""


@dataclass(frozen=True)
class RatingReport:
    rarity: int
    complexity: int
    informativeness: int
    overall: int

    def __post_init__(self) -> None:
        for dim in RATING_DIMENSIONS:
            value = getattr(self, dim)
            if not 1 <= value <= 10:
                raise RatingRangeError(f"{dim}={value} outside [1, 10]")


def render_rating_prompt(sample: CorpusSample, pack=None) -> str:
    """Render the four-dimension rating prompt for one sample.

    Deterministic for a fixed sample; the input block is omitted when the
    sample has no input.
    """
    if pack is None:
        from .prompts import PromptPack

        pack = PromptPack.default()
    template = pack.template("rating")
    input_block = f"Input:\n{sample.input}\n" if sample.input else ""
    return template.render(
        instruction=sample.instruction,
        input_block=input_block,
        response=sample.response,
    )


def _extract_json_object(text: str) -> dict:
    try:
        obj = json.loads(text)
        if isinstance(obj, dict):
            return obj
    except json.JSONDecodeError:
        pass
    fenced = re.search(r"```(?:json)?\s*(\{.*?\})\s*```", text, re.DOTALL)
    if fenced:
        try:
            return json.loads(fenced.group(1))
        except json.JSONDecodeError:
            pass
    start = text.find("{")
    while start != -1:
        depth = 0
        for i in range(start, len(text)):
            if text[i] == "{":
                depth += 1
            elif text[i] == "}":
                depth -= 1
                if depth == 0:
                    try:
                        obj = json.loads(text[start : i + 1])
                        if isinstance(obj, dict):
                            return obj
                    except json.JSONDecodeError:
                        break
        start = text.find("{", start + 1)
    raise ParseError("no JSON object found in rating reply", raw_text=text)


def parse_rating(response_text: str) -> RatingReport:
    """Extract the four labeled integer scores from a rating reply."""
    obj = _extract_json_object(response_text)
    normalized: dict[str, int] = {}
    for key, value in obj.items():
        canon = _KEY_ALIASES.get(str(key).strip().lower(), str(key).strip().lower())
        normalized[canon] = value
    missing = [dim for dim in RATING_DIMENSIONS if dim not in normalized]
    if missing:
        raise ParseError(f"missing rating field(s): {missing}", raw_text=response_text)
    values = {}
    for dim in RATING_DIMENSIONS:
        value = normalized[dim]
        if isinstance(value, bool) or not isinstance(value, int):
            raise ParseError(
                f"rating field {dim!r} is not an integer: {value!r}",
                raw_text=response_text,
            )
        values[dim] = value
    try:
        return RatingReport(**values)
    except RatingRangeError as exc:
        exc.raw_text = response_text
        raise


def map_overall_score(raw: int) -> int:
    """Downscale a raw 1-10 overall score into the 0-5 class space.

    Scores 1-4 collapse to 4 and 9-10 to 9 before shifting down by 4, so
    the full map is {1..4 -> 0, 5 -> 1, 6 -> 2, 7 -> 3, 8 -> 4, 9..10 -> 5}.
    """
    if not isinstance(raw, int) or isinstance(raw, bool) or not 1 <= raw <= 10:
        raise RatingRangeError(f"raw overall score {raw!r} outside [1, 10]")
    return min(max(raw, 4), 9) - 4


def split_by_score(scores: Mapping[str, int | None]) -> DatasetSplit:
    """Partition scored ids: corrected score {0,1,2} -> lq, {3,4,5} -> hq."""
    lq, hq = set(), set()
    for sample_id, score in scores.items():
        if score is None:
            raise RatingError(f"sample {sample_id!r} has no corrected score")
        if not 0 <= score <= 5:
            raise RatingError(f"sample {sample_id!r}: score {score} outside [0, 5]")
        (lq if score <= 2 else hq).add(sample_id)
    return DatasetSplit(lq_ids=frozenset(lq), hq_ids=frozenset(hq))


def rate_samples(samples: list[CorpusSample], gateway, pack=None, workers: int = 4) -> list[dict]:
    """Rate samples through the gateway; returns rows in input order.

    Each row: ``{id, rarity, complexity, informativeness, overall_raw,
    overall_mapped}``. Parsing happens inside the gateway (schema-validated
    JSON with retries), so a returned payload is already well-formed.
    """
    from .gateway import GatewayRequest

    def one(sample: CorpusSample) -> dict:
        prompt = render_rating_prompt(sample, pack)
        response = gateway.invoke(
            GatewayRequest(
                prompt=prompt,
                temperature=0.2,
                expect="rating",
                fingerprint=f"rating:base:{sample.id}",
            )
        )
        report = parse_rating(response.raw_text)
        return {
            "id": sample.id,
            "rarity": report.rarity,
            "complexity": report.complexity,
            "informativeness": report.informativeness,
            "overall_raw": report.overall,
            "overall_mapped": map_overall_score(report.overall),
        }

    if workers <= 1 or len(samples) <= 1:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, samples))
