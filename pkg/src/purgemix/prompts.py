"""Prompt pack: named operator templates with {slot} placeholders.

Templates live in a versioned directory (a default pack ships with the
package) so wording can be revised without code changes. A manifest maps
(operator, variant) to a file and declares its slots; only declared slot
tokens are substituted, so literal braces elsewhere in a template (JSON
examples and the like) pass through untouched.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

RELATIONS = ("same", "related", "unrelated")

_SLOT_RE = re.compile(r"\{([a-zA-Z_][a-zA-Z0-9_]*)\}")


class PromptPackError(ValueError):
    """Raised for malformed packs or unresolvable slots."""


@dataclass(frozen=True)
class PromptTemplate:
    operator: str
    variant: str
    text: str
    slots: tuple[str, ...]
    bound: Mapping[str, str] = field(default_factory=dict)

    def bind(self, **values: str) -> "PromptTemplate":
        """Return a copy with some slots pre-filled (for SPO feedback injection)."""
        unknown = set(values) - set(self.slots)
        if unknown:
            raise PromptPackError(
                f"{self.operator}/{self.variant}: unknown slot(s) {sorted(unknown)}"
            )
        return PromptTemplate(
            operator=self.operator,
            variant=self.variant,
            text=self.text,
            slots=self.slots,
            bound={**self.bound, **values},
        )

    def render(self, **values: str) -> str:
        merged = {**self.bound, **values}
        missing = [s for s in self.slots if s not in merged]
        if missing:
            raise PromptPackError(
                f"{self.operator}/{self.variant}: unfilled slot(s) {missing}"
            )

        def sub(match: re.Match) -> str:
            name = match.group(1)
            if name in self.slots:
                return str(merged[name])
            return match.group(0)

        return _SLOT_RE.sub(sub, self.text)


class PromptPack:
    """A directory of operator templates plus the nine fusion strategies."""

    def __init__(
        self,
        templates: Mapping[tuple[str, str], PromptTemplate],
        strategies: Mapping[str, tuple[str, str, str]],
        root: Path | None = None,
    ) -> None:
        self._templates = dict(templates)
        self._strategies = {k: tuple(v) for k, v in strategies.items()}
        self.root = root
        for relation in RELATIONS:
            texts = self._strategies.get(relation, ())
            if len(texts) != 3:
                raise PromptPackError(
                    f"relation {relation!r} must define exactly 3 strategies, "
                    f"found {len(texts)}"
                )

    @classmethod
    def load(cls, directory: str | Path) -> "PromptPack":
        root = Path(directory)
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise PromptPackError(f"prompt pack manifest not found: {manifest_path}")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        templates: dict[tuple[str, str], PromptTemplate] = {}
        for entry in manifest.get("templates", []):
            operator, variant = entry["operator"], entry.get("variant", "base")
            path = root / entry["file"]
            if not path.exists():
                raise PromptPackError(f"template file missing: {path}")
            text = path.read_text(encoding="utf-8")
            slots = tuple(entry.get("slots", []))
            present = set(_SLOT_RE.findall(text))
            absent = [s for s in slots if s not in present]
            if absent:
                raise PromptPackError(
                    f"{operator}/{variant}: declared slot(s) {absent} not in template"
                )
            templates[(operator, variant)] = PromptTemplate(
                operator=operator, variant=variant, text=text, slots=slots
            )
        strategies: dict[str, tuple[str, ...]] = {}
        for relation, files in manifest.get("strategies", {}).items():
            texts = []
            for fname in files:
                path = root / fname
                if not path.exists():
                    raise PromptPackError(f"strategy file missing: {path}")
                texts.append(path.read_text(encoding="utf-8").strip())
            strategies[relation] = tuple(texts)
        return cls(templates, strategies, root=root)

    @classmethod
    def default(cls) -> "PromptPack":
        pack_dir = resources.files("purgemix").joinpath("prompt_pack")
        return cls.load(Path(str(pack_dir)))

    def template(self, operator: str, variant: str = "base") -> PromptTemplate:
        key = (operator, variant)
        if key not in self._templates:
            raise PromptPackError(f"no template for operator={operator!r} variant={variant!r}")
        return self._templates[key]

    def has_template(self, operator: str, variant: str = "base") -> bool:
        return (operator, variant) in self._templates

    def strategy_texts(self, relation: str) -> tuple[str, str, str]:
        if relation not in self._strategies:
            raise PromptPackError(f"unknown relation {relation!r}")
        return self._strategies[relation]
