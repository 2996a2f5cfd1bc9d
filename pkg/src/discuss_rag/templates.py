"""Prompt templates: one ``<name>.txt`` per agent with ``[system]`` and ``[user]`` sections.

Placeholders use ``str.format`` syntax, e.g. ``{query}``, ``{prev_summary}``,
``{persona}``, ``{insights}``. A custom template directory only needs the
files it overrides; the rest fall back to the packaged defaults.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

from .gateway import ChatRequest

DEFAULT_DIR = Path(__file__).with_name("templates")
TEMPLATE_NAMES = ("recruiter", "expert", "summarizer", "verifier", "judge", "answer_rag", "answer_cot")


def _split_sections(text: str, source: str) -> tuple[str, str]:
    marker_sys, marker_user = "[system]\n", "\n[user]\n"
    if not text.startswith(marker_sys) or marker_user not in text:
        raise ValueError(f"{source}: template must contain [system] and [user] sections")
    system, user = text[len(marker_sys):].split(marker_user, 1)
    return system.strip("\n"), user.strip("\n")


@dataclass(frozen=True)
class PromptTemplates:
    sections: dict  # name -> (system, user)
    fingerprint: str

    @classmethod
    def load(cls, template_dir: str | os.PathLike | None = None) -> "PromptTemplates":
        sections = {}
        h = hashlib.sha256()
        for name in TEMPLATE_NAMES:
            path = Path(template_dir) / f"{name}.txt" if template_dir else None
            if path is None or not path.exists():
                path = DEFAULT_DIR / f"{name}.txt"
            text = path.read_text(encoding="utf-8")
            sections[name] = _split_sections(text, str(path))
            h.update(name.encode())
            h.update(b"\0")
            h.update(text.encode("utf-8"))
        return cls(sections, h.hexdigest())

    def render(self, name: str, **values) -> tuple[str, str]:
        system, user = self.sections[name]
        return system.format_map(values), user.format_map(values)

    def request(self, name: str, model_id: str = "", **values) -> ChatRequest:
        system, user = self.render(name, **values)
        return ChatRequest.simple(system, user, model_id=model_id)


_default: PromptTemplates | None = None


def default_templates() -> PromptTemplates:
    global _default
    if _default is None:
        _default = PromptTemplates.load()
    return _default
