"""Packaged prompt resources: loading, listing, and stable hashing."""
from __future__ import annotations

from importlib import resources

from .events import sha256_hex


class PromptNotFoundError(Exception):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"no such prompt resource: {name!r}")


def _prompt_root():
    return resources.files("agentflow") / "resources" / "prompts"


def load_prompt(name: str) -> str:
    """Read a named prompt resource (``variants/<id>`` for variants)."""
    target = _prompt_root() / f"{name}.txt"
    try:
        return target.read_text(encoding="utf-8")
    except (FileNotFoundError, NotADirectoryError):
        raise PromptNotFoundError(name) from None


def apply_variant(prompt: str, variant: str) -> str:
    """Append a named variant's text to *prompt*; ``default`` is a no-op."""
    if variant == "default":
        return prompt
    return prompt.rstrip() + "\n\n" + load_prompt(f"variants/{variant}").strip()


def prompt_hashes() -> dict[str, str]:
    """Stable name->sha256 map over every packaged prompt resource."""
    hashes: dict[str, str] = {}
    root = _prompt_root()
    for item in sorted(root.iterdir(), key=lambda p: p.name):
        if item.name.endswith(".txt"):
            hashes[item.name[:-4]] = sha256_hex(item.read_text(encoding="utf-8"))
    variants = root / "variants"
    if variants.is_dir():
        for item in sorted(variants.iterdir(), key=lambda p: p.name):
            if item.name.endswith(".txt"):
                hashes[f"variants/{item.name[:-4]}"] = sha256_hex(item.read_text(encoding="utf-8"))
    return hashes
