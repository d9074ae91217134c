"""Bundled toy grammars and utterance templates."""

import json
from importlib import resources

TOY_GRAMMARS = ("mini", "python", "lambda", "ifttt")


def grammar_text(name: str) -> str:
    return resources.files(__name__).joinpath(f"{name}.asdl").read_text(encoding="utf-8")


def templates(name: str) -> dict | None:
    path = resources.files(__name__).joinpath(f"{name}.templates.json")
    if not path.is_file():
        return None
    return json.loads(path.read_text(encoding="utf-8"))
