"""Bundled JSON schemas and document loading helpers."""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
from referencing import Registry, Resource

from cosim.errors import SchemaError

SCHEMAS = ("sc_container", "test_case", "test_spec", "experiment", "model_description")


@lru_cache(maxsize=None)
def schema(name: str) -> dict:
    text = resources.files("cosim.schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


@lru_cache(maxsize=None)
def _registry() -> Registry:
    return Registry().with_resources(
        (f"{n}.schema.json", Resource.from_contents(schema(n))) for n in SCHEMAS
    )


@lru_cache(maxsize=None)
def _validator(name: str):
    cls = jsonschema.validators.validator_for(schema(name))
    return cls(schema(name), registry=_registry())


@lru_cache(maxsize=None)
def _fragment_validator(ref: str):
    root = {"$ref": ref}
    cls = jsonschema.validators.validator_for(schema(ref.split(".schema.json")[0]))
    return cls(root, registry=_registry())


def check(doc: Any, name: str) -> None:
    """Raise ``SchemaError`` for the first violation (ordered by document path) of schema ``name``.

    ``name`` is a bundled schema name or a reference such as
    ``"experiment.schema.json#/$defs/scenario_plan"``.
    """
    validator = _fragment_validator(name) if "#" in name else _validator(name)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        path = "$" + "".join(
            f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path
        )
        raise SchemaError(path, err.message)


def load_json(path: str | Path) -> Any:
    """Read a JSON document, inlining ``{"$ref": "relative/file.json"}`` objects."""
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    return resolve_refs(doc, path.parent)


def resolve_refs(doc: Any, base: Path) -> Any:
    if isinstance(doc, dict):
        if set(doc) == {"$ref"} and isinstance(doc["$ref"], str) and not doc["$ref"].startswith("#"):
            return load_json(base / doc["$ref"])
        return {k: resolve_refs(v, base) for k, v in doc.items()}
    if isinstance(doc, list):
        return [resolve_refs(v, base) for v in doc]
    return doc


def dump_json(doc: Any, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")
