#!/usr/bin/env python3
"""Validate experiment configs against schemas/experiment.schema.json."""

import json
import pathlib
import sys

import jsonschema

SCHEMA = pathlib.Path(__file__).resolve().parent.parent / "schemas" / "experiment.schema.json"


def main(paths):
    if not paths:
        print("usage: validate_config.py CONFIG...", file=sys.stderr)
        return 2
    schema = json.loads(SCHEMA.read_text())
    validator = jsonschema.Draft202012Validator(schema)
    failed = False
    for p in paths:
        errors = sorted(validator.iter_errors(json.loads(pathlib.Path(p).read_text())), key=lambda e: list(e.path))
        for e in errors:
            print(f"{p}: {'/'.join(map(str, e.path)) or '<root>'}: {e.message}", file=sys.stderr)
        failed |= bool(errors)
        if not errors:
            print(f"{p}: ok")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
