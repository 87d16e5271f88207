"""Runs the CLI once and validates its JSON outputs against the shipped schemas."""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

import jsonschema


def load(path):
    with open(path) as f:
        return json.load(f)


def check(instance, schema_path, label):
    schema = load(schema_path)
    jsonschema.Draft202012Validator.check_schema(schema)
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(instance), key=str)
    for e in errors:
        print(f"{label}: {'/'.join(map(str, e.absolute_path))}: {e.message}")
    return not errors


def main():
    cli, root = sys.argv[1], Path(sys.argv[2])
    ok = True
    ok &= check(load(root / "configs/default.json"), root / "schemas/config.schema.json", "default.json")
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([cli, "run", "--config", str(root / "configs/default.json"), "--out", tmp],
                       check=True, stdout=subprocess.DEVNULL)
        ledger = load(Path(tmp) / "ledger.json")
        ok &= check(ledger, root / "schemas/ledger.schema.json", "ledger.json")
        # The schema must reject a ledger with an unknown event kind.
        ledger["events"][0]["kind"] = "teleport"
        bad = list(jsonschema.Draft202012Validator(load(root / "schemas/ledger.schema.json")).iter_errors(ledger))
        if not bad:
            print("ledger schema accepted an unknown event kind")
            ok = False
    print("schema validation", "passed" if ok else "FAILED")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
