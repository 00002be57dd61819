"""Shared argument handling for the study scripts."""

import argparse
import dataclasses
import json
import logging


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--json", metavar="PATH", help="also write the result as JSON")
    p.add_argument("-q", "--quiet", action="store_true", help="only print the final verdict")
    return p


def setup(args):
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(asctime)s %(message)s")


def report(args, result, extra: str = "") -> int:
    if hasattr(result, "table"):
        print(result.table())
    else:
        print(result)
    if extra:
        print(extra)
    print("PASS" if result.passed else "FAIL")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(_jsonable(result) | {"passed": result.passed}, f, indent=2, default=str)
    return 0 if result.passed else 4


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set)):
        return [_jsonable(v) for v in obj]
    return obj
