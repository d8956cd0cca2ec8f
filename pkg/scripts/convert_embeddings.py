"""
Convert a CSV embedding table (id, v0, v1, ...) to the EMB1 binary format.
EMB1 keys rows by the 64-bit id hash and stores float32, so the conversion is one-way.
"""
import argparse
import os
import sys

# Ensure project root is on sys.path so we can import config and services
ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT_DIR not in sys.path:
    sys.path.insert(0, ROOT_DIR)

from services.encoder_service import load_precomputed, write_precomputed
from utils.exceptions import SlantStudyError


def convert(source: str, target: str) -> int:
    backend = load_precomputed(source)
    if not backend.ids:
        raise SlantStudyError(f"{source} is already an EMB1 file")
    table = {doc_id: backend.encode(doc_id) for doc_id in backend.ids}
    write_precomputed(table, target, fmt="binary")
    return len(table)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("source", help="CSV embedding table")
    parser.add_argument("target", help="EMB1 file to write")
    args = parser.parse_args()

    try:
        n = convert(args.source, args.target)
    except (SlantStudyError, OSError) as e:
        print(f"ERROR: {e}")
        sys.exit(2)
    print(f"[OK] wrote {n} embeddings to {args.target}")
    sys.exit(0)


if __name__ == "__main__":
    main()
