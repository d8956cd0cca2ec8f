"""
Check that a study config validates and that every input it names can be read.
Prints one line per input and exits 2 on the first problem.
"""
import os
import sys

# Add parent directory to path to import config
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import load_study_config
from services.corpus_service import load_banned_handles, load_corpus, load_profiles
from services.encoder_service import load_precomputed
from utils.exceptions import SlantStudyError


def check_inputs(config_path: str) -> bool:
    try:
        cfg = load_study_config(config_path)
    except SlantStudyError as e:
        print(f"ERROR: config: {e}")
        return False
    print(f"[OK] config ({len(cfg.estimation.samples)} samples, window {cfg.window.start}..{cfg.window.end})")

    paths = cfg.paths
    checks = [
        ("corpus", paths.corpus, lambda p: f"{len(load_corpus(p, cfg.schema_map))} documents"),
        ("pole_r", paths.pole_r, lambda p: f"{len(load_corpus(p, cfg.schema_map))} documents"),
        ("pole_u", paths.pole_u, lambda p: f"{len(load_corpus(p, cfg.schema_map))} documents"),
        ("banned_handles", paths.banned_handles, lambda p: f"{len(load_banned_handles(p))} handles"),
    ]
    if paths.profiles:
        checks.append(("profiles", paths.profiles, lambda p: f"{len(load_profiles(p, cfg.schema_map))} users"))
    if cfg.encoder.kind == "precomputed-file" and paths.embeddings:
        checks.append(("embeddings", paths.embeddings, lambda p: f"{len(load_precomputed(p))} vectors"))

    ok = True
    for name, path, describe in checks:
        if not os.path.exists(path):
            print(f"ERROR: {name}: {path} does not exist")
            ok = False
            continue
        try:
            print(f"[OK] {name}: {describe(path)}")
        except (SlantStudyError, OSError) as e:
            print(f"ERROR: {name}: {e}")
            ok = False
    return ok


if __name__ == "__main__":
    if len(sys.argv) < 2:
        print("Usage: python check_inputs.py <config.json>")
        sys.exit(1)

    sys.exit(0 if check_inputs(sys.argv[1]) else 2)
