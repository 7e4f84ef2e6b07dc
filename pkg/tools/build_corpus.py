"""Rebuild the bundled character corpus from CPython standard-library docstrings.

The docstrings are distributed under the PSF license. Output is deterministic
for a given interpreter version: files are visited in sorted order and text is
lower-cased and restricted to a small ASCII alphabet.

    python tools/build_corpus.py [--size 200000] [--out src/odeformer/data/corpus.txt]
"""

import argparse
import ast
import re
import sysconfig
from pathlib import Path

ALPHABET = set("abcdefghijklmnopqrstuvwxyz0123456789 .,;:'\"()-!?\n")
SKIP_DIRS = {"test", "tests", "idlelib", "lib2to3", "site-packages", "dist-packages", "turtledemo"}


def docstrings(root: Path):
    for path in sorted(root.rglob("*.py")):
        if SKIP_DIRS & set(path.relative_to(root).parts):
            continue
        try:
            tree = ast.parse(path.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError):
            continue
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc and len(doc) > 80:
                    yield doc


def clean(doc: str) -> str:
    paragraphs = []
    for para in re.split(r"\n\s*\n", doc.lower().replace("_", " ")):
        if ">>>" in para or "::" in para:
            continue
        text = " ".join(para.split())
        text = "".join(c for c in text if c in ALPHABET)
        text = re.sub(r" +", " ", text).strip()
        if len(text) >= 40 and sum(c.isalpha() for c in text) > 0.7 * len(text):
            paragraphs.append(text)
    return "\n".join(paragraphs)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=200_000)
    ap.add_argument("--out", default="src/odeformer/data/corpus.txt")
    args = ap.parse_args()
    seen, parts, total = set(), [], 0
    for doc in docstrings(Path(sysconfig.get_paths()["stdlib"])):
        text = clean(doc)
        if not text or text in seen:
            continue
        seen.add(text)
        parts.append(text)
        total += len(text) + 1
        if total >= args.size:
            break
    Path(args.out).write_text("\n".join(parts)[: args.size] + "\n")


if __name__ == "__main__":
    main()
