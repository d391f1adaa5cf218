#!/usr/bin/env python3
"""Turn the public-domain 1769 King James Bible (npm package `kjv`) into a
tokenized, lower-cased, one-verse-per-line corpus.

    npm pack kjv
    python3 tools/prepare_kjv.py kjv-1.0.0.tgz data/kjv

Writes train.txt (every verse except each 20th) and test.txt (each 20th verse).
Punctuation is split off and possessive/clitic apostrophes become their own
token ("lord's" -> "lord 's"), in the style of LM1B.
"""
import argparse
import json
import pathlib
import re
import tarfile

TOKEN_RE = re.compile(r"'s\b|[a-z0-9]+(?:-[a-z0-9]+)*|[.,;:?!()'\"]")


def tokenize(verse: str) -> list[str]:
    text = verse.lower().replace("[", "").replace("]", "").replace("#", " ")
    text = text.replace("’", "'").replace("¶", " ")
    return TOKEN_RE.findall(text)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("tarball")
    ap.add_argument("outdir")
    ap.add_argument("--test-every", type=int, default=20)
    args = ap.parse_args()

    with tarfile.open(args.tarball) as tar:
        member = tar.extractfile("package/json/verses-1769.json")
        verses = json.load(member)

    out = pathlib.Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for i, verse in enumerate(verses.values()):
        toks = tokenize(verse)
        if not toks:
            continue
        (test if i % args.test_every == args.test_every - 1 else train).append(" ".join(toks))
    (out / "train.txt").write_text("\n".join(train) + "\n")
    (out / "test.txt").write_text("\n".join(test) + "\n")
    ntok = sum(len(l.split()) for l in train + test)
    print(f"train={len(train)} test={len(test)} tokens={ntok}")


if __name__ == "__main__":
    main()
