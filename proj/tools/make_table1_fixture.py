#!/usr/bin/env python3
"""Builds the Table 1 golden fixture: a vocabulary whose frequency ranks and a
lexicon whose tags reproduce the published templates under all five splits.

Reads table1.tsv (sentence then the five templates, tab separated) and writes
vocab.txt, pos.tsv, sentences.txt and expected.tsv next to it."""

import sys
from pathlib import Path

STRATEGIES = ["common_first", "rare_first", "function_first", "content_first", "odd_first"]
UNK_SURFACE = "qqunseen"  # out-of-vocabulary stand-in that encodes to [UNK]

FUNCTION_TAGS = {
    '"': "``", ",": ",", ".": ".", ":": ":", "'s": "POS", "to": "TO",
    "the": "DT", "a": "DT", "of": "IN", "in": "IN", "on": "IN", "at": "IN", "if": "IN",
    "against": "IN", "through": "IN", "that": "IN", "and": "CC", "you": "PRP", "he": "PRP",
    "they": "PRP", "his": "PRP$", "your": "PRP$", "all": "PDT", "will": "MD",
}
BE_FORMS = {"be", "am", "is", "are", "was", "were", "been", "being"}


def classify(rows):
    cls = {s: {} for s in STRATEGIES}
    for sentence, templates in rows:
        words = sentence.split()
        for s, tmpl in zip(STRATEGIES, templates):
            t = tmpl.split()
            if len(t) != len(words):
                sys.exit(f"{s}: template length {len(t)} != sentence length {len(words)}")
            for w, x in zip(words, t):
                if w == "[EOS]":
                    if x != "[EOS]":
                        sys.exit("EOS must stay in the template")
                    continue
                kept = x == w
                if not kept and x != "__":
                    sys.exit(f"{s}: '{x}' is neither '{w}' nor a placeholder")
                prev = cls[s].setdefault(w, kept)
                if prev != kept:
                    sys.exit(f"{s}: '{w}' is kept in one row and blanked in another")
    return cls


def main(directory):
    d = Path(directory)
    rows = []
    for line in (d / "table1.tsv").read_text().splitlines():
        if line.strip():
            parts = line.split("\t")
            rows.append((parts[0], parts[1:]))
    cls = classify(rows)
    words = list(cls["common_first"])
    for w in words:
        if cls["common_first"][w] == cls["rare_first"][w]:
            sys.exit(f"'{w}' is in both or neither of common/rare first")
        if cls["function_first"][w] == cls["content_first"][w]:
            sys.exit(f"'{w}' is in both or neither of function/content first")
        is_function = w in BE_FORMS or w in FUNCTION_TAGS
        if is_function != cls["function_first"][w]:
            sys.exit(f"lexicon disagrees with the table on '{w}'")

    # Common words take ranks below the cutoff, rare words above; filler
    # tokens pad so that every word lands on the parity odd-first needs.
    order = []
    fillers = 0

    def place(group):
        nonlocal fillers
        pending = list(group)
        while pending:
            want_odd = len(order) % 2 == 1
            pick = next((w for w in pending if cls["odd_first"][w] == want_odd), None)
            if pick is None:
                order.append(f"filler{fillers}")
                fillers += 1
            else:
                order.append(pick)
                pending.remove(pick)

    place([w for w in words if cls["common_first"][w]])
    cutoff = len(order)
    place([w for w in words if not cls["common_first"][w]])

    top = len(order) + 10
    specials = ["[PAD]\t1", "[BOS]\t1", "[EOS]\t1", f"[UNK]\t{top - order.index('[UNK]')}", "__\t1"]
    lines = specials + [f"{w}\t{top - r}" for r, w in enumerate(order) if w != "[UNK]"]
    (d / "vocab.txt").write_text("\n".join(lines) + "\n")
    (d / "vocab.meta").write_text(f"format_version=1\nmax_vocab={len(order) + 5}\nlowercase=1\n"
                                  f"max_len=64\ncutoff={cutoff}\n")
    (d / "pos.tsv").write_text("".join(f"{w}\t{t}\n" for w, t in FUNCTION_TAGS.items()) +
                               "".join(f"{w}\tVBZ\n" for w in sorted(BE_FORMS & set(words))) +
                               "".join(f"{w}\tNN\n" for w in words
                                       if not cls["function_first"][w] and w != "[UNK]"))
    sentences = []
    expected = []
    for sentence, templates in rows:
        toks = [UNK_SURFACE if w == "[UNK]" else w for w in sentence.split() if w != "[EOS]"]
        sentences.append(" ".join(toks))
        for s, t in zip(STRATEGIES, templates):
            expected.append(f"{len(sentences) - 1}\t{s}\t{t}")
    (d / "sentences.txt").write_text("\n".join(sentences) + "\n")
    (d / "expected.tsv").write_text("\n".join(expected) + "\n")
    print(f"{len(order)} ranked tokens, cutoff {cutoff}, {fillers} fillers")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else ".")
