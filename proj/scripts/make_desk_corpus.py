#!/usr/bin/env python3
"""Build the desk corpus from the public-domain KJV JSON shipped in the npm `kjv` package.

Usage: npm pack kjv && tar xzf kjv-1.0.0.tgz
       python3 scripts/make_desk_corpus.py package/json/verses-1769.json data/kjv_desk.txt
"""
import json
import re
import sys

TARGET_BYTES = 1_000_000


def clean(verse: str) -> str:
    verse = verse.replace("#", "").replace("[", "").replace("]", "")
    return re.sub(r"\s+", " ", verse).strip()


def main() -> None:
    src, dst = sys.argv[1], sys.argv[2]
    with open(src, encoding="utf-8") as f:
        verses = json.load(f)
    books: dict[str, list[str]] = {}
    for ref, text in verses.items():
        book = ref.rsplit(" ", 1)[0]
        books.setdefault(book, []).append(clean(text))
    out, size = [], 0
    for book, lines in books.items():
        doc = []
        for line in lines:
            doc.append(line)
            size += len(line) + 1
            if size >= TARGET_BYTES:
                break
        out.append(" ".join(doc))
        if size >= TARGET_BYTES:
            break
    with open(dst, "w", encoding="utf-8") as f:
        f.write("\n\n".join(out) + "\n")


if __name__ == "__main__":
    main()
