#!/usr/bin/env python3
"""Convert a sktime/UEA `.ts` file to the JSON-lines format read by `faim`.

Usage: ts_to_jsonl.py INPUT.ts OUTPUT.jsonl

Each data line of a `.ts` file holds one sample: channels separated by `:`,
values within a channel by `,`, and the class label as the last field.
Missing values (`?`) are not supported.
"""

import json
import sys


def convert(src, dst):
    n = 0
    in_data = False
    with open(src) as f, open(dst, "w") as out:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if not in_data:
                if line.lower() == "@data":
                    in_data = True
                continue
            *channels, label = line.split(":")
            series = [[float(v) for v in ch.split(",")] for ch in channels]
            out.write(json.dumps({"label": label, "series": series}) + "\n")
            n += 1
    return n


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    print(f"wrote {convert(sys.argv[1], sys.argv[2])} samples to {sys.argv[2]}")
