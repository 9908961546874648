"""Stand-alone reference for the transcript rules; writes the golden JSONL files.

Deliberately shares no code with the package: it reads the fixture with the
json module and applies each rule directly as stated.

    python3 tests/golden/reference_impl.py
"""
import json
import math
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
FIXTURE = HERE.parent / "fixtures" / "transcript.json"
TOL = 1e-9


def even_split(start, end, texts):
    n = len(texts)
    edges = [start + k * (end - start) / n for k in range(n)]
    edges.append(end)
    return [(texts[k], edges[k], edges[k + 1]) for k in range(n)]


def clean(doc):
    """-> list of (text, start, end, realtime)"""
    words = []
    for s in doc["sentences"]:
        rt = s.get("realtime")
        d = s.get("decision", "keep")
        if d == "delete":
            continue
        if isinstance(d, dict):
            spans = even_split(s["start"], s["end"], d["edit"])
        elif all(isinstance(w, dict) for w in s["words"]):
            spans = [(w["word"], w["start"], w["end"]) for w in s["words"]]
        else:
            spans = even_split(s["start"], s["end"], [w if isinstance(w, str) else w["word"] for w in s["words"]])
        words += [(t, a, b, rt) for t, a, b in spans]
    return words


def chunks(words, W, O, min_words, duration):
    rows = []
    k = 0
    while k * (W - O) + W <= duration + TOL:
        a = k * (W - O)
        inside = [w[0] for w in words if a <= w[1] < a + W]
        before = sum(1 for w in words if w[1] < a)
        if len(inside) >= min_words:
            rows.append({
                "chunk": {"start": a, "end": a + W, "W": W, "O": O},
                "word_count": len(inside),
                "min_words": min_words,
                "passed_min_words": True,
                "previous_word_count": before,
                "words": inside,
            })
        k += 1
    return rows


def clips(words, lo=16.0, hi=64.0, silence=3.0, density=2.0, realtime_threshold=0.8):
    # split wherever the gap between consecutive words exceeds the silence limit
    runs, cur = [], []
    for w in words:
        if cur and w[1] - cur[-1][2] > silence + TOL:
            runs.append(cur)
            cur = []
        cur.append(w)
    if cur:
        runs.append(cur)
    rows = []
    for run in runs:
        i = 0
        while i < len(run):
            j = i
            # grow while the next word still ends inside the max duration
            while j + 1 < len(run) and run[j + 1][2] - run[i][1] <= hi + TOL:
                j += 1
            part = run[i:j + 1]
            start, end = part[0][1], part[-1][2]
            dur = end - start
            gaps = [part[m + 1][1] - part[m][2] for m in range(len(part) - 1)]
            flags = [w[3] for w in part]
            ratio = None if any(f is None for f in flags) else sum(1 for f in flags if f) / len(flags)
            checks = {
                "duration": lo - TOL <= dur <= hi + TOL,
                "silence": max(gaps, default=0.0) <= silence + TOL,
                "words": len(part) >= density * dur - TOL,
                "realtime": ratio is None or ratio > realtime_threshold,
            }
            if all(checks.values()):
                rows.append({
                    "start": start,
                    "end": end,
                    "duration": dur,
                    "word_count": len(part),
                    "max_internal_silence": max(gaps, default=0.0),
                    "realtime_ratio": ratio,
                    "checks": checks,
                    "words": [w[0] for w in part],
                })
            i = j + 1
    return rows


def segments(words, game_length, size=100, min_words=200):
    rows = []
    for k in range(int(math.floor(game_length / size))):
        inside = [w[0] for w in words if k * size <= w[1] < (k + 1) * size]
        if len(inside) >= min_words:
            rows.append({
                "index": k, "start": k * size, "end": (k + 1) * size,
                "word_count": len(inside), "min_words": min_words,
                "passed_min_words": True, "words": inside,
            })
    return rows


def dump(path, rows):
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def main():
    doc = json.loads(FIXTURE.read_text())
    words = clean(doc)
    duration = doc["duration"]
    dump(HERE / "timeline.jsonl", [{"end": b, "start": a, "word": t} for t, a, b, _ in words])
    dump(HERE / "chunk_w24_o12.jsonl", chunks(words, 24, 12, 48, duration))
    dump(HERE / "chunk_w24_o12_all.jsonl", chunks(words, 24, 12, 0, duration))
    dump(HERE / "anneal.jsonl", clips(words))
    dump(HERE / "evalseg.jsonl", segments(words, duration))
    dump(HERE / "evalseg_min150.jsonl", segments(words, duration, min_words=150))
    return 0


if __name__ == "__main__":
    sys.exit(main())
