"""Author the checked-in gateway fixtures.

The replies below were written by hand to stand in for the hosted models. They are served by a
scripted transport while the reference pipelines run in record mode, so every fixture file has
exactly the request digest a fixture-mode run will look up.

    python3 scripts/author_fixtures.py
"""

from __future__ import annotations

import json
import os
import sys
import tempfile
from pathlib import Path

from xtp import cli
from xtp.opcore.builtin import (
    CHECK_PROMPT, GRAPH_PROMPT, SCHEMA_PROMPT, SUMMARY_PROMPT, TRIPLET_PROMPT, VALUE_PROMPT,
)

ROOT = Path(__file__).resolve().parents[1]

SCHEMA_REPLY = """\
pt id: int [PK], name: string, mrn: string, diagnosis: string
med id: int [PK], name: string, gsn: string, ndc: string, brand: string, route: string, dose_amount: string, dose_unit: string
adm id: int [PK], p_id: int [FK → pt(id)], med_id: int [FK → med(id)]"""

TRIPLETS = [
    ("John Doe", "mrn", "874521", 3),
    ("John Doe", "diagnosis", "pneumonia", 3),
    ("John Doe", "prescribed", "Azithromycin", 3),
    ("Azithromycin", "dose", "500mg", 3),
    ("Azithromycin", "route", "PO", 3),
    ("Azithromycin", "brand", "Zithromax", 3),
    ("Azithromycin", "gsn", "009812", 3),
    ("Azithromycin", "ndc", "54569-5821", 3),
    ("Jane D.", "mrn", "874522", 5),
    ("Jane D.", "prescribed", "Azithromycin", 5),
    ("Azithromycin", "dose", "250mg", 5),
    ("Azithromycin", "route", "PO", 5),
    ("Azithromycin", "brand", "Zmax", 5),
    ("Azithromycin", "ndc", "60505-3790", 5),
    ("Jane D.", "diagnosis", "pneumonia", 5),
    ("John D.", "prescribed", "Azithromycin", 7),
    ("Azithromycin", "dose", "500mg", 7),
    ("Azithromycin", "route", "PO", 7),
]

ROWS = {
    "pt": [
        {"values": [1, "John Doe", "874521", "pneumonia"], "evidence": [0, 1, 2, 15]},
        {"values": [2, "Jane D.", "874522", "pneumonia"], "evidence": [8, 9, 14]},
    ],
    "med": [
        {"values": [1, "Azithromycin", "009812", "54569-5821", "Zithromax", "PO", "500", "mg"],
         "evidence": [3, 4, 5, 6, 7, 16, 17]},
        {"values": [2, "Azithromycin", None, "60505-3790", "Zmax", "PO", "250", "mg"],
         "evidence": [10, 11, 12, 13]},
    ],
    "adm": [
        {"values": [1, 1, 1], "evidence": [2]},
        {"values": [2, 2, 2], "evidence": [9]},
        {"values": [3, 1, 1], "evidence": [15]},
    ],
}

CHECK_REPLY = """```sql
SELECT pt.id, pt.mrn, COUNT(*) AS antibiotics
FROM adm JOIN pt ON adm.p_id = pt.id JOIN med ON adm.med_id = med.id
WHERE med.name IN ('Azithromycin', 'Amoxicillin')
GROUP BY pt.id, pt.mrn
ORDER BY antibiotics DESC;
```"""

SUMMARY_REPLY = (
    "Two patients received antibiotics. MRN 874521 had 2 administrations of an antibiotic and "
    "MRN 874522 had 1. The repeated course for MRN 874521 makes it the first candidate for an "
    "over-prescription review.")
SUMMARY_EMPTY_REPLY = "No antibiotic administrations were recorded in these notes."

CIRCUIT = json.loads((ROOT / "fixtures" / "circuit.json").read_text(encoding="utf-8"))
GRAPH_CONFIDENCE = {"gpt-4o-mini": 0.72, "gpt-4o": 0.93}

LATENCY_MS = {"gpt-4o": 1850.0, "gpt-4o-mini": 920.0}


def reply_for(body: dict) -> str:
    """The hand-written answer to one request, chosen by its instruction prompt."""
    system = body["messages"][0]["content"]
    user = body["messages"][-1]["content"]
    if system == SCHEMA_PROMPT:
        return SCHEMA_REPLY
    if system == TRIPLET_PROMPT:
        items = [{"s": s, "p": p, "o": o, "line": line} for s, p, o, line in TRIPLETS]
        return json.dumps({"triplets": items, "confidence": 0.97}, indent=1)
    if system == VALUE_PROMPT:
        return json.dumps({"rows": ROWS, "confidence": 0.98}, indent=1)
    if system == CHECK_PROMPT:
        return CHECK_REPLY
    if system == SUMMARY_PROMPT:
        return SUMMARY_REPLY if "[id:" in user else SUMMARY_EMPTY_REPLY
    if system == GRAPH_PROMPT:
        return json.dumps({"graph": CIRCUIT, "confidence": GRAPH_CONFIDENCE[body["model"]]})
    raise KeyError(f"no scripted reply for prompt {system[:50]!r}")


def scripted_transport(url: str, headers: dict, body: bytes) -> tuple[int, bytes]:
    req = json.loads(body)
    content = reply_for(req)
    prompt_chars = sum(len(m["content"]) for m in req["messages"])
    return 200, json.dumps({
        "content": content,
        "usage": {"input_tokens": prompt_chars // 4 + 1, "output_tokens": len(content) // 4 + 1},
        "latency_ms": LATENCY_MS[req["model"]],
    }).encode("utf-8")


def main() -> int:
    os.environ.setdefault("XTP_MODEL_KEY", "scripted")
    with tempfile.TemporaryDirectory() as tmp:
        empty = Path(tmp) / "empty_notes.txt"
        empty.write_text("", encoding="utf-8")
        runs = [
            ("pipelines/clinical.json", ROOT / "fixtures" / "clinical_notes.txt"),
            ("pipelines/clinical.json", empty),
            ("pipelines/circuit.json", ROOT / "fixtures" / "circuit.json"),
        ]
        for i, (spec, path) in enumerate(runs):
            code = cli.main(["fixtures", "record", str(ROOT / spec), str(path),
                             "--out", str(Path(tmp) / f"run{i}")], transport=scripted_transport)
            if code != 0:
                print(f"recording {spec} on {path.name} failed with exit code {code}", file=sys.stderr)
                return code
    print(f"fixtures written to {ROOT / 'fixtures' / 'gateway'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
