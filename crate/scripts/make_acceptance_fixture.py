#!/usr/bin/env python3
"""Regenerate the scripted fixture used by the acceptance and CLI tests.

Writes corpus.jsonl and scripted.json into crates/core/tests/fixtures.
"""
import json
import pathlib

OUT = pathlib.Path(__file__).resolve().parent.parent / "crates/core/tests/fixtures"

CHOICES = {
    "q1": ["a mirror", "a magnet", "a rock", "a rope"],
    "q2": ["melting", "evaporation", "freezing", "rusting"],
    "q3": ["the moon", "the sun", "a comet", "a star"],
    "q4": [
        "electrical -> chemical -> light",
        "chemical -> light -> electrical",
        "light -> chemical -> electrical",
        "chemical -> electrical -> light",
    ],
    "q5": ["0.05 mol", "0.10 mol", "0.20 mol", "0.50 mol"],
    "q6": ["spring", "autumn", "summer", "winter"],
}
TEXT = {
    "q1": "Which object is attracted to iron nails?",
    "q2": "A puddle disappears on a hot day. What happened to the water?",
    "q3": "What lights up the sky at night?",
    "q4": "What is the energy conversion sequence in a working flashlight?",
    "q5": "How many moles of NaOH neutralize 50 mL of 2 M HCl?",
    "q6": "Which season has the longest days?",
}
GOLD = {"q1": "B", "q2": "B", "q3": "A", "q4": "D", "q5": "B", "q6": "C"}

# Answer letters in sampling order. Ties in the majority go to the answer
# seen first, so q4 starts with a wrong B and q5 with a wrong A.
BEFORE = {
    "q1": "BBBBBBBBBB",
    "q2": "BBBCBBBCBB",
    "q3": "ABCABCABCA",
    "q4": "BDBDADBDBA",
    "q5": "ABCDABCDAB",
    "q6": "CACBCACBCA",
}
CLARIFIED = {
    "q3": "AAAAAAAAAA",
    "q4": "BDBDADBBBA",
    "q5": "BBBBBBACAC",
    "q6": "CCCCCACCCC",
}
INJECTED = {"q4": "DDDDDDDDDB", "q5": "BBBBBBBBAA"}

LABEL = {
    "q3": "Question Ambiguity",
    "q4": "Knowledge Gaps",
    "q5": "Both",
    "q6": "Question Ambiguity",
}
RATIONALE = {
    "q3": "The answers read 'at night' and 'lights up' in different ways: reflected light, "
    "the brightest object, or any light source.",
    "q4": "The answers agree on the question but disagree on the order of energy forms, "
    "which points to a misunderstanding of how a battery works.",
    "q5": "Some answers assume a different concentration unit while others misapply the "
    "1:1 ratio, so the wording and the chemistry both contribute.",
    "q6": "It is not stated which hemisphere is meant, so the answers pick different seasons.",
}
GAP = {
    "q4": "battery stores chemical energy, converted to electrical",
    "q5": "Stoichiometric Calculations in Acid–Base Reactions",
}
CLARIFY = {
    "q3": "Which celestial body most brightly lights up the sky on a clear night?",
    "q4": "In a flashlight that is switched on, what is the order of energy conversions "
    "from the battery to the emitted light?",
    "q5": "How many moles of NaOH exactly neutralize 50 mL of 2 mol/L HCl?",
    "q6": "In the Northern Hemisphere, which season has the longest days?",
}
SEARCH = {
    GAP["q4"]: "A battery stores energy in chemical form. When a circuit is closed, "
    "chemical reactions inside the cell drive electrons through the circuit, converting "
    "chemical energy into electrical energy; the bulb then converts it into light.",
}
SYNTH = {
    "q5": "Stoichiometry in acid-base reactions: moles = concentration x volume. "
    "HCl and NaOH react 1:1, so the moles of base needed equal the moles of acid.",
}


def reply(qid, letter, i):
    text = CHOICES[qid][ord(letter) - ord("A")]
    return f"Considering the options, {text} fits best (reasoning {i}).\nAnswer: {letter}"


def series(qid, letters):
    return [reply(qid, c, i) for i, c in enumerate(letters)]


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    with open(OUT / "corpus.jsonl", "w") as f:
        for qid in TEXT:
            q = {
                "id": qid,
                "text": TEXT[qid],
                "choices": [
                    {"label": chr(ord("A") + i), "text": t}
                    for i, t in enumerate(CHOICES[qid])
                ],
                "gold": GOLD[qid],
                "dataset": "openbookqa",
            }
            f.write(json.dumps(q, ensure_ascii=False) + "\n")

    responses = {}
    for qid, letters in BEFORE.items():
        responses[f"{qid}#*"] = series(qid, letters)
        majority = max(letters, key=lambda c: (letters.count(c), -letters.index(c)))
        rep = letters.index(majority)
        responses[f"{qid}#{rep}#verbalize"] = [f"{letters.count(majority) / 10:.2f}"]
    for qid, label in LABEL.items():
        responses[f"{qid}#attribute"] = [f"{RATIONALE[qid]}\nLabel: {label}"]
        responses[f"{qid}#clarify"] = [CLARIFY[qid]]
        responses[f"{qid}#clarified#*"] = series(qid, CLARIFIED[qid])
    for qid, gap in GAP.items():
        responses[f"{qid}#extract"] = [
            "Step 1: the answers order the same energy forms differently.\n"
            "Step 2: the missing piece is the underlying concept.\n"
            f"Missing Knowledge: {gap}"
        ]
        responses[f"{qid}#injected#*"] = series(qid, INJECTED[qid])
    for qid, text in SYNTH.items():
        responses[f"{qid}#synthesize"] = [text]

    fixture = {"responses": responses, "logprobs_supported": True, "search": SEARCH}
    with open(OUT / "scripted.json", "w") as f:
        json.dump(fixture, f, indent=2, ensure_ascii=False, sort_keys=True)
        f.write("\n")


if __name__ == "__main__":
    main()
