"""Regenerate the bundled toy vocabulary and sentiment corpus.

    python scripts/make_toy_corpus.py src/textleak/data
"""

import sys
from pathlib import Path

import numpy as np

SPECIAL = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]
DET = ["the", "a", "this", "that", "my", "our"]
NOUN = ["movie", "film", "plot", "cast", "story", "script", "actor", "scene",
        "music", "ending", "director", "show", "book", "cat", "dog", "car"]
VERB = ["was", "is", "seems", "felt", "looks", "remains", "became", "sounds"]
ADV = ["very", "truly", "rather", "quite", "so", "too", "really", "not"]
POS = ["good", "great", "funny", "moving", "clever", "lovely", "brilliant", "warm",
       "fresh", "charming"]
NEG = ["bad", "dull", "boring", "awful", "weak", "silly", "messy", "flat", "slow",
       "bland", "poor"]


def sentence(rng):
    positive = rng.random() < 0.5
    adj = rng.choice(POS if positive else NEG)
    words = [rng.choice(DET), rng.choice(NOUN), rng.choice(VERB)]
    if rng.random() < 0.6:
        words.append(rng.choice(ADV))
    words.append(adj)
    if rng.random() < 0.4:
        words += ["and", rng.choice(POS if positive else NEG)]
    return int(positive), words


def main(out):
    out = Path(out)
    vocab = SPECIAL + DET + NOUN + VERB + ADV + POS + NEG + ["and"]
    assert len(vocab) == len(set(vocab)) == 64, len(vocab)
    (out / "toy_vocab.txt").write_text("\n".join(vocab) + "\n")
    rng = np.random.default_rng(20240601)
    lines = []
    for _ in range(512):
        label, words = sentence(rng)
        lines.append(f"{label}\t{' '.join(words)}")
    (out / "toy_corpus.tsv").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/textleak/data")
