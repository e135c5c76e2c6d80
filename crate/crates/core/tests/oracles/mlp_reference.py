"""Learnability check for the synthetic task: a plain 2-layer MLP (64 ReLU
units, scikit-learn defaults otherwise) on the raw signals of a dataset
written by `nas gen-data`.

    nas --out /tmp/d gen-data
    python3 tests/oracles/mlp_reference.py /tmp/d/dataset.json

Default dataset (seed 0): validation accuracy 1.0.
"""
import json
import sys

import numpy as np
from sklearn.neural_network import MLPClassifier


def split(doc, name, length):
    part = doc[name]
    return np.asarray(part["inputs"]).reshape(-1, length), np.asarray(part["labels"])


def main(path):
    doc = json.load(open(path))
    length = doc["config"]["length"]
    x_tr, y_tr = split(doc, "train", length)
    x_va, y_va = split(doc, "val", length)
    model = MLPClassifier(hidden_layer_sizes=(64,), max_iter=500, random_state=0).fit(x_tr, y_tr)
    print(f"val accuracy {model.score(x_va, y_va):.4f}")


if __name__ == "__main__":
    main(sys.argv[1])
