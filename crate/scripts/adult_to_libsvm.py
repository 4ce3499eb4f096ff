#!/usr/bin/env python3
"""Convert the raw UCI Adult files into a 123-feature binary LIBSVM file.

Encoding follows the usual binarized Adult layout: each categorical
attribute becomes one indicator per category, and the six continuous
attributes are discretized into quantile bins (five bins for age, fnlwgt,
education-num and hours-per-week; zero/non-zero for capital gain and loss).
Missing values ("?") produce no indicator. Labels are +1 (>50K) / -1.

usage: adult_to_libsvm.py adult.data adult.test out.libsvm
"""
import sys

import numpy as np

CATEGORIES = {
    1: "Private, Self-emp-not-inc, Self-emp-inc, Federal-gov, Local-gov, State-gov, Without-pay, Never-worked",
    3: "Bachelors, Some-college, 11th, HS-grad, Prof-school, Assoc-acdm, Assoc-voc, 9th, 7th-8th, 12th, Masters, 1st-4th, 10th, Doctorate, 5th-6th, Preschool",
    5: "Married-civ-spouse, Divorced, Never-married, Separated, Widowed, Married-spouse-absent, Married-AF-spouse",
    6: "Tech-support, Craft-repair, Other-service, Sales, Exec-managerial, Prof-specialty, Handlers-cleaners, Machine-op-inspct, Adm-clerical, Farming-fishing, Transport-moving, Priv-house-serv, Protective-serv, Armed-Forces",
    7: "Wife, Own-child, Husband, Not-in-family, Other-relative, Unmarried",
    8: "White, Asian-Pac-Islander, Amer-Indian-Eskimo, Other, Black",
    9: "Female, Male",
    13: "United-States, Cambodia, England, Puerto-Rico, Canada, Germany, Outlying-US(Guam-USVI-etc), India, Japan, Greece, South, China, Cuba, Iran, Honduras, Philippines, Italy, Poland, Jamaica, Vietnam, Mexico, Portugal, Ireland, France, Dominican-Republic, Laos, Ecuador, Taiwan, Haiti, Columbia, Hungary, Guatemala, Nicaragua, Scotland, Thailand, Yugoslavia, El-Salvador, Trinadad&Tobago, Peru, Hong, Holand-Netherlands",
}
QUANTILE_BINS = {0: 5, 2: 5, 4: 5, 12: 5}
ZERO_SPLIT = {10, 11}


def read_rows(paths):
    rows = []
    for path in paths:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("|"):
                    continue
                fields = [f.strip() for f in line.split(",")]
                if len(fields) != 15:
                    continue
                rows.append(fields)
    return rows


def quantile_edges(values, bins):
    qs = np.quantile(values, np.linspace(0, 1, bins + 1)[1:-1])
    return qs


def main():
    if len(sys.argv) != 4:
        sys.exit(__doc__)
    rows = read_rows(sys.argv[1:3])
    continuous = {
        col: np.array([float(r[col]) for r in rows]) for col in QUANTILE_BINS
    }
    edges = {col: quantile_edges(continuous[col], b) for col, b in QUANTILE_BINS.items()}

    layout = []  # (column, width)
    for col in range(14):
        if col in CATEGORIES:
            layout.append((col, len(CATEGORIES[col].split(", "))))
        elif col in QUANTILE_BINS:
            layout.append((col, QUANTILE_BINS[col]))
        else:
            layout.append((col, 2))
    assert sum(w for _, w in layout) == 123

    cat_index = {c: {v: k for k, v in enumerate(s.split(", "))} for c, s in CATEGORIES.items()}
    with open(sys.argv[3], "w") as out:
        for r in rows:
            label = "+1" if r[14].startswith(">50K") else "-1"
            feats = []
            offset = 0
            for col, width in layout:
                v = r[col]
                if v != "?":
                    if col in CATEGORIES:
                        k = cat_index[col].get(v)
                    elif col in QUANTILE_BINS:
                        k = int(np.searchsorted(edges[col], float(v), side="right"))
                    else:
                        k = 0 if float(v) == 0.0 else 1
                    if k is not None:
                        feats.append(offset + k + 1)
                offset += width
            out.write(label + " " + " ".join(f"{j}:1" for j in feats) + "\n")


if __name__ == "__main__":
    main()
