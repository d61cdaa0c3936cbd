"""Rebuild data/uci/*.csv from wheels on the package index.

Boston housing comes from the CSV bundled with scikit-learn 1.1.3. The red
wine table is reassembled from KEEL's imbalanced subsets in keel-ds 0.2.5:
``winequality-red-4`` holds all 1599 rows in UCI order with a binary label,
and three further subsets recover the remaining quality levels by aligning
their rows as ordered subsequences.

    python scripts/fetch_uci.py [--wheels DIR] [--out data/uci]
"""

import argparse
import collections
import csv
import glob
import io
import os
import subprocess
import sys
import zipfile

WHEELS = {"scikit-learn==1.1.3": "scikit_learn-1.1.3-*.whl", "keel-ds==0.2.5": "keel_ds-0.2.5-*.whl"}
WINE_COLUMNS = [
    "fixed_acidity", "volatile_acidity", "citric_acid", "residual_sugar", "chlorides",
    "free_sulfur_dioxide", "total_sulfur_dioxide", "density", "pH", "sulphates", "alcohol", "quality",
]  # fmt: skip


def wheel(directory, spec):
    found = glob.glob(os.path.join(directory, WHEELS[spec]))
    if not found:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:", "-d", directory, spec],
            check=True,
        )
        found = glob.glob(os.path.join(directory, WHEELS[spec]))
    return zipfile.ZipFile(found[0])


def boston(z, out):
    text = z.read("sklearn/datasets/data/boston_house_prices.csv").decode()
    rows = list(csv.reader(io.StringIO(text)))[1:]  # first line is "506,13"
    with open(out, "w", newline="") as fh:
        fh.write(",".join(f'"{c}"' for c in rows[0]) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerows(rows[1:])
    return len(rows) - 1


def _keel_rows(z, name):
    lines = z.read(f"keel_ds/data/imbalanced/raw/{name}.dat").decode().strip().splitlines()
    out = []
    for line in lines:
        if line.startswith("@") or not line.strip():
            continue
        cells = [s.strip() for s in line.split(",")]
        out.append((tuple(cells[:-1]), cells[-1]))
    return out


def wine(z, out):
    full = _keel_rows(z, "winequality-red-4")
    quality = [4 if lab == "positive" else None for _, lab in full]

    def align(name, labels):
        sub = _keel_rows(z, name)
        j, hits = 0, []
        for i, (features, _) in enumerate(full):
            if j < len(sub) and quality[i] != 4 and features == sub[j][0]:
                hits.append((i, labels[sub[j][1]]))
                j += 1
        if j != len(sub):
            raise RuntimeError(f"{name}: aligned {j} of {len(sub)} rows")
        return hits

    for i, q in align("winequality-red-3_vs_5", {"positive": 3, "negative": 5}) + align(
        "winequality-red-8_vs_6", {"positive": 8, "negative": 6}
    ):
        assert quality[i] is None
        quality[i] = q
    for i, q in align("winequality-red-8_vs_6-7", {"positive": 8, "negative": None}):
        if q == 8:
            assert quality[i] == 8
        elif quality[i] is None:
            quality[i] = 7
        else:
            assert quality[i] == 6
    counts = collections.Counter(quality)
    expected = {3: 10, 4: 53, 5: 681, 6: 638, 7: 199, 8: 18}
    if dict(counts) != expected:
        raise RuntimeError(f"label counts {dict(counts)} differ from UCI {expected}")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(WINE_COLUMNS)
        for (features, _), q in zip(full, quality):
            w.writerow([*features, q])
    return len(full)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--wheels", default="build/wheels")
    ap.add_argument("--out", default="data/uci")
    args = ap.parse_args(argv)
    os.makedirs(args.wheels, exist_ok=True)
    os.makedirs(args.out, exist_ok=True)
    n = boston(wheel(args.wheels, "scikit-learn==1.1.3"), os.path.join(args.out, "boston.csv"))
    print(f"boston.csv: {n} rows")
    n = wine(wheel(args.wheels, "keel-ds==0.2.5"), os.path.join(args.out, "wine-quality-red.csv"))
    print(f"wine-quality-red.csv: {n} rows")
    print("yacht, naval and protein are not available from the package index; place them in", args.out)


if __name__ == "__main__":
    main()
