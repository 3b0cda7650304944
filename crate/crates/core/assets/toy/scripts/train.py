"""Linear regression with optional ridge penalty on the toy task.

    python3 src/train.py            train, write result/ and the manifest
    python3 src/train.py --smoke    quick check on a few rows, writes nothing
    python3 src/train.py --predict  rewrite result/predictions.csv only
"""
import csv
import json
import os
import sys

FEATURES = ["x1", "x2", "x3"]


def load(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def read_params(path):
    params = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                key, value = line.split("=", 1)
                params[key.strip()] = value.strip()
    return params


def design(rows):
    return [[1.0] + [float(r[c]) for c in FEATURES] for r in rows]


def solve(a, b):
    n = len(a)
    m = [row[:] + [b[i]] for i, row in enumerate(a)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(m[r][col]))
        m[col], m[piv] = m[piv], m[col]
        for r in range(col + 1, n):
            f = m[r][col] / m[col][col]
            for c in range(col, n + 1):
                m[r][c] -= f * m[col][c]
    x = [0.0] * n
    for r in range(n - 1, -1, -1):
        s = m[r][n] - sum(m[r][c] * x[c] for c in range(r + 1, n))
        x[r] = s / m[r][r]
    return x


def fit(X, y, lam):
    # The intercept is not penalized.
    k = len(X[0])
    xtx = [[sum(row[i] * row[j] for row in X) for j in range(k)] for i in range(k)]
    for i in range(1, k):
        xtx[i][i] += lam
    xty = [sum(row[i] * t for row, t in zip(X, y)) for i in range(k)]
    return solve(xtx, xty)


def predict(w, X):
    return [sum(a * b for a, b in zip(row, w)) for row in X]


def main():
    smoke = "--smoke" in sys.argv
    predict_only = "--predict" in sys.argv
    lam = float(read_params("config/params.conf").get("ridge_lambda", "0"))
    train = load("data/train.csv")
    test = load("data/test.csv")
    if smoke:
        train, test = train[:12], test[:3]
    X = design(train)
    y = [float(r["y"]) for r in train]

    cut = int(len(train) * 0.8)
    w_val = fit(X[:cut], y[:cut], lam)
    resid = [p - t for p, t in zip(predict(w_val, X[cut:]), y[cut:])]
    rmse = (sum(r * r for r in resid) / len(resid)) ** 0.5

    w = fit(X, y, lam)
    preds = predict(w, design(test))
    if smoke:
        print("smoke ok: rows=%d val_rmse=%.6f" % (len(train), rmse))
        return

    os.makedirs("result", exist_ok=True)
    with open("result/predictions.csv", "w") as f:
        f.write("id,score\n")
        for r, p in zip(test, preds):
            f.write("%s,%r\n" % (r["id"], p))
    if predict_only:
        print("predictions written")
        return
    with open("result/model.json", "w") as f:
        json.dump({"ridge_lambda": lam, "weights": w}, f, sort_keys=True)
        f.write("\n")
    with open("result/manifest", "w") as f:
        f.write("metric_name = val_rmse\n")
        f.write("metric_value = %r\n" % rmse)
        f.write("direction = lower\n")
        f.write("checkpoints = result/model.json\n")
        f.write("predictions_path = result/predictions.csv\n")
        f.write("produced_by = tuner\n")
        f.write("runs_completed = 1\n")
        f.write("inference_command = python3 src/train.py --predict\n")
    print("trained: ridge_lambda=%r val_rmse=%.6f" % (lam, rmse))


if __name__ == "__main__":
    main()
