"""Reference score for the toy run: the RMSE against the hidden labels of an
equal-weight average of least squares and ridge (lambda 1, unpenalized
intercept). Solves the normal equations by Cholesky factorization.

    python3 oracle.py [predictions.csv]

With a predictions file, also prints that file's RMSE.
"""
import csv
import math
import os
import sys

HERE = os.path.dirname(os.path.abspath(__file__))
DATA = os.path.join(HERE, "..", "bundle", "data")


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def features(r):
    return [1.0, float(r["x1"]), float(r["x2"]), float(r["x3"])]


def cholesky_solve(a, b):
    n = len(a)
    L = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1):
            s = a[i][j] - sum(L[i][k] * L[j][k] for k in range(j))
            L[i][j] = math.sqrt(s) if i == j else s / L[j][j]
    z = [0.0] * n
    for i in range(n):
        z[i] = (b[i] - sum(L[i][k] * z[k] for k in range(i))) / L[i][i]
    x = [0.0] * n
    for i in reversed(range(n)):
        x[i] = (z[i] - sum(L[k][i] * x[k] for k in range(i + 1, n))) / L[i][i]
    return x


def weights(train, lam):
    X = [features(r) for r in train]
    y = [float(r["y"]) for r in train]
    a = [[sum(row[i] * row[j] for row in X) + (lam if i == j and i > 0 else 0.0) for j in range(4)] for i in range(4)]
    b = [sum(row[i] * t for row, t in zip(X, y)) for i in range(4)]
    return cholesky_solve(a, b)


def rmse(pred, labels):
    return math.sqrt(sum((pred[k] - labels[k]) ** 2 for k in labels) / len(labels))


def main():
    train = rows(os.path.join(DATA, "train.csv"))
    test = rows(os.path.join(DATA, "test.csv"))
    labels = {r["id"]: float(r["y"]) for r in rows(os.path.join(HERE, "test_labels.csv"))}
    w0, w1 = weights(train, 0.0), weights(train, 1.0)
    blend = {}
    for r in test:
        x = features(r)
        blend[r["id"]] = 0.5 * sum(a * b for a, b in zip(x, w0)) + 0.5 * sum(a * b for a, b in zip(x, w1))
    print("oracle_rmse=%r" % rmse(blend, labels))
    if len(sys.argv) > 1:
        got = {r["id"]: float(r["score"]) for r in rows(sys.argv[1])}
        print("submission_rmse=%r" % rmse(got, labels))


if __name__ == "__main__":
    main()
