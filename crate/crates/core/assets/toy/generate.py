"""Regenerates the toy task: bundle data, hidden labels, search fixture and
the scripted fixture pack that drives a full run over two repositories.

    python3 generate.py
"""
import hashlib
import json
import os
import random

HERE = os.path.dirname(os.path.abspath(__file__))
TRUE_W = [1.5, 2.0, -0.7, 0.3]
N_TRAIN, N_TEST = 40, 20
SEARCH_QUERY = "ridge regression unpenalized intercept closed form"


def write(rel, text):
    path = os.path.join(HERE, rel)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def make_data():
    rng = random.Random(20240611)
    rows = []
    for i in range(N_TRAIN + N_TEST):
        x = [round(rng.uniform(-2.0, 2.0), 4) for _ in range(3)]
        y = TRUE_W[0] + sum(w * v for w, v in zip(TRUE_W[1:], x)) + rng.gauss(0.0, 0.1)
        rows.append((i, x, round(y, 6)))
    train, test = rows[:N_TRAIN], rows[N_TRAIN:]
    write("bundle/data/train.csv", "id,x1,x2,x3,y\n" + "".join(
        "r%03d,%s,%s,%s,%r\n" % (i, x[0], x[1], x[2], y) for i, x, y in train))
    write("bundle/data/test.csv", "id,x1,x2,x3\n" + "".join(
        "r%03d,%s,%s,%s\n" % (i, x[0], x[1], x[2]) for i, x, _ in test))
    write("reference/test_labels.csv", "id,y\n" + "".join("r%03d,%r\n" % (i, y) for i, _, y in test))


def call(name, **args):
    return {"name": name, "args": args}


def step(agent, index, text, calls=()):
    return {"agent": agent, "match": {"index": index}, "response": {"text": text, "tool_calls": list(calls)}}


def stream(agent, turns):
    return [step(agent, k, text, calls) for k, (text, calls) in enumerate(turns)]


PLAN = """# Plan: {title}

Model: linear regression on x1, x2, x3 with an intercept{extra}.
Validation: fit on the first 80% of train.csv, report RMSE on the rest.
Final model: refit on all of train.csv, predict test.csv.
Hyperparameters live in config/params.conf (ridge_lambda).
Outputs: result/predictions.csv (id,score), result/model.json, result/manifest.
"""


def fixture():
    train_py = open(os.path.join(HERE, "scripts", "train.py")).read()
    lines = []
    lines += stream("setup", [
        ("Checking the interpreter.", [call("execute", command="python3 -c 'import csv, json'")]),
        ("Standard library only; disable bytecode caches.",
         [call("activate", prefix="PYTHONDONTWRITEBYTECODE=1", environment="system-python3")]),
        ("Environment ready: system python3, no extra packages.", []),
    ])
    lines += stream("manager", [
        ("Start with two plans.", [call("designer_1", instructions="plain least squares"),
                                   call("designer_2", instructions="ridge with lambda 1")]),
        ("Implement both.", [call("coder_1"), call("coder_2")]),
        ("Train both.", [call("tuner_1", tuning_budget=60), call("tuner_2", tuning_budget=60)]),
        ("Both repositories hold results; finishing.", []),
    ])
    lines += stream("designer_1", [
        ("Looking up the ridge formulation.", [call("search", query=SEARCH_QUERY)]),
        ("Writing the plan.", [call("write", path="plan.md",
                                    content=PLAN.format(title="least squares", extra=""))]),
        ("Plan: ordinary least squares.", []),
    ])
    lines += stream("designer_2", [
        ("Writing the plan.", [call("write", path="plan.md",
                                    content=PLAN.format(title="ridge", extra=", ridge penalty 1.0 on slopes"))]),
        ("Plan: ridge regression, lambda 1.", []),
    ])
    for i, lam in ((1, "0"), (2, "1.0")):
        lines += stream("coder_%d" % i, [
            ("Implementing the plan.", [call("write", path="src/train.py", content=train_py),
                                        call("write", path="config/params.conf", content="ridge_lambda = %s\n" % lam)]),
            ("Smoke run.", [call("execute", command="python3 src/train.py --smoke", timeout=30)]),
            ("Code verified by smoke run.", []),
        ])
        lines += stream("tuner_%d" % i, [
            ("Full training run.", [call("execute", command="python3 src/train.py", timeout=60)]),
            ("Checking the manifest.", [call("read", path="result/manifest")]),
            ("Training finished; manifest written.", []),
        ])
    lines += stream("aggregator", [
        ("Comparing candidates.", [call("read_1", path="result/manifest"), call("read_2", path="result/manifest")]),
        ("Scores are close; averaging.", [call("submit", variant="ensemble", members=[1, 2],
                                                weights=[0.5, 0.5], method="weighted_average")]),
        ("Submitted an equal-weight average of both repositories.", []),
    ])
    write("fixture.jsonl", "".join(json.dumps(l, sort_keys=True) + "\n" for l in lines))


def search_fixture():
    digest = hashlib.sha256(SEARCH_QUERY.encode()).hexdigest()
    results = [{"title": "Ridge regression", "url": "https://en.wikipedia.org/wiki/Ridge_regression",
                "snippet": "Tikhonov regularization; the intercept is usually left unpenalized."}]
    write("search.jsonl", json.dumps({"query_digest": digest, "results": results}, sort_keys=True) + "\n")


TASK = """# Toy regression

Predict `y` for every row of `data/test.csv` from the features x1, x2, x3.
`data/train.csv` holds 40 labelled rows. Submissions are scored by RMSE
against hidden labels (lower is better).

Write predictions as CSV with header `id,score`. Only the Python 3 standard
library is available.
"""

CONF = """# Toy task: two repositories, scripted provider, fixture search.
provider.mode = scripted
provider.fixture_path = fixture.jsonl
repos_n = 2
budget.total_seconds = 600
budget.grace_seconds = 2
budget.aggregator_reserve_seconds = 60
limits.parallelism = 2
limits.smoke_timeout = 30
search.mode = fixture
search.fixture_path = search.jsonl
workspace.data_copy = copy
paths.run_dir = run
"""


if __name__ == "__main__":
    make_data()
    write("bundle/task.md", TASK)
    write("run.conf", CONF)
    fixture()
    search_fixture()
