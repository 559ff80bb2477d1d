#!/usr/bin/env python3
"""Regenerate the bundled example workspaces (deterministic, seeded).

    python3 scripts/make_workspaces.py [--out workspaces]

hospital/  three joined tables and a length-of-stay decision tree whose
           shape exercises every rewrite: a pregnant flag split at the root,
           gender one-hot splits only on the pregnant=0 side, a cheap
           bp-only subtree for age<=35 and a large subtree (with redundant
           pregnant re-splits) for age>35.
flights/   a single table and a sparse logistic-regression delay model over
           one-hot destination/carrier features, for folding/clustering.
"""

from __future__ import annotations

import argparse
import csv
import json
from pathlib import Path

import numpy as np

from inferq.models import (
    DecisionTree,
    Leaf,
    Linear,
    ModelPipeline,
    OneHot,
    Split,
    StandardScale,
)
from inferq.pipeline_json import serialize_pipeline

SEED = 20240711


def _complex_subtree(rng: np.random.Generator) -> Split:
    """Deep stay-prediction subtree for older pregnant patients (>64 nodes)."""

    features = ["bp", "prenatal_result", "age"]
    ranges = {"bp": (90.0, 180.0), "prenatal_result": (0.0, 100.0),
              "age": (36.0, 88.0)}

    def build(depth: int, env: dict) -> object:
        done = depth >= 7 or (depth > 3 and rng.random() < 0.18)
        if done:
            return Leaf((round(float(rng.uniform(1.0, 21.0)), 1),))
        feat = features[depth % len(features)]
        lo, hi = env[feat]
        if hi - lo < 2.0:
            return Leaf((round(float(rng.uniform(1.0, 21.0)), 1),))
        t = round(float(rng.uniform(lo + 0.25 * (hi - lo), lo + 0.75 * (hi - lo))), 1)
        left_env = dict(env)
        left_env[feat] = (lo, t)
        right_env = dict(env)
        right_env[feat] = (t, hi)
        return Split(feat, t, build(depth + 1, left_env), build(depth + 1, right_env))

    tree = build(0, dict(ranges))

    # Trained trees re-split on correlated flags; graft two redundant
    # pregnant checks so the translated graph keeps a pregnant dependence.
    def graft(node, path: str):
        if not path:
            return Split("pregnant", 0.0, Leaf((4.0,)), node)
        if isinstance(node, Leaf):
            return node
        if path[0] == "L":
            return Split(node.feature, node.threshold, graft(node.left, path[1:]),
                         node.right)
        return Split(node.feature, node.threshold, node.left,
                     graft(node.right, path[1:]))

    tree = graft(tree, "LL")
    tree = graft(tree, "RRL")
    return tree


def hospital_model(rng: np.random.Generator) -> ModelPipeline:
    not_pregnant = Split(
        "gender=F", 0.5,
        Split("bp", 135.0, Leaf((2.0,)), Leaf((5.0,))),
        Split("bp", 150.0, Leaf((3.0,)), Leaf((6.0,))),
    )
    cheap = Split("bp", 140.0, Leaf((2.0,)), Leaf((9.0,)))
    pregnant = Split("age", 35.0, cheap, _complex_subtree(rng))
    root = Split("pregnant", 0.0, not_pregnant, pregnant)
    return ModelPipeline(
        featurizers=(
            StandardScale("pregnant", 0.5, 0.5),
            OneHot("gender", ("F", "M"), "zeros"),
        ),
        model=DecisionTree(root),
        output="scores",
    )


def write_hospital(out: Path, rng: np.random.Generator):
    ws = out / "hospital"
    ws.mkdir(parents=True, exist_ok=True)
    n = 1000
    ids = np.arange(1, n + 1)
    gender = rng.choice(["F", "M"], size=n, p=[0.55, 0.45])
    age = rng.integers(18, 91, size=n)
    pregnant = ((gender == "F") & (age < 52) & (rng.random(n) < 0.45)).astype(int)
    bp = np.round(rng.uniform(85.0, 185.0, size=n), 1)
    prenatal = np.round(rng.uniform(0.0, 100.0, size=n), 1)

    with open(ws / "patient_info.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "pregnant", "age", "gender"])
        for i in range(n):
            w.writerow([ids[i], pregnant[i], age[i], gender[i]])
    order = rng.permutation(n)
    with open(ws / "blood_tests.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pid", "bp"])
        for i in order:
            w.writerow([ids[i], bp[i]])
    order = rng.permutation(n)
    with open(ws / "prenatal_tests.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["qid", "prenatal_result"])
        for i in order:
            w.writerow([ids[i], prenatal[i]])

    pipeline = hospital_model(rng)
    (ws / "los_model.json").write_text(
        json.dumps(serialize_pipeline(pipeline), indent=2)
    )

    catalog = {
        "tables": {
            "patient_info": {
                "path": "patient_info.csv",
                "schema": [
                    {"name": "id", "type": "numeric"},
                    {"name": "pregnant", "type": "numeric"},
                    {"name": "age", "type": "numeric"},
                    {"name": "gender", "type": "categorical"},
                ],
                "unique_keys": [["id"]],
                "foreign_keys": [
                    {"columns": ["id"], "ref_table": "blood_tests",
                     "ref_columns": ["pid"]},
                    {"columns": ["id"], "ref_table": "prenatal_tests",
                     "ref_columns": ["qid"]},
                ],
            },
            "blood_tests": {
                "path": "blood_tests.csv",
                "schema": [
                    {"name": "pid", "type": "numeric"},
                    {"name": "bp", "type": "numeric"},
                ],
                "unique_keys": [["pid"]],
            },
            "prenatal_tests": {
                "path": "prenatal_tests.csv",
                "schema": [
                    {"name": "qid", "type": "numeric"},
                    {"name": "prenatal_result", "type": "numeric"},
                ],
                "unique_keys": [["qid"]],
            },
        },
        "models": {"M": {"path": "los_model.json"}},
    }
    (ws / "catalog.json").write_text(json.dumps(catalog, indent=2))

    args = ", ".join(name for name, _ in pipeline.input_columns())
    (ws / "query.sql").write_text(
        "SELECT id, PREDICT(M, {args}) AS los\n"
        "FROM patient_info\n"
        "JOIN blood_tests ON id = pid\n"
        "JOIN prenatal_tests ON id = qid\n"
        "WHERE pregnant = 1 AND PREDICT(M, {args}) > 7\n".format(args=args)
    )

    model = pipeline.model
    print(f"hospital: {model.node_count} tree nodes, "
          f"inputs {[n for n, _ in pipeline.input_columns()]}")


DESTS = ("JFK", "SEA", "LAX", "ORD", "ATL", "DEN", "DFW", "BOS")
CARRIERS = ("AA", "DL", "UA", "WN")


def flights_model(rng: np.random.Generator) -> ModelPipeline:
    weights = {}
    for i, d in enumerate(DESTS):
        # L1-style training zeroes several destination coefficients.
        weights[f"dest={d}"] = 0.0 if i % 3 == 2 else round(float(rng.normal(0, 0.8)), 4)
    for c in CARRIERS:
        weights[f"carrier={c}"] = round(float(rng.normal(0, 0.5)), 4)
    weights["distance"] = round(float(rng.normal(0.4, 0.1)), 4)
    weights["dep_hour"] = round(float(rng.normal(0.3, 0.1)), 4)
    model = Linear(tuple(weights.items()), intercept=-0.2, link="sigmoid")
    return ModelPipeline(
        featurizers=(
            OneHot("dest", DESTS, "zeros"),
            OneHot("carrier", CARRIERS, "zeros"),
            StandardScale("distance", 1200.0, 700.0),
            StandardScale("dep_hour", 13.0, 5.0),
        ),
        model=model,
        output="scores",
    )


def write_flights(out: Path, rng: np.random.Generator):
    ws = out / "flights"
    ws.mkdir(parents=True, exist_ok=True)
    n = 2000
    fid = np.arange(1, n + 1)
    dest = rng.choice(DESTS, size=n)
    carrier = rng.choice(CARRIERS, size=n)
    distance = np.round(rng.uniform(200.0, 3000.0, size=n), 0)
    dep_hour = rng.integers(0, 24, size=n)
    with open(ws / "flights.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fid", "distance", "dep_hour", "carrier", "dest"])
        for i in range(n):
            w.writerow([fid[i], distance[i], dep_hour[i], carrier[i], dest[i]])

    pipeline = flights_model(rng)
    (ws / "delay_model.json").write_text(
        json.dumps(serialize_pipeline(pipeline), indent=2)
    )
    catalog = {
        "tables": {
            "flights": {
                "path": "flights.csv",
                "schema": [
                    {"name": "fid", "type": "numeric"},
                    {"name": "distance", "type": "numeric"},
                    {"name": "dep_hour", "type": "numeric"},
                    {"name": "carrier", "type": "categorical"},
                    {"name": "dest", "type": "categorical"},
                ],
                "unique_keys": [["fid"]],
            }
        },
        "models": {"D": {"path": "delay_model.json"}},
    }
    (ws / "catalog.json").write_text(json.dumps(catalog, indent=2))
    args = ", ".join(name for name, _ in pipeline.input_columns())
    (ws / "query.sql").write_text(
        f"SELECT fid, PREDICT(D, {args}) AS delay_p\n"
        "FROM flights\n"
        "WHERE dest = 'JFK'\n"
    )
    print(f"flights: {len(pipeline.model.weights)} weights, "
          f"inputs {[n for n, _ in pipeline.input_columns()]}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="workspaces")
    args = ap.parse_args()
    out = Path(args.out)
    rng = np.random.default_rng(SEED)
    write_hospital(out, rng)
    write_flights(out, rng)


if __name__ == "__main__":
    main()
