#!/usr/bin/env python3
"""Scores a run with pytrec_eval (trec_eval's ndcg_cut measure) and writes the
reference values the C++ tests compare against.

    python3 tools/validate_ndcg.py tests/data/ndcg_case.qrels tests/data/ndcg_case.run \
        > tests/data/ndcg_case.reference.json
"""

import json
import sys

import pytrec_eval


def read_qrels(path):
    qrels = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            qid, _, doc, grade = line.split()
            qrels.setdefault(qid, {})[doc] = int(grade)
    return qrels


def read_run(path):
    run = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            qid, _, doc, _, score, _ = line.split()
            run.setdefault(qid, {})[doc] = float(score)
    return run


def main():
    qrels_path, run_path = sys.argv[1], sys.argv[2]
    evaluator = pytrec_eval.RelevanceEvaluator(read_qrels(qrels_path), {"ndcg_cut.3", "ndcg_cut.20", "recall.1000"})
    results = evaluator.evaluate(read_run(run_path))
    out = {
        "tool": "pytrec_eval " + getattr(pytrec_eval, "__version__", "unknown"),
        "per_query": results,
    }
    json.dump(out, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
