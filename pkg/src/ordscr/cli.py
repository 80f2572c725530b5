"""Command-line surface: fit, select, simulate, classify, evaluate.

Input CSVs carry one header row naming the variables; cells are integer
categories 1..C_i. An optional count column (named via --freq) marks
pre-aggregated pattern data; zero-count rows are dropped on ingestion.
Category counts are inferred from the observed maxima unless
--categories pins them. Every command writes a small manifest next to
its outputs and is deterministic given its flags and seed.

Exit codes: 0 success, 1 usage or input error, 2 numerical
non-convergence (outputs are still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .classify_eval import PartitionMatrix, ari, hard_assign, ipf_joint_posterior, loss_measure
from .em import FitConfig, MultiStartError, multi_start_fit
from .model import (
    OrdinalSchema,
    ScrParameters,
    derive_moments,
    first_second_order_correlation,
    moments_to_dict,
    params_from_dict,
    params_to_dict,
)
from .pairwise import IngestionError, build_pairwise_tables
from .selection import SelectionError, grid_select
from .simulate import model_label, replicate_study, scenario_preset

MODEL_FORMAT_VERSION = 1


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# IO helpers


def _read_table(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise UsageError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    return [h.strip() for h in header], rows


def _load_data(path, freq_col=None, categories=None):
    """CSV -> (rows array, freq array or None, variable names, schema)."""
    header, raw = _read_table(path)
    if freq_col is not None:
        if freq_col not in header:
            raise UsageError(f"{path}: no column named {freq_col!r}")
        fidx = header.index(freq_col)
        names = [h for k, h in enumerate(header) if k != fidx]
    else:
        fidx = None
        names = header
    if len(names) < 2:
        raise UsageError(f"{path}: need at least 2 ordinal variables, found {len(names)}")

    data, freq = [], []
    for r, row in enumerate(raw):
        if len(row) != len(header):
            raise UsageError(f"{path}, row {r + 2}: expected {len(header)} cells")
        try:
            values = [int(v) for v in row]
        except ValueError:
            raise UsageError(f"{path}, row {r + 2}: non-integer cell") from None
        if fidx is not None:
            n = values.pop(fidx)
            if n < 0:
                raise UsageError(f"{path}, row {r + 2}: negative count")
            if n == 0:
                continue
            freq.append(n)
        data.append(values)
    if not data:
        raise UsageError(f"{path}: no data rows")
    rows = np.asarray(data, dtype=int)
    freq_arr = np.asarray(freq, dtype=int) if fidx is not None else None

    if categories is not None:
        C = tuple(categories)
        if len(C) != rows.shape[1]:
            raise UsageError("--categories must list one count per variable")
    else:
        C = tuple(int(c) for c in rows.max(axis=0))
    try:
        schema = OrdinalSchema(C)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return rows, freq_arr, names, schema


def _write_json(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _write_manifest(out_prefix, command, args, outputs, started):
    manifest = {
        "command": command,
        "inputs": {
            k: v
            for k, v in vars(args).items()
            if k in ("data", "model", "truth", "estimate") and v is not None
        },
        "config": {
            k: v for k, v in vars(args).items() if k not in ("func",) and not callable(v)
        },
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "wall_clock_sec": round(time.time() - started, 3),
        "outputs": outputs,
    }
    _write_json(f"{out_prefix}.manifest.json", manifest)


def _fit_config(args, default_starts):
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("ORDSCR_THREADS", 0)) or (os.cpu_count() or 1)
    return FitConfig(
        max_em_iters=args.max_iters,
        em_tol=args.tol,
        n_starts=args.starts if args.starts is not None else default_starts,
        seed=args.seed,
        threads=threads,
    )


def _write_posteriors_csv(path, names, rows, freq, joint):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        G = joint.G
        head = list(names) + (["count"] if freq is not None else [])
        writer.writerow(head + [f"post_{g + 1}" for g in range(G)] + ["assignment"])
        for k, row in enumerate(rows):
            post = joint.lookup(row)
            record = [int(c) for c in row]
            if freq is not None:
                record.append(int(freq[k]))
            record += [format(p, ".10f") for p in post]
            record.append(int(post.argmax()) + 1)
            writer.writerow(record)


def _model_payload(fit, tables):
    params = fit.params
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "parameters": params_to_dict(params),
        "moments": moments_to_dict(derive_moments(params)),
        "first_second_order_correlation": first_second_order_correlation(params).tolist(),
        "pll": fit.pll,
        "trace": fit.trace.tolist(),
        "iterations": fit.iterations,
        "converged": fit.converged,
        "start_index": fit.start_index,
        "N": tables.N,
    }


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args):
    started = time.time()
    rows, freq, names, schema = _load_data(args.data, args.freq, args.categories)
    tables = build_pairwise_tables(rows, freq, schema)
    config = _fit_config(args, default_starts=100)
    try:
        fit = multi_start_fit(tables, args.g, args.q, config)
    except MultiStartError as exc:
        print(f"fit: {exc}", file=sys.stderr)
        return 2
    joint = ipf_joint_posterior(fit.params, tables)
    outputs = {
        "model": f"{args.out}.model.json",
        "posteriors": f"{args.out}.posteriors.csv",
    }
    _write_json(outputs["model"], _model_payload(fit, tables))
    _write_posteriors_csv(outputs["posteriors"], names, rows, freq, joint)
    _write_manifest(args.out, "fit", args, outputs, started)
    print(
        f"fit: G={args.g} Q={args.q} pll={fit.pll:.2f} "
        f"weights={np.round(fit.params.weights, 4).tolist()} "
        f"converged={fit.converged} ipf_discrepancy={joint.ipf_discrepancy:.2e}"
    )
    return 0 if fit.converged else 2


def cmd_select(args):
    started = time.time()
    rows, freq, names, schema = _load_data(args.data, args.freq, args.categories)
    tables = build_pairwise_tables(rows, freq, schema)
    config = _fit_config(args, default_starts=100)
    try:
        report = grid_select(tables, args.g_grid, args.q_grid, config)
    except SelectionError as exc:
        print(f"select: {exc}", file=sys.stderr)
        return 2
    outputs = {"selection": f"{args.out}.selection.json"}
    _write_json(outputs["selection"], report.to_dict())
    _write_manifest(args.out, "select", args, outputs, started)
    print(report.format_table())
    print(f"chosen: G={report.chosen[0]} Q={report.chosen[1]}")
    return 0


def cmd_simulate(args):
    started = time.time()
    spec = scenario_preset(args.scenario)
    models = []
    for token in args.models.split(","):
        g_str, q_str = token.strip().split(":")
        q = spec.P if q_str.lower() in ("p", "full") else int(q_str)
        models.append((int(g_str), q))
    config = _fit_config(args, default_starts=1)
    table = replicate_study(spec, args.n, args.replicates, models, config)
    if not table.rows:
        print("simulate: every replicate failed", file=sys.stderr)
        return 2
    outputs = {"study": f"{args.out}.study.csv"}
    table.to_csv(outputs["study"])
    _write_manifest(args.out, "simulate", args, outputs, started)
    for row in table.rows:
        print(
            f"{row['model']:<18} {row['metric']:<5} mean={row['mean']:.4f} "
            f"median={row['q50']:.4f} sd={row['sd']:.4f}"
        )
    if table.failures:
        print(f"{len(table.failures)} replicate fits failed (study continued)")
    return 0


def cmd_classify(args):
    started = time.time()
    if not os.path.exists(args.model):
        print(f"classify: model file {args.model} not found", file=sys.stderr)
        return 1
    with open(args.model) as fh:
        payload = json.load(fh)
    params = params_from_dict(payload["parameters"])
    rows, freq, names, schema = _load_data(args.data, args.freq, args.categories)
    if schema.C != params.schema.C:
        # observed maxima may undershoot the model's categories
        try:
            schema = OrdinalSchema(params.schema.C)
            tables = build_pairwise_tables(rows, freq, schema)
        except (ValueError, IngestionError) as exc:
            print(f"classify: data does not match model schema: {exc}", file=sys.stderr)
            return 1
    else:
        tables = build_pairwise_tables(rows, freq, schema)
    joint = ipf_joint_posterior(params, tables)
    outputs = {"assignments": f"{args.out}.assignments.csv"}
    _write_posteriors_csv(outputs["assignments"], names, rows, freq, joint)
    _write_manifest(args.out, "classify", args, outputs, started)
    print(
        f"classify: {rows.shape[0]} rows, ipf_discrepancy={joint.ipf_discrepancy:.2e} "
        f"(sweeps {joint.sweeps})"
    )
    return 0


def _load_eval_file(path):
    header, raw = _read_table(path)
    post_cols = [k for k, h in enumerate(header) if h.startswith("post_")]
    assign_col = header.index("assignment") if "assignment" in header else None
    if assign_col is None and not post_cols:
        raise UsageError(f"{path}: need an 'assignment' column or post_* columns")
    posts, labels = [], []
    for row in raw:
        if post_cols:
            posts.append([float(row[k]) for k in post_cols])
        if assign_col is not None:
            labels.append(int(row[assign_col]) - 1)
    if posts:
        post = np.asarray(posts)
        if not labels:
            labels = list(post.argmax(axis=1))
    else:
        post = None
    labels = np.asarray(labels, dtype=int)
    return labels, post


def cmd_evaluate(args):
    labels_t, post_t = _load_eval_file(args.truth)
    labels_e, post_e = _load_eval_file(args.estimate)
    if labels_t.size != labels_e.size:
        print("evaluate: truth and estimate differ in length", file=sys.stderr)
        return 1
    G = int(max(labels_t.max(), labels_e.max())) + 1
    value = ari(
        PartitionMatrix.from_labels(labels_t, G), PartitionMatrix.from_labels(labels_e, G)
    )
    if post_t is None:
        post_t = PartitionMatrix.from_labels(labels_t, G).matrix.astype(float)
    if post_e is None:
        post_e = PartitionMatrix.from_labels(labels_e, G).matrix.astype(float)
    width = max(post_t.shape[1], post_e.shape[1])
    post_t = np.pad(post_t, ((0, 0), (0, width - post_t.shape[1])))
    post_e = np.pad(post_e, ((0, 0), (0, width - post_e.shape[1])))
    loss = loss_measure(post_t, post_e)
    print(f"ARI {value:.6f}")
    print(f"L {loss:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _int_list(text):
    return [int(tok) for tok in text.split(",") if tok.strip()]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ordscr",
        description="Clustering and dimension reduction of ordinal data "
        "via pairwise likelihood",
    )
    parser.add_argument("--version", action="version", version=f"ordscr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_data=True):
        if needs_data:
            p.add_argument("--data", required=True, help="input CSV")
            p.add_argument("--freq", default=None, help="name of the count column")
            p.add_argument("--categories", type=_int_list, default=None,
                           help="comma list of category counts per variable")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--starts", type=int, default=None, help="number of EM starts")
        p.add_argument("--tol", type=float, default=1e-2, help="EM stopping tolerance")
        p.add_argument("--max-iters", type=int, default=500)
        p.add_argument("--threads", type=int, default=None,
                       help="worker pool size (default: ORDSCR_THREADS or logical cores)")
        p.add_argument("--out", required=True, help="output path prefix")

    p = sub.add_parser("fit", help="fit one (G, Q) model")
    add_common(p)
    p.add_argument("--g", type=int, required=True)
    p.add_argument("--q", type=int, required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="grid search over (G, Q) by C-BIC")
    add_common(p)
    p.add_argument("--g-grid", type=_int_list, required=True)
    p.add_argument("--q-grid", type=_int_list, required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", help="replication study on a scenario preset")
    add_common(p, needs_data=False)
    p.add_argument("--scenario", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--replicates", type=int, required=True)
    p.add_argument("--models", default="2:2,2:full",
                   help="comma list of G:Q fits; Q='full' is the unrestricted baseline")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("classify", help="joint posteriors and assignments from a model")
    add_common(p)
    p.add_argument("--model", required=True, help="model JSON from fit")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="ARI and loss between two labelings")
    p.add_argument("--truth", required=True)
    p.add_argument("--estimate", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.func(args)
    except (UsageError, IngestionError, ValueError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        code = 1
    except FileNotFoundError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        code = 1
    return code


if __name__ == "__main__":
    sys.exit(main())
