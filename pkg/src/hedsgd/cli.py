"""Experiment runner: ``hedsgd run|validate <config>`` and ``hedsgd presets``.

A config is a flat ``key = value`` file (an optional ``[experiment]`` header is
accepted).  Deterministic tables go to CSV files; wall-clock timings are kept
in their own ``timings.csv`` so reruns can be diffed byte for byte.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bfv, mbfv
from .codec import FixedPointConfig, quantize_weights
from .dpsgd import (
    TIMING_PHASES,
    EncryptedVector,
    PhaseTimer,
    TrainConfig,
    TrainingAbort,
    decrypt_vector,
    encrypt_vector,
    encrypted_weighted_avg,
    run_training,
    units_per_iteration,
)
from .netsim import diff_counters
from .ring import DEFAULT_NOISE, make_rng

SCENARIOS = ("unit-bench", "train-compare", "comm-table")
OUTPUT_ROOT_ENV = "HEDSGD_OUTPUT_ROOT"
SECTION = "experiment"
BENCH_PRESETS = ("n2048", "n4096")
BENCH_SLOTS = 1024

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_IO = 0, 2, 3, 4

_REQUIRED = object()


def _parse_int(raw):
    return int(raw.strip())


def _parse_float(raw):
    v = float(raw.strip())
    if not math.isfinite(v):
        raise ValueError("not finite")
    return v


def _parse_str(raw):
    return raw.strip()


# name -> (parser, type label, default, check returning an error message or None)
FIELDS = {
    "scenario": (_parse_str, "string", _REQUIRED,
                 lambda v: None if v in SCENARIOS else f"must be one of {', '.join(SCENARIOS)}"),
    "seed": (_parse_int, "integer", _REQUIRED, lambda v: None if v >= 0 else "must be >= 0"),
    "users": (_parse_int, "integer", 10, lambda v: None if v >= 2 else "must be >= 2"),
    "connection_rate": (_parse_float, "number", 0.5,
                        lambda v: None if 0 <= v <= 1 else "must lie in [0, 1]"),
    "key_scope": (_parse_str, "string", "neighborhood",
                  lambda v: None if v in ("neighborhood", "global") else "must be 'neighborhood' or 'global'"),
    "ring": (_parse_str, "string", "fx64",
             lambda v: None if v in bfv.PRESETS else f"must be a preset: {', '.join(bfv.PRESETS)}"),
    "frac_bits": (_parse_int, "integer", 13, lambda v: None if v >= 13 else "must be >= 13"),
    "weight_bits": (_parse_int, "integer", 16, lambda v: None if 1 <= v <= 30 else "must lie in [1, 30]"),
    "eta": (_parse_float, "number", 0.5, lambda v: None if v > 0 else "must be > 0"),
    "iterations": (_parse_int, "integer", 20, lambda v: None if v >= 0 else "must be >= 0"),
    "batch": (_parse_int, "integer", 16, lambda v: None if v >= 1 else "must be >= 1"),
    "repeat": (_parse_int, "integer", 1, lambda v: None if v >= 1 else "must be >= 1"),
    "output_dir": (_parse_str, "path", None, lambda v: None if v else "must not be empty"),
}


@dataclass(frozen=True)
class ExperimentSpec:
    scenario: str
    run: TrainConfig
    output_dir: Path | None = None
    repeat: int = 1
    defaults_used: tuple = ()

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.repeat < 1:
            raise ValueError("repeat must be >= 1")

    def echo(self) -> str:
        """One ``key = value`` line per field, defaults marked."""
        values = self.values()
        lines = []
        for name in FIELDS:
            mark = "  # default" if name in self.defaults_used else ""
            lines.append(f"{name} = {values[name]}{mark}")
        return "\n".join(lines) + "\n"

    def values(self) -> dict:
        r = self.run
        return {
            "scenario": self.scenario, "seed": r.seed, "users": r.users, "connection_rate": r.connection_rate,
            "key_scope": r.key_scope, "ring": r.ring, "frac_bits": r.frac_bits, "weight_bits": r.weight_bits,
            "eta": r.eta, "iterations": r.iterations, "batch": r.batch, "repeat": self.repeat,
            "output_dir": "" if self.output_dir is None else str(self.output_dir),
        }


@dataclass
class Report:
    spec: ExperimentSpec
    tables: dict = field(default_factory=dict)       # name -> (header, rows); deterministic
    timings: list = field(default_factory=list)      # rows of {label, repeat, phases..., total}
    meter_csv: str | None = None
    accuracy_series: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.spec.run.seed

    def check_timings(self, tolerance: float = 0.10) -> list:
        """Rows whose phase times are negative or do not cover the total within tolerance."""
        bad = []
        for row in self.timings:
            phases = [row[p] for p in TIMING_PHASES]
            if min(phases + [row["total"]]) < 0:
                bad.append(row)
            elif row["total"] > 0 and abs(sum(phases) - row["total"]) > tolerance * row["total"]:
                bad.append(row)
        return bad


def _line_index(text: str) -> dict:
    """Key -> 1-based line number, for error messages."""
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;[" or ("=" not in s and ":" not in s):
            continue
        key = s.replace(":", "=", 1).split("=", 1)[0].strip().lower()
        out.setdefault(key, no)
    return out


def validate_config(text: str):
    """Parse a config.  Returns (spec, []) or (None, errors) with every error found."""
    body = text
    offset = 0
    first = next((l.strip() for l in text.splitlines() if l.strip() and l.strip()[0] not in "#;"), "")
    if not first.startswith("["):
        body = f"[{SECTION}]\n" + text
        offset = 1
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(body)
    except configparser.ParsingError as exc:
        return None, [f"line {no - offset}: cannot parse {line!r}" for no, line in exc.errors]
    except configparser.DuplicateOptionError as exc:
        return None, [f"line {exc.lineno - offset}: field '{exc.option}' given twice"]
    except configparser.Error as exc:
        return None, [f"config parse failure: {exc}"]

    errors = []
    extra = [s for s in parser.sections() if s != SECTION]
    if extra:
        errors.append(f"unknown section(s) {extra}; only [{SECTION}] is allowed")
    raw = dict(parser[SECTION]) if parser.has_section(SECTION) else {}
    lines = _line_index(text)

    def where(name):
        return f"line {lines[name]}: " if name in lines else ""

    for name in raw:
        if name not in FIELDS:
            errors.append(f"{where(name)}unknown field '{name}'")
    values, defaults = {}, []
    for name, (parse, label, default, check) in FIELDS.items():
        if name not in raw:
            if default is _REQUIRED:
                errors.append(f"field '{name}': required, no default")
            else:
                values[name] = default
                defaults.append(name)
            continue
        try:
            v = parse(raw[name])
        except ValueError:
            errors.append(f"{where(name)}field '{name}': expected {label}, got {raw[name]!r}")
            continue
        msg = check(v)
        if msg:
            errors.append(f"{where(name)}field '{name}' = {raw[name].strip()}: {msg}")
            continue
        values[name] = v

    # cross-field constraints, only once the fields themselves parsed
    if values.get("key_scope") == "global" and "connection_rate" in values and values["connection_rate"] != 1:
        errors.append("field 'key_scope' = global: needs a complete graph, i.e. connection_rate = 1")
    if all(k in values for k in ("ring", "frac_bits", "weight_bits")):
        t = bfv.preset(values["ring"]).t
        if t <= 1 << (values["frac_bits"] + values["weight_bits"] + 1):
            errors.append(
                f"field 'ring' = {values['ring']}: plaintext modulus t={t} leaves no room for "
                f"2^(frac_bits + weight_bits + 1) = 2^{values['frac_bits'] + values['weight_bits'] + 1}"
            )
    if values.get("scenario") == "comm-table" and values.get("iterations") == 0:
        errors.append("field 'iterations' = 0: comm-table needs at least one iteration to meter")
    if errors:
        return None, errors

    run = TrainConfig(
        users=values["users"], connection_rate=values["connection_rate"], key_scope=values["key_scope"],
        ring=values["ring"], frac_bits=values["frac_bits"], weight_bits=values["weight_bits"], eta=values["eta"],
        iterations=values["iterations"], batch=values["batch"], seed=values["seed"],
    )
    out = Path(values["output_dir"]) if values["output_dir"] else None
    return ExperimentSpec(values["scenario"], run, out, values["repeat"], tuple(defaults)), []


def resolve_output_dir(spec: ExperimentSpec) -> Path:
    if spec.output_dir is not None:
        return spec.output_dir
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{spec.scenario}-seed{spec.run.seed}"


# scenarios


def _timing_row(label: str, repeat: int, timings: dict) -> dict:
    row = {"label": label, "repeat": repeat}
    row.update({p: float(timings.get(p, 0.0)) for p in TIMING_PHASES})
    row["total"] = float(timings["total"])
    return row


def _comm_table(spec: ExperimentSpec) -> Report:
    report = Report(spec)
    for r in range(spec.repeat):
        res = run_training(spec.run, "private")
        report.timings.append(_timing_row("private", r, res.timings))
        if r:
            continue
        topo = res.topology
        units = units_per_iteration(res, 1)
        rows = []
        for u in range(topo.n_users):
            c = diff_counters(res.meter_snapshots[1], res.meter_snapshots[0], u)
            rows.append([u, topo.degree(u), units[u], c.messages_sent, c.bytes_sent])
        report.tables["comm_table"] = (["user", "degree", "units", "messages", "bytes"], rows)
        report.meter_csv = res.meter.to_csv()
        report.accuracy_series["private"] = res.accuracies
        deg = np.array([row[1] for row in rows], dtype=float)
        un = np.array([row[2] for row in rows], dtype=float)
        if np.ptp(deg) > 0:
            slope, intercept = np.polyfit(deg, un, 1)
            resid = un - (slope * deg + intercept)
            r2 = 1.0 - resid.var() / un.var()
            report.notes.append(f"units per iteration = {slope:.4f} * degree + {intercept:.4f} (R^2 = {r2:.6f})")
        else:
            report.notes.append(f"all users have degree {int(deg[0])}; {int(un[0])} units per iteration")
    return report


def _train_compare(spec: ExperimentSpec) -> Report:
    report = Report(spec)
    for r in range(spec.repeat):
        plain = run_training(spec.run, "plaintext")
        priv = run_training(spec.run, "private", topology=plain.topology)
        report.timings.append(_timing_row("plaintext", r, plain.timings))
        report.timings.append(_timing_row("private", r, priv.timings))
        if r:
            continue
        rows = [
            [k, f"{plain.losses[k]:.10g}", f"{priv.losses[k]:.10g}", f"{plain.accuracies[k]:.6f}", f"{priv.accuracies[k]:.6f}"]
            for k in range(len(plain.losses))
        ]
        report.tables["train_compare"] = (
            ["iteration", "plaintext_loss", "private_loss", "plaintext_accuracy", "private_accuracy"], rows)
        report.meter_csv = priv.meter.to_csv()
        report.accuracy_series = {"plaintext": plain.accuracies, "private": priv.accuracies}
        div = float(np.abs(priv.final_weights - plain.final_weights).max())
        topo = plain.topology
        bound = spec.run.iterations * (max(topo.degree(i) for i in range(topo.n_users)) + 1) * 2.0**-spec.run.frac_bits
        report.notes.append(f"final accuracy: plaintext {plain.accuracy:.4f}, private {priv.accuracy:.4f}")
        report.notes.append(f"max parameter divergence {div:.3e} (bound {bound:.3e})")
        report.notes.append(f"bootstraps triggered: {priv.bootstraps}")
    return report


def bench_trial(preset_name: str, parties: int, seed: int, slots: int = BENCH_SLOTS, noise=DEFAULT_NOISE):
    """One user's per-iteration crypto work with |U| = parties; returns (timings, facts)."""
    P = bfv.preset(preset_name)
    cfg = FixedPointConfig(P.t, P.n)
    rng = make_rng([seed, 5, P.n])
    timer = PhaseTimer()
    start = time.perf_counter()
    with timer("initialization"):
        shares = [mbfv.mbfv_seckeygen(k, P, rng) for k in range(parties)]
        crp = mbfv.crp_from_seed(b"bench-pk" + seed.to_bytes(8, "little"), P)
        pk = mbfv.mbfv_pubkeygen_combine([mbfv.mbfv_pubkeygen_share(s, crp, rng, noise) for s in shares], crp)
        sk_me = bfv.seckeygen(P, rng)
        pk_me = bfv.pubkeygen(sk_me, rng, noise)
    # stay inside the no-wrap range of the codec for this t
    values = rng.uniform(-0.5, 0.5, size=(parties, slots)) * cfg.max_abs_value
    with timer("encryption"):
        evs = [encrypt_vector(pk, v, cfg, rng, noise) for v in values]
    weights = quantize_weights(np.full(parties, 1.0 / parties), cfg.weight_bits)
    with timer("evaluation"):
        agg = encrypted_weighted_avg(evs[0], evs[1:], weights)
        ct = agg.cts[0]
        conv = [mbfv.mbfv_convert_share(s, ct.c1, pk_me, rng, noise) for s in shares]
        ct_me = mbfv.mbfv_convert_combine(ct, conv, noise=noise)
    with timer("decryption"):
        out = decrypt_vector(sk_me, EncryptedVector((ct_me,), agg.length, agg.scale_exponent), cfg)
    timings = timer.as_dict()
    timings["total"] = time.perf_counter() - start
    expected = (weights @ np.rint(values * 2.0**cfg.frac_bits)) / 2.0 ** (cfg.frac_bits + cfg.weight_bits)
    facts = {
        "preset": preset_name, "n": P.n, "q": P.q, "t": P.t, "parties": parties, "slots": slots,
        "ciphertext_bytes": len(ct_me.to_bytes()),
        "max_abs_error": float(np.abs(out - expected).max()),
        "exact": bool(np.array_equal(out, expected)),
    }
    return timings, facts


def _unit_bench(spec: ExperimentSpec) -> Report:
    report = Report(spec)
    parties = spec.run.users
    header = ["preset", "n", "q", "t", "parties", "slots", "ciphertext_bytes", "exact"]
    rows = []
    for r in range(spec.repeat):
        for name in BENCH_PRESETS:
            timings, facts = bench_trial(name, parties, spec.run.seed)
            report.timings.append(_timing_row(name, r, timings))
            if r == 0:
                rows.append([facts[h] for h in header])
    report.tables["unit_bench"] = (header, rows)
    mean = {name: {p: np.mean([row[p] for row in report.timings if row["label"] == name]) for p in TIMING_PHASES}
            for name in BENCH_PRESETS}
    for p in ("encryption", "decryption"):
        order = "slower" if mean["n4096"][p] > mean["n2048"][p] else "NOT slower"
        report.notes.append(f"{p}: n4096 {order} than n2048 ({mean['n4096'][p]:.4f}s vs {mean['n2048'][p]:.4f}s)")
    return report


RUNNERS = {"unit-bench": _unit_bench, "train-compare": _train_compare, "comm-table": _comm_table}


def run(spec: ExperimentSpec) -> Report:
    return RUNNERS[spec.scenario](spec)


# emission


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def timings_csv(report: Report) -> str:
    header = ["label", "repeat", *TIMING_PHASES, "total"]
    return _csv_text(header, [[row[h] if isinstance(row[h], (str, int)) else f"{row[h]:.6f}" for h in header]
                              for row in report.timings])


def summary_text(report: Report) -> str:
    lines = [f"scenario: {report.spec.scenario}", f"seed: {report.seed}", "", "config:", report.spec.echo().rstrip(), ""]
    lines += report.notes
    if report.timings:
        lines += ["", "wall clock (s):"]
        for row in report.timings:
            parts = " ".join(f"{p}={row[p]:.4f}" for p in TIMING_PHASES)
            lines.append(f"  {row['label']} #{row['repeat']}: {parts} total={row['total']:.4f}")
    for name, series in report.accuracy_series.items():
        if series:
            lines.append(f"{name} accuracy: first {series[0]:.4f}, last {series[-1]:.4f}")
    return "\n".join(lines) + "\n"


def write_report(report: Report, out_dir: Path) -> list:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (header, rows) in report.tables.items():
        path = out_dir / f"{name}.csv"
        path.write_text(_csv_text(header, rows))
        written.append(path)
    if report.meter_csv is not None:
        path = out_dir / "meter.csv"
        path.write_text(report.meter_csv)
        written.append(path)
    path = out_dir / "timings.csv"
    path.write_text(timings_csv(report))
    written.append(path)
    path = out_dir / "summary.txt"
    path.write_text(summary_text(report))
    written.append(path)
    return written


# command line


def _load(path: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        return None, [f"cannot read {path}: {exc.strerror}"]
    return validate_config(text)


def cmd_validate(args) -> int:
    spec, errors = _load(args.config)
    if errors:
        for e in errors:
            print(f"{args.config}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(spec.echo(), end="")
    return EXIT_OK


def cmd_run(args) -> int:
    spec, errors = _load(args.config)
    if errors:
        for e in errors:
            print(f"{args.config}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = resolve_output_dir(spec)
    try:
        report = run(spec)
    except TrainingAbort as exc:
        print(f"protocol abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    try:
        written = write_report(report, out_dir)
    except OSError as exc:
        print(f"cannot write results to {out_dir}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    for p in written:
        print(p)
    return EXIT_OK


def cmd_presets(args) -> int:
    for name, P in bfv.PRESETS.items():
        print(f"{name:8s} n={P.n:<5d} q={P.q} t={P.t}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hedsgd", description="Encrypted decentralized SGD experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run the experiment described by a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("validate", help="check a config and echo it with defaults filled in")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)
    p = sub.add_parser("presets", help="list ring presets")
    p.set_defaults(func=cmd_presets)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
