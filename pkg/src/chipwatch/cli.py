"""``chipwatch`` command line.

Exit codes: 0 success, 1 a verification or audit verdict failed, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import attacks as attack_mod
from .chip import Chip, RunPlacement, WeightShard, advance, dump_log, load_log
from .detection import (
    H100_FLOPS_PER_DAY,
    TABLE1_CHIP_COUNTS,
    DomainError,
    InfeasibleError,
    PolicyParams,
    display_count,
    display_sig3,
    samples_per_period,
    table1,
)
from .fleet import ProverStrategy, SimConfig, closed_form, simulate, sweep
from .inspection import ConfigurationError, verifier_visible, scan_confidentiality
from .pott import HashedTranscript, ProtocolError, VerificationConfig, commit, deterministic_epsilon, verify
from .registry import CustodyEvent, CustodyViolation, Directory, SampleTooLarge, sample_for_inspection
from .scenario import audit_scenario, load_scenario
from .training import Hyperparams, load_transcript, save_transcript, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _emit(rows: list[dict], fmt: str, out) -> None:
    if fmt == "json":
        out.write(json.dumps(rows, indent=2) + "\n")
    elif not rows:
        return
    elif fmt == "csv":
        w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    else:
        if len(rows) == 1:
            width = max(len(k) for k in rows[0])
            for k, v in rows[0].items():
                out.write(f"{k:<{width}}  {v}\n")
            return
        cols = list(rows[0])
        cells = [[str(r[c]) for c in cols] for r in rows]
        widths = [max(len(c), *(len(r[i]) for r in cells)) for i, c in enumerate(cols)]
        out.write("  ".join(c.rjust(w) for c, w in zip(cols, widths)) + "\n")
        for r in cells:
            out.write("  ".join(v.rjust(w) for v, w in zip(r, widths)) + "\n")


def _policy(args) -> PolicyParams:
    return PolicyParams(
        threshold_flops=args.flops,
        chip_count=args.chips,
        chip_flops_per_day=args.chip_flops,
        snapshot_rate=args.rate,
        target_prob=args.prob,
        monitoring_days=args.monitor_days,
        training_days=args.train_days,
    )


def _add_policy_args(p, flops_required=True):
    p.add_argument("--flops", type=float, required=flops_required, help="run size H in FLOPs")
    p.add_argument("--chips", type=float, required=flops_required, help="chips owned by the Prover (C)")
    p.add_argument("--chip-flops", type=float, default=H100_FLOPS_PER_DAY, help="FLOPs per chip-day")
    p.add_argument("--rate", type=float, default=0.1, help="snapshots per chip-day")
    p.add_argument("--prob", type=float, default=0.9, help="target detection probability")
    p.add_argument("--monitor-days", type=float, default=30.0)
    p.add_argument("--train-days", type=float, default=365.0)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_plan(args, out) -> int:
    params = _policy(args)
    plan = samples_per_period(params)
    _emit(
        [
            {
                "chips_required": params.chips_required,
                "fleet_fraction": params.fleet_fraction,
                "p_w": plan.p_w,
                "hit_prob": plan.hit_prob,
                "s_per_period": plan.s_per_period,
                "s_per_period_int": plan.s_per_period_int,
                "annual_samples": plan.annual_samples,
                "n_periods": plan.n_periods,
            }
        ],
        args.format,
        out,
    )
    return EXIT_OK


def table1_rows(raw: bool = False) -> list[dict]:
    rows = []
    for r in table1():
        row = {
            "model": r.model,
            "H": r.flops if raw else display_sig3(r.flops),
            "H100_days": r.chip_days if raw else display_sig3(r.chip_days),
            "chips_1yr": r.chips_1yr if raw else display_count(r.chips_1yr),
        }
        for count, annual in zip(TABLE1_CHIP_COUNTS, r.annual):
            row[f"C_{int(count)}"] = annual if raw else display_count(annual)
        rows.append(row)
    return rows


def cmd_table1(args, out) -> int:
    _emit(table1_rows(raw=args.format == "json"), args.format, out)
    return EXIT_OK


def _strategy(args) -> ProverStrategy:
    if args.strategy == "honest":
        return ProverStrategy.honest()
    if args.strategy == "stretch":
        return ProverStrategy.stretched(args.factor)
    if args.strategy == "spread":
        if args.days is None:
            raise UsageError("--days is required for the spread strategy")
        return ProverStrategy.spread(args.days)
    if not args.shares or not args.fleet_shares:
        raise UsageError("--shares and --fleet-shares are required for collusion")
    return ProverStrategy.collusion(args.shares, args.fleet_shares)


def _sim_config(args) -> SimConfig:
    return SimConfig(window_mode=args.window_mode, phase_two_only=not args.any_snapshot)


def cmd_simulate(args, out) -> int:
    params = _policy(args)
    strategy = _strategy(args)
    plan = samples_per_period(params)
    outcome = simulate(params, strategy, plan, args.trials, args.seed, _sim_config(args), args.threads)
    row = {"strategy": strategy.kind, **outcome.to_record(), "closed_form": closed_form(params, strategy, plan)}
    _emit([row], args.format, out)
    return EXIT_OK


def cmd_sweep(args, out) -> int:
    """Stretch-factor sweep over fleet fractions b = (minimum chips)/C."""
    rows = []
    for b in args.fractions:
        if not 0 < b < 1:
            raise UsageError("fractions must lie in (0, 1)")
        params = PolicyParams(
            threshold_flops=b * args.fleet * args.chip_flops * args.train_days,
            chip_count=args.fleet,
            chip_flops_per_day=args.chip_flops,
            snapshot_rate=args.rate,
            target_prob=args.prob,
            monitoring_days=args.monitor_days,
            training_days=args.train_days,
        )
        strategies = [ProverStrategy.stretched(k) for k in args.stretch]
        table = sweep([params], strategies, args.trials, seed=args.seed, config=_sim_config(args), threads=args.threads)
        for row in table.rows:
            rec = {"b": b, "k": row.strategy.factor}
            if row.outcome is None:
                rec.update(closed_form=None, empirical_p=None, ci_halfwidth=None, ratio=None)
            else:
                rec.update(
                    closed_form=row.closed_form,
                    empirical_p=row.outcome.empirical_p,
                    ci_halfwidth=row.outcome.ci_halfwidth,
                    ratio=table.ratio(row),
                )
            rows.append(rec)
    _emit(rows, args.format, out)
    return EXIT_OK


def _meta_from_args(args) -> Hyperparams:
    if args.meta:
        meta = Hyperparams.from_dict(json.loads(Path(args.meta).read_text()))
        return meta if args.seed is None else meta.replace(seed=args.seed)
    return Hyperparams(
        seed=0 if args.seed is None else args.seed,
        layer_sizes=tuple(args.layers),
        learning_rate=args.lr,
        batch_size=args.batch,
        total_steps=args.steps,
        checkpoint_interval=args.interval,
        loss_id=args.loss,
        data_gen_id=args.data,
        optimizer=args.optimizer,
        momentum=args.momentum,
    )


def write_target(shard: WeightShard, path: Path) -> None:
    path.write_text(
        json.dumps(
            {
                "shard_index": shard.shard_index,
                "slice_range": list(shard.slice_range),
                "values": shard.values.astype("<f4").tobytes().hex(),
            }
        )
        + "\n"
    )


def read_target(path: Path) -> WeightShard:
    rec = json.loads(Path(path).read_text())
    values = np.frombuffer(bytes.fromhex(rec["values"]), dtype="<f4").copy()
    return WeightShard(values, int(rec["shard_index"]), tuple(rec["slice_range"]))


def write_bundle(transcript, directory: Path, days: float, rate: float, seed: int) -> None:
    """Transcript plus its commitment, the log of one chip that hosted the
    whole run over ``days`` days, and the shard behind the last log entry."""
    save_transcript(transcript, directory / "transcript")
    hashed = commit(transcript)
    (directory / "commitment.json").write_text(hashed.dumps())
    chip = Chip("bundle-chip", "prover", 1.0, rate)
    placement = RunPlacement(
        0.0,
        days,
        transcript.meta.total_steps,
        lambda step: WeightShard.full(transcript.trajectory[step]),
        hashed.precommitment,
    )
    advance(chip, days, np.random.default_rng(seed), placement)
    if not chip.log:
        raise UsageError("the chip logged no snapshot; raise --rate or --days")
    (directory / "log.jsonl").write_text(dump_log(chip.log))
    write_target(WeightShard.full(transcript.trajectory[chip.log[-1].step]), directory / "target.json")


def cmd_train(args, out) -> int:
    meta = _meta_from_args(args)
    t = train(meta, noise_sigma=args.noise_sigma, noise_seed=args.noise_seed, keep_trajectory=args.bundle)
    directory = Path(args.out)
    if args.bundle:
        directory.mkdir(parents=True, exist_ok=True)
        write_bundle(t, directory, args.days, args.rate, args.chip_seed)
    else:
        save_transcript(t, directory)
    _emit([{"out": str(directory), "steps": meta.total_steps, "checkpoints": meta.n_checkpoints}], args.format, out)
    return EXIT_OK


def cmd_commit(args, out) -> int:
    t = load_transcript(args.transcript)
    hashed = commit(t, with_distances=not args.no_distances)
    text = hashed.dumps()
    if args.out:
        Path(args.out).write_text(text)
        _emit([{"digest": hashed.digest().hex(), "out": args.out}], args.format, out)
    else:
        out.write(text)
    return EXIT_OK


def _bundle_paths(args):
    root = Path(args.bundle) if args.bundle else None

    def pick(explicit, name):
        if explicit:
            return Path(explicit)
        if root is None:
            raise UsageError(f"give a bundle directory or --{name}")
        return root / {"transcript": "transcript", "commitment": "commitment.json", "log": "log.jsonl", "target": "target.json"}[name]

    return (
        pick(args.transcript, "transcript"),
        pick(args.commitment, "commitment"),
        pick(args.log, "log"),
        pick(args.target, "target"),
    )


def _verification_config(args, n_params: int) -> VerificationConfig:
    segments = args.segments
    if segments is not None and segments >= 1 and float(segments).is_integer():
        segments = int(segments)
    return VerificationConfig(
        epsilon=args.epsilon if args.epsilon else deterministic_epsilon(n_params),
        segments_to_check=0.1 if segments is None else segments,
        selection=args.selection,
        check_precommitment=args.precommit,
        seed=args.seed,
    )


def _load_bundle(args):
    tpath, cpath, lpath, gpath = _bundle_paths(args)
    try:
        transcript = load_transcript(tpath)
        hashed = HashedTranscript.loads(cpath.read_text())
        log = load_log(lpath.read_text())
        target = read_target(gpath)
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot load bundle: {exc}") from exc
    return transcript, hashed, log, target


def cmd_verify(args, out) -> int:
    transcript, hashed, log, target = _load_bundle(args)
    config = _verification_config(args, transcript.meta.n_params)
    report = verify(transcript, hashed, target, log, config)
    _emit([report.to_record()] if args.format == "json" else [
        {
            "verdict": report.verdict,
            "failed_checks": ",".join(report.failed_ids) or "-",
            "segments_checked": len(report.segments_checked),
            "cost_J": report.cost_J,
        }
    ], args.format, out)
    return EXIT_OK if report.accepted else EXIT_FAIL


def cmd_attack(args, out) -> int:
    transcript, _, log, target = _load_bundle(args)
    config = _verification_config(args, transcript.meta.n_params)
    names = args.attacks or list(attack_mod.ATTACKS)
    unknown = set(names) - set(attack_mod.ATTACKS)
    if unknown:
        raise UsageError(f"unknown attacks: {sorted(unknown)}")
    suite = attack_mod.spoof_suite(transcript, log, target, config, names)
    rec = suite.to_record()
    if args.format == "json":
        _emit([rec], "json", out)
    else:
        _emit(
            [
                {"attack": a["name"], "verdict": a["verdict"], "failed_checks": ",".join(a["failed_checks"]) or "-", "d1": a["d1"], "d2": a["d2"]}
                for a in rec["attacks"]
            ],
            args.format,
            out,
        )
    return EXIT_OK if suite.rejected == suite.total else EXIT_FAIL


def _load_directory(path: Path) -> Directory:
    if not path.exists():
        return Directory()
    return Directory.loads(path.read_text())


def cmd_registry(args, out) -> int:
    path = Path(args.directory)
    directory = _load_directory(path)
    if args.action == "record":
        event = CustodyEvent(
            args.serial, args.holder, args.event, args.day, args.sender, args.receiver, args.justification
        )
        directory.record_event(event)
        with path.open("a") as fh:
            fh.write(json.dumps(event.to_record()) + "\n")
        _emit([{"recorded": args.event, "serial": args.serial, "events": len(directory)}], args.format, out)
    elif args.action == "holdings":
        _emit([{"serial": s} for s in directory.holdings(args.owner)], args.format, out)
    else:
        picks = sample_for_inspection(directory, args.owner, args.count, np.random.default_rng(args.seed))
        _emit([{"serial": s} for s in picks], args.format, out)
    return EXIT_OK


def cmd_audit(args, out) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = type(scenario).from_dict({**scenario.to_dict(), "seed": args.seed})
    verdicts = []
    records = []
    leaks = 0
    for r in range(args.first, args.first + args.reps):
        report = audit_scenario(scenario, r)
        verdicts.append(report.overall)
        leaks += sum(len(scan_confidentiality(rec)) for rec in verifier_visible(report))
        records.append(report.to_record())
    if args.reps == 1 and args.format == "json":
        _emit([records[0]], "json", out)
    else:
        counts = {v: verdicts.count(v) for v in ("compliant", "violation", "non_cooperation")}
        _emit([{"scenario": scenario.name, "repetitions": args.reps, **counts, "confidentiality_leaks": leaks}], args.format, out)
    return EXIT_OK if all(v == "compliant" for v in verdicts) else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chipwatch", description="Chip-inspection and training-transcript verification toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("text", "csv", "json"), default="text")
    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int, default=0)
    threaded = argparse.ArgumentParser(add_help=False)
    threaded.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("plan", parents=[common], help="samples per monitoring period for a policy")
    _add_policy_args(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("table1", parents=[common], help="annual inspection samples for reference training runs")
    p.set_defaults(func=cmd_table1)

    simflags = argparse.ArgumentParser(add_help=False)
    simflags.add_argument("--trials", type=int, default=10_000)
    simflags.add_argument("--window-mode", choices=("period", "cumulative"), default="period")
    simflags.add_argument("--any-snapshot", action="store_true", help="count snapshots from the whole run")

    p = sub.add_parser("simulate", parents=[common, seeded, threaded, simflags], help="Monte Carlo detection probability")
    _add_policy_args(p)
    p.add_argument("--strategy", choices=("honest", "stretch", "spread", "collusion"), default="honest")
    p.add_argument("--factor", type=float, default=1.0, help="stretch factor k")
    p.add_argument("--days", type=float, help="spread: run length in days")
    p.add_argument("--shares", type=float, nargs="+", help="collusion: run share per prover")
    p.add_argument("--fleet-shares", type=float, nargs="+", help="collusion: fleet share per prover")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", parents=[common, seeded, threaded, simflags], help="stretch-strategy sweep")
    p.add_argument("--fractions", type=float, nargs="+", default=[0.01, 0.05, 0.1, 0.2])
    p.add_argument("--stretch", type=float, nargs="+", default=[1, 10, 100])
    p.add_argument("--fleet", type=float, default=1e4)
    p.add_argument("--chip-flops", type=float, default=H100_FLOPS_PER_DAY)
    p.add_argument("--rate", type=float, default=0.1)
    p.add_argument("--prob", type=float, default=0.9)
    p.add_argument("--monitor-days", type=float, default=30.0)
    p.add_argument("--train-days", type=float, default=360.0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", parents=[common], help="train the reference model and save its transcript")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--meta", help="hyperparameter JSON file (overrides the model flags)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--layers", type=int, nargs="+", default=[4, 8, 2])
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--interval", type=int, default=20)
    p.add_argument("--loss", default="mse")
    p.add_argument("--data", default="teacher_regression")
    p.add_argument("--optimizer", default="sgd")
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--bundle", action="store_true", help="also write commitment, chip log and target shard")
    p.add_argument("--days", type=float, default=30.0, help="bundle: days the chip hosts the run")
    p.add_argument("--rate", type=float, default=1.0, help="bundle: snapshots per day")
    p.add_argument("--chip-seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("commit", parents=[common], help="hash a saved transcript")
    p.add_argument("transcript")
    p.add_argument("--out")
    p.add_argument("--no-distances", action="store_true")
    p.set_defaults(func=cmd_commit)

    bundle = argparse.ArgumentParser(add_help=False)
    bundle.add_argument("bundle", nargs="?", help="directory with transcript/, commitment.json, log.jsonl, target.json")
    bundle.add_argument("--transcript")
    bundle.add_argument("--commitment")
    bundle.add_argument("--log")
    bundle.add_argument("--target")
    bundle.add_argument("--epsilon", type=float, help="default: deterministic tolerance for the model size")
    bundle.add_argument("--segments", type=float, help="segment count (>= 1) or fraction (< 1)")
    bundle.add_argument("--precommit", action="store_true", help="require the logged precommitment")

    p = sub.add_parser("verify", parents=[common, seeded, bundle], help="verify a transcript against a chip log")
    p.add_argument("--selection", choices=("uniform_random", "largest_jump", "all"), default="uniform_random")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("attack", parents=[common, seeded, bundle], help="run the spoof suite against a bundle")
    p.add_argument("--selection", choices=("uniform_random", "largest_jump", "all"), default="all")
    p.add_argument("--attacks", nargs="+")
    p.add_argument("--no-precommit", dest="precommit", action="store_false", help="skip the precommitment check")
    p.set_defaults(func=cmd_attack, precommit=True)

    p = sub.add_parser("registry", help="chip-owner directory")
    rsub = p.add_subparsers(dest="action", required=True)
    r = rsub.add_parser("record", parents=[common])
    r.add_argument("--directory", required=True, help="event log file (JSON lines)")
    r.add_argument("--serial", required=True)
    r.add_argument("--holder", required=True)
    r.add_argument("--event", required=True, choices=("fabricated", "transferred", "damaged", "destroyed", "inspected"))
    r.add_argument("--day", type=float, required=True)
    r.add_argument("--sender")
    r.add_argument("--receiver")
    r.add_argument("--justification")
    r = rsub.add_parser("holdings", parents=[common])
    r.add_argument("--directory", required=True)
    r.add_argument("--owner", required=True)
    r = rsub.add_parser("sample", parents=[common, seeded])
    r.add_argument("--directory", required=True)
    r.add_argument("--owner", required=True)
    r.add_argument("--count", type=int, required=True)
    p.set_defaults(func=cmd_registry)

    p = sub.add_parser("audit", parents=[common], help="run seeded audits of a scenario file")
    p.add_argument("scenario")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--first", type=int, default=0, help="first repetition index")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, out)
    except (UsageError, ConfigurationError, DomainError, InfeasibleError, SampleTooLarge) as exc:
        print(f"chipwatch {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProtocolError, CustodyViolation) as exc:
        print(f"chipwatch {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


def run(argv) -> tuple[int, str]:
    """Run the CLI in-process and capture stdout."""
    buf = io.StringIO()
    code = main(argv, buf)
    return code, buf.getvalue()


if __name__ == "__main__":
    sys.exit(main())
