"""
Command-line interface.

Subcommands: ``offline`` (HMC or SMC on a fixed dataset), ``online``
(posterior-sampling exploration), ``oracle`` (exact event probabilities)
and ``benchmark`` (learning time across Deep Sea depths). Exit codes: 0
success, 2 configuration or input error, 3 numerical failure, 4 particle
degeneracy.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from .agent import learning_time, run_online
from .config import ConfigError, RunConfig, load_config
from .estimators import OfflineHMCPosterior
from .hmc import NumericalError
from .mdp import QIndex, TabularMdp, Transition, make_env
from .model import PriorSpec
from .oracle import AssignmentCapError, event_probability, five_state_choice_probability
from .rng import substream
from .smc import DegeneracyError, SmcEngine, TraceRow

__all__ = ["main", "build_parser", "read_dataset", "complete_dataset"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DEGENERATE = 0, 2, 3, 4

TRACE_HEADER = ["update_index", "stage", "eps_old", "eps_new", "ess", "resampled", "gr_pass_fraction", "bellman_error", "accept_rate"]
EPISODE_HEADER = ["episode", "steps", "return", "regret", "cumulative_regret"]


def fmt(x) -> str:
    """Round-trip float formatting; integers and strings pass through."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_dataset(path, mdp: TabularMdp) -> list[Transition]:
    """Read ``s,a,r,s_next`` rows; errors name the offending line."""
    out = []
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return out
        if [h.strip() for h in header] != ["s", "a", "r", "s_next"]:
            raise ConfigError(f"{path}:1: expected header s,a,r,s_next")
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) != 4:
                    raise ValueError(f"expected 4 fields, got {len(row)}")
                s, a, r, s_next = int(row[0]), int(row[1]), float(row[2]), int(row[3])
                if not math.isfinite(r):
                    raise ValueError("reward must be finite")
                if not (0 <= s < mdp.n_states and 0 <= s_next < mdp.n_states):
                    raise ValueError("state out of range")
                mdp.check_action(s, a)
                if mdp.transition[(s, a)][s_next] <= 0:
                    raise ValueError(f"s_next={s_next} is unreachable from ({s}, {a})")
            except ValueError as exc:
                raise ConfigError(f"{path}:{line}: {exc}") from exc
            out.append(Transition(s, a, r, s_next))
    return out


def complete_dataset(mdp: TabularMdp) -> list[Transition]:
    """One record per non-goal pair with its mean reward."""
    return [
        Transition(s, a, mdp.mean_reward[(s, a)], int(np.argmax(mdp.transition[(s, a)])))
        for s, a in mdp.pairs()
        if not mdp.is_goal(s)
    ]


def theta_header(d: int) -> list[str]:
    return [f"theta_{k + 1}" for k in range(d)]


def trace_rows(trace: list[TraceRow]):
    for t in trace:
        eps_new = t.eps_new if isinstance(t.eps_new, float) else "unconstrained"
        yield [t.update_index, t.stage, t.eps_old, eps_new, t.ess, t.resampled, t.gr_pass_fraction, t.bellman_error, t.accept_rate]


def particle_rows(episode: int, particles):
    w = particles.weights()
    for n in range(particles.n):
        yield [episode, n, w[n], *particles.thetas[n]]


def _config(args) -> RunConfig:
    return load_config(
        args.config,
        env=args.env,
        seed=args.seed,
        n_particles=args.particles,
        eps_target=args.eps_target,
        mode=args.mode,
        episodes=getattr(args, "episodes", None),
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_offline(args) -> int:
    cfg = _config(args)
    mdp = make_env(cfg.env)
    data = read_dataset(args.dataset, mdp) if args.dataset else complete_dataset(mdp)
    out = _out_dir(args)
    d = QIndex(mdp).d_theta
    if args.sampler == "hmc":
        est = OfflineHMCPosterior(
            env=cfg.env, eps=cfg.eps_target, prior_sigma=cfg.prior_sigma, n_samples=args.samples,
            n_warmup=args.warmup, n_leapfrog=cfg.l_star0, seed=cfg.seed,
        ).fit(data)
        write_csv(out / "samples.csv", ["sample_index", *theta_header(d)], ([i, *row] for i, row in enumerate(est.samples_)))
        print(f"accept_rate={est.accept_rate_:.3f} step_size={est.step_size_:.4g}")
        return EXIT_OK
    engine = SmcEngine(mdp, PriorSpec(cfg.prior_sigma), cfg.smc_config(), cfg.seed)
    particles = engine.initial_particles(cfg.n_particles)
    try:
        particles, state, trace = engine.update(particles, [], data, cfg.eps_target, cfg.eps_target)
    except DegeneracyError as exc:
        write_csv(out / "trace.csv", TRACE_HEADER, trace_rows(exc.trace))
        raise
    write_csv(out / "particles.csv", ["episode", "particle", "weight", *theta_header(d)], particle_rows(0, particles))
    write_csv(out / "trace.csv", TRACE_HEADER, trace_rows(trace))
    print(f"final tolerance={state.eps_old:.6g} exit={state.exit_reason}")
    return EXIT_OK


def cmd_online(args) -> int:
    cfg = _config(args)
    mdp = make_env(cfg.env)
    out = _out_dir(args)
    res = run_online(mdp, cfg, snapshot_stride=args.snapshot_stride)
    write_csv(
        out / "episodes.csv",
        EPISODE_HEADER,
        ([l.episode, l.steps, l.ret, l.regret, l.cumulative_regret] for l in res.logs),
    )
    write_csv(out / "trace.csv", TRACE_HEADER, trace_rows(res.trace))
    d = QIndex(mdp).d_theta
    snaps = list(res.snapshots)
    last = res.logs[-1].episode if res.logs else 0
    if not snaps or snaps[-1][0] != last:
        snaps.append((last, res.particles))
    rows = (row for e, p in snaps for row in particle_rows(e, p))
    write_csv(out / "particles.csv", ["episode", "particle", "weight", *theta_header(d)], rows)
    lt = learning_time(res.logs)
    print(f"episodes={len(res.logs)} learning_time={lt if lt is not None else 'none'}")
    if res.error is not None:
        raise res.error
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = _config(args)
    mdp = make_env(cfg.env)
    idx = QIndex(mdp)
    data = read_dataset(args.dataset, mdp) if args.dataset else complete_dataset(mdp)
    rng = substream(cfg.seed, "oracle")
    p, se = event_probability(mdp, idx, data, cfg.prior_sigma, cfg.eps_target, args.event, args.n_mc, rng)
    print(f"probability={p:.6f} se={se:.2e}")
    if args.closed_form:
        if not cfg.env.startswith("five_state"):
            raise ConfigError("--closed-form is only available for five_state")
        r = [mdp.mean_reward[(0, 0)], mdp.mean_reward[(0, 1)], mdp.mean_reward[(1, 0)], mdp.mean_reward[(2, 1)]]
        lemma = five_state_choice_probability(*r, cfg.prior_sigma, cfg.eps_target)
        print(f"closed_form={lemma:.6f}")
    return EXIT_OK


def parse_int_list(text: str) -> list[int]:
    try:
        out = []
        for part in text.split(","):
            part = part.strip()
            if ".." in part:
                lo, hi = part.split("..")
                out.extend(range(int(lo), int(hi) + 1))
            elif part:
                out.append(int(part))
        return out
    except ValueError as exc:
        raise ConfigError(f"cannot parse integer list {text!r}") from exc


def loglog_slope(depths, times) -> float:
    """Least-squares slope of log(median learning time) on log(depth)."""
    by = {}
    for d, t in zip(depths, times):
        if t is not None:
            by.setdefault(d, []).append(t)
    pts = [(math.log(d), math.log(float(np.median(v)))) for d, v in sorted(by.items()) if d > 0]
    if len(pts) < 2:
        return float("nan")
    x, y = np.array(pts).T
    return float(np.polyfit(x, y, 1)[0])


def cmd_benchmark(args) -> int:
    cfg = _config(args)
    depths = parse_int_list(args.depths)
    seeds = parse_int_list(args.seeds)
    if not depths or min(depths) < 1:
        raise ConfigError("depths must be positive integers")
    out = _out_dir(args)
    rows, ds, lts = [], [], []
    for depth in depths:
        for seed in seeds:
            run_cfg = cfg.replace(env=f"deep_sea:{depth}", seed=seed)
            try:
                res = run_online(make_env(run_cfg.env), run_cfg, stop_at_learning_time=True)
                lt, n = learning_time(res.logs), len(res.logs)
            except (DegeneracyError, NumericalError, FloatingPointError) as exc:
                print(f"depth={depth} seed={seed} failed: {exc}", file=sys.stderr)
                lt, n = None, 0
            rows.append([depth, seed, "" if lt is None else lt, n])
            ds.append(depth)
            lts.append(lt)
    write_csv(out / "learning_time.csv", ["depth", "seed", "learning_time", "episodes_run"], rows)
    print(f"loglog_slope={loglog_slope(ds, lts):.4g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON file of run settings")
    common.add_argument("--env", help="deep_sea:<d>, two_state or five_state:<r1>,<r2>,<r3>,<r4>")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--particles", type=int)
    common.add_argument("--eps-target", type=float)
    common.add_argument("--mode", choices=["adaptive", "non_adaptive"])

    parser = argparse.ArgumentParser(prog="bellman-abc", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("offline", parents=[common], help="sample the posterior for a fixed dataset")
    p.add_argument("--dataset", help="CSV with header s,a,r,s_next (default: one record per pair)")
    p.add_argument("--sampler", choices=["hmc", "smc"], default="hmc")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--warmup", type=int, default=1_000)
    p.set_defaults(func=cmd_offline)

    p = sub.add_parser("online", parents=[common], help="posterior-sampling exploration")
    p.add_argument("--episodes", type=int)
    p.add_argument("--snapshot-stride", type=int, default=0, help="keep particles every k episodes (0: final only)")
    p.set_defaults(func=cmd_online)

    p = sub.add_parser("oracle", parents=[common], help="exact posterior event probability")
    p.add_argument("--event", action="append", help="theta_i>theta_j terms, comma separated or repeated")
    p.add_argument("--dataset")
    p.add_argument("--n-mc", type=int, default=1_000_000)
    p.add_argument("--closed-form", action="store_true")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("benchmark", parents=[common], help="learning time across Deep Sea depths")
    p.add_argument("--depths", default="3,4,5")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, AssignmentCapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegeneracyError as exc:
        print(f"degeneracy: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
