#!/usr/bin/env python3
"""
csbm command-line front end: generate instances, run the solvers, sweep
parameter grids into CSV tables, fit parameters by EM and run state evolution.

Values come from built-in defaults, then the [global] and [<subcommand>]
sections of --config, then command-line flags.
"""
import argparse
import concurrent.futures
import contextlib
import csv
import itertools
import logging
import math
import sys
import time
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from csbm import __version__
from csbm.amp_bp import RunOptions, magnetization, overlap, run
from csbm.config import compute_context, get_settings, load_settings, parse_bool, read_config_file, \
    section_overrides, set_settings
from csbm.dense import SeOptions, dense_params_from_sparse, run_amp_amp, sample_dense_instance, \
    se_predicted_overlap, state_evolution
from csbm.errors import ConfigError, InvalidParameterError, ResourceBudgetError
from csbm.free_energy import EmOptions, bethe_free_entropy, em_fit
from csbm.model import ModelParams, affinity_from_snr, make_supervision, row_seed, sample_instance
from csbm.multi import MultiParams, make_multi_supervision, overlap_multi, run_multi, sample_multi_instance
from csbm.oracles import L2_GRID, McmcOptions, exact_marginals, logistic_baseline, mcmc_marginals
from csbm.registry import default_registry
from csbm.serialization import read_instance, write_instance

logger = logging.getLogger("csbm.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2
EXIT_BUDGET = 3

SWEEP_COLUMNS = ["N", "P", "alpha", "d", "lambda", "mu", "rho", "algorithm", "seed", "q_u", "iterations",
                 "converged", "phi", "ms"]
GRID_KEYS = ("n", "p", "alpha", "d", "lam", "mu", "rho")

DEFAULTS: Dict[str, str] = {
    "n": "3000",
    "alpha": "10",
    "d": "5",
    "lam": "1.0",
    "mu": "2.0",
    "rho": "0.0",
    "q": "1.0",
    "groups": "2",
    "seed": "0",
    "max_iters": "200",
    "msg_tol": "1e-6",
    "overlap_tol": "1e-3",
    "damping": "0.0",
    "init_noise": "1e-2",
    "criterion": "messages",
    "init_mode": "random",
    "repeats": "10",
    "algorithm": "amp_bp",
    "sweeps": "100000",
    "burn_in": "10000",
    "l2": ",".join(str(x) for x in L2_GRID),
    "max_outer": "50",
    "em_tol": "1e-4",
    "em_damping": "0.5",
    "se_max_iters": "1000",
    "se_tol": "1e-10",
}


def parse_grid(text: str) -> List[float]:
    """
    "a,b,c" or an inclusive "start:stop:step" range.
    """
    text = str(text).strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise InvalidParameterError(f"Range must be start:stop:step, got {text!r}")
        start, stop, step = (float(x) for x in parts)
        if step <= 0 or stop < start:
            raise InvalidParameterError(f"Range {text!r} is empty; need step > 0 and stop >= start")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + k * step, 12) for k in range(count)]
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidParameterError(f"Could not parse value list {text!r}")
    if not values:
        raise InvalidParameterError("Empty value list")
    return values


def _single(values: Dict[str, str], key: str, kind=float):
    raw = values.get(key)
    if raw is None:
        return None
    grid = parse_grid(raw) if kind is not str else [raw]
    if len(grid) != 1:
        raise InvalidParameterError(f"--{key.replace('_', '-')} takes one value here, got {raw!r}")
    return kind(grid[0]) if kind is not str else grid[0]


def resolve_values(args: argparse.Namespace) -> Dict[str, str]:
    """Defaults, then the config file, then explicit flags."""
    values = dict(DEFAULTS)
    if getattr(args, "config", None):
        values.update(section_overrides(read_config_file(args.config), args.command))
    for key, value in vars(args).items():
        if value is not None and key not in ("command", "config", "handler", "verbose", "quiet", "deterministic",
                                              "threads", "out", "instance", "informative", "surrogate", "compare"):
            values[key] = str(value)
    if values.get("p") is not None and getattr(args, "alpha", None) is None:
        values.pop("alpha", None)
    return values


def model_params(values: Dict[str, str]) -> ModelParams:
    n = int(_single(values, "n"))
    p = _single(values, "p")
    feature_dim = int(p) if p is not None else max(1, int(round(n / _single(values, "alpha"))))
    return ModelParams(
        n_nodes=n,
        feature_dim=feature_dim,
        avg_degree=_single(values, "d"),
        snr_lambda=_single(values, "lam"),
        snr_mu=_single(values, "mu"),
        train_fraction=_single(values, "rho"),
        label_flip_keep_prob=_single(values, "q"),
        num_groups=int(_single(values, "groups")),
    )


def run_options(values: Dict[str, str], seed: int, deterministic: bool) -> RunOptions:
    return RunOptions(
        max_iters=int(_single(values, "max_iters")),
        msg_tol=_single(values, "msg_tol"),
        overlap_tol=_single(values, "overlap_tol"),
        damping=_single(values, "damping"),
        init_noise=_single(values, "init_noise"),
        seed=seed,
        criterion=_single(values, "criterion", str),
        init_mode=_single(values, "init_mode", str),
        deterministic=deterministic,
    )


def _multi_params(params: ModelParams) -> MultiParams:
    return MultiParams(
        n_nodes=params.n_nodes,
        feature_dim=params.feature_dim,
        prior_weights=params.group_prior(),
        affinity_matrix=affinity_from_snr(params.avg_degree, params.snr_lambda, params.num_groups),
        snr_mu=params.snr_mu,
        train_fraction=params.train_fraction,
        label_flip_keep_prob=params.label_flip_keep_prob,
    )


def load_or_sample(args: argparse.Namespace, values: Dict[str, str]):
    """Read --instance if given, otherwise sample one from the parameter flags."""
    seed = int(_single(values, "seed"))
    if getattr(args, "instance", None):
        instance = read_instance(args.instance)
    else:
        params = model_params(values)
        if params.num_groups == 2:
            instance = sample_instance(params, seed)
        else:
            instance = sample_multi_instance(_multi_params(params), seed)
    rho = _single(values, "rho")
    q = _single(values, "q")
    if instance.num_groups == 2:
        supervision = make_supervision(instance, rho, q, seed=seed)
    else:
        supervision = make_multi_supervision(instance, rho=rho, keep_prob=q, seed=seed)
    return instance, supervision, seed


@contextlib.contextmanager
def open_output(path: Optional[str]) -> Iterator:
    if not path or path == "-":
        yield sys.stdout
        return
    with open(path, "w", newline="", encoding="utf-8") as f:
        yield f


def _write_vector(path: Optional[str], values) -> None:
    with open_output(path) as f:
        for x in values:
            f.write(f"{x}\n")


def cmd_generate(args, values) -> int:
    instance, _, seed = load_or_sample(args, values)
    directory = args.out or f"instance_seed{seed}"
    paths = write_instance(instance, directory)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return EXIT_OK


def cmd_infer(args, values) -> int:
    instance, supervision, seed = load_or_sample(args, values)
    options = run_options(values, seed, args.deterministic)
    if instance.num_groups == 2:
        fixed_point = run(instance, supervision, options, truth=instance.spins)
        q_u = overlap(fixed_point.hard_labels, instance.spins, supervision.revealed) \
            if supervision.revealed.size < instance.n_nodes else float("nan")
        phi = bethe_free_entropy(fixed_point, instance, supervision)
        print(f"q_u: {q_u:.6f}")
        print(f"magnetization: {magnetization(fixed_point.state.u_hat, instance.spins):.6f}")
        print(f"phi: {phi.phi:.8f}")
        labels = fixed_point.hard_labels
    else:
        fixed_point = run_multi(instance, supervision, options, truth=instance.groups)
        q_u = overlap_multi(fixed_point.hard_labels, instance.groups, supervision.revealed, instance.num_groups,
                            instance.params.group_prior())
        print(f"q_u: {q_u:.6f}")
        labels = fixed_point.hard_labels
    print(f"iterations: {fixed_point.iters_used}")
    print(f"converged: {fixed_point.converged}")
    if args.out:
        _write_vector(args.out, labels)
    return EXIT_OK


@dataclass(frozen=True)
class SweepJob:
    point: int
    repeat: int
    params: ModelParams
    algorithm: str
    seed: int
    options: RunOptions
    extra: Tuple[Tuple[str, Any], ...] = ()


def run_sweep_job(job: SweepJob) -> Dict[str, Any]:
    """Run one (point, repeat) cell; failures become converged=false rows."""
    params = job.params
    row = {
        "N": params.n_nodes, "P": params.feature_dim, "alpha": params.alpha, "d": params.avg_degree,
        "lambda": params.snr_lambda, "mu": params.snr_mu, "rho": params.train_fraction,
        "algorithm": job.algorithm, "seed": job.seed,
    }
    solver = default_registry().require(job.algorithm)
    start = time.perf_counter()
    try:
        with compute_context(job.options.deterministic):
            outcome = solver.handler(params, job.seed, job.options, **dict(job.extra))
        row.update(q_u=outcome.q_u, iterations=outcome.iterations, converged=outcome.converged,
                   phi="" if outcome.phi is None else outcome.phi)
    except Exception as e:
        logger.warning("Sweep point %d repeat %d failed: %s", job.point, job.repeat, e)
        row.update(q_u=float("nan"), iterations=0, converged=False, phi="")
    row["ms"] = round(1000.0 * (time.perf_counter() - start), 3)
    return row


def build_sweep_jobs(values: Dict[str, str], master_seed: int, deterministic: bool) -> List[SweepJob]:
    algorithm = _single(values, "algorithm", str)
    registry = default_registry()
    registry.require(algorithm)
    repeats = int(_single(values, "repeats"))
    if repeats < 1:
        raise InvalidParameterError(f"repeats must be >= 1, got {repeats}")
    use_p = values.get("p") is not None
    axes = [parse_grid(values[key]) for key in GRID_KEYS if key in values and not (key == "alpha" and use_p)]
    names = [key for key in GRID_KEYS if key in values and not (key == "alpha" and use_p)]
    extra: Tuple[Tuple[str, Any], ...] = ()
    if algorithm == "mcmc":
        extra = (("sweeps", int(_single(values, "sweeps"))), ("burn_in", int(_single(values, "burn_in"))))

    jobs = []
    for point, combo in enumerate(itertools.product(*axes)):
        point_values = dict(values)
        point_values.update({name: repr(value) for name, value in zip(names, combo)})
        params = model_params(point_values)
        for repeat in range(repeats):
            seed = row_seed(master_seed, point, repeat)
            jobs.append(SweepJob(point, repeat, params, algorithm, seed,
                                 run_options(point_values, seed, deterministic), extra))
    return jobs


def cmd_sweep(args, values) -> int:
    master_seed = int(_single(values, "seed"))
    jobs = build_sweep_jobs(values, master_seed, args.deterministic)
    threads = get_settings().threads
    logger.info("Sweep: %d rows on %d worker(s)", len(jobs), threads)
    progress = tqdm(total=len(jobs), desc="sweep", disable=args.quiet, file=sys.stderr)
    rows: List[Dict[str, Any]] = [None] * len(jobs)
    if threads > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
            futures = {pool.submit(run_sweep_job, job): k for k, job in enumerate(jobs)}
            for future in concurrent.futures.as_completed(futures):
                rows[futures[future]] = future.result()
                progress.update(1)
    else:
        for k, job in enumerate(jobs):
            rows[k] = run_sweep_job(job)
            progress.update(1)
    progress.close()

    with open_output(args.out) as f:
        f.write(f"# csbm {__version__} seed={master_seed}\n")
        writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return EXIT_OK


def cmd_em(args, values) -> int:
    instance, supervision, seed = load_or_sample(args, values)
    if instance.num_groups != 2:
        raise InvalidParameterError("EM is only available for the binary model")
    truth = instance.params.affinity()
    init = (
        _single(values, "init_c_in") if values.get("init_c_in") else truth.c_in,
        _single(values, "init_c_out") if values.get("init_c_out") else truth.c_out,
        _single(values, "init_mu") if values.get("init_mu") else instance.params.snr_mu,
    )
    options = EmOptions(
        max_outer=int(_single(values, "max_outer")),
        tol=_single(values, "em_tol"),
        damping=_single(values, "em_damping"),
        run_options=run_options(values, seed, args.deterministic),
    )
    estimate = em_fit(instance, supervision, init, options)
    with open_output(args.out) as f:
        f.write(f"# csbm {__version__} seed={seed}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["outer", "c_in", "c_out", "mu", "phi"])
        writer.writerows(estimate.trace)
    print(f"c_in={estimate.c_in:.6f} c_out={estimate.c_out:.6f} mu={estimate.mu:.6f} "
          f"converged={estimate.converged} aborted={estimate.aborted}", file=sys.stderr)
    return EXIT_OK


def cmd_se(args, values) -> int:
    mu = _single(values, "mu")
    alpha = _single(values, "alpha") if values.get("alpha") else model_params(values).alpha
    delta = _single(values, "delta") if values.get("delta") else _single(values, "lam") ** 2
    rho = _single(values, "rho")
    options = SeOptions(max_iters=int(_single(values, "se_max_iters")), tol=_single(values, "se_tol"),
                        informative=args.informative)
    result = state_evolution(mu, alpha, delta, rho, options)
    with open_output(args.out) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["t", "m", "m_u", "m_v"])
        for t, state in enumerate(result.trajectory):
            writer.writerow([t, state.m, state.m_u, state.m_v])
    final = result.fixed_point
    print(f"m={final.m:.10f} m_u={final.m_u:.10f} m_v={final.m_v:.10f} "
          f"q_u={se_predicted_overlap(final.m_u, rho, final.m):.6f} converged={result.converged}",
          file=sys.stderr)
    return EXIT_OK


def cmd_mcmc(args, values) -> int:
    instance, supervision, seed = load_or_sample(args, values)
    options = McmcOptions(sweeps=int(_single(values, "sweeps")), burn_in=int(_single(values, "burn_in")), seed=seed)
    table = mcmc_marginals(instance, supervision, options)
    print(f"q_u: {overlap(table.hard_labels(), instance.spins, supervision.revealed):.6f}")
    if args.out:
        _write_vector(args.out, table.prob_plus)
    return EXIT_OK


def cmd_oracle(args, values) -> int:
    instance, supervision, seed = load_or_sample(args, values)
    table = exact_marginals(instance, supervision)
    if args.compare:
        fixed_point = run(instance, supervision, run_options(values, seed, args.deterministic))
        gap = float(np.max(np.abs(fixed_point.state.chi_plus_node - table.prob_plus)))
        print(f"max |AMP-BP - exact|: {gap:.3e}")
    _write_vector(args.out, table.prob_plus)
    return EXIT_OK


def cmd_logistic(args, values) -> int:
    instance, supervision, seed = load_or_sample(args, values)
    q_u = logistic_baseline(instance, supervision, parse_grid(values["l2"]), seed=seed)
    print(f"q_u: {q_u:.6f}")
    return EXIT_OK


def cmd_dense(args, values) -> int:
    params = model_params(values)
    seed = int(_single(values, "seed"))
    dense_params = dense_params_from_sparse(params)
    instance = sample_dense_instance(dense_params, seed, surrogate=args.surrogate)
    supervision = make_supervision(instance, params.train_fraction, params.label_flip_keep_prob, seed=seed)
    fixed_point = run_amp_amp(instance, supervision, run_options(values, seed, args.deterministic),
                              truth=instance.spins)
    result = state_evolution(params.snr_mu, params.alpha, dense_params.delta_i, params.train_fraction)
    print(f"q_u: {overlap(fixed_point.hard_labels, instance.spins, supervision.revealed):.6f}")
    print(f"m_u: {magnetization(fixed_point.u_hat, instance.spins):.6f}")
    print(f"se_m_u: {result.fixed_point.m_u:.6f}")
    se_q_u = se_predicted_overlap(result.fixed_point.m_u, params.train_fraction, result.fixed_point.m)
    print(f"se_q_u: {se_q_u:.6f}")
    print(f"iterations: {fixed_point.iters_used}")
    print(f"converged: {fixed_point.converged}")
    return EXIT_OK


def _add_shared(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", help="master seed")
    parser.add_argument("--threads", type=int, help="worker processes for sweeps")
    parser.add_argument("--deterministic", action="store_true", default=None,
                        help="pin BLAS to one thread for reproducible reductions")
    parser.add_argument("--out", help="output path (stdout when omitted)")
    parser.add_argument("--config", help="INI file with [global] and per-command sections")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--quiet", action="store_true")


def _add_model(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n", help="number of nodes N")
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--p", help="feature dimension P")
    group.add_argument("--alpha", help="aspect ratio N/P")
    parser.add_argument("--d", help="mean degree")
    parser.add_argument("--lam", help="graph snr lambda")
    parser.add_argument("--mu", help="feature snr mu")
    parser.add_argument("--rho", help="fraction of revealed labels")
    parser.add_argument("--q", help="probability that a revealed label is correct")
    parser.add_argument("--groups", help="number of groups")
    parser.add_argument("--instance", help="read the instance from this directory instead of sampling")


def _add_run(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--max-iters", dest="max_iters")
    parser.add_argument("--msg-tol", dest="msg_tol")
    parser.add_argument("--overlap-tol", dest="overlap_tol")
    parser.add_argument("--damping")
    parser.add_argument("--init-noise", dest="init_noise")
    parser.add_argument("--criterion", choices=["messages", "overlap"])
    parser.add_argument("--init-mode", dest="init_mode", choices=["random", "planted"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csbm", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"csbm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    commands = {
        "generate": (cmd_generate, "sample an instance and write it to --out"),
        "infer": (cmd_infer, "run AMP-BP (or the multi-group version) on one instance"),
        "sweep": (cmd_sweep, "run a solver over a parameter grid and write CSV rows"),
        "em": (cmd_em, "estimate (c_in, c_out, mu) by expectation-maximization"),
        "se": (cmd_se, "iterate the dense-limit state evolution"),
        "mcmc": (cmd_mcmc, "posterior marginals by Metropolis-within-Gibbs sampling"),
        "oracle": (cmd_oracle, "exact marginals by enumeration (N <= 16)"),
        "logistic": (cmd_logistic, "logistic-regression baseline on the features"),
        "dense": (cmd_dense, "AMP-AMP on a dense instance with the state evolution prediction"),
    }
    for name, (handler, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        _add_shared(p)
        _add_model(p)
        _add_run(p)
        if name == "sweep":
            p.add_argument("--algorithm", help=f"one of {', '.join(default_registry().names())}")
            p.add_argument("--repeats")
        if name in ("sweep", "mcmc"):
            p.add_argument("--sweeps")
            p.add_argument("--burn-in", dest="burn_in")
        if name == "em":
            p.add_argument("--init-c-in", dest="init_c_in")
            p.add_argument("--init-c-out", dest="init_c_out")
            p.add_argument("--init-mu", dest="init_mu")
            p.add_argument("--max-outer", dest="max_outer")
            p.add_argument("--em-tol", dest="em_tol")
            p.add_argument("--em-damping", dest="em_damping")
        if name == "se":
            p.add_argument("--delta", help="graph snr Delta_I (defaults to lambda^2)")
            p.add_argument("--informative", action="store_true", help="start from m_u = 1")
            p.add_argument("--se-max-iters", dest="se_max_iters")
            p.add_argument("--se-tol", dest="se_tol")
        if name == "logistic":
            p.add_argument("--l2", help="comma-separated regularization strengths")
        if name == "oracle":
            p.add_argument("--compare", action="store_true", help="also run AMP-BP and report the gap")
        if name == "dense":
            p.add_argument("--surrogate", action="store_true", help="Gaussian rank-one surrogate instead of a graph")
    return parser


def configure_logging(level_name: str, verbose: int, quiet: bool) -> None:
    level = getattr(logging, level_name.upper(), logging.WARNING)
    if verbose >= 2:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    if quiet:
        level = logging.ERROR
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = load_settings()
        values = resolve_values(args)
        deterministic = args.deterministic
        if deterministic is None:
            deterministic = parse_bool(values["deterministic"], "deterministic") if "deterministic" in values \
                else settings.deterministic
        args.deterministic = deterministic
        threads = args.threads if args.threads is not None else int(values.get("threads", settings.threads))
        set_settings(settings.with_overrides(threads=max(1, threads), deterministic=deterministic))
        configure_logging(settings.log_level, args.verbose, args.quiet)
        return args.handler(args, values)
    except ResourceBudgetError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except (InvalidParameterError, ConfigError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:
        logger.exception("Command %s failed", args.command)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
