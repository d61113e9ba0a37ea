"""
Command-line surface: `solve`, `simulate`, `verify` and `export`.

Problem-file keys can be overridden with dotted flags, e.g. `--grid.M 4000` or
`--mc.paths=50000`; flags win over the file, the file wins over `Config`.

Exit codes: 0 ok, 1 validation failure, 2 solver non-convergence, 3 verification failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from config import Config
from hjb import solve
from manifest import RunManifest
from policy import parse_policy
from problem import load_problem
from reporting import ReportWriter, summarize_report
from sde import mc_estimate, resolve_threads, simulate_path, write_path_csv
from verify import find_case, run_case, run_corpus, verify_problem

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NONCONVERGENCE = 2
EXIT_VERIFICATION = 3


class UsageError(ValueError):
    pass


def parse_overrides(extra: Sequence[str]) -> Dict[str, str]:
    """Turn leftover `--key value` / `--key=value` pairs into problem-key overrides."""
    overrides: Dict[str, str] = {}
    items = list(extra)
    while items:
        token = items.pop(0)
        if not token.startswith('--') or '.' not in token:
            raise UsageError(f"unrecognised argument: {token}")
        key, sep, value = token[2:].partition('=')
        if not sep:
            if not items:
                raise UsageError(f"flag --{key} needs a value")
            value = items.pop(0)
        overrides[key] = value
    return overrides


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help='Master seed (overrides mc.seed)')
    common.add_argument('--threads', default=Config.THREADS, help='Worker threads, an integer or "auto"')
    common.add_argument('--out', default=Config.OUTPUT_DIR, help='Output directory')
    common.add_argument('--plot-data', action='store_true', help='Also write tidy long-format tables')
    common.add_argument('--verbose', '-v', action='store_true', help='Debug logging')
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog='regime-stop', description=f"{Config.TOOL_NAME} {Config.VERSION}: "
                                     "optimal stopping of regime-switching diffusions")
    commands = parser.add_subparsers(dest='command', required=True)

    solve_cmd = commands.add_parser('solve', parents=[common], help='Solve the HJB obstacle problem')
    solve_cmd.add_argument('problem', help='Problem file')
    solve_cmd.add_argument('--order', choices=['ascending', 'descending'], default='ascending',
                           help='Regime sweep order')

    simulate = commands.add_parser('simulate', parents=[common], help='Monte Carlo value of a stopping rule')
    simulate.add_argument('problem', help='Problem file')
    simulate.add_argument('--x0', type=float, required=True, help='Initial state')
    simulate.add_argument('--t0', type=float, default=0.0, help='Initial age')
    simulate.add_argument('--i0', type=int, default=1, help='Initial regime (1-based)')
    simulate.add_argument('--policy', default='immediate',
                          help='immediate | never | fixed-time:T | threshold:b1,..,bk | '
                               'threshold-above:b1,..,bk | from-field:<value csv>')

    verify = commands.add_parser('verify', parents=[common], help='Run oracles and cross-checks')
    target = verify.add_mutually_exclusive_group(required=True)
    target.add_argument('problem', nargs='?', help='Problem file')
    target.add_argument('--corpus', action='store_true', help='Run the shipped corpus')
    verify.add_argument('--corpus-dir', default=Config.CORPUS_DIR, help='Corpus directory')
    verify.add_argument('--case', action='append', help='Restrict --corpus to these case names')
    verify.add_argument('--full-scale', action='store_true',
                        help='Run Monte Carlo checks at the acceptance path count and step')

    export = commands.add_parser('export', parents=[common], help='Export the value field and sample paths')
    export.add_argument('problem', help='Problem file')
    export.add_argument('--paths', type=int, default=3, help='Number of path dumps')
    export.add_argument('--x0', type=float, help='Path start (default: interval midpoint)')
    export.add_argument('--t0', type=float, default=0.0, help='Initial age')
    export.add_argument('--i0', type=int, default=1, help='Initial regime (1-based)')
    export.add_argument('--path-horizon', type=float, default=10.0, help='Length of each dumped path')
    return parser


class RegimeStopCli:
    """Dispatches parsed arguments to the command handlers."""

    def __init__(self, args: argparse.Namespace, overrides: Dict[str, str]):
        self.args = args
        self.overrides = dict(overrides)
        if args.seed is not None:
            self.overrides['mc.seed'] = str(args.seed)
        self.threads = resolve_threads(args.threads)
        self.out = Path(args.out)
        self.logger = logging.getLogger(__name__)
        self.handlers = {
            'solve': self.cmd_solve,
            'simulate': self.cmd_simulate,
            'verify': self.cmd_verify,
            'export': self.cmd_export,
        }

    def run(self) -> int:
        return self.handlers[self.args.command]()

    def _load(self):
        return load_problem(Path(self.args.problem), self.overrides)

    def cmd_solve(self) -> int:
        spec = self._load()
        manifest = RunManifest.start('solve', spec, spec.mc.seed, order=self.args.order)
        value_field, boundary = solve(spec, order=self.args.order)
        writer = ReportWriter(self.out, prefix=f"{spec.name}_")
        writer.write_value(value_field, spec)
        writer.write_boundary(boundary, value_field.is_homogeneous)
        if self.args.plot_data:
            writer.write_plot_data(value_field, boundary)
        manifest.extra.update(converged=value_field.converged, residual=value_field.residual,
                              iterations=value_field.iterations, outer_history=value_field.history)
        manifest.finish(writer.written).write(self.out)

        print(f"{spec.name}: M={value_field.grid.M} converged={value_field.converged} "
              f"residual={value_field.residual:.3e} boundary points={len(boundary.points)}")
        for point in boundary.points[:20]:
            where = '' if point.t is None else f" t={point.t:.6g}"
            print(f"  regime {point.regime}: x={point.x:.8g}{where} ({point.side})")
        return EXIT_OK if value_field.converged else EXIT_NONCONVERGENCE

    def cmd_simulate(self) -> int:
        spec = self._load()
        policy = parse_policy(self.args.policy, spec.k, spec.solver.tol_stop)
        manifest = RunManifest.start('simulate', spec, spec.mc.seed, x0=self.args.x0, t0=self.args.t0,
                                     i0=self.args.i0, policy=policy.describe())
        estimate = mc_estimate(spec, self.args.x0, self.args.t0, self.args.i0, policy, threads=self.threads)
        writer = ReportWriter(self.out, prefix=f"{spec.name}_")
        writer.write_estimate(estimate, self.args.x0, self.args.t0, self.args.i0, policy.describe())
        manifest.finish(writer.written).write(self.out)

        print(f"mean={estimate.mean:.10g} stderr={estimate.stderr:.4g} n={estimate.n_paths} "
              f"censored={estimate.censored_fraction:.4g}")
        return EXIT_OK

    def cmd_verify(self) -> int:
        seed = self.args.seed
        if self.args.corpus:
            manifest = RunManifest.start('verify', None, seed, corpus=str(self.args.corpus_dir))
            rows = run_corpus(self.args.corpus_dir, seed, self.threads, self.args.case, self.args.full_scale)
            prefix, code = 'corpus_', None
        else:
            case = find_case(self.args.problem)
            if case is not None and case.must_reject:
                # refused at validation: exit 1, but the report records the expected refusal
                rows = run_case(case, Path(self.args.problem).parent, seed, self.threads)
                manifest = RunManifest.start('verify', None, seed, problem=str(self.args.problem))
                prefix, code = f"{case.name}_", EXIT_VALIDATION
            else:
                scale = case.full_scale if case is not None and self.args.full_scale else {}
                spec = load_problem(Path(self.args.problem), {**scale, **self.overrides})
                manifest = RunManifest.start('verify', spec, spec.mc.seed)
                rows = verify_problem(self.args.problem, seed, self.threads, self.overrides, self.args.full_scale)
                prefix, code = f"{spec.name}_", None

        writer = ReportWriter(self.out, prefix=prefix)
        writer.write_report(rows)
        if self.args.plot_data:
            writer.write_report_plot_data(rows)
        failed = [row for row in rows if not row.passed]
        manifest.extra.update(checks=len(rows), failed=len(failed))
        manifest.finish(writer.written).write(self.out)

        print(summarize_report(rows).to_string(index=False))
        for row in failed:
            print(f"FAIL {row.case} {row.check} {row.point}: got {row.got:.6g}, "
                  f"expected {row.expected:.6g} (tolerance {row.tolerance:.3g})")
        print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
        if code is not None and not failed:
            return code
        return EXIT_VERIFICATION if failed else EXIT_OK

    def cmd_export(self) -> int:
        spec = self._load()
        manifest = RunManifest.start('export', spec, spec.mc.seed, paths=self.args.paths)
        value_field, boundary = solve(spec)
        writer = ReportWriter(self.out, prefix=f"{spec.name}_")
        writer.write_value(value_field, spec)
        writer.write_boundary(boundary, value_field.is_homogeneous)
        writer.write_plot_data(value_field, boundary)

        lo, hi = spec.diffusion.interval
        x0 = self.args.x0 if self.args.x0 is not None else 0.5 * (lo + hi)
        for n in range(self.args.paths):
            path = simulate_path(spec, x0, self.args.t0, self.args.i0, spec.mc.dt, self.args.path_horizon,
                                 spec.mc.seed, stream=n)
            destination = self.out / f"{spec.name}_path_{n + 1}.csv"
            writer.written.append(write_path_csv(path, destination))
        manifest.extra.update(converged=value_field.converged, residual=value_field.residual)
        manifest.finish(writer.written).write(self.out)
        print(f"Exported {len(writer.written)} files to {self.out}")
        return EXIT_OK if value_field.converged else EXIT_NONCONVERGENCE


def parse_args(argv: Optional[Sequence[str]] = None) -> Tuple[argparse.Namespace, Dict[str, str]]:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = parse_overrides(extra)
    except UsageError as e:
        parser.error(str(e))
    if args.command == 'verify' and args.corpus and overrides:
        parser.error("problem-key overrides apply to a single problem file, not to --corpus")
    return args, overrides


def run(argv: Optional[List[str]] = None) -> int:
    args, overrides = parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    return RegimeStopCli(args, overrides).run()


if __name__ == '__main__':
    sys.exit(run())
