"""``dossfbm`` command line: ``simulate``, ``converge`` and ``verify``.

Each subcommand reads one JSON config document.  Exit codes: 0 when every
check passes, 1 when a numerical check fails (reports are still written),
2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import bench, fbm
from .flow import FlowDomainError
from .scheme import SchemeConfig, run_manifest, solve_x_reference, solve_x_scheme, sup_error, write_manifest

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


_SCHEME_FIELDS = tuple(f.name for f in dataclasses.fields(SchemeConfig))


@dataclass
class RunConfig:
    """Everything a run needs; serialised with all defaults filled in."""

    scheme: SchemeConfig
    hurst_list: list = field(default_factory=list)
    n_list: list = field(default_factory=lambda: [32, 64, 128, 256, 512])
    seeds: list = field(default_factory=lambda: list(range(20)))
    n_ref: int | None = 4096
    slope_factor: float = 0.9
    samples: int = 1000
    levels: list = field(default_factory=lambda: [16, 64, 256])
    lemma_n_list: list = field(default_factory=lambda: [64, 256])
    taylor_level: int = 16
    out: str = "out"
    emit_timings: bool = False
    emit_path: bool = True

    def to_dict(self) -> dict:
        d = self.scheme.as_dict()
        for f in dataclasses.fields(self):
            if f.name != "scheme":
                d[f.name] = getattr(self, f.name)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict, source: str = "<config>") -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError(f"{source}: top level must be a JSON object")
        extra_fields = [f.name for f in dataclasses.fields(cls) if f.name != "scheme"]
        unknown = sorted(set(raw) - set(_SCHEME_FIELDS) - set(extra_fields))
        if unknown:
            raise ConfigError(f"{source}: unknown field(s) {', '.join(repr(k) for k in unknown)}")
        if "hurst" not in raw:
            raise ConfigError(f"{source}: missing required field 'hurst'")
        scheme_kw = {k: raw[k] for k in _SCHEME_FIELDS if k in raw}
        _check_types(scheme_kw, source)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                scheme = SchemeConfig(**scheme_kw)
                scheme.coefficients()
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"{source}: {exc}") from None
        kw = {k: raw[k] for k in extra_fields if k in raw}
        cfg = cls(scheme, **kw)
        if not cfg.hurst_list:
            cfg.hurst_list = [scheme.hurst]
        cfg._validate(source)
        return cfg

    @classmethod
    def from_json(cls, text: str, source: str = "<config>") -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        return cls.from_dict(raw, source)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_json(text, str(path))

    def _validate(self, source: str) -> None:
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{source}: field {name!r}: {msg}")

        for name in ("hurst_list", "n_list", "seeds", "levels", "lemma_n_list"):
            v = getattr(self, name)
            need(isinstance(v, list) and all(_is_number(x) for x in v), name, "must be a list of numbers")
        for name in ("n_list", "seeds", "levels", "lemma_n_list"):
            need(all(float(x).is_integer() for x in getattr(self, name)), name, "entries must be integers")
            setattr(self, name, [int(x) for x in getattr(self, name)])
        self.hurst_list = [float(h) for h in self.hurst_list]
        need(all(self.scheme.rho < h < 1 for h in self.hurst_list), "hurst_list", "every entry must exceed rho and lie below 1")
        need(self.n_ref is None or (_is_number(self.n_ref) and self.n_ref > 0), "n_ref", "must be a positive integer or null")
        need(_is_number(self.slope_factor) and self.slope_factor > 0, "slope_factor", "must be positive")
        need(_is_number(self.samples), "samples", "must be an integer")
        need(_is_number(self.taylor_level) and self.taylor_level >= 1, "taylor_level", "must be a positive integer")
        need(isinstance(self.out, str) and self.out, "out", "must be a nonempty path")
        need(isinstance(self.emit_timings, bool), "emit_timings", "must be true or false")
        need(isinstance(self.emit_path, bool), "emit_path", "must be true or false")

    def with_seed_override(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        cfg = dataclasses.replace(self, scheme=dataclasses.replace(self.scheme, seed=seed))
        cfg.seeds = [seed + i for i in range(len(self.seeds))]
        return cfg


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _check_types(kw: dict, source: str) -> None:
    numeric = ("hurst", "n", "q", "T", "x0", "rho", "seed", "oracle_tol", "stats_inflation", "substeps")
    for name in numeric:
        if name in kw and not _is_number(kw[name]):
            raise ConfigError(f"{source}: field {name!r}: expected a number, got {kw[name]!r}")
    for name in ("n", "q", "seed", "substeps"):
        if name in kw and not float(kw[name]).is_integer():
            raise ConfigError(f"{source}: field {name!r}: expected an integer, got {kw[name]!r}")
        if name in kw:
            kw[name] = int(kw[name])
    if "params" in kw and not (isinstance(kw["params"], list) and all(_is_number(p) for p in kw["params"])):
        raise ConfigError(f"{source}: field 'params': expected a list of numbers")
    if "bounds_override" in kw and not isinstance(kw["bounds_override"], dict):
        raise ConfigError(f"{source}: field 'bounds_override': expected an object")
    if "generator" in kw and kw["generator"] not in ("cholesky", "circulant"):
        raise ConfigError(f"{source}: field 'generator': expected 'cholesky' or 'circulant'")


# --- subcommands ------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out: Path, workers: int) -> int:
    sc = cfg.scheme
    path = sc.path()
    x_n = solve_x_scheme(sc, path)
    x_ref = solve_x_reference(sc, path)
    err = sup_error(x_n, x_ref)
    out.mkdir(parents=True, exist_ok=True)
    x_n.to_csv(out / "x_scheme.csv")
    x_ref.to_csv(out / "x_reference.csv")
    if cfg.emit_path:
        path.to_csv(out / "path.csv")
    manifest = run_manifest(sc, path)
    manifest["run_config"] = cfg.to_dict()
    manifest["sup_error"] = err
    write_manifest(manifest, out / "manifest.json")
    print(f"sup error |X^n - X| over {sc.n} steps: {err:.6e}")
    return EXIT_OK


def cmd_converge(cfg: RunConfig, out: Path, workers: int) -> int:
    sc = cfg.scheme
    report = bench.run_convergence(
        sc.coefficients(), cfg.hurst_list, cfg.n_list, cfg.seeds,
        T=sc.T, x0=sc.x0, rho=sc.rho, q=sc.q, n_ref=cfg.n_ref, oracle_tol=sc.oracle_tol,
        substeps=sc.substeps, slope_factor=cfg.slope_factor, generator=sc.generator, workers=workers,
    )
    report.config["run_config"] = cfg.to_dict()
    report.write(out, timings=cfg.emit_timings)
    summary = report.summary()
    for H, row in summary["per_hurst"].items():
        if row["note"]:
            print(f"H={H}: {row['note']}")
        else:
            print(f"H={H}: median slope {row['median_slope']:.4f} (threshold {row['threshold']:.4f}) {'ok' if row['slope_ok'] else 'FAIL'}")
    print(f"bound violations: {summary['violations']}")
    for r in report.records:
        if not r.bound_ok:
            print(f"  violation H={r.H} n={r.n} seed={r.seed}: error {r.sup_error:.3e} > bound {r.bound:.3e}", file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_verify(cfg: RunConfig, out: Path, workers: int) -> int:
    sc = cfg.scheme
    coeffs = sc.coefficients()
    report = bench.run_lemma_suite(
        coeffs, hurst=sc.hurst, levels=cfg.levels, n_list=cfg.lemma_n_list, seeds=cfg.seeds,
        samples=cfg.samples, T=sc.T, x0=sc.x0, rho=sc.rho, q=sc.q, tol=sc.oracle_tol,
        flow_seed=sc.seed, generator=sc.generator, workers=workers,
    )
    taylor = bench.run_taylor_suite(coeffs, l=cfg.taylor_level, samples=cfg.samples, seed=sc.seed)
    summary = report.summary()
    summary["taylor"] = [{**dataclasses.asdict(t), "passed": t.passed} for t in taylor]
    summary["run_config"] = cfg.to_dict()
    out.mkdir(parents=True, exist_ok=True)
    (out / "verify_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    ok = report.passed and all(t.passed for t in taylor)
    for r in report.results:
        note = " (vacuous)" if r.vacuous else ""
        print(f"{r.name}: worst ratio {r.worst_ratio:.4g}{note} {'ok' if r.passed else 'FAIL'}")
    for t in taylor:
        print(f"Taylor {t.name}: worst ratio {t.worst_ratio:.6g}, violations {t.violations}")
    for r in report.failures():
        print(f"{r.name} violated: ratio {r.worst_ratio:.4g} at {r.witness}", file=sys.stderr)
    for t in taylor:
        if not t.passed:
            print(f"Taylor lemma violated for {t.name} at {t.max_ratio_witness}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"simulate": cmd_simulate, "converge": cmd_converge, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dossfbm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__name__.replace("cmd_", ""))
        p.add_argument("--config", required=True, type=Path, help="JSON run config")
        p.add_argument("--out", type=Path, default=None, help="output directory (overrides config 'out')")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker processes")
        p.add_argument("--seed-override", type=int, default=None, metavar="U64", help="base seed replacing the config seeds")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.seed_override is not None and not 0 <= args.seed_override < 2**64:
        print("error: --seed-override must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = RunConfig.load(args.config).with_seed_override(args.seed_override)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = args.out or Path(cfg.out)
    try:
        return COMMANDS[args.command](cfg, out, args.workers)
    except bench.HarnessError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, FlowDomainError, fbm.FactorizationError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    raise SystemExit(main())
