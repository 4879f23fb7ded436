"""Data generators, the experiment runner and the ``mssfo`` command line.

Every (mechanism, eps, trial) job draws its own dataset and reports from a
generator seeded by ``(root seed, mechanism, eps, trial)``, so results do not
depend on how jobs are scheduled across workers.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import struct
import sys
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .attacks import attack_guesses, dra_analytic, dra_mss_exact, dra_mss_upper, empirical_dra
from .core import CapacityError, InvalidArgument, ModuliSet, SearchExhausted, check_histogram
from .decoder import (aggregate_batch, analytic_mse, baseline_bits, baseline_mse, build_design, comm_cost_bits,
                      decode, default_lambda, worst_case_mse_bound)
from .mechanisms import KINDS, MechanismKind, estimate_baseline, perturb_batch, tally
from .moduli import ModuliChoice, ModuliSearchConfig, cached_choose_moduli, check_moduli, design_kappa

log = logging.getLogger(__name__)

CSV_HEADER = ("trial", "mech", "k", "eps", "n", "dist", "mse", "bits_per_user", "decode_ms",
              "dra_empirical", "dra_analytic", "kappa", "solver_iters")


# ---------------------------------------------------------------------------
# data


def gen_zipf(k: int, s: float) -> np.ndarray:
    """Exact Zipf histogram ``f_v ~ (v + 1)^-s``."""
    if not s > 0:
        raise InvalidArgument("Zipf exponent must be positive")
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    w = np.arange(1, k + 1, dtype=np.float64) ** -s
    return w / w.sum()


def gen_spike(k: int) -> np.ndarray:
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    f = np.zeros(k)
    f[0] = 1.0
    return f


def gen_uniform(k: int) -> np.ndarray:
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    return np.full(k, 1.0 / k)


def parse_dist(spec: str, k: int) -> np.ndarray:
    """``zipf:S``, ``spike`` or ``uniform`` to a histogram over ``[0, k)``."""
    name, _, arg = spec.partition(":")
    if name == "zipf":
        try:
            s = float(arg) if arg else 3.0
        except ValueError:
            raise InvalidArgument(f"bad Zipf exponent in {spec!r}") from None
        return gen_zipf(k, s)
    if name == "spike" and not arg:
        return gen_spike(k)
    if name == "uniform" and not arg:
        return gen_uniform(k)
    raise InvalidArgument(f"unknown distribution {spec!r}")


def draw_dataset(f, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. draws from ``f`` by inverse CDF."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    f = check_histogram(f)
    cdf = np.cumsum(f)
    idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    return np.minimum(idx, f.size - 1).astype(np.int64)


# ---------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class ExperimentConfig:
    mechs: tuple[str, ...]
    k: int
    n: int
    eps_grid: tuple[float, ...]
    dist: str = "zipf:3"
    trials: int = 1
    seed: int = 0
    lam: str | float = "auto"
    moduli_cache: str | None = None
    workers: int = 1
    attack: bool = True
    timing: bool = False
    search: ModuliSearchConfig = field(default_factory=ModuliSearchConfig)

    def validate(self) -> None:
        if not self.mechs:
            raise InvalidArgument("no mechanisms selected")
        bad = [m for m in self.mechs if m not in KINDS]
        if bad:
            raise InvalidArgument(f"unknown mechanisms {bad}")
        if self.k < 2:
            raise InvalidArgument("k must be >= 2")
        if self.n < 1:
            raise InvalidArgument("n must be >= 1")
        if self.trials < 1:
            raise InvalidArgument("trials must be >= 1")
        if not self.eps_grid or any(not (e > 0 and math.isfinite(e)) for e in self.eps_grid):
            raise InvalidArgument("eps grid must be non-empty and strictly positive")
        if self.workers < 1:
            raise InvalidArgument("workers must be >= 1")
        parse_dist(self.dist, self.k)
        self.lambda_for(self.eps_grid[0])

    def lambda_for(self, eps: float) -> float:
        if self.lam == "auto":
            return default_lambda(eps)
        try:
            lam = float(self.lam)
        except (TypeError, ValueError):
            raise InvalidArgument(f"bad lambda {self.lam!r}") from None
        if not lam >= 0:
            raise InvalidArgument("lambda must be >= 0")
        return lam


@dataclass
class ExperimentRecord:
    trial: int
    mech: str
    k: int
    eps: float
    n: int
    dist: str
    mse: float
    bits_per_user: float
    decode_ms: float
    dra_empirical: float | None
    dra_analytic: float | None
    kappa: float | None
    solver_iters: int


def trial_rng(root: int, mech: str, eps: float, trial: int) -> np.random.Generator:
    """Counter-based stream for one (mechanism, eps, trial) job."""
    lo, hi = struct.unpack("<II", struct.pack("<d", float(eps)))
    seq = np.random.SeedSequence([root, zlib.crc32(mech.encode()), lo, hi, trial])
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class _Plan:
    kind: MechanismKind
    lam: float
    bits: float
    kappa: float | None
    design: object = None


def _plan(cfg: ExperimentConfig, mech: str, eps: float, choices: dict) -> _Plan:
    if mech != "mss":
        return _Plan(MechanismKind(mech, cfg.k, eps), 0.0, baseline_bits(mech, cfg.k, eps), None)
    choice: ModuliChoice = choices[eps]
    ms = choice.moduli
    return _Plan(MechanismKind("mss", cfg.k, eps, ms), cfg.lambda_for(eps), comm_cost_bits(ms),
                 choice.kappa, build_design(ms))


def _run_trial(cfg: ExperimentConfig, plan: _Plan, f: np.ndarray, trial: int) -> ExperimentRecord:
    kind = plan.kind
    rng = trial_rng(cfg.seed, kind.tag, kind.eps, trial)
    values = draw_dataset(f, cfg.n, rng)
    reports = perturb_batch(kind, values, rng)
    t0 = time.perf_counter()
    if kind.tag == "mss":
        counts = aggregate_batch(reports.blocks, reports.subsets, kind.moduli)
        res = decode(counts, kind.moduli, lam=plan.lam, design=plan.design)
        f_hat, iters = res.f_hat, res.solver.iterations
    else:
        f_hat = estimate_baseline(kind.tag, tally(kind.tag, reports, cfg.k), cfg.k, kind.eps, cfg.n)
        iters = 0
    elapsed = (time.perf_counter() - t0) * 1e3
    dra_emp = dra_an = None
    if cfg.attack:
        guesses = attack_guesses(kind, reports, rng)
        dra_emp = float(np.mean(guesses == values))
        dra_an = dra_analytic(kind, f)
    return ExperimentRecord(
        trial=trial, mech=kind.tag, k=cfg.k, eps=kind.eps, n=cfg.n, dist=cfg.dist,
        mse=float(np.mean((f_hat - f) ** 2)), bits_per_user=plan.bits,
        decode_ms=elapsed if cfg.timing else 0.0, dra_empirical=dra_emp, dra_analytic=dra_an,
        kappa=plan.kappa, solver_iters=int(iters),
    )


def resolve_moduli(cfg: ExperimentConfig) -> dict[float, ModuliChoice]:
    """Moduli per eps, through the JSON cache when one is configured."""
    if "mss" not in cfg.mechs:
        return {}
    return {eps: cached_choose_moduli(cfg.k, eps, cfg.search, cfg.moduli_cache) for eps in cfg.eps_grid}


def run_experiment(cfg: ExperimentConfig) -> list[ExperimentRecord]:
    """All (mechanism, eps, trial) jobs, ordered by that triple."""
    cfg.validate()
    f = parse_dist(cfg.dist, cfg.k)
    choices = resolve_moduli(cfg)
    jobs = []
    for mech in cfg.mechs:
        for eps in cfg.eps_grid:
            plan = _plan(cfg, mech, eps, choices)
            jobs.extend((plan, t) for t in range(cfg.trials))
    if cfg.workers == 1:
        return [_run_trial(cfg, plan, f, t) for plan, t in jobs]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(lambda job: _run_trial(cfg, job[0], f, job[1]), jobs))


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_csv(records: Sequence[ExperimentRecord], path) -> None:
    if not records:
        raise InvalidArgument("no records to write")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([_fmt(v) for v in astuple(r)])


def read_csv(path) -> list[ExperimentRecord]:
    types = {fl.name: fl.type for fl in fields(ExperimentRecord)}
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise InvalidArgument(f"unexpected CSV header in {path}")
        for row in reader:
            vals = {}
            for name, raw in row.items():
                kind = types[name]
                if raw == "":
                    vals[name] = None
                elif kind == "int":
                    vals[name] = int(raw)
                elif kind == "str":
                    vals[name] = raw
                else:
                    vals[name] = float(raw)
            out.append(ExperimentRecord(**vals))
    return out


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def _ticks(lo: float, hi: float, log_scale: bool) -> list[float]:
    if log_scale:
        a, b = math.floor(math.log10(lo)), math.ceil(math.log10(hi))
        return [10.0**e for e in range(a, b + 1)]
    if hi == lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / 4))
    for mult in (1, 2, 5, 10):
        if (hi - lo) / (step * mult) <= 6:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def emit_svg(records: Sequence[ExperimentRecord], path, x: str = "eps", y: str = "mse",
             group_by: str = "mech", log_y: bool = True, title: str | None = None) -> None:
    """Line chart of the per-group mean of ``y`` against ``x``."""
    if not records:
        raise InvalidArgument("no records to plot")
    series: dict[str, dict[float, list[float]]] = {}
    for r in records:
        yv = getattr(r, y)
        if yv is None:
            continue
        series.setdefault(str(getattr(r, group_by)), {}).setdefault(float(getattr(r, x)), []).append(float(yv))
    if not series:
        raise InvalidArgument(f"no values of {y!r} to plot")
    lines = {g: sorted((xv, float(np.mean(ys))) for xv, ys in pts.items()) for g, pts in series.items()}
    xs = [p[0] for pts in lines.values() for p in pts]
    ys = [p[1] for pts in lines.values() for p in pts]
    if log_y and min(ys) <= 0:
        log_y = False
    W, H, L, R, T, B = 640, 420, 70, 130, 40, 50
    x0, x1 = min(xs), max(xs)
    if x0 == x1:
        x0, x1 = x0 - 0.5, x1 + 0.5
    ticks_y = _ticks(min(ys), max(ys), log_y)
    y0, y1 = (ticks_y[0], ticks_y[-1]) if log_y else (min(ys + ticks_y), max(ys + ticks_y))
    if y0 == y1:
        y0, y1 = y0 - 1, y1 + 1

    def px(v):
        return L + (v - x0) / (x1 - x0) * (W - L - R)

    def py(v):
        if log_y:
            t = (math.log10(v) - math.log10(y0)) / (math.log10(y1) - math.log10(y0))
        else:
            t = (v - y0) / (y1 - y0)
        return H - B - t * (H - T - B)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
           'font-family="sans-serif" font-size="12">',
           f'<rect width="{W}" height="{H}" fill="white"/>']
    if title:
        out.append(f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    out.append(f'<line class="axis" x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>')
    out.append(f'<line class="axis" x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>')
    for tv in _ticks(x0, x1, False):
        out.append(f'<text x="{px(tv):.1f}" y="{H - B + 16}" text-anchor="middle">{tv:g}</text>')
    for tv in ticks_y:
        out.append(f'<line x1="{L}" y1="{py(tv):.1f}" x2="{W - R}" y2="{py(tv):.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{L - 6}" y="{py(tv) + 4:.1f}" text-anchor="end">{tv:.3g}</text>')
    out.append(f'<text x="{(L + W - R) / 2:.1f}" y="{H - 12}" text-anchor="middle">{escape(x)}</text>')
    out.append(f'<text x="16" y="{(T + H - B) / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(T + H - B) / 2:.1f})">{escape(y)}{" (log)" if log_y else ""}</text>')
    for i, (name, pts) in enumerate(sorted(lines.items())):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in pts)
        out.append(f'<polyline class="series" data-group="{escape(name)}" fill="none" stroke="{color}" '
                   f'stroke-width="2" points="{coords}"/>')
        ly = T + 14 + 18 * i
        out.append(f'<line x1="{W - R + 10}" y1="{ly}" x2="{W - R + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - R + 36}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# command line


EXIT_OK, EXIT_CONFIG, EXIT_SEARCH, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def parse_eps_grid(text: str) -> tuple[float, ...]:
    """``start:stop:step`` (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            a, b, step = (float(v) for v in text.split(":"))
            if not step > 0 or b < a:
                raise ValueError
            count = int(math.floor((b - a) / step + 1e-9)) + 1
            return tuple(round(a + i * step, 12) for i in range(count))
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise InvalidArgument(f"bad eps grid {text!r}") from None


def _search_args(p: argparse.ArgumentParser, trials_flag: str = "--search-trials") -> None:
    p.add_argument("--kappa-max", type=float, default=10.0)
    p.add_argument("--ell-max", type=int, default=20)
    p.add_argument("--beta", type=float, default=20.0)
    p.add_argument(trials_flag, dest="search_trials", type=int, default=1000, help="moduli search trials per block count")
    p.add_argument("--cache", default=None, help="JSON moduli cache")


def _search_cfg(args, seed: int) -> ModuliSearchConfig:
    return ModuliSearchConfig(kappa_max=args.kappa_max, ell_max=args.ell_max, beta=args.beta,
                              trials=args.search_trials, seed=seed)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mssfo", description="Modular subset selection benchmark")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("moduli", help="search moduli for (k, eps)")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    _search_args(p, "--trials")

    p = sub.add_parser("simulate", help="run the utility benchmark")
    p.add_argument("--mech", required=True, help="comma-separated subset of grr,ss,oue,mss")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--eps-grid", required=True)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--dist", default="zipf:3")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", default="auto")
    p.add_argument("--out", required=True)
    p.add_argument("--svg", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-attack", action="store_true", help="skip the per-report attack")
    p.add_argument("--timing", action="store_true", help="record decode wall time (breaks byte-identical output)")
    _search_args(p)

    p = sub.add_parser("attack", help="empirical single-report attack rate")
    p.add_argument("--mech", required=True, choices=KINDS)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--dist", default="zipf:3")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--moduli", default=None)
    _search_args(p)

    p = sub.add_parser("analytic", help="closed-form MSE, attack rate and bits")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--dist", default="uniform")
    p.add_argument("--moduli", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    _search_args(p)
    return parser


def _parse_moduli(text: str, k: int, eps: float) -> ModuliSet:
    try:
        mods = [int(v) for v in text.split(",")]
    except ValueError:
        raise InvalidArgument(f"bad moduli list {text!r}") from None
    check_moduli(mods, k)
    return ModuliSet.build(mods, k, eps)


def _cmd_moduli(args) -> dict:
    choice = cached_choose_moduli(args.k, args.eps, _search_cfg(args, args.seed), args.cache)
    return {"k": args.k, "eps": args.eps, "moduli": list(choice.moduli.moduli), "kappa": choice.kappa,
            "analytic_mse": choice.analytic_mse, "bits": comm_cost_bits(choice.moduli)}


def _cmd_simulate(args) -> None:
    mechs = tuple(m.strip().lower() for m in args.mech.split(",") if m.strip())
    cfg = ExperimentConfig(
        mechs=mechs, k=args.k, n=args.n, eps_grid=parse_eps_grid(args.eps_grid), dist=args.dist,
        trials=args.trials, seed=args.seed, lam=args.lam, moduli_cache=args.cache, workers=args.workers,
        attack=not args.no_attack, timing=args.timing, search=_search_cfg(args, args.seed),
    )
    records = run_experiment(cfg)
    emit_csv(records, args.out)
    if args.svg:
        emit_svg(records, args.svg, title=f"MSE vs eps, k={args.k}, n={args.n}, {args.dist}")


def _cmd_attack(args) -> dict:
    f = parse_dist(args.dist, args.k)
    ms = None
    if args.mech == "mss":
        ms = (_parse_moduli(args.moduli, args.k, args.eps) if args.moduli else
              cached_choose_moduli(args.k, args.eps, _search_cfg(args, args.seed), args.cache).moduli)
    kind = MechanismKind(args.mech, args.k, args.eps, ms)
    rng = trial_rng(args.seed, "attack:" + args.mech, args.eps, 0)
    data = draw_dataset(f, args.n, rng)
    est = empirical_dra(kind, data, None, args.trials, rng)
    return {"mech": args.mech, "k": args.k, "eps": args.eps, "empirical": est.empirical, "stderr": est.stderr,
            "samples": est.trials, "analytic_exact": est.analytic,
            "analytic_upper": dra_mss_upper(ms, args.eps, args.k) if ms is not None else None}


def _cmd_analytic(args) -> list[dict]:
    k, eps, n = args.k, args.eps, args.n
    f = parse_dist(args.dist, k)
    if args.moduli:
        ms = _parse_moduli(args.moduli, k, eps)
        kappa = design_kappa(ms)
    else:
        choice = cached_choose_moduli(k, eps, _search_cfg(args, args.seed), args.cache)
        ms, kappa = choice.moduli, choice.kappa
    rows = []
    for mech in ("grr", "ss", "oue"):
        kind = MechanismKind(mech, k, eps)
        rows.append({"mech": mech, "mse": baseline_mse(mech, f, eps, n), "dra": dra_analytic(kind, f),
                     "bits": baseline_bits(mech, k, eps)})
    rows.append({"mech": "mss", "mse": analytic_mse(f, ms, n, seed=args.seed), "dra": dra_mss_exact(ms, eps, k, f),
                 "dra_upper": dra_mss_upper(ms, eps, k), "bits": comm_cost_bits(ms),
                 "moduli": list(ms.moduli), "kappa": kappa,
                 "mse_bound": worst_case_mse_bound(kappa, eps, n)})
    return rows


def _print_table(rows: list[dict]) -> None:
    print(f"{'mech':<6}{'mse':>14}{'dra':>12}{'bits':>10}")
    for r in rows:
        dra = "-" if r["dra"] is None else f"{r['dra']:.5g}"
        print(f"{r['mech']:<6}{r['mse']:>14.5g}{dra:>12}{r['bits']:>10.1f}")
    mss = rows[-1]
    print(f"mss moduli={tuple(mss['moduli'])} kappa={mss['kappa']:.4g} "
          f"mse_bound={mss['mse_bound']:.5g} dra_upper={mss['dra_upper']:.5g}")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "moduli":
            print(json.dumps(_cmd_moduli(args)))
        elif args.cmd == "simulate":
            _cmd_simulate(args)
        elif args.cmd == "attack":
            print(json.dumps(_cmd_attack(args)))
        else:
            rows = _cmd_analytic(args)
            if args.json:
                print(json.dumps(rows))
            else:
                _print_table(rows)
    except (InvalidArgument, CapacityError) as exc:
        print(f"mssfo: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SearchExhausted as exc:
        print(f"mssfo: {exc}", file=sys.stderr)
        return EXIT_SEARCH
    except OSError as exc:
        print(f"mssfo: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
