"""Command-line front end.

    rithermo run (--preset NAME | --config FILE) [--pipeline P] [--grid N]
                 [--seed S] [--out DIR] [--tol-scale X] [--samples N] [--family F]
    rithermo validate (FILE | --preset NAME)
    rithermo list-presets [--dump NAME]

Exit codes: 0 success, 1 an invariant check failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from . import presets as _presets
from .configio import config_to_dict, dump_config, load_config, locate_issues
from .dynamics import BranchCapError, Simulator, branch_all, sample_trajectories
from .markov import ANCHORED, FAMILIES, markov_sweep
from .model import ConfigError, Instant, ScenarioConfig, validate_config
from .opalg import von_neumann_entropy
from .thermo import Thermodynamics

log = logging.getLogger("rithermo")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
PIPELINES = ("average", "branches", "sample", "markov-sweep", "twobath")

TOLERANCES = {
    "sigma_nonneg": 1e-9,
    "dual_route": 1e-9,
    "power_route": 1e-9,
    "marginal_chain": 1e-9,
    "free_energy_split": 1e-10,
    "second_law_forms": 1e-9,
    "entropy_conservation": 1e-9,
    "trace": 1e-12,
    "deferred_measurement": 1e-10,
    "averaged_marginal": 1e-10,
    "average_identity": 1e-10,
    "sigma_chain": 1e-9,
    "gap_identity": 1e-10,
    "sampling_sigma": 5.0,
    "dissipation_dual_route": 1e-9,
    "dissipation_monotone": 1e-9,
    "fixed_point": 1e-9,
    "energy_balance": 1e-10,
}


@dataclass
class RunManifest:
    scenario: str
    pipeline: str = "average"
    grid: int = 20
    seed: int = 0
    out: str = "rithermo-out"
    tol_scale: float = 1.0
    samples: int = 10000
    family: str = ANCHORED
    config: dict = field(default_factory=dict)

    def digest(self) -> str:
        payload = {k: v for k, v in self.__dict__.items() if k != "out"}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def tol(self, name: str) -> float:
        return TOLERANCES[name] * self.tol_scale


@dataclass
class Check:
    name: str
    relation: str
    value: float
    tolerance: float
    passed: bool
    hard: bool = True

    @classmethod
    def at_most(cls, name, relation, value, tol, hard=True) -> "Check":
        return cls(name, relation, float(value), tol, bool(value <= tol), hard)

    @classmethod
    def at_least(cls, name, relation, value, tol, hard=True) -> "Check":
        return cls(name, relation, float(value), tol, bool(value >= -tol), hard)

    @property
    def verdict(self) -> str:
        if self.passed:
            return "PASS"
        return "FAIL" if self.hard else "INFO"


# --- formatting ---------------------------------------------------------------

def _fmt(x: Any) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: str, header: dict, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in header.items():
            fh.write(f"# {k}: {v}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def _time_cols(inst: Instant) -> list:
    return [repr(float(inst.t)), "true" if inst.minus else "false"]


def time_grid(cfg: ScenarioConfig, n: int) -> list[Instant]:
    """``n`` evenly spaced instants over the schedule plus every boundary ``t_k⁻``."""
    sch = cfg.schedule
    pts = {sch.boundary(k) for k in range(cfg.layout.n_units + 1)}
    if n >= 2:
        for t in np.linspace(sch.t0, sch.t_end, n)[1:-1]:
            pts.add(Instant(float(t)))
    return sorted(pts)


def interior_grid(cfg: ScenarioConfig, n: int) -> list[Instant]:
    """``n`` instants after the ``t_0`` preparation, ending at ``t_{n+1}⁻``."""
    sch = cfg.schedule
    ts = np.linspace(sch.t0, sch.t_end, n)
    return [Instant(float(t)) for t in ts[:-1]] + [sch.end()]


# --- pipelines -------------------------------------------------------------

LEDGER_COLUMNS = ["t", "minus", "W", "W_power", "F_SU", "Sigma", "Sigma_relent", "Sigma_S",
                  "delta_Sigma_S", "E_star", "Q1", "Q2", "S_thermo", "S_SU", "S_tot", "trace"]


def _ledger(man: RunManifest, cfg: ScenarioConfig, sim: Simulator, th: Thermodynamics,
            checks: list[Check]):
    grid = time_grid(cfg, man.grid)
    states = sim.states(grid)
    snaps = th.ledger(grid)
    s0 = von_neumann_entropy(sim.rho0)
    rows, s_tot, traces = [], [], []
    for inst, s, rho in zip(grid, snaps, states):
        st = von_neumann_entropy(rho)
        tr = float(np.trace(rho).real)
        s_tot.append(st)
        traces.append(tr)
        rows.append(_time_cols(inst) + [s.W, s.W_power, s.F_SU, s.Sigma, s.Sigma_relent, s.Sigma_S,
                                        s.delta_Sigma_S, s.E_star, s.Q1, s.Q2, s.S_thermo,
                                        s.S_SU, st, tr])

    def add(name, eq, value, hard=True, upper=True):
        tol = man.tol(name)
        ok = (value <= tol) if upper else (value >= -tol)
        checks.append(Check(name, eq, float(value), tol, bool(ok), hard))

    add("sigma_nonneg", "D[tot] - D[SU] >= 0", min(s.Sigma_relent for s in snaps), upper=False)
    add("sigma_nonneg", "beta(W - dF) >= 0", min(s.Sigma for s in snaps), upper=False)
    add("dual_route", "beta(W - dF) = D[tot] - D[SU]", max(abs(s.Sigma - s.Sigma_relent) for s in snaps))
    add("power_route", "W = sum of quench jumps", max(abs(s.W - s.W_power) for s in snaps))
    add("entropy_conservation", "S[rho_tot] constant", max(abs(x - s0) for x in s_tot))
    add("trace", "tr rho_tot = 1", max(abs(t - 1) for t in traces))
    if th.beta2 is None:
        add("free_energy_split", "F = E* - TS",
            max(abs(s.F_SU - (s.E_star - s.S_thermo / cfg.beta)) for s in snaps))
        add("second_law_forms", "beta(W - dF) = dS - beta Q",
            max(abs(s.Sigma_free - s.Sigma_thermo) for s in snaps))
    marg = [s for s in snaps if s.Sigma_S is not None]
    if marg:
        add("marginal_chain", "Sigma_S >= Sigma", min(s.Sigma_S - s.Sigma for s in marg), upper=False)
        deltas = [s.delta_Sigma_S for s in marg if s.delta_Sigma_S is not None]
        if deltas:
            neg = min(deltas)
            checks.append(Check.at_least("interval_delta_min", "per-interval dSigma_S >= 0", neg, 0.0,
                                         hard=False))
    return grid, snaps, rows


def _branches(man: RunManifest, cfg, sim, th, checks, snaps_by_instant, out_rows):
    tree = branch_all(sim)
    sch = cfg.schedule
    tol = man.tol
    if cfg.layout.n_units:
        checks.append(Check.at_most("deferred_measurement", "interleaved = end-applied P_r",
                                    tree.deferred_defect, tol("deferred_measurement")))
        checks.append(Check.at_most("averaged_marginal", "sum_r rho_SB(r) = rho_SB",
                                    tree.average_defect, tol("averaged_marginal")))
    worst = {k: 0.0 for k in ("w", "q1", "q2", "q", "gap", "f")}
    chain = np.inf
    for k in range(1, cfg.layout.n_units + 1):
        inst = sch.boundary(k)
        snap = snaps_by_instant[inst]
        summ = th.stochastic_summary(tree, inst)
        for led in summ.ledgers:
            out_rows.append(_time_cols(inst) + [
                "".join(map(str, led.outcomes)), led.prob, led.w, led.f_SU, led.sigma, led.e_star,
                led.q, led.q_meas, led.q1, led.q2, led.s_SU, led.S_cond])
        worst["w"] = max(worst["w"], abs(summ.avg_w - snap.W))
        worst["q1"] = max(worst["q1"], abs(summ.avg_q1 - snap.Q1))
        worst["q2"] = max(worst["q2"], abs(summ.avg_q2 - snap.Q2))
        worst["q"] = max(worst["q"], abs(summ.avg_q - snap.Q))
        worst["gap"] = max(worst["gap"], abs(summ.avg_sigma - snap.Sigma - summ.gap))
        worst["f"] = max(worst["f"], abs(summ.avg_f - snap.F_SU - summ.avg_q_meas + summ.gap / cfg.beta))
        chain = min(chain, summ.avg_sigma - snap.Sigma, summ.gap)
        if summ.renormalized:
            checks.append(Check("pruned_measure", "renormalised averages", summ.pruned_measure,
                                1e-10, False, hard=False))
    if cfg.layout.n_units:
        t_avg = tol("average_identity")
        checks.append(Check.at_most("avg_w", "sum p w = W", worst["w"], t_avg))
        checks.append(Check.at_most("avg_q1", "sum p q1 = Q1", worst["q1"], t_avg))
        checks.append(Check.at_most("avg_q2", "sum p q2 = Q2", worst["q2"], t_avg))
        checks.append(Check.at_most("avg_f_gap", "sum p f - F = sum p q_meas - gap/beta", worst["f"], t_avg))
        checks.append(Check.at_most("gap_identity", "sum p sigma - Sigma = gap", worst["gap"],
                                    tol("gap_identity")))
        checks.append(Check.at_least("sigma_chain", "sum p sigma >= Sigma >= 0", chain, tol("sigma_chain")))
    return tree


BRANCH_COLUMNS = ["t", "minus", "outcomes", "prob", "w", "f_SU", "sigma", "e_star", "q", "q_meas",
                  "q1", "q2", "s_SU", "S_cond"]


def _sample(man: RunManifest, cfg, sim, checks) -> list[list]:
    leaves = sample_trajectories(sim, man.seed, man.samples)
    exact = None
    try:
        exact = {leaf.outcomes: leaf.prob for leaf in branch_all(sim, check=False).leaves}
    except BranchCapError:
        log.info("exact probabilities unavailable: branch cap exceeded")
    rows, worst = [], 0.0
    for s in leaves:
        p = None if exact is None else exact.get(s.node.outcomes, 0.0)
        z = None
        if p is not None:
            sd = np.sqrt(max(p * (1 - p), 1e-300) / man.samples)
            z = abs(s.weight - p) / sd if sd > 0 else 0.0
            worst = max(worst, z)
        rows.append(["".join(map(str, s.node.outcomes)), s.count, s.weight, p, z])
    if exact is not None:
        tol = man.tol("sampling_sigma")
        checks.append(Check.at_most("sampling_binomial", "sampled = exact record probabilities", worst, tol))
    return rows


def _markov(man: RunManifest, cfg, checks) -> list[list]:
    times = interior_grid(cfg, man.grid)
    res = markov_sweep(cfg, times, man.family)
    rows = []
    for r in res.rows:
        rows.append(_time_cols(r.t1) + _time_cols(r.t2) + [
            r.min_choi, r.tp_defect, r.condition, r.truncated, r.verdict, r.fixed_point_defect,
            r.delta_sigma_s, r.free_energy_route, r.relent_route, r.guaranteed])
    dual = max((abs(r.free_energy_route - r.relent_route) for r in res.rows), default=0.0)
    checks.append(Check.at_most("dissipation_dual_route", "-beta dF_S = D1 - D2", dual,
                                man.tol("dissipation_dual_route")))
    fp = max(r.fixed_point_defect for r in res.rows) if res.rows else 0.0
    qualifies = _undriven_after_preparation(cfg)
    checks.append(Check.at_most("fixed_point", "Lambda pi*_S = pi*_S", fp, man.tol("fixed_point"),
                                hard=qualifies))
    protected = [r for r in res.rows if r.guaranteed and r.verdict == "markovian"
                 and r.fixed_point_defect <= man.tol("fixed_point")]
    if protected:
        low = min(r.delta_sigma_s for r in protected)
        checks.append(Check.at_least("dissipation_monotone", "dSigma_S >= 0 where CP-divisible", low,
                                     man.tol("dissipation_monotone")))
    backflow = [r for r in res.rows if r.delta_sigma_s < -1e-4 and r.min_choi < -1e-4]
    checks.append(Check("backflow_pairs", "dSigma_S < 0 with non-CP map", float(len(backflow)), 0.0,
                        not backflow, hard=False))
    return rows


MARKOV_COLUMNS = ["t1", "t1_minus", "t2", "t2_minus", "min_choi", "tp_defect", "condition",
                  "truncated", "verdict", "fixed_point_defect", "delta_Sigma_S",
                  "free_energy_route", "relent_route", "sign_guaranteed"]


def _undriven_after_preparation(cfg: ScenarioConfig) -> bool:
    sch = cfg.schedule
    driven = bool(sch.h_s.switches) or (sch.v_sb is not None and bool(sch.v_sb.switches))
    coupled = any(any(np.any(op != 0) for _, op in e) for e in sch.v_su)
    return not driven and not coupled and set(sch.kicks) <= {0}


def _two_bath(man, cfg, snaps, checks):
    if not cfg.two_bath:
        raise ConfigError([])
    tol = man.tol("sigma_nonneg")
    low = min(s.Sigma_thermo for s in snaps)
    checks.append(Check("two_bath_second_law", "dS - beta1 Q1 - beta2 Q2 >= 0", low, tol, low >= -tol))
    rel = max(abs(s.Sigma_thermo - s.Sigma_relent) for s in snaps)
    checks.append(Check("two_bath_relent", "Sigma = D[tot||pi_SB1U pi_B2] - D[SU]", rel,
                        man.tol("dual_route"), rel <= man.tol("dual_route")))
    e0 = snaps[0].E_star
    bal = max(abs(s.E_star - e0 - (s.W_power + s.Q1 + s.Q2)) for s in snaps)
    checks.append(Check("energy_balance", "W + Q1 + Q2 = dE*", bal, man.tol("energy_balance"),
                        bal <= man.tol("energy_balance")))


def run(man: RunManifest, cfg: ScenarioConfig) -> tuple[int, list[Check]]:
    """Execute one manifest and write its artifacts under ``man.out``."""
    os.makedirs(man.out, exist_ok=True)
    header = {"scenario": man.scenario, "pipeline": man.pipeline, "manifest_hash": man.digest(),
              "seed": man.seed, "grid": man.grid, "tol_scale": repr(man.tol_scale),
              "tolerances": json.dumps({k: man.tol(k) for k in sorted(TOLERANCES)}, sort_keys=True)}
    checks: list[Check] = []
    if man.pipeline == "markov-sweep":
        rows = _markov(man, cfg, checks)
        write_csv(os.path.join(man.out, "markov.csv"), header, MARKOV_COLUMNS, rows)
    else:
        sim = Simulator(cfg)
        th = Thermodynamics(sim)
        grid, snaps, rows = _ledger(man, cfg, sim, th, checks)
        write_csv(os.path.join(man.out, "ledger.csv"), header, LEDGER_COLUMNS, rows)
        if man.pipeline == "twobath":
            _two_bath(man, cfg, snaps, checks)
        if man.pipeline in ("branches", "twobath") and cfg.layout.n_units:
            brows: list[list] = []
            _branches(man, cfg, sim, th, checks, dict(zip(grid, snaps)), brows)
            write_csv(os.path.join(man.out, "branches.csv"), header, BRANCH_COLUMNS, brows)
        if man.pipeline == "sample":
            srows = _sample(man, cfg, sim, checks)
            write_csv(os.path.join(man.out, "samples.csv"), header,
                      ["outcomes", "count", "frequency", "exact_prob", "z_score"], srows)
    write_csv(os.path.join(man.out, "inequalities.csv"), header,
              ["check", "relation", "value", "tolerance", "verdict"],
              [[c.name, c.relation, c.value, c.tolerance, c.verdict] for c in checks])
    failed = any(c.hard and not c.passed for c in checks)
    return (EXIT_FAIL if failed else EXIT_OK), checks


# --- argument handling ----------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rithermo", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a pipeline on a preset or scenario file")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(_presets.PRESETS))
    src.add_argument("--config", help="YAML scenario file")
    r.add_argument("--pipeline", choices=PIPELINES, default="average")
    r.add_argument("--grid", type=int, default=20, help="number of time samples")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="rithermo-out")
    r.add_argument("--tol-scale", type=float, default=1.0)
    r.add_argument("--samples", type=int, default=10000, help="trajectories for --pipeline sample")
    r.add_argument("--family", choices=FAMILIES, default=ANCHORED,
                   help="tomography preparations for --pipeline markov-sweep")

    v = sub.add_parser("validate", help="check a scenario without running it")
    v.add_argument("config", nargs="?")
    v.add_argument("--preset", choices=sorted(_presets.PRESETS))

    ls = sub.add_parser("list-presets", help="list embedded scenarios")
    ls.add_argument("--dump", metavar="NAME", choices=sorted(_presets.PRESETS),
                    help="print the preset as a scenario file")
    return p


def _load(args) -> tuple[ScenarioConfig | None, str]:
    if getattr(args, "preset", None):
        return _presets.preset(args.preset), args.preset
    cfg, issues, root = load_config(args.config)
    if issues:
        for i in issues:
            print(f"{args.config}: {i}", file=sys.stderr)
        return None, args.config
    found = validate_config(cfg)
    if found:
        for i in locate_issues(found, root):
            print(f"{args.config}: {i}", file=sys.stderr)
        return None, args.config
    return cfg, args.config


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "list-presets":
        if args.dump:
            sys.stdout.write(dump_config(_presets.preset(args.dump)))
        else:
            for name, fn in _presets.PRESETS.items():
                doc = (fn.__doc__ or "").strip().split("\n")[0].replace("``", "")
                print(f"{name}\t{doc}")
        return EXIT_OK

    if args.command == "validate":
        if not args.config and not args.preset:
            print("validate: give a scenario file or --preset", file=sys.stderr)
            return EXIT_CONFIG
        try:
            cfg, _ = _load(args)
        except OSError as e:
            print(f"validate: {e}", file=sys.stderr)
            return EXIT_CONFIG
        if cfg is None:
            return EXIT_CONFIG
        issues = validate_config(cfg)
        for i in issues:
            print(str(i))
        if not issues:
            print("ok")
        return EXIT_CONFIG if issues else EXIT_OK

    try:
        cfg, label = _load(args)
    except OSError as e:
        print(f"run: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg is None:
        return EXIT_CONFIG
    if args.pipeline == "twobath" and not cfg.two_bath:
        print("run: pipeline twobath needs a two-bath scenario", file=sys.stderr)
        return EXIT_CONFIG
    man = RunManifest(label, args.pipeline, args.grid, args.seed, args.out, args.tol_scale,
                      args.samples, args.family, config_to_dict(cfg))
    try:
        code, checks = run(man, cfg)
    except ConfigError as e:
        for i in e.issues:
            print(f"{label}: {i}", file=sys.stderr)
        return EXIT_CONFIG
    except BranchCapError as e:
        print(f"run: {e} (try --pipeline sample)", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"run: {e}", file=sys.stderr)
        return EXIT_CONFIG
    for c in checks:
        print(f"{c.verdict:4s}  {c.name:22s} {c.relation:40s} value={c.value:.3e} tol={c.tolerance:.1e}")
    return code


if __name__ == "__main__":
    sys.exit(main())
