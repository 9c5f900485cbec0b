"""YAML scenario files.

Matrices are nested lists of rows whose entries are ``[re, im]`` pairs (a
bare real number is accepted for ``[x, 0]``).  Piecewise operators are
``{initial: M, switches: [{t: .., op: M}, ...]}``.  Every error carries the
dotted field path and, when the document was parsed from text, its line.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any

import numpy as np
import yaml

from .model import DEGENERATE, ConfigError, Issue, PiecewiseOperator, ProtocolSchedule, ScenarioConfig
from .opalg import CompositeLayout


@dataclass
class LocatedIssue:
    field: str
    message: str
    line: int | None = None

    def __str__(self):
        where = f"line {self.line}: " if self.line is not None else ""
        return f"{where}{self.field}: {self.message}"


class ParseError(ConfigError):
    pass


# --- encoding -------------------------------------------------------------

def encode_matrix(m: np.ndarray) -> list:
    m = np.asarray(m, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in m]


def _encode_piecewise(p: PiecewiseOperator | None):
    if p is None:
        return None
    return {"initial": encode_matrix(p.initial),
            "switches": [{"t": float(t), "op": encode_matrix(op)} for t, op in p.switches]}


def config_to_dict(cfg: ScenarioConfig) -> dict:
    lay, sch = cfg.layout, cfg.schedule
    out: dict[str, Any] = {
        "name": cfg.name,
        "modes": sorted(cfg.modes),
        "beta": float(cfg.beta),
        "beta2": None if cfg.beta2 is None else float(cfg.beta2),
        "layout": {
            "system": lay.dim(["S"]),
            "bath": lay.dim(["B"]) if lay.has_bath else None,
            "bath2": lay.dim(["B2"]) if lay.has_bath2 else None,
            "units": [lay.dim([u]) for u in lay.units()],
        },
        "boundaries": [float(b) for b in sch.boundaries],
        "h_s": _encode_piecewise(sch.h_s),
        "h_b": None if sch.h_b is None else encode_matrix(sch.h_b),
        "v_sb": _encode_piecewise(sch.v_sb),
        "h_b2": None if sch.h_b2 is None else encode_matrix(sch.h_b2),
        "v_sb2": _encode_piecewise(sch.v_sb2),
        "h_u": [encode_matrix(h) for h in sch.h_u],
        "v_su": [[{"t": float(t), "op": encode_matrix(op)} for t, op in entries]
                 for entries in sch.v_su],
        "kicks": {int(k): encode_matrix(v) for k, v in sorted(sch.kicks.items())},
        "units": ({"joint": encode_matrix(cfg.joint_unit_state)} if cfg.joint_unit_state is not None
                  else {"states": [encode_matrix(r) for r in cfg.unit_states]}),
        "measurements": [None if m is None else [encode_matrix(p) for p in m]
                         for m in cfg.measurements],
    }
    return out


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None, width=100)


# --- decoding -------------------------------------------------------------

class _Decoder:
    def __init__(self):
        self.issues: list[Issue] = []

    def fail(self, path: str, msg: str):
        self.issues.append(Issue(path, msg))

    def matrix(self, x, path: str):
        if x is None:
            return None
        try:
            rows = []
            for row in x:
                vals = []
                for z in row:
                    if isinstance(z, (list, tuple)):
                        if len(z) != 2:
                            raise ValueError("complex entries must be [re, im] pairs")
                        vals.append(complex(float(z[0]), float(z[1])))
                    elif isinstance(z, (int, float)) and not isinstance(z, bool):
                        vals.append(complex(float(z), 0.0))
                    else:
                        raise ValueError(f"bad matrix entry {z!r}")
                rows.append(vals)
            m = np.array(rows, dtype=complex)
        except (TypeError, ValueError) as e:
            self.fail(path, f"not a matrix of [re, im] pairs ({e})")
            return None
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            self.fail(path, f"matrix must be square, got shape {m.shape}")
            return None
        return m

    def number(self, x, path: str, required: bool = True):
        if x is None:
            if required:
                self.fail(path, "missing")
            return None
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            self.fail(path, f"expected a number, got {x!r}")
            return None
        return float(x)

    def switches(self, entries, path: str) -> tuple:
        out = []
        if entries is None:
            return ()
        if not isinstance(entries, list):
            self.fail(path, "expected a list of {t, op} entries")
            return ()
        for i, e in enumerate(entries):
            p = f"{path}[{i}]"
            if not isinstance(e, dict) or "t" not in e or "op" not in e:
                self.fail(p, "expected {t: time, op: matrix}")
                continue
            t = self.number(e["t"], p + ".t")
            op = self.matrix(e["op"], p)
            if t is not None and op is not None:
                out.append((t, op))
        return tuple(out)

    def piecewise(self, x, path: str) -> PiecewiseOperator | None:
        if x is None:
            return None
        if not isinstance(x, dict):
            m = self.matrix(x, path)
            return None if m is None else PiecewiseOperator(m)
        init = self.matrix(x.get("initial"), path + ".initial")
        sw = self.switches(x.get("switches"), path + ".switches")
        if init is None:
            if "initial" not in x:
                self.fail(path + ".initial", "missing")
            return None
        try:
            return PiecewiseOperator(init, sw)
        except ValueError as e:
            self.fail(path + ".switches", str(e))
            return None


_KNOWN = {"name", "modes", "beta", "beta2", "layout", "boundaries", "h_s", "h_b", "v_sb", "h_b2",
          "v_sb2", "h_u", "v_su", "kicks", "units", "measurements"}


def config_from_dict(d: dict) -> ScenarioConfig:
    """Build a config; raises :class:`ConfigError` listing every decoding issue."""
    dec = _Decoder()
    if not isinstance(d, dict):
        raise ConfigError([Issue("<root>", "scenario file must be a mapping")])
    for key in d:
        if key not in _KNOWN:
            dec.fail(str(key), "unknown field")
    lay_d = d.get("layout") or {}
    layout = None
    try:
        units = lay_d.get("units") or []
        layout = CompositeLayout.build(int(lay_d["system"]), bath=lay_d.get("bath"),
                                       bath2=lay_d.get("bath2"), units=[int(u) for u in units])
    except KeyError:
        dec.fail("layout.system", "missing")
    except (TypeError, ValueError) as e:
        dec.fail("layout", str(e))
    beta = dec.number(d.get("beta"), "beta")
    beta2 = dec.number(d.get("beta2"), "beta2", required=False)
    modes = d.get("modes", [DEGENERATE])
    if isinstance(modes, str):
        modes = [modes]
    bounds = d.get("boundaries")
    if not isinstance(bounds, list) or not bounds:
        dec.fail("boundaries", "expected a list of interval boundaries")
        bounds = []
    bounds = [dec.number(b, f"boundaries[{i}]") for i, b in enumerate(bounds)]
    h_s = dec.piecewise(d.get("h_s"), "h_s")
    if h_s is None and "h_s" not in d:
        dec.fail("h_s", "missing")
    h_b = dec.matrix(d.get("h_b"), "h_b")
    v_sb = dec.piecewise(d.get("v_sb"), "v_sb")
    h_b2 = dec.matrix(d.get("h_b2"), "h_b2")
    v_sb2 = dec.piecewise(d.get("v_sb2"), "v_sb2")
    h_u = tuple(dec.matrix(h, f"h_u[{k}]") for k, h in enumerate(d.get("h_u") or []))
    v_su = tuple(dec.switches(e, f"v_su[{k}]") for k, e in enumerate(d.get("v_su") or []))
    kicks = {}
    for k, v in (d.get("kicks") or {}).items():
        try:
            kk = int(k)
        except (TypeError, ValueError):
            dec.fail(f"kicks[{k}]", "kick keys are unit indices")
            continue
        m = dec.matrix(v, f"kicks[{kk}]")
        if m is not None:
            kicks[kk] = m
    units = d.get("units") or {}
    joint = dec.matrix(units.get("joint"), "units.joint")
    states = tuple(dec.matrix(r, f"units.states[{k}]") for k, r in enumerate(units.get("states") or []))
    meas = []
    for k, m in enumerate(d.get("measurements") or []):
        if m is None:
            meas.append(None)
        else:
            meas.append(tuple(dec.matrix(p, f"measurements[{k}][{r}]") for r, p in enumerate(m)))
    if dec.issues:
        raise ConfigError(dec.issues)
    sched = ProtocolSchedule(tuple(bounds), h_s, h_b=h_b, v_sb=v_sb, h_b2=h_b2, v_sb2=v_sb2,
                             h_u=h_u, v_su=v_su, kicks=kicks)
    return ScenarioConfig(layout, sched, beta=beta, beta2=beta2, unit_states=states,
                          joint_unit_state=joint, measurements=tuple(meas),
                          modes=frozenset(modes), name=str(d.get("name", "custom")))


# --- line lookup ---------------------------------------------------------------

_TOKEN = re.compile(r"([^.\[\]]+)|\[(\d+)\]")


def _locate(root: yaml.Node | None, path: str) -> int | None:
    """1-based line of the deepest node along a dotted/indexed ``path``."""
    if root is None:
        return None
    node, line = root, root.start_mark.line + 1
    for name, idx in _TOKEN.findall(path):
        nxt = None
        if isinstance(node, yaml.MappingNode):
            key = name or idx
            for k, v in node.value:
                if str(k.value) == key:
                    nxt = v
                    break
        elif isinstance(node, yaml.SequenceNode) and idx:
            i = int(idx)
            if i < len(node.value):
                nxt = node.value[i]
        if nxt is None:
            break
        node, line = nxt, nxt.start_mark.line + 1
    return line


def locate_issues(issues, root: yaml.Node | None) -> list[LocatedIssue]:
    return [LocatedIssue(i.field, i.message, _locate(root, i.field)) for i in issues]


def load_config_text(text: str) -> tuple[ScenarioConfig | None, list[LocatedIssue]]:
    """Parse and decode; returns ``(config, [])`` or ``(None, issues)``.
    Structural validation is left to :func:`rithermo.model.validate_config`."""
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        return None, [LocatedIssue("<syntax>", str(e.problem),
                                   None if mark is None else mark.line + 1)]
    try:
        return config_from_dict(data), []
    except ConfigError as e:
        return None, locate_issues(e.issues, root)


def load_config(path: str) -> tuple[ScenarioConfig | None, list[LocatedIssue], yaml.Node | None]:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    cfg, issues = load_config_text(text)
    root = None
    if cfg is not None:
        root = yaml.compose(text)
    return cfg, issues, root
