"""Command line interface: ``curllod {check,solve,convergence,decay}``.

Scenarios are read from an INI file; every key is optional and falls back
to the default scenario (unit cube, ``n_coarse = 2``, ``r = 1``, scalar
``mu`` uniform in ``[1, 10]`` on a random checkerboard at scale ``h``,
``kappa = 1``, ``f = (1, 1, 1)``)::

    [scenario]
    name = default
    n_coarse = 2
    r = 1
    m = auto

    [coefficient]
    kind = random-checkerboard      ; or constant, periodic-checkerboard
    scale = h                       ; cube side, "h" or a number
    low = 1
    high = 10
    seed = 0

    [kappa]
    value = 1.0                     ; "re, im" for a complex kappa

    [load]
    a = 1, 1, 1                     ; f(x) = a + B x
    B = 0 0 0; 0 0 0; 0 0 0

    [convergence]
    H = 1/2, 1/4, 1/8
    h = 1/16

    [decay]
    m = 1, 2, 3

    [output]
    path = result.csv
"""

import argparse
import configparser
import logging
import math
import sys
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import analysis, fem, falk_winther, lod
from . import mesh as meshmod

log = logging.getLogger("curllod")


class ConfigError(ValueError):
    pass


def _number(section, key, text):
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError("[%s] %s: expected a number, got %r" % (section, key, text)) from None


def _numbers(section, key, text, sep=","):
    return [_number(section, key, t) for t in text.split(sep) if t.strip()]


@dataclass
class Scenario:
    """Everything needed to set up one run; ``h = 2^-r / n_coarse``."""

    name: str = "default"
    n_coarse: int = 2
    r: int = 1
    m: object = "auto"
    coeff_spec: dict = field(default_factory=lambda: {
        "kind": "random-checkerboard", "scale": "h", "low": 1.0, "high": 10.0, "seed": 0})
    kappa: complex = 1.0
    load: analysis.AffineField = field(default_factory=analysis.AffineField)
    H_list: tuple = (0.5, 0.25, 0.125)
    h_conv: float = 1.0 / 16
    m_list: tuple = (1, 2, 3)
    output: str = None

    @property
    def H(self):
        return 1.0 / self.n_coarse

    @property
    def h(self):
        return self.H / 2 ** self.r

    def hierarchy(self, n=None, r=None):
        n = self.n_coarse if n is None else n
        r = self.r if r is None else r
        return meshmod.refine(meshmod.build_box_mesh(n), r)

    def coefficient_on(self, mesh, h):
        spec = self.coeff_spec
        kind = spec["kind"]
        if kind == "constant":
            return fem.Coefficient.constant(mesh, spec.get("mu", 1.0), self.kappa)
        scale = h if spec.get("scale", "h") == "h" else float(spec["scale"])
        if kind == "random-checkerboard":
            return fem.Coefficient.random_checkerboard(mesh, scale, spec["low"], spec["high"],
                                                       spec["seed"], self.kappa)
        if kind == "periodic-checkerboard":
            return fem.Coefficient.periodic_checkerboard(mesh, scale, (spec["low"], spec["high"]),
                                                         self.kappa)
        raise ConfigError("[coefficient] kind: unknown %r" % kind)

    def coefficient(self, mesh):
        return self.coefficient_on(mesh, mesh.spacing)

    def m_value(self, H=None):
        if self.m == "auto":
            return lod.default_m(self.H if H is None else H)
        return int(self.m)


def load_config(path):
    """Parse an INI scenario file; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    with open(path) as fh:
        cp.read_file(fh)
    return scenario_from_config(cp)


_KEYS = {
    "scenario": {"name", "n_coarse", "r", "m"},
    "coefficient": {"kind", "scale", "low", "high", "seed", "mu"},
    "kappa": {"value"},
    "load": {"a", "b"},
    "convergence": {"h", "h_fine"},
    "decay": {"m"},
    "output": {"path"},
}


def scenario_from_config(cp):
    for sec in cp.sections():
        if sec not in _KEYS:
            raise ConfigError("unknown section [%s]" % sec)
        for key in cp[sec]:
            if key not in _KEYS[sec]:
                raise ConfigError("[%s] %s: unknown key" % (sec, key))
    sc = Scenario()
    if cp.has_section("scenario"):
        s = cp["scenario"]
        sc.name = s.get("name", sc.name).strip()
        if "n_coarse" in s:
            sc.n_coarse = _int("scenario", "n_coarse", s["n_coarse"], 1)
        if "r" in s:
            sc.r = _int("scenario", "r", s["r"], 0)
        if "m" in s:
            sc.m = "auto" if s["m"].strip() == "auto" else _int("scenario", "m", s["m"], 1)
    if cp.has_section("coefficient"):
        s = cp["coefficient"]
        spec = dict(sc.coeff_spec)
        if "kind" in s:
            kind = s["kind"].strip()
            if kind not in ("random-checkerboard", "constant", "periodic-checkerboard"):
                raise ConfigError("[coefficient] kind: unknown %r" % kind)
            spec["kind"] = kind
        if "scale" in s:
            spec["scale"] = "h" if s["scale"].strip() == "h" else _number("coefficient", "scale", s["scale"])
            if spec["scale"] != "h" and spec["scale"] <= 0:
                raise ConfigError("[coefficient] scale: must be positive")
        for key in ("low", "high", "mu"):
            if key in s:
                spec[key] = _number("coefficient", key, s[key])
        if "seed" in s:
            spec["seed"] = _int("coefficient", "seed", s["seed"], 0)
        if spec.get("low", 1.0) <= 0 or spec.get("high", 1.0) < spec.get("low", 1.0):
            raise ConfigError("[coefficient] low/high: need 0 < low <= high")
        sc.coeff_spec = spec
    if cp.has_section("kappa") and "value" in cp["kappa"]:
        vals = _numbers("kappa", "value", cp["kappa"]["value"])
        if len(vals) == 1:
            if vals[0] <= 0:
                raise ConfigError("[kappa] value: a real kappa must be positive")
            sc.kappa = vals[0]
        elif len(vals) == 2:
            if vals[1] == 0 and vals[0] <= 0:
                raise ConfigError("[kappa] value: a real kappa must be positive")
            sc.kappa = complex(vals[0], vals[1])
        else:
            raise ConfigError("[kappa] value: expected 'real' or 're, im'")
    if cp.has_section("load"):
        s = cp["load"]
        a = _numbers("load", "a", s["a"]) if "a" in s else [1.0, 1.0, 1.0]
        if len(a) != 3:
            raise ConfigError("[load] a: expected 3 components")
        B = [[0.0] * 3] * 3
        if "b" in s:
            B = [_numbers("load", "B", row, sep=None) for row in s["b"].split(";")]
            if len(B) != 3 or any(len(row) != 3 for row in B):
                raise ConfigError("[load] B: expected 3 rows of 3 numbers")
        sc.load = analysis.AffineField(tuple(a), tuple(tuple(r) for r in B))
    if cp.has_section("convergence"):
        s = cp["convergence"]
        if "h" in s:
            # configparser keys are case-insensitive: "H" and "h" collide, so the
            # list of coarse sizes is "H" and the fine size is "h_fine"
            sc.H_list = tuple(_numbers("convergence", "H", s["h"]))
        if "h_fine" in s:
            sc.h_conv = _number("convergence", "h_fine", s["h_fine"])
    if cp.has_section("decay") and "m" in cp["decay"]:
        ms = [int(x) for x in _numbers("decay", "m", cp["decay"]["m"])]
        if not ms or ms != sorted(set(ms)) or ms[0] < 1:
            raise ConfigError("[decay] m: expected an increasing list of positive integers")
        sc.m_list = tuple(ms)
    if cp.has_section("output") and "path" in cp["output"]:
        sc.output = cp["output"]["path"].strip()
    return sc


def _int(section, key, text, lo):
    try:
        v = int(text.strip())
    except ValueError:
        raise ConfigError("[%s] %s: expected an integer, got %r" % (section, key, text)) from None
    if v < lo:
        raise ConfigError("[%s] %s: must be >= %d" % (section, key, lo))
    return v


# -- commands -------------------------------------------------------------------

def _report(name, ok, detail=""):
    print("%-28s %s%s" % (name, "PASS" if ok else "FAIL", ("  " + detail) if detail else ""))
    return ok


def cmd_check(sc, args):
    hier = sc.hierarchy()
    if args.inject_orientation_fault:
        # flip one stored edge sign of the fine mesh
        signs = np.array(hier.fine.tet_edge_signs)
        signs[0, 0] *= -1
        hier.fine.tet_edge_signs = signs
    c, f = hier.coarse, hier.fine
    results = []
    results.append(_report("mesh conformity", meshmod.check_conformity(c) and
                           meshmod.check_conformity(f)))
    results.append(_report("orientation", meshmod.check_orientation(c) and
                           meshmod.check_orientation(f)))
    results.append(_report("nestedness", meshmod.check_nested(hier)))

    full_n = fem.DofMap.nedelec(f, ringed=False)
    full_rt = fem.DofMap.raviart_thomas(f, ringed=False)
    G = fem.assemble_gradient(f, fem.DofMap.lagrange(f, ringed=False), full_n)
    D = fem.curl_incidence(f, full_rt, full_n)
    Div = fem.assemble_auxiliary(f, "rt-div", fem.DofMap.p0(f), col_dofs=full_rt)
    curl_grad = abs(D @ G).max()
    div_curl = abs(Div @ D).max()
    results.append(_report("de Rham complex", curl_grad < 1e-10 and div_curl < 1e-10 and
                           f.euler_characteristic() == 1,
                           "|curl grad| = %.1e, |div curl| = %.1e" % (curl_grad, div_curl)))

    try:
        proj = falk_winther.projection(hier, check=False)
    except np.linalg.LinAlgError as exc:
        _report("projection identity", False, str(exc))
        return 1
    if args.dump_projection:
        proj.dump(args.dump_projection)
    err, _ = proj.projection_defect()
    results.append(_report("projection identity", err <= 1e-8, "|P Prol - I| = %.2e" % err))
    worst = commuting_defect(proj, samples=10, seed=0)
    results.append(_report("commuting on gradients", worst <= 1e-8, "ratio %.2e" % worst))
    bad = proj.locality_violations()
    results.append(_report("locality", not bad, "%d rows outside patch" % len(bad)))

    coeff = sc.coefficient(f)
    problem = lod.CorrectorProblem(hier, coeff, proj)
    try:
        problem.corrector_basis(sc.m_value(), keep_elements=True, threads=args.threads)
        ok, detail = True, "m = %d" % sc.m_value()
    except (lod.CorrectorError, np.linalg.LinAlgError) as exc:
        ok, detail = False, str(exc)
    results.append(_report("corrector kernel/support", ok, detail))
    return 0 if all(results) else 1


def commuting_defect(proj, samples=10, seed=0):
    """Max over random fine P1 fields of ``||curl P grad theta|| / ||grad theta||_{H(curl)}``."""
    hier = proj.hier
    c, f = hier.coarse, hier.fine
    rng = np.random.default_rng(seed)
    p1 = fem.DofMap.lagrange(f)
    G = fem.assemble_gradient(f, p1, proj.fine_dofs)
    rt = fem.DofMap.raviart_thomas(c, ringed=False)
    D = fem.curl_incidence(c, rt, proj.coarse_dofs)
    Mrt = fem.assemble_auxiliary(c, "rt-mass", rt)
    worst = 0.0
    for _ in range(samples):
        v = G @ rng.standard_normal(p1.n_dofs)
        w = D @ (proj.P @ v)
        curl = math.sqrt(max(float(w @ (Mrt @ w)), 0.0))
        worst = max(worst, curl / analysis.norm_hcurl(f, proj.fine_dofs, v))
    return worst


def _write_rows(rows, sc, args):
    analysis.write_csv(rows, args.out or sc.output or sys.stdout, timings=args.timings)


def cmd_solve(sc, args):
    hier = sc.hierarchy()
    coeff = sc.coefficient(hier.fine)
    proj = falk_winther.projection(hier)
    if args.dump_projection:
        proj.dump(args.dump_projection)
    m = sc.m_value()
    rep = analysis.error_report(hier, coeff, sc.load, m, proj=proj, threads=args.threads)
    rows = [{"scenario": sc.name, "H": rep.H, "h": rep.h, "m": m, "err_hcurl": rep.err_hcurl,
             "err_hdivdual": rep.err_hdivdual, "seconds": rep.seconds}]
    _write_rows(rows, sc, args)
    print("solve: H=%g h=%g m=%d  |u_h - u_ms|_Hcurl = %.6e  (|u_h| = %.6e)"
          % (rep.H, rep.h, m, rep.err_hcurl, rep.norm_uh), file=sys.stderr)
    return 0


def cmd_convergence(sc, args):
    rows = analysis.convergence_study(sc, sc.H_list, sc.h_conv, sc.m, threads=args.threads)
    _write_rows(rows, sc, args)
    orders = [r["order_hcurl"] for r in rows if r["order_hcurl"] is not None]
    print("convergence: %d levels, H(curl) orders %s" % (len(rows), ", ".join(
        "%.3f" % o for o in orders) or "-"), file=sys.stderr)
    return 0


def cmd_decay(sc, args):
    hier = sc.hierarchy()
    coeff = sc.coefficient(hier.fine)
    rows, ratio = analysis.decay_study(hier, coeff, sc.load, sc.m_list, threads=args.threads,
                                       name=sc.name)
    _write_rows(rows, sc, args)
    print("decay: m = %s, fitted ratio %s" % (list(sc.m_list), "-" if ratio is None else
                                               "%.4f" % ratio), file=sys.stderr)
    return 0


COMMANDS = {"check": cmd_check, "solve": cmd_solve, "convergence": cmd_convergence,
            "decay": cmd_decay}


def build_parser():
    p = argparse.ArgumentParser(prog="curllod", description="Localized orthogonal decomposition "
                                "for H(curl) problems with a Falk-Winther projection.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", metavar="PATH", help="INI scenario file")
    p.add_argument("--out", metavar="PATH", help="CSV output (default: [output] path or stdout)")
    p.add_argument("--threads", type=int, default=1, metavar="N")
    p.add_argument("--dump-projection", metavar="PATH",
                   help="write the projection matrix as 'row col re im' lines")
    p.add_argument("--timings", action="store_true",
                   help="fill the seconds column (makes the CSV run-dependent)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--inject-orientation-fault", action="store_true", help=argparse.SUPPRESS)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    if args.config:
        try:
            sc = load_config(args.config)
        except FileNotFoundError:
            parser.error("config file not found: %s" % args.config)
        except (ConfigError, configparser.Error) as exc:
            parser.error("invalid config %s: %s" % (args.config, exc))
    else:
        sc = Scenario()
    try:
        return COMMANDS[args.command](sc, args)
    except (np.linalg.LinAlgError, RuntimeError) as exc:
        print("curllod %s: %s" % (args.command, exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
