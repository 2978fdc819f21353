"""Command-line driver: label, hypo, wkb, ek, spectrum, sde, pipeline and compare.

Every stage writes flat CSV/JSON files into one output directory. Reports
embed the config hash and the tool version and contain no timestamps, so an
unchanged config reproduces byte-identical files.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .ek import build_quasimode, default_tau_delta, ek_pipeline, rayleigh
from .hypo import hypo_report
from .landscape import GenerError, analyze
from .model import load_model, model_from_text, preset
from .sde import SdeConfig, mfpt
from .spectral import GridBox, cluster_threshold, discretize_P, small_eigs
from .wkb import Caps

FORMAT_VERSION = 1
EXIT_OK, EXIT_ASSUMPTION, EXIT_NUMERICAL = 0, 2, 3
MODEL_SECTIONS = ("model", "sigma", "potential", "tail", "rescale.g",
                  "magnetic.b0", "magnetic.b1", "magnetic.b2")


class AssumptionFailure(RuntimeError):
    pass


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()] if text.strip() else []


def _fmt(values: Sequence[float]) -> str:
    return " ".join(repr(float(v)) for v in values)


def _ranges(text: str) -> list[tuple[float, float]]:
    out = []
    for part in text.split(";"):
        if part.strip():
            lo, hi = _floats(part)
            out.append((lo, hi))
    return out


def _fmt_ranges(rs) -> str:
    return "; ".join(f"{float(a)!r} {float(b)!r}" for a, b in rs)


def _opt(text: str) -> float | None:
    return None if text.strip() in ("", "auto") else float(text)


def _normalize_ini(text: str) -> str:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(text)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


@dataclass(frozen=True)
class ExperimentConfig:
    model_text: str = ""
    model_file: str = ""
    h_sweep: tuple = (0.2, 0.15, 0.1, 0.07)
    output: str = "out"
    seed: int = 0
    threads: int = 1
    landscape_box: tuple = ((-2.5, 2.5),)
    landscape_grid: int = 0
    grid_nodes: tuple = (400, 200)
    grid_x: tuple = ()
    grid_v: tuple = ()
    grid_level: float = 2.5
    stabilizer: float = 0.25
    k_eigs: int = 6
    K_max: int = 6
    J_max: int = 2
    tau: float | None = None
    delta: float | None = None
    sde_h: tuple = ()
    sde_n_traj: int = 2000
    sde_T_max: float = 2000.0
    sde_dt: float | None = None
    hypo_h: tuple = (0.02, 0.05, 0.1, 0.2)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        bad = [h for h in self.sde_h if h not in self.h_sweep]
        if bad:
            raise ValueError(f"sde h-grid {list(self.sde_h)} is not contained in the h-sweep {list(self.h_sweep)}")
        if bool(self.model_text) == bool(self.model_file):
            raise ValueError("give exactly one of an inline model or a model file")
        if self.model_text:
            object.__setattr__(self, "model_text", _normalize_ini(self.model_text))

    # -- serialization
    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["experiment"] = {"format_version": str(self.format_version), "output": self.output,
                            "seed": str(self.seed), "threads": str(self.threads), "h_sweep": _fmt(self.h_sweep)}
        cp["landscape"] = {"box": _fmt_ranges(self.landscape_box), "grid": str(self.landscape_grid)}
        cp["hypo"] = {"h_grid": _fmt(self.hypo_h)}
        cp["spectral"] = {"nodes": " ".join(str(n) for n in self.grid_nodes), "x_ranges": _fmt_ranges(self.grid_x),
                          "v_ranges": _fmt_ranges(self.grid_v), "level": repr(float(self.grid_level)),
                          "stabilizer": repr(float(self.stabilizer)), "k_eigs": str(self.k_eigs)}
        cp["wkb"] = {"k_max": str(self.K_max), "j_max": str(self.J_max)}
        cp["ek"] = {"tau": "auto" if self.tau is None else repr(float(self.tau)),
                    "delta": "auto" if self.delta is None else repr(float(self.delta))}
        cp["sde"] = {"h": _fmt(self.sde_h), "n_traj": str(self.sde_n_traj), "t_max": repr(float(self.sde_T_max)),
                     "dt": "auto" if self.sde_dt is None else repr(float(self.sde_dt))}
        if self.model_file:
            cp["model"] = {"file": self.model_file}
        else:
            mp = configparser.ConfigParser()
            mp.optionxform = str
            mp.read_string(self.model_text)
            for sec in mp.sections():
                cp[sec] = dict(mp[sec])
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read_string(text)
        e = cp["experiment"]
        kw: dict = {"format_version": int(e.get("format_version", FORMAT_VERSION)), "output": e.get("output", "out"),
                    "seed": int(e.get("seed", "0")), "threads": int(e.get("threads", "1")),
                    "h_sweep": tuple(_floats(e.get("h_sweep", "")))}
        if cp.has_section("landscape"):
            s = cp["landscape"]
            kw["landscape_box"] = tuple(_ranges(s.get("box", "")))
            kw["landscape_grid"] = int(s.get("grid", "0"))
        if cp.has_section("hypo"):
            kw["hypo_h"] = tuple(_floats(cp["hypo"].get("h_grid", "")))
        if cp.has_section("spectral"):
            s = cp["spectral"]
            kw["grid_nodes"] = tuple(int(n) for n in s.get("nodes", "400 200").split())
            kw["grid_x"] = tuple(_ranges(s.get("x_ranges", "")))
            kw["grid_v"] = tuple(_ranges(s.get("v_ranges", "")))
            kw["grid_level"] = float(s.get("level", "2.5"))
            kw["stabilizer"] = float(s.get("stabilizer", "0.25"))
            kw["k_eigs"] = int(s.get("k_eigs", "6"))
        if cp.has_section("wkb"):
            kw["K_max"] = int(cp["wkb"].get("k_max", "6"))
            kw["J_max"] = int(cp["wkb"].get("j_max", "2"))
        if cp.has_section("ek"):
            kw["tau"] = _opt(cp["ek"].get("tau", "auto"))
            kw["delta"] = _opt(cp["ek"].get("delta", "auto"))
        if cp.has_section("sde"):
            s = cp["sde"]
            kw["sde_h"] = tuple(_floats(s.get("h", "")))
            kw["sde_n_traj"] = int(s.get("n_traj", "2000"))
            kw["sde_T_max"] = float(s.get("t_max", "2000"))
            kw["sde_dt"] = _opt(s.get("dt", "auto"))
        if cp.has_option("model", "file"):
            kw["model_file"] = cp["model"]["file"]
        else:
            mp = configparser.ConfigParser()
            mp.optionxform = str
            for sec in MODEL_SECTIONS:
                if cp.has_section(sec):
                    mp[sec] = dict(cp[sec])
            buf = io.StringIO()
            mp.write(buf)
            kw["model_text"] = buf.getvalue()
        return cls(**kw)

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def system(self, base: Path | None = None):
        if self.model_file:
            p = Path(self.model_file)
            if base is not None and not p.is_absolute():
                p = base / p
            return load_model(p)
        name, params = model_from_text(self.model_text)
        return preset(name, params)


def load_config(path: str) -> ExperimentConfig:
    return ExperimentConfig.from_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# stages


class Run:
    def __init__(self, cfg: ExperimentConfig, out: Path, base: Path | None = None):
        self.cfg = cfg
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.sys = cfg.system(base)
        self.stamp = {"config_hash": cfg.hash(), "version": __version__, "format_version": cfg.format_version}
        self._labeling = None
        self._hypo = None
        self._ek = None

    def write(self, name: str, text: str) -> None:
        (self.out / name).write_text(text, encoding="utf-8")

    def write_json(self, name: str, obj) -> None:
        payload = dict(self.stamp)
        payload.update(obj)
        self.write(name, json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")

    # -- label
    def labeling(self):
        if self._labeling is None:
            grid = self.cfg.landscape_grid or None
            try:
                self._labeling = analyze(self.sys.V, self.cfg.landscape_box, grid)
            except GenerError as err:
                self.write_json("labeling.json", {"gener": {"passed": False, "witnesses": err.verdict.witnesses}})
                raise AssumptionFailure(str(err)) from err
        return self._labeling

    def stage_label(self):
        lab = self.labeling()
        body = json.loads(lab.to_json())
        self.write_json("labeling.json", body)
        self.write("tree.csv", lab.tree_csv())
        return lab

    # -- hypo
    def stage_hypo(self):
        if self._hypo is None:
            rep = hypo_report(self.sys, self.cfg.landscape_box, self.cfg.hypo_h)
            self.write_json("hypo.json", json.loads(rep.to_json()))
            self.write("g.csv", rep.g_csv(sorted(set(self.cfg.hypo_h) | set(self.cfg.h_sweep))))
            self._hypo = rep
        return self._hypo

    # -- wkb and ek
    def stage_ek(self):
        if self._ek is None:
            lab = self.labeling()
            pred, sd = ek_pipeline(self.sys, lab, Caps(self.cfg.K_max, self.cfg.J_max))
            summary = {}
            for k, w in sorted(sd.items()):
                self.write(f"wkb_s{k}.csv", w.ell.to_csv())
                summary[str(k)] = {"location": w.s, "a": w.prefactor.a, "b": w.prefactor.b,
                                   "situation": w.prefactor.situation, "det_identity": w.verdict.passed,
                                   "modified_hessian_pd": w.verdict.positive_definite}
            self.write_json("wkb.json", {"saddles": summary})
            self.write("ek.csv", pred.to_csv(self.cfg.h_sweep))
            self._ek = (pred, sd)
        return self._ek

    # -- spectrum
    def grid_for(self, h: float) -> GridBox:
        c = self.cfg
        if c.grid_x:
            return GridBox(c.grid_x, c.grid_v or ((-2.5, 2.5),) * self.sys.dv, c.grid_nodes)
        return GridBox.for_system(self.sys, c.grid_level, c.grid_nodes)

    def stage_spectrum(self):
        hypo = self.stage_hypo()
        rows = {}
        for h in self.cfg.h_sweep:
            P = discretize_P(self.sys, h, self.grid_for(h), self.cfg.stabilizer)
            res = small_eigs(P, cluster_threshold(hypo.g_of_h(h)), self.cfg.k_eigs)
            self.write(f"spectrum_h{h:g}.csv", res.to_csv())
            rows[h] = (P, res)
        return rows

    def stage_sde(self):
        lab = self.labeling()
        out = {}
        for h in self.cfg.sde_h:
            dt = self.cfg.sde_dt or min(h, 1.0) / 50
            per = {}
            for i, rec in enumerate(lab.records):
                if rec.is_global:
                    continue
                cfg = SdeConfig(h, dt, self.cfg.sde_T_max, self.cfg.sde_n_traj, self.cfg.seed + i)
                per[i] = mfpt(self.sys, cfg, i, lab)
            out[h] = per
        self.write_json("sde.json", {"mfpt": {repr(h): {str(i): json.loads(s.to_json()) for i, s in per.items()}
                                              for h, per in out.items()}})
        return out


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and not math.isfinite(o):
        return None
    return str(o)


def _nonzero_cluster(res) -> list[float]:
    vals = sorted(float(z.real) for z in res.cluster_values)
    return vals[1:]


def run_pipeline(cfg: ExperimentConfig, out: Path, stage: str | None = None, base: Path | None = None) -> dict:
    """Run the stage DAG and write report.json/report.csv; ``stage`` restricts to one stage."""
    run = Run(cfg, out, base)
    if stage == "hypo":
        run.stage_hypo()
        return {"stages": ["hypo"]}
    if stage == "label":
        run.stage_label()
        return {"stages": ["label"]}
    lab = run.stage_label()
    hypo = run.stage_hypo()
    verdicts = dict(hypo.verdicts)
    pred, sd = run.stage_ek()
    verdicts["dethess"] = all(w.verdict.passed for w in sd.values())
    if stage == "ek":
        return {"stages": ["label", "hypo", "wkb", "ek"]}
    spectra = run.stage_spectrum()
    sde = run.stage_sde() if cfg.sde_h else {}
    entries = pred.non_global()
    order = sorted(entries, key=lambda e: e.lam(cfg.h_sweep[-1]), reverse=True)
    rows = []
    for e in pred.entries:
        row = {"m": e.index, "location": e.location, "S": None if e.is_global else e.S, "mu": e.mu, "v": e.v,
               "lambda_ek": {}, "lambda_spectral": {}, "rayleigh": {}, "mfpt_rate": {}}
        for h in cfg.h_sweep:
            row["lambda_ek"][repr(h)] = e.lam(h)
            P, res = spectra[h]
            nz = _nonzero_cluster(res)
            if e.is_global:
                row["lambda_spectral"][repr(h)] = float(min(abs(z) for z in res.cluster_values)) \
                    if res.n_cluster else None
            else:
                k = order.index(e)
                # eigenvalues ascend while predictions are sorted descending
                row["lambda_spectral"][repr(h)] = nz[len(nz) - 1 - k] if len(nz) == len(order) else None
            try:
                tau0, delta0 = (0.0, 0.0) if e.is_global else default_tau_delta(lab, sd, e.index, h)
                q = build_quasimode(e.index, lab, sd, run.sys, cfg.tau or tau0, cfg.delta or delta0, h, P.grid)
                row["rayleigh"][repr(h)] = rayleigh(P, q).value
            except ValueError:
                row["rayleigh"][repr(h)] = None
            if h in sde and e.index in sde[h]:
                row["mfpt_rate"][repr(h)] = sde[h][e.index].eigenvalue_scale
        rows.append(row)
    cluster = {repr(h): spectra[h][1].n_cluster for h in cfg.h_sweep}
    verdicts["cluster_count"] = all(n == len(lab.records) for n in cluster.values())
    report = {"h_sweep": list(cfg.h_sweep), "sde_h": list(cfg.sde_h), "minima": rows, "cluster_sizes": cluster,
              "n_minima": len(lab.records), "verdicts": verdicts}
    run.write_json("report.json", report)
    run.write("report.csv", report_csv(report))
    return report


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["m", "S", "mu", "v", "h", "lambda_ek", "lambda_spectral", "rayleigh", "mfpt_rate"])
    for r in report["minima"]:
        for h in report["h_sweep"]:
            k = repr(h)
            w.writerow([r["m"], _na(r["S"]), _na(r["mu"]), _na(r["v"]), k] +
                       [_na(r[c].get(k)) for c in ("lambda_ek", "lambda_spectral", "rayleigh", "mfpt_rate")])
    return buf.getvalue()


def _na(x) -> str:
    return "NA" if x is None else repr(x) if isinstance(x, float) else str(x)


def _fit_exponent(hs, ratios) -> float | None:
    pts = [(h, abs(r - 1)) for h, r in zip(hs, ratios) if r is not None and abs(r - 1) > 0]
    if len(pts) < 2:
        return None
    a = np.array(pts)
    return float(np.polyfit(np.log(a[:, 0]), np.log(a[:, 1]), 1)[0])


def compare(report: dict) -> dict:
    """Ratio tables lambda_spectral / lambda_ek and h-scaled SDE rate / lambda_spectral."""
    hs = report["h_sweep"]
    extra = [h for h in report.get("sde_h", []) if h not in hs]
    if extra:
        raise ValueError(f"mismatched h-grids: spectral {hs} vs sde {report['sde_h']}")
    rows = []
    for r in report["minima"]:
        if r["S"] is None:
            continue
        spectral = [_ratio(r["lambda_spectral"].get(repr(h)), r["lambda_ek"].get(repr(h))) for h in hs]
        sde = [_ratio(r["mfpt_rate"].get(repr(h)), r["lambda_spectral"].get(repr(h))) for h in hs]
        rows.append({"m": r["m"], "h": hs, "spectral_over_ek": spectral, "sde_over_spectral": sde,
                     "exponent_spectral_ek": _fit_exponent(hs, spectral),
                     "exponent_sde_spectral": _fit_exponent(hs, sde),
                     "lambda_ek": [r["lambda_ek"].get(repr(h)) for h in hs]})
    return {"rows": rows}


def _ratio(a, b):
    if a is None or b is None or b == 0:
        return None
    return a / b


def compare_csv(table: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["m", "h", "lambda_ek", "spectral_over_ek", "sde_over_spectral"])
    for r in table["rows"]:
        for h, l, a, b in zip(r["h"], r["lambda_ek"], r["spectral_over_ek"], r["sde_over_spectral"]):
            w.writerow([r["m"], repr(h), _na(l), _na(a), _na(b)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kfpek", description="Eyring-Kramers asymptotics for kinetic operators")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("label", "hypo", "wkb", "ek", "spectrum", "sde", "pipeline", "compare"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=name != "compare")
        s.add_argument("--out")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int)
        if name in ("spectrum", "pipeline"):
            s.add_argument("--h-sweep", help="space separated h values")
            s.add_argument("--grid", help="nodes per axis, e.g. 400,200")
            s.add_argument("--box-margin", type=float, help="f-level of the truncation box")
            s.add_argument("--k-eigs", type=int)
        if name == "sde":
            s.add_argument("--preset")
            s.add_argument("--h", type=float)
            s.add_argument("--dt", type=float)
            s.add_argument("--ntraj", type=int)
            s.add_argument("--tmax", type=float)
        if name == "pipeline":
            s.add_argument("--stage", choices=["label", "hypo", "ek"])
    return p


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    kw = {}
    if args.out:
        kw["output"] = args.out
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.threads is not None:
        kw["threads"] = args.threads
    if getattr(args, "h_sweep", None):
        kw["h_sweep"] = tuple(_floats(args.h_sweep))
    if getattr(args, "grid", None):
        kw["grid_nodes"] = tuple(int(n) for n in args.grid.replace(",", " ").split())
    if getattr(args, "box_margin", None) is not None:
        kw["grid_level"] = args.box_margin
    if getattr(args, "k_eigs", None):
        kw["k_eigs"] = args.k_eigs
    if getattr(args, "h", None) is not None:
        kw["sde_h"] = (args.h,)
        if args.h not in cfg.h_sweep and "h_sweep" not in kw:
            kw["h_sweep"] = tuple(cfg.h_sweep) + (args.h,)
    if getattr(args, "dt", None) is not None:
        kw["sde_dt"] = args.dt
    if getattr(args, "ntraj", None):
        kw["sde_n_traj"] = args.ntraj
    if getattr(args, "tmax", None):
        kw["sde_T_max"] = args.tmax
    if getattr(args, "preset", None):
        if cfg.model_file:
            raise ValueError("--preset needs an inline model in the config")
        mp = configparser.ConfigParser()
        mp.optionxform = str
        mp.read_string(cfg.model_text)
        mp["model"]["preset"] = args.preset
        buf = io.StringIO()
        mp.write(buf)
        kw["model_text"] = buf.getvalue()
    return replace(cfg, **kw) if kw else cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            out = Path(args.out or (load_config(args.config).output if args.config else "out"))
            report = json.loads((out / "report.json").read_text(encoding="utf-8"))
            table = compare(report)
            (out / "compare.csv").write_text(compare_csv(table), encoding="utf-8")
            sys.stdout.write(compare_csv(table))
            return EXIT_OK
        cfg = _apply_overrides(load_config(args.config), args)
        base = Path(args.config).resolve().parent
        out = Path(cfg.output)
        if not out.is_absolute():
            out = Path.cwd() / out
        if args.command == "pipeline":
            report = run_pipeline(cfg, out, args.stage, base)
            verdicts = report.get("verdicts", {})
            failed = [k for k, v in verdicts.items() if v is False and not k.endswith("_literal")]
            if failed:
                sys.stderr.write(f"assumption verdicts failed: {failed}\n")
                return EXIT_ASSUMPTION
            return EXIT_OK
        run = Run(cfg, out, base)
        if args.command == "label":
            run.stage_label()
        elif args.command == "hypo":
            rep = run.stage_hypo()
            if not all(v for k, v in rep.verdicts.items() if not k.endswith("_literal")):
                return EXIT_ASSUMPTION
        elif args.command in ("wkb", "ek"):
            run.stage_ek()
        elif args.command == "spectrum":
            run.stage_spectrum()
        elif args.command == "sde":
            run.stage_sde()
        return EXIT_OK
    except (AssumptionFailure, GenerError) as err:
        sys.stderr.write(f"assumption failure: {err}\n")
        return EXIT_ASSUMPTION
    except (ArithmeticError, MemoryError, RuntimeError, np.linalg.LinAlgError) as err:
        sys.stderr.write(f"numerical failure: {err}\n")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
