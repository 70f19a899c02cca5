"""Configuration files, CSV export and the ``sim`` command line.

A configuration is one flat YAML mapping. Every key is optional; missing keys
take the defaults of :class:`~bsvtunnel.montecarlo.SimConfig`. Example::

    source: bsv          # or: coherent
    nbar: 100.0
    modes: 5.0
    ellipticity: 0.8
    shots: 200000
    seed: 7

The coupling is given either directly as ``alpha`` or as ``kappa`` (field per
square-root photon), from which ``alpha`` is derived through ``ip``.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .analysis import analyze_scan, count_pmf_oracle
from .errors import BsvTunnelError, ConfigParseError, ConfigValidationError, InvalidInputError
from .montecarlo import DEFAULT_SCAN_G2, Histogram, SimConfig, g2_scan, simulate_counts, simulate_spectrum
from .quantum_light import Bsv, Coherent, g2_equal_modes, per_mode_mean
from .strong_field import AtomTarget, PulseParams, alpha_from_ip

COMMANDS = ("counts", "spectrum", "scan", "g2", "oracle")
DEFAULT_COHERENT_INTENSITY = 20.0
G2_TABLE_NBAR = (10.0, 100.0, 1000.0)
G2_TABLE_MODES = tuple(float(m) for m in range(1, 11))

_PULSE = PulseParams()
_ATOM = AtomTarget()
_SIM = SimConfig()

# key -> (kind, default); kinds: "float", "int", "str", "floats", "opt_float"
CONFIG_KEYS: dict[str, tuple[str, Any]] = {
    "source": ("str", "bsv"),
    "intensity": ("float", DEFAULT_COHERENT_INTENSITY),
    "nbar": ("float", _SIM.source.nbar),
    "modes": ("float", _SIM.source.modes),
    "wavelength": ("float", _PULSE.wavelength),
    "fwhm": ("float", _PULSE.fwhm),
    "ellipticity": ("float", _PULSE.ellipticity),
    "peak_field": ("float", _PULSE.peak_field),
    "ip": ("float", _ATOM.ip),
    "alpha": ("opt_float", None),
    "kappa": ("opt_float", None),
    "prefactor": ("float", _ATOM.prefactor),
    "shots": ("int", _SIM.shots),
    "seed": ("int", _SIM.seed),
    "energy_min": ("float", _SIM.energy_bins[0]),
    "energy_max": ("float", _SIM.energy_bins[1]),
    "energy_bins": ("int", _SIM.energy_bins[2]),
    "time_grid": ("int", _SIM.time_grid),
    "importance_boost": ("float", _SIM.importance_boost),
    "scan_g2": ("floats", DEFAULT_SCAN_G2),
}


# --------------------------------------------------------------------------
# config parsing


class _StrictLoader(yaml.SafeLoader):
    """Safe loader that rejects duplicate keys instead of keeping the last."""


def _construct_mapping(loader, node, deep=False):
    seen = set()
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in seen:
            mark = key_node.start_mark
            raise ConfigParseError(f"line {mark.line + 1}, column {mark.column + 1}: duplicate key {key!r}")
        seen.add(key)
    return loader.construct_mapping(node, deep)


_StrictLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _load_document(text: str) -> dict:
    try:
        doc = yaml.load(text, Loader=_StrictLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}: " if mark else ""
        raise ConfigParseError(f"{where}{exc.problem or exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigParseError(str(exc)) from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigParseError("config must be a mapping of key: value pairs")
    return doc


def _coerce(key: str, kind: str, value):
    if kind == "opt_float":
        return None if value is None else _coerce(key, "float", value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigValidationError(key, "must be a string")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(key, "must be an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(key, "must be a number")
        value = float(value)
        if not math.isfinite(value):
            raise ConfigValidationError(key, "must be finite")
        return value
    if kind == "floats":
        if not isinstance(value, (list, tuple)):
            raise ConfigValidationError(key, "must be a list of numbers")
        return tuple(_coerce(key, "float", v) for v in value)
    raise AssertionError(kind)


def _require(key: str, ok: bool, constraint: str):
    if not ok:
        raise ConfigValidationError(key, constraint)


def config_from_mapping(doc: dict) -> SimConfig:
    """Build a validated :class:`SimConfig` from an already parsed mapping."""
    unknown = sorted(set(doc) - set(CONFIG_KEYS), key=str)
    if unknown:
        raise ConfigValidationError(unknown[0], "unknown key")
    v = {key: default for key, (_, default) in CONFIG_KEYS.items()}
    for key, value in doc.items():
        v[key] = _coerce(key, CONFIG_KEYS[key][0], value)

    _require("source", v["source"] in ("bsv", "coherent"), "must be 'bsv' or 'coherent'")
    for key in ("intensity", "nbar", "modes", "wavelength", "fwhm", "peak_field", "ip", "prefactor"):
        _require(key, v[key] > 0, "must be > 0")
    _require("ellipticity", 0 < v["ellipticity"] <= 1, "must lie in (0, 1]")
    _require("shots", v["shots"] > 0, "must be > 0")
    _require("seed", 0 <= v["seed"] < 2**64, "must lie in [0, 2**64)")
    _require("energy_min", v["energy_min"] >= 0, "must be >= 0")
    _require("energy_max", v["energy_max"] > v["energy_min"], "must exceed energy_min")
    _require("energy_bins", v["energy_bins"] > 0, "must be > 0")
    _require("time_grid", v["time_grid"] >= 8, "must be >= 8")
    _require("importance_boost", v["importance_boost"] >= 1, "must be >= 1")
    _require("scan_g2", all(g > 1 for g in v["scan_g2"]), "every value must exceed 1")

    if v["alpha"] is not None and v["kappa"] is not None:
        raise ConfigValidationError("kappa", "give either alpha or kappa, not both")
    if v["kappa"] is not None:
        _require("kappa", v["kappa"] > 0, "must be > 0")
        alpha = alpha_from_ip(v["ip"], v["kappa"])
    elif v["alpha"] is not None:
        _require("alpha", v["alpha"] >= 0, "must be >= 0")
        alpha = v["alpha"]
    else:
        alpha = _ATOM.alpha

    if v["source"] == "bsv":
        source = Bsv(v["nbar"], v["modes"])
    else:
        source = Coherent(v["intensity"])
    return SimConfig(
        source=source,
        pulse=PulseParams(v["wavelength"], v["fwhm"], v["ellipticity"], v["peak_field"]),
        atom=AtomTarget(v["ip"], alpha, v["prefactor"]),
        shots=v["shots"],
        seed=v["seed"],
        energy_bins=(v["energy_min"], v["energy_max"], v["energy_bins"]),
        time_grid=v["time_grid"],
        importance_boost=v["importance_boost"],
        scan_g2=v["scan_g2"],
    )


def parse_config(text: str) -> SimConfig:
    """Parse a YAML config document.

    Raises
    ------
    ConfigParseError
        Malformed YAML (message carries line and column) or a non-mapping.
    ConfigValidationError
        Unknown key, wrong type or violated constraint; ``.key`` names it.
    """
    return config_from_mapping(_load_document(text))


def config_to_mapping(cfg: SimConfig) -> dict:
    """Flat mapping that :func:`config_from_mapping` turns back into ``cfg``."""
    out: dict[str, Any] = {}
    if isinstance(cfg.source, Bsv):
        out.update(source="bsv", nbar=float(cfg.source.nbar), modes=float(cfg.source.modes))
    else:
        out.update(source="coherent", intensity=float(cfg.source.intensity))
    out.update({k: float(v) for k, v in asdict(cfg.pulse).items()})
    out.update(ip=float(cfg.atom.ip), alpha=float(cfg.atom.alpha), prefactor=float(cfg.atom.prefactor))
    out.update(
        shots=int(cfg.shots),
        seed=int(cfg.seed),
        energy_min=float(cfg.energy_bins[0]),
        energy_max=float(cfg.energy_bins[1]),
        energy_bins=int(cfg.energy_bins[2]),
        time_grid=int(cfg.time_grid),
        importance_boost=float(cfg.importance_boost),
        scan_g2=[float(g) for g in cfg.scan_g2],
    )
    return out


def emit_config(cfg: SimConfig) -> str:
    """YAML text for ``cfg``; ``parse_config(emit_config(cfg)) == cfg``."""
    return yaml.safe_dump(config_to_mapping(cfg), sort_keys=False, default_flow_style=None)


def load_config(path: str | Path) -> SimConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# CSV export


def _real(x) -> str:
    return format(float(x), ".17g")


def _write_rows(path: Path, header: str, rows) -> Path:
    path = Path(path)
    text = header + "\n" + "".join(",".join(r) + "\n" for r in rows)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def export_csv(data, path: str | Path) -> Path:
    """Write a :class:`Histogram` or a sequence of scan points as CSV.

    Histograms get the header ``bin_low,bin_high,count``; scan points (any
    objects with ``g2``, ``peak_energy`` and ``i_eff``) get
    ``g2,peak_energy_ev,i_eff``. Reals use 17 significant digits, so
    re-reading reproduces every value exactly.
    """
    if isinstance(data, Histogram):
        rows = ((_real(lo), _real(hi), str(int(c)))
                for lo, hi, c in zip(data.edges[:-1], data.edges[1:], data.counts))
        return _write_rows(path, "bin_low,bin_high,count", rows)
    rows = ((_real(p.g2), _real(p.peak_energy), _real(p.i_eff)) for p in data)
    return _write_rows(path, "g2,peak_energy_ev,i_eff", rows)


def export_table(path: str | Path, header: Sequence[str], columns: Sequence[Sequence]) -> Path:
    """Write aligned columns; integer columns stay integers, reals get 17 digits."""
    def fmt(x):
        return str(int(x)) if isinstance(x, (int, np.integer)) else _real(x)
    return _write_rows(path, ",".join(header), ([fmt(x) for x in row] for row in zip(*columns)))


def read_histogram_csv(path: str | Path) -> Histogram:
    """Inverse of :func:`export_csv` for histograms."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "bin_low,bin_high,count":
        raise InvalidInputError(f"{path}: not a histogram CSV")
    rows = [ln.split(",") for ln in lines[1:] if ln]
    if not rows:
        return Histogram.empty()
    edges = [float(r[0]) for r in rows] + [float(rows[-1][1])]
    return Histogram(np.array(edges), np.array([int(r[2]) for r in rows], dtype=np.int64))


# --------------------------------------------------------------------------
# commands


@dataclass
class RunManifest:
    command: str
    config: dict
    version: str
    seed: int
    wall_time_s: float = 0.0
    outputs: list[str] = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(asdict(self), fh, indent=2)
            fh.write("\n")
        return path


def _g2_table(cfg: SimConfig):
    nbars = sorted(set(G2_TABLE_NBAR) | ({float(cfg.source.nbar)} if isinstance(cfg.source, Bsv) else set()))
    modes = sorted(set(G2_TABLE_MODES) | ({float(cfg.source.modes)} if isinstance(cfg.source, Bsv) else set()))
    rows = [(nb, m, g2_equal_modes(nb, m), per_mode_mean(nb, m)) for nb in nbars for m in modes]
    return [list(c) for c in zip(*rows)]


def run_command(name: str, cfg: SimConfig, out_dir: str | Path, workers: int = 1) -> RunManifest:
    """Run one command, write its outputs and ``manifest.json`` into ``out_dir``."""
    if name not in COMMANDS:
        raise InvalidInputError(f"unknown command {name!r}; choose from {', '.join(COMMANDS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(name, config_to_mapping(cfg), __version__, int(cfg.seed))
    start = time.perf_counter()
    written: list[Path] = []

    if name == "counts":
        hist = simulate_counts(cfg, workers)
        written.append(export_csv(hist, out / "counts.csv"))
        if hist.weights is not None:
            k = np.arange(hist.counts.size)
            written.append(export_table(out / "pmf.csv", ("k", "probability"), (k, hist.weights / cfg.shots)))
    elif name == "spectrum":
        written.append(export_csv(simulate_spectrum(cfg, workers), out / "spectrum.csv"))
    elif name == "scan":
        if not isinstance(cfg.source, Bsv):
            raise InvalidInputError("scan requires source: bsv")
        results = g2_scan(cfg, cfg.scan_g2, workers)
        for g2, hist in results:
            written.append(export_csv(hist, out / f"spectrum_g2_{g2:.4f}.csv"))
        scan = analyze_scan(results, cfg.source.nbar, cfg.pulse, cfg.atom.alpha)
        written.append(export_csv(scan.points, out / "scan.csv"))
        fit = None
        if scan.fit is not None:
            fit = asdict(scan.fit)
            fit["root"] = scan.fit.root if scan.fit.slope != 0 else None
        summary = {"nbar": scan.nbar, "fit": fit}
        fit_path = out / "fit.json"
        with open(fit_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
        written.append(fit_path)
    elif name == "g2":
        written.append(export_table(out / "g2_table.csv", ("nbar", "modes", "g2", "per_mode_mean"), _g2_table(cfg)))
    elif name == "oracle":
        pmf = count_pmf_oracle(cfg.source, cfg.atom)
        written.append(export_table(out / "oracle_pmf.csv", ("k", "probability"), (np.arange(pmf.size), pmf)))

    manifest.wall_time_s = time.perf_counter() - start
    manifest.outputs = [p.name for p in written]
    manifest.write(out)
    return manifest


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sim", description="BSV-driven tunneling Monte Carlo")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, default=None, help="YAML config file (defaults if omitted)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed (unsigned 64-bit)")
    p.add_argument("--shots", type=int, default=None, help="override the config shot count")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--workers", type=int, default=1, help="worker processes for the engine")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config is not None else SimConfig()
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.shots is not None:
            overrides["shots"] = args.shots
        if overrides:
            cfg = config_from_mapping({**config_to_mapping(cfg), **overrides})
        if args.workers < 1:
            raise ConfigValidationError("workers", "must be >= 1")
        manifest = run_command(args.command, cfg, args.out, args.workers)
    except BsvTunnelError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        where = exc.filename if exc.filename is not None else ""
        print(f"io: {where}: {exc.strerror or exc}", file=sys.stderr)
        return 3
    print(f"{args.command}: wrote {', '.join(manifest.outputs)} to {args.out} "
          f"in {manifest.wall_time_s:.2f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
