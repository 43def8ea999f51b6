#!/usr/bin/env python
"""
Command-line tool for NV-center relaxometry.

Subcommands:
  simulate-spectra  synthetic fluorescence spectra over a power/temperature grid
  decompose         NV-/NV0 decomposition, kappa, fraction variance, ZPL fits
  relaxometry       pulsed relaxometry scan with T1 and recharge fits
  calibrate         count-ratio to charge-ratio calibration pairs and mappings
  odmr-temp         temperatures from ODMR zero-field splittings

Every output file starts with `#` header lines recording the run manifest.
Exit status: 0 success, 1 invalid input, 2 fit or runtime failure,
3 partial success.
"""
import argparse
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.config import config_to_lines, load_config
from src.core_model import PhysicsConfig, temperature_from_zfs, zfs_from_resonances
from src.detection import correct_trace
from src.errors import (
    DegenerateInputError,
    DomainError,
    InsufficientDataError,
    RelaxometryError,
    ShapeError,
    StructureError,
)
from src.fitting import fit_report
from src.outputs import (
    RunManifest,
    parse_float_list,
    power_tag,
    read_table,
    temperature_tag,
    write_report,
    write_table,
)
from src.pulse_sequence import format_sequence, load_sequence, standard_sequence
from src.relaxometry_analysis import (
    CALIBRATION_POWERS,
    all_optical_decay,
    calibrate_charge_ratio_mapping,
    mappings_from_pairs,
    pi_pulse_decay,
    recharge_decay,
    simulate_calibration_pairs,
    temperature_scan,
    temperature_seed,
)
from src.spectra import (
    apply_response_correction,
    build_temperature_bases,
    decompose,
    estimate_kappa,
    fit_zpl,
    fraction_variance,
    nv_minus_fraction,
)
from src.spectrum_io import (
    read_correction_table,
    read_header,
    read_spectrum,
    write_basis,
    write_spectrum,
)
from src.spectrum_model import reference_pair, simulate_calibration_series, simulate_spectrum

logger = logging.getLogger("nv-relaxometry")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILURE = 2
EXIT_PARTIAL = 3

DEFAULT_TEMPERATURES = (294.0, 301.0, 309.0, 317.0, 325.0, 333.0, 341.0, 348.0)
DEFAULT_POWERS = (
    8e-6, 2e-5, 5e-5, 1e-4, 2e-4, 3e-4, 5.6e-4, 8e-4, 1.2e-3, 2e-3, 3e-3, 4e-3,
)
KAPPA_POWERS = (5e-6, 1e-5, 2e-5, 3e-5, 5e-5)
MAX_ADVISORY_POWER = 4e-3

REFERENCE_ROLES = {
    "reference_zero": "NV0-rich high-power reference",
    "reference_minus": "NV--rich low-power reference",
}


def parse_args(argv: Optional[Sequence[str]] = None):
    """Parse command line arguments."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None,
                        help="Configuration file (KEY=value); built-in defaults when omitted")
    common.add_argument("--out", type=str, required=True,
                        help="Output directory")
    common.add_argument("--seed", type=int, default=0,
                        help="Seed of every random stream of the run")
    common.add_argument("--verbose", action="store_true",
                        help="Log debug messages")

    parser = argparse.ArgumentParser(description="NV-center relaxometry simulator and analysis")
    commands = parser.add_subparsers(dest="command", required=True)

    spectra = commands.add_parser("simulate-spectra", parents=[common],
                                  help="Generate synthetic spectra")
    spectra.add_argument("--temps", type=str, default=None,
                         help="Comma-separated temperatures (K)")
    spectra.add_argument("--powers", type=str, default=None,
                         help="Comma-separated laser powers (W)")

    dec = commands.add_parser("decompose", parents=[common],
                              help="Decompose spectra into NV- and NV0 contributions")
    dec.add_argument("--input", type=str, required=True,
                     help="Directory of spectrum files (searched recursively)")
    dec.add_argument("--correction", type=str, default=None,
                     help="Wavelength response correction table (wavelength_nm, factor)")

    relax = commands.add_parser("relaxometry", parents=[common],
                                help="Simulate and fit a relaxometry temperature scan")
    relax.add_argument("--sequence", type=str, default=None,
                       help="Pulse sequence file; the standard sequence when omitted")
    relax.add_argument("--temps", type=str, default=None,
                       help="Comma-separated temperatures (K)")
    relax.add_argument("--power", type=float, default=None,
                       help="Laser power (W) overriding the sequence power")
    relax.add_argument("--repetitions", type=int, default=None,
                       help="Cycles per sweep overriding the sequence value")
    relax.add_argument("--no-pi", action="store_true",
                       help="Drop the pi pulse and the subtraction evaluation")
    relax.add_argument("--no-noise", action="store_true",
                       help="Record expected counts instead of sampled ones")
    relax.add_argument("--calibration", type=str, default=None,
                       help="Calibration table written by the calibrate command")

    cal = commands.add_parser("calibrate", parents=[common],
                              help="Simulate count-ratio calibration pairs and fit mappings")
    cal.add_argument("--temps", type=str, default=None,
                     help="Comma-separated temperatures (K)")
    cal.add_argument("--powers", type=str, default=None,
                     help="Comma-separated laser powers (W)")

    odmr = commands.add_parser("odmr-temp", parents=[common],
                               help="Temperatures from zero-field splittings")
    odmr.add_argument("--input", type=str, required=True,
                      help="CSV with columns d,d_err or f_low,f_low_err,f_high,f_high_err (Hz)")

    return parser.parse_args(argv)


def _float_list(text: Optional[str], default: Sequence[float], name: str) -> List[float]:
    if text is None:
        return [float(v) for v in default]
    try:
        return parse_float_list(text)
    except ValueError:
        raise DomainError(f"--{name} must be a comma-separated list of numbers, got {text!r}") from None


def _temperatures(text: Optional[str]) -> List[float]:
    temps = _float_list(text, DEFAULT_TEMPERATURES, "temps")
    if any(not t > 0 for t in temps):
        raise DomainError("temperatures must be > 0 K")
    if len(set(temps)) != len(temps):
        raise DomainError("temperatures must be distinct")
    return temps


def _powers(text: Optional[str], default: Sequence[float]) -> List[float]:
    powers = _float_list(text, default, "powers")
    if any(not p > 0 for p in powers):
        raise DomainError("laser powers must be > 0 W")
    for p in powers:
        if p > MAX_ADVISORY_POWER:
            logger.warning(f"Laser power {p:.3g} W exceeds the advisory 4 mW")
    return powers


def _open_output(out: str, config: PhysicsConfig) -> Path:
    """Create the output directory, route errors to errors.log inside it and
    record the resolved configuration as config.env (loadable with --config)."""
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    error_log_handler = logging.FileHandler(path / "errors.log", delay=True)
    error_log_handler.setLevel(logging.ERROR)
    error_log_handler.setFormatter(logging.Formatter('%(asctime)s - %(levelname)s - %(message)s'))
    logger.addHandler(error_log_handler)
    (path / "config.env").write_text("\n".join(config_to_lines(config)) + "\n")
    return path


def _spectrum_rng(seed: int, temperature: float, power: float, stream: int) -> np.random.Generator:
    return np.random.default_rng(
        [int(seed), int(round(temperature * 1000)), int(round(power * 1e12)), stream]
    )


def cmd_simulate_spectra(args) -> int:
    config = load_config(args.config)
    temps = _temperatures(args.temps)
    powers = _powers(args.powers, DEFAULT_POWERS)

    out = _open_output(args.out, config)
    manifest = RunManifest.create("simulate-spectra", args.seed, out, args.config)
    header = manifest.header_lines(config)
    index = []
    for temperature in temps:
        t_tag = temperature_tag(temperature)
        for power in powers:
            rng = _spectrum_rng(args.seed, temperature, power, 0)
            spectrum = simulate_spectrum(config, power, temperature, rng)
            path = out / "spectra" / f"{t_tag}_{power_tag(power)}.csv"
            write_spectrum(path, spectrum, "sample", header)
            index.append((path, "sample", temperature, power, spectrum.exposure))

        rng = _spectrum_rng(args.seed, temperature, 0.0, 1)
        zero, minus = reference_pair(config, temperature, rng)
        for role, spectrum in (("reference_zero", zero), ("reference_minus", minus)):
            path = out / "references" / f"{t_tag}_{role}.csv"
            write_spectrum(path, spectrum, role, header)
            index.append((path, role, temperature, spectrum.laser_power, spectrum.exposure))

        rng = _spectrum_rng(args.seed, temperature, 0.0, 2)
        for power, spectrum in simulate_calibration_series(config, KAPPA_POWERS, temperature, rng):
            path = out / "calibration" / f"{t_tag}_{power_tag(power)}.csv"
            write_spectrum(path, spectrum, "calibration", header)
            index.append((path, "calibration", temperature, power, spectrum.exposure))
        logger.info(f"Wrote {len(powers)} spectra plus references at {temperature} K")

    table = pd.DataFrame(index, columns=["file", "role", "temperature", "power", "exposure"])
    table["file"] = [str(Path(p).relative_to(out)) for p in table["file"]]
    write_table(out / "index.csv", table, manifest, description="spectrum files")
    logger.info(f"Simulation complete: {len(table)} files in {out}")
    return EXIT_OK


def _collect_spectra(root: Path, correction):
    samples, calibration = [], defaultdict(list)
    references: Dict[float, Dict[str, object]] = defaultdict(dict)
    paths = []
    for path in sorted(root.rglob("*.csv")):
        if "role" not in read_header(path):
            logger.debug(f"Skipping {path}: no role header")
            continue
        spectrum, role, _ = read_spectrum(path)
        if correction is not None:
            spectrum = apply_response_correction(spectrum, correction)
        paths.append(path)
        if role == "sample":
            samples.append((path, spectrum))
        elif role in REFERENCE_ROLES:
            references[spectrum.temperature][role] = spectrum
        elif role == "calibration":
            calibration[spectrum.temperature].append((spectrum.laser_power, spectrum))
    return samples, references, calibration, paths


def cmd_decompose(args) -> int:
    config = load_config(args.config)
    root = Path(args.input)
    if not root.is_dir():
        raise StructureError(f"input directory {root} not found")
    correction = read_correction_table(args.correction) if args.correction else None
    samples, references, calibration, paths = _collect_spectra(root, correction)
    if not samples:
        raise StructureError(f"{root}: no sample spectra found")
    for temperature in sorted({s.temperature for _, s in samples}):
        for role, description in REFERENCE_ROLES.items():
            if role not in references.get(temperature, {}):
                raise StructureError(
                    f"missing {role} spectrum ({description}) at {temperature} K"
                )
    for path, spectrum in samples:
        grid = references[spectrum.temperature]["reference_zero"].wavelengths
        if not spectrum.same_grid(grid):
            raise ShapeError(f"{path}: wavelength grid differs from the reference spectra")
        if not np.any(spectrum.intensities > 0):
            raise DegenerateInputError(f"{path}: spectrum has no positive intensity")

    out = Path(args.out)
    inputs = paths + ([Path(args.correction)] if args.correction else [])
    manifest = RunManifest.create("decompose", args.seed, out, args.config, inputs)
    failures = 0

    bases = build_temperature_bases({
        t: (refs["reference_zero"], refs["reference_minus"])
        for t, refs in references.items()
        if set(REFERENCE_ROLES) <= set(refs)
    })

    kappas = {}
    for temperature, basis in bases.items():
        series = calibration.get(temperature, [])
        try:
            estimate = estimate_kappa(series, basis)
            kappas[temperature] = (estimate.kappa, estimate.std_error, "estimated")
        except RelaxometryError as e:
            logger.warning(f"kappa at {temperature} K falls back to the configured value: {e}")
            kappas[temperature] = (config.kappa_lambda, 0.0, "configured")
            failures += bool(series)

    rows = []
    for path, spectrum in samples:
        temperature = spectrum.temperature
        kappa, kappa_err, _ = kappas[temperature]
        dec = decompose(spectrum, bases[temperature])
        fraction = nv_minus_fraction(dec, kappa, kappa_err)
        rows.append({
            "temperature": temperature,
            "power": spectrum.laser_power,
            "c_minus": dec.c_minus,
            "c_minus_err": dec.c_minus_err,
            "c_zero": dec.c_zero,
            "fraction": fraction.value,
            "fraction_err": fraction.std_error,
            "residual_rms": dec.residual_rms,
            "file": str(path.relative_to(root)),
        })
    fractions = pd.DataFrame(rows).sort_values(["temperature", "power"], kind="mergesort")
    kappa_table = pd.DataFrame(
        [(t, k, e, source) for t, (k, e, source) in sorted(kappas.items())],
        columns=["temperature", "kappa", "kappa_err", "source"],
    )
    variance = None
    if fractions["temperature"].nunique() >= 2:
        variance = fraction_variance(fractions).reset_index()
    else:
        logger.warning("Fraction variance needs spectra at two or more temperatures")

    zpl_rows = []
    for temperature, refs in sorted(references.items()):
        for component, role in (("minus", "reference_minus"), ("zero", "reference_zero")):
            if role not in refs:
                continue
            try:
                zpl = fit_zpl(refs[role], component=component)
                values = (zpl.center, zpl.center_err, zpl.fwhm, zpl.fwhm_err)
            except RelaxometryError as e:
                logger.warning(f"{component} ZPL fit failed at {temperature} K: {e}")
                values = (np.nan,) * 4
                failures += 1
            zpl_rows.append((temperature, component) + values)
    zpl_table = pd.DataFrame(
        zpl_rows, columns=["temperature", "component", "center", "center_err", "fwhm", "fwhm_err"]
    )

    _open_output(args.out, config)
    for temperature, basis in bases.items():
        write_basis(out / "basis" / temperature_tag(temperature), basis, manifest.header_lines())
    write_table(out / "fractions.csv", fractions, manifest, config,
                description="NV- fraction per laser power and temperature")
    write_table(out / "kappa.csv", kappa_table, manifest, config,
                description="NV-/NV0 brightness ratio per temperature")
    if variance is not None:
        write_table(out / "fraction_variance.csv", variance, manifest,
                    description="variance of the NV- fraction across temperatures per power")
    write_table(out / "zpl.csv", zpl_table, manifest,
                description="zero-phonon line center and width (nm)")
    any_basis = next(iter(bases.values()))
    write_report(out / "deltas.json", {
        "delta0": any_basis.delta0,
        "delta_minus": any_basis.delta_minus,
        "temperatures": sorted(bases),
    }, manifest)
    write_report(out / "kappa.json", {
        temperature_tag(t): {"kappa": k, "std_error": e, "source": source}
        for t, (k, e, source) in kappas.items()
    }, manifest)
    logger.info(f"Decomposed {len(fractions)} spectra at {len(bases)} temperatures")
    return EXIT_PARTIAL if failures else EXIT_OK


def _decay_table(trace, config) -> pd.DataFrame:
    corrected = correct_trace(trace, config.detector)
    table = pd.DataFrame({"tau": trace.taus})
    for name, evaluation in (
        ("pi", pi_pulse_decay),
        ("all_optical", all_optical_decay),
        ("recharge", recharge_decay),
    ):
        try:
            series = evaluation(corrected)
        except RelaxometryError as e:
            logger.debug(f"No {name} evaluation at {trace.temperature} K: {e}")
            continue
        table[name] = series.y
        table[f"{name}_err"] = series.sigma
    return table


def cmd_relaxometry(args) -> int:
    config = load_config(args.config)
    temps = _temperatures(args.temps)
    if len(temps) < 2:
        raise InsufficientDataError("a relaxometry scan needs at least two temperatures")
    if args.sequence:
        sequence = load_sequence(args.sequence)
    else:
        sequence = standard_sequence(power=8e-6)
    if args.power is not None:
        if not args.power > 0:
            raise DomainError("--power must be > 0 W")
        sequence = sequence.with_power(args.power)
    if args.repetitions is not None:
        if args.repetitions < 1:
            raise DomainError("--repetitions must be >= 1")
        sequence = sequence.with_repetitions(args.repetitions)
    if args.no_pi:
        sequence = sequence.without_pi()
    mappings = None
    if args.calibration:
        pairs = read_table(args.calibration)
        required = {"temperature", "charge_ratio", "charge_ratio_err", "count_ratio", "count_ratio_err"}
        if not required <= set(pairs.columns):
            raise StructureError(f"{args.calibration}: missing columns {sorted(required - set(pairs.columns))}")
        mappings = mappings_from_pairs(pairs)

    out = Path(args.out)
    inputs = [p for p in (args.sequence, args.calibration) if p]
    manifest = RunManifest.create("relaxometry", args.seed, out, args.config, inputs)
    result = temperature_scan(
        sequence, config, temps, args.seed, mappings=mappings, noise=not args.no_noise
    )

    _open_output(args.out, config)
    with open(out / "sequence.seq", "w", newline="") as f:
        for line in manifest.header_lines():
            f.write(f"# {line}\n")
        f.write(format_sequence(sequence))

    for temperature, trace in result.traces.items():
        tag = temperature_tag(temperature)
        write_table(out / "traces" / f"trace_{tag}.csv", trace.data, manifest, config,
                    description=f"raw counts per read window at {temperature} K")
        write_table(out / "decays" / f"decay_{tag}.csv", _decay_table(trace, config), manifest,
                    description=f"evaluated decay curves (corrected rates) at {temperature} K")
        for name, fit in result.fits[temperature].items():
            write_report(out / "fits" / f"{tag}_{name}.json",
                         fit_report(fit, temperature=temperature, evaluation=name), manifest)

    write_table(out / "scan.csv", result.table, manifest, config,
                description="rates (1/s) and ratio increase per temperature")
    model = config.t1_model
    write_report(out / "t1_temperature_fit.json", {
        "fixed": {"a2": model.a2, "a3": model.a3, "delta": model.delta},
        "fits": {name: fit_report(fit) for name, fit in result.temperature_fits.items()},
    }, manifest)
    if result.flatness:
        write_report(out / "flatness.json",
                     {name: check._asdict() for name, check in result.flatness.items()},
                     manifest)

    failed = result.failed_cells
    logger.info(f"Scan complete: {len(temps)} temperatures, {failed} with failed cells")
    if failed == len(temps) and not result.any_fit:
        return EXIT_FAILURE
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_calibrate(args) -> int:
    config = load_config(args.config)
    temps = _temperatures(args.temps)
    powers = _powers(args.powers, CALIBRATION_POWERS)
    if len(powers) < 4:
        raise DomainError("calibration needs at least four powers")

    pairs = pd.concat([
        simulate_calibration_pairs(
            config, t, np.random.default_rng(temperature_seed(args.seed, t)), powers
        )
        for t in temps
    ], ignore_index=True)
    out = _open_output(args.out, config)
    manifest = RunManifest.create("calibrate", args.seed, out, args.config)
    write_table(out / "calibration.csv", pairs, manifest, config,
                description="charge ratio vs corrected count ratio under continuous light")

    report, failures = {}, 0
    for temperature, group in pairs.groupby("temperature", sort=True):
        try:
            mapping = calibrate_charge_ratio_mapping(
                group[["charge_ratio", "charge_ratio_err"]].to_numpy(),
                group[["count_ratio", "count_ratio_err"]].to_numpy(),
                temperature=float(temperature),
            )
        except RelaxometryError as e:
            logger.error(f"Calibration failed at {temperature} K: {e}")
            failures += 1
            continue
        report[temperature_tag(temperature)] = {
            "a": mapping.a, "n": mapping.n, "c": mapping.c,
            "count_ratio_range": [mapping.x_min, mapping.x_max],
            "fit": fit_report(mapping.fit),
        }
    write_report(out / "mappings.json", report, manifest)
    if failures == len(temps):
        return EXIT_FAILURE
    return EXIT_PARTIAL if failures else EXIT_OK


ODMR_LAYOUTS = (("d", "d_err"), ("f_low", "f_low_err", "f_high", "f_high_err"))


def _data_line_numbers(path: Path) -> List[int]:
    """File line numbers (1-based) of the data rows following the column header."""
    with open(path) as f:
        numbers = [i for i, line in enumerate(f, start=1)
                   if line.strip() and not line.lstrip().startswith("#")]
    return numbers[1:]


def cmd_odmr_temp(args) -> int:
    config = load_config(args.config)
    path = Path(args.input)
    if not path.is_file():
        raise StructureError(f"input file {path} not found")
    frame = read_table(path)
    layout = next((cols for cols in ODMR_LAYOUTS if set(cols) <= set(frame.columns)), None)
    if layout is None:
        raise StructureError(
            f"{path}: expected columns d,d_err or f_low,f_low_err,f_high,f_high_err"
        )
    numeric = frame[list(layout)].apply(pd.to_numeric, errors="coerce")
    bad = ~np.isfinite(numeric.to_numpy(dtype=float)).all(axis=1)
    bad |= (numeric.filter(like="_err") < 0).any(axis=1).to_numpy()
    if bad.any():
        lines = np.asarray(_data_line_numbers(path))[bad]
        raise StructureError(f"{path}: malformed rows at lines {', '.join(map(str, lines))}")

    out = _open_output(args.out, config)
    manifest = RunManifest.create("odmr-temp", args.seed, out, args.config, [path])
    rows = []
    for values in numeric.itertuples(index=False):
        if layout == ODMR_LAYOUTS[0]:
            d, d_err = values
        else:
            d, d_err = zfs_from_resonances(*values)
        temperature, error = temperature_from_zfs(
            d, config.zfs_ref, config.zfs_ref_temperature, config.zfs_slope,
            d_err=d_err, slope_err=config.zfs_slope_err,
        )
        rows.append((d, d_err, temperature, error))
    result = pd.concat(
        [frame, pd.DataFrame(rows, columns=["zfs", "zfs_err", "temperature", "temperature_err"])],
        axis=1,
    )
    write_table(out / "temperatures.csv", result, manifest, config,
                description="temperature from zero-field splitting")
    logger.info(f"Converted {len(result)} ODMR measurements")
    return EXIT_OK


COMMANDS = {
    "simulate-spectra": cmd_simulate_spectra,
    "decompose": cmd_decompose,
    "relaxometry": cmd_relaxometry,
    "calibrate": cmd_calibrate,
    "odmr-temp": cmd_odmr_temp,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point."""
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID

    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    logger.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    handlers = list(logger.handlers)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError) as e:
        logger.error(f"{args.command}: invalid input: {e}")
        return EXIT_INVALID
    except (RuntimeError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE
    finally:
        for handler in logger.handlers[:]:
            if handler not in handlers:
                logger.removeHandler(handler)
                handler.close()


if __name__ == "__main__":
    sys.exit(main())
