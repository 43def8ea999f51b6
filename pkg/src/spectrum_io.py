"""
Spectrum and basis files.

Two-column comma-separated text (wavelength_nm, counts_per_s) preceded by
``# key = value`` header lines. Required keys: role, laser_power (W),
temperature (K) and exposure (s). Basis files use the same layout with role
basis_minus or basis_zero and the subtraction weights in the header.
"""
import logging
from collections import namedtuple
from pathlib import Path
from typing import Dict, Iterable, Tuple, Union

import numpy as np
import pandas as pd

from src.core_model import Spectrum
from src.errors import ShapeError, StructureError
from src.spectra import BasisSet

logger = logging.getLogger("nv-relaxometry")

COLUMNS = ["wavelength_nm", "counts_per_s"]
SPECTRUM_ROLES = ("sample", "reference_zero", "reference_minus", "calibration")
BASIS_ROLES = ("basis_minus", "basis_zero")

SpectrumFile = namedtuple("SpectrumFile", ["spectrum", "role", "metadata"])

PathLike = Union[str, Path]


def read_header(path: PathLike) -> Dict[str, str]:
    """``# key = value`` lines at the top of a file; other comments are skipped."""
    header = {}
    with open(path) as f:
        for line in f:
            if not line.startswith("#"):
                break
            key, sep, value = line[1:].partition("=")
            if sep:
                header[key.strip()] = value.strip()
    return header


def _write_table(path: PathLike, header: Iterable[str], frame: pd.DataFrame):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        for line in header:
            f.write(f"# {line}\n")
        frame.to_csv(f, index=False, float_format="%.10g", lineterminator="\n")


def _read_columns(path: PathLike, columns) -> pd.DataFrame:
    frame = pd.read_csv(path, comment="#")
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise StructureError(f"{path}: missing columns {missing}")
    return frame


def _require(header: Dict[str, str], path: PathLike, *keys: str):
    missing = [k for k in keys if k not in header]
    if missing:
        raise StructureError(f"{path}: header lacks {', '.join(missing)}")


def write_spectrum(
    path: PathLike, spectrum: Spectrum, role: str = "sample", header: Iterable[str] = ()
):
    lines = list(header) + [
        f"role = {role}",
        f"laser_power = {spectrum.laser_power!r}",
        f"temperature = {spectrum.temperature!r}",
        f"exposure = {spectrum.exposure!r}",
    ]
    frame = pd.DataFrame({COLUMNS[0]: spectrum.wavelengths, COLUMNS[1]: spectrum.intensities})
    _write_table(path, lines, frame)


def read_spectrum(path: PathLike) -> SpectrumFile:
    header = read_header(path)
    _require(header, path, "role", "laser_power", "temperature", "exposure")
    frame = _read_columns(path, COLUMNS)
    spectrum = Spectrum(
        wavelengths=frame[COLUMNS[0]].to_numpy(),
        intensities=frame[COLUMNS[1]].to_numpy(),
        laser_power=float(header["laser_power"]),
        temperature=float(header["temperature"]),
        exposure=float(header["exposure"]),
    )
    return SpectrumFile(spectrum, header["role"], header)


def basis_paths(stem: PathLike) -> Tuple[Path, Path]:
    stem = Path(stem)
    return (
        stem.with_name(f"{stem.name}_minus.csv"),
        stem.with_name(f"{stem.name}_zero.csv"),
    )


def write_basis(stem: PathLike, basis: BasisSet, header: Iterable[str] = ()):
    """Write the two basis functions to ``<stem>_minus.csv`` and ``<stem>_zero.csv``."""
    header = list(header)
    for path, role, values in zip(
        basis_paths(stem), BASIS_ROLES, (basis.basis_minus, basis.basis_zero)
    ):
        lines = header + [
            f"role = {role}",
            f"delta0 = {basis.delta0!r}",
            f"delta_minus = {basis.delta_minus!r}",
            f"temperature = {basis.temperature!r}",
        ]
        frame = pd.DataFrame({COLUMNS[0]: basis.wavelength_grid, COLUMNS[1]: values})
        _write_table(path, lines, frame)


def read_basis(stem: PathLike) -> BasisSet:
    frames, headers = [], []
    for path, role in zip(basis_paths(stem), BASIS_ROLES):
        header = read_header(path)
        _require(header, path, "role", "delta0", "delta_minus")
        if header["role"] != role:
            raise StructureError(f"{path}: role is {header['role']!r}, expected {role!r}")
        frames.append(_read_columns(path, COLUMNS))
        headers.append(header)
    grid = frames[0][COLUMNS[0]].to_numpy()
    if not np.array_equal(grid, frames[1][COLUMNS[0]].to_numpy()):
        raise ShapeError(f"{stem}: basis files are on different grids")
    temperature = headers[0].get("temperature", "None")
    return BasisSet(
        basis_minus=frames[0][COLUMNS[1]].to_numpy(),
        basis_zero=frames[1][COLUMNS[1]].to_numpy(),
        delta0=float(headers[0]["delta0"]),
        delta_minus=float(headers[0]["delta_minus"]),
        wavelength_grid=grid,
        temperature=None if temperature == "None" else float(temperature),
    )


def read_correction_table(path: PathLike) -> np.ndarray:
    """(wavelength_nm, factor) rows of an instrument-response correction table."""
    frame = _read_columns(path, ["wavelength_nm", "factor"])
    return frame[["wavelength_nm", "factor"]].to_numpy(dtype=float)
