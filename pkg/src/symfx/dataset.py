"""Synthetic grid-archive datasets.

Systems are spherically symmetric model densities (exponential and
Gaussian mixtures) sampled on a mapped Gauss-Legendre radial grid, split
into spin channels by a scaling factor, with von Weizsaecker kinetic
energy densities. Reference energies come from a closed-form target
functional plus a fixed per-system baseline energy, so a search that
recovers the target form can reach zero error.

Archive layout: a directory with ``manifest.json`` and one little-endian
binary per system (magic "SYGR", u32 version, u64 point count, 8
contiguous float64 columns: w, rho_a, rho_b, grad_a, grad_b, tau_a,
tau_b, reserved; trailing CRC32 of everything before it).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import physics
from .physics import DEFAULT_OMEGA, HARTREE_TO_KCAL, GridDensities, derived_features

MAGIC = b"SYGR"
FORMAT_VERSION = 1

SPLITS = ("train", "val", "test")


class ArchiveError(Exception):
    """Base class for dataset archive problems."""


class ChecksumError(ArchiveError):
    pass


class VersionError(ArchiveError):
    pass


class FormatError(ArchiveError):
    pass


@dataclass
class SystemGrid:
    system_id: str
    dens: GridDensities
    e_base: float
    n_electrons: float


@dataclass(frozen=True)
class PropertyRecord:
    record_id: str
    terms: tuple[tuple[str, float], ...]
    e_ref: float  # kcal/mol
    weight: float
    split: str
    subset_tag: str = ""

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("record weight must be nonnegative")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


@dataclass
class Dataset:
    systems: dict[str, SystemGrid]
    records: list[PropertyRecord]
    metadata: dict

    def __post_init__(self):
        missing = {
            sid
            for rec in self.records
            for sid, _ in rec.terms
            if sid not in self.systems
        }
        if missing:
            raise ValueError(f"records reference unknown systems: {sorted(missing)}")
        self._feature_caches: dict[float, FeatureCache] = {}

    def split_records(self, split: str) -> list[PropertyRecord]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def features(self, omega: float) -> "FeatureCache":
        cache = self._feature_caches.get(omega)
        if cache is None:
            cache = precompute_features(self, omega)
            self._feature_caches[omega] = cache
        return cache


# --- synthetic generation -------------------------------------------------


@dataclass
class GenConfig:
    n_systems: int = 60
    n_records: int = 120
    grid_points: int = 200
    r_scale: float = 1.0
    target: str = "B97X"
    omega: float = DEFAULT_OMEGA
    seed: int = 0
    single_fraction: float = 0.5
    open_shell_fraction: float = 0.3
    gaussian_fraction: float = 0.5
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    z_range: tuple[float, float] = (0.8, 3.0)
    electrons_range: tuple[int, int] = (1, 6)

    def validate(self) -> None:
        if self.n_systems < 2 or self.n_records < 1 or self.grid_points < 8:
            raise ValueError("need at least 2 systems, 1 record, 8 grid points")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError(
                f"split fractions must sum to 1, got {self.split_fractions}"
            )
        if not 0.0 <= self.single_fraction <= 1.0:
            raise ValueError("single_fraction must lie in [0, 1]")


def radial_grid(n_points: int, scale: float = 1.0):
    """Gauss-Legendre nodes mapped onto (0, inf) with volume weights."""
    t, wt = np.polynomial.legendre.leggauss(n_points)
    r = scale * (1.0 + t) / (1.0 - t)
    jac = 2.0 * scale / (1.0 - t) ** 2
    w = wt * jac * 4.0 * np.pi * r * r
    return r, w


def _exponential_density(r, z, n_e):
    rho = n_e * (z**3 / np.pi) * np.exp(-2.0 * z * r)
    grad = 2.0 * z * rho
    return rho, grad


def _gaussian_mixture_density(r, alphas, amps):
    rho = np.zeros_like(r)
    grad = np.zeros_like(r)
    for alpha, amp in zip(alphas, amps):
        g = amp * np.exp(-alpha * r * r)
        rho += g
        grad += 2.0 * alpha * r * g
    return rho, grad


def _vw_tau(rho, grad):
    # single-orbital (von Weizsaecker) kinetic energy density
    safe = np.where(rho > 0, rho, 1.0)
    return np.where(rho > 0, grad * grad / (8.0 * safe), 0.0)


def _make_system(sid: str, cfg: GenConfig, rng, r, w) -> SystemGrid:
    n_e = int(rng.integers(cfg.electrons_range[0], cfg.electrons_range[1] + 1))
    if rng.uniform() < cfg.gaussian_fraction:
        k = int(rng.integers(1, 4))
        alphas = np.exp(rng.uniform(np.log(0.3), np.log(5.0), size=k))
        amps = rng.uniform(0.3, 1.0, size=k)
        norm = np.sum(amps * (np.pi / alphas) ** 1.5)
        amps = amps * (n_e / norm)
        rho, grad = _gaussian_mixture_density(r, alphas, amps)
    else:
        z = rng.uniform(*cfg.z_range)
        rho, grad = _exponential_density(r, z, n_e)
    if rng.uniform() < cfg.open_shell_fraction:
        f = rng.uniform(0.5, 1.0)
    else:
        f = 0.5
    rho_a, rho_b = f * rho, (1.0 - f) * rho
    grad_a, grad_b = f * grad, (1.0 - f) * grad
    dens = GridDensities(
        w=w.copy(),
        rho_a=rho_a,
        rho_b=rho_b,
        grad_a=grad_a,
        grad_b=grad_b,
        tau_a=_vw_tau(rho_a, grad_a),
        tau_b=_vw_tau(rho_b, grad_b),
    )
    e_base = -n_e * (0.5 + rng.uniform())
    return SystemGrid(sid, dens, e_base, float(n_e))


def _assign_splits(n: int, fractions, rng) -> list[str]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    order = rng.permutation(n)
    labels = [""] * n
    for pos, idx in enumerate(order):
        if pos < n_train:
            labels[idx] = "train"
        elif pos < n_train + n_val:
            labels[idx] = "val"
        else:
            labels[idx] = "test"
    return labels


def synth_generate(cfg: GenConfig) -> Dataset:
    """Generate a reproducible synthetic dataset for the given config."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    r, w = radial_grid(cfg.grid_points, cfg.r_scale)

    systems: dict[str, SystemGrid] = {}
    for i in range(cfg.n_systems):
        sid = f"s{i:03d}"
        systems[sid] = _make_system(sid, cfg, rng, r, w)

    target = physics.closed_form(cfg.target).bind()
    e_tot = {
        sid: sys.e_base + physics.exc_sl(target, sys.dens, cfg.omega)
        for sid, sys in systems.items()
    }

    ids = list(systems)
    n_single = int(round(cfg.n_records * cfg.single_fraction))
    records: list[PropertyRecord] = []
    single_order = rng.permutation(cfg.n_systems)
    for i in range(cfg.n_records):
        rid = f"r{i:04d}"
        if i < n_single:
            sid = ids[single_order[i % cfg.n_systems]]
            terms = ((sid, 1.0),)
            tag = "single"
        else:
            ia, ib = rng.choice(cfg.n_systems, size=2, replace=False)
            terms = ((ids[ia], 1.0), (ids[ib], -1.0))
            tag = "pair"
        e_ref = sum(c * e_tot[sid] for sid, c in terms) * HARTREE_TO_KCAL
        records.append(PropertyRecord(rid, terms, e_ref, 1.0, "train", tag))

    labels = _assign_splits(len(records), cfg.split_fractions, rng)
    records = [
        PropertyRecord(r.record_id, r.terms, r.e_ref, r.weight, s, r.subset_tag)
        for r, s in zip(records, labels)
    ]
    metadata = {
        "format_version": FORMAT_VERSION,
        "seed": cfg.seed,
        "target": cfg.target,
        "omega": cfg.omega,
        "generator": asdict(cfg),
    }
    return Dataset(systems, records, metadata)


# --- archive save/load ------------------------------------------------------

_COLUMNS = ("w", "rho_a", "rho_b", "grad_a", "grad_b", "tau_a", "tau_b")


def _system_bytes(sys: SystemGrid) -> bytes:
    n = sys.dens.n_points
    head = MAGIC + struct.pack("<IQ", FORMAT_VERSION, n)
    cols = [getattr(sys.dens, c) for c in _COLUMNS]
    cols.append(np.zeros(n))  # reserved
    body = b"".join(np.ascontiguousarray(c, dtype="<f8").tobytes() for c in cols)
    blob = head + body
    return blob + struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)


def _system_from_bytes(sid: str, blob: bytes, e_base: float, n_e: float) -> SystemGrid:
    if len(blob) < 20:
        raise ChecksumError(f"{sid}: truncated archive file")
    if blob[:4] != MAGIC:
        raise FormatError(f"{sid}: bad magic {blob[:4]!r}")
    version, n = struct.unpack("<IQ", blob[4:16])
    if version != FORMAT_VERSION:
        raise VersionError(f"{sid}: format version {version} unsupported")
    expect = 16 + 8 * n * 8 + 4
    if len(blob) != expect:
        raise ChecksumError(f"{sid}: size {len(blob)} != expected {expect}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{sid}: CRC mismatch")
    data = np.frombuffer(blob[16:-4], dtype="<f8").reshape(8, n)
    dens = GridDensities(*[data[i].copy() for i in range(7)])
    return SystemGrid(sid, dens, e_base, n_e)


def save(dataset: Dataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    systems_meta = []
    for sid in sorted(dataset.systems):
        sys = dataset.systems[sid]
        fname = f"{sid}.sygr"
        (root / fname).write_bytes(_system_bytes(sys))
        systems_meta.append(
            {
                "id": sid,
                "file": fname,
                "n_points": sys.dens.n_points,
                "e_base": sys.e_base,
                "n_electrons": sys.n_electrons,
            }
        )
    manifest = {
        "version": FORMAT_VERSION,
        "metadata": dataset.metadata,
        "systems": systems_meta,
        "records": [
            {
                "record_id": r.record_id,
                "terms": [[sid, c] for sid, c in r.terms],
                "e_ref": r.e_ref,
                "weight": r.weight,
                "split": r.split,
                "subset_tag": r.subset_tag,
            }
            for r in dataset.records
        ],
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    )


def load(path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed manifest: {e}") from e
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionError(f"manifest version {manifest.get('version')} unsupported")
    systems = {}
    for meta in manifest["systems"]:
        blob = (root / meta["file"]).read_bytes()
        systems[meta["id"]] = _system_from_bytes(
            meta["id"], blob, meta["e_base"], meta["n_electrons"]
        )
    records = [
        PropertyRecord(
            m["record_id"],
            tuple((sid, float(c)) for sid, c in m["terms"]),
            m["e_ref"],
            m["weight"],
            m["split"],
            m.get("subset_tag", ""),
        )
        for m in manifest["records"]
    ]
    return Dataset(systems, records, manifest["metadata"])


# --- feature cache ----------------------------------------------------------


@dataclass
class SystemFeatures:
    feats: physics.DerivedFeatures
    w: np.ndarray
    rho_a: np.ndarray
    rho_b: np.ndarray
    e_base: float

    @property
    def extra_columns(self) -> dict:
        return {
            "rho_a": self.rho_a,
            "rho_b": self.rho_b,
            "x2_a": self.feats.x2_a,
            "x2_b": self.feats.x2_b,
        }


@dataclass
class FeatureCache:
    omega: float
    systems: dict[str, SystemFeatures]

    @property
    def n_feature_bytes(self) -> int:
        """Bytes newly allocated by the cache (11 float64 columns per point)."""
        return sum(
            sum(getattr(sf.feats, c).nbytes for c in physics.DerivedFeatures.COLUMNS)
            for sf in self.systems.values()
        )


def precompute_features(dataset: Dataset, omega: float) -> FeatureCache:
    """Evaluate every parameter-independent column once per system."""
    out = {}
    for sid, sys in dataset.systems.items():
        feats = derived_features(sys.dens, omega)
        out[sid] = SystemFeatures(
            feats, sys.dens.w, sys.dens.rho_a, sys.dens.rho_b, sys.e_base
        )
    return FeatureCache(omega, out)


def exc_from_cache(bound, sf: SystemFeatures) -> float:
    """Semilocal XC energy from cached columns (same arithmetic as raw path)."""
    return physics.exc_sl_from_features(
        bound, sf.feats, sf.w, extra={"rho_a": sf.rho_a, "rho_b": sf.rho_b}
    )
