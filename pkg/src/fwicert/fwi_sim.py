"""Synthetic geology and 2-D constant-density acoustic forward modelling.

The solver advances ``u_tt = v^2 (u_xx + u_zz) + s`` with second-order
centred differences in space and time. The top edge is a pressure-release
free surface; the sides and bottom are padded with an exponential
(Cerjan-style) sponge. Velocity maps are arrays of shape ``(depth, width)``
in m/s; grid indices are ``(iz, ix)``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from . import __version__
from .parallel import parallel_map

log = logging.getLogger(__name__)

SPONGE_CELLS = 30
SPONGE_DECAY = 0.01


class CFLError(ValueError):
    def __init__(self, dt, max_dt):
        super().__init__(f"time step {dt:.6g} s violates CFL; max admissible dt is {max_dt:.6g} s")
        self.max_dt = max_dt


@dataclass(frozen=True)
class MapConfig:
    height: int = 64
    width: int = 64
    dx: float = 10.0
    fault_count: int = 1
    min_layers: int = 4
    max_layers: int = 8
    v_min: float = 1500.0
    v_max: float = 4500.0
    # interface undulation amplitude and fault throw, as fractions of the map height
    max_undulation: float = 0.08
    min_throw: float = 0.08
    max_throw: float = 0.2
    min_dip: float = 30.0
    max_dip: float = 80.0

    def validate(self):
        if not 1 <= self.fault_count <= 4:
            raise ValueError(f"fault_count must be in 1..4, got {self.fault_count}")
        if self.height < 32 or self.width < 32:
            raise ValueError(f"grid must be at least 32x32, got {self.height}x{self.width}")
        if not 1 <= self.min_layers <= self.max_layers:
            raise ValueError("need 1 <= min_layers <= max_layers")
        if not 0 < self.v_min < self.v_max:
            raise ValueError("need 0 < v_min < v_max")
        if self.dx <= 0:
            raise ValueError("dx must be positive")


@dataclass
class VelocityMap:
    grid: np.ndarray
    dx: float
    dz: float
    fault_count: int
    layers: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SourceConfig:
    position: tuple[int, int]
    frequency: float = 15.0
    amplitude: float = 1.0
    delay: float | None = None
    # source term forced to zero after this time (seconds), None = never
    cutoff: float | None = None

    def __post_init__(self):
        if self.frequency <= 0:
            raise ValueError("source frequency must be positive")


@dataclass
class ShotGather:
    data: np.ndarray  # (sources, time, receivers)
    dt: float
    receivers: np.ndarray  # (n, 2) grid indices
    sources: list


def synthesize_velocity_map(config: MapConfig, seed) -> VelocityMap:
    """Curved layered model with planar faults.

    Draws 4-8 layers whose interfaces are sinusoids with random amplitude,
    wavelength and phase; velocities are sorted so they increase with depth.
    Each fault then slides the hanging-wall block along a straight fault line
    of random dip. Faults are drawn after the layers, so maps that share a
    seed share their layering and their first faults.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width
    n_layers = int(rng.integers(config.min_layers, config.max_layers + 1))
    velocities = np.sort(rng.uniform(config.v_min, config.v_max, n_layers))
    base = np.sort(rng.uniform(0.1 * h, 0.95 * h, n_layers - 1))
    amp = rng.uniform(0.0, config.max_undulation * h, n_layers - 1)
    wavelength = rng.uniform(0.5 * w, 2.0 * w, n_layers - 1)
    phase = rng.uniform(0.0, 2 * np.pi, n_layers - 1)
    z = np.arange(h)[:, None] + 0.5
    x = np.arange(w)[None, :] + 0.5
    index = np.zeros((h, w), dtype=np.int64)
    for k in range(n_layers - 1):
        surface = base[k] + amp[k] * np.sin(2 * np.pi * x / wavelength[k] + phase[k])
        index += z > surface
    grid = velocities[index]

    faults = []
    zz, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for _ in range(config.fault_count):
        x0 = rng.uniform(0.2 * w, 0.8 * w)
        z0 = rng.uniform(0.3 * h, 0.7 * h)
        dip = np.deg2rad(rng.uniform(config.min_dip, config.max_dip))
        facing = 1.0 if rng.random() < 0.5 else -1.0
        throw = rng.uniform(config.min_throw, config.max_throw) * h
        # unit vector along the fault line (x, z) and its normal
        ux, uz = facing * np.cos(dip), np.sin(dip)
        hanging = (xx - x0) * uz - (zz - z0) * ux > 0
        src_z = np.clip(np.rint(zz - throw * uz), 0, h - 1).astype(np.int64)
        src_x = np.clip(np.rint(xx - throw * ux), 0, w - 1).astype(np.int64)
        grid = np.where(hanging, grid[src_z, src_x], grid)
        faults.append({"x0": float(x0), "z0": float(z0), "dip_deg": float(np.rad2deg(dip)),
                       "facing": facing, "throw_cells": float(throw)})
    grid = np.clip(grid, config.v_min, config.v_max)
    layers = {"velocities": velocities.tolist(), "interface_depths": base.tolist(),
              "amplitudes": amp.tolist(), "wavelengths": wavelength.tolist(),
              "phases": phase.tolist(), "faults": faults}
    return VelocityMap(grid, config.dx, config.dx, config.fault_count, layers)


def ricker_wavelet(frequency, dt, nt, delay=None) -> np.ndarray:
    """``(1 - 2 pi^2 f^2 tau^2) exp(-pi^2 f^2 tau^2)`` with ``tau = t - delay``.

    The default delay is ``1 / f``.
    """
    if frequency * dt >= 0.5:
        raise ValueError(f"f*dt = {frequency * dt:.3g} violates Nyquist (must be < 0.5)")
    delay = 1.0 / frequency if delay is None else delay
    tau = np.arange(nt) * dt - delay
    arg = (np.pi * frequency * tau) ** 2
    return (1.0 - 2.0 * arg) * np.exp(-arg)


def max_stable_dt(dx, dz, v_max) -> float:
    return 0.5 * min(dx, dz) / v_max


def _sponge(nz, nx, n=SPONGE_CELLS, decay=SPONGE_DECAY):
    """Damping factors for the padded grid (no sponge along the free surface)."""
    ramp = np.exp(-(decay * np.arange(n, 0, -1)) ** 2)
    gz = np.concatenate([np.ones(nz), ramp[::-1]])
    gx = np.concatenate([ramp, np.ones(nx), ramp[::-1]])
    return np.minimum(gz[:, None], gx[None, :])


@numba.njit(cache=True)
def _leapfrog(coef, damp, inj, sz, sx, wavelets, rz, rx, idz, idx, nt, every, traces, energy):
    b_count, pz, px = coef.shape
    u = np.zeros((b_count, pz + 2, px + 2))
    u_prev = np.zeros_like(u)
    u_next = np.zeros_like(u)
    lap = np.zeros((pz, px))
    n_rec = traces.shape[1]
    track = energy.shape[0] > 0
    for step in range(nt):
        if step % every == 0 and step // every < n_rec:
            for b in range(b_count):
                for r in range(rz.shape[0]):
                    traces[b, step // every, r] = u[b, rz[r], rx[r]]
        for b in range(b_count):
            for i in range(1, pz + 1):
                for j in range(1, px + 1):
                    c = u[b, i, j]
                    lp = (u[b, i - 1, j] + u[b, i + 1, j] - 2.0 * c) * idz \
                        + (u[b, i, j - 1] + u[b, i, j + 1] - 2.0 * c) * idx
                    lap[i - 1, j - 1] = lp
                    g = damp[i - 1, j - 1]
                    u_next[b, i, j] = g * (2.0 * c - g * u_prev[b, i, j] + coef[b, i - 1, j - 1] * lp)
            g = damp[sz[b] - 1, sx[b] - 1]
            u_next[b, sz[b], sx[b]] += g * inj[b] * wavelets[b, step]
            if track:
                # discrete acoustic energy between levels step and step + 1
                e = 0.0
                for i in range(1, pz + 1):
                    for j in range(1, px + 1):
                        d = u_next[b, i, j] - u[b, i, j]
                        e += d * d / coef[b, i - 1, j - 1] - u_next[b, i, j] * lap[i - 1, j - 1]
                energy[step, b] = e
        u_prev, u, u_next = u, u_next, u_prev
    return traces


def propagate(velocity, sources, wavelets, receivers, dx, dz, dt, nt, record_every=1,
              track_energy=False):
    """Batched time stepping.

    ``velocity`` is ``(B, nz, nx)`` (one model per shot), ``sources`` a list of
    B grid positions, ``wavelets`` a ``(B, nt)`` array of source time
    functions and ``receivers`` an ``(n, 2)`` index array. Returns traces of
    shape ``(B, nt // record_every, n)`` with sample ``k`` holding
    ``u(k * record_every * dt)``.

    With ``track_energy`` it also returns an ``(nt, B)`` array of the discrete
    acoustic energy ``sum (du/dt)^2 / v^2 + |grad u|^2`` (the quantity the
    leapfrog scheme conserves exactly in the absence of damping and sources),
    scaled by ``dt^2``.
    """
    velocity = np.asarray(velocity, dtype=np.float64)
    b, nz, nx = velocity.shape
    n = SPONGE_CELLS
    vmax = float(velocity.max())
    if dt > max_stable_dt(dx, dz, vmax):
        raise CFLError(dt, max_stable_dt(dx, dz, vmax))
    vp = np.pad(velocity, ((0, 0), (0, n), (n, n)), mode="edge")
    coef = (vp * dt) ** 2
    damp = _sponge(nz, nx)
    receivers = np.asarray(receivers, dtype=np.int64).reshape(-1, 2)
    # +1 for the ghost ring that holds the zero Dirichlet value
    rz, rx = receivers[:, 0] + 1, receivers[:, 1] + n + 1
    sz = np.array([s[0] for s in sources], dtype=np.int64) + 1
    sx = np.array([s[1] for s in sources], dtype=np.int64) + n + 1
    inj = coef[np.arange(b), sz - 1, sx - 1] / (dx * dz)
    wavelets = np.ascontiguousarray(np.asarray(wavelets, dtype=np.float64).reshape(b, -1))
    if wavelets.shape[1] < nt:
        raise ValueError(f"wavelets have {wavelets.shape[1]} samples, need {nt}")
    traces = np.zeros((b, nt // record_every, len(receivers)))
    energy = np.zeros((nt if track_energy else 0, b))
    _leapfrog(coef, damp, inj, sz, sx, wavelets, rz, rx, 1.0 / dz ** 2, 1.0 / dx ** 2,
              int(nt), int(record_every), traces, energy)
    if track_energy:
        return traces, energy
    return traces


def source_wavelet(src: SourceConfig, dt, nt):
    w = src.amplitude * ricker_wavelet(src.frequency, dt, nt, src.delay)
    if src.cutoff is not None:
        w[np.arange(nt) * dt > src.cutoff] = 0.0
    return w


def simulate_shot(m: VelocityMap, src: SourceConfig, receivers, dt, nt, record_every=1):
    """Record one shot; returns an array of shape ``(nt // record_every, n_receivers)``."""
    nz, nx = m.grid.shape
    iz, ix = src.position
    if not (0 <= iz < nz and 0 <= ix < nx):
        raise ValueError(f"source position {src.position} outside the {nz}x{nx} grid")
    traces = propagate(m.grid[None], [src.position], source_wavelet(src, dt, nt)[None],
                       receivers, m.dx, m.dz, dt, nt, record_every)
    return traces[0]


@dataclass(frozen=True)
class AcquisitionConfig:
    n_sources: int = 3
    frequency: float = 15.0
    source_depth: int = 1
    receiver_depth: int = 1
    # recorded time samples per trace; the simulation step is an integer fraction of the sample interval
    n_time: int = 64
    duration: float | None = None
    # wavelet peak time in seconds; fixed so that frequency changes do not also shift arrivals
    source_delay: float | None = 0.07

    def layout(self, m: MapConfig):
        if self.n_sources < 1:
            raise ValueError("need at least one source")
        if not (0 <= self.source_depth < m.height and 0 <= self.receiver_depth < m.height):
            raise ValueError("source/receiver depth outside the grid")
        xs = np.rint(np.linspace(0, m.width - 1, self.n_sources + 2)[1:-1]).astype(int)
        sources = [(self.source_depth, int(x)) for x in xs]
        receivers = np.stack([np.full(m.width, self.receiver_depth), np.arange(m.width)], axis=1)
        return sources, receivers

    def timing(self, m: MapConfig):
        """(simulation dt, steps, record_every, recorded dt)."""
        diagonal = np.hypot(m.height * m.dx, m.width * m.dx)
        duration = self.duration or 2.0 * diagonal / m.v_min
        dt_max = max_stable_dt(m.dx, m.dx, m.v_max)
        every = int(np.ceil(duration / (self.n_time * dt_max)))
        dt = duration / (self.n_time * every)
        if self.frequency * dt * every >= 0.5:
            log.warning("recorded sampling %.4g s aliases %.1f Hz sources", dt * every, self.frequency)
        return dt, self.n_time * every, every, dt * every


def simulate_gather(m: VelocityMap, map_config: MapConfig, acq: AcquisitionConfig) -> ShotGather:
    return _simulate_batch([m], map_config, acq)[0]


def _simulate_batch(maps, map_config, acq):
    sources, receivers = acq.layout(map_config)
    dt, nt, every, dt_rec = acq.timing(map_config)
    srcs = [SourceConfig(p, acq.frequency, delay=acq.source_delay) for p in sources]
    vel = np.stack([m.grid for m in maps for _ in srcs])
    wav = np.stack([source_wavelet(s, dt, nt) for _ in maps for s in srcs])
    traces = propagate(vel, [s.position for _ in maps for s in srcs], wav, receivers,
                       map_config.dx, map_config.dx, dt, nt, every)
    traces = traces.reshape(len(maps), len(srcs), traces.shape[1], traces.shape[2])
    return [ShotGather(t, dt_rec, receivers, srcs) for t in traces]


# ---------------------------------------------------------------------------
# on-disk dataset

TENSOR_MAGIC = b"FWITNSR1"


def write_tensor(path, a) -> None:
    a = np.ascontiguousarray(a, dtype="<f8")
    header = TENSOR_MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:8]!r}")
    (rank,) = struct.unpack_from("<I", data, 8)
    shape = struct.unpack_from(f"<{rank}I", data, 12)
    offset = 12 + 4 * rank
    n = int(np.prod(shape))
    if len(data) != offset + 8 * n:
        raise ValueError(f"{path}: expected {offset + 8 * n} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f8", offset=offset).astype(np.float64).reshape(shape)


def sample_seed(seed, index):
    return np.random.SeedSequence([int(seed), int(index)])


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def build_dataset(out_dir, n_samples, map_config: MapConfig, acq: AcquisitionConfig, seed,
                  chunk=16, workers=1):
    """Synthesize ``n_samples`` (map, gather) pairs into ``out_dir``.

    Writes ``manifest`` (JSON) plus ``sample_%06d.vel`` / ``sample_%06d.seis``.
    Sample ``i`` depends only on ``(seed, i)``. Returns the manifest dict.
    """
    map_config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sources, receivers = acq.layout(map_config)
    dt, nt, every, dt_rec = acq.timing(map_config)
    chunks = [list(range(lo, min(lo + chunk, n_samples))) for lo in range(0, n_samples, chunk)]
    job = _ChunkJob(out, map_config, acq, seed)
    parallel_map(job, chunks, workers)
    cfg = {"map": dataclasses.asdict(map_config), "acquisition": dataclasses.asdict(acq),
           "seed": int(seed)}
    manifest = {
        "format": "fwicert-dataset-1",
        "n_samples": int(n_samples),
        "data_shape": [acq.n_sources, acq.n_time, map_config.width],
        "label_shape": [map_config.height, map_config.width],
        "dt": dt_rec,
        "dt_simulation": dt,
        "record_every": every,
        "nt_simulation": nt,
        "dx": map_config.dx,
        "dz": map_config.dx,
        "sources": [list(s) for s in sources],
        "receivers": receivers.tolist(),
        "normalization": {"velocity_min": map_config.v_min, "velocity_max": map_config.v_max,
                          "seismic": "per-sample unit peak"},
        "seed": int(seed),
        "config": cfg,
        "provenance": {"tool": "fwicert", "version": __version__, "config_hash": config_hash(cfg),
                       "seed": int(seed)},
    }
    (out / "manifest").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


class _ChunkJob:
    def __init__(self, out, map_config, acq, seed):
        self.out, self.map_config, self.acq, self.seed = out, map_config, acq, seed

    def __call__(self, indices):
        maps = [synthesize_velocity_map(self.map_config, sample_seed(self.seed, i)) for i in indices]
        for i, m, g in zip(indices, maps, _simulate_batch(maps, self.map_config, self.acq)):
            write_tensor(self.out / f"sample_{i:06d}.vel", m.grid)
            write_tensor(self.out / f"sample_{i:06d}.seis", g.data)


@dataclass
class FWIDataset:
    """Normalised arrays ready for training.

    ``inputs`` holds gathers scaled to unit peak per sample, ``targets`` the
    velocity maps min-max scaled to [0, 1] with the manifest's global bounds.
    """
    inputs: np.ndarray
    targets: np.ndarray
    manifest: dict
    path: Path | None = None

    def __len__(self):
        return len(self.inputs)

    def subset(self, indices):
        idx = np.asarray(indices)
        return FWIDataset(self.inputs[idx], self.targets[idx], self.manifest, self.path)


def normalize_gathers(raw):
    raw = np.asarray(raw, dtype=np.float64)
    if len(raw) == 0:
        return raw.copy()
    peak = np.max(np.abs(raw.reshape(len(raw), -1)), axis=1)
    peak = np.where(peak > 0, peak, 1.0)
    return raw / peak.reshape((-1,) + (1,) * (raw.ndim - 1))


def normalize_velocity(v, manifest):
    lo = manifest["normalization"]["velocity_min"]
    hi = manifest["normalization"]["velocity_max"]
    return (np.asarray(v, dtype=np.float64) - lo) / (hi - lo)


def load_dataset(path, limit=None) -> FWIDataset:
    path = Path(path)
    manifest = json.loads((path / "manifest").read_text())
    n = manifest["n_samples"] if limit is None else min(limit, manifest["n_samples"])
    seis = np.stack([read_tensor(path / f"sample_{i:06d}.seis") for i in range(n)]) if n else \
        np.zeros((0, *manifest["data_shape"]))
    vel = np.stack([read_tensor(path / f"sample_{i:06d}.vel") for i in range(n)]) if n else \
        np.zeros((0, *manifest["label_shape"]))
    return FWIDataset(normalize_gathers(seis), normalize_velocity(vel, manifest), manifest, path)


@dataclass
class ForwardLipschitzEstimate:
    lower: float
    n_pairs: int
    argmax_pair: tuple[int, int] | None
    history: np.ndarray
    skipped: int = 0


def estimate_forward_lipschitz(dataset: FWIDataset, n_pairs, seed=0) -> ForwardLipschitzEstimate:
    """Largest observed ``|F(m1) - F(m2)| / |m1 - m2|`` over sampled pairs.

    Works in the normalised units the network sees. This is a lower estimate
    of the true constant, never a certificate. Pairs of identical maps are
    skipped and logged.
    """
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least two samples")
    iu, ju = np.triu_indices(n, 1)
    total = len(iu)
    if n_pairs >= total:
        pick = np.arange(total)
    else:
        pick = np.sort(np.random.default_rng(seed).choice(total, size=n_pairs, replace=False))
    x = dataset.targets.reshape(n, -1)
    y = dataset.inputs.reshape(n, -1)
    best, arg, skipped = 0.0, None, 0
    history = []
    for k in pick:
        i, j = int(iu[k]), int(ju[k])
        den = np.linalg.norm(x[i] - x[j])
        if den == 0.0:
            skipped += 1
            log.info("skipping pair (%d, %d): identical velocity maps", i, j)
            history.append(best)
            continue
        ratio = float(np.linalg.norm(y[i] - y[j]) / den)
        if ratio > best:
            best, arg = ratio, (i, j)
        history.append(best)
    return ForwardLipschitzEstimate(best, len(pick) - skipped, arg, np.array(history), skipped)
