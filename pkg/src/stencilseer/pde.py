"""Synthetic space-time observation data from four PDE families.

Each generator uses an explicit finite-difference scheme whose annihilating
stencil is known exactly, so learned kernels can be verified against ground
truth.  Images are (W, H, C) arrays with axis 0 = space, axis 1 = time.

Point-wise sources enter the update equations of the cells *adjacent to*
each spatial boundary (the injection cell at the x=0 end, the production
cell at the x=L end).  Those are the rows a valid convolution can test, so
the recorded source traces reappear verbatim in the residual maps; this is
what makes the boundary traces learnable targets.  The trace value is the
per-step state increment applied at the cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .errors import CompatibilityError, ConfigError, ShapeError, StabilityError

FAMILIES = ("hyperbolic", "elliptic", "parabolic", "coupled")


@dataclass(frozen=True)
class GenConfig:
    """Generator settings; defaults give 101 images of 50x50 at source scale 1e-4."""

    family: str
    W: int = 50
    H: int = 50
    dx: float = 1.0
    dt: float = 1.0
    a: float = 1.0
    b: float = 1.0
    cfl: float = 0.5
    alpha: float = 1e-4
    u_amp: float = 0.3  # peak |u| of the coupled family's velocity field
    n_samples: int = 101
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.W < 4 or self.H < 4:
            raise ConfigError("need W, H >= 4")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.n_samples < 1:
            raise ConfigError("need at least one sample")


@dataclass
class SourceSpec:
    """Boundary source traces (length H) and initial conditions (length W)."""

    q0: np.ndarray | None = None  # transported quantity, injection end
    qL: np.ndarray | None = None  # transported quantity, production end
    p0: np.ndarray | None = None  # diffused/potential quantity, injection end
    pL: np.ndarray | None = None  # diffused/potential quantity, production end
    f: np.ndarray | None = None   # initial condition for u
    g: np.ndarray | None = None   # initial condition for v


@dataclass(frozen=True)
class SampleMeta:
    family: str
    a: float
    b: float
    cfl: float
    seed: int


@dataclass
class Sample:
    """One observation image with its 2xHxC boundary-trace labels."""

    image: np.ndarray     # (W, H, C)
    boundary: np.ndarray  # (2, H, C); row 0 = x=0 end, row 1 = x=L end
    meta: SampleMeta

    @property
    def channels(self) -> int:
        return self.image.shape[2]


class Dataset:
    """An ordered sample collection with a deterministic 80/20 split.

    The split seed defaults to the first sample's sub-seed so that a dataset
    reloaded from disk splits identically to the one that was saved.
    """

    def __init__(self, samples, split_seed=None):
        self.samples = list(samples)
        if not self.samples:
            raise ConfigError("dataset needs at least one sample")
        if split_seed is None:
            split_seed = self.samples[0].meta.seed
        self.split_seed = int(split_seed)
        n = len(self.samples)
        perm = np.random.default_rng(self.split_seed).permutation(n)
        n_train = int(0.8 * n)
        self.train_indices = perm[:n_train]
        self.val_indices = perm[n_train:]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def family(self) -> str:
        return self.samples[0].meta.family

    def train_samples(self):
        return [self.samples[i] for i in self.train_indices]

    def val_samples(self):
        return [self.samples[i] for i in self.val_indices]


def smooth_signal(rng, n: int, amplitude: float, kmax: int | None = None) -> np.ndarray:
    """Band-limited random signal, peak magnitude <= amplitude."""
    if kmax is None:
        kmax = max(2, n // 6)
    t = np.arange(n)
    ks = np.arange(1, kmax + 1)
    phase = 2.0 * np.pi * np.outer(ks, t) / n
    coeffs_c = rng.normal(size=kmax)
    coeffs_s = rng.normal(size=kmax)
    sig = coeffs_c @ np.cos(phase) + coeffs_s @ np.sin(phase)
    peak = np.max(np.abs(sig))
    if peak == 0.0:
        return np.zeros(n)
    return sig * (amplitude * rng.uniform(0.5, 1.0) / peak)


def _neumann_solve_many(p: np.ndarray, a: float, dx: float) -> np.ndarray:
    """Solve the zero-flux tridiagonal system for one or many source columns.

    ``p`` is (W,) or (W, ncols).  The singular constant mode is removed by
    gauging u[0] = 0 and subtracting the mean afterwards.
    """
    if a <= 0 or dx <= 0:
        raise ConfigError("need a > 0 and dx > 0")
    p = np.asarray(p, dtype=np.float64)
    squeeze = p.ndim == 1
    if squeeze:
        p = p[:, None]
    w = p.shape[0]
    if w < 3:
        raise ShapeError("need at least three spatial rows")
    kappa = a / (dx * dx)
    rhs = p.copy()
    rhs[0] /= dx
    rhs[-1] /= dx
    colsum = rhs.sum(axis=0)
    if np.any(np.abs(colsum) > 1e-12):
        raise CompatibilityError(
            f"sources must sum to zero per column (max |sum| = {np.max(np.abs(colsum)):.3e})"
        )
    # Banded layout for solve_banded: row 0 upper, row 1 main, row 2 lower.
    ab = np.zeros((3, w))
    ab[1, 1:-1] = -2.0 * kappa
    ab[0, 2:] = kappa
    ab[2, :-1] = kappa
    ab[1, -1] = -kappa
    ab[2, -2] = kappa
    # Gauge: replace the (redundant) first equation with u[0] = 0.
    ab[1, 0] = 1.0
    ab[0, 1] = 0.0
    rhs[0] = 0.0
    u = solve_banded((1, 1), ab, rhs)
    u -= u.mean(axis=0)
    return u[:, 0] if squeeze else u


def solve_tridiagonal_neumann(p, a: float, dx: float) -> np.ndarray:
    """Zero-flux Poisson solve: flux rows at the ends, 3-point rows inside.

    Discrete system (kappa = a/dx^2):

        kappa (u[1] - u[0])       = p[0] / dx
        kappa (u[i-1] - 2 u[i] + u[i+1]) = p[i]
        kappa (u[W-2] - u[W-1])   = p[W-1] / dx

    Sources must sum to zero; the returned solution has zero mean.
    """
    return _neumann_solve_many(np.asarray(p, dtype=np.float64), a, dx)


def transport_step(
    v: np.ndarray,
    u: np.ndarray,
    q_inject: float,
    dt: float,
    dx: float,
    step: int | None = None,
) -> np.ndarray:
    """One flux-form upwind step of d(v)/dt + d(u v)/dx = sources.

    Face velocities are cell averages; the upwind side follows the face
    velocity's sign.  The x=0 face admits no inflow, the x=L face is an
    open outflow.  ``q_inject`` is added to the injection cell (index 1).
    """
    w = v.shape[0]
    faces = np.empty(w + 1)
    uf = 0.5 * (u[:-1] + u[1:])
    cmax = max(np.max(np.abs(uf)), abs(u[-1])) * dt / dx
    if cmax > 1.0 + 1e-12:
        where = "" if step is None else f" at step {step}"
        raise StabilityError(f"transport CFL {cmax:.3g} exceeds 1{where}")
    faces[0] = 0.0
    faces[1:w] = uf * np.where(uf > 0.0, v[:-1], v[1:])
    faces[w] = u[-1] * v[-1] if u[-1] > 0.0 else 0.0
    out = v - (dt / dx) * (faces[1:] - faces[:-1])
    out[1] += q_inject
    return out


def gen_hyperbolic(cfg: GenConfig, src: SourceSpec, seed: int = 0) -> Sample:
    """First-order transport toward +x at CFL ``cfg.cfl``.

    The injection trace enters the first interior cell each step; the far
    end is an open outflow, so its trace label is identically zero.
    """
    c = cfg.cfl
    if not 0.0 < c <= 1.0:
        raise StabilityError(f"transport CFL must be in (0, 1], got {c}")
    w, h = cfg.W, cfg.H
    q0 = np.zeros(h) if src.q0 is None else np.asarray(src.q0, dtype=np.float64)
    g = np.zeros(w) if src.g is None else np.asarray(src.g, dtype=np.float64)
    dt_eff = c * cfg.dx / cfg.a
    u_const = np.full(w, cfg.a)
    v = np.zeros((w, h))
    v[:, 0] = g
    for n in range(h - 1):
        v[:, n + 1] = transport_step(v[:, n], u_const, q0[n + 1], dt_eff, cfg.dx, step=n)
    boundary = np.zeros((2, h, 1))
    boundary[0, :, 0] = q0
    return Sample(v[:, :, None].copy(), boundary,
                  SampleMeta(cfg.family, cfg.a, cfg.b, c, int(seed)))


def gen_elliptic(cfg: GenConfig, src: SourceSpec, seed: int = 0) -> Sample:
    """Independent per-column zero-flux Poisson solves driven by a +/- source pair."""
    w, h = cfg.W, cfg.H
    p0 = np.zeros(h) if src.p0 is None else np.asarray(src.p0, dtype=np.float64)
    pl = -p0 if src.pL is None else np.asarray(src.pL, dtype=np.float64)
    pmat = np.zeros((w, h))
    pmat[1] = p0
    pmat[w - 2] = pl
    u = _neumann_solve_many(pmat, cfg.a, cfg.dx)
    boundary = np.zeros((2, h, 1))
    boundary[0, :, 0] = p0
    boundary[1, :, 0] = pl
    return Sample(u[:, :, None].copy(), boundary,
                  SampleMeta(cfg.family, cfg.a, cfg.b, 0.0, int(seed)))


def gen_parabolic(cfg: GenConfig, src: SourceSpec, seed: int = 0) -> Sample:
    """Forward-time central-space diffusion with zero-flux ends at ratio ``cfg.cfl``."""
    r = cfg.cfl
    if not 0.0 < r <= 0.5:
        raise StabilityError(f"diffusion ratio must be in (0, 0.5], got {r}")
    w, h = cfg.W, cfg.H
    p0 = np.zeros(h) if src.p0 is None else np.asarray(src.p0, dtype=np.float64)
    pl = np.zeros(h) if src.pL is None else np.asarray(src.pL, dtype=np.float64)
    f = np.zeros(w) if src.f is None else np.asarray(src.f, dtype=np.float64)
    u = np.zeros((w, h))
    u[:, 0] = f
    for n in range(h - 1):
        cur = u[:, n]
        nxt = u[:, n + 1]
        nxt[1:-1] = cur[1:-1] + r * (cur[2:] - 2.0 * cur[1:-1] + cur[:-2])
        nxt[0] = cur[0] + r * (cur[1] - cur[0])
        nxt[-1] = cur[-1] + r * (cur[-2] - cur[-1])
        nxt[1] += p0[n + 1]
        nxt[-2] += pl[n + 1]
    boundary = np.zeros((2, h, 1))
    boundary[0, :, 0] = p0
    boundary[1, :, 0] = pl
    return Sample(u[:, :, None].copy(), boundary,
                  SampleMeta(cfg.family, cfg.a, cfg.b, r, int(seed)))


def gen_coupled(cfg: GenConfig, src: SourceSpec, seed: int = 0) -> Sample:
    """Per-column potential solves driving flux-form transport of a second field.

    Channel 0 is the potential u (velocity field), channel 1 the transported
    v.  The transport CFL is re-checked every step against the local u.
    """
    w, h = cfg.W, cfg.H
    p0 = np.zeros(h) if src.p0 is None else np.asarray(src.p0, dtype=np.float64)
    pl = -p0 if src.pL is None else np.asarray(src.pL, dtype=np.float64)
    q0 = np.zeros(h) if src.q0 is None else np.asarray(src.q0, dtype=np.float64)
    g = np.zeros(w) if src.g is None else np.asarray(src.g, dtype=np.float64)
    pmat = np.zeros((w, h))
    pmat[1] = p0
    pmat[w - 2] = pl
    u = _neumann_solve_many(pmat, cfg.a, cfg.dx)
    v = np.zeros((w, h))
    v[:, 0] = g
    for n in range(h - 1):
        v[:, n + 1] = transport_step(v[:, n], u[:, n], q0[n + 1], cfg.dt, cfg.dx, step=n)
    image = np.stack((u, v), axis=2)
    boundary = np.zeros((2, h, 2))
    boundary[0, :, 0] = p0
    boundary[1, :, 0] = pl
    boundary[0, :, 1] = q0
    return Sample(image, boundary, SampleMeta(cfg.family, cfg.a, cfg.b, cfg.cfl, int(seed)))


def elliptic_unit_peak(w: int, a: float, dx: float) -> float:
    """Peak |u| of the zero-flux solve for a unit +/- source pair at the end cells."""
    p = np.zeros(w)
    p[1] = 1.0
    p[w - 2] = -1.0
    return float(np.max(np.abs(_neumann_solve_many(p, a, dx))))


def make_source(cfg: GenConfig, rng) -> SourceSpec:
    """Draw the random traces and initial conditions one sample needs."""
    w, h, alpha = cfg.W, cfg.H, cfg.alpha
    if cfg.family == "hyperbolic":
        return SourceSpec(q0=smooth_signal(rng, h, alpha), qL=np.zeros(h),
                          g=smooth_signal(rng, w, alpha))
    if cfg.family == "elliptic":
        s = smooth_signal(rng, h, alpha)
        return SourceSpec(p0=s, pL=-s)
    if cfg.family == "parabolic":
        return SourceSpec(p0=smooth_signal(rng, h, alpha),
                          pL=smooth_signal(rng, h, alpha),
                          f=smooth_signal(rng, w, alpha))
    # coupled: the potential's source pair is sized so that peak |u| ~ u_amp
    peak = elliptic_unit_peak(w, cfg.a, cfg.dx)
    s = smooth_signal(rng, h, cfg.u_amp / peak)
    return SourceSpec(p0=s, pL=-s, q0=smooth_signal(rng, h, alpha),
                      g=smooth_signal(rng, w, alpha))


_GENERATORS = {
    "hyperbolic": gen_hyperbolic,
    "elliptic": gen_elliptic,
    "parabolic": gen_parabolic,
    "coupled": gen_coupled,
}


def generate_sample(cfg: GenConfig, sample_seed: int) -> Sample:
    rng = np.random.default_rng(int(sample_seed))
    src = make_source(cfg, rng)
    return _GENERATORS[cfg.family](cfg, src, seed=int(sample_seed))


def generate_dataset(cfg: GenConfig) -> Dataset:
    """Seeded dataset of ``cfg.n_samples`` images with an 80/20 split."""
    master = np.random.default_rng(cfg.seed)
    seeds = master.integers(0, 2**63 - 1, size=cfg.n_samples, dtype=np.uint64)
    samples = [generate_sample(cfg, int(s)) for s in seeds]
    return Dataset(samples)
