"""Coupled-dipole electromagnetic engine.

Every wireless entity is a z-polarized point dipole in the x-y plane.  At a
given frequency f the dipoles couple through the 2D free-space Green's
function G(d) = (i/4) H0(k d) with k = 2*pi*f (propagation speed 1, so the
wavelength at the unit center frequency is 1).  The interaction matrix

    W_ii = alpha_inv(dipole_i, f)          (inverse polarizability)
    W_ij = -k^2 G(|r_i - r_j|)             (i != j)

is symmetric, and end-to-end channels are entries of its inverse: the
response at dipole rx to a unit excitation at dipole tx is (W^-1)[rx, tx].
One LU factorization per frequency serves every tx/rx extraction.

All arithmetic is float64/complex128.  Bessel J0/Y0 are implemented here
(power series up to x = 8, Hankel asymptotic expansion beyond) so their
accuracy is testable; both branches run a fixed number of terms, which makes
results independent of how points are batched.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .errors import SolverError, ValidationError

EULER_GAMMA = 0.57721566490153286061

# Fixed term counts: enough for <=1e-8 absolute error on [1e-3, 100],
# see test_bessel.py for the high-precision series oracle.
_SERIES_TERMS = 40
_ASYMPTOTIC_TERMS = 18  # Hankel symbols (0,m), m = 0..17 -> 9 P + 9 Q terms
_SERIES_ASYMPTOTIC_SWITCH = 8.0

# Condition-number ceiling for the per-frequency factorization.
COND_LIMIT = 1e12

ROLES = ("BS", "UE", "RIS", "SENSE", "WALL", "OBJECT")


def _hankel_symbols(m_max):
    # (0,m) = product_{j=1..m} -(2j-1)^2 / (4m), starting from (0,0) = 1
    a = [1.0]
    for m in range(1, m_max):
        a.append(a[-1] * (-((2.0 * m - 1.0) ** 2)) / (4.0 * m))
    return a


_HANKEL_A = _hankel_symbols(_ASYMPTOTIC_TERMS)


def j0_y0_arrays(x):
    """J0 and Y0 on a positive float64 array. Core evaluation routine."""
    x = np.asarray(x, dtype=np.float64)
    j = np.empty_like(x)
    y = np.empty_like(x)
    small = x <= _SERIES_ASYMPTOTIC_SWITCH
    xs = x[small]
    if xs.size:
        q = 0.25 * xs * xs
        term = np.ones_like(xs)
        s = np.ones_like(xs)
        hterm = np.ones_like(xs)
        harmonic = 0.0
        acc = np.zeros_like(xs)
        for k in range(1, _SERIES_TERMS + 1):
            term = term * (-q) / (k * k)
            s = s + term
            hterm = hterm * q / (k * k)
            harmonic += 1.0 / k
            acc = acc + (harmonic if k % 2 else -harmonic) * hterm
        j[small] = s
        y[small] = (2.0 / math.pi) * ((np.log(0.5 * xs) + EULER_GAMMA) * s + acc)
    xb = x[~small]
    if xb.size:
        two_x = 2.0 * xb
        p = np.zeros_like(xb)
        q = np.zeros_like(xb)
        pow_tx = np.ones_like(xb)
        for m in range(_ASYMPTOTIC_TERMS):
            sign = (-1.0) ** (m // 2) if m % 2 == 0 else (-1.0) ** ((m - 1) // 2)
            if m % 2 == 0:
                p = p + sign * _HANKEL_A[m] / pow_tx
            else:
                q = q + sign * _HANKEL_A[m] / pow_tx
            pow_tx = pow_tx * two_x
        chi = xb - 0.25 * math.pi
        amp = np.sqrt(2.0 / (math.pi * xb))
        big = ~small
        j[big] = amp * (p * np.cos(chi) - q * np.sin(chi))
        y[big] = amp * (p * np.sin(chi) + q * np.cos(chi))
    return j, y


def bessel_j0_y0(x):
    """(J0(x), Y0(x)) for scalar x > 0 (Y0 diverges at 0)."""
    if not x > 0.0:
        raise ValidationError(f"Y0 requires x > 0, got {x!r}")
    j, y = j0_y0_arrays(np.array([x], dtype=np.float64))
    return float(j[0]), float(y[0])


def hankel0_arrays(x):
    """H0^(1)(x) = J0(x) + i Y0(x) on a positive array."""
    j, y = j0_y0_arrays(x)
    return j + 1j * y


@dataclass(frozen=True)
class DipoleProperties:
    """Lorentzian dipole: resonance frequency, charge term, absorptive damping."""

    f_res: float
    chi: float
    gamma_l: float

    def __post_init__(self):
        if not self.f_res > 0:
            raise ValidationError(f"f_res must be positive, got {self.f_res}")
        if not self.chi > 0:
            raise ValidationError(f"chi must be positive, got {self.chi}")
        if self.gamma_l < 0:
            raise ValidationError(f"gamma_l must be nonnegative, got {self.gamma_l}")


@dataclass(frozen=True)
class FrequencyGrid:
    """Equispaced frequency samples around the unit center frequency."""

    f_center: float = 1.0
    half_band: float = 0.1
    n_points: int = 64

    def __post_init__(self):
        if self.n_points < 2:
            raise ValidationError(f"need n_points >= 2, got {self.n_points}")
        if not 0.0 < self.half_band < 1.0:
            raise ValidationError(f"half_band must be in (0, 1), got {self.half_band}")
        if not self.f_center > 0:
            raise ValidationError(f"f_center must be positive, got {self.f_center}")

    def frequencies(self):
        lo = self.f_center * (1.0 - self.half_band)
        hi = self.f_center * (1.0 + self.half_band)
        return np.linspace(lo, hi, self.n_points)


@dataclass
class SceneInstance:
    """Concrete dipole list: positions (n, 2), per-dipole properties, role tags."""

    positions: np.ndarray
    props: tuple
    roles: tuple

    # cached per-dipole property arrays, filled in __post_init__
    f_res: np.ndarray = field(init=False, repr=False)
    chi: np.ndarray = field(init=False, repr=False)
    gamma_l: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValidationError(f"positions must be (n, 2), got {self.positions.shape}")
        n = self.positions.shape[0]
        if len(self.props) != n or len(self.roles) != n:
            raise ValidationError("positions, props and roles must have equal length")
        for r in self.roles:
            if r not in ROLES:
                raise ValidationError(f"unknown role {r!r}")
        if "BS" not in self.roles:
            raise ValidationError("scene needs at least one BS dipole")
        self.f_res = np.array([p.f_res for p in self.props])
        self.chi = np.array([p.chi for p in self.props])
        self.gamma_l = np.array([p.gamma_l for p in self.props])

    def __len__(self):
        return self.positions.shape[0]

    def indices_of(self, role):
        return np.flatnonzero(np.asarray(self.roles) == role)


@dataclass
class ChannelResponse:
    """Complex channel amplitudes indexed (rx, tx, frequency)."""

    values: np.ndarray
    grid: FrequencyGrid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 3 or self.values.shape[2] != self.grid.n_points:
            raise ValidationError(
                f"values must be (rx, tx, {self.grid.n_points}), got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("channel response contains non-finite entries")


def greens_2d(r1, r2, f):
    """2D free-space Green's function (i/4) H0^(1)(k d), k = 2*pi*f."""
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    d = float(np.hypot(r1[0] - r2[0], r1[1] - r2[1]))
    if d == 0.0:
        raise ValidationError(
            "coincident points: the self-term lives in the polarizability, not here"
        )
    k = 2.0 * math.pi * f
    h = hankel0_arrays(np.array([k * d]))[0]
    return 0.25j * h


def inv_polarizability_arrays(f_res, chi, gamma_l, f):
    """Vectorized alpha^-1(f) = (f_res^2 - f^2)/chi - i (k^2/4 + gamma_l)."""
    k = 2.0 * math.pi * f
    return (f_res * f_res - f * f) / chi - 1j * (0.25 * k * k + gamma_l)


def inv_polarizability(p: DipoleProperties, f):
    """Inverse polarizability of one dipole; Im part is always < 0."""
    if not f > 0:
        raise ValidationError(f"frequency must be positive, got {f!r}")
    return complex(inv_polarizability_arrays(p.f_res, p.chi, p.gamma_l, f))


def coupling_from_distances(d, f):
    """Off-diagonal coupling -k^2 G(d) for an array of positive distances."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0.0):
        raise ValidationError("coincident dipoles in coupling block")
    k = 2.0 * math.pi * f
    return (-0.25j * k * k) * hankel0_arrays(k * d.ravel()).reshape(d.shape)


def coupling_block(pos_a, pos_b, f):
    """Off-diagonal coupling -k^2 G between two position sets, shape (na, nb)."""
    diff = pos_a[:, None, :] - pos_b[None, :, :]
    return coupling_from_distances(np.hypot(diff[..., 0], diff[..., 1]), f)


def assemble_interaction(scene: SceneInstance, f):
    """Dense symmetric interaction matrix W at frequency f."""
    if not f > 0:
        raise ValidationError(f"frequency must be positive, got {f!r}")
    pos = scene.positions
    n = len(scene)
    W = np.zeros((n, n), dtype=np.complex128)
    if n > 1:
        iu, ju = np.triu_indices(n, k=1)
        d = np.hypot(pos[iu, 0] - pos[ju, 0], pos[iu, 1] - pos[ju, 1])
        if np.any(d == 0.0):
            raise ValidationError("scene contains coincident dipoles")
        offdiag = coupling_from_distances(d, f)
        W[iu, ju] = offdiag
        W[ju, iu] = offdiag  # shared evaluation keeps W = W^T exact
    W[np.diag_indices(n)] = inv_polarizability_arrays(
        scene.f_res, scene.chi, scene.gamma_l, f
    )
    return W


def factor_interaction(W, f):
    """LU-factor W, rejecting numerically near-singular systems."""
    anorm = np.linalg.norm(W, 1)
    lu, piv = sla.lu_factor(W, check_finite=False)
    rcond, info = lapack.zgecon(lu, anorm)
    if info != 0 or not np.isfinite(rcond) or rcond < 1.0 / COND_LIMIT:
        raise SolverError(f, f"interaction matrix near singular (rcond={rcond:.3e})")
    return lu, piv


def channel(scene: SceneInstance, tx_role, rx_role, grid: FrequencyGrid, workers=None):
    """End-to-end channel between all rx_role and tx_role dipoles.

    Solves W X = E per frequency with one factorization shared across the tx
    basis columns; frequency points are independent and may run in parallel
    (results land in disjoint slots, so the schedule cannot change them).
    """
    tx_idx = scene.indices_of(tx_role)
    rx_idx = scene.indices_of(rx_role)
    if tx_idx.size == 0:
        raise ValidationError(f"scene has no dipole with role {tx_role!r}")
    if rx_idx.size == 0:
        raise ValidationError(f"scene has no dipole with role {rx_role!r}")
    freqs = grid.frequencies()
    n = len(scene)
    rhs = np.zeros((n, tx_idx.size), dtype=np.complex128)
    rhs[tx_idx, np.arange(tx_idx.size)] = 1.0
    out = np.empty((rx_idx.size, tx_idx.size, grid.n_points), dtype=np.complex128)

    def solve_one(fi):
        f = freqs[fi]
        W = assemble_interaction(scene, f)
        lu_piv = factor_interaction(W, f)
        X = sla.lu_solve(lu_piv, rhs, check_finite=False)
        out[:, :, fi] = X[rx_idx, :]

    if workers is not None and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(solve_one, range(grid.n_points)))
    else:
        for fi in range(grid.n_points):
            solve_one(fi)
    return ChannelResponse(values=out, grid=grid)


def taper(name, n_points):
    """Frequency taper: 'rectangular' or 'raised-cosine' (Hann)."""
    if name == "rectangular":
        return np.ones(n_points)
    if name == "raised-cosine":
        idx = np.arange(n_points)
        return 0.5 - 0.5 * np.cos(2.0 * math.pi * idx / (n_points - 1))
    raise ValidationError(f"unknown taper {name!r}")


def impulse_response(h: ChannelResponse, window="rectangular"):
    """Inverse DFT of the (tapered) frequency response, per (rx, tx) pair.

    Output length equals the grid length; with numpy's ifft normalization the
    output energy equals the windowed input energy divided by n_points.
    """
    w = taper(window, h.grid.n_points)
    return np.fft.ifft(h.values * w[None, None, :], axis=2)
