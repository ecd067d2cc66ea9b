"""Spectral core for the vorticity-temperature pair on the 2D torus.

Fields live on a uniform n x n grid covering [-pi, pi)^2 and are stored as
unnormalized numpy fft2 coefficient arrays (complex, shape (n, n), wavenumber
layout of np.fft.fftfreq). The state is the pair U = (w, theta): w is the
scalar vorticity of the velocity field, theta the temperature. All operators
here are exact on the retained Fourier modes; quadratic terms are evaluated
pseudo-spectrally with the 2/3 dealiasing rule so that products of two
band-limited fields are alias-free on the retained band.

Conventions:
  * axis 0 of an array is x1, axis 1 is x2;
  * inner products and norms use the quadrature weight (2 pi)^2 / n^4 in
    coefficient space, which equals the continuum L2 pairing for trig
    polynomials;
  * the state inner product carries the weight zeta* = nu1 nu2 / g^2 on the
    vorticity slot, so the induced norm is the Lyapunov norm used by the
    energy estimates. With default parameters zeta* = 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# parameters and state containers


@dataclass(frozen=True)
class PhysicsParams:
    """Dissipation and buoyancy constants (nu1, nu2 > 0, g != 0)."""

    nu1: float = 1.0
    nu2: float = 1.0
    g: float = 1.0

    def __post_init__(self) -> None:
        if not (self.nu1 > 0.0 and self.nu2 > 0.0):
            raise ValueError("viscosities must be positive")
        if self.g == 0.0:
            raise ValueError("buoyancy constant must be nonzero")

    @property
    def zeta_star(self) -> float:
        return self.nu1 * self.nu2 / self.g**2

    @property
    def nu(self) -> float:
        return min(self.nu1, self.nu2)


@dataclass
class SpectralState:
    """Pair of coefficient arrays (w_hat, theta_hat), both (n, n) complex."""

    w_hat: np.ndarray
    theta_hat: np.ndarray

    def __post_init__(self) -> None:
        self.w_hat = np.asarray(self.w_hat, dtype=np.complex128)
        self.theta_hat = np.asarray(self.theta_hat, dtype=np.complex128)
        if self.w_hat.shape != self.theta_hat.shape:
            raise ValueError("component shapes differ")
        if self.w_hat.ndim != 2 or self.w_hat.shape[0] != self.w_hat.shape[1]:
            raise ValueError("expected square (n, n) coefficient arrays")

    @property
    def n(self) -> int:
        return self.w_hat.shape[0]

    def copy(self) -> "SpectralState":
        return SpectralState(self.w_hat.copy(), self.theta_hat.copy())

    def __add__(self, other: "SpectralState") -> "SpectralState":
        return SpectralState(self.w_hat + other.w_hat, self.theta_hat + other.theta_hat)

    def __sub__(self, other: "SpectralState") -> "SpectralState":
        return SpectralState(self.w_hat - other.w_hat, self.theta_hat - other.theta_hat)

    def __mul__(self, c: float) -> "SpectralState":
        return SpectralState(self.w_hat * c, self.theta_hat * c)

    __rmul__ = __mul__

    def __neg__(self) -> "SpectralState":
        return SpectralState(-self.w_hat, -self.theta_hat)


def state_zeros(n: int) -> SpectralState:
    return SpectralState(np.zeros((n, n), np.complex128), np.zeros((n, n), np.complex128))


# ---------------------------------------------------------------------------
# grid bookkeeping


@lru_cache(maxsize=None)
def wavenumbers(n: int):
    """Integer wavenumbers (k1, k2) broadcastable to (n, n)."""
    k = np.fft.fftfreq(n, 1.0 / n).astype(np.int64)
    return k[:, None], k[None, :]


@lru_cache(maxsize=None)
def ksq(n: int) -> np.ndarray:
    k1, k2 = wavenumbers(n)
    return (k1 * k1 + k2 * k2).astype(np.float64)


@lru_cache(maxsize=None)
def dealias_mask(n: int) -> np.ndarray:
    """Keep |k_i| <= n // 3 on both axes (2/3 rule)."""
    kmax = n // 3
    k1, k2 = wavenumbers(n)
    return (np.abs(k1) <= kmax) & (np.abs(k2) <= kmax)


@lru_cache(maxsize=None)
def _bmask(n: int) -> np.ndarray:
    # output mask for quadratic terms: dealiased and mean-free
    return dealias_mask(n) & (ksq(n) > 0)


@lru_cache(maxsize=None)
def grid_points(n: int):
    x = -np.pi + TWO_PI * np.arange(n) / n
    return x[:, None], x[None, :]


def to_physical(f_hat: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(f_hat, axes=(-2, -1)).real


def from_physical(f: np.ndarray) -> np.ndarray:
    return np.fft.fft2(f, axes=(-2, -1))


def hermitize(f_hat: np.ndarray) -> np.ndarray:
    """Project onto coefficient arrays of real fields (conjugate symmetry)."""
    mirror = np.conj(np.roll(f_hat[..., ::-1, ::-1], (1, 1), axis=(-2, -1)))
    return 0.5 * (f_hat + mirror)


def zero_mean(f_hat: np.ndarray) -> np.ndarray:
    out = f_hat.copy()
    out[..., 0, 0] = 0.0
    return out


# ---------------------------------------------------------------------------
# inner products and norms


def l2_dot(f_hat: np.ndarray, g_hat: np.ndarray) -> float:
    """Continuum L2 pairing of the real fields behind two coefficient arrays."""
    n = f_hat.shape[-1]
    return float(TWO_PI**2 / n**4 * np.sum(f_hat * np.conj(g_hat)).real)


def sobolev_sq(f_hat: np.ndarray, s: float) -> float:
    """Squared homogeneous-plus-mean Sobolev norm: sum |k|^{2s} |f_k|^2 weights.

    s = 0 reduces to the plain L2 norm (the k = 0 factor 0^0 counts as 1).
    Negative s is rejected: the mean mode would divide by zero.
    """
    if s < 0:
        raise ValueError("negative smoothness index not supported")
    n = f_hat.shape[-1]
    weight = ksq(n) ** s if s != 0 else 1.0
    return float(TWO_PI**2 / n**4 * np.sum(weight * np.abs(f_hat) ** 2))


def state_dot(a: SpectralState, b: SpectralState, params: PhysicsParams) -> float:
    """Weighted state inner product zeta* <w, w'> + <theta, theta'>."""
    return params.zeta_star * l2_dot(a.w_hat, b.w_hat) + l2_dot(a.theta_hat, b.theta_hat)


def weighted_norm(state: SpectralState, params: PhysicsParams, s: float = 0.0) -> float:
    """sqrt(zeta* |w|_{s}^2 + |theta|_{s}^2), the Lyapunov norm at smoothness s."""
    val = params.zeta_star * sobolev_sq(state.w_hat, s) + sobolev_sq(state.theta_hat, s)
    return float(np.sqrt(val))


# ---------------------------------------------------------------------------
# linear operators


def apply_A(state: SpectralState, params: PhysicsParams) -> SpectralState:
    """Dissipation pair (-nu1 Lap w, -nu2 Lap theta) as a positive operator."""
    k2 = ksq(state.n)
    return SpectralState(params.nu1 * k2 * state.w_hat, params.nu2 * k2 * state.theta_hat)


def apply_G(state: SpectralState, params: PhysicsParams) -> SpectralState:
    """Buoyancy coupling: (g d(theta)/dx1, 0)."""
    k1, _ = wavenumbers(state.n)
    return SpectralState(params.g * (1j * k1) * state.theta_hat, np.zeros_like(state.theta_hat))


def biot_savart(w_hat: np.ndarray):
    """Velocity coefficients from vorticity: divergence-free, curl recovers w.

    u1 = +i k2 w / |k|^2, u2 = -i k1 w / |k|^2; the k = 0 mode must vanish.
    Raises ValueError on a field with a nonzero mean mode.
    """
    n = w_hat.shape[-1]
    scale = np.max(np.abs(w_hat)) if w_hat.size else 0.0
    if np.max(np.abs(w_hat[..., 0, 0])) > 1e-10 * max(1.0, scale):
        raise ValueError("vorticity must have zero mean")
    k1, k2 = wavenumbers(n)
    inv = np.zeros((n, n))
    kk = ksq(n)
    np.divide(1.0, kk, out=inv, where=kk > 0)
    u1_hat = 1j * k2 * w_hat * inv
    u2_hat = -1j * k1 * w_hat * inv
    return u1_hat, u2_hat


# ---------------------------------------------------------------------------
# quadratic term


def _velocity_physical(w_hat: np.ndarray):
    m = dealias_mask(w_hat.shape[-1])
    u1_hat, u2_hat = biot_savart(np.where(m, w_hat, 0.0))
    return to_physical(u1_hat), to_physical(u2_hat)


def _advect(u1, u2, f_hat: np.ndarray) -> np.ndarray:
    """Coefficients of u . grad f, dealiased and mean-free."""
    n = f_hat.shape[-1]
    m = dealias_mask(n)
    k1, k2 = wavenumbers(n)
    fm = np.where(m, f_hat, 0.0)
    fx = to_physical(1j * k1 * fm)
    fy = to_physical(1j * k2 * fm)
    out = from_physical(u1 * fx + u2 * fy)
    return hermitize(np.where(_bmask(n), out, 0.0))


def nonlinear_B(u: SpectralState, v: SpectralState | None = None) -> SpectralState:
    """Advection pair B(u, v) = (K(w_u) . grad w_v, K(w_u) . grad theta_v).

    The advecting velocity comes from the first argument's vorticity through
    the Biot-Savart kernel K; one argument means B(u, u). Both components of
    the second argument are transported by the same velocity.
    """
    if v is None:
        v = u
    if u.n != v.n:
        raise ValueError("resolution mismatch")
    u1, u2 = _velocity_physical(u.w_hat)
    return SpectralState(_advect(u1, u2, v.w_hat), _advect(u1, u2, v.theta_hat))


def drift_F(state: SpectralState, params: PhysicsParams) -> SpectralState:
    """Full drift -A U - B(U, U) + G U."""
    return apply_G(state, params) - apply_A(state, params) - nonlinear_B(state)


# ---------------------------------------------------------------------------
# spectral projections


def _pn_mask(n: int, level: float) -> np.ndarray:
    # Euclidean ball, boundary included, mean mode excluded
    kk = ksq(n)
    return (kk > 0) & (kk <= level**2 + 1e-9)


def project_PN(state: SpectralState, level: float) -> SpectralState:
    """Restrict to modes 0 < |k| <= level (Euclidean norm, inclusive)."""
    m = _pn_mask(state.n, level)
    return SpectralState(np.where(m, state.w_hat, 0.0), np.where(m, state.theta_hat, 0.0))


def project_QN(state: SpectralState, level: float) -> SpectralState:
    """Complement projection: identity minus the ball restriction."""
    m = _pn_mask(state.n, level)
    return SpectralState(np.where(m, 0.0, state.w_hat), np.where(m, 0.0, state.theta_hat))


# ---------------------------------------------------------------------------
# trigonometric basis states

# Mode conventions: the canonical half-lattice contains k with k1 > 0, or
# k1 = 0 and k2 > 0. Parity m = 0 is cosine, m = 1 is sine. Temperature-slot
# elements are sigma_k^m, vorticity-slot elements are psi_k^m; each has
# squared L2 norm 2 pi^2 (unnormalized trig).


def is_canonical(k: tuple[int, int]) -> bool:
    return k[0] > 0 or (k[0] == 0 and k[1] > 0)


def canonicalize(k: tuple[int, int], m: int):
    """Map (mode, parity) to its canonical representative and coefficient sign.

    cos is even and sin is odd under k -> -k, so negating a mode keeps the
    cosine element and flips the sine element.
    """
    if k == (0, 0):
        raise ValueError("zero mode has no basis element")
    if is_canonical(k):
        return k, m, 1
    return (-k[0], -k[1]), m, (1 if m == 0 else -1)


@lru_cache(maxsize=None)
def trig_hat(n: int, k1: int, k2: int, m: int) -> np.ndarray:
    """Coefficients of cos(k.x) (m = 0) or sin(k.x) (m = 1) on the n-grid.

    Built analytically so the array is exactly zero off the two mode slots:
    the grid starts at -pi, which contributes the phase (-1)^(k1 + k2).
    """
    kmax = n // 2 - 1
    if abs(k1) > kmax or abs(k2) > kmax:
        raise ValueError("mode outside resolvable band")
    out = np.zeros((n, n), dtype=np.complex128)
    amp = 0.5 * n * n * (-1.0 if (k1 + k2) % 2 else 1.0)
    coef = amp if m == 0 else -1j * amp
    out[k1 % n, k2 % n] += coef
    out[(-k1) % n, (-k2) % n] += np.conj(coef)
    out.setflags(write=False)
    return out

def sigma_state(n: int, k: tuple[int, int], m: int) -> SpectralState:
    """Temperature-slot basis element (0, trig)."""
    return SpectralState(np.zeros((n, n), np.complex128), trig_hat(n, k[0], k[1], m).copy())


def psi_state(n: int, k: tuple[int, int], m: int) -> SpectralState:
    """Vorticity-slot basis element (trig, 0)."""
    return SpectralState(trig_hat(n, k[0], k[1], m).copy(), np.zeros((n, n), np.complex128))


def mode_coeff(f_hat: np.ndarray, k: tuple[int, int], m: int) -> float:
    """Coefficient of the (k, m) trig element in a real field (L2 projection)."""
    basis = trig_hat(f_hat.shape[-1], k[0], k[1], m)
    return l2_dot(f_hat, basis) / (2.0 * np.pi**2)


def modes_in_ball(level: float) -> list[tuple[int, int]]:
    """Canonical modes with 0 < |k| <= level, in a fixed deterministic order."""
    lim = int(np.floor(level + 1e-9))
    out = []
    for k1 in range(0, lim + 1):
        for k2 in range(-lim, lim + 1):
            k = (k1, k2)
            if k == (0, 0) or not is_canonical(k):
                continue
            if k1 * k1 + k2 * k2 <= level**2 + 1e-9:
                out.append(k)
    out.sort(key=lambda k: (k[0] * k[0] + k[1] * k[1], k))
    return out


def random_state(n: int, rng: np.random.Generator, amplitude: float = 1.0,
                 decay: float = 2.0, kmax: int | None = None) -> SpectralState:
    """Random smooth mean-free state with spectrum damped like |k|^-decay."""
    if kmax is None:
        kmax = n // 3
    k1, k2 = wavenumbers(n)
    band = (ksq(n) > 0) & (np.abs(k1) <= kmax) & (np.abs(k2) <= kmax)
    kk = np.where(band, ksq(n), 1.0)
    damp = np.where(band, kk ** (-decay / 2.0), 0.0)
    damp *= amplitude * n**2 / np.sqrt(max(1, int(band.sum())))

    def component() -> np.ndarray:
        z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        return hermitize(z * damp)

    return SpectralState(component(), component())
