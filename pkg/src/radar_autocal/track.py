"""Bird's-eye-view tracking: CTRA motion model, UKF and unscented RTS smoother.

State vector layout is ``[x, y, heading, speed, accel, turn_rate]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cluster import ObjectTrack
from .core import PipelineError, wrap_angle

X, Y, TH, V, A, W = range(6)
DIM = 6
OMEGA_EPS = 1e-6
_SERIES_PHI = 0.1


class TrackingError(PipelineError):
    code = "tracking"


@dataclass(frozen=True)
class CtraState:
    x: float
    y: float
    theta: float
    v: float
    a: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v, self.a, self.omega])

    @classmethod
    def from_array(cls, s) -> "CtraState":
        return cls(*(float(v) for v in s))


@dataclass(frozen=True)
class NoiseSpec:
    sigma_jerk: float = 2.0
    sigma_turn_acc: float = 0.5
    sigma_meas: float = 0.5


@dataclass(frozen=True)
class UkfParams:
    """Sigma-point scaling.

    With ``central_mean`` the predicted mean is the propagated center sigma
    point; the weighted sigma mean shortens straight paths by roughly
    ``v*dt*var(heading)/2`` per step, which biases tracks that follow the
    model exactly. Covariances always use the full unscented transform.
    """

    alpha: float = 1e-3 * math.sqrt(3.0)
    beta: float = 2.0
    kappa: float = 0.0
    central_mean: bool = True


@dataclass
class SmoothedTrack:
    id: int
    t: np.ndarray
    x: np.ndarray  # (N, 6) smoothed means
    P: np.ndarray  # (N, 6, 6)
    x_filt: np.ndarray = field(repr=False, default=None)
    P_filt: np.ndarray = field(repr=False, default=None)
    source: ObjectTrack | None = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def states(self) -> list[tuple[int, CtraState, np.ndarray]]:
        return [(int(t), CtraState.from_array(x), P) for t, x, P in zip(self.t, self.x, self.P)]

    @property
    def xy(self) -> np.ndarray:
        return self.x[:, :2]


def _phase_integrals(phi: float) -> tuple[complex, complex]:
    """(int_0^1 e^{i phi u} du, int_0^1 u e^{i phi u} du), stable for small phi."""
    if abs(phi) < _SERIES_PHI:
        e1 = e2 = 0j
        term = 1 + 0j
        for k in range(12):
            e1 += term / (k + 1)
            e2 += term / (k + 2)
            term *= 1j * phi / (k + 1)
        return e1, e2
    z = 1j * phi
    ez = complex(math.cos(phi), math.sin(phi))
    e1 = (ez - 1) / z
    e2 = ez / z - (ez - 1) / (z * z)
    return e1, e2


def ctra_step(s: np.ndarray, dt: float) -> np.ndarray:
    x, y, th, v, a, w = s
    if abs(w) < OMEGA_EPS:
        ds = v * dt + 0.5 * a * dt * dt
        dx, dy = ds * math.cos(th), ds * math.sin(th)
    else:
        e1, e2 = _phase_integrals(w * dt)
        d = complex(math.cos(th), math.sin(th)) * (v * dt * e1 + a * dt * dt * e2)
        dx, dy = d.real, d.imag
    return np.array([x + dx, y + dy, wrap_angle(th + w * dt), v + a * dt, a, w])


def ctra_predict(s: CtraState, dt: float) -> CtraState:
    """Propagate under constant turn rate and constant acceleration."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    return CtraState.from_array(ctra_step(s.as_array(), dt))


def process_noise(s: np.ndarray, dt: float, noise: NoiseSpec) -> np.ndarray:
    """Discrete white-jerk / white-turn-acceleration covariance."""
    qj = noise.sigma_jerk**2
    qw = noise.sigma_turn_acc**2
    c, sn = math.cos(s[TH]), math.sin(s[TH])
    Qs = qj * np.array(
        [
            [dt**5 / 20, dt**4 / 8, dt**3 / 6],
            [dt**4 / 8, dt**3 / 3, dt**2 / 2],
            [dt**3 / 6, dt**2 / 2, dt],
        ]
    )
    # along-track displacement projected onto x/y
    G = np.zeros((DIM, 3))
    G[X, 0], G[Y, 0] = c, sn
    G[V, 1] = 1.0
    G[A, 2] = 1.0
    Q = G @ Qs @ G.T
    Q[np.ix_([TH, W], [TH, W])] += qw * np.array([[dt**3 / 3, dt**2 / 2], [dt**2 / 2, dt]])
    return Q


class _Unscented:
    def __init__(self, params: UkfParams, n: int = DIM):
        self.n = n
        self.central = params.central_mean
        lam = params.alpha**2 * (n + params.kappa) - n
        self.c = n + lam
        self.Wm = np.full(2 * n + 1, 1.0 / (2 * self.c))
        self.Wc = self.Wm.copy()
        self.Wm[0] = lam / self.c
        self.Wc[0] = lam / self.c + (1 - params.alpha**2 + params.beta)

    def sigma_points(self, m: np.ndarray, P: np.ndarray) -> np.ndarray:
        try:
            L = np.linalg.cholesky(self.c * P)
        except np.linalg.LinAlgError:
            w, V_ = np.linalg.eigh(0.5 * (P + P.T))
            L = V_ @ np.diag(np.sqrt(np.clip(w, 0.0, None) * self.c))
        chi = np.empty((2 * self.n + 1, self.n))
        chi[0] = m
        chi[1 : self.n + 1] = m + L.T
        chi[self.n + 1 :] = m - L.T
        chi[:, TH] = wrap_angle(chi[:, TH])
        return chi

    def mean(self, chi: np.ndarray) -> np.ndarray:
        if self.central:
            return chi[0].copy()
        m = self.Wm @ chi
        m[TH] = math.atan2(self.Wm @ np.sin(chi[:, TH]), self.Wm @ np.cos(chi[:, TH]))
        return m


def _residual(chi: np.ndarray, m: np.ndarray) -> np.ndarray:
    d = chi - m
    d[..., TH] = wrap_angle(d[..., TH])
    return d


def _check_psd(P: np.ndarray, t: int, what: str) -> np.ndarray:
    P = 0.5 * (P + P.T)
    if np.linalg.eigvalsh(P).min() < -1e-9:
        raise TrackingError(f"{what} covariance lost positive semi-definiteness at t={t}")
    return P


def initial_state(z: np.ndarray, t: np.ndarray) -> np.ndarray:
    d = z[1] - z[0]
    dt = (t[1] - t[0]) / 1e6
    v = float(np.linalg.norm(d)) / dt
    th = math.atan2(d[1], d[0]) if v > 0 else 0.0
    return np.array([z[0, 0], z[0, 1], th, v, 0.0, 0.0])


INITIAL_COV = np.diag([1.0, 1.0, math.radians(30) ** 2, 5.0**2, 2.0**2, math.radians(20) ** 2])


def ukf_rts(
    z: np.ndarray,
    t: np.ndarray,
    noise: NoiseSpec = NoiseSpec(),
    params: UkfParams = UkfParams(),
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Forward UKF and backward unscented RTS pass over 2D position fixes.

    Returns (filtered means, filtered covariances, smoothed means, smoothed
    covariances), one entry per measurement.
    """
    z = np.asarray(z, dtype=float).reshape(-1, 2)
    t = np.asarray(t, dtype=np.int64)
    n = len(z)
    ut = _Unscented(params)
    Rm = noise.sigma_meas**2 * np.eye(2)
    xf = np.empty((n, DIM))
    Pf = np.empty((n, DIM, DIM))

    m, P = initial_state(z, t), INITIAL_COV.copy()
    for k in range(n):
        if k > 0:
            dt = (t[k] - t[k - 1]) / 1e6
            chi = np.array([ctra_step(c, dt) for c in ut.sigma_points(m, P)])
            m = ut.mean(chi)
            d = _residual(chi, m)
            P = _check_psd(d.T @ (ut.Wc[:, None] * d) + process_noise(m, dt, noise), int(t[k]), "predicted")
        chi = ut.sigma_points(m, P)
        zeta = chi[:, :2]
        zm = ut.Wm @ zeta
        dz = zeta - zm
        dx = _residual(chi, m)
        S = dz.T @ (ut.Wc[:, None] * dz) + Rm
        C = dx.T @ (ut.Wc[:, None] * dz)
        K = np.linalg.solve(S.T, C.T).T
        m = m + K @ (z[k] - zm)
        m[TH] = wrap_angle(m[TH])
        P = _check_psd(P - K @ S @ K.T, int(t[k]), "filtered")
        xf[k], Pf[k] = m, P

    xs, Ps = xf.copy(), Pf.copy()
    for k in range(n - 2, -1, -1):
        dt = (t[k + 1] - t[k]) / 1e6
        chi = ut.sigma_points(xf[k], Pf[k])
        fchi = np.array([ctra_step(c, dt) for c in chi])
        mp = ut.mean(fchi)
        dfx = _residual(fchi, mp)
        dx = _residual(chi, xf[k])
        Pp = dfx.T @ (ut.Wc[:, None] * dfx) + process_noise(mp, dt, noise)
        D = dx.T @ (ut.Wc[:, None] * dfx)
        G = np.linalg.solve(Pp.T, D.T).T
        innov = xs[k + 1] - mp
        innov[TH] = wrap_angle(innov[TH])
        xs[k] = xf[k] + G @ innov
        xs[k, TH] = wrap_angle(xs[k, TH])
        Ps[k] = _check_psd(Pf[k] + G @ (Ps[k + 1] - Pp) @ G.T, int(t[k]), "smoothed")
    return xf, Pf, xs, Ps


def smooth_track(
    track: ObjectTrack,
    level: np.ndarray | None = None,
    noise: NoiseSpec = NoiseSpec(),
    min_length: int = 5,
    params: UkfParams = UkfParams(),
) -> SmoothedTrack:
    """Level the track's cluster centers, drop z and smooth them in 2D."""
    if len(track) < min_length:
        raise TrackingError(f"track {track.id} has {len(track)} observations, need >= {min_length}")
    R = np.eye(3) if level is None else np.asarray(level)
    pts = np.array([R @ o.current_centroid for o in track.observations])
    t = track.times
    xf, Pf, xs, Ps = ukf_rts(pts[:, :2], t, noise, params)
    return SmoothedTrack(track.id, t, xs, Ps, xf, Pf, track)
