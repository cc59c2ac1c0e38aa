"""Dynamic movement primitives: fitting from a demonstration and RK4 rollout.

The transformation system is ``tau z' = a_z (b_z (g - y) - z) + f(x)`` with
``tau y' = z``, driven by the canonical system ``tau x' = -a_x x``. The
forcing term is a normalized mixture of Gaussian bases in ``x``, multiplied
by ``x`` and by the ratio of the current to the demonstrated goal amplitude.
Dimensions whose demonstration starts and ends at the same value keep their
forcing unscaled, so a return-to-start bump is reproduced rather than lost.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ALPHA_Z = 25.0
ALPHA_X = 1.0
N_BASIS = 20
_FLAT = 1e-9


class FitError(ValueError):
    pass


class IntegrationError(RuntimeError):
    pass


@dataclass
class DmpPrimitive:
    name: str
    tau: float
    centers: np.ndarray  # [N]
    widths: np.ndarray  # [N]
    weights: np.ndarray  # [D, N]
    y0: np.ndarray  # demonstrated start [D]
    g: np.ndarray  # demonstrated goal [D]
    alpha_z: float = ALPHA_Z
    beta_z: float = ALPHA_Z / 4
    alpha_x: float = ALPHA_X

    def __post_init__(self) -> None:
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.widths = np.asarray(self.widths, dtype=np.float64)
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.y0 = np.atleast_1d(np.asarray(self.y0, dtype=np.float64))
        self.g = np.atleast_1d(np.asarray(self.g, dtype=np.float64))
        self.validate()

    @property
    def dims(self) -> int:
        return self.weights.shape[0]

    def validate(self) -> None:
        if not (self.alpha_z > 0 and self.beta_z > 0 and self.tau > 0 and self.alpha_x > 0):
            raise FitError(f"{self.name}: gains and tau must be positive")
        if not np.all(np.isfinite(self.weights)):
            raise FitError(f"{self.name}: non-finite weights")
        if self.weights.shape[1] != self.centers.size or self.centers.size != self.widths.size:
            raise FitError(f"{self.name}: basis shapes disagree")
        if self.y0.shape != (self.dims,) or self.g.shape != (self.dims,):
            raise FitError(f"{self.name}: start/goal must have {self.dims} entries")

    def basis(self, x) -> np.ndarray:
        """Normalized basis activations, ``[..., N]``."""
        x = np.asarray(x, dtype=np.float64)[..., None]
        psi = np.exp(-self.widths * (x - self.centers) ** 2)
        return psi / (psi.sum(axis=-1, keepdims=True) + 1e-300)

    def amplitude_scale(self, y0, g) -> np.ndarray:
        demo = self.g - self.y0
        flat = np.abs(demo) < _FLAT
        return np.where(flat, 1.0, (np.asarray(g) - np.asarray(y0)) / np.where(flat, 1.0, demo))

    def forcing(self, x: float, scale: np.ndarray) -> np.ndarray:
        return (self.weights @ self.basis(x)) * x * scale

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "tau": self.tau,
            "alpha_z": self.alpha_z,
            "beta_z": self.beta_z,
            "alpha_x": self.alpha_x,
            "centers": self.centers.tolist(),
            "widths": self.widths.tolist(),
            "weights": self.weights.tolist(),
            "y0": self.y0.tolist(),
            "g": self.g.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "DmpPrimitive":
        return cls(
            name=d["name"], tau=float(d["tau"]), centers=d["centers"], widths=d["widths"],
            weights=d["weights"], y0=d["y0"], g=d["g"], alpha_z=float(d["alpha_z"]),
            beta_z=float(d["beta_z"]), alpha_x=float(d.get("alpha_x", ALPHA_X)),
        )


def basis_layout(n_basis: int, alpha_x: float = ALPHA_X) -> tuple[np.ndarray, np.ndarray]:
    """Centers spaced evenly in time over the demo, widths from neighbour spacing."""
    centers = np.exp(-alpha_x * np.linspace(0.0, 1.0, n_basis))
    gaps = np.abs(np.diff(centers))
    gaps = np.append(gaps, gaps[-1]) if n_basis > 1 else np.array([1.0])
    return centers, 1.0 / gaps**2


def fit_dmp(
    t,
    y,
    yd=None,
    ydd=None,
    alpha_z: float = ALPHA_Z,
    beta_z: float | None = None,
    alpha_x: float = ALPHA_X,
    n_basis: int = N_BASIS,
    name: str = "",
) -> DmpPrimitive:
    """Fit forcing weights to a demonstration by locally weighted regression.

    ``y`` is ``[n]`` or ``[n, D]``; missing derivatives are estimated by
    finite differences. ``tau`` is the demonstration's duration.
    """
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if t.ndim != 1 or len(t) != len(y):
        raise FitError("timestamps and samples must have equal length")
    if len(t) < 3:
        raise FitError("a demonstration needs at least 3 samples")
    if np.any(np.diff(t) <= 0):
        raise FitError("timestamps must be strictly increasing")
    tau = float(t[-1] - t[0])
    if tau <= 0:
        raise FitError("demonstration has zero duration")
    beta_z = alpha_z / 4 if beta_z is None else beta_z
    yd = np.gradient(y, t, axis=0) if yd is None else np.asarray(yd, dtype=np.float64).reshape(y.shape)
    ydd = np.gradient(yd, t, axis=0) if ydd is None else np.asarray(ydd, dtype=np.float64).reshape(y.shape)
    y0, g = y[0], y[-1]
    x = np.exp(-alpha_x * (t - t[0]) / tau)
    target = tau**2 * ydd - alpha_z * (beta_z * (g - y) - tau * yd)  # [n, D]
    centers, widths = basis_layout(n_basis, alpha_x)
    psi = np.exp(-widths * (x[:, None] - centers) ** 2)  # [n, N]
    # each weight fits target ~ w_i x under its own kernel psi_i
    num = (psi * x[:, None]).T @ target  # [N, D]
    den = (psi * (x**2)[:, None]).sum(axis=0)  # [N]
    weights = (num / (den[:, None] + 1e-12)).T
    return DmpPrimitive(name, tau, centers, widths, weights, y0, g, alpha_z, beta_z, alpha_x)


@dataclass
class Trajectory:
    t: np.ndarray  # [n]
    y: np.ndarray  # [n, D]
    yd: np.ndarray  # [n, D]
    name: str = ""

    def to_csv(self, path, labels: list[str] | None = None) -> Path:
        return write_trajectory_csv(path, [self], labels)


def rollout(
    dmp: DmpPrimitive,
    y0=None,
    g=None,
    dt: float = 0.01,
    T: float | None = None,
    tau: float | None = None,
    callback=None,
) -> Trajectory:
    """Integrate the primitive with classic RK4 from ``y0`` towards ``g``.

    ``callback(t, y)`` is invoked after every integration step.
    """
    tau = dmp.tau if tau is None else float(tau)
    T = tau if T is None else float(T)
    if dt <= 0:
        raise IntegrationError("dt must be positive")
    if T < tau - 1e-12:
        raise IntegrationError(f"rollout horizon {T} shorter than tau {tau}")
    y0 = dmp.y0 if y0 is None else np.atleast_1d(np.asarray(y0, dtype=np.float64))
    g = dmp.g if g is None else np.atleast_1d(np.asarray(g, dtype=np.float64))
    if y0.shape != (dmp.dims,) or g.shape != (dmp.dims,):
        raise IntegrationError(f"start and goal must have {dmp.dims} entries")
    scale = dmp.amplitude_scale(y0, g)
    az, bz, ax = dmp.alpha_z, dmp.beta_z, dmp.alpha_x
    D = dmp.dims

    def deriv(s: np.ndarray) -> np.ndarray:
        x, y, z = s[0], s[1 : 1 + D], s[1 + D :]
        dz = (az * (bz * (g - y) - z) + dmp.forcing(x, scale)) / tau
        return np.concatenate([[-ax * x / tau], z / tau, dz])

    n = int(round(T / dt))
    state = np.concatenate([[1.0], y0, np.zeros(D)])
    ts = np.arange(n + 1) * dt
    ys = np.empty((n + 1, D))
    zs = np.empty((n + 1, D))
    ys[0], zs[0] = y0, 0.0
    bound = 1e3 * (1.0 + np.abs(g - y0).max() + np.abs(y0).max())
    for i in range(n):
        k1 = deriv(state)
        k2 = deriv(state + 0.5 * dt * k1)
        k3 = deriv(state + 0.5 * dt * k2)
        k4 = deriv(state + dt * k3)
        state = state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(state)) or np.abs(state[1 : 1 + D]).max() > bound:
            raise IntegrationError(f"{dmp.name or 'dmp'}: integration diverged at t={ts[i + 1]:.3f}")
        ys[i + 1] = state[1 : 1 + D]
        zs[i + 1] = state[1 + D :]
        if callback is not None:
            callback(ts[i + 1], ys[i + 1])
    return Trajectory(ts, ys, zs / tau, dmp.name)


def write_trajectory_csv(path, trajectories: list[Trajectory], labels: list[str] | None = None) -> Path:
    """One row per sample: ``primitive, t, y...`` with a running time across segments."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    D = trajectories[0].y.shape[1] if trajectories else 0
    labels = labels or [f"y{i}" for i in range(D)]
    offset = 0.0
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["primitive", "t", *labels])
        for tr in trajectories:
            for t, y in zip(tr.t, tr.y):
                w.writerow([tr.name, f"{offset + t:.6f}", *(f"{v:.9g}" for v in y)])
            offset += tr.t[-1] if len(tr.t) else 0.0
    return path
