"""Synthetic measurement generation for the desk-scale experiment protocols.

EEG data come from point dipoles snapped to the nearest source DOF; EIT
data from a ball-shaped conductivity anomaly inside a concentric-sphere
head.  All randomness flows through one seeded generator per dataset, so a
seed pins the dataset bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyAnomalyError, LocationError, ParameterError
from .fem import assemble_A
from .geometry import Compartment, Segmentation, icosphere
from .leadfield import eit_forward
from .solver import PcgConfig


@dataclass(frozen=True)
class NoiseSpec:
    """Additive zero-mean Gaussian noise with independent entries.

    ``relative-max`` mode: standard deviation = level * max |signal|.
    ``snr-db`` mode: standard deviation = rms(signal) * 10^(-level/20).
    """

    mode: str = "relative-max"
    level: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("relative-max", "snr-db"):
            raise ParameterError(f"unknown noise mode '{self.mode}'")
        if self.level <= 0:
            raise ParameterError("noise level must be positive")

    def std_for(self, signal):
        signal = np.asarray(signal, dtype=float)
        if self.mode == "relative-max":
            return self.level * np.abs(signal).max()
        rms = np.sqrt(np.mean(signal**2))
        return rms * 10.0 ** (-self.level / 20.0)

    def sample(self, signal):
        rng = np.random.default_rng(self.seed)
        return rng.normal(0.0, self.std_for(signal), size=np.shape(signal))


@dataclass(frozen=True)
class Phantom:
    """Concentric-sphere head with a ball-shaped conductivity anomaly.

    ``radii``/``conductivities`` run innermost to outermost.  The anomaly
    ball must sit strictly inside one spherical shell.
    """

    radii: tuple
    conductivities: tuple
    anomaly_center: np.ndarray
    anomaly_diameter: float
    anomaly_delta: float

    def __post_init__(self):
        radii = tuple(float(r) for r in self.radii)
        if list(radii) != sorted(radii):
            raise ParameterError("radii must increase from the innermost shell")
        if len(radii) != len(self.conductivities):
            raise ParameterError("one conductivity per shell required")
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "conductivities",
                           tuple(float(c) for c in self.conductivities))
        object.__setattr__(self, "anomaly_center",
                           np.asarray(self.anomaly_center, dtype=float))
        if self.anomaly_diameter <= 0:
            raise ParameterError("anomaly diameter must be positive")
        c = np.linalg.norm(self.anomaly_center)
        r = 0.5 * self.anomaly_diameter
        host = None
        inner = 0.0
        for k, outer in enumerate(radii):
            if c - r > inner - 1e-12 and c + r < outer:
                host = k
                break
            inner = outer
        if host is None:
            raise ParameterError(
                "anomaly ball must lie strictly inside one spherical shell")
        object.__setattr__(self, "host_shell", host)

    @property
    def anomaly_radius(self):
        return 0.5 * self.anomaly_diameter

    def segmentation(self, subdivisions=3, active_shells=(0,), priorities=None):
        """Concentric icosphere segmentation matching the phantom shells."""
        comps = []
        for k, (r, s) in enumerate(zip(self.radii, self.conductivities)):
            comps.append(Compartment(
                icosphere(r, subdivisions, name=f"shell{k}"),
                conductivity=s,
                priority=priorities[k] if priorities is not None else 0,
                active=k in active_shells,
                name=f"shell{k}"))
        return Segmentation(comps)

    def perturb_sigma(self, mesh):
        """Mesh conductivity with the anomaly offset added on the elements
        whose centroids fall inside the ball."""
        return perturb_sigma_ball(mesh, self.anomaly_center,
                                  self.anomaly_diameter, self.anomaly_delta)


def perturb_sigma_ball(mesh, center, diameter, delta):
    """Add ``delta`` to the conductivity of every element whose centroid
    lies in the given ball; returns (sigma, element indices)."""
    center = np.asarray(center, dtype=float)
    inside = np.linalg.norm(mesh.centroids() - center[None, :],
                            axis=1) <= 0.5 * diameter
    if not inside.any():
        raise EmptyAnomalyError(
            "anomaly ball does not contain any element centroid")
    sigma = mesh.sigma.copy()
    if sigma.ndim == 2:
        sigma[inside, :3] += delta
    else:
        sigma[inside] += delta
    return sigma, np.flatnonzero(inside)


def dipole_signal(leadfield, dipoles):
    """Noise-free electrode signal of point dipoles snapped to the nearest
    source DOF.

    Each dipole is (position [m], orientation unit vector, moment [A m]).
    Unconstrained lead fields receive the moment vector on the xyz columns
    of the snapped source; constrained lead fields the moment projected on
    the stored source normal.

    Returns (y, x_true).
    """
    positions = np.asarray(leadfield.positions, dtype=float)
    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    margin = 0.1 * np.linalg.norm(hi - lo)
    x = np.zeros(leadfield.matrix.shape[1])
    constrained = leadfield.orientations is not None
    for pos, ori, moment in dipoles:
        pos = np.asarray(pos, dtype=float)
        if np.any(pos < lo - margin) or np.any(pos > hi + margin):
            raise LocationError(
                f"dipole at {pos} outside the source-space bounding region")
        ori = np.asarray(ori, dtype=float)
        ori = ori / np.linalg.norm(ori)
        s = int(np.argmin(np.linalg.norm(positions - pos[None, :], axis=1)))
        if constrained:
            x[s] += moment * float(ori @ leadfield.orientations[s])
        else:
            x[3 * s:3 * s + 3] += moment * ori
    return leadfield.matrix @ x, x


def simulate_eeg(leadfield, dipoles, noise):
    """Noisy EEG data y = L x_true + n for snapped dipoles.

    Returns (y, x_true).
    """
    y0, x_true = dipole_signal(leadfield, dipoles)
    return y0 + noise.sample(y0), x_true


def simulate_eit(sys, phantom, patterns, noise, cfg=PcgConfig(), tm=None,
                 threads=1):
    """Noisy EIT data for a perturbed conductivity, plus background data.

    The forward map is re-assembled at the perturbed conductivity; noise is
    calibrated on the perturbed (measured) signal.  Data vectors stack the
    electrode voltages pattern by pattern.

    Returns (y_noisy, y_background).
    """
    y_bg = eit_forward(sys, patterns, cfg, tm=tm, threads=threads)
    sigma_p, _ = phantom.perturb_sigma(sys.mesh)
    mesh_p = sys.mesh.with_sigma(sigma_p)
    sys_p = type(sys)(mesh=mesh_p, electrodes=sys.electrodes,
                      A=assemble_A(mesh_p, sys.electrodes),
                      B=sys.B, C=sys.C, R=sys.R, ground=sys.ground)
    y = eit_forward(sys_p, patterns, cfg, threads=threads)
    y = np.asarray(y).T.ravel()
    y_bg = np.asarray(y_bg).T.ravel()
    return y + noise.sample(y), y_bg


def fibonacci_sphere_points(n, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Quasi-uniform electrode sites on a sphere (golden-angle spiral)."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0**0.5) * i
    pts = np.column_stack([np.sin(phi) * np.cos(theta),
                           np.sin(phi) * np.sin(theta),
                           np.cos(phi)])
    return radius * pts + np.asarray(center, dtype=float)
