"""3D reference frames, rotations and misalignment patches.

All functions here are pure over value types and freely parallel.  The
rotation convention is the MAD family one: ``theta`` rotates about the
global y axis (azimuth), ``phi`` about -x (elevation), ``psi`` about the
local s axis (roll), composed as ``W = Ry(theta) Rx(-phi) Rz(psi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Frame", "Misalignment", "rot_x", "rot_y", "rot_s",
           "rot_from_angles", "angles_from_rot", "patch_restore",
           "survey_advance"]


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_s(a: float) -> np.ndarray:
    """Rotation about the beam (z) axis."""
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_from_angles(dtheta: float, dphi: float, dpsi: float) -> np.ndarray:
    """Orientation matrix Ry(dtheta) . Rx(-dphi) . Rz(dpsi)."""
    return rot_y(dtheta) @ rot_x(-dphi) @ rot_s(dpsi)


def angles_from_rot(W: np.ndarray) -> tuple[float, float, float]:
    """Recover (theta, phi, psi) with W = Ry(theta) Rx(-phi) Rz(psi).

    Valid for |phi| < pi/2 (survey frames never pitch past vertical).
    """
    # third column of W is Ry(theta) Rx(-phi) e_z = (cos(phi) sin(theta),
    # sin(phi)... derive: Rx(-phi) e_z = (0, sin(phi), cos(phi)) then Ry:
    # (cos(phi) sin(theta), sin(phi), cos(phi) cos(theta))
    phi = math.asin(max(-1.0, min(1.0, W[1, 2])))
    theta = math.atan2(W[0, 2], W[2, 2])
    # roll from the x column transformed back
    Wp = rot_x(phi) @ rot_y(-theta) @ W
    psi = math.atan2(Wp[1, 0], Wp[0, 0])
    return theta, phi, psi


def _check_orthonormal(M: np.ndarray, what: str, tol: float = 1e-9) -> None:
    err = np.abs(M.T @ M - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"{what} is not orthonormal (max deviation {err:.3e})")


@dataclass
class Frame:
    """Global position V and orientation W (columns = local axes)."""

    V: np.ndarray = field(default_factory=lambda: np.zeros(3))
    W: np.ndarray = field(default_factory=lambda: np.eye(3))

    def copy(self) -> "Frame":
        return Frame(self.V.copy(), self.W.copy())

    def renormalize(self) -> None:
        """Gram-Schmidt the orientation to bound drift over long chains."""
        q, _ = np.linalg.qr(self.W)
        # keep axis signs (qr may flip columns)
        for i in range(3):
            if q[:, i] @ self.W[:, i] < 0:
                q[:, i] = -q[:, i]
        self.W = q


@dataclass
class Misalignment:
    """Translations (m) and rotations (rad) of an element body.

    dtheta rotates about y, dphi about -x, dpsi about s; zero everywhere is
    the identity transform.
    """

    dx: float = 0.0
    dy: float = 0.0
    ds: float = 0.0
    dtheta: float = 0.0
    dphi: float = 0.0
    dpsi: float = 0.0

    def __bool__(self) -> bool:
        return any((self.dx, self.dy, self.ds, self.dtheta, self.dphi, self.dpsi))

    @property
    def T(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.ds])

    @property
    def R(self) -> np.ndarray:
        return rot_from_angles(self.dtheta, self.dphi, self.dpsi)


def patch_restore(W: np.ndarray, R: np.ndarray, V: np.ndarray,
                  T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exit patch restoring the reference frame after a misaligned body.

    Given the body's design frame advance (V, W) and the misalignment
    (T, R) applied at its entry, the restoring transform is

        Tbar = W^t (R V + T - V),   Rbar = W^t R W.
    """
    W = np.asarray(W, dtype=float)
    R = np.asarray(R, dtype=float)
    _check_orthonormal(W, "W")
    _check_orthonormal(R, "R")
    V = np.asarray(V, dtype=float)
    T = np.asarray(T, dtype=float)
    Tbar = W.T @ (R @ V + T - V)
    Rbar = W.T @ R @ W
    return Tbar, Rbar


def body_frame(l: float, angle: float = 0.0, tilt: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Design frame advance (V, W) of an element body in its entry frame.

    Straight elements displace by (0, 0, l).  A bent body of arc length l
    and bending angle `angle` displaces along the chord of the circular arc
    in the (optionally tilted) bending plane and rotates the frame by
    -angle about the tilted y axis.
    """
    if angle == 0.0:
        return np.array([0.0, 0.0, l]), np.eye(3)
    rho = l / angle
    dv = np.array([rho * (math.cos(angle) - 1.0), 0.0, rho * math.sin(angle)])
    if tilt:
        Rt = rot_s(tilt)
        return Rt @ dv, Rt @ rot_y(-angle) @ Rt.T
    return dv, rot_y(-angle)


def survey_advance(f: Frame, l: float, angle: float = 0.0, tilt: float = 0.0) -> Frame:
    """Advance a global frame through one element body."""
    if l < 0:
        raise ValueError(f"element length must be non-negative, got {l}")
    dv, dw = body_frame(l, angle, tilt)
    return Frame(f.V + f.W @ dv, f.W @ dw)
