"""Small independent oracles shared by the tests."""

from __future__ import annotations

import numpy as np


def random_rotation(rng) -> np.ndarray:
    """Uniform random rotation via QR of a Gaussian matrix."""
    Q, R = np.linalg.qr(rng.normal(size=(3, 3)))
    Q = Q @ np.diag(np.sign(np.diag(R)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def homogeneous(R, t) -> np.ndarray:
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M


def rot_z(deg) -> np.ndarray:
    a = np.radians(deg)
    return np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])


def project_3x4(fu, fv, cu, cv, R_dev_to_world, t_dev_to_world, X) -> np.ndarray:
    """Pinhole projection written as one homogeneous 3x4 product."""
    K = np.array([[fu, 0, cu], [0, fv, cv], [0, 0, 1.0]])
    Rw = np.asarray(R_dev_to_world).T
    P = K @ np.hstack([Rw, (-Rw @ np.asarray(t_dev_to_world))[:, None]])
    x = P @ np.append(X, 1.0)
    return x[:2] / x[2]
