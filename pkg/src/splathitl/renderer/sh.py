"""Degree-3 real spherical harmonics for view-dependent splat color."""
from __future__ import annotations

import numba
import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (
    -0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
    -0.4570457994644658, 1.445305721320277, -0.5900435899266435,
)


@numba.njit(cache=True, inline="always")
def sh_basis(x, y, z, out):
    """Fill ``out[0:16]`` with the basis values for unit direction (x, y, z)."""
    xx, yy, zz = x * x, y * y, z * z
    out[0] = SH_C0
    out[1] = -SH_C1 * y
    out[2] = SH_C1 * z
    out[3] = -SH_C1 * x
    out[4] = SH_C2[0] * x * y
    out[5] = SH_C2[1] * y * z
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[7] = SH_C2[3] * x * z
    out[8] = SH_C2[4] * (xx - yy)
    out[9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[10] = SH_C3[1] * x * y * z
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[14] = SH_C3[5] * z * (xx - yy)
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy)


def eval_sh_color(sh, view_dir) -> np.ndarray:
    """RGB in [0, 1] for coefficients ``sh`` (16, 3) seen along ``view_dir``.

    ``view_dir`` points from the camera toward the Gaussian and must be unit
    length to within 1e-6.
    """
    d = np.asarray(view_dir, dtype=float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("view_dir must be a unit vector")
    basis = np.empty(16)
    sh_basis(d[0], d[1], d[2], basis)
    return np.clip(0.5 + basis @ np.asarray(sh, dtype=float).reshape(16, 3), 0.0, 1.0)
