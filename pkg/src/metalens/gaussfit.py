"""2-D Gaussian fitting of PSF images and the FWHM degradation score.

The PSF is first rotated so its principal axes (from image second moments)
align with x/y, then an axis-aligned Gaussian
A*exp(-((x-mx)^2/(2*sx^2) + (y-my)^2/(2*sy^2))) is fitted by
Levenberg-Marquardt. The width score combines both axes:
fwhm = sqrt((c*sx)^2 + (c*sy)^2) with c = 2*sqrt(2*ln 2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))  # 2.35482..., kept exact


class FitDegenerateError(RuntimeError):
    """PSF support too small to constrain a 2-D Gaussian."""


class FitConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class GaussianFit:
    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    rotation: float
    residual: float
    fwhm: float

    def __post_init__(self):
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ValueError("sigma_x and sigma_y must be positive")
        expected = math.hypot(FWHM_PER_SIGMA * self.sigma_x, FWHM_PER_SIGMA * self.sigma_y)
        if not math.isclose(self.fwhm, expected, rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError("fwhm inconsistent with sigma_x/sigma_y")


def combined_fwhm(sigma_x: float, sigma_y: float) -> float:
    return math.hypot(FWHM_PER_SIGMA * sigma_x, FWHM_PER_SIGMA * sigma_y)


def _moments(img: np.ndarray):
    """Centroid and second central moments of a non-negative image."""
    total = img.sum()
    ys, xs = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
    mx = float((xs * img).sum() / total)
    my = float((ys * img).sum() / total)
    cxx = float((((xs - mx) ** 2) * img).sum() / total)
    cyy = float((((ys - my) ** 2) * img).sum() / total)
    cxy = float((((xs - mx) * (ys - my)) * img).sum() / total)
    return mx, my, cxx, cyy, cxy


def _gaussian_model(params, xs, ys):
    amp, mx, my, sx, sy = params
    gx = (xs - mx) / sx
    gy = (ys - my) / sy
    return amp * np.exp(-0.5 * (gx * gx + gy * gy))


def _jacobian(params, xs, ys):
    amp, mx, my, sx, sy = params
    gx = (xs - mx) / sx
    gy = (ys - my) / sy
    e = np.exp(-0.5 * (gx * gx + gy * gy))
    d_amp = e
    d_mx = amp * e * gx / sx
    d_my = amp * e * gy / sy
    d_sx = amp * e * gx * gx / sx
    d_sy = amp * e * gy * gy / sy
    return np.stack([d_amp, d_mx, d_my, d_sx, d_sy], axis=-1)


def _levenberg_marquardt(img, params, max_iter=200, damping=1e-3, cost_tol=1e-10):
    ys, xs = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
    xs = xs.astype(np.float64).ravel()
    ys = ys.astype(np.float64).ravel()
    target = img.astype(np.float64).ravel()
    p = np.asarray(params, dtype=np.float64)
    resid = target - _gaussian_model(p, xs, ys)
    cost = float(resid @ resid)
    lam = damping
    for _ in range(max_iter):
        jac = _jacobian(p, xs, ys).reshape(-1, 5)
        jtj = jac.T @ jac
        jtr = jac.T @ resid
        step_ok = False
        for _ in range(50):
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj)) + 1e-300 * np.eye(5), jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = p + delta
            cand[3] = abs(cand[3])
            cand[4] = abs(cand[4])
            if cand[3] < 1e-6 or cand[4] < 1e-6:
                lam *= 10.0
                continue
            cand_resid = target - _gaussian_model(cand, xs, ys)
            cand_cost = float(cand_resid @ cand_resid)
            if cand_cost < cost:
                step_ok = True
                break
            lam *= 10.0
        if not step_ok:
            return p, cost, True  # no damped step improves: a (local) minimum
        improvement = cost - cand_cost
        p, resid, cost = cand, cand_resid, cand_cost
        lam = max(lam * 0.3, 1e-12)
        if improvement < cost_tol:
            return p, cost, True
    return p, cost, False  # still improving when the iteration budget ran out


def fit_gaussian_fwhm(psf: np.ndarray, max_iter: int = 200) -> GaussianFit:
    """Fit a rotated 2-D Gaussian to a normalized PSF image.

    Raises FitDegenerateError when the support above 1% of the peak does not
    span at least a 2x2 pixel footprint, FitConvergenceError when LM fails to
    reach a minimum within `max_iter` iterations.
    """
    img = np.asarray(psf, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PSF must be 2-D, got shape {img.shape}")
    if img.max() <= 0:
        raise FitDegenerateError("PSF has no positive values")
    support = img >= 0.01 * img.max()
    rows = np.any(support, axis=1).sum()
    cols = np.any(support, axis=0).sum()
    if support.sum() < 4 or rows < 2 or cols < 2:
        raise FitDegenerateError(
            f"support above 1% of peak spans {rows}x{cols} pixels ({int(support.sum())} px), need >= 2x2"
        )

    mx, my, cxx, cyy, cxy = _moments(img)
    rotation = 0.5 * math.atan2(2.0 * cxy, cxx - cyy)
    work = img
    if abs(rotation) > 1e-3:
        # rotate about the image center so the principal axes align with x/y
        work = ndimage.rotate(img, math.degrees(rotation), reshape=True, order=3, mode="constant", cval=0.0)
        work = np.maximum(work, 0.0)
        mx, my, cxx, cyy, cxy = _moments(work)

    sx0 = math.sqrt(max(cxx, 0.05))
    sy0 = math.sqrt(max(cyy, 0.05))
    # two starts: moment width and a core-focused width; metalens PSFs
    # (compact core + aberration flare) can have several LSQ minima, keep the best
    starts = [(work.max(), mx, my, sx0, sy0)]
    if min(sx0, sy0) > 1.0:
        starts.append((work.max(), mx, my, max(sx0 / 3.0, 0.5), max(sy0 / 3.0, 0.5)))
    best = None
    for p0 in starts:
        params_i, cost_i, converged_i = _levenberg_marquardt(work, p0, max_iter=max_iter)
        if best is None or cost_i < best[1]:
            best = (params_i, cost_i, converged_i)
    params, cost, converged = best
    residual = math.sqrt(cost / work.size)
    if not converged:
        raise FitConvergenceError(f"no convergence in {max_iter} LM iterations", residual)
    _, mu_x, mu_y, sigma_x, sigma_y = (float(v) for v in params)
    if min(sigma_x, sigma_y) < 1e-4:
        raise FitDegenerateError(f"collapsed fit: sigma=({sigma_x:.2e}, {sigma_y:.2e})")
    return GaussianFit(
        mu_x=mu_x,
        mu_y=mu_y,
        sigma_x=sigma_x,
        sigma_y=sigma_y,
        rotation=rotation,
        residual=residual,
        fwhm=combined_fwhm(sigma_x, sigma_y),
    )


def render_gaussian(shape, amp, mu_x, mu_y, sigma_x, sigma_y, rotation=0.0) -> np.ndarray:
    """Sample a (possibly rotated) 2-D Gaussian on a pixel grid (test fixture helper)."""
    ys, xs = np.mgrid[0 : shape[0], 0 : shape[1]]
    dx = xs - mu_x
    dy = ys - mu_y
    ca, sa = math.cos(rotation), math.sin(rotation)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    return amp * np.exp(-0.5 * ((u / sigma_x) ** 2 + (v / sigma_y) ** 2))
