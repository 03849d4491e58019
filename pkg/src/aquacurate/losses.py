"""Scale-and-shift-invariant depth loss with a multi-scale gradient term.

The prediction is aligned to the target by least squares (scale ``s``,
shift ``t``), the residual ``R = s*d + t - gt`` is penalised pointwise
(``ssi``) and through its forward differences at ``K`` dyadic scales
(``reg``).  ``total = ssi + alpha * reg``.

Gradients treat ``(s, t)`` as constants; :func:`fd_check` compares them
against central finite differences of the same frozen-alignment loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateAlignmentError, DimensionError, KinkError, ParameterError
from .grid_core import as_single_channel, avg_pool, pool_counts

logger = logging.getLogger(__name__)

RHO_CHOICES = ("l1", "l2")
DEFAULT_K = 4
DEFAULT_ALPHA = 0.5
KINK_TOL = 1e-6
FD_STEP = 1e-4


@dataclass(frozen=True)
class Alignment:
    s: float
    t: float

    def apply(self, d):
        return self.s * np.asarray(d, dtype=np.float64) + self.t


@dataclass(frozen=True)
class LossReport:
    ssi: float
    reg: float
    total: float
    alignment: Alignment
    K: int
    alpha: float
    rho: str
    fd_max_rel_error: float | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["alignment"] = asdict(self.alignment)
        return out


def _prepare(d, gt, mask):
    d = as_single_channel(d)
    gt = as_single_channel(gt)
    if d.shape != gt.shape:
        raise DimensionError(f"prediction {d.shape} and target {gt.shape} differ in shape")
    if mask is None:
        mask = np.ones(d.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 3 and mask.shape[2] == 1:
            mask = mask[:, :, 0]
        if mask.shape != d.shape:
            raise DimensionError(f"mask {mask.shape} does not match grids {d.shape}")
    if not np.all(np.isfinite(d[mask])) or not np.all(np.isfinite(gt[mask])):
        raise ParameterError("non-finite values inside the mask")
    return d, gt, mask


def _check_rho(rho):
    if rho not in RHO_CHOICES:
        raise ParameterError(f"rho must be one of {RHO_CHOICES}, got {rho!r}")


def align_lstsq(d, gt, mask=None) -> Alignment:
    """Closed-form ``argmin_{s,t} sum_mask (s*d + t - gt)^2``."""
    d, gt, mask = _prepare(d, gt, mask)
    x = d[mask]
    y = gt[mask]
    if x.size < 2:
        raise DegenerateAlignmentError(f"alignment needs >= 2 valid pixels, got {x.size}")
    if x.max() == x.min():
        raise DegenerateAlignmentError("prediction is constant on the mask; scale is undetermined")
    # centred normal equations, numerically kinder than the raw 2x2 system
    mx = x.mean()
    my = y.mean()
    xc = x - mx
    var = float(np.dot(xc, xc))
    if var <= 0.0 or not math.isfinite(var):
        raise DegenerateAlignmentError("singular alignment system")
    s = float(np.dot(xc, y - my)) / var
    return Alignment(s=s, t=float(my - s * mx))


def residual(d, gt, mask, alignment: Alignment) -> np.ndarray:
    """Aligned residual, zeroed outside the mask.

    ``d`` may carry a trailing batch axis, ``(H, W, P)``.
    """
    if np.ndim(d) == 3:
        mask = mask[:, :, None]
        gt = np.asarray(gt)[:, :, None]
    return np.where(mask, alignment.s * d + alignment.t - gt, 0.0)


def max_scales(shape) -> int:
    return int(math.floor(math.log2(min(shape[:2])))) + 1


def _check_scales(shape, K):
    if int(K) != K or K < 1:
        raise ParameterError(f"K must be a positive integer, got {K}")
    if min(shape[:2]) < 2 ** (K - 1):
        raise ParameterError(
            f"grid {shape[:2]} is too small for K={K}; the largest feasible K is {max_scales(shape)}"
        )


def _pyramid(r, mask, K):
    """Yield ``(factor, pooled residual, pooled validity)`` per scale."""
    for k in range(K):
        f = 2 ** k
        rk = avg_pool(r, f)
        # a pooled cell is valid only when every source pixel is
        vk = avg_pool(mask.astype(np.float64), f) == 1.0
        yield f, rk, vk


def _masked_sum(a, valid):
    if a.ndim == 3:
        valid = valid[:, :, None]
    return (a * valid).sum(axis=(0, 1))


def _ssi_value(r, mask, rho):
    m = int(mask.sum())
    terms = np.abs(r) if rho == "l1" else r * r
    return _masked_sum(terms, mask) / (2.0 * m)


def _reg_value(r, mask, K):
    m = int(mask.sum())
    total = r.dtype.type(0)
    for _, rk, vk in _pyramid(r, mask, K):
        vx = vk[:, 1:] & vk[:, :-1]
        vy = vk[1:, :] & vk[:-1, :]
        total = total + _masked_sum(np.abs(rk[:, 1:] - rk[:, :-1]), vx)
        total = total + _masked_sum(np.abs(rk[1:, :] - rk[:-1, :]), vy)
    return total / m


def ssi_loss(d, gt, mask=None, rho: str = "l1") -> float:
    _check_rho(rho)
    d, gt, mask = _prepare(d, gt, mask)
    al = align_lstsq(d, gt, mask)
    return float(_ssi_value(residual(d, gt, mask, al), mask, rho))


def grad_matching_loss(d, gt, mask=None, K: int = DEFAULT_K) -> float:
    d, gt, mask = _prepare(d, gt, mask)
    _check_scales(d.shape, K)
    al = align_lstsq(d, gt, mask)
    return float(_reg_value(residual(d, gt, mask, al), mask, K))


def frozen_loss(d, gt, mask, rho, K, alpha, alignment: Alignment) -> float:
    """``ssi + alpha * reg`` with a fixed alignment (no re-fit).

    Evaluated in the dtype of ``d``; pass ``np.longdouble`` grids for
    extended-precision finite differences.
    """
    r = residual(d, gt, mask, alignment)
    return _ssi_value(r, mask, rho) + alpha * _reg_value(r, mask, K)


def total_loss(d, gt, mask=None, rho: str = "l1", K: int = DEFAULT_K, alpha: float = DEFAULT_ALPHA) -> LossReport:
    """Both loss terms from one shared alignment."""
    _check_rho(rho)
    d, gt, mask = _prepare(d, gt, mask)
    _check_scales(d.shape, K)
    al = align_lstsq(d, gt, mask)
    r = residual(d, gt, mask, al)
    ssi = float(_ssi_value(r, mask, rho))
    reg = float(_reg_value(r, mask, K))
    return LossReport(ssi=ssi, reg=reg, total=ssi + alpha * reg, alignment=al, K=K, alpha=alpha, rho=rho)


def batch_total_loss(samples, rho: str = "l1", K: int = DEFAULT_K, alpha: float = DEFAULT_ALPHA) -> float:
    """Mean per-image total over ``(d, gt, mask)`` triples."""
    totals = [total_loss(d, gt, m, rho, K, alpha).total for d, gt, m in samples]
    if not totals:
        raise ParameterError("empty batch")
    return math.fsum(totals) / len(totals)


def _abs_subgradient(x, tol):
    # values within rounding noise of zero take the zero subgradient
    g = np.sign(x)
    g[np.abs(x) <= tol] = 0.0
    return g


def loss_gradient(d, gt, mask=None, rho: str = "l1", K: int = DEFAULT_K, alpha: float = DEFAULT_ALPHA,
                  frozen_alignment: Alignment | None = None) -> np.ndarray:
    """Analytic ``d(total)/d(d)`` with the alignment held fixed.

    Raises:
        KinkError: for ``rho="l1"`` when a masked residual lies within
            1e-6 of zero, where the loss has no derivative.
    """
    _check_rho(rho)
    d, gt, mask = _prepare(d, gt, mask)
    _check_scales(d.shape, K)
    al = frozen_alignment if frozen_alignment is not None else align_lstsq(d, gt, mask)
    m = int(mask.sum())
    r = residual(d, gt, mask, al)
    h, w = d.shape

    if rho == "l2":
        grad_r = r / m
    else:
        kinks = np.argwhere(mask & (np.abs(r) < KINK_TOL))
        if kinks.size:
            pixels = [tuple(int(v) for v in p) for p in kinks]
            raise KinkError(f"{len(pixels)} residual(s) within {KINK_TOL:g} of zero: {pixels[:10]}", pixels)
        grad_r = np.sign(r) / (2.0 * m)

    tol = 1e-12 * max(1.0, float(np.abs(gt[mask]).max()), abs(al.t))
    for f, rk, vk in _pyramid(r, mask, K):
        g = np.zeros_like(rk)
        vx = vk[:, 1:] & vk[:, :-1]
        vy = vk[1:, :] & vk[:-1, :]
        sx = _abs_subgradient(rk[:, 1:] - rk[:, :-1], tol) * vx
        sy = _abs_subgradient(rk[1:, :] - rk[:-1, :], tol) * vy
        g[:, 1:] += sx
        g[:, :-1] -= sx
        g[1:, :] += sy
        g[:-1, :] -= sy
        g /= pool_counts(r.shape, f)
        up = np.repeat(np.repeat(g, f, axis=0), f, axis=1)[:h, :w]
        grad_r = grad_r + (alpha / m) * up

    return np.where(mask, al.s * grad_r, 0.0)


def _stencil_kinks(d, gt, mask, rho, K, alignment, h):
    """Pixels whose +/-h perturbation could cross a non-differentiable point."""
    r = residual(d, gt, mask, alignment)
    reach = 2.0 * abs(alignment.s) * h
    bad = np.zeros(d.shape, dtype=bool)
    if rho == "l1":
        bad |= mask & (np.abs(r) <= reach)
    H, W = d.shape
    for f, rk, vk in _pyramid(r, mask, K):
        near = np.zeros(rk.shape, dtype=bool)
        dx = np.abs(rk[:, 1:] - rk[:, :-1])
        dy = np.abs(rk[1:, :] - rk[:-1, :])
        kx = (vk[:, 1:] & vk[:, :-1]) & (dx > 0) & (dx <= reach)
        ky = (vk[1:, :] & vk[:-1, :]) & (dy > 0) & (dy <= reach)
        near[:, 1:] |= kx
        near[:, :-1] |= kx
        near[1:, :] |= ky
        near[:-1, :] |= ky
        bad |= np.repeat(np.repeat(near, f, axis=0), f, axis=1)[:H, :W]
    return bad


def fd_gradient(d, gt, mask, rho, K, alpha, alignment: Alignment, h: float = FD_STEP, pixels=None,
                chunk: int = 256) -> np.ndarray:
    """Central finite differences of :func:`frozen_loss`; NaN where not probed.

    The loss is evaluated in extended precision so that rounding noise stays
    far below the gradient even when the fitted scale is tiny.  Perturbed
    copies are evaluated ``chunk`` at a time along a trailing batch axis.
    """
    d, gt, mask = _prepare(d, gt, mask)
    out = np.full(d.shape, np.nan)
    if pixels is None:
        pixels = np.argwhere(mask)
    pixels = np.asarray(pixels, dtype=int).reshape(-1, 2)
    base = d.astype(np.longdouble)
    gt = gt.astype(np.longdouble)
    h = np.longdouble(h)
    for start in range(0, len(pixels), chunk):
        rows, cols = pixels[start:start + chunk].T
        p = len(rows)
        plus = np.repeat(base[:, :, None], p, axis=2)
        minus = plus.copy()
        lanes = np.arange(p)
        plus[rows, cols, lanes] += h
        minus[rows, cols, lanes] -= h
        fp = frozen_loss(plus, gt, mask, rho, K, alpha, alignment)
        fm = frozen_loss(minus, gt, mask, rho, K, alpha, alignment)
        out[rows, cols] = ((fp - fm) / (2 * h)).astype(np.float64)
    return out


def relative_error(a, b, floor: float = 1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_check(d, gt, mask=None, rho: str = "l1", K: int = DEFAULT_K, alpha: float = DEFAULT_ALPHA,
             h: float = FD_STEP) -> float:
    """Max relative error between analytic and finite-difference gradients.

    Pixels whose stencil straddles a kink of ``|.|`` are skipped; that
    count is logged at debug level.
    """
    _check_rho(rho)
    d, gt, mask = _prepare(d, gt, mask)
    _check_scales(d.shape, K)
    al = align_lstsq(d, gt, mask)
    analytic = loss_gradient(d, gt, mask, rho, K, alpha, frozen_alignment=al)
    skip = _stencil_kinks(d, gt, mask, rho, K, al, h)
    probe = np.argwhere(mask & ~skip)
    logger.debug("fd_check: probing %d pixels, %d skipped near kinks", len(probe), int((mask & skip).sum()))
    if len(probe) == 0:
        return 0.0
    numeric = fd_gradient(d, gt, mask, rho, K, alpha, al, h, probe)
    idx = tuple(probe.T)
    return float(relative_error(analytic[idx], numeric[idx]).max())
