"""
FFT linear algebra for block circulant matrices with circulant blocks.

Convention: the forward 2-D FFT is unnormalized and the inverse carries
1/N, so with lam = fft2(c)

    C x        = ifft2(lam * fft2(x))
    C^{-1} x   = ifft2(fft2(x) / lam)
    x' C^-1 x  = sum |fft2(x)|^2 / lam / N
    1' C^-1 1  = N / lam[0, 0]

Vectors are lexicographic over the N1 x N2 embedding lattice; a leading
batch axis is accepted everywhere a FieldVector is.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import fft as sp_fft

from ..errors import NegativeEigenvalue, NonSymmetricBase
from .covariance import CorrelationModel, ParamSet, base_vector
from .lattice import EmbeddingSpec, ObservationMask

logger = logging.getLogger(__name__)

IMAG_TOL = 1e-8

# scipy.fft keeps its own plan cache per shape; workers is the only knob
_fft_workers = 1


def set_fft_workers(workers: int) -> None:
    global _fft_workers
    _fft_workers = max(1, int(workers))


def fft2(x):
    return sp_fft.fft2(x, axes=(-2, -1), workers=_fft_workers)


def ifft2(x):
    return sp_fft.ifft2(x, axes=(-2, -1), workers=_fft_workers)


@dataclass(frozen=True)
class EigenSpectrum:
    values: np.ndarray
    shape: Tuple[int, int]
    min_eig: float

    @property
    def N(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def positive(self) -> bool:
        return self.min_eig > 0

    @property
    def zero_frequency(self) -> float:
        return float(self.values[0, 0])

    def require_positive(self, what: str = "operation") -> None:
        if not self.positive:
            raise NegativeEigenvalue(
                f"{what} needs a positive spectrum, smallest eigenvalue {self.min_eig:.3e}", self.min_eig
            )

    def require_nonnegative(self, what: str = "operation") -> None:
        if self.min_eig < 0:
            raise NegativeEigenvalue(
                f"{what} needs a nonnegative spectrum, smallest eigenvalue {self.min_eig:.3e}", self.min_eig
            )


def _as_grid(spec: EigenSpectrum, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != spec.N:
        raise ValueError(f"vector length {x.shape[-1]} does not match embedding size {spec.N}")
    return x.reshape(x.shape[:-1] + spec.shape)


def _flat(spec: EigenSpectrum, grid: np.ndarray) -> np.ndarray:
    return grid.reshape(grid.shape[:-2] + (spec.N,))


def _strip_imag(y: np.ndarray, what: str) -> np.ndarray:
    scale = max(float(np.max(np.abs(y.real), initial=0.0)), 1.0)
    resid = float(np.max(np.abs(y.imag), initial=0.0))
    if resid > IMAG_TOL * scale * 1e2:
        logger.warning("[BCCB] %s left imaginary residue %.2e", what, resid)
    return y.real


def eigenvalues(c: np.ndarray, shape: Tuple[int, int]) -> EigenSpectrum:
    c = np.asarray(c, dtype=float)
    if c.size != shape[0] * shape[1]:
        raise ValueError(f"base vector of length {c.size} does not fit shape {shape}")
    lam = fft2(c.reshape(shape))
    top = float(np.max(np.abs(lam)))
    resid = float(np.max(np.abs(lam.imag)))
    if resid > IMAG_TOL * max(top, np.finfo(float).tiny):
        raise NonSymmetricBase(f"base vector lacks BCCB symmetry: imaginary residue {resid:.2e} vs {top:.2e}")
    values = np.ascontiguousarray(lam.real)
    values.setflags(write=False)
    spec = EigenSpectrum(values=values, shape=tuple(shape), min_eig=float(values.min()))
    if not spec.positive:
        logger.debug("[BCCB] spectrum not positive: min eigenvalue %.3e", spec.min_eig)
    return spec


def build_spectrum(emb: EmbeddingSpec, model: CorrelationModel, p: ParamSet) -> EigenSpectrum:
    p.validate(model.family)
    return eigenvalues(base_vector(emb, model, p), emb.shape)


def matvec(spec: EigenSpectrum, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    y = ifft2(spec.values * fft2(_as_grid(spec, x)))
    if not np.iscomplexobj(x):
        y = _strip_imag(y, "matvec")
    return _flat(spec, y)


def solve(spec: EigenSpectrum, x: np.ndarray) -> np.ndarray:
    """C^{-1} x."""
    spec.require_positive("solve")
    x = np.asarray(x)
    y = ifft2(fft2(_as_grid(spec, x)) / spec.values)
    if not np.iscomplexobj(x):
        y = _strip_imag(y, "solve")
    return _flat(spec, y)


def color(spec: EigenSpectrum, eps: np.ndarray) -> np.ndarray:
    """F Lam^{1/2} eps / sqrt(N): real and imaginary parts are independent N(0, C) draws."""
    spec.require_nonnegative("color")
    sqrt_lam = np.sqrt(np.maximum(spec.values, 0.0))
    return _flat(spec, fft2(sqrt_lam * _as_grid(spec, eps)) / np.sqrt(spec.N))


def whiten(spec: EigenSpectrum, z: np.ndarray) -> np.ndarray:
    """Inverse of ``color``."""
    spec.require_positive("whiten")
    return _flat(spec, ifft2(_as_grid(spec, z)) * np.sqrt(spec.N) / np.sqrt(spec.values))


def inv_quad_form(spec: EigenSpectrum, x: np.ndarray):
    """x' C^{-1} x for real x (batched over a leading axis)."""
    spec.require_positive("inv_quad_form")
    power = np.abs(fft2(_as_grid(spec, np.asarray(x, dtype=float)))) ** 2
    return np.sum(power / spec.values, axis=(-2, -1)) / spec.N


def logdet(spec: EigenSpectrum) -> float:
    spec.require_positive("logdet")
    return float(np.sum(np.log(spec.values)))


def ones_quad(spec: EigenSpectrum) -> float:
    """1' C^{-1} 1; the constant vector is the zero-frequency eigenvector."""
    spec.require_positive("ones_quad")
    return spec.N / spec.zero_frequency


def partitioned_matvec(spec: EigenSpectrum, mask: ObservationMask, x_o: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(C_oo x_o, C_uo x_o) from one zero-padded product."""
    y = matvec(spec, mask.scatter(x_o))
    return y[mask.observed], y[mask.unobserved]


def build_spectrum_safe(emb: EmbeddingSpec, model: CorrelationModel, p: ParamSet) -> Optional[EigenSpectrum]:
    """Spectrum for ``p``, or None when the parameters leave the model's domain."""
    try:
        return build_spectrum(emb, model, p)
    except (ValueError, FloatingPointError, NonSymmetricBase) as exc:
        logger.debug("[BCCB] no spectrum at %s: %s", p, exc)
        return None
