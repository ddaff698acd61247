"""
VAR(p) model of the 2-dimensional regression residuals.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from statsmodels.tsa.stattools import acf

from piecewise_sir import settings
from piecewise_sir.core_model import SirDesign
from piecewise_sir.detect import detect_change_points
from piecewise_sir.exceptions import InsufficientData, SingularLagMatrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VarModel:
    """
    e_t = phi_1 e_{t-1} + ... + phi_p e_{t-p} + noise, noise ~ (0, noise_cov).

    segment_start is the 1-based residual index from which the coefficients
    were estimated (1 unless a break in the VAR structure was found).
    """

    p: int
    phi: np.ndarray
    noise_cov: np.ndarray
    segment_start: int = 1
    breaks: Tuple[int, ...] = ()
    bic: Tuple[float, ...] = ()

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float).reshape(self.p, 2, 2)
        noise_cov = np.asarray(self.noise_cov, dtype=float).reshape(2, 2)
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(noise_cov))):
            raise ValueError('VAR coefficients must be finite')
        object.__setattr__(self, 'phi', phi)
        object.__setattr__(self, 'noise_cov', noise_cov)

    @classmethod
    def white_noise(cls, residuals):
        residuals = np.asarray(residuals, dtype=float)
        return cls(0, np.zeros((0, 2, 2)), residuals.T @ residuals / max(len(residuals), 1))

    def predict_next(self, history):
        """One-step prediction from the residual history (most recent last)."""
        history = np.asarray(history, dtype=float)
        out = np.zeros(2)
        for i in range(1, self.p + 1):
            if len(history) >= i:
                out += self.phi[i - 1] @ history[-i]
        return out

    def fitted(self, residuals, start=1):
        """In-sample one-step predictions; rows before start + p stay zero."""
        residuals = np.asarray(residuals, dtype=float)
        out = np.zeros_like(residuals)
        for t in range(start - 1 + self.p, len(residuals)):
            out[t] = self.predict_next(residuals[:t])
        return out

    def to_dict(self):
        return {'p': self.p, 'phi': self.phi.tolist(), 'noise_cov': self.noise_cov.tolist(),
                'segment_start': self.segment_start, 'breaks': list(self.breaks), 'bic': list(self.bic)}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data['p']), np.asarray(data['phi'], dtype=float), np.asarray(data['noise_cov'], dtype=float),
                   int(data.get('segment_start', 1)), tuple(data.get('breaks', ())), tuple(data.get('bic', ())))


def lag_matrix(residuals, p, first=None):
    """(targets, lags) for rows t = first..n-1 (0-based); lags are
    [e_{t-1}, ..., e_{t-p}] flattened."""
    residuals = np.asarray(residuals, dtype=float)
    first = p if first is None else first
    rows = np.arange(first, len(residuals))
    lags = np.hstack([residuals[rows - i] for i in range(1, p + 1)]) if p else np.zeros((len(rows), 0))
    return residuals[rows], lags


def _least_squares(targets, lags, p):
    if p == 0:
        return np.zeros((0, 2, 2)), targets
    if np.linalg.matrix_rank(lags) < lags.shape[1]:
        raise SingularLagMatrix('lag matrix of order {} is rank deficient'.format(p))
    coef, _, _, _ = np.linalg.lstsq(lags, targets, rcond=None)
    phi = np.stack([coef[2 * i:2 * i + 2].T for i in range(p)])
    return phi, targets - lags @ coef


def _log_det(cov):
    sign, value = np.linalg.slogdet(cov)
    return value if sign > 0 else -np.inf


def fit_var_order(residuals, p):
    """OLS fit of a VAR of fixed order on all available rows."""
    residuals = np.asarray(residuals, dtype=float)
    targets, lags = lag_matrix(residuals, p)
    phi, resid = _least_squares(targets, lags, p)
    return VarModel(p, phi, resid.T @ resid / len(resid))


def fit_var(residuals, p_max=settings.VAR_MAX_LAG):
    """
    Choose the lag order by BIC = log det(Sigma) + 4p log(n)/n over
    p = 0..p_max on a common sample that holds out the first p_max rows,
    then refit the chosen order on the whole series. A rank-deficient lag
    matrix ends the search at the previous order.
    """
    residuals = np.asarray(residuals, dtype=float)
    n = len(residuals)
    if n <= 10 * p_max:
        raise InsufficientData('VAR lag search up to {} needs more than {} residuals, got {}'.format(
            p_max, 10 * p_max, n))
    n_eff = n - p_max
    bic = []
    for p in range(p_max + 1):
        targets, lags = lag_matrix(residuals, p, first=p_max)
        try:
            _, resid = _least_squares(targets, lags, p)
        except SingularLagMatrix:
            logger.warning('lag matrix singular at order %d, lag search stops at %d', p, p - 1)
            break
        bic.append(_log_det(resid.T @ resid / n_eff) + 4 * p * np.log(n_eff) / n_eff)
    p = int(np.argmin(bic))
    model = fit_var_order(residuals, p)
    logger.debug('VAR BIC by order %s, chosen p=%d', np.round(bic, 4), p)
    return VarModel(model.p, model.phi, model.noise_cov, bic=tuple(float(b) for b in bic))


def var_design(residuals, p):
    """VAR rows in the shared regression form: y_t = e_t and
    x_t = kron(I_2, lags_t), coefficients ordered as the rows of phi."""
    targets, lags = lag_matrix(residuals, p)
    x = np.zeros((len(targets), 2, 4 * p))
    x[:, 0, :2 * p] = lags
    x[:, 1, 2 * p:] = lags
    return SirDesign(targets, x)


def screen_var_breaks(residuals, model, config):
    """
    Look for breaks in the VAR coefficients with the block fused lasso
    machinery. When breaks are found the model is refit on the last segment,
    which is the one used for forecasting.
    """
    if model.p == 0:
        return model
    residuals = np.asarray(residuals, dtype=float)
    design = var_design(residuals, model.p)
    if len(design) < 2 * config.block_size:
        logger.info('too few residual rows to screen the VAR for breaks')
        return model
    result = detect_change_points(design, config.replace(lambda_=None))
    if not result.final_points:
        return VarModel(model.p, model.phi, model.noise_cov, 1, (), model.bic)
    breaks = tuple(model.p + point for point in result.final_points)
    start = breaks[-1]
    tail = residuals[start - 1:]
    if len(tail) <= 4 * model.p + 1:
        logger.warning('last VAR segment from %d is too short to refit, keeping the full-sample fit', start)
        return VarModel(model.p, model.phi, model.noise_cov, 1, breaks, model.bic)
    try:
        refit = fit_var_order(tail, model.p)
    except SingularLagMatrix:
        logger.warning('last VAR segment from %d has a singular lag matrix, keeping the full-sample fit', start)
        return VarModel(model.p, model.phi, model.noise_cov, 1, breaks, model.bic)
    logger.info('VAR breaks at residual days %s, refit from day %d', list(breaks), start)
    return VarModel(refit.p, refit.phi, refit.noise_cov, start, breaks, model.bic)


def residual_acf(residuals, max_lag=settings.ACF_MAX_LAG):
    """Sample autocorrelations rho(0..max_lag) per coordinate, shape (max_lag+1, k)."""
    residuals = np.asarray(residuals, dtype=float)
    if residuals.ndim == 1:
        residuals = residuals[:, None]
    if max_lag >= len(residuals) / 2:
        raise ValueError('max_lag must be below half the series length')
    return np.column_stack([acf(residuals[:, k], nlags=max_lag, fft=False)
                            for k in range(residuals.shape[1])])


def acf_out_of_band(residuals, max_lag=settings.ACF_MAX_LAG):
    """Fraction of |rho(h)|, h >= 1, outside the 2/sqrt(n) white-noise band."""
    rho = residual_acf(residuals, max_lag)[1:]
    band = 2.0 / np.sqrt(len(residuals))
    return float(np.mean(np.abs(rho) > band))
