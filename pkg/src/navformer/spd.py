"""Canonical frame from the window Gram matrix and state-dependent SPD modulation.

The Gram matrix aggregates uncentered outer products of all triad vectors in a
window. Its eigenbasis ``U`` is the canonical frame; the modulator
``M = U diag(sigma) U^T`` rescales energy along the principal axes and does not
depend on the sign chosen for each eigenvector.
"""
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.linalg import subspace_angles

from .errors import DegenerateSpectrum, NonFinite, ShapeMismatch
from .linalg3 import SymEig3, eig_sym3, eig_sym3_batch, spd_from_frame

EPSILON_FLOOR = 1e-3
GAP_THRESHOLD = 1e-3
EPSILON_REL = 1e-8


def softplus(x):
    return np.logaddexp(0.0, x)


def spectrum_epsilon(G):
    """Scale-relative epsilon ``1e-8 * tr(G) / 3`` (never exactly zero)."""
    tr = np.trace(G, axis1=-2, axis2=-1)
    return np.maximum(EPSILON_REL * tr / 3.0, np.finfo(np.float64).tiny)


def spectral_stats(lam, epsilon):
    """Relative gaps and condition proxy from descending eigenvalues ``(..., 3)``."""
    lam = np.maximum(np.asarray(lam, dtype=np.float64), 0.0)
    gap12 = (lam[..., 0] - lam[..., 1]) / (lam[..., 0] + epsilon)
    gap23 = (lam[..., 1] - lam[..., 2]) / (lam[..., 1] + epsilon)
    kappa = lam[..., 0] / (lam[..., 2] + epsilon)
    return gap12, gap23, kappa


@dataclass(frozen=True)
class GramSpectrum:
    G: np.ndarray
    eig: SymEig3
    gap12: float
    gap23: float
    kappa: float
    epsilon: float

    @property
    def U(self):
        return self.eig.eigenvectors

    @property
    def eigenvalues(self):
        return self.eig.eigenvalues

    def is_degenerate(self, threshold=GAP_THRESHOLD):
        return self.gap12 < threshold or self.gap23 < threshold


def gram_matrices(triads):
    """Uncentered Gram ``sum_t (B B^T + C C^T + D D^T)`` for ``(..., L, 9)`` triads."""
    triads = np.asarray(triads, dtype=np.float64)
    if triads.shape[-1] != 9:
        raise ShapeMismatch(f"expected 9 triad columns, got {triads.shape[-1]}")
    vecs = triads.reshape(triads.shape[:-2] + (-1, 3))
    return np.swapaxes(vecs, -1, -2) @ vecs


def aggregate_gram(window, epsilon=None) -> GramSpectrum:
    """Gram matrix of a window's triads with its eigen-spectrum and stability stats."""
    triads = window.triads if hasattr(window, "triads") else np.asarray(window)
    if not np.all(np.isfinite(triads)):
        raise NonFinite("triads contain NaN or Inf")
    G = gram_matrices(triads)
    eig = eig_sym3(G)
    eps = float(spectrum_epsilon(G)) if epsilon is None else float(epsilon)
    gap12, gap23, kappa = spectral_stats(eig.eigenvalues, eps)
    return GramSpectrum(G, eig, float(gap12), float(gap23), float(kappa), eps)


def gram_spectra(triads):
    """Batched spectra for ``(N, L, 9)`` triads.

    Returns a dict of arrays: ``G``, ``eigenvalues``, ``U``, ``gap12``,
    ``gap23``, ``kappa``, ``epsilon``.
    """
    G = gram_matrices(triads)
    lam, U = eig_sym3_batch(G)
    eps = spectrum_epsilon(G)
    gap12, gap23, kappa = spectral_stats(lam, eps)
    return dict(G=G, eigenvalues=lam, U=U, gap12=gap12, gap23=gap23, kappa=kappa, epsilon=eps)


class ScaleMlp:
    """Maps the state summary to three raw scales: ``W2 tanh(W1 s + b1) + b2``."""

    def __init__(self, W1, b1, W2, b2):
        self.W1 = np.asarray(W1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.W2 = np.asarray(W2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        if self.W2.shape[0] != 3 or self.b2.shape != (3,):
            raise ShapeMismatch("scale MLP must output exactly 3 values")
        if self.W1.shape[0] != self.W2.shape[1] or self.b1.shape != (self.W1.shape[0],):
            raise ShapeMismatch("scale MLP hidden widths disagree")

    @classmethod
    def init(cls, d, hidden=None, rng=None, std=0.02):
        rng = np.random.default_rng(rng)
        hidden = hidden or max(1, d // 2)
        return cls(rng.normal(0.0, std, (hidden, d)), np.zeros(hidden),
                   rng.normal(0.0, std, (3, hidden)), np.zeros(3))

    @classmethod
    def from_params(cls, params, prefix="scale"):
        get = lambda k: np.asarray(getattr(params[f"{prefix}.{k}"], "data", params[f"{prefix}.{k}"]))
        return cls(get("W1"), get("b1"), get("W2"), get("b2"))

    def __call__(self, s):
        s = np.asarray(s, dtype=np.float64)
        return np.tanh(s @ self.W1.T + self.b1) @ self.W2.T + self.b2


def scales_from_state(mlp, s, epsilon_floor=EPSILON_FLOOR):
    """``sigma_i = epsilon_floor + softplus(d_i)`` with ``d = mlp(s)``."""
    d = mlp(s) if callable(mlp) else np.asarray(mlp, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise NonFinite("scale network produced non-finite output")
    return epsilon_floor + softplus(d)


@dataclass(frozen=True)
class SpdModulator:
    U: np.ndarray
    sigma: np.ndarray
    M: np.ndarray
    epsilon_floor: float = EPSILON_FLOOR


def build_modulator(spectrum, sigma, epsilon_floor=EPSILON_FLOOR) -> SpdModulator:
    """``M = U diag(sigma) U^T`` in the canonical frame of ``spectrum``.

    ``spectrum`` may be a :class:`GramSpectrum` or a bare ``(3, 3)`` frame.
    """
    U = spectrum.U if isinstance(spectrum, GramSpectrum) else np.asarray(spectrum, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (3,) or np.any(sigma <= 0):
        raise ValueError(f"scales must be three positive values, got {sigma}")
    return SpdModulator(U, sigma, spd_from_frame(U, sigma), epsilon_floor)


def modulate(window, modulator):
    """Apply ``M`` to every triad vector; telemetry and target are untouched."""
    M = modulator.M if isinstance(modulator, SpdModulator) else np.asarray(modulator)
    return replace(window, B=window.B @ M.T, C=window.C @ M.T, D=window.D @ M.T)


@dataclass(frozen=True)
class Prop1Report:
    eigenvalue_error: float  # max |eig(G~) - sorted sigma^2 lambda| / max(sigma^2 lambda)
    max_angle: float  # radians, between matched eigenvectors / eigenspaces
    gaps: tuple
    predicted: np.ndarray
    observed: np.ndarray
    eig_tol: float = 1e-7
    angle_tol: float = 1e-5

    @property
    def passed(self):
        return self.eigenvalue_error <= self.eig_tol and self.max_angle <= self.angle_tol


def _clusters(values, rel_gap):
    """Group descending ``values`` into runs whose relative separation < ``rel_gap``."""
    scale = max(abs(values[0]), np.finfo(np.float64).tiny)
    groups, current = [], [0]
    for i in range(1, len(values)):
        if (values[i - 1] - values[i]) / scale < rel_gap:
            current.append(i)
        else:
            groups.append(current)
            current = [i]
    groups.append(current)
    return groups


def verify_proposition1(window, mlp, s, epsilon_floor=EPSILON_FLOOR,
                        gap_threshold=GAP_THRESHOLD) -> Prop1Report:
    """Check that modulated triads have Gram eigenpairs ``(u_i, sigma_i^2 lambda_i)``.

    Eigenvalues are compared after sorting both spectra descending, since the
    scaling can reorder them. Eigenvectors are matched through that sort; if
    two predicted eigenvalues nearly coincide their joint eigenspace is
    compared instead of individual vectors.
    """
    spec = aggregate_gram(window)
    if spec.is_degenerate(gap_threshold):
        raise DegenerateSpectrum(
            f"gaps ({spec.gap12:.3g}, {spec.gap23:.3g}) below {gap_threshold:g}",
            gaps=(spec.gap12, spec.gap23),
        )
    sigma = scales_from_state(mlp, s, epsilon_floor)
    mod = build_modulator(spec, sigma, epsilon_floor)
    tilde = aggregate_gram(modulate(window, mod))

    pred = sigma ** 2 * np.maximum(spec.eigenvalues, 0.0)
    order = np.argsort(-pred, kind="stable")
    pred_sorted = pred[order]
    frame = spec.U[:, order]
    observed = tilde.eigenvalues
    scale = max(pred_sorted[0], np.finfo(np.float64).tiny)
    eig_err = float(np.max(np.abs(observed - pred_sorted)) / scale)

    angle = 0.0
    for group in _clusters(pred_sorted, gap_threshold):
        angles = subspace_angles(frame[:, group], tilde.U[:, group])
        angle = max(angle, float(np.max(angles)))
    return Prop1Report(eig_err, angle, (spec.gap12, spec.gap23), pred_sorted, observed)


class PerturbationAngles(NamedTuple):
    theta: np.ndarray  # degrees, (3,)
    degenerate: np.ndarray  # bool, (3,)


def vector_angles(U, V):
    """Sign-free angle ``arccos |<u_i, v_i>|`` per column, radians, computed stably."""
    dot = np.abs(np.sum(U * V, axis=-2))
    cross = np.linalg.norm(np.cross(U, V, axis=-2), axis=-2)
    return np.arctan2(cross, dot)


def _degenerate_mask(gap12, gap23, threshold):
    gap12 = np.asarray(gap12)
    gap23 = np.asarray(gap23)
    return np.stack([gap12 < threshold, (gap12 < threshold) | (gap23 < threshold),
                     gap23 < threshold], axis=-1)


def perturbation_angles_batch(triads, noise_scale, seed, gap_threshold=GAP_THRESHOLD):
    """Eigenvector drift under additive Gaussian triad noise for ``(N, L, 9)`` triads.

    The noise std per component is ``noise_scale`` times the window's RMS triad
    vector magnitude. Returns ``(theta_deg (N, 3), degenerate (N, 3), spectra)``.
    """
    if noise_scale < 0:
        raise ValueError("noise_scale must be non-negative")
    triads = np.asarray(triads, dtype=np.float64)
    base = gram_spectra(triads)
    vecs = triads.reshape(triads.shape[:-1] + (3, 3))
    rms = np.sqrt(np.mean(np.sum(vecs * vecs, axis=-1), axis=(-2, -1)))
    noise = np.random.default_rng(seed).standard_normal(triads.shape)
    perturbed = triads + noise_scale * rms[..., None, None] * noise
    pert = gram_spectra(perturbed)
    theta = np.degrees(vector_angles(base["U"], pert["U"]))
    degenerate = _degenerate_mask(base["gap12"], base["gap23"], gap_threshold)
    return theta, degenerate, base


def perturbation_angles(window, noise_scale=1e-4, seed=0,
                        gap_threshold=GAP_THRESHOLD) -> PerturbationAngles:
    triads = window.triads if hasattr(window, "triads") else np.asarray(window)
    theta, degenerate, _ = perturbation_angles_batch(triads[None], noise_scale, seed, gap_threshold)
    return PerturbationAngles(theta[0], degenerate[0])
