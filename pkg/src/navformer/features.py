"""Rotation-invariant scalar features, harmonic time tokens and the state summary.

Column layout of a raw input slice ``x_t`` (``D0`` channels): the nine triad
components ``Bx By Bz Cx Cy Cz Dx Dy Dz`` first, then scalar telemetry. The
augmented matrix appends the nine invariant scalars and ``2K`` harmonic
columns, so ``D_aug = D0 + 9 + 2K``.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyInvariantSet, InvalidConfig, NonFinite, ShapeMismatch
from .linalg3 import apply_rotation

N_TRIAD = 9
N_PHI = 9
DEFAULT_FREQUENCIES = (0.01, 0.05, 0.1, 0.5)
DEFAULT_SAMPLE_RATE = 10.0

PHI_NAMES = (
    "norm_B", "norm_C", "norm_D",
    "dot_BC", "dot_BD", "dot_CD",
    "cross_BC", "cross_BD", "cross_CD",
)


@dataclass(frozen=True)
class TriadWindow:
    """One input window: three triad series, telemetry and the forecast target.

    ``B``, ``C``, ``D`` are ``(L, 3)``; ``r`` is ``(L, D0 - 9)``; ``y`` holds
    the ``L_pred`` future target values (may be empty for inference).
    """

    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    r: np.ndarray
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sample_rate: float = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        L = np.shape(self.B)[0]
        for name in ("B", "C", "D"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (L, 3):
                raise ShapeMismatch(f"{name} has shape {arr.shape}, expected ({L}, 3)")
            object.__setattr__(self, name, arr)
        r = np.asarray(self.r, dtype=np.float64)
        if r.ndim == 1:
            r = r.reshape(L, -1) if r.size else np.zeros((L, 0))
        if r.shape[0] != L:
            raise ShapeMismatch(f"telemetry has {r.shape[0]} rows, expected {L}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64).reshape(-1))
        for name in ("B", "C", "D", "r", "y"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFinite(f"window field {name} is not finite")

    @property
    def length(self):
        return self.B.shape[0]

    @property
    def triads(self):
        """``(L, 9)`` matrix of the raw triad components."""
        return np.concatenate([self.B, self.C, self.D], axis=1)

    @property
    def x(self):
        """``(L, D0)`` raw input matrix, triads first."""
        return np.concatenate([self.B, self.C, self.D, self.r], axis=1)

    @classmethod
    def from_matrix(cls, x, y=(), sample_rate=DEFAULT_SAMPLE_RATE):
        x = np.asarray(x, dtype=np.float64)
        return cls(x[:, 0:3], x[:, 3:6], x[:, 6:9], x[:, N_TRIAD:], np.asarray(y), sample_rate)

    def rotated(self, R):
        """The same window seen from a sensor frame rotated by ``R``."""
        return replace(self, B=apply_rotation(R, self.B), C=apply_rotation(R, self.C),
                       D=apply_rotation(R, self.D))


@dataclass(frozen=True)
class ChannelPartition:
    """Rotating channels (the raw triad components) versus invariant channels."""

    rotating: tuple
    invariant: tuple

    @classmethod
    def for_width(cls, d_aug):
        if d_aug < N_TRIAD:
            raise ShapeMismatch(f"augmented width {d_aug} < {N_TRIAD}")
        return cls(tuple(range(N_TRIAD)), tuple(range(N_TRIAD, d_aug)))

    @property
    def width(self):
        return len(self.rotating) + len(self.invariant)


@dataclass(frozen=True)
class InvariantFeatures:
    phi: np.ndarray  # (L, 9)
    harmonics: np.ndarray  # (L, 2K)
    frequencies: tuple

    @property
    def K(self):
        return len(self.frequencies)


def phi_from_triads(triads):
    """Invariant scalars for triads of shape ``(..., L, 9)`` -> ``(..., L, 9)``.

    Per step: norms of B, C, D; dot products BC, BD, CD; cross-product norms
    BC, BD, CD.
    """
    triads = np.asarray(triads, dtype=np.float64)
    B, C, D = triads[..., 0:3], triads[..., 3:6], triads[..., 6:9]
    norm = lambda v: np.sqrt(np.sum(v * v, axis=-1))
    return np.stack(
        [
            norm(B), norm(C), norm(D),
            np.sum(B * C, axis=-1), np.sum(B * D, axis=-1), np.sum(C * D, axis=-1),
            norm(np.cross(B, C)), norm(np.cross(B, D)), norm(np.cross(C, D)),
        ],
        axis=-1,
    )


def compute_phi(window):
    return phi_from_triads(window.triads)


def compute_harmonics(L, sample_rate, frequencies):
    """Sinusoidal time tokens ``[sin f1, cos f1, ..., sin fK, cos fK]`` per step.

    Time restarts at zero for every window (``tau_t = t / f_s``, ``t = 0..L-1``).
    """
    freqs = np.asarray(frequencies, dtype=np.float64).reshape(-1)
    if freqs.size == 0:
        raise InvalidConfig("harmonic bank needs at least one frequency")
    if sample_rate <= 0:
        raise InvalidConfig(f"sample rate must be positive, got {sample_rate}")
    if np.any(freqs <= 0) or not np.all(np.isfinite(freqs)):
        raise InvalidConfig(f"harmonic frequencies must be positive, got {freqs}")
    tau = np.arange(L, dtype=np.float64) / sample_rate
    angle = 2.0 * np.pi * tau[:, None] * freqs[None, :]
    out = np.empty((L, 2 * freqs.size))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def invariant_features(window, frequencies=DEFAULT_FREQUENCIES):
    return InvariantFeatures(
        compute_phi(window),
        compute_harmonics(window.length, window.sample_rate, frequencies),
        tuple(float(f) for f in frequencies),
    )


def augment(window, feats):
    """Stack ``[x_t; phi_t; h_t]`` into the ``(L, D_aug)`` matrix and tag channels."""
    if feats.K == 0 or feats.harmonics.shape[1] == 0:
        raise InvalidConfig("augmentation requires K >= 1 harmonic frequencies")
    L = window.length
    if feats.phi.shape != (L, N_PHI) or feats.harmonics.shape != (L, 2 * feats.K):
        raise ShapeMismatch(
            f"features {feats.phi.shape}/{feats.harmonics.shape} do not match window length {L}"
        )
    Z = np.concatenate([window.x, feats.phi, feats.harmonics], axis=1)
    return Z, ChannelPartition.for_width(Z.shape[1])


def variate_embed(Z, W, b):
    """Embed each channel's full series as one token: row ``c`` is ``W Z[:, c] + b``."""
    Z = np.asarray(Z, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != Z.shape[0] or b.shape != (W.shape[0],):
        raise ShapeMismatch(f"W {W.shape} / b {b.shape} incompatible with Z {Z.shape}")
    return Z.T @ W.T + b


def state_summary(E, partition):
    """Mean embedding over the invariant channels only."""
    E = np.asarray(E, dtype=np.float64)
    if partition.width != E.shape[0]:
        raise ShapeMismatch(f"partition covers {partition.width} channels, E has {E.shape[0]}")
    if not partition.invariant:
        raise EmptyInvariantSet("no invariant channels to summarise")
    return E[list(partition.invariant)].mean(axis=0)
