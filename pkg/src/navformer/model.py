"""The patch-channel grid transformer with canonical SPD modulation and FiLM.

Forward pipeline for a batch of raw input windows ``x`` of shape ``(B, L, D0)``:

1. invariant scalars and harmonic tokens from the *raw* triads;
2. variate-as-token embedding of ``[x; phi; h]`` and the invariant state summary ``s``;
3. Gram eigenframe of the raw triads (a constant of the forward pass),
   scales ``sigma(s)`` and the SPD transform ``M(s)`` applied to the triads;
4. patching of ``[x_mod; phi; h]`` per channel, shared patch embedding,
   FiLM on the triad-channel tokens, positional embeddings;
5. pre-norm transformer encoder over the flattened channel x patch grid;
6. channel-shared linear head; the forecast is read from the target channel.
"""
import zlib
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import engine as E
from .errors import InvalidConfig, ShapeMismatch
from .features import DEFAULT_FREQUENCIES, DEFAULT_SAMPLE_RATE, N_PHI, N_TRIAD, compute_harmonics, phi_from_triads
from .spd import EPSILON_FLOOR, gram_spectra


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 30
    pred_len: int = 60
    n_inputs: int = 26
    target_channel: int = 25
    frequencies: tuple = DEFAULT_FREQUENCIES
    sample_rate: float = DEFAULT_SAMPLE_RATE
    d_model: int = 64
    d_ff: int = 128
    n_layers: int = 2
    n_heads: int = 4
    patch_len: int = 8
    stride: int = 4
    epsilon_floor: float = EPSILON_FLOOR
    seed: int = 0
    use_harmonics: bool = True
    use_spd: bool = True
    use_film: bool = True
    ff_activation: str = "tanh"
    aux_loss_weight: float = 0.0
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "frequencies", tuple(float(f) for f in self.frequencies))
        self.validate()

    def validate(self):
        for name in ("seq_len", "pred_len", "d_model", "d_ff", "n_heads", "patch_len", "stride"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfig(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_layers < 0:
            raise InvalidConfig("n_layers must be >= 0")
        if not 1 <= self.patch_len <= self.seq_len:
            raise InvalidConfig(f"patch_len {self.patch_len} must lie in [1, seq_len={self.seq_len}]")
        if not 1 <= self.stride <= self.patch_len:
            raise InvalidConfig(f"stride {self.stride} must lie in [1, patch_len={self.patch_len}]")
        if self.d_model % self.n_heads:
            raise InvalidConfig(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_inputs <= N_TRIAD:
            raise InvalidConfig(f"n_inputs must exceed the {N_TRIAD} triad channels")
        if not N_TRIAD <= self.target_channel < self.n_inputs:
            raise InvalidConfig(f"target_channel {self.target_channel} must be a non-triad input")
        if self.use_harmonics:
            if not self.frequencies or min(self.frequencies) <= 0:
                raise InvalidConfig("harmonic frequencies must be non-empty and positive")
        if self.sample_rate <= 0 or self.epsilon_floor <= 0:
            raise InvalidConfig("sample_rate and epsilon_floor must be positive")
        if self.ff_activation not in ACTIVATIONS:
            raise InvalidConfig(f"ff_activation must be one of {sorted(ACTIVATIONS)}")

    @property
    def n_harmonics(self):
        return len(self.frequencies) if self.use_harmonics else 0

    @property
    def d_aug(self):
        return self.n_inputs + N_PHI + 2 * self.n_harmonics

    @property
    def n_patches(self):
        return num_patches(self.seq_len, self.patch_len, self.stride)

    def to_dict(self):
        d = asdict(self)
        d["frequencies"] = list(self.frequencies)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


ACTIVATIONS = {"tanh": E.tanh, "relu": E.relu}


# ---------------------------------------------------------------- patching


def num_patches(L, P, S):
    return (L - P) // S + 2


def patch_indices(L, P, S):
    """``(M_p, P)`` time indices of each patch; indices past ``L - 1`` replicate the last step."""
    if not (1 <= P <= L and 1 <= S <= P):
        raise InvalidConfig(f"invalid patching L={L}, P={P}, S={S}")
    starts = np.arange(num_patches(L, P, S)) * S
    return np.minimum(starts[:, None] + np.arange(P)[None, :], L - 1)


def patchify(Zbar, P, S):
    """Channel-wise patches: ``(..., L, D_aug)`` -> ``(..., D_aug, M_p, P)``."""
    Zbar = np.asarray(Zbar, dtype=np.float64)
    idx = patch_indices(Zbar.shape[-2], P, S)
    return np.swapaxes(Zbar, -1, -2)[..., idx]


# ---------------------------------------------------------------- parameters


def param_shapes(config):
    d, dff, L = config.d_model, config.d_ff, config.seq_len
    h = max(1, d // 2)
    shapes = {"variate.W": (d, L), "variate.b": (d,)}
    if config.use_spd:
        shapes.update({"scale.W1": (h, d), "scale.b1": (h,), "scale.W2": (3, h), "scale.b2": (3,)})
    shapes.update({"patch.W": (d, config.patch_len), "patch.b": (d,)})
    if config.use_film:
        shapes.update({"film.W": (2 * d, d), "film.b": (2 * d,)})
    shapes.update({"pos.channel": (config.d_aug, d), "pos.patch": (config.n_patches, d)})
    for i in range(config.n_layers):
        p = f"enc.{i}."
        shapes.update({p + "ln1.g": (d,), p + "ln1.b": (d,)})
        for w in ("q", "k", "v", "o"):
            shapes.update({p + f"attn.W{w}": (d, d), p + f"attn.b{w}": (d,)})
        shapes.update({p + "ln2.g": (d,), p + "ln2.b": (d,),
                       p + "ff.W1": (dff, d), p + "ff.b1": (dff,),
                       p + "ff.W2": (d, dff), p + "ff.b2": (d,)})
    shapes.update({"head.W": (config.pred_len, config.n_patches * d), "head.b": (config.pred_len,)})
    return shapes


def init_params(config):
    """Weights ~ N(0, init_std^2), biases 0, layer-norm gains 1.

    Each tensor draws from its own stream keyed on (seed, name), so variants
    that drop a parameter group keep identical values for the rest.
    """
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "g":
            data = np.ones(shape)
        elif leaf.startswith("b"):
            data = np.zeros(shape)
        else:
            rng = np.random.default_rng([config.seed, zlib.crc32(name.encode())])
            data = rng.normal(0.0, config.init_std, shape)
        params[name] = E.parameter(data)
    return params


# ---------------------------------------------------------------- constants


@dataclass
class PreparedInputs:
    """Parameter-free quantities of a batch: raw inputs, invariants, Gram frame."""

    x: np.ndarray  # (N, L, D0)
    phi: np.ndarray  # (N, L, 9)
    harmonics: np.ndarray  # (L, 2K), K may be 0
    frame_outer: np.ndarray  # (N, 3, 9): row i is vec(u_i u_i^T)

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, idx):
        return PreparedInputs(self.x[idx], self.phi[idx], self.harmonics, self.frame_outer[idx])


def frame_outer_products(U):
    """``(N, 3, 3)`` eigenframes -> ``(N, 3, 9)`` flattened projectors ``u_i u_i^T``."""
    return np.einsum("nai,nbi->niab", U, U).reshape(U.shape[0], 3, 9)


def prepare_inputs(x, config):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (config.seq_len, config.n_inputs):
        raise ShapeMismatch(
            f"inputs {x.shape} do not match (N, {config.seq_len}, {config.n_inputs})"
        )
    triads = x[..., :N_TRIAD]
    phi = phi_from_triads(triads)
    if config.use_harmonics:
        harm = compute_harmonics(config.seq_len, config.sample_rate, config.frequencies)
    else:
        harm = np.zeros((config.seq_len, 0))
    U = gram_spectra(triads)["U"] if config.use_spd else np.zeros((x.shape[0], 3, 3))
    return PreparedInputs(x, phi, harm, frame_outer_products(U))


# ---------------------------------------------------------------- stages


def linear(x, W, b):
    return E.add(E.matmul(x, E.transpose(W)), b)


def state_and_embeddings(Z, W, b):
    """Variate tokens ``(B, D_aug, d)`` and their mean over invariant channels ``(B, d)``."""
    emb = linear(E.transpose(E.as_tensor(Z), (0, 2, 1)), W, b)
    return emb, E.mean(emb[:, N_TRIAD:, :], axis=1)


def spd_scales(s, params, epsilon_floor):
    hidden = E.tanh(linear(s, params["scale.W1"], params["scale.b1"]))
    raw = linear(hidden, params["scale.W2"], params["scale.b2"])
    return E.add(E.softplus(raw), epsilon_floor)


def spd_modulate(triads, sigma, frame_outer):
    """Apply ``M = sum_i sigma_i u_i u_i^T`` to ``(B, L, 9)`` triads."""
    n, L = triads.shape[0], triads.shape[1]
    M = E.reshape(E.matmul(E.reshape(sigma, (n, 1, 3)), frame_outer), (n, 3, 3))
    vecs = E.reshape(triads, (n, 3 * L, 3))
    # M is symmetric, so row vectors times M equal (M v)^T.
    return E.reshape(E.matmul(vecs, M), (n, L, N_TRIAD)), M


def embed_patches(patches, W_patch, b_patch):
    """Shared affine map of every patch ``(..., P)`` to a ``d``-vector."""
    return linear(patches, W_patch, b_patch)


def film_parameters(s, W_film, b_film):
    """``(gamma, beta)`` with ``gamma = 1 + tanh(gamma_hat)`` in ``(0, 2)``."""
    out = linear(s, W_film, b_film)
    d = out.shape[-1] // 2
    return E.add(E.tanh(out[:, :d]), 1.0), out[:, d:]


def film_condition(tokens, gamma, beta, n_rotating=N_TRIAD):
    """Modulate tokens of the first ``n_rotating`` channels; others pass through untouched.

    ``tokens`` is ``(B, D_aug, M_p, d)``; ``gamma``/``beta`` are ``(B, d)``.
    """
    n, _, mp, d = tokens.shape
    if gamma.shape != (n, d) or beta.shape != (n, d):
        raise ShapeMismatch(f"FiLM params {gamma.shape}/{beta.shape} vs tokens {tokens.shape}")
    g = E.expand(E.reshape(gamma, (n, 1, 1, d)), (n, n_rotating, mp, d))
    b = E.expand(E.reshape(beta, (n, 1, 1, d)), (n, n_rotating, mp, d))
    rotating = E.add(E.mul(tokens[:, :n_rotating], g), b)
    return E.concat([rotating, tokens[:, n_rotating:]], axis=1)


def add_positional(tokens, channel_table, patch_table):
    c, d = channel_table.shape
    mp = patch_table.shape[0]
    if tokens.shape[1:] != (c, mp, d):
        raise ShapeMismatch(f"tokens {tokens.shape} vs positional tables ({c}, {mp}, {d})")
    pos = E.add(E.expand(E.reshape(channel_table, (c, 1, d)), (c, mp, d)), patch_table)
    return E.add(tokens, pos)


def attention(h, params, prefix, n_heads, trace=None):
    n, N, d = h.shape
    dh = d // n_heads

    def heads(name):
        t = linear(h, params[prefix + f"attn.W{name}"], params[prefix + f"attn.b{name}"])
        return E.transpose(E.reshape(t, (n, N, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = E.mul(E.matmul(q, E.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    weights = E.softmax(scores, axis=-1)
    if trace is not None:
        trace.setdefault("attention", []).append(weights.data)
    out = E.reshape(E.transpose(E.matmul(weights, v), (0, 2, 1, 3)), (n, N, d))
    return linear(out, params[prefix + "attn.Wo"], params[prefix + "attn.bo"])


def encoder_block(T, params, i, config, trace=None):
    p = f"enc.{i}."
    act = ACTIVATIONS[config.ff_activation]
    h = E.add(E.mul(E.layer_norm(T, eps=config.ln_eps), params[p + "ln1.g"]), params[p + "ln1.b"])
    T = E.add(T, attention(h, params, p, config.n_heads, trace))
    h = E.add(E.mul(E.layer_norm(T, eps=config.ln_eps), params[p + "ln2.g"]), params[p + "ln2.b"])
    f = linear(act(linear(h, params[p + "ff.W1"], params[p + "ff.b1"])), params[p + "ff.W2"], params[p + "ff.b2"])
    return E.add(T, f)


def encode(tokens, params, config, trace=None):
    """Self-attention over the flattened ``(D_aug * M_p)`` grid; reshaped back to the grid."""
    n, c, mp, d = tokens.shape
    T = E.reshape(tokens, (n, c * mp, d))
    for i in range(config.n_layers):
        T = encoder_block(T, params, i, config, trace)
    return E.reshape(T, (n, c, mp, d))


def project_horizon(H, W_head, b_head):
    """Flatten each channel's patches (patch-major) and apply the shared head."""
    n, c, mp, d = H.shape
    return linear(E.reshape(H, (n, c, mp * d)), W_head, b_head)


# ---------------------------------------------------------------- model


class NavFormer:
    def __init__(self, config, params=None):
        self.config = config
        self.params = init_params(config) if params is None else _as_params(params, config)

    def forward(self, inputs, trace=None):
        """Horizon forecasts for every augmented channel, ``(B, D_aug, L_pred)``.

        ``inputs`` is a :class:`PreparedInputs` or a raw ``(B, L, D0)`` array.
        If ``trace`` is a dict it collects intermediate values.
        """
        cfg, p = self.config, self.params
        if not isinstance(inputs, PreparedInputs):
            inputs = prepare_inputs(inputs, cfg)
        n, L = inputs.x.shape[:2]
        harm = np.broadcast_to(inputs.harmonics, (n,) + inputs.harmonics.shape)
        raw_triads = inputs.x[..., :N_TRIAD]
        rest = np.concatenate([inputs.x[..., N_TRIAD:], inputs.phi, harm], axis=-1)

        Z = np.concatenate([raw_triads, rest], axis=-1)
        _, s = state_and_embeddings(Z, p["variate.W"], p["variate.b"])

        if cfg.use_spd:
            sigma = spd_scales(s, p, cfg.epsilon_floor)
            triads, M = spd_modulate(E.as_tensor(raw_triads), sigma, inputs.frame_outer)
        else:
            sigma = M = None
            triads = E.as_tensor(raw_triads)

        Zbar = E.concat([triads, E.as_tensor(rest)], axis=-1)
        idx = patch_indices(L, cfg.patch_len, cfg.stride)
        patches = E.take(E.transpose(Zbar, (0, 2, 1)), idx.ravel(), axis=2)
        patches = E.reshape(patches, (n, cfg.d_aug) + idx.shape)
        tokens = embed_patches(patches, p["patch.W"], p["patch.b"])

        if cfg.use_film:
            gamma, beta = film_parameters(s, p["film.W"], p["film.b"])
            tokens = film_condition(tokens, gamma, beta)
        else:
            gamma = beta = None
        tokens = add_positional(tokens, p["pos.channel"], p["pos.patch"])
        H = encode(tokens, p, cfg, trace)
        out = project_horizon(H, p["head.W"], p["head.b"])

        if trace is not None:
            trace.update(
                s=s.data, Z=Z, sigma=None if sigma is None else sigma.data,
                M=None if M is None else M.data, triads=triads.data,
                gamma=None if gamma is None else gamma.data,
                beta=None if beta is None else beta.data,
                tokens=tokens.data, H=H.data,
            )
        return out

    def forecast(self, inputs, trace=None):
        """Target-channel forecasts ``(B, L_pred)`` as a Tensor."""
        return self.forward(inputs, trace)[:, self.config.target_channel, :]

    def loss(self, inputs, future):
        """MSE on the target channel; optional auxiliary MSE on telemetry channels.

        ``future`` is ``(B, L_pred, D0)``: all raw channels over the horizon.
        """
        cfg = self.config
        out = self.forward(inputs)
        target = future[:, :, cfg.target_channel]
        loss = E.mse(out[:, cfg.target_channel, :], target)
        if cfg.aux_loss_weight > 0:
            aux = E.mse(out[:, N_TRIAD:cfg.n_inputs, :],
                        np.swapaxes(future[:, :, N_TRIAD:], 1, 2))
            loss = E.add(loss, E.mul(aux, cfg.aux_loss_weight))
        return loss

    def predict(self, inputs, batch_size=256):
        """Target forecasts as a numpy array, evaluated without building a graph."""
        if not isinstance(inputs, PreparedInputs):
            inputs = prepare_inputs(inputs, self.config)
        outs = []
        with E.no_grad():
            for start in range(0, len(inputs), batch_size):
                chunk = inputs[slice(start, start + batch_size)]
                outs.append(self.forecast(chunk).data)
        if not outs:
            return np.zeros((0, self.config.pred_len))
        return np.concatenate(outs, axis=0)

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def copy(self):
        return NavFormer(self.config, self.state_dict())

    def with_config(self, **changes):
        """Same parameters under a modified config (params the new config lacks are dropped)."""
        cfg = replace(self.config, **changes)
        wanted = param_shapes(cfg)
        return NavFormer(cfg, {k: v for k, v in self.state_dict().items() if k in wanted})


def _as_params(params, config):
    expected = param_shapes(config)
    missing = set(expected) - set(params)
    if missing:
        raise ShapeMismatch(f"missing parameters: {sorted(missing)}")
    out = {}
    for name, shape in expected.items():
        arr = np.array(getattr(params[name], "data", params[name]), dtype=np.float64)
        if arr.shape != shape:
            raise ShapeMismatch(f"parameter {name} has shape {arr.shape}, expected {shape}")
        out[name] = E.parameter(arr)
    return out


def navformer_forward(window, model):
    """Forecast ``(L_pred,)`` for a single :class:`~navformer.features.TriadWindow`."""
    return model.predict(window.x[None])[0]
