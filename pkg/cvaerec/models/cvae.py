"""
Conditioned VAE network.

Architecture: [m + s -> h -> d -> h -> m] with tanh hidden layers, linear
mean / log-variance heads and a linear decoder output. The rating part of the
input is L2-normalized and passed through dropout; the condition block is
concatenated afterwards, untouched.

All operations work on batches (rows = examples); a single example is a
batch of one. Gradients are derived by hand and checked against central
differences in the test suite.
"""

import logging
from dataclasses import dataclass, fields
from typing import Dict, Iterator, Optional, Tuple, Union

import numpy as np

from cvaerec.core.exceptions import DimensionError, EmptyTargetError
from cvaerec.services.data_service import ConditionVector, ItemConditionMatrix
from cvaerec.utils import ndmath
from cvaerec.utils.ndmath import RngStream

logger = logging.getLogger(__name__)

PARAM_ORDER = (
    "enc_w1", "enc_b1",
    "enc_w_mu", "enc_b_mu",
    "enc_w_logvar", "enc_b_logvar",
    "dec_w1", "dec_b1",
    "dec_w2", "dec_b2",
)

ConditionsLike = Union[np.ndarray, ConditionVector, int, None]


@dataclass(frozen=True)
class ModelDims:
    m: int
    s: int
    h: int = 600
    d: int = 200

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        m, s, h, d = self.m, self.s, self.h, self.d
        return {
            "enc_w1": (m + s, h), "enc_b1": (h,),
            "enc_w_mu": (h, d), "enc_b_mu": (d,),
            "enc_w_logvar": (h, d), "enc_b_logvar": (d,),
            "dec_w1": (d, h), "dec_b1": (h,),
            "dec_w2": (h, m), "dec_b2": (m,),
        }


@dataclass
class ModelParams:
    """Encoder (phi) and decoder (theta) weights"""
    enc_w1: np.ndarray
    enc_b1: np.ndarray
    enc_w_mu: np.ndarray
    enc_b_mu: np.ndarray
    enc_w_logvar: np.ndarray
    enc_b_logvar: np.ndarray
    dec_w1: np.ndarray
    dec_b1: np.ndarray
    dec_w2: np.ndarray
    dec_b2: np.ndarray
    s: int = 0

    def __post_init__(self):
        m = self.dec_w2.shape[1]
        expected = ModelDims(m, self.s, self.enc_b1.shape[0], self.enc_b_mu.shape[0]).shapes()
        for name in PARAM_ORDER:
            actual = getattr(self, name).shape
            if actual != expected[name]:
                raise DimensionError(f"{name} has shape {actual}, expected {expected[name]}")

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.dec_w2.shape[1], self.s, self.enc_b1.shape[0], self.enc_b_mu.shape[0])

    @property
    def dtype(self) -> np.dtype:
        return self.enc_w1.dtype

    @classmethod
    def initialize(cls, dims: ModelDims, rng: RngStream, dtype=np.float64) -> "ModelParams":
        """Xavier-uniform weights, N(0, 0.001^2) biases"""
        values = {}
        for name, shape in dims.shapes().items():
            if len(shape) == 2:
                values[name] = ndmath.xavier_uniform(shape[0], shape[1], rng, dtype)
            else:
                values[name] = ndmath.bias_init(shape[0], rng, dtype=dtype)
        return cls(s=dims.s, **values)

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name in PARAM_ORDER:
            yield name, getattr(self, name)

    def as_dict(self) -> Dict[str, np.ndarray]:
        return dict(self.items())

    def copy(self) -> "ModelParams":
        return ModelParams(s=self.s, **{name: value.copy() for name, value in self.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for _, v in self.items())


@dataclass
class GaussianLatent:
    mu: np.ndarray
    logvar: np.ndarray
    eps: np.ndarray
    z: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar)


@dataclass
class LossBreakdown:
    """Batch means; total = neg_ll + beta * kl"""
    neg_ll: float
    kl: float
    beta: float

    @property
    def total(self) -> float:
        return self.neg_ll + self.beta * self.kl

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.neg_ll) and np.isfinite(self.kl))


@dataclass
class ForwardCache:
    x: np.ndarray
    dropout_mask: np.ndarray
    hidden: np.ndarray
    latent: GaussianLatent
    dec_hidden: np.ndarray
    log_probs: np.ndarray
    target: np.ndarray
    target_mass: np.ndarray
    beta: float
    per_example_nll: np.ndarray
    per_example_kl: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.x.shape[0]


@dataclass
class NoiseDraw:
    """Externally fixed randomness for one forward pass"""
    dropout_mask: Optional[np.ndarray] = None
    eps: Optional[np.ndarray] = None


def conditioned_nll(log_probs: np.ndarray, ratings: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """
    Per-example -sum_i mask_i r_ui log pi_i. The softmax behind log_probs
    normalizes over all items even where the mask drops terms.
    """
    target = mask * ratings
    mass = np.sum(target, axis=-1)
    if np.any(mass <= 0):
        empty = int(np.count_nonzero(mass <= 0))
        raise EmptyTargetError(f"{empty} example(s) have no rated item satisfying their condition")
    return -np.sum(target * log_probs, axis=-1)


def kl_divergence(latent: GaussianLatent) -> np.ndarray:
    """Per-example KL(N(mu, sigma^2) || N(0, I))"""
    mu, logvar = latent.mu, latent.logvar
    return -0.5 * np.sum(1.0 + logvar - mu * mu - np.exp(logvar), axis=-1)


def condition_mask(conditions: np.ndarray, item_conditions: Optional[ItemConditionMatrix], m: int,
                   dtype=np.float64) -> np.ndarray:
    """
    Rows of item-satisfies-condition indicators. Unconditioned rows (index -1)
    get all ones, which is what makes them train exactly like Mult-VAE.
    """
    conditions = np.asarray(conditions, dtype=np.int64).reshape(-1)
    mask = np.ones((len(conditions), m), dtype=dtype)
    active = conditions >= 0
    if np.any(active):
        if item_conditions is None:
            raise DimensionError("conditioned examples need an item-condition matrix")
        if item_conditions.m != m:
            raise DimensionError(f"item-condition matrix covers {item_conditions.m} items, model has {m}")
        mask[active] = item_conditions.membership[:, conditions[active]].T.astype(dtype)
    return mask


class ConditionedVAE:
    """C-VAE; with s = 0 it is exactly Mult-VAE"""

    def __init__(self, params: ModelParams, dropout_p: float = 0.5, normalize_before_dropout: bool = True):
        if not 0.0 <= dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {dropout_p}")
        self.params = params
        self.dropout_p = dropout_p
        self.normalize_before_dropout = normalize_before_dropout

    @classmethod
    def create(cls, m: int, s: int, hidden_dim: int, latent_dim: int, rng: RngStream,
               dropout_p: float = 0.5, normalize_before_dropout: bool = True, dtype=np.float64) -> "ConditionedVAE":
        params = ModelParams.initialize(ModelDims(m, s, hidden_dim, latent_dim), rng, dtype)
        return cls(params, dropout_p, normalize_before_dropout)

    @property
    def dims(self) -> ModelDims:
        return self.params.dims

    @property
    def dtype(self) -> np.dtype:
        return self.params.dtype

    # -- input --------------------------------------------------------------

    def _condition_indices(self, conditions: ConditionsLike, batch: int) -> np.ndarray:
        if conditions is None:
            return np.full(batch, -1, dtype=np.int64)
        if isinstance(conditions, ConditionVector):
            return np.full(batch, conditions.index, dtype=np.int64)
        indices = np.asarray(conditions, dtype=np.int64).reshape(-1)
        if indices.size == 1 and batch > 1:
            indices = np.full(batch, int(indices[0]), dtype=np.int64)
        if len(indices) != batch:
            raise DimensionError(f"{len(indices)} conditions for a batch of {batch}")
        return indices

    def condition_block(self, indices: np.ndarray) -> np.ndarray:
        s = self.dims.s
        block = np.zeros((len(indices), s), dtype=self.dtype)
        if s:
            active = indices >= 0
            if np.any(indices[active] >= s):
                raise DimensionError(f"condition index out of range for s={s}")
            block[np.flatnonzero(active), indices[active]] = 1.0
        return block

    def build_input(self, ratings: np.ndarray, conditions: ConditionsLike = None, rng: Optional[RngStream] = None,
                    training: bool = False, dropout_mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """
        Encoder input [dropout(normalize(r)) | c] and the dropout mask used.
        A precomputed dropout_mask replaces the random draw.
        """
        r = np.atleast_2d(np.asarray(ratings, dtype=self.dtype))
        if r.shape[1] != self.dims.m:
            raise DimensionError(f"rating vectors have {r.shape[1]} items, model has {self.dims.m}")
        indices = self._condition_indices(conditions, r.shape[0])

        if dropout_mask is not None:
            if dropout_mask.shape != r.shape:
                raise DimensionError(f"dropout mask {dropout_mask.shape} does not match ratings {r.shape}")
            mask = dropout_mask.astype(self.dtype)
        else:
            _, mask = ndmath.dropout_forward(r, self.dropout_p, rng, training)
        if self.normalize_before_dropout:
            rating_block = ndmath.l2_normalize(r) * mask
        else:
            rating_block = ndmath.l2_normalize(r * mask)
        x = np.concatenate([rating_block, self.condition_block(indices)], axis=1)
        return x, mask

    # -- network ------------------------------------------------------------

    def encode(self, x: np.ndarray) -> Tuple[GaussianLatent, np.ndarray]:
        """Deterministic encoder: returns the latent (eps = 0, z = mu) and the hidden layer"""
        p = self.params
        hidden = ndmath.tanh_forward(ndmath.matmul(x, p.enc_w1) + p.enc_b1)
        mu = ndmath.matmul(hidden, p.enc_w_mu) + p.enc_b_mu
        logvar = ndmath.matmul(hidden, p.enc_w_logvar) + p.enc_b_logvar
        return GaussianLatent(mu=mu, logvar=logvar, eps=np.zeros_like(mu), z=mu), hidden

    def sample_z(self, latent: GaussianLatent, rng: Optional[RngStream], training: bool,
                 eps: Optional[np.ndarray] = None) -> np.ndarray:
        """Reparameterized draw in training, the mean at inference; updates latent in place"""
        if not training:
            latent.eps = np.zeros_like(latent.mu)
            latent.z = latent.mu
            return latent.z
        if eps is None:
            if rng is None:
                raise ValueError("training-mode sampling needs an RngStream")
            eps = rng.standard_normal(latent.mu.shape, dtype=self.dtype)
        elif eps.shape != latent.mu.shape:
            raise DimensionError(f"eps shape {eps.shape} does not match latent {latent.mu.shape}")
        latent.eps = eps
        latent.z = latent.mu + eps * latent.std
        return latent.z

    def decode(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Unnormalized item scores and the decoder hidden layer"""
        p = self.params
        dec_hidden = ndmath.tanh_forward(ndmath.matmul(np.atleast_2d(z), p.dec_w1) + p.dec_b1)
        logits = ndmath.matmul(dec_hidden, p.dec_w2) + p.dec_b2
        return logits, dec_hidden

    def draw_noise(self, batch: int, rng: RngStream) -> NoiseDraw:
        """Dropout mask and eps for a batch, drawn in the same order forward_loss would"""
        _, mask = ndmath.dropout_forward(np.ones((batch, self.dims.m), dtype=self.dtype), self.dropout_p, rng, True)
        eps = rng.standard_normal((batch, self.dims.d), dtype=self.dtype)
        return NoiseDraw(dropout_mask=mask, eps=eps)

    # -- loss ---------------------------------------------------------------

    def forward_loss(self, ratings: np.ndarray, conditions: ConditionsLike,
                     item_conditions: Optional[ItemConditionMatrix], beta: float,
                     rng: Optional[RngStream] = None, training: bool = True,
                     noise: Optional[NoiseDraw] = None) -> Tuple[LossBreakdown, Optional[ForwardCache]]:
        """Mean over the batch of conditioned_nll + beta * KL"""
        noise = noise or NoiseDraw()
        r = np.atleast_2d(np.asarray(ratings, dtype=self.dtype))
        indices = self._condition_indices(conditions, r.shape[0])
        if self.dims.s == 0:
            indices = np.full(r.shape[0], -1, dtype=np.int64)

        # draw order: dropout mask, then eps
        x, drop_mask = self.build_input(r, indices, rng, training, noise.dropout_mask)
        latent, hidden = self.encode(x)
        self.sample_z(latent, rng, training, noise.eps)
        logits, dec_hidden = self.decode(latent.z)
        log_probs = ndmath.log_softmax(logits)

        mask = condition_mask(indices, item_conditions, self.dims.m, self.dtype)
        nll = conditioned_nll(log_probs, r, mask)
        kl = kl_divergence(latent)
        breakdown = LossBreakdown(neg_ll=float(np.mean(nll)), kl=float(np.mean(kl)), beta=float(beta))
        if not training:
            return breakdown, None
        target = mask * r
        cache = ForwardCache(
            x=x, dropout_mask=drop_mask, hidden=hidden, latent=latent, dec_hidden=dec_hidden,
            log_probs=log_probs, target=target, target_mass=np.sum(target, axis=1), beta=float(beta),
            per_example_nll=nll, per_example_kl=kl,
        )
        return breakdown, cache

    def backward(self, cache: ForwardCache) -> ModelParams:
        """Gradients of the batch-mean total loss with respect to every parameter"""
        p = self.params
        batch = cache.batch_size
        latent = cache.latent
        beta = cache.beta

        probs = np.exp(cache.log_probs)
        d_logits = (cache.target_mass[:, None] * probs - cache.target) / batch

        g_dec_w2 = ndmath.matmul_tn(cache.dec_hidden, d_logits)
        g_dec_b2 = np.sum(d_logits, axis=0)
        d_dec_a = ndmath.tanh_backward(cache.dec_hidden, ndmath.matmul_nt(d_logits, p.dec_w2))
        g_dec_w1 = ndmath.matmul_tn(latent.z, d_dec_a)
        g_dec_b1 = np.sum(d_dec_a, axis=0)
        d_z = ndmath.matmul_nt(d_dec_a, p.dec_w1)

        std = latent.std
        d_mu = d_z + (beta / batch) * latent.mu
        d_logvar = d_z * latent.eps * std * 0.5 + (beta / batch) * 0.5 * (np.exp(latent.logvar) - 1.0)

        g_enc_w_mu = ndmath.matmul_tn(cache.hidden, d_mu)
        g_enc_b_mu = np.sum(d_mu, axis=0)
        g_enc_w_logvar = ndmath.matmul_tn(cache.hidden, d_logvar)
        g_enc_b_logvar = np.sum(d_logvar, axis=0)
        d_hidden = ndmath.matmul_nt(d_mu, p.enc_w_mu) + ndmath.matmul_nt(d_logvar, p.enc_w_logvar)
        d_enc_a = ndmath.tanh_backward(cache.hidden, d_hidden)
        g_enc_w1 = ndmath.matmul_tn(cache.x, d_enc_a)
        g_enc_b1 = np.sum(d_enc_a, axis=0)

        return ModelParams(
            enc_w1=g_enc_w1, enc_b1=g_enc_b1,
            enc_w_mu=g_enc_w_mu, enc_b_mu=g_enc_b_mu,
            enc_w_logvar=g_enc_w_logvar, enc_b_logvar=g_enc_b_logvar,
            dec_w1=g_dec_w1, dec_b1=g_dec_b1,
            dec_w2=g_dec_w2, dec_b2=g_dec_b2,
            s=p.s,
        )

    # -- inference ----------------------------------------------------------

    def latent_means(self, ratings: np.ndarray, conditions: ConditionsLike = None) -> np.ndarray:
        x, _ = self.build_input(ratings, conditions, None, training=False)
        latent, _ = self.encode(x)
        return latent.mu

    def predict_scores(self, ratings: np.ndarray, conditions: ConditionsLike = None) -> np.ndarray:
        """Raw item scores at inference (no dropout, z = mu); 1-D in, 1-D out"""
        single = np.asarray(ratings).ndim == 1
        mu = self.latent_means(ratings, conditions if self.dims.s else None)
        logits, _ = self.decode(mu)
        return logits[0] if single else logits

    def score_batch(self, foldin: np.ndarray, conditions: np.ndarray, positions: Optional[np.ndarray] = None) -> np.ndarray:
        return self.predict_scores(foldin, conditions)


def parameter_count(dims: ModelDims) -> int:
    return int(sum(np.prod(shape) for shape in dims.shapes().values()))


def gradient_norms(grads: ModelParams) -> Dict[str, float]:
    return {f.name: float(np.linalg.norm(getattr(grads, f.name))) for f in fields(grads) if f.name in PARAM_ORDER}
