"""Robustness and generalization certificates for trained networks.

Norm products are taken over the weighted layers. Convolutional layers are
measured through their explicit operator matrices; transposed convolutions
share the norms of the forward operator they transpose. Activation Lipschitz
constants multiply into the products (they are all 1 for the activations
used by the reference network).
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .linop import ConvergenceError, build_conv_operator, frobenius_norm, spectral_norm
from .network import NetworkParams, NetworkSpec, predict
from .parallel import parallel_map
from .train import per_sample_loss

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# norm products

@dataclass
class NormProducts:
    frob_product: float  # operator Frobenius norms, the certified variant
    frob_kernel_product: float  # raw kernel Frobenius norms, reported for comparison
    spec_product: float
    activation_product: float
    layer_frob: list = field(default_factory=list)
    layer_frob_kernel: list = field(default_factory=list)
    layer_spec: list = field(default_factory=list)


def layer_operator(weight, layer) -> np.ndarray:
    """Matrix of a layer's linear part (up to transposition, which keeps every norm)."""
    if layer.kind == "dense":
        return np.asarray(weight, dtype=np.float64)
    return build_conv_operator(weight, layer.geometry)


def operator_spectral_norm(op, **kwargs) -> float:
    """Power-iteration spectral norm, run on the Gram matrix of the short side.

    ``sigma_max(A) = sqrt(lambda_max(A A^T))``; iterating on the smaller
    Gram matrix is much cheaper for the wide operators of strided layers.
    Trained convolution operators can have nearly repeated top singular
    values, which stalls power iteration; in that case the dense symmetric
    eigensolver gives the exact answer and a warning is logged.
    """
    op = np.asarray(op, dtype=np.float64)
    if op.size == 0:
        return 0.0
    gram = op @ op.T if op.shape[0] <= op.shape[1] else op.T @ op
    try:
        return math.sqrt(spectral_norm(gram, **kwargs))
    except ConvergenceError as err:
        log.warning("power iteration stalled (%s); using the dense eigensolver", err)
        return math.sqrt(max(float(np.linalg.eigvalsh(gram)[-1]), 0.0))


def weight_norm_products(params: NetworkParams, spec: NetworkSpec, spectral=True) -> NormProducts:
    """Per-layer and total norms; ``spectral=False`` skips the power iterations (reported as nan)."""
    if not all(np.all(np.isfinite(w)) for w in params.weights):
        raise ValueError("parameters contain non-finite values")
    frob, frob_k, sig, act = [], [], [], 1.0
    for w, layer in zip(params.weights, spec.layers):
        op = layer_operator(w, layer)
        frob.append(frobenius_norm(op))
        frob_k.append(frobenius_norm(w))
        sig.append(operator_spectral_norm(op) if spectral else math.nan)
        act *= layer.activation_lipschitz
    return NormProducts(float(np.prod(frob)) * act, float(np.prod(frob_k)) * act,
                        float(np.prod(sig)) * act, act, frob, frob_k, sig)


# ---------------------------------------------------------------------------
# robustness bounds

def rb_mae_bound(frob_product, eta) -> float:
    """Certified bound on the change of MAE loss for noise of norm at most ``eta``."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    return float(frob_product) * float(eta)


def rb_mse_bound(rb_mae, eta, d_in, a, lipschitz):
    """MSE robustness bound in two forms: ``(stated, solved)``.

    ``stated`` is ``L * (eta / sqrt(d_in)) * (rb_mae + 2a)``. ``solved`` is the
    fixed point of ``RB <= c (RB + 2a)`` with ``c = L * eta / sqrt(d_in)``,
    i.e. ``2ac / (1 - c)``, and ``inf`` when ``c >= 1``.
    """
    if d_in < 1 or a < 0 or lipschitz < 0 or eta < 0:
        raise ValueError("need d_in >= 1 and non-negative a, lipschitz, eta")
    c = lipschitz * eta / math.sqrt(d_in)
    stated = c * (rb_mae + 2 * a)
    solved = 2 * a * c / (1 - c) if c < 1 else math.inf
    return stated, solved


def cor2_condition(pred_noisy, pred_clean, target) -> float:
    """Fraction of elements with ``|f(x+n) + f(x) - 2y| >= 1``."""
    p, q, t = (np.asarray(a, dtype=np.float64) for a in (pred_noisy, pred_clean, target))
    if not p.shape == q.shape == t.shape:
        raise ValueError(f"shape mismatch: {p.shape}, {q.shape}, {t.shape}")
    if p.size == 0:
        return 0.0
    return float(np.mean(np.abs(p + q - 2 * t) >= 1))


def fact3_witness(x1, x2=None):
    """Instance where the squared loss is not Lipschitz in its first argument.

    With ``x_hat = 2 x1`` and the squared l2 distance ``L``, returns
    ``(lhs, rhs)`` for ``|L(x1, x_hat) - L(x2, x_hat)| <= L(x1, x2)``; the
    default ``x2 = 0`` gives ``lhs = 3 |x1|^2 > rhs = |x1|^2``.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.zeros_like(x1) if x2 is None else np.asarray(x2, dtype=np.float64)
    x_hat = 2 * x1

    def sq(a, b):
        return float(np.sum((a - b) ** 2))

    return abs(sq(x1, x_hat) - sq(x2, x_hat)), sq(x1, x2)


# ---------------------------------------------------------------------------
# empirical loss gain

@dataclass(frozen=True)
class NoiseSpec:
    """Exactly one of an l2 budget ``eta``, an ``snr_db`` level, or clean data."""
    eta: float | None = None
    snr_db: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.eta is not None and self.snr_db is not None:
            raise ValueError("set either eta or snr_db, not both")
        if self.eta is not None and self.eta < 0:
            raise ValueError("eta must be non-negative")

    @property
    def clean(self):
        return self.eta is None and (self.snr_db is None or math.isinf(self.snr_db))


def draw_noise(x, noise: NoiseSpec, seed, index) -> np.ndarray:
    """Noise for draw ``index``; depends only on ``(seed, index)`` and ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if noise.clean:
        return np.zeros_like(x)
    rng = np.random.default_rng([int(seed), int(index)])
    g = rng.standard_normal(x.shape)
    if noise.eta is not None:
        norm = np.linalg.norm(g)
        radius = noise.eta * rng.random() ** (1.0 / x.size)
        return g * (radius / norm) if norm > 0 else g * 0.0
    power = np.mean(x * x)
    if power == 0:
        raise ValueError("cannot scale SNR noise to a zero-power signal")
    return g * math.sqrt(power / 10 ** (noise.snr_db / 10))


@dataclass
class LossGain:
    max: float
    mean: float
    gains: np.ndarray
    noise_norms: np.ndarray
    items: np.ndarray


class _GainChunk:
    def __init__(self, params, spec, x, y, loss_kind, noise, seed):
        self.params, self.spec, self.x, self.y = params, spec, x, y
        self.loss_kind, self.noise, self.seed = loss_kind, noise, seed

    def __call__(self, draws):
        items = draws % len(self.x)
        n = np.stack([draw_noise(self.x[i], self.noise, self.seed, d) for i, d in zip(items, draws)])
        xc = self.x[items]
        clean = per_sample_loss(predict(self.params, self.spec, xc), self.y[items], self.loss_kind)
        noisy = per_sample_loss(predict(self.params, self.spec, xc + n), self.y[items], self.loss_kind)
        return np.abs(noisy - clean), np.linalg.norm(n.reshape(len(n), -1), axis=1)


def empirical_loss_gain(params, spec, test_set, loss_kind, noise: NoiseSpec, n_draws, seed=None,
                        chunk=64, workers=1) -> LossGain:
    """Monte Carlo ``|loss(x + n) - loss(x)|`` over ``n_draws`` draws.

    Draw ``d`` perturbs test item ``d mod len(test_set)`` with noise seeded by
    ``(seed, d)``; draws are evaluated in fixed chunks so the values do not
    depend on the worker count.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    seed = noise.seed if seed is None else seed
    x, y = (np.asarray(a, dtype=np.float64) for a in test_set)
    draws = np.arange(n_draws)
    chunks = [draws[lo:lo + chunk] for lo in range(0, n_draws, chunk)]
    parts = parallel_map(_GainChunk(params, spec, x, y, loss_kind, noise, seed), chunks, workers)
    gains = np.concatenate([p[0] for p in parts])
    norms = np.concatenate([p[1] for p in parts])
    return LossGain(float(gains.max()), float(gains.mean()), gains, norms, draws % len(x))


# ---------------------------------------------------------------------------
# reports

def _text(obj) -> str:
    lines = []
    for k, v in asdict(obj).items():
        lines.append(f"{k} = {v!r}" if isinstance(v, str) else f"{k} = {v}")
    return "\n".join(lines) + "\n"


def _csv_row(obj) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(asdict(obj).values())
    return buf.getvalue()


@dataclass
class BoundReport:
    eta: float
    frob_product: float
    spec_product: float
    rb_mae: float
    rb_mse_stated: float
    rb_mse_solved: float
    lipschitz_upper: float
    a: float
    d_in: int
    empirical_gain_max: float
    empirical_gain_mean: float
    n_draws: int
    violation: bool

    def to_text(self) -> str:
        return _text(self)

    def csv_header(self) -> str:
        return ",".join(asdict(self)) + "\n"

    def to_csv_row(self) -> str:
        return _csv_row(self)


def certify(params, spec, test_set, eta, n_draws, seed=0, loss_kind="mae", norms=None,
            workers=1) -> BoundReport:
    """Evaluate both robustness bounds at ``eta`` and check them by Monte Carlo.

    ``a`` is the largest clean per-sample test loss. ``violation`` is set when
    an observed MAE gain exceeds the MAE bound (it cannot happen unless
    something is broken).
    """
    norms = norms or weight_norm_products(params, spec)
    x, y = (np.asarray(v, dtype=np.float64) for v in test_set)
    d_in = int(np.prod(spec.input_shape))
    a = float(np.max(per_sample_loss(predict(params, spec, x), y, loss_kind)))
    rb_mae = rb_mae_bound(norms.frob_product, eta)
    stated, solved = rb_mse_bound(rb_mae, eta, d_in, a, norms.spec_product)
    gain = empirical_loss_gain(params, spec, (x, y), loss_kind, NoiseSpec(eta=eta, seed=seed),
                               n_draws, workers=workers)
    violation = loss_kind == "mae" and gain.max > rb_mae
    if violation:
        log.error("robustness bound violated: gain %.6g > bound %.6g at eta %g", gain.max, rb_mae, eta)
    return BoundReport(float(eta), norms.frob_product, norms.spec_product, rb_mae, stated, solved,
                       norms.spec_product, a, d_in, gain.max, gain.mean, int(n_draws), bool(violation))


# ---------------------------------------------------------------------------
# covering numbers and the generalization bound

def pairwise_distances(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    sq = np.sum(p * p, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (p @ p.T)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def greedy_covering_number(points, radius):
    """Greedy radius-cover of a finite point set under the l2 distance.

    The first anchor is the point farthest from the centroid; afterwards the
    anchor is the uncovered point farthest from all chosen centers. Each
    anchor is covered by the candidate (within ``radius`` of it) that covers
    the most still-uncovered points. Returns ``(K, center_indices)``; the
    result is always a valid cover, hence an upper estimate of the minimal one.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    p = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    if len(p) == 0:
        raise ValueError("need at least one point")
    dist = pairwise_distances(p)
    within = dist <= radius
    uncovered = np.ones(len(p), dtype=bool)
    nearest = np.full(len(p), np.inf)
    anchor = int(np.argmax(np.linalg.norm(p - p.mean(axis=0), axis=1)))
    centers = []
    while True:
        cand = np.nonzero(within[anchor])[0]
        reach = within[np.ix_(cand, uncovered.nonzero()[0])].sum(axis=1)
        c = int(cand[np.argmax(reach)])
        centers.append(c)
        uncovered &= ~within[c]
        nearest = np.minimum(nearest, dist[c])
        if not uncovered.any():
            return len(centers), centers
        anchor = int(np.flatnonzero(uncovered)[np.argmax(nearest[uncovered])])


def default_cover_radius(points, percentile=10.0) -> float:
    """``delta`` default: a low percentile of the pairwise distances."""
    d = pairwise_distances(points)
    iu = np.triu_indices(len(d), 1)
    return float(np.percentile(d[iu], percentile))


@dataclass(frozen=True)
class GenBoundInputs:
    delta: float
    epsilon: float
    eta: float
    lipschitz: float
    max_loss: float
    n_train: int
    cover_count: int
    norm_product: float
    norm_kind: str = "frobenius"
    # "theorem" uses ln(1/eps) in the confidence term, "lemma" uses 2 ln(1/eps)
    confidence_form: str = "theorem"

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.delta < 0 or self.eta < 0:
            raise ValueError("delta and eta must be non-negative")
        if self.n_train < 1 or self.cover_count < 1:
            raise ValueError("n_train and cover_count must be >= 1")
        if self.confidence_form not in ("theorem", "lemma"):
            raise ValueError(f"unknown confidence form {self.confidence_form!r}")


@dataclass
class GenBoundReport:
    bound: float
    term1: float
    term2: float
    empirical_gap: float
    delta: float
    cover_count: int
    n_train: int
    lipschitz: float
    norm_product: float
    norm_kind: str
    note: str = ("cover count estimated on the training labels; "
                 "forward Lipschitz constant is an empirical lower estimate")

    def to_text(self) -> str:
        return _text(self)

    def csv_header(self) -> str:
        return ",".join(asdict(self)) + "\n"

    def to_csv_row(self) -> str:
        return _csv_row(self)


def generalization_bound(inputs: GenBoundInputs, empirical_gap=float("nan")) -> GenBoundReport:
    """``(1 + P)(L delta + 2 eta) + M sqrt((2K ln 2 + ln(1/eps)) / N)``."""
    i = inputs
    term1 = (1.0 + i.norm_product) * (i.lipschitz * i.delta + 2.0 * i.eta)
    conf = math.log(1.0 / i.epsilon) * (2.0 if i.confidence_form == "lemma" else 1.0)
    term2 = i.max_loss * math.sqrt((2.0 * i.cover_count * math.log(2.0) + conf) / i.n_train)
    return GenBoundReport(term1 + term2, term1, term2, float(empirical_gap), i.delta, i.cover_count,
                          i.n_train, i.lipschitz, i.norm_product, i.norm_kind)
