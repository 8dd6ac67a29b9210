"""Neural spline flow over transmission intensities.

Three autoregressive rational-quadratic spline transforms act on a standard
normal base in R^3; a fixed squash ``beta = beta_max * sigmoid(z)`` maps the
result onto the prior's support.  Conditioners are masked fully connected
networks (MADE), read the base-side coordinates, and so sampling is a single
pass while density evaluation inverts each transform coordinate by
coordinate.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, NumericError, Tensor

LOG_2PI = math.log(2 * math.pi)
CHECKPOINT_VERSION = 1


class ArchitectureMismatch(ValueError):
    pass


# --- rational-quadratic spline ---------------------------------------------

def _cumulative(k: int) -> np.ndarray:
    # (k, k+1) matrix whose product with bin sizes gives knot offsets 0..1
    return np.triu(np.ones((k, k + 1)), 1)


def _bin_index(knots: np.ndarray, x: np.ndarray) -> np.ndarray:
    k = knots.shape[-1] - 1
    idx = (x[:, None] >= knots[:, 1:-1]).sum(axis=-1)
    return np.clip(idx, 0, k - 1)


def spline_knots(widths, heights, derivatives, *, tail_bound: float = 5.0,
                 min_bin_width: float = 1e-3, min_bin_height: float = 1e-3,
                 min_derivative: float = 1e-3) -> tuple[Tensor, Tensor, Tensor]:
    """Knot x/y positions (N, K+1) and knot derivatives (N, K+1)."""
    n, k = widths.shape
    B = tail_bound
    cum = _cumulative(k)
    w = min_bin_width + (1 - min_bin_width * k) * ad.softmax(widths, axis=-1)
    h = min_bin_height + (1 - min_bin_height * k) * ad.softmax(heights, axis=-1)
    xk = -B + 2 * B * (w @ cum)
    yk = -B + 2 * B * (h @ cum)
    # shift so that zero parameters give unit derivatives
    shift = math.log(math.expm1(1 - min_derivative))
    inner = min_derivative + ad.softplus(derivatives + shift)
    ones = np.ones((n, 1))
    return xk, yk, ad.concat([ones, inner, ones], axis=1)


def rq_spline(x, widths, heights, derivatives, *, inverse: bool = False,
              tail_bound: float = 5.0, min_bin_width: float = 1e-3,
              min_bin_height: float = 1e-3, min_derivative: float = 1e-3):
    """Monotone rational-quadratic spline with identity tails.

    ``x`` has shape (N,); ``widths`` and ``heights`` (N, K) and
    ``derivatives`` (N, K-1) are unnormalised.  All-zero parameters give the
    identity.  Returns ``(y, log|dy/dx|)`` in the requested direction.
    """
    x = ad._lift(x)
    widths, heights, derivatives = (ad._lift(t) for t in (widths, heights, derivatives))
    for t in (widths, heights, derivatives):
        if not np.all(np.isfinite(t.values)):
            raise NumericError("non-finite spline parameters")
    n, k = widths.shape
    if heights.shape != (n, k) or derivatives.shape != (n, k - 1) or x.shape != (n,):
        raise ad.ShapeError("spline parameter shapes do not match")
    if min_bin_width * k > 1 or min_bin_height * k > 1:
        raise ValueError("minimal bin size too large for the number of bins")
    B = tail_bound
    xk, yk, d = spline_knots(widths, heights, derivatives, tail_bound=B,
                             min_bin_width=min_bin_width, min_bin_height=min_bin_height,
                             min_derivative=min_derivative)

    inside = (np.abs(x.values) <= B).astype(np.float64)
    xc = ad.clamp_max(ad.clamp_min(x, -B), B)
    idx = _bin_index((yk if inverse else xk).values, xc.values)[:, None]

    def pick(t, offset=0):
        return ad.reshape(ad.gather_last(t, idx + offset), (n,))

    x_lo, y_lo = pick(xk), pick(yk)
    bin_w = pick(xk, 1) - x_lo
    bin_h = pick(yk, 1) - y_lo
    d_lo, d_hi = pick(d), pick(d, 1)
    slope = bin_h / bin_w
    curvature = d_hi + d_lo - 2 * slope

    if not inverse:
        xi = (xc - x_lo) / bin_w
        mix = xi * (1 - xi)
        den = slope + curvature * mix
        out = y_lo + bin_h * (slope * xi * xi + d_lo * mix) / den
    else:
        rel = xc - y_lo
        a = bin_h * (slope - d_lo) + rel * curvature
        b = bin_h * d_lo - rel * curvature
        c = -slope * rel
        disc = ad.clamp_min(b * b - 4 * a * c, 0.0)
        # stable root of a xi^2 + b xi + c = 0 lying in [0, 1]
        root = ad.sqrt(disc + 1e-300)
        xi = (2 * c) / (-b - root)
        mix = xi * (1 - xi)
        den = slope + curvature * mix
        out = xi * bin_w + x_lo
    dnum = slope * slope * (d_hi * xi * xi + 2 * slope * mix + d_lo * (1 - xi) * (1 - xi))
    logdet = ad.log(dnum) - 2 * ad.log(den)
    if inverse:
        logdet = -logdet
    y = inside * out + (1 - inside) * x
    return y, inside * logdet


# --- flow ------------------------------------------------------------------

@dataclass(frozen=True)
class FlowArchitecture:
    dim: int = 3
    n_transforms: int = 3
    hidden: tuple[int, ...] = (128, 128, 128)
    n_bins: int = 8
    tail_bound: float = 5.0
    beta_max: float = 2.0
    min_bin_width: float = 1e-3
    min_bin_height: float = 1e-3
    min_derivative: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def validate(self) -> None:
        from .population import ConfigError
        if self.dim < 2:
            raise ConfigError("flow.dim: autoregressive conditioning needs dim >= 2")
        if self.n_transforms < 1 or not self.hidden or min(self.hidden) < 1:
            raise ConfigError("flow: need at least one transform and positive hidden sizes")
        if self.n_bins < 2 or self.tail_bound <= 0 or self.beta_max <= 0:
            raise ConfigError("flow: n_bins >= 2, tail_bound > 0, beta_max > 0 required")

    @property
    def params_per_dim(self) -> int:
        return 3 * self.n_bins - 1

    def digest(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class FlowSample:
    beta: Tensor      # (n, dim) constrained samples
    log_q: Tensor     # (n,)
    z: Tensor         # (n, dim) pre-squash
    base: np.ndarray  # (n, dim) standard-normal noise


def _made_masks(dim: int, hidden: tuple[int, ...], order: np.ndarray, out_per_dim: int):
    in_deg = order + 1
    degs = [in_deg]
    masks = []
    for size in hidden:
        deg = np.arange(size) % (dim - 1) + 1
        masks.append((deg[:, None] >= degs[-1][None, :]).astype(np.float64))
        degs.append(deg)
    out_deg = np.repeat(in_deg, out_per_dim)
    masks.append((out_deg[:, None] > degs[-1][None, :]).astype(np.float64))
    return masks


class NeuralSplineFlow:
    """Flow with parameters kept as plain arrays in :attr:`params`.

    Pass ``params=flow.bind(tape)`` to the sampling/density methods to make
    them differentiable in the flow parameters.
    """

    def __init__(self, arch: FlowArchitecture | None = None, seed: int = 0):
        self.arch = arch or FlowArchitecture()
        self.arch.validate()
        a = self.arch
        rng = np.random.default_rng(seed)
        self.masks = []
        self.params: dict[str, np.ndarray] = {}
        for j in range(a.n_transforms):
            order = (np.arange(a.dim) - j) % a.dim
            masks = _made_masks(a.dim, a.hidden, order, a.params_per_dim)
            self.masks.append(masks)
            sizes = [a.dim, *a.hidden]
            for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                bound = 1.0 / math.sqrt(fan_in)
                self.params[f"t{j}.w{layer}"] = rng.uniform(-bound, bound, (fan_out, fan_in))
                self.params[f"t{j}.b{layer}"] = np.zeros(fan_out)
            n_out = a.dim * a.params_per_dim
            last = len(a.hidden)
            # zero output layer: every spline starts as the identity
            self.params[f"t{j}.w{last}"] = np.zeros((n_out, a.hidden[-1]))
            self.params[f"t{j}.b{last}"] = np.zeros(n_out)

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def bind(self, tape: ad.Tape) -> dict[str, Tensor]:
        return {name: tape.variable(value) for name, value in self.params.items()}

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])

    def set_flat_parameters(self, flat: np.ndarray) -> None:
        offset = 0
        for k in sorted(self.params):
            size = self.params[k].size
            self.params[k] = np.asarray(flat[offset:offset + size]).reshape(self.params[k].shape).copy()
            offset += size

    def copy(self) -> "NeuralSplineFlow":
        other = NeuralSplineFlow.__new__(NeuralSplineFlow)
        other.arch = self.arch
        other.masks = self.masks
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def _params(self, params):
        return params if params is not None else {k: Tensor(v) for k, v in self.params.items()}

    def _spline_params(self, j: int, x: Tensor, params) -> tuple[Tensor, Tensor, Tensor]:
        a = self.arch
        h = x
        n_layers = len(a.hidden) + 1
        for layer in range(n_layers):
            w = params[f"t{j}.w{layer}"] * self.masks[j][layer]
            h = ad.matmul(h, ad.transpose(w)) + params[f"t{j}.b{layer}"]
            if layer < n_layers - 1:
                h = ad.tanh(h)
        n = x.shape[0]
        k = a.n_bins
        out = ad.reshape(h, (n * a.dim, a.params_per_dim))
        return out[:, :k], out[:, k:2 * k], out[:, 2 * k:]

    def _spline(self, j, x, params, target, inverse):
        a = self.arch
        n = x.shape[0]
        uw, uh, ud = self._spline_params(j, x, params)
        flat = ad.reshape(target, (n * a.dim,))
        y, logdet = rq_spline(flat, uw, uh, ud, inverse=inverse, tail_bound=a.tail_bound,
                              min_bin_width=a.min_bin_width, min_bin_height=a.min_bin_height,
                              min_derivative=a.min_derivative)
        y = ad.reshape(y, (n, a.dim))
        return y, ad.sum_(ad.reshape(logdet, (n, a.dim)), axis=1)

    def transform(self, base, params=None) -> tuple[Tensor, Tensor]:
        """Push base points through the splines; returns ``(z, sum log|det J|)``."""
        params = self._params(params)
        z = ad._lift(base)
        total = None
        for j in range(self.arch.n_transforms):
            z, logdet = self._spline(j, z, params, z, inverse=False)
            total = logdet if total is None else total + logdet
        return z, total

    def inverse_transform(self, z, params=None) -> tuple[Tensor, Tensor]:
        """Map pre-squash points back to the base; returns ``(base, sum log|det J|)``
        where the log-determinant is that of the forward map."""
        params = self._params(params)
        y = ad._lift(z)
        n = y.shape[0]
        total = None
        for j in reversed(range(self.arch.n_transforms)):
            x = Tensor(np.zeros((n, self.arch.dim)))
            # coordinate with degree k is exact after k passes
            for _ in range(self.arch.dim):
                x, logdet = self._spline(j, x, params, y, inverse=True)
            total = -logdet if total is None else total - logdet
            y = x
        return y, total

    def squash(self, z) -> Tensor:
        return self.arch.beta_max * ad.sigmoid(z)

    def unsquash(self, beta) -> np.ndarray:
        b = np.asarray(beta.values if isinstance(beta, Tensor) else beta, dtype=np.float64)
        r = b / self.arch.beta_max
        return np.log(r) - np.log1p(-r)

    def squash_log_jacobian(self, z) -> Tensor:
        # log d(beta)/dz = log beta_max + log sigmoid(z) + log(1 - sigmoid(z))
        z = ad._lift(z)
        per = math.log(self.arch.beta_max) - ad.softplus(-z) - ad.softplus(z)
        return ad.sum_(per, axis=1)

    def sample(self, n: int, seed=None, params=None, base=None) -> FlowSample:
        """Reparameterised draws with their log-densities."""
        if base is None:
            if n < 1:
                raise ValueError("n must be at least 1")
            base = np.random.default_rng(seed).standard_normal((n, self.arch.dim))
        base = np.asarray(base, dtype=np.float64)
        z, logdet = self.transform(base, params)
        log_base = -0.5 * (base * base).sum(axis=1) - 0.5 * self.arch.dim * LOG_2PI
        log_q = log_base - logdet - self.squash_log_jacobian(z)
        return FlowSample(self.squash(z), log_q, z, base)

    def log_prob(self, beta, params=None) -> Tensor:
        """Exact log-density of constrained points (shape (n, dim))."""
        b = np.asarray(beta.values if isinstance(beta, Tensor) else beta, dtype=np.float64)
        if b.ndim == 1:
            b = b[None, :]
        if np.any(b <= 0) or np.any(b >= self.arch.beta_max):
            raise DomainError(f"log_prob needs points strictly inside (0, {self.arch.beta_max})")
        z = self.unsquash(b)
        base, logdet = self.inverse_transform(z, params)
        log_base = -0.5 * ad.sum_(base * base, axis=1) - 0.5 * self.arch.dim * LOG_2PI
        return log_base - logdet - self.squash_log_jacobian(z)

    # --- checkpoints -------------------------------------------------------

    def save(self, path, metadata: dict | None = None) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "architecture": asdict(self.arch),
            "architecture_hash": self.arch.digest(),
            "metadata": metadata or {},
        }
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path, expected: FlowArchitecture | None = None) -> tuple["NeuralSplineFlow", dict]:
        """Load a checkpoint; refuses mismatched or inconsistent architectures."""
        path = Path(path)
        try:
            with np.load(path, allow_pickle=False) as data:
                meta = json.loads(str(data["__meta__"]))
                arrays = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        except (OSError, ValueError, KeyError) as err:
            raise ArchitectureMismatch(f"{path}: unreadable checkpoint ({err})") from None
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ArchitectureMismatch(f"{path}: unsupported checkpoint version {meta.get('version')}")
        arch = FlowArchitecture(**meta["architecture"])
        if arch.digest() != meta.get("architecture_hash"):
            raise ArchitectureMismatch(f"{path}: architecture hash does not match its description")
        if expected is not None and expected.digest() != arch.digest():
            raise ArchitectureMismatch(
                f"{path}: checkpoint architecture {arch.digest()} != expected {expected.digest()}")
        flow = cls(arch)
        if set(arrays) != set(flow.params):
            raise ArchitectureMismatch(f"{path}: parameter names do not match the architecture")
        for k, v in arrays.items():
            if v.shape != flow.params[k].shape:
                raise ArchitectureMismatch(f"{path}: parameter {k} has shape {v.shape}")
            flow.params[k] = np.array(v, dtype=np.float64)
        return flow, meta["metadata"]


@dataclass(frozen=True)
class UniformPrior:
    """Independent uniform density on ``[0, beta_max]^dim``."""

    beta_max: float = 2.0
    dim: int = 3

    @property
    def log_density(self) -> float:
        return -self.dim * math.log(self.beta_max)

    def log_prob(self, beta) -> np.ndarray:
        b = np.asarray(beta.values if isinstance(beta, Tensor) else beta, dtype=np.float64)
        if b.ndim == 1:
            b = b[None, :]
        inside = np.all((b >= 0) & (b <= self.beta_max), axis=1)
        return np.where(inside, self.log_density, -np.inf)

    def sample(self, n: int, seed=None, params=None) -> FlowSample:
        rng = np.random.default_rng(seed)
        beta = rng.uniform(0.0, self.beta_max, (n, self.dim))
        return FlowSample(Tensor(beta), Tensor(np.full(n, self.log_density)),
                          Tensor(np.full((n, self.dim), np.nan)), beta)
