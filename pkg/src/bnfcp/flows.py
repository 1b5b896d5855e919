"""Invertible transports: affine coupling stacks, monotone planar flows, branched models.

A branched model keeps two parameter-disjoint flows. The feature branch maps
``x -> x_bar`` and never sees the label; the label branch maps ``y`` (plain
variant) or the pair ``(y, conditioner)`` (all other variants) and never
sees ``x`` except through the conditioner of the feature-conditioned variant.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .neural import DimensionError, Mlp

VARIANTS = ("plain", "augmented", "augment-conditioned", "feature-conditioned")
DEFAULT_HIDDEN = (64, 128, 256, 128, 64)
DEFAULT_DEPTH = 48
SCALE_CAP = 2.0
PLANAR_UNITS = 16
PLANAR_SLOPE = 0.01
BRACKET = 1e3
MAX_DOUBLINGS = 60
SOURCE_NOISE_SPACING = 3.0


class OutOfRangeError(ValueError):
    """Target value lies outside the invertible range that could be bracketed."""


def alternating_mask(dim: int, parity: int) -> np.ndarray:
    mask = (np.arange(dim) + parity) % 2 == 0
    return mask.astype(np.int8)


# ---------------------------------------------------------------------------
# coupling layers


@dataclass
class CouplingLayer:
    """Real NVP affine coupling: ``z_b' = z_b * exp(s(z_a)) + t(z_a)``.

    ``mask == 1`` marks the conditioning part ``z_a`` which passes through
    unchanged. One conditioner network maps ``z_a`` to ``2 * n_b`` outputs;
    the first half is the raw log-scale, the second the shift.
    ``s = scale_cap * tanh(raw)`` keeps every log-scale within
    ``[-scale_cap, scale_cap]``.
    """

    mask: np.ndarray
    net: Mlp
    scale_cap: float = SCALE_CAP

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.int8)
        if self.mask.ndim != 1 or self.mask.size < 2:
            raise ValueError("mask must be a vector of length >= 2")
        if not (np.any(self.mask == 1) and np.any(self.mask == 0)):
            raise ValueError("mask needs at least one 0 and one 1")
        n_a, n_b = int(self.mask.sum()), int((self.mask == 0).sum())
        if self.net.n_in != n_a or self.net.n_out != 2 * n_b:
            raise ValueError(f"conditioner must map {n_a} -> {2 * n_b}, "
                             f"got {self.net.n_in} -> {self.net.n_out}")
        if self.net.output_activation != "identity":
            raise ValueError("conditioner needs an identity output")
        self._a = np.flatnonzero(self.mask == 1)
        self._b = np.flatnonzero(self.mask == 0)

    @classmethod
    def create(cls, mask, hidden, rng, last_layer_scale=0.0, scale_cap=SCALE_CAP,
               hidden_activation="leaky_relu"):
        mask = np.asarray(mask, dtype=np.int8)
        n_a, n_b = int(mask.sum()), int((mask == 0).sum())
        net = Mlp.create((n_a, *hidden, 2 * n_b), rng, hidden_activation, "identity",
                         last_layer_scale)
        return cls(mask, net, scale_cap)

    @property
    def dim(self) -> int:
        return self.mask.size

    def parameters(self) -> list:
        return self.net.parameters()

    def _st(self, za):
        out = self.net.forward_cache(za)[0]
        nb = self._b.size
        th = np.tanh(out[:, :nb])
        return self.scale_cap * th, out[:, nb:], th

    def forward(self, z: np.ndarray) -> np.ndarray:
        za, zb = z[:, self._a], z[:, self._b]
        s, t, _ = self._st(za)
        out = z.copy()
        out[:, self._b] = zb * np.exp(s) + t
        return out

    def inverse(self, z: np.ndarray) -> np.ndarray:
        za, zb = z[:, self._a], z[:, self._b]
        s, t, _ = self._st(za)
        out = z.copy()
        out[:, self._b] = (zb - t) * np.exp(-s)
        return out

    def log_det(self, z: np.ndarray) -> np.ndarray:
        """Log-determinant of the forward Jacobian per row."""
        s, _, _ = self._st(z[:, self._a])
        return s.sum(axis=1)

    def backward(self, z_in: np.ndarray, g_out: np.ndarray):
        """Given the layer input and dL/d(output), return dL/d(input) and parameter grads."""
        za, zb = z_in[:, self._a], z_in[:, self._b]
        raw, cache = self.net.forward_cache(za)
        nb = self._b.size
        th = np.tanh(raw[:, :nb])
        es = np.exp(self.scale_cap * th)
        gb_out = g_out[:, self._b]
        g_in = np.empty_like(g_out)
        g_in[:, self._b] = gb_out * es
        upstream = np.empty_like(raw)
        upstream[:, :nb] = gb_out * zb * es * self.scale_cap * (1.0 - th * th)
        upstream[:, nb:] = gb_out
        gw, gbias, gx = self.net.backward_cache(cache, upstream)
        g_in[:, self._a] = g_out[:, self._a] + gx
        grads = []
        for w, b in zip(gw, gbias):
            grads.extend([w, b])
        return g_in, grads


def _as_rows(z, dim):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    rows = z[None, :] if single else z
    if rows.ndim != 2 or rows.shape[1] != dim:
        raise DimensionError(f"expected vectors of length {dim}, got shape {z.shape}")
    return rows, single


def coupling_forward(layer: CouplingLayer, z) -> np.ndarray:
    rows, single = _as_rows(z, layer.dim)
    out = layer.forward(rows)
    return out[0] if single else out


def coupling_inverse(layer: CouplingLayer, z) -> np.ndarray:
    rows, single = _as_rows(z, layer.dim)
    out = layer.inverse(rows)
    return out[0] if single else out


@dataclass
class FlowStack:
    """Composition of coupling layers; alternating masks stand in for permutations."""

    dim: int
    layers: list = field(default_factory=list)

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("coupling flows need at least two dimensions")
        for layer in self.layers:
            if layer.dim != self.dim:
                raise ValueError("all layers must share the stack dimension")

    @classmethod
    def create(cls, dim, depth=DEFAULT_DEPTH, hidden=DEFAULT_HIDDEN, rng=None,
               last_layer_scale=0.0, scale_cap=SCALE_CAP, hidden_activation="leaky_relu"):
        """Stack of ``depth`` layers; ``last_layer_scale=0`` gives the identity map."""
        rng = np.random.default_rng(0) if rng is None else rng
        layers = [CouplingLayer.create(alternating_mask(dim, i % 2), hidden, rng,
                                       last_layer_scale, scale_cap, hidden_activation)
                  for i in range(depth)]
        return cls(dim, layers)

    def parameters(self) -> list:
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def forward(self, z) -> np.ndarray:
        rows, single = _as_rows(z, self.dim)
        for layer in self.layers:
            rows = layer.forward(rows)
        return rows[0] if single else rows

    def inverse(self, z) -> np.ndarray:
        rows, single = _as_rows(z, self.dim)
        for layer in reversed(self.layers):
            rows = layer.inverse(rows)
        return rows[0] if single else rows

    def forward_inputs(self, z: np.ndarray):
        """Forward pass that also returns every layer's input, for :meth:`backward`."""
        inputs = []
        for layer in self.layers:
            inputs.append(z)
            z = layer.forward(z)
        return z, inputs

    def backward(self, inputs, g_out):
        grads = []
        g = g_out
        for layer, z_in in zip(reversed(self.layers), reversed(inputs)):
            g, layer_grads = layer.backward(z_in, g)
            grads.append(layer_grads)
        flat = [p for layer_grads in reversed(grads) for p in layer_grads]
        return g, flat


def flow_forward(stack: FlowStack, z) -> np.ndarray:
    return stack.forward(z)


def flow_inverse(stack: FlowStack, z) -> np.ndarray:
    return stack.inverse(z)


@dataclass
class FlowTape:
    param_grads: list
    input: np.ndarray


def flow_param_grads(stack, z, upstream_grad) -> FlowTape:
    """Gradient of ``sum(upstream_grad * flow(z))`` w.r.t. all subnetwork parameters.

    Parameter gradients come back in :meth:`parameters` order, summed over rows.
    """
    if isinstance(stack, PlanarFlow1D):
        y = np.asarray(z, dtype=np.float64).ravel()
        _, inputs = stack.forward_inputs(y)
        g, grads = stack.backward(inputs, np.asarray(upstream_grad, dtype=np.float64).ravel())
        return FlowTape(grads, g)
    rows, single = _as_rows(z, stack.dim)
    g = np.asarray(upstream_grad, dtype=np.float64).reshape(rows.shape)
    _, inputs = stack.forward_inputs(rows)
    g_in, grads = stack.backward(inputs, g)
    return FlowTape(grads, g_in[0] if single else g_in)


# ---------------------------------------------------------------------------
# planar flows in one dimension


def _softplus(r):
    return np.logaddexp(0.0, r)


def _sigmoid(r):
    return 0.5 * (1.0 + np.tanh(0.5 * r))


def _leaky(z):
    return np.where(z > 0, z, PLANAR_SLOPE * z)


def _leaky_grad(z):
    return np.where(z > 0, 1.0, PLANAR_SLOPE)


@dataclass
class PlanarFlow1D:
    """Composition of units ``y -> y + u * leaky_relu(w * y + b)``.

    Each unit is stored as ``(log_w, b, r)`` with ``w = exp(log_w)`` and
    ``u * w = softplus(r) - 1 + margin``, so every unit has derivative at
    least ``margin`` and the composition is strictly increasing on all of R.
    """

    log_w: np.ndarray
    b: np.ndarray
    r: np.ndarray
    margin: float = 0.05

    def __post_init__(self):
        self.log_w = np.asarray(self.log_w, dtype=np.float64).copy()
        self.b = np.asarray(self.b, dtype=np.float64).copy()
        self.r = np.asarray(self.r, dtype=np.float64).copy()
        if not (self.log_w.shape == self.b.shape == self.r.shape) or self.log_w.ndim != 1:
            raise ValueError("log_w, b and r must be vectors of equal length")
        if not 0 < self.margin < 1:
            raise ValueError("margin must lie in (0, 1)")
        grid = np.linspace(-10.0, 10.0, 201)
        if np.any(self.derivative(grid) <= 0):
            raise ValueError("planar flow is not strictly monotone on [-10, 10]")

    @classmethod
    def identity(cls, n_units=PLANAR_UNITS, margin=0.05):
        r0 = np.log(np.expm1(1.0 - margin))
        return cls(np.zeros(n_units), np.zeros(n_units), np.full(n_units, r0), margin)

    @classmethod
    def create(cls, rng, n_units=PLANAR_UNITS, spread=0.0, margin=0.05):
        """Random units around the identity; ``spread=0`` is exactly the identity."""
        r0 = np.log(np.expm1(1.0 - margin))
        return cls(rng.normal(0.0, 0.5 * spread, n_units),
                   rng.uniform(-1.0, 1.0, n_units) * (spread > 0),
                   r0 + rng.normal(0.0, spread, n_units), margin)

    @property
    def n_units(self) -> int:
        return self.log_w.size

    @property
    def w(self) -> np.ndarray:
        return np.exp(self.log_w)

    @property
    def p(self) -> np.ndarray:
        return _softplus(self.r) - 1.0 + self.margin

    @property
    def u(self) -> np.ndarray:
        return self.p / self.w

    def parameters(self) -> list:
        return [self.log_w, self.b, self.r]

    def forward(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        w, u = self.w, self.u
        for k in range(self.n_units):
            y = y + u[k] * _leaky(w[k] * y + self.b[k])
        return y

    def derivative(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        w, p = self.w, self.p
        d = np.ones_like(y)
        for k in range(self.n_units):
            z = w[k] * y + self.b[k]
            d = d * (1.0 + p[k] * _leaky_grad(z))
            y = y + (p[k] / w[k]) * _leaky(z)
        return d

    def forward_inputs(self, y):
        inputs = []
        w, u = self.w, self.u
        for k in range(self.n_units):
            inputs.append(y)
            y = y + u[k] * _leaky(w[k] * y + self.b[k])
        return y, inputs

    def backward(self, inputs, g_out):
        w, p = self.w, self.p
        sig = _sigmoid(self.r)
        g_logw = np.zeros(self.n_units)
        g_b = np.zeros(self.n_units)
        g_r = np.zeros(self.n_units)
        g = np.asarray(g_out, dtype=np.float64)
        for k in range(self.n_units - 1, -1, -1):
            y = inputs[k]
            z = w[k] * y + self.b[k]
            h, dh = _leaky(z), _leaky_grad(z)
            g_logw[k] = np.sum(g * (-(p[k] / w[k]) * h + p[k] * dh * y))
            g_b[k] = np.sum(g * (p[k] / w[k]) * dh)
            g_r[k] = np.sum(g * (h / w[k]) * sig[k])
            g = g * (1.0 + p[k] * dh)
        return g, [g_logw, g_b, g_r]

    def invert(self, y_bar, tol=1e-9) -> np.ndarray:
        """Vectorized bisection for ``forward(y) = y_bar``."""
        target = np.asarray(y_bar, dtype=np.float64)
        flat = target.ravel()
        if not np.all(np.isfinite(flat)):
            raise OutOfRangeError("cannot invert non-finite values")
        lo = np.full(flat.shape, -BRACKET)
        hi = np.full(flat.shape, BRACKET)
        for _ in range(MAX_DOUBLINGS):
            low_bad = self.forward(lo) > flat
            high_bad = self.forward(hi) < flat
            if not (low_bad.any() or high_bad.any()):
                break
            lo = np.where(low_bad, lo * 2.0, lo)
            hi = np.where(high_bad, hi * 2.0, hi)
        else:
            raise OutOfRangeError("target outside the bracketable range of the flow")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            f_mid = self.forward(mid)
            below = f_mid < flat
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(np.abs(f_mid - flat) <= tol) or np.all(hi - lo <= 4e-16 * np.maximum(1.0, np.abs(mid))):
                break
        return mid.reshape(target.shape)


def planar_forward(flow: PlanarFlow1D, y):
    return flow.forward(y)


def planar_invert(flow: PlanarFlow1D, y_bar):
    return flow.invert(y_bar)


# ---------------------------------------------------------------------------
# branched model


def row_seed(row: np.ndarray, run_seed: int) -> int:
    """Deterministic 63-bit seed from the bytes of a float64 row, mixed with a run seed."""
    digest = hashlib.blake2b(np.ascontiguousarray(row, dtype=np.float64).tobytes(),
                             digest_size=8).digest()
    return (int.from_bytes(digest, "little") ^ (int(run_seed) & 0xFFFFFFFFFFFFFFFF)) >> 1


def row_normals(x: np.ndarray, run_seed: int) -> np.ndarray:
    """One standard normal per row, reproducible from the row contents alone."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.array([np.random.default_rng(row_seed(r, run_seed)).standard_normal() for r in x])


@dataclass
class BnfModel:
    """Two-branch invertible transport with unshared parameters."""

    variant: str
    x_dim: int
    x_branch: FlowStack
    y_branch: object  # PlanarFlow1D for "plain", FlowStack(dim=2) otherwise
    augment_x: bool = False
    x_noise_seed: int = 0
    source_noise_means: np.ndarray | None = None
    projection: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        expected = self.x_dim + (1 if self.augment_x else 0)
        if self.x_branch.dim != expected:
            raise ValueError(f"x_branch has dim {self.x_branch.dim}, expected {expected}")
        if self.variant == "plain":
            if not isinstance(self.y_branch, PlanarFlow1D):
                raise ValueError("plain variant needs a planar label branch")
        elif not (isinstance(self.y_branch, FlowStack) and self.y_branch.dim == 2):
            raise ValueError("augmented variants need a 2-D coupling label branch")
        if self.variant == "augment-conditioned":
            if self.source_noise_means is None:
                raise ValueError("augment-conditioned variant needs per-source noise means")
            self.source_noise_means = np.asarray(self.source_noise_means, dtype=np.float64)
        if self.variant == "feature-conditioned":
            if self.projection is None:
                raise ValueError("feature-conditioned variant needs a projection")
            self.projection = np.asarray(self.projection, dtype=np.float64)
            if self.projection.shape != (self.x_dim,):
                raise ValueError("projection must map the feature dimension to 1")

    @classmethod
    def create(cls, variant, x_dim, rng, depth=DEFAULT_DEPTH, hidden=DEFAULT_HIDDEN,
               augment_x=False, n_sources=1, last_layer_scale=0.0, planar_spread=0.0,
               hidden_activation="leaky_relu"):
        """New model; the default ``last_layer_scale=0`` starts both branches at the identity."""
        if x_dim < 1:
            raise ValueError("x_dim must be positive")
        if x_dim == 1 and not augment_x:
            raise ValueError(
                "coupling flows need at least two feature dimensions; pass augment_x=True to "
                "append a seeded standard-normal coordinate to one-dimensional features")
        x_branch = FlowStack.create(x_dim + int(augment_x), depth, hidden, rng,
                                    last_layer_scale, hidden_activation=hidden_activation)
        if variant == "plain":
            y_branch = PlanarFlow1D.create(rng, spread=planar_spread)
        else:
            y_branch = FlowStack.create(2, depth, hidden, rng, last_layer_scale,
                                        hidden_activation=hidden_activation)
        means = projection = None
        if variant == "augment-conditioned":
            means = SOURCE_NOISE_SPACING * np.arange(n_sources, dtype=np.float64)
        if variant == "feature-conditioned":
            v = rng.standard_normal(x_dim)
            projection = v / np.linalg.norm(v)
        return cls(variant, x_dim, x_branch, y_branch, augment_x,
                   int(rng.integers(0, 2**62)), means, projection)

    @property
    def uses_noise(self) -> bool:
        return self.variant in ("augmented", "augment-conditioned")

    # feature branch ---------------------------------------------------------

    def _x_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        rows = x[None, :] if x.ndim == 1 else x
        if rows.ndim != 2 or rows.shape[1] != self.x_dim:
            raise DimensionError(f"expected features of dimension {self.x_dim}, got {x.shape}")
        if self.augment_x:
            rows = np.column_stack([rows, row_normals(rows, self.x_noise_seed)])
        return rows, x.ndim == 1

    def transform_x(self, x) -> np.ndarray:
        rows, single = self._x_input(x)
        out = self.x_branch.forward(rows)[:, :self.x_dim]
        return out[0] if single else out

    # label branch -----------------------------------------------------------

    def conditioner(self, n, x=None, noise=None, source_id=None) -> np.ndarray | None:
        """Second input of the label branch for ``n`` rows (``None`` for the plain variant)."""
        if self.variant == "plain":
            return None
        if self.variant == "feature-conditioned":
            if x is None:
                raise ValueError("feature-conditioned variant needs x for its conditioner")
            rows = np.atleast_2d(np.asarray(x, dtype=np.float64))
            return rows @ self.projection
        if noise is None:
            raise ValueError(f"{self.variant} variant needs a noise draw")
        noise = np.broadcast_to(np.asarray(noise, dtype=np.float64), (n,)).astype(np.float64)
        if self.variant == "augment-conditioned":
            if source_id is None:
                raise ValueError("augment-conditioned variant needs a source id")
            sid = np.broadcast_to(np.asarray(source_id), (n,))
            if np.any(sid < 0) or np.any(sid >= self.source_noise_means.size):
                raise ValueError("source id out of range")
            return noise + self.source_noise_means[sid]
        return noise

    def transform_y(self, y, cond=None) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if self.variant == "plain":
            return self.y_branch.forward(y)
        flat = y.ravel()
        c = np.broadcast_to(np.asarray(cond, dtype=np.float64), flat.shape)
        out = self.y_branch.forward(np.column_stack([flat, c]))[:, 0]
        return out.reshape(y.shape)

    def transform(self, x, y, noise=None, source_id=None):
        x_bar = self.transform_x(x)
        y_arr = np.asarray(y, dtype=np.float64)
        cond = self.conditioner(y_arr.size, x=x, noise=noise, source_id=source_id)
        return x_bar, self.transform_y(y_arr, cond)

    def invert_y(self, y_bar, cond=None, search=(-1e3, 1e3), n_grid=4001, tol=1e-10):
        """Preimage of ``y_bar`` under the label branch at a fixed conditioner value.

        Exact bisection for the plain variant. For the coupling variants the
        label coordinate is searched on a grid, then refined by bisection on
        the first bracketing cell.
        """
        if self.variant == "plain":
            return self.y_branch.invert(y_bar)
        targets = np.atleast_1d(np.asarray(y_bar, dtype=np.float64))
        conds = np.broadcast_to(np.asarray(cond, dtype=np.float64), targets.shape)
        grid = np.linspace(search[0], search[1], n_grid)
        out = np.empty_like(targets)
        for i, (t, c) in enumerate(zip(targets, conds)):
            vals = self.transform_y(grid, c) - t
            sign = np.sign(vals)
            hits = np.flatnonzero(sign[:-1] * sign[1:] <= 0)
            if hits.size == 0:
                raise OutOfRangeError(f"no preimage of {t} in [{search[0]}, {search[1]}]")
            lo, hi = grid[hits[0]], grid[hits[0] + 1]
            f_lo = vals[hits[0]]
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                f_mid = self.transform_y(np.array([mid]), c)[0] - t
                if abs(f_mid) <= tol or hi - lo <= 1e-15 * max(1.0, abs(mid)):
                    break
                if np.sign(f_mid) == np.sign(f_lo):
                    lo, f_lo = mid, f_mid
                else:
                    hi = mid
            out[i] = 0.5 * (lo + hi)
        return out[0] if np.ndim(y_bar) == 0 else out.reshape(np.shape(y_bar))

    # parameters -------------------------------------------------------------

    def x_parameters(self) -> list:
        return self.x_branch.parameters()

    def y_parameters(self) -> list:
        return self.y_branch.parameters()

    def parameters(self) -> list:
        return self.x_parameters() + self.y_parameters()


def bnf_transform(model: BnfModel, x, y, noise=None, source_id=None):
    """``(x_bar, y_bar)``: feature branch on ``x`` alone, label branch on ``(y, conditioner)``."""
    return model.transform(x, y, noise, source_id)


def bnf_transform_x(model: BnfModel, x):
    return model.transform_x(x)


def bnf_invert_y(model: BnfModel, y_bar, cond=None):
    return model.invert_y(y_bar, cond)
