"""Fast PSF surrogates: an MLP fitted to the ray tracer, and a low-rank
kernel-grid baseline queried by trilinear interpolation.

The MLP maps a normalized (x, y, z, f_d) query to a k x k kernel through five
256-wide ReLU layers and a sigmoid output; it is trained against freshly
ray-traced, sum-normalized kernels with AdamW under a cosine-annealed rate.
The raw sigmoid output is the prediction (no renormalization), matching the
squared-error objective it was fitted with.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass

import numpy as np

from .lens import FOCUS_RANGE_M, LensPrescription, focus_to
from .parallel import SERIAL, ParallelMap
from .psf import DEFAULT_KERNEL_SIZE, Frustum, ObjectQuery, PsfGrid, raytraced_psfs
from .streams import stream

__all__ = [
    "MlpModel",
    "GridModel",
    "TrainConfig",
    "TestLattice",
    "SurrogateEval",
    "init_mlp",
    "mlp_forward",
    "mlp_backward",
    "adamw_step",
    "cosine_lr",
    "train_mlp",
    "build_grid_model",
    "grid_query",
    "evaluate_surrogate",
    "default_test_lattice",
    "save_mlp",
    "load_mlp",
    "sample_training_batch",
]

HIDDEN_WIDTH = 256
HIDDEN_LAYERS = 5


@dataclass
class MlpModel:
    """Fully-connected PSF network; weights[i] has shape (out, in)."""

    weights: list
    biases: list
    k: int = DEFAULT_KERNEL_SIZE
    pixel_pitch_mm: float = 0.05

    @property
    def layer_dims(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_mlp(k=DEFAULT_KERNEL_SIZE, hidden=(HIDDEN_WIDTH,) * HIDDEN_LAYERS,
             seed=0, dtype=np.float32, pixel_pitch_mm=0.05) -> MlpModel:
    """Fan-in scaled uniform init (+-sqrt(6/fan_in)); sigmoid outputs start
    near 0.5 because pre-activations stay near zero."""
    dims = [4, *hidden, k * k]
    rng = stream(seed, "init")
    weights, biases = [], []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype))
        biases.append(np.zeros(n_out, dtype=dtype))
    return MlpModel(weights, biases, k=k, pixel_pitch_mm=pixel_pitch_mm)


def _forward_cached(model: MlpModel, x: np.ndarray):
    """Forward pass keeping post-activation values for backprop."""
    acts = [x]
    h = x
    n_layers = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        if i < n_layers - 1:
            h = np.maximum(z, 0)
        else:
            h = 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))
        acts.append(h)
    return h, acts


def mlp_forward(model: MlpModel, query) -> PsfGrid:
    """Evaluate the network for one query; returns the raw sigmoid output
    reshaped to k x k (every entry in (0, 1), not renormalized)."""
    if isinstance(query, ObjectQuery):
        x = query.as_input()
    else:
        x = np.asarray(query, dtype=float)
    out, _ = _forward_cached(model, x.astype(model.dtype)[None, :])
    kernel = out[0].astype(np.float64).reshape(model.k, model.k)
    return PsfGrid(kernel, model.pixel_pitch_mm, "surrogate_mlp")


def mlp_forward_batch(model: MlpModel, x: np.ndarray) -> np.ndarray:
    out, _ = _forward_cached(model, np.asarray(x, dtype=model.dtype))
    return out.reshape(len(x), model.k, model.k)


def mlp_backward(model: MlpModel, queries: np.ndarray, targets: np.ndarray):
    """Loss and exact gradients for a batch.

    Loss is the batch mean of the squared l2 kernel error
    ``mean_b ||pred_b - target_b||^2``; the ReLU subgradient at 0 is 0.
    Returns ((weight grads, bias grads), loss).
    """
    x = np.asarray(queries, dtype=model.dtype)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("queries must be a nonempty (batch, 4) array")
    t = np.asarray(targets, dtype=model.dtype).reshape(len(x), -1)
    out, acts = _forward_cached(model, x)
    batch = len(x)
    resid = out - t
    loss = float(np.mean(np.sum(resid.astype(np.float64) ** 2, axis=1)))
    if not math.isfinite(loss):
        per_query = np.sum(resid**2, axis=1)
        bad = int(np.argmax(~np.isfinite(per_query)))
        raise FloatingPointError(f"non-finite loss at query index {bad}")

    delta = (2.0 / batch) * resid * out * (1.0 - out)  # through the sigmoid
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = delta.T @ acts[i]
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i]) * (acts[i] > 0)
    return (grads_w, grads_b), loss


@dataclass
class AdamWState:
    m_w: list
    v_w: list
    m_b: list
    v_b: list
    step: int = 0

    @classmethod
    def zeros_like(cls, model: MlpModel):
        return cls(
            m_w=[np.zeros_like(w) for w in model.weights],
            v_w=[np.zeros_like(w) for w in model.weights],
            m_b=[np.zeros_like(b) for b in model.biases],
            v_b=[np.zeros_like(b) for b in model.biases],
        )


def adamw_step(model, grads, state, lr, betas=(0.9, 0.999), eps=1e-8,
               weight_decay=1e-2):
    """One decoupled-weight-decay Adam update, in place.

    With zero gradients the parameters move only by the -lr*wd*p decay term;
    with zero decay as well, the step is a no-op.
    """
    grads_w, grads_b = grads
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(
        model.weights + model.biases,
        grads_w + grads_b,
        state.m_w + state.m_b,
        state.v_w + state.v_b,
    ):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p -= lr * update + lr * weight_decay * p


def cosine_lr(iteration: int, total: int, base_lr: float) -> float:
    """Cosine annealing from base_lr at step 0 to 0 at step = total."""
    if total <= 0:
        return base_lr
    t = min(max(iteration, 0), total)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t / total))


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 50_000
    batch_points: int = 256       # object points per iteration, one shared f_d
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    spp_groundtruth: int = 1024
    k: int = DEFAULT_KERNEL_SIZE
    pixel_pitch_mm: float = 0.05  # 24 mm / 480 rows
    depth_norm: str = "linear"
    depth_sigma_log: float = 0.3  # importance spread of depths about f_d


def sample_training_batch(config: TrainConfig, frustum: Frustum, iteration: int):
    """One iteration's focus distance and object points.

    f_d is log-uniform over the focusable range (more samples from the near
    range); half the depths are uniform over the range and half cluster
    log-normally around f_d; x and y are uniform over the frustum section.
    """
    lo, hi = FOCUS_RANGE_M
    f_d = float(np.exp(stream(config.seed, "focus", iteration).uniform(
        math.log(lo), math.log(hi))))
    rng = stream(config.seed, "points", iteration)
    n = config.batch_points
    xy = rng.uniform(-1.0, 1.0, size=(n, 2))
    z_uniform = rng.uniform(lo, hi, size=n)
    z_near = np.exp(rng.normal(math.log(f_d), config.depth_sigma_log, size=n))
    use_near = rng.random(n) < 0.5
    z = np.clip(np.where(use_near, z_near, z_uniform), lo, hi)
    points_m = frustum.point_from_normalized(xy[:, 0], xy[:, 1], z)
    inputs = np.stack(
        [xy[:, 0], xy[:, 1], frustum.normalize_depth(z),
         np.full(n, frustum.normalize_depth(f_d))], axis=1,
    )
    return f_d, points_m, inputs


def train_mlp(lens: LensPrescription, config: TrainConfig,
              pmap: ParallelMap = SERIAL, progress=None):
    """Fit the PSF network to a lens; returns (model, per-iteration loss).

    Each iteration focuses the lens to a fresh f_d, ray-traces ground-truth
    kernels for 256 object points, and takes one AdamW step at the
    cosine-annealed rate. Fully deterministic for a fixed seed.
    """
    if config.iterations < 0:
        raise ValueError("iterations must be >= 0")
    model = init_mlp(k=config.k, seed=config.seed,
                     pixel_pitch_mm=config.pixel_pitch_mm)
    state = AdamWState.zeros_like(model)
    frustum = Frustum.from_lens(lens, depth_norm=config.depth_norm)
    losses = np.zeros(config.iterations)
    for it in range(config.iterations):
        f_d, points_m, inputs = sample_training_batch(config, frustum, it)
        focused = focus_to(lens, f_d)
        try:
            targets = raytraced_psfs(
                focused, points_m, config.spp_groundtruth, config.seed,
                config.pixel_pitch_mm, k=config.k, pmap=pmap,
                index_offset=it * config.batch_points, on_empty="uniform",
            )
        except Exception as exc:
            raise RuntimeError(f"ground-truth tracing failed at iteration {it}: {exc}") from exc
        grads, loss = mlp_backward(model, inputs, targets)
        adamw_step(model, grads, state,
                   lr=cosine_lr(it, config.iterations, config.learning_rate),
                   betas=config.betas, eps=config.eps,
                   weight_decay=config.weight_decay)
        losses[it] = loss
        if progress is not None:
            progress(it, loss)
    return model, losses


# ----------------------------------------------------------------------------
# Low-rank kernel grid
# ----------------------------------------------------------------------------


@dataclass
class GridModel:
    """Ray-traced kernels on a (focus, depth, y, x) lattice.

    Queries interpolate the 8 surrounding kernels trilinearly over
    (x_norm, y_norm, z) and snap to the nearest stored focus distance.
    """

    focus_samples_m: np.ndarray  # (F,) ascending
    depths_m: np.ndarray         # (D,) ascending
    x_nodes: np.ndarray          # (nx,) ascending, normalized
    y_nodes: np.ndarray          # (ny,) ascending, normalized
    kernels: np.ndarray          # (F, D, ny, nx, k, k), each sum-normalized
    pixel_pitch_mm: float

    def __post_init__(self):
        for axis in (self.focus_samples_m, self.depths_m, self.x_nodes, self.y_nodes):
            if not np.all(np.diff(axis) > 0):
                raise ValueError("grid coordinates must be strictly increasing")

    @property
    def k(self) -> int:
        return self.kernels.shape[-1]


def build_grid_model(
    lens: LensPrescription,
    focus_samples_m,
    depths: int = 20,
    per_plane=(8, 8),
    spp: int = 1024,
    seed: int = 0,
    pixel_pitch_mm: float = 0.05,
    k: int = DEFAULT_KERNEL_SIZE,
    pmap: ParallelMap = SERIAL,
) -> GridModel:
    """Ray-trace kernels at every lattice point.

    Depth planes are log-spaced over the focusable range (kernels change
    fastest near the lens); positions are a uniform (ny, nx) grid spanning
    the full frustum section.
    """
    ny, nx = per_plane
    if depths < 2 or ny < 2 or nx < 2 or len(focus_samples_m) < 1:
        raise ValueError("need at least 2 samples per spatial axis")
    focus_samples_m = np.sort(np.asarray(focus_samples_m, dtype=float))
    depths_m = np.geomspace(FOCUS_RANGE_M[0], FOCUS_RANGE_M[1], depths)
    x_nodes = np.linspace(-1.0, 1.0, nx)
    y_nodes = np.linspace(-1.0, 1.0, ny)
    frustum = Frustum.from_lens(lens)

    zz, yy, xx = np.meshgrid(depths_m, y_nodes, x_nodes, indexing="ij")
    points_m = frustum.point_from_normalized(xx.ravel(), yy.ravel(), zz.ravel())
    kernels = np.empty((len(focus_samples_m), depths, ny, nx, k, k), dtype=np.float32)
    for fi, f_d in enumerate(focus_samples_m):
        focused = focus_to(lens, float(f_d))
        kern = raytraced_psfs(
            focused, points_m, spp, seed, pixel_pitch_mm, k=k, pmap=pmap,
            index_offset=fi * len(points_m), on_empty="uniform",
        )
        kernels[fi] = kern.reshape(depths, ny, nx, k, k)
    return GridModel(focus_samples_m, depths_m, x_nodes, y_nodes, kernels,
                     pixel_pitch_mm)


def _cell(nodes: np.ndarray, value: float):
    """Cell index and fractional weight for piecewise-linear interpolation."""
    if value < nodes[0] or value > nodes[-1]:
        raise ValueError(f"query {value} outside the lattice hull "
                         f"[{nodes[0]}, {nodes[-1]}]")
    i = int(np.searchsorted(nodes, value, side="right") - 1)
    i = min(i, len(nodes) - 2)
    w = (value - nodes[i]) / (nodes[i + 1] - nodes[i])
    return i, float(w)


def grid_query(model: GridModel, query: ObjectQuery) -> PsfGrid:
    """Kernel-wise trilinear blend of the 8 surrounding stored kernels at the
    nearest stored focus distance, renormalized to sum 1."""
    fi = int(np.argmin(np.abs(model.focus_samples_m - query.f_d_m)))
    ix, wx = _cell(model.x_nodes, query.x_norm)
    iy, wy = _cell(model.y_nodes, query.y_norm)
    iz, wz = _cell(model.depths_m, query.z_m)

    block = model.kernels[fi]
    kernel = np.zeros((model.k, model.k))
    degenerate = None
    for dz, fz in ((0, 1 - wz), (1, wz)):
        for dy, fy in ((0, 1 - wy), (1, wy)):
            for dx, fx in ((0, 1 - wx), (1, wx)):
                w = fz * fy * fx
                if w == 0.0:
                    continue
                corner = block[iz + dz, iy + dy, ix + dx].astype(np.float64)
                if w == 1.0:
                    degenerate = corner
                kernel += w * corner
    if degenerate is not None:
        return PsfGrid(degenerate, model.pixel_pitch_mm, "surrogate_grid")
    total = kernel.sum()
    if total <= 0:
        raise ValueError("interpolated kernel has zero mass")
    return PsfGrid(kernel / total, model.pixel_pitch_mm, "surrogate_grid")


def grid_query_batch(model: GridModel, x_norm, y_norm, z_m, f_d_m) -> np.ndarray:
    frustum_less = [
        grid_query(model, ObjectQuery(x, y, 0.0, 0.0, 0.0, 0.0, z, f_d_m)).kernel
        for x, y, z in zip(np.atleast_1d(x_norm), np.atleast_1d(y_norm),
                           np.atleast_1d(z_m))
    ]
    return np.stack(frustum_less)


# ----------------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TestLattice:
    """Held-out evaluation lattice: focus distances x depths x positions."""

    __test__ = False  # not a pytest class

    focus_m: np.ndarray
    depths_m: np.ndarray
    x_norm: np.ndarray
    y_norm: np.ndarray

    @property
    def queries_per_focus(self) -> int:
        return len(self.depths_m) * len(self.x_norm) * len(self.y_norm)


def default_test_lattice(n_focus=20, n_depths=40, ny=8, nx=10) -> TestLattice:
    """20 focus distances, 40 depths, and 8 (height) x 10 (width) positions
    per depth, all strictly inside the focusable range and offset from any
    grid-model lattice."""
    return TestLattice(
        focus_m=np.geomspace(0.25, 19.0, n_focus),
        depths_m=np.geomspace(0.215, 19.5, n_depths),
        x_norm=np.linspace(-0.9, 0.9, nx),
        y_norm=np.linspace(-0.9, 0.9, ny),
    )


@dataclass
class SurrogateEval:
    l1: float              # mean per-entry |error|
    l2: float              # mean per-entry squared error
    l1_per_kernel: float   # mean per-kernel summed |error|
    l2_per_kernel: float   # mean per-kernel summed squared error
    count: int
    seconds: float


def evaluate_surrogate(
    model,
    lens: LensPrescription,
    lattice: TestLattice | None = None,
    spp: int = 1024,
    seed: int = 77,
    pixel_pitch_mm: float | None = None,
    pmap: ParallelMap = SERIAL,
) -> SurrogateEval:
    """Mean l1/l2 error of a surrogate against freshly ray-traced kernels.

    ``model`` is an MlpModel, a GridModel, or a callable
    ``(points_m, inputs_norm, f_d_m, focused_lens, index_offset) -> (n, k, k)``.
    """
    lattice = lattice or default_test_lattice()
    if pixel_pitch_mm is None:
        pixel_pitch_mm = getattr(model, "pixel_pitch_mm", 0.05)
    k = getattr(model, "k", DEFAULT_KERNEL_SIZE)
    frustum = Frustum.from_lens(lens)

    zz, yy, xx = np.meshgrid(lattice.depths_m, lattice.y_norm, lattice.x_norm,
                             indexing="ij")
    xx, yy, zz = xx.ravel(), yy.ravel(), zz.ravel()
    points_m = frustum.point_from_normalized(xx, yy, zz)

    t0 = time.perf_counter()
    abs_sum = 0.0
    sq_sum = 0.0
    count = 0
    for fi, f_d in enumerate(lattice.focus_m):
        focused = focus_to(lens, float(f_d))
        gt = raytraced_psfs(focused, points_m, spp, seed, pixel_pitch_mm,
                            k=k, pmap=pmap, index_offset=fi * len(points_m),
                            on_empty="uniform")
        if isinstance(model, MlpModel):
            inputs = np.stack([xx, yy, frustum.normalize_depth(zz),
                               np.full_like(xx, frustum.normalize_depth(f_d))], axis=1)
            pred = mlp_forward_batch(model, inputs)
        elif isinstance(model, GridModel):
            pred = grid_query_batch(model, xx, yy, zz, float(f_d))
        else:
            inputs = np.stack([xx, yy, frustum.normalize_depth(zz),
                               np.full_like(xx, frustum.normalize_depth(f_d))], axis=1)
            pred = model(points_m, inputs, float(f_d), focused, fi * len(points_m))
        diff = pred.astype(np.float64).reshape(len(gt), -1) - gt.reshape(len(gt), -1)
        abs_sum += float(np.abs(diff).sum())
        sq_sum += float((diff**2).sum())
        count += len(gt)
    seconds = time.perf_counter() - t0
    entries = count * k * k
    return SurrogateEval(
        l1=abs_sum / entries,
        l2=sq_sum / entries,
        l1_per_kernel=abs_sum / count,
        l2_per_kernel=sq_sum / count,
        count=count,
        seconds=seconds,
    )


# ----------------------------------------------------------------------------
# Model file
# ----------------------------------------------------------------------------

_MLPW_MAGIC = b"MLPW"


def save_mlp(path, model: MlpModel, config: TrainConfig | None = None) -> None:
    """Magic "MLPW"; u32 layer count and dims; float32 row-major weights and
    biases per layer; length-prefixed JSON training-config echo."""
    dims = model.layer_dims
    echo = {
        "k": model.k,
        "pixel_pitch_mm": model.pixel_pitch_mm,
        "config": None if config is None else {
            f.name: getattr(config, f.name) for f in config.__dataclass_fields__.values()
        },
    }
    blob = json.dumps(echo, default=lambda o: list(o) if isinstance(o, tuple) else o,
                      sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MLPW_MAGIC)
        fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        for w, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def load_mlp(path) -> MlpModel:
    with open(path, "rb") as fh:
        if fh.read(4) != _MLPW_MAGIC:
            raise ValueError("not an MLPW model file")
        (ndims,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{ndims}I", fh.read(4 * ndims))
        weights, biases = [], []
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            w = np.frombuffer(fh.read(4 * n_in * n_out), dtype="<f4")
            weights.append(w.reshape(n_out, n_in).copy())
            b = np.frombuffer(fh.read(4 * n_out), dtype="<f4")
            biases.append(b.copy())
        (blob_len,) = struct.unpack("<I", fh.read(4))
        echo = json.loads(fh.read(blob_len).decode("utf-8"))
    k = int(echo.get("k", int(math.sqrt(dims[-1]))))
    return MlpModel(weights, biases, k=k,
                    pixel_pitch_mm=float(echo.get("pixel_pitch_mm", 0.05)))
