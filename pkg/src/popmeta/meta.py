"""Meta-learning of network initializations over a fixed set of tasks.

Each training epoch takes one task-specific gradient step per task (the
inner update) and then moves the shared initialization against the gradient
of the summed post-update losses (the meta update).  With ``second_order``
set, that gradient is backpropagated through the inner step, which adds an
exact Hessian-vector-product correction; unset, the gradient at the updated
parameters is used as-is (the first-order approximation).

The task set is fixed and finite: every epoch iterates all training tasks,
resampling disjoint inner/meta batches from each task's samples.  A held
out validation task is adapted and scored every epoch (it never enters the
meta update) and the parameters from the best validation epoch are kept.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .nn import MLPParams, ParamGradient
from .seeding import rng_for


@dataclass
class MAMLConfig:
    alpha: float = 0.05          # inner (task-specific) learning rate
    beta: float = 0.01           # meta learning rate
    epochs: int = 10000
    inner_batch: int = 10        # samples per task for the inner step
    meta_batch: int = 10         # samples per task for the meta loss
    adapt_steps: int = 25        # test-time gradient steps
    second_order: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if min(self.epochs, self.inner_batch, self.meta_batch, self.adapt_steps) < 1:
            raise ValueError("epochs, batch sizes and adapt_steps must be >= 1")


@dataclass
class Normalization:
    """Input/target scaling frozen at meta-train time.

    Inputs map affinely onto [-1, 1] from the configured input range;
    targets are standardized per dimension by the pooled training data.
    """

    x_center: float
    x_half: float
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def fit(cls, task_arrays, input_range=None):
        xs = np.concatenate([x.ravel() for x, _ in task_arrays])
        ys = np.concatenate([y for _, y in task_arrays], axis=0)
        if input_range is None:
            lo, hi = float(xs.min()), float(xs.max())
        else:
            lo, hi = map(float, input_range)
        half = (hi - lo) / 2.0
        std = ys.std(axis=0)
        return cls(
            x_center=(hi + lo) / 2.0,
            x_half=half if half > 0 else 1.0,
            y_mean=ys.mean(axis=0),
            y_std=np.where(std > 0, std, 1.0),
        )

    def norm_x(self, x):
        return (np.asarray(x, dtype=np.float64) - self.x_center) / self.x_half

    def norm_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def denorm_y(self, y):
        return np.asarray(y, dtype=np.float64) * self.y_std + self.y_mean

    def to_dict(self):
        return {
            "x_center": self.x_center,
            "x_half": self.x_half,
            "y_mean": nn.encode_array(self.y_mean),
            "y_std": nn.encode_array(self.y_std),
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(
            x_center=float(obj["x_center"]),
            x_half=float(obj["x_half"]),
            y_mean=nn.decode_array(obj["y_mean"]),
            y_std=nn.decode_array(obj["y_std"]),
        )


@dataclass
class MetaModel:
    """Meta-trained initialization plus everything needed to deploy it."""

    params: MLPParams
    config: MAMLConfig
    norm: Normalization
    training_history: list = field(default_factory=list)  # meta loss per epoch
    val_history: list = field(default_factory=list)       # adapted val loss per epoch
    best_epoch: int = 0

    def predict(self, x_raw, params: MLPParams | None = None) -> np.ndarray:
        """Evaluate in raw units: normalize inputs, denormalize outputs."""
        p = self.params if params is None else params
        x = np.atleast_1d(np.asarray(x_raw, dtype=np.float64))
        out = nn.forward_batch(p, self.norm.norm_x(x).reshape(-1, 1))
        return self.norm.denorm_y(out)

    def to_dict(self):
        return {
            "params": nn.params_to_dict(self.params),
            "config": asdict(self.config),
            "normalization": self.norm.to_dict(),
            "training_history": self.training_history,
            "val_history": self.val_history,
            "best_epoch": self.best_epoch,
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(
            params=nn.params_from_dict(obj["params"]),
            config=MAMLConfig(**obj["config"]),
            norm=Normalization.from_dict(obj["normalization"]),
            training_history=list(obj["training_history"]),
            val_history=list(obj["val_history"]),
            best_epoch=int(obj["best_epoch"]),
        )


def task_arrays(task):
    """Extract (X, Y) float64 matrices from a TaskDataset or an (x, y) pair."""
    if hasattr(task, "inputs") and hasattr(task, "targets"):
        x, y = task.inputs, task.targets
    else:
        x, y = task
    return nn.as_batch((np.asarray(x), np.asarray(y)))


def inner_update(params: MLPParams, task_batch, alpha: float) -> MLPParams:
    """One plain gradient step at rate alpha; the input params are untouched."""
    return nn.axpy_update(params, nn.grad(params, task_batch), alpha)


# Batch indices are drawn in blocks of this many epochs per stream so the
# per-epoch stream-derivation cost amortizes away in the training loop.
BATCH_BLOCK = 128


def _batch_block(task_sizes, config: MAMLConfig, block: int):
    """Shuffled index rows for epochs [block*B, (block+1)*B), one per task."""
    need = config.inner_batch + config.meta_batch
    rng = rng_for(config.seed, "batches", block)
    per_task = []
    for n in task_sizes:
        if n < need:
            raise ValueError(
                f"task has {n} samples; inner_batch + meta_batch = {need} required"
            )
        mat = np.tile(np.arange(n, dtype=np.intp), (BATCH_BLOCK, 1))
        rng.permuted(mat, axis=1, out=mat)
        per_task.append(mat)
    return per_task


def epoch_batches(task_sizes, config: MAMLConfig, epoch: int):
    """Disjoint (inner, meta) index sets per task for one epoch.

    A pure function of (config.seed, epoch, task sizes), so the result is
    independent of call order and of any execution parallelism.
    """
    block, off = divmod(epoch, BATCH_BLOCK)
    ib, need = config.inner_batch, config.inner_batch + config.meta_batch
    return [
        (rows[off, :ib], rows[off, ib:need])
        for rows in _batch_block(task_sizes, config, block)
    ]


def _raw_grad(raw, X, Y):
    _, gW1, gb1, gW2, gb2 = nn._K.loss_grad(*raw, X, Y)
    return gW1, gb1, gW2, gb2


def _raw_step(raw, g, lr):
    return (raw[0] - lr * g[0], raw[1] - lr * g[1], raw[2] - lr * g[2], raw[3] - lr * g[3])


def _meta_value_and_gradient(raw, tasks_xy, batches, config):
    """Summed post-inner-update loss and its gradient w.r.t. the shared params."""
    total = 0.0
    acc = (
        np.zeros_like(raw[0]),
        np.zeros_like(raw[1]),
        np.zeros_like(raw[2]),
        np.zeros_like(raw[3]),
    )
    for (X, Y), (inner_idx, meta_idx) in zip(tasks_xy, batches):
        total += nn._K.maml_contrib(
            *raw, X, Y, inner_idx, meta_idx, config.alpha, config.second_order, *acc
        )
    return total, acc


def _prepare(params, tasks, config, epoch):
    if not tasks:
        raise ValueError("at least one task is required")
    tasks_xy = [task_arrays(t) for t in tasks]
    for X, Y in tasks_xy:
        nn._check_dims(params, X, Y)
    batches = epoch_batches([x.shape[0] for x, _ in tasks_xy], config, epoch)
    return tasks_xy, batches


def meta_gradient(params: MLPParams, tasks, config: MAMLConfig, epoch: int = 0) -> ParamGradient:
    """Gradient of the summed post-inner-update task losses at ``params``."""
    tasks_xy, batches = _prepare(params, tasks, config, epoch)
    _, acc = _meta_value_and_gradient(params.arrays(), tasks_xy, batches, config)
    return MLPParams(*acc)


def meta_objective(params: MLPParams, tasks, config: MAMLConfig, epoch: int = 0) -> float:
    """The scalar whose gradient ``meta_gradient`` returns (for oracles)."""
    tasks_xy, batches = _prepare(params, tasks, config, epoch)
    raw = params.arrays()
    total = 0.0
    for (X, Y), (inner_idx, meta_idx) in zip(tasks_xy, batches):
        g_tr = _raw_grad(raw, X[inner_idx], Y[inner_idx])
        adapted = _raw_step(raw, g_tr, config.alpha)
        total += nn._K.loss(*adapted, X[meta_idx], Y[meta_idx])
    return float(total)


def _raw_adapt(raw, X, Y, steps, alpha):
    return nn._K.gd_adapt(*raw, X, Y, steps, alpha)


def meta_train(train_tasks, validation_task, config: MAMLConfig, hidden: int,
               input_range=None, val_shots: int = 5) -> MetaModel:
    """Run the full meta-training loop and keep the best-validation params.

    ``train_tasks``/``validation_task`` hold raw (unscaled) samples; the
    normalization fitted here from the training tasks is frozen into the
    returned model.  Deterministic given config.seed.
    """
    if not train_tasks:
        raise ValueError("at least one training task is required")
    raw_train = [task_arrays(t) for t in train_tasks]
    norm = Normalization.fit(raw_train, input_range=input_range)
    tasks_xy = [
        (np.ascontiguousarray(norm.norm_x(x)), np.ascontiguousarray(norm.norm_y(y)))
        for x, y in raw_train
    ]
    vx, vy = task_arrays(validation_task)
    vx = np.ascontiguousarray(norm.norm_x(vx))
    vy = np.ascontiguousarray(norm.norm_y(vy))
    if vx.shape[0] <= val_shots:
        raise ValueError(f"validation task needs more than {val_shots} samples")
    vperm = rng_for(config.seed, "val_split").permutation(vx.shape[0])
    shot_idx, eval_idx = vperm[:val_shots], vperm[val_shots:]
    vx_shot = np.ascontiguousarray(vx[shot_idx])
    vy_shot = np.ascontiguousarray(vy[shot_idx])
    vx_eval = np.ascontiguousarray(vx[eval_idx])
    vy_eval = np.ascontiguousarray(vy[eval_idx])

    in_dim, out_dim = tasks_xy[0][0].shape[1], tasks_xy[0][1].shape[1]
    params = nn.init_params(in_dim, hidden, out_dim, seed=config.seed)
    raw = params.arrays()
    sizes = [x.shape[0] for x, _ in tasks_xy]

    training_history = []
    val_history = []
    best = (np.inf, 0, raw)
    ib, need = config.inner_batch, config.inner_batch + config.meta_batch
    block = None
    for epoch in range(config.epochs):
        off = epoch % BATCH_BLOCK
        if off == 0:
            block = _batch_block(sizes, config, epoch // BATCH_BLOCK)
        batches = [(rows[off, :ib], rows[off, ib:need]) for rows in block]
        value, g = _meta_value_and_gradient(raw, tasks_xy, batches, config)
        raw = _raw_step(raw, g, config.beta)
        training_history.append(float(value))

        adapted = _raw_adapt(raw, vx_shot, vy_shot, config.adapt_steps, config.alpha)
        val_loss = float(nn._K.loss(*adapted, vx_eval, vy_eval))
        val_history.append(val_loss)
        if val_loss < best[0]:
            best = (val_loss, epoch, raw)

    best_params = MLPParams(*(np.ascontiguousarray(a) for a in best[2]))
    return MetaModel(
        params=best_params,
        config=config,
        norm=norm,
        training_history=training_history,
        val_history=val_history,
        best_epoch=best[1],
    )


def adapt(model: MetaModel, shots, steps: int | None = None,
          alpha: float | None = None) -> MLPParams:
    """Gradient steps on raw-unit shots, starting from the meta params.

    Returns adapted parameters in the model's normalized space (use
    ``model.predict(x, params)`` for raw-unit predictions); the meta
    parameters themselves are not modified.
    """
    X, Y = task_arrays(shots)
    if X.shape[0] < 1:
        raise ValueError("at least one shot is required")
    steps = model.config.adapt_steps if steps is None else steps
    alpha = model.config.alpha if alpha is None else alpha
    if steps < 1:
        raise ValueError("steps must be >= 1")
    Xn = np.ascontiguousarray(model.norm.norm_x(X))
    Yn = np.ascontiguousarray(model.norm.norm_y(Y))
    raw = _raw_adapt(model.params.arrays(), Xn, Yn, steps, alpha)
    return MLPParams(*(np.ascontiguousarray(a) for a in raw))
