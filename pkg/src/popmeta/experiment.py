"""End-to-end protocol: population sampling, meta-training with hidden-size
selection on a validation structure, and few-shot evaluation of the
meta-trained network against the per-structure GP baseline.

One ``run_experiment`` call covers one (problem, training-population-size)
cell: it meta-trains every candidate hidden size, keeps the one with the
lowest validation loss, then for every shot count adapts and scores both
methods on every testing structure.  Everything is a pure function of the
master seed; evaluation over testing structures can run on several worker
processes without changing any result.
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import gp, meta, pca
from .metrics import nmse, population_sigma
from .population import (
    DEFAULT_STIFFNESS_INTERVAL,
    DEFAULT_TEMPERATURE_RANGE,
    FrequencyGrid,
    StructureSpec,
    TargetKind,
    make_task_dataset,
    sample_population,
)
from .seeding import derive_seed

DEFAULT_HIDDEN_SIZES = tuple(range(10, 101, 10))
DEFAULT_SHOT_COUNTS = tuple(range(1, 11))


class Problem(str, Enum):
    ONE = "line_1hz"
    TWO = "line_50hz"
    THREE = "frf_pca3"

    @property
    def target_kind(self) -> TargetKind:
        return {
            Problem.ONE: TargetKind.LINE_1HZ,
            Problem.TWO: TargetKind.LINE_50HZ,
            Problem.THREE: TargetKind.FULL_FRF,
        }[self]

    @property
    def uses_pca(self) -> bool:
        return self is Problem.THREE

    @classmethod
    def parse(cls, name) -> "Problem":
        if isinstance(name, cls):
            return name
        aliases = {"one": cls.ONE, "1": cls.ONE, "two": cls.TWO, "2": cls.TWO,
                   "three": cls.THREE, "3": cls.THREE}
        key = str(name).strip().lower()
        if key in aliases:
            return aliases[key]
        return cls(key)


@dataclass
class ExperimentConfig:
    problem: Problem
    master_seed: int
    n_train_structures: int = 8
    hidden_sizes: tuple = DEFAULT_HIDDEN_SIZES
    shot_counts: tuple = DEFAULT_SHOT_COUNTS
    n_test_structures: int = 200
    eval_samples_per_structure: int = 100
    train_samples_per_structure: int = 100
    val_shots: int = 5
    maml: meta.MAMLConfig = field(default_factory=meta.MAMLConfig)
    gp_restarts: int = 8
    pca_components: int = 3
    stiffness_interval: tuple = DEFAULT_STIFFNESS_INTERVAL
    temperature_range: tuple = DEFAULT_TEMPERATURE_RANGE
    workers: int = 1

    def __post_init__(self):
        self.problem = Problem.parse(self.problem)
        if min(self.n_train_structures, self.n_test_structures,
               self.eval_samples_per_structure, self.train_samples_per_structure,
               self.gp_restarts, self.workers) < 1:
            raise ValueError("all counts must be positive")
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden_sizes must be positive")
        if not self.shot_counts or any(not 1 <= s <= 10 for s in self.shot_counts):
            raise ValueError("shot_counts must lie in [1, 10]")

    def to_dict(self):
        out = {
            "problem": self.problem.value,
            "master_seed": self.master_seed,
            "n_train_structures": self.n_train_structures,
            "hidden_sizes": list(self.hidden_sizes),
            "shot_counts": list(self.shot_counts),
            "n_test_structures": self.n_test_structures,
            "eval_samples_per_structure": self.eval_samples_per_structure,
            "train_samples_per_structure": self.train_samples_per_structure,
            "val_shots": self.val_shots,
            "maml": {
                "alpha": self.maml.alpha,
                "beta": self.maml.beta,
                "epochs": self.maml.epochs,
                "inner_batch": self.maml.inner_batch,
                "meta_batch": self.maml.meta_batch,
                "adapt_steps": self.maml.adapt_steps,
                "second_order": self.maml.second_order,
                "seed": self.maml.seed,
            },
            "gp_restarts": self.gp_restarts,
            "pca_components": self.pca_components,
            "stiffness_interval": list(self.stiffness_interval),
            "temperature_range": list(self.temperature_range),
            "workers": self.workers,
        }
        return out


@dataclass
class ResultRecord:
    """One evaluation cell: (problem, method, population size, shots)."""

    problem: str
    method: str                 # "maml" or "gp"
    n_train_structures: int
    hidden: int | None          # None for the GP
    shots: int
    nmse_mean: float
    nmse_std: float
    per_structure_nmse: list
    wall_time: float
    n_failed: int = 0


@dataclass
class TestSet:
    structure: StructureSpec
    eval_x: np.ndarray
    eval_y: np.ndarray
    shots: dict                 # shot count -> (x, y)


@dataclass
class CellData:
    train_structures: list
    validation_structure: StructureSpec
    test_structures: list
    train_tasks: list           # [(x, y)] in problem target space
    validation_task: tuple
    test_sets: list
    pca_model: pca.PCAModel | None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list
    selected_hidden: int
    validation_losses: dict
    sigma_pop: float
    model: meta.MetaModel
    pca_model: pca.PCAModel | None
    populations: dict           # sampled (id, k0) per role, for the manifest
    audit: dict
    timings: dict


def select_hidden(validation_losses: dict) -> int:
    """Argmin of validation loss; ties go to the smaller hidden size."""
    if not validation_losses:
        raise ValueError("no validation losses to select from")
    return min(validation_losses.items(), key=lambda kv: (kv[1], kv[0]))[0]


def build_cell_data(config: ExperimentConfig, pca_model=None) -> CellData:
    """Sample the populations and materialize every dataset for one cell.

    For the full-FRF problem the targets are projected onto principal
    components fitted on the pooled training + validation samples (testing
    structures never enter the fit); pass ``pca_model`` to reuse a frozen
    projection instead, e.g. when evaluating from a checkpoint.
    """
    seed = config.master_seed
    kind = config.problem.target_kind
    grid = FrequencyGrid.default()
    n_train = config.n_train_structures

    trainval = sample_population(
        n_train + 1, config.stiffness_interval,
        seed=derive_seed(seed, "trainval", n_train), id_prefix="tr",
    )
    train_structures, validation_structure = trainval[:-1], trainval[-1]
    test_structures = sample_population(
        config.n_test_structures, config.stiffness_interval,
        seed=derive_seed(seed, "test"), id_prefix="te",
    )

    data_seed = derive_seed(seed, "traindata", n_train)
    train_ds = [
        make_task_dataset(s, config.train_samples_per_structure, kind,
                          config.temperature_range, grid, seed=data_seed)
        for s in trainval
    ]
    eval_seed = derive_seed(seed, "evaldata")
    eval_ds = [
        make_task_dataset(s, config.eval_samples_per_structure, kind,
                          config.temperature_range, grid, seed=eval_seed)
        for s in test_structures
    ]
    shots_ds = {
        S: [
            make_task_dataset(s, S, kind, config.temperature_range, grid,
                              seed=derive_seed(seed, "shotdata", S))
            for s in test_structures
        ]
        for S in config.shot_counts
    }

    if config.problem.uses_pca:
        if pca_model is None:
            corpus = np.concatenate([ds.targets for ds in train_ds], axis=0)
            pca_model = pca.pca_fit(corpus, config.pca_components)
        project = lambda y: pca.pca_transform(pca_model, y)  # noqa: E731
    else:
        pca_model = None
        project = lambda y: y  # noqa: E731

    train_tasks = [(ds.inputs, project(ds.targets)) for ds in train_ds[:-1]]
    validation_task = (train_ds[-1].inputs, project(train_ds[-1].targets))
    test_sets = [
        TestSet(
            structure=s,
            eval_x=ev.inputs,
            eval_y=project(ev.targets),
            shots={S: (shots_ds[S][i].inputs, project(shots_ds[S][i].targets))
                   for S in config.shot_counts},
        )
        for i, (s, ev) in enumerate(zip(test_structures, eval_ds))
    ]
    return CellData(
        train_structures=train_structures,
        validation_structure=validation_structure,
        test_structures=test_structures,
        train_tasks=train_tasks,
        validation_task=validation_task,
        test_sets=test_sets,
        pca_model=pca_model,
    )


def audit_cell(config: ExperimentConfig, data: CellData) -> dict:
    """Leakage checks; raises on violation and returns the audit trail."""
    train_ids = {s.id for s in data.train_structures} | {data.validation_structure.id}
    test_ids = {s.id for s in data.test_structures}
    overlap = sorted(train_ids & test_ids)
    if overlap:
        raise ValueError(f"testing structures leak into training: {overlap}")
    shot_eval_clashes = 0
    for ts in data.test_sets:
        ev = set(ts.eval_x.tolist())
        for S, (sx, _) in ts.shots.items():
            shot_eval_clashes += len(ev & set(sx.tolist()))
    if shot_eval_clashes:
        raise ValueError(f"{shot_eval_clashes} shot temperatures reappear in eval sets")
    return {
        "train_test_id_overlap": overlap,
        "shot_eval_temperature_clashes": shot_eval_clashes,
        "meta_update_sees_test_tasks": False,  # enforced by construction
    }


def train_cell(config: ExperimentConfig, data: CellData):
    """Meta-train all hidden sizes, return (best model, validation losses)."""
    maml_cfg = replace(
        config.maml, seed=derive_seed(config.master_seed, "maml", config.n_train_structures)
    )
    losses = {}
    best_model = None
    for h in sorted(config.hidden_sizes):
        model = meta.meta_train(
            data.train_tasks, data.validation_task, maml_cfg, hidden=h,
            input_range=config.temperature_range, val_shots=config.val_shots,
        )
        losses[h] = model.val_history[model.best_epoch]
        if best_model is None or losses[h] < losses[best_model.params.hidden]:
            best_model = model
    assert best_model.params.hidden == select_hidden(losses)
    return best_model, losses


def _evaluate_structure(index, test_set, model, config, sigma_pop):
    """Both methods on one testing structure, every shot count."""
    out = {}
    for S in config.shot_counts:
        sx, sy = test_set.shots[S]
        t0 = time.perf_counter()
        adapted = meta.adapt(model, (sx, sy))
        preds = model.predict(test_set.eval_x, adapted)
        maml_err = nmse(preds, test_set.eval_y, sigma_pop)
        t1 = time.perf_counter()
        gp_err, failed = np.nan, 1
        try:
            xn = model.norm.norm_x(sx)
            yn = model.norm.norm_y(sy.reshape(sy.shape[0], -1))
            gp_models = gp.gp_fit_multi(
                xn, yn, restarts=config.gp_restarts,
                seed=derive_seed(config.master_seed, "gp", config.n_train_structures,
                                 S, test_set.structure.id),
            )
            qx = model.norm.norm_x(test_set.eval_x)
            preds_n = np.column_stack([gp.gp_predict_mean(m, qx) for m in gp_models])
            gp_err = nmse(model.norm.denorm_y(preds_n), test_set.eval_y, sigma_pop)
            failed = 0
        except (ValueError, np.linalg.LinAlgError):
            pass
        t2 = time.perf_counter()
        out[S] = (maml_err, t1 - t0, gp_err, failed, t2 - t1)
    return index, out


_WORKER_CTX = {}


def _init_worker(test_sets, model, config, sigma_pop):
    _WORKER_CTX["args"] = (test_sets, model, config, sigma_pop)


def _worker_eval(index):
    test_sets, model, config, sigma_pop = _WORKER_CTX["args"]
    return _evaluate_structure(index, test_sets[index], model, config, sigma_pop)


def evaluate_cell(config: ExperimentConfig, data: CellData, model: meta.MetaModel,
                  sigma_pop: float):
    """Score MAML and GP per (shot count, testing structure); build records."""
    n = len(data.test_sets)
    if config.workers > 1:
        with ProcessPoolExecutor(
            max_workers=config.workers,
            initializer=_init_worker,
            initargs=(data.test_sets, model, config, sigma_pop),
        ) as pool:
            results = dict(pool.map(_worker_eval, range(n), chunksize=8))
        per_structure = [results[i] for i in range(n)]
    else:
        per_structure = [
            _evaluate_structure(i, ts, model, config, sigma_pop)[1]
            for i, ts in enumerate(data.test_sets)
        ]

    records = []
    hidden = model.params.hidden
    for S in config.shot_counts:
        maml_vals = [per_structure[i][S][0] for i in range(n)]
        maml_time = sum(per_structure[i][S][1] for i in range(n))
        gp_vals = [per_structure[i][S][2] for i in range(n)]
        gp_failed = sum(per_structure[i][S][3] for i in range(n))
        gp_time = sum(per_structure[i][S][4] for i in range(n))
        records.append(ResultRecord(
            problem=config.problem.value, method="maml",
            n_train_structures=config.n_train_structures, hidden=hidden, shots=S,
            nmse_mean=float(np.mean(maml_vals)), nmse_std=float(np.std(maml_vals)),
            per_structure_nmse=[float(v) for v in maml_vals],
            wall_time=maml_time,
        ))
        ok = [v for v in gp_vals if np.isfinite(v)]
        records.append(ResultRecord(
            problem=config.problem.value, method="gp",
            n_train_structures=config.n_train_structures, hidden=None, shots=S,
            nmse_mean=float(np.mean(ok)) if ok else float("nan"),
            nmse_std=float(np.std(ok)) if ok else float("nan"),
            per_structure_nmse=[float(v) for v in gp_vals],
            wall_time=gp_time, n_failed=int(gp_failed),
        ))
    return records


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Full protocol for one (problem, training-population-size) cell."""
    timings = {}
    t0 = time.perf_counter()
    data = build_cell_data(config)
    audit = audit_cell(config, data)
    timings["data_generation"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    model, losses = train_cell(config, data)
    timings["meta_training"] = time.perf_counter() - t0

    sigma_pop = population_sigma(np.concatenate([ts.eval_y for ts in data.test_sets]))

    t0 = time.perf_counter()
    records = evaluate_cell(config, data, model, sigma_pop)
    timings["evaluation"] = time.perf_counter() - t0

    populations = {
        "train": [(s.id, s.base_stiffness) for s in data.train_structures],
        "validation": [(data.validation_structure.id,
                        data.validation_structure.base_stiffness)],
        "test": [(s.id, s.base_stiffness) for s in data.test_structures],
    }
    return ExperimentResult(
        config=config,
        records=records,
        selected_hidden=model.params.hidden,
        validation_losses=losses,
        sigma_pop=sigma_pop,
        model=model,
        pca_model=data.pca_model,
        populations=populations,
        audit=audit,
        timings=timings,
    )


def run_sweep(base_config: ExperimentConfig, n_train_list=(2, 4, 6, 8)):
    """run_experiment for every training-population size of one problem."""
    return [
        run_experiment(replace(base_config, n_train_structures=n))
        for n in n_train_list
    ]
