"""Experiment runner: the T-step-R-replay loop over the configured
mechanisms, plus sweeps and results emission.

Runs are bit-reproducible from (config, seed): every stochastic choice
draws from a stream derived from the run seed and the step/epoch indices,
optimizer state resets at step boundaries, and all live cross-step state
(model, exemplar store, head state, accuracy rows) round-trips exactly
through the checkpoint, so a resumed run continues identically.
"""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import collider, debias, distill, metrics, nn, replay
from .checkpoint import RunState, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .errors import ConfigurationError, StateError
from .protocol import (
    Dataset,
    explicit_splits,
    gen_synthetic_split,
    load_dataset,
    make_splits,
    order_classes,
    derive_seed,
    rng_from,
)

# seed-stream tags
_S_DATA, _S_ORDER, _S_INIT, _S_CLF, _S_SHUFFLE, _S_RANDK, _S_BALANCE, _S_STORE = range(8)


@dataclass
class PreparedData:
    """Train/test pools in the original class-id space."""

    train: Dataset
    test: Dataset


@dataclass
class RunHooks:
    on_phase: Callable[[str, int], None] | None = None


@dataclass
class RunResult:
    matrix: metrics.AccuracyMatrix
    overall: list[float]
    avg_incremental_accuracy: float
    forgetting_per_step: list[float]
    avg_incremental_forgetting: float
    seed: int
    config: dict
    wall_clock: float


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    d = cfg.data
    if d.kind == "synthetic":
        seed = d.seed if d.seed >= 0 else derive_seed(cfg.run.seed, _S_DATA)
        train, test = gen_synthetic_split(
            d.classes, d.dim, d.train_per_class, d.test_per_class, d.spread, seed
        )
        return PreparedData(train, test)
    if not d.train_path or not d.test_path:
        raise ConfigurationError(f"data.kind={d.kind} needs data.train_path and data.test_path")
    train = load_dataset(d.train_path, d.kind, class_count=d.classes, header=d.header)
    test = load_dataset(d.test_path, d.kind, class_count=d.classes, header=d.header)
    # keep ids disjoint: test ids never mix into training structures anyway,
    # but offsetting makes accidental collisions impossible
    test = Dataset(test.inputs, test.labels, test.ids + len(train) + 1, test.class_count)
    return PreparedData(train, test)


def _remap(ds: Dataset, class_to_idx: dict[int, int]) -> Dataset:
    labels = np.array([class_to_idx[int(l)] for l in ds.labels], dtype=np.int64)
    return Dataset(ds.inputs, labels, ds.ids, len(class_to_idx))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for at in range(0, n, batch_size):
        yield perm[at : at + batch_size]


def _plain_step(
    batch: Dataset,
    model: nn.Model,
    opt: nn.OptimizerState,
    toggles: collider.StepToggles,
    cache: collider.NeighborCache | None = None,
    head: debias.HeadState | None = None,
) -> float:
    """One cross-entropy (+ optional distillation) optimizer step."""
    logits, feats, caches = nn.forward_logits_cached(model, batch.inputs)
    loss, dlogits = nn.batch_cross_entropy(logits, batch.labels)
    dfeat = None
    if toggles.feat_distill or toggles.label_distill:
        if cache is None:
            raise StateError("distillation toggles need the frozen-model cache")
        rows = np.array([cache.row_of[int(a)] for a in batch.ids])
        if toggles.feat_distill:
            fd_loss, dfx = distill.feature_distill_batch(feats, cache.raw[rows])
            loss += toggles.lambda_feat * fd_loss
            dfeat = toggles.lambda_feat * dfx
        if toggles.label_distill:
            c_old = cache.old_logits.shape[1]
            ld_loss, dlx = distill.label_distill_batch(
                logits[:, :c_old], cache.old_logits[rows], toggles.kd_temperature
            )
            loss += toggles.lambda_label * ld_loss
            dlogits[:, :c_old] += toggles.lambda_label * dlx
    grads = nn.backward(model, caches, dlogits, dfeat)
    collider.apply_gradients(model, grads, opt)
    if head is not None and toggles.track_head:
        debias.update_trace(head, feats.mean(axis=0))
    return loss


def run_experiment(
    cfg: ExperimentConfig,
    data: PreparedData | None = None,
    hooks: RunHooks | None = None,
) -> RunResult:
    cfg.validate()
    t_start = time.perf_counter()
    seed = cfg.run.seed

    def phase(name: str, step: int) -> None:
        if hooks is not None and hooks.on_phase is not None:
            hooks.on_phase(name, step)

    if data is None:
        data = prepare_data(cfg)
    num_classes = data.train.class_count
    order = order_classes(num_classes, derive_seed(seed, _S_ORDER))
    if cfg.protocol.split_sizes:
        splits = explicit_splits(order, cfg.protocol.split_sizes)
    else:
        splits = make_splits(order, cfg.protocol.steps)

    r_budget = cfg.protocol.replay_per_class
    store = replay.ExemplarStore(budget=r_budget)
    head: debias.HeadState | None = None
    matrix = metrics.AccuracyMatrix()
    overall: list[float] = []
    model: nn.Model | None = None
    start_step = 0

    if cfg.output.resume:
        state = load_checkpoint(cfg.output.resume)
        if state.run is None:
            raise ConfigurationError(f"{cfg.output.resume}: checkpoint has no resume section")
        if state.run.seed != seed & (1 << 64) - 1:
            raise ConfigurationError(
                f"checkpoint seed {state.run.seed} does not match config seed {seed}"
            )
        model = state.model
        model.learn_scale = cfg.model.learn_scale
        store = state.store if state.store is not None else store
        head = state.head
        for row in state.run.matrix_rows:
            matrix.append_row(row)
        overall = list(state.run.overall)
        start_step = state.run.steps_completed
        if start_step > len(splits):
            raise ConfigurationError("checkpoint has more steps than the configured protocol")

    class_to_idx: dict[int, int] = {}
    for t in range(min(start_step, len(splits))):
        for c in splits[t]:
            class_to_idx[int(c)] = len(class_to_idx)

    for t in range(start_step, len(splits)):
        try:
            model, head = _run_one_step(
                cfg, data, splits, t, class_to_idx, model, store, head, matrix, overall, phase
            )
        except ConfigurationError:
            raise
        except Exception as e:
            raise StateError(f"incremental step {t} failed: {e}") from e
        if cfg.output.checkpoint:
            save_checkpoint(
                cfg.output.checkpoint,
                model,
                store=store,
                head=head,
                run=RunState(seed=seed, matrix_rows=matrix.rows, overall=overall),
            )

    if matrix.num_steps == 0:
        raise StateError("run produced no evaluations")
    forgetting_per_step = [metrics.forgetting(matrix, t) for t in range(1, matrix.num_steps)]
    return RunResult(
        matrix=matrix,
        overall=overall,
        avg_incremental_accuracy=metrics.average_incremental_accuracy(overall),
        forgetting_per_step=forgetting_per_step,
        avg_incremental_forgetting=float(np.mean(forgetting_per_step)) if forgetting_per_step else 0.0,
        seed=seed,
        config=cfg.to_dict(),
        wall_clock=time.perf_counter() - t_start,
    )


def _run_one_step(cfg, data, splits, t, class_to_idx, model, store, head, matrix, overall, phase):
    seed = cfg.run.seed
    classes_t = splits[t]
    new_data = data.train.subset_classes(classes_t)
    for c in classes_t:
        class_to_idx[int(c)] = len(class_to_idx)

    phase("train", t)
    toggles = collider.StepToggles(
        use_dce=cfg.dce.enabled,
        feat_distill=cfg.distill.feature,
        label_distill=cfg.distill.label,
        lambda_feat=cfg.distill.lambda_feat,
        lambda_label=cfg.distill.lambda_label,
        kd_temperature=cfg.distill.kd_temperature,
        track_head=cfg.mer.enabled,
    )

    if t == 0:
        model = nn.init_model(
            data.train.dim,
            cfg.model.hidden,
            len(classes_t),
            rng_from(seed, _S_INIT),
            scale=cfg.model.scale_init,
            learn_scale=cfg.model.learn_scale,
        )
        train_set = _remap(new_data, class_to_idx)
        opt = nn.OptimizerState.for_params(nn.parameters(model), cfg.optim.lr, cfg.optim.momentum)
        base_toggles = collider.StepToggles()  # plain CE on the first half
        for epoch in range(cfg.optim.epochs):
            for rows in _batches(len(train_set), cfg.optim.batch_size, rng_from(seed, _S_SHUFFLE, t, epoch)):
                _plain_step(train_set.take(rows), model, opt, base_toggles)
    else:
        if model is None:
            raise StateError("incremental step without a trained starting model")
        snapshot = nn.clone_model(model)
        train_set = _remap(replay.build_training_set(new_data, store), class_to_idx)
        cache = None
        if toggles.use_dce or toggles.feat_distill or toggles.label_distill:
            cache = collider.build_cache(train_set, snapshot)
        nn.add_classes(model, len(classes_t), rng_from(seed, _S_CLF, t))
        if cfg.mer.enabled and head is None:
            head = debias.HeadState(
                dim=model.extractor.feature_dim,
                momentum=cfg.optim.momentum,
                alpha=cfg.mer.alpha,
                beta=cfg.mer.beta,
            )
        opt = nn.OptimizerState.for_params(nn.parameters(model), cfg.optim.lr, cfg.optim.momentum)
        scheme = collider.WeightScheme(cfg.dce.scheme, cfg.effective_k())
        plan = None
        if toggles.use_dce:
            rng = rng_from(seed, _S_RANDK, t) if cfg.dce.scheme == "rand_k" else None
            plan = collider.plan_members(cache, scheme, rng)
        for epoch in range(cfg.optim.epochs):
            for rows in _batches(len(train_set), cfg.optim.batch_size, rng_from(seed, _S_SHUFFLE, t, epoch)):
                batch = train_set.take(rows)
                if toggles.use_dce:
                    collider.dce_train_step(
                        batch, cache, scheme, model, snapshot, opt, toggles, head, plan
                    )
                else:
                    _plain_step(batch, model, opt, toggles, cache, head)
        if cfg.mer.enabled:
            debias.finalize_head(head)
            if cfg.mer.finetune and store.total() > 0:
                phase("finetune", t)
                sub_rows = debias.balanced_rows(train_set, rng_from(seed, _S_BALANCE, t))
                debias.learn_alpha_beta(
                    model,
                    train_set.take(sub_rows),
                    head,
                    epochs=cfg.mer.finetune_epochs,
                    lr=cfg.mer.finetune_lr,
                )
            head.h = debias.blend_head(head.h_prev, head.h_t, head.beta)
            head.h_prev = head.h_t

    phase("store", t)
    if cfg.replay.enabled and store.budget > 0:
        replay.update_store(
            store,
            new_data,
            model,
            strategy=cfg.replay.strategy,
            rng=rng_from(seed, _S_STORE, t) if cfg.replay.strategy == "random" else None,
        )

    phase("evaluate", t)
    predict = debias.apply_to_model(model, head, cfg.mer.enabled)
    groups = [_remap(data.test.subset_classes(splits[g]), class_to_idx) for g in range(t + 1)]
    row, ov = metrics.evaluate(predict, groups)
    matrix.append_row(row)
    overall.append(ov)
    return model, head


# ---------------------------------------------------------------------------
# results emission


def emit_results(result: RunResult, path) -> None:
    """CSV with per-step/group accuracies and the summary measures.

    All values use fixed 4-decimal formatting; output bytes are a pure
    function of (config, seed).
    """
    if result.matrix.num_steps == 0:
        raise ValueError("cannot emit an empty run (no step-0 evaluation)")
    lines = ["step,group,accuracy"]
    for t, row in enumerate(result.matrix.rows):
        for g, acc in enumerate(row):
            lines.append(f"{t},{g},{acc:.4f}")
        lines.append(f"{t},overall,{result.overall[t]:.4f}")
    lines.append(f"summary,avg_inc_acc,{result.avg_incremental_accuracy:.4f}")
    for t, f in enumerate(result.forgetting_per_step, start=1):
        lines.append(f"summary,F_{t},{f:.4f}")
    lines.append(f"summary,avg_inc_forgetting,{result.avg_incremental_forgetting:.4f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_results_summary(path) -> dict[str, float]:
    """Summary rows of an emitted results CSV, keyed by measure name."""
    out: dict[str, float] = {}
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if rec and rec[0] == "summary":
                out[rec[1]] = float(rec[2])
    return out


# ---------------------------------------------------------------------------
# sweeps

_AXES = {
    "R": ("protocol", "replay_per_class", int),
    "T": ("protocol", "steps", int),
    "K": ("dce", "k", int),
    "scheme": ("dce", "scheme", str),
}


@dataclass
class SweepResult:
    axis: str
    rows: list[tuple[object, int, RunResult]] = field(default_factory=list)

    def aggregate(self) -> list[dict]:
        """Per-value mean/stddev of the summary measures over seeds."""
        out = []
        for value in dict.fromkeys(v for v, _, _ in self.rows):
            accs = [r.avg_incremental_accuracy for v, _, r in self.rows if v == value]
            forgets = [r.avg_incremental_forgetting for v, _, r in self.rows if v == value]
            out.append(
                {
                    "value": value,
                    "runs": len(accs),
                    "acc_mean": float(np.mean(accs)),
                    "acc_std": float(np.std(accs)),
                    "forget_mean": float(np.mean(forgets)),
                    "forget_std": float(np.std(forgets)),
                }
            )
        return out


def sweep(cfg: ExperimentConfig, axis: str, values: list) -> SweepResult:
    """One run per (value, seed); aggregation is order-independent."""
    if axis not in _AXES:
        raise ConfigurationError(f"unknown sweep axis {axis!r}; expected one of {sorted(_AXES)}")
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    section, key, typ = _AXES[axis]
    result = SweepResult(axis=axis)
    for raw in values:
        value = typ(raw)
        for s in cfg.run.seeds:
            run_cfg = copy.deepcopy(cfg)
            setattr(getattr(run_cfg, section), key, value)
            run_cfg.run.seed = s
            run_cfg.output.results = ""
            run_cfg.output.checkpoint = ""
            run_cfg.output.resume = ""
            run_cfg.validate()
            result.rows.append((value, s, run_experiment(run_cfg)))
    return result


def emit_sweep(result: SweepResult, path) -> None:
    lines = [f"{result.axis},seed,avg_inc_acc,avg_inc_forgetting"]
    for value, s, r in result.rows:
        lines.append(f"{value},{s},{r.avg_incremental_accuracy:.4f},{r.avg_incremental_forgetting:.4f}")
    lines.append("value,runs,acc_mean,acc_std,forget_mean,forget_std")
    for agg in result.aggregate():
        lines.append(
            f"{agg['value']},{agg['runs']},{agg['acc_mean']:.4f},{agg['acc_std']:.4f},"
            f"{agg['forget_mean']:.4f},{agg['forget_std']:.4f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
