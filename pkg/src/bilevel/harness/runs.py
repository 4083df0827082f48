"""Experiment runs behind the CLI subcommands.

Every run writes into its own output directory, which it locks for its
lifetime.  Runs that iterate write a JSON-lines metrics log whose records
are ``{iter, f_train_batch, metaval_acc, metaval_ci, wallclock}``;
``wallclock`` stays ``null`` unless ``record_wallclock`` is set, so that
repeated runs produce identical bytes.
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np

from ..data import TaskGenerator, TaskGeneratorConfig, make_meta_splits, sample_episode
from ..diffgraph import FlatVector, TapeBuilder, value_and_vjp
from ..dynamics import DynamicsSpec, unroll
from ..exceptions import ConfigurationError, NumericError
from ..hypergrad import (finite_diff_check, forward_hypergrad, outer_value, relative_errors, reverse_hypergrad,
                         tune_hyperparams)
from ..meta import MetaConfig, ReprModel, evaluate_meta, train_meta
from ..optim import Adam
from ..problems import (INIT_PREFIX, LOG_STEP, Dataset, HyperParams, LogisticHOProblem, QuadraticProblem, SplitDataset,
                        cross_entropy_tape)
from .checkpoint import Checkpoint, RunLock, load_checkpoint, save_checkpoint
from .config import RunConfig

METRICS = "metrics.jsonl"
RESULT = "result.json"


class MetricsLog:
    FIELDS = ("iter", "f_train_batch", "metaval_acc", "metaval_ci", "wallclock")

    def __init__(self, path, record_wallclock=False):
        self.path = Path(path)
        self.record_wallclock = record_wallclock
        self._start = time.perf_counter()
        self._fh = open(self.path, "w", encoding="utf-8")

    def write(self, **record):
        if self.record_wallclock:
            record["wallclock"] = round(time.perf_counter() - self._start, 3)
        row = {k: record.get(k) for k in self.FIELDS}
        row.update({k: v for k, v in record.items() if k not in self.FIELDS})
        self._fh.write(json.dumps(row) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _splits(cfg: RunConfig):
    ep = cfg.episode
    return make_meta_splits(cfg.generator, cfg.data_seed, ep.n_way, ep.k_shot, ep.val_per_class)


def _meta_spec(horizon: int) -> DynamicsSpec:
    return DynamicsSpec(kind="GD", horizon=horizon)


# ---------------------------------------------------------------------------
# check-grad


def _random_quadratic(rng):
    dim = int(rng.integers(1, 5))
    prob = QuadraticProblem(dim, val_target=rng.normal(size=dim), learned_init=bool(rng.integers(2)),
                            explicit_penalty=bool(rng.integers(2)))
    lam = prob.hyperparams(target=rng.normal(size=dim), step=float(rng.uniform(0.05, 0.9)),
                           init=rng.normal(size=dim))
    return prob, lam, DynamicsSpec(horizon=int(rng.integers(1, 51)))


def _random_episode(rng):
    d = int(rng.integers(4, 21))
    gen = TaskGenerator(TaskGeneratorConfig(latent_dim=min(3, d), observed_dim=d, num_latent_classes=10,
                                            split=(10, 0, 0), seed=int(rng.integers(1000))))
    n_way = int(rng.integers(2, 6))
    episode = sample_episode(gen, np.arange(10), rng, n_way, int(rng.integers(1, 4)), int(rng.integers(2, 6)))
    hidden = [(), (8,), (16,)][int(rng.integers(3))]
    model = ReprModel(d, hidden, int(rng.integers(4, 33)))
    mc = MetaConfig(model, n_way, learned_init=bool(rng.integers(2)), learned_reg=bool(rng.integers(2)))
    lam = mc.init_hyperparams(int(rng.integers(1000)), step=float(rng.uniform(0.05, 0.5)))
    # nonzero learned init so its gradient is generic
    lam = lam.updated({n: rng.normal(0.0, 0.1, s) for n, s in lam.layout.items() if n.startswith(INIT_PREFIX)})
    return mc.problem(episode), lam, DynamicsSpec(horizon=int(rng.integers(1, 11)))


def _random_logistic(rng):
    gen = TaskGenerator(TaskGeneratorConfig(latent_dim=3, observed_dim=6, num_latent_classes=4, split=(4, 0, 0),
                                            seed=int(rng.integers(1000))))
    k = int(rng.integers(2, 5))
    n_tr, n_val = int(rng.integers(3, 9)), 5
    X_tr, X_val = gen.sample(np.arange(k), n_tr, rng), gen.sample(np.arange(k), n_val, rng)
    y_tr, y_val = np.repeat(np.arange(k), n_tr), np.repeat(np.arange(k), n_val)
    data = SplitDataset(Dataset(X_tr, y_tr, np.arange(len(y_tr))),
                        Dataset(X_val, y_val, len(y_tr) + np.arange(len(y_val))))
    sgdm = bool(rng.integers(2))
    learned_mu = sgdm and bool(rng.integers(2))
    prob = LogisticHOProblem(data, k, learned_reg=bool(rng.integers(2)), learned_momentum=learned_mu)
    lam = prob.hyperparams(step=float(rng.uniform(0.05, 0.5)), reg=float(rng.uniform(1e-3, 1e-1)),
                           momentum=float(rng.uniform(0.1, 0.9)))
    spec = DynamicsSpec(kind="SGDM" if sgdm else "GD", horizon=int(rng.integers(1, 11)),
                        momentum=None if learned_mu else (0.5 if sgdm else 0.0),
                        batch_size=int(rng.integers(2, len(y_tr) + 1)), seed=int(rng.integers(1000)))
    return prob, lam, spec


_BUILDERS = {"quadratic": _random_quadratic, "episode": _random_episode, "logistic": _random_logistic}


def check_grad_problem(kind, prob, lam, spec, cfg, rng) -> dict:
    """Finite differences against reverse mode, and forward against reverse mode."""
    cg = cfg.check_grad
    rev = reverse_hypergrad(unroll(spec, lam, prob), None, lam)
    fwd = forward_hypergrad(spec, lam, prob)
    n = lam.layout.size
    coords = None
    if n > cg.max_fd_coords:
        coords = np.sort(rng.choice(n, cg.max_fd_coords, replace=False))
        if LOG_STEP in lam.layout:
            coords = np.union1d(coords, [lam.layout.offset(LOG_STEP)])
    fd = finite_diff_check(prob, lam, cg.eps, spec, coords=coords, grad=rev)
    mode_err = float(relative_errors(fwd.values, rev.values).max(initial=0.0))
    return {"kind": kind, "lam_dim": n, "horizon": spec.horizon, "dynamics": spec.kind,
            "fd_coords": int(fd.coords.size), "fd_max_rel_error": fd.max_rel_error,
            "mode_max_rel_error": mode_err,
            "passed": bool(fd.max_rel_error <= cg.fd_tol and mode_err <= cg.mode_tol)}


def run_check_grad(cfg: RunConfig, out) -> dict:
    cg = cfg.check_grad
    if not cg.problems:
        raise ConfigurationError("check-grad needs at least one problem")
    rng = np.random.default_rng([cfg.seed, 11])
    rows = []
    for i in range(cg.count):
        kind = cg.problems[i % len(cg.problems)]
        prob, lam, spec = _BUILDERS[kind](rng)
        rows.append(check_grad_problem(kind, prob, lam, spec, cfg, rng))
    report = {"problems": rows, "passed": all(r["passed"] for r in rows),
              "fd_tol": cg.fd_tol, "mode_tol": cg.mode_tol, "eps": cg.eps}
    _write_json(Path(out) / "check_grad.json", report)
    return report


# ---------------------------------------------------------------------------
# ho


def ho_problem(cfg: RunConfig) -> tuple[LogisticHOProblem, DynamicsSpec]:
    ho = cfg.ho
    gen = TaskGenerator(cfg.generator)
    if ho.n_classes > cfg.generator.num_latent_classes:
        raise ConfigurationError("ho.n_classes exceeds the generator's class count")
    rng = np.random.default_rng([cfg.data_seed, 23])
    classes = np.arange(ho.n_classes)
    X_tr, X_val = gen.sample(classes, ho.train_per_class, rng), gen.sample(classes, ho.val_per_class, rng)
    y_tr = np.repeat(classes, ho.train_per_class)
    y_val = np.repeat(classes, ho.val_per_class)
    data = SplitDataset(Dataset(X_tr, y_tr, np.arange(len(y_tr))),
                        Dataset(X_val, y_val, len(y_tr) + np.arange(len(y_val))))
    prob = LogisticHOProblem(data, ho.n_classes, learned_reg=ho.learned_reg)
    spec = DynamicsSpec(kind=ho.kind, horizon=ho.horizon, momentum=ho.momentum,
                        batch_size=ho.batch_size, seed=cfg.seed)
    return prob, spec


def run_ho(cfg: RunConfig, out) -> dict:
    """Tune the step size online (``rtho``) or with full hypergradients, against a fixed-step grid."""
    ho = cfg.ho
    prob, spec = ho_problem(cfg)
    lam0 = prob.hyperparams(step=ho.init_step)
    initial = outer_value(spec, lam0, prob)
    grid = [(eta, outer_value(spec, lam0.updated({LOG_STEP: np.log(eta)}), prob)) for eta in ho.grid]
    best_eta, best = min(grid, key=lambda g: g[1])
    tuned = tune_hyperparams(spec, lam0, prob, ho.method, ho.interval, ho.outer_lr, ho.outer_steps)
    with MetricsLog(Path(out) / METRICS, cfg.record_wallclock) as log:
        for it, value, lam in tuned.trajectory:
            log.write(iter=it, f_train_batch=value, step_size=lam.step_size)
    final, lam = tuned.final_value, tuned.lam
    passed = final <= initial and final <= (1.0 + ho.tolerance) * best
    result = {"method": ho.method, "initial_val_loss": initial, "final_val_loss": final,
              "final_step_size": lam.step_size, "grid": [[e, v] for e, v in grid],
              "best_grid_step": best_eta, "best_grid_loss": best, "passed": bool(passed)}
    _write_json(Path(out) / RESULT, result)
    return result


# ---------------------------------------------------------------------------
# meta-train


def _improved(acc, best_acc) -> bool:
    return best_acc is None or acc > best_acc


def _outer_optimizer(cfg: RunConfig, lr=None) -> Adam:
    o = cfg.outer
    return Adam(o.lr if lr is None else lr, o.beta1, o.beta2, o.eps, o.decay, o.decay_every)


def run_meta_train(cfg: RunConfig, out) -> dict:
    """Outer Adam on meta-batches with early stopping on meta-validation accuracy.

    The best hyperparameters are checkpointed in ``out/checkpoint`` whenever the
    validation accuracy improves, and the final result is measured on
    meta-test episodes with that checkpoint.
    """
    tr = cfg.train
    out = Path(out)
    mc = cfg.meta_config()
    splits = _splits(cfg)
    spec = _meta_spec(tr.horizon)
    ckpt_dir = out / "checkpoint"
    history = []

    with MetricsLog(out / METRICS, cfg.record_wallclock) as log:
        def on_eval(it, f_batch, res, improved, lam):
            log.write(iter=it, f_train_batch=f_batch, metaval_acc=res.mean, metaval_ci=res.ci95)
            history.append({"iter": it, "metaval_acc": res.mean, "metaval_ci": res.ci95})
            if improved:
                save_checkpoint(ckpt_dir, Checkpoint(lam, cfg.to_json(), cfg.hash(), it, list(history)))

        try:
            run = train_meta(splits["meta_train"], splits["meta_val"], mc.init_hyperparams(cfg.seed), spec, mc,
                             _outer_optimizer(cfg), tr.variant, tr.max_iters, tr.meta_batch, tr.eval_interval,
                             tr.eval_episodes, tr.patience, tr.classic_lr, tr.classic_steps, on_eval)
        except NumericError as exc:
            raise NumericError(f"meta-training aborted: {exc}; best checkpoint kept in {ckpt_dir}") from exc

    best = load_checkpoint(ckpt_dir)
    test = evaluate_meta(splits["meta_test"], best.lam, spec, mc, tr.test_episodes)
    result = {"method": tr.variant, "split": "meta_test", "mean": test.mean, "ci95": test.ci95,
              "episodes": test.n, "horizon": tr.horizon, "best_iter": run.best_iter,
              "best_metaval_acc": run.best_acc, "iterations_run": run.iterations,
              "step_size": best.lam.step_size}
    _write_json(out / RESULT, result)
    return result


# ---------------------------------------------------------------------------
# meta-eval and T sweeps


def _load_lambda(cfg: RunConfig, mc: MetaConfig) -> HyperParams:
    if cfg.checkpoint is None:
        raise ConfigurationError("this mode needs 'checkpoint' (a checkpoint directory)")
    ckpt = load_checkpoint(cfg.checkpoint)
    if ckpt.lam.layout != mc.hyper_layout:
        raise ConfigurationError("checkpoint layout does not match the configured model")
    return ckpt.lam


def run_meta_eval(cfg: RunConfig, out) -> dict:
    mc = cfg.meta_config()
    lam = _load_lambda(cfg, mc)
    res = evaluate_meta(_splits(cfg)["meta_test"], lam, _meta_spec(cfg.train.horizon), mc, cfg.train.test_episodes)
    result = {"method": Path(cfg.checkpoint).resolve().parent.name, "split": "meta_test", "mean": res.mean,
              "ci95": res.ci95, "episodes": res.n, "horizon": cfg.train.horizon}
    _write_json(Path(out) / RESULT, result)
    return result


def select_horizon(rows) -> int:
    """Index of the best mean accuracy; ties go to the smaller horizon."""
    order = sorted(range(len(rows)), key=lambda i: (-rows[i]["acc"], rows[i]["T"]))
    return order[0]


def run_sweep_T(cfg: RunConfig, out) -> list[dict]:
    """Meta-validation accuracy for each horizon in ``sweep.T_values``, written as CSV."""
    out = Path(out)
    mc = cfg.meta_config()
    splits = _splits(cfg)
    rows = []
    shared = None if cfg.sweep.train else _load_lambda(cfg, mc)
    for T in sorted(set(cfg.sweep.T_values)):
        if shared is None:
            sub = out / f"T{T}"
            sub.mkdir(parents=True, exist_ok=True)
            run_meta_train(cfg.with_section("train", horizon=T), sub)
            lam = load_checkpoint(sub / "checkpoint").lam
        else:
            lam = shared
        res = evaluate_meta(splits["meta_val"], lam, _meta_spec(T), mc, cfg.train.eval_episodes)
        rows.append({"T": T, "acc": res.mean, "ci": res.ci95})
    best = select_horizon(rows)
    for i, row in enumerate(rows):
        row["selected"] = int(i == best)
    with open(out / "sweep_T.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["T", "acc", "ci", "selected"], lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({"T": row["T"], "acc": repr(float(row["acc"])), "ci": repr(float(row["ci"])),
                             "selected": row["selected"]})
    return rows


# ---------------------------------------------------------------------------
# pretrained-representation baseline


HEAD_W, HEAD_B = "head.weight", "head.bias"


def _pretrain_loss_tape(model: ReprModel, params_layout, X, y):
    tb = TapeBuilder()
    p = tb.inputs(params_layout)
    h = model.tape(tb, X, p)
    logits = h @ p[HEAD_W].T + p[HEAD_B]
    return tb.build(cross_entropy_tape(tb, logits, y))


def run_pretrain_baseline(cfg: RunConfig, out) -> dict:
    """Supervised multiclass training over all meta-train classes, then episodic evaluation of its features.

    The network is the configured representation followed by a linear head;
    the representation output (the layer below the head) is frozen and used
    as ``h`` with the step size fixed at its initial value.
    """
    pt, tr = cfg.pretrain, cfg.train
    out = Path(out)
    mc = cfg.meta_config()
    splits = _splits(cfg)
    spec = _meta_spec(tr.horizon)
    pool = splits["meta_train"].classes
    rng = np.random.default_rng([cfg.data_seed, 31])
    X = TaskGenerator(cfg.generator).sample(pool, pt.examples_per_class, rng)
    y = np.repeat(np.arange(len(pool)), pt.examples_per_class)

    lam = mc.init_hyperparams(cfg.seed)
    repr_names = [n for n, _ in mc.model.groups()]
    init_rng = np.random.default_rng([cfg.seed, 37])
    bound = 1.0 / np.sqrt(mc.model.output_dim)
    head = {HEAD_W: init_rng.uniform(-bound, bound, (len(pool), mc.model.output_dim)),
            HEAD_B: np.zeros(len(pool))}
    params = FlatVector.from_groups({n: lam.group(n) for n in repr_names} | head)
    opt = _outer_optimizer(cfg, pt.lr)
    batch_rng = np.random.default_rng([cfg.seed, 41])
    history, best_acc, bad = [], None, 0
    ckpt_dir = out / "checkpoint"

    def current():
        return lam.updated({n: params.group(n) for n in repr_names})

    def evaluate(step, f_batch, log):
        nonlocal best_acc, bad
        cand = current()
        res = evaluate_meta(splits["meta_val"], cand, spec, mc, tr.eval_episodes)
        log.write(iter=step, f_train_batch=f_batch, metaval_acc=res.mean, metaval_ci=res.ci95)
        history.append({"iter": step, "metaval_acc": res.mean, "metaval_ci": res.ci95})
        if _improved(res.mean, best_acc):
            best_acc, bad = res.mean, 0
            save_checkpoint(ckpt_dir, Checkpoint(cand, cfg.to_json(), cfg.hash(), step, list(history)))
        else:
            bad += 1
        return bad >= tr.patience

    with MetricsLog(out / METRICS, cfg.record_wallclock) as log:
        stop = evaluate(0, None, log)
        step = 0
        while step < pt.steps and not stop:
            step += 1
            idx = batch_rng.choice(len(y), min(pt.batch_size, len(y)), replace=False)
            tape = _pretrain_loss_tape(mc.model, params.layout, X[idx], y[idx])
            value, grad = value_and_vjp(tape, params, 1.0)
            params = params.with_values(opt.step(params.values, grad.values))
            if step % tr.eval_interval == 0:
                stop = evaluate(step, float(value), log)

    best = load_checkpoint(ckpt_dir)
    test = evaluate_meta(splits["meta_test"], best.lam, spec, mc, tr.test_episodes)
    result = {"method": "pretrain", "split": "meta_test", "mean": test.mean, "ci95": test.ci95,
              "episodes": test.n, "horizon": tr.horizon, "best_iter": best.iteration, "steps_run": step}
    _write_json(out / RESULT, result)
    return result


# ---------------------------------------------------------------------------
# report


def _read_log(path: Path) -> dict:
    """One table row from a result JSON, a run directory or a metrics log."""
    if path.is_dir():
        path = path / RESULT if (path / RESULT).exists() else path / METRICS
    if not path.exists():
        raise ConfigurationError(f"no results at {path}")
    if path.suffix == ".jsonl":
        records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        evaluated = [r for r in records if r.get("metaval_acc") is not None]
        if not evaluated:
            raise ConfigurationError(f"{path} has no evaluated records")
        best = max(evaluated, key=lambda r: r["metaval_acc"])  # first maximum wins
        return {"method": path.parent.name, "split": "meta_val", "mean": best["metaval_acc"],
                "ci95": best["metaval_ci"]}
    data = json.loads(path.read_text(encoding="utf-8"))
    return {"method": data.get("method", path.parent.name), "split": data.get("split", "meta_test"),
            "mean": data["mean"], "ci95": data["ci95"]}


def format_table(rows) -> str:
    lines = ["| method | split | accuracy (%) |", "|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['method']} | {r['split']} | {100 * r['mean']:.2f} ± {100 * r['ci95']:.2f} |")
    return "\n".join(lines) + "\n"


def run_report(cfg: RunConfig, out) -> str:
    if not cfg.logs:
        raise ConfigurationError("report needs at least one entry in 'logs'")
    table = format_table([_read_log(Path(p)) for p in cfg.logs])
    (Path(out) / "report.md").write_text(table, encoding="utf-8")
    return table


RUNNERS = {
    "check_grad": run_check_grad, "ho": run_ho, "meta_train": run_meta_train, "meta_eval": run_meta_eval,
    "sweep_T": run_sweep_T, "pretrain_baseline": run_pretrain_baseline, "report": run_report,
}


def execute(cfg: RunConfig, out):
    """Run ``cfg.mode`` in ``out`` under the directory lock."""
    out = Path(out)
    with RunLock(out):
        return RUNNERS[cfg.mode](cfg, out)
