"""Training orchestration: burn-in, semi-supervised steps, checkpoints.

One optimizer step of the semi-supervised phase:

1. draw unlabeled images, build weak views (flip only), run the teacher and
   decode candidate detections;
2. partition candidates by confidence (adaptive per-category thresholds or a
   single fixed one), optionally demote proxy-inconsistent foreground to
   ignorable, then fold the surviving foreground into the running category
   stats;
3. build strong views (flip, jitter, cutout, patch shuffle), render the
   pseudo-labels densely in the weak frame and replay the strong geometry on
   the target grids;
4. optionally pair the strong view with a 2x downsampled copy;
5. student forward on labeled + strong views (one batched pass), losses
   L = L_s + alpha * L_u + w * L_scale;
6. SGD with momentum and weight decay, step-decayed learning rate;
7. EMA-fold the student into the teacher.

All randomness is drawn from counter-based streams seeded with
(seed, stream, step), so a run can stop and resume at any step and remain
bit-identical; no RNG state is ever serialized.

A non-finite loss raises :class:`NumericFailure`, which the CLI maps to
exit code 4.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np

from . import tensor as T
from . import metanet as M
from .augment import patch_shuffle, make_scale_pair, strong_augment, weak_augment
from .config import TrainConfig, write_run_manifest
from .data import Annotation, load_dataset, split_dataset
from .evalmap import compute_map
from .losses import (scale_consistency_loss, supervised_loss, total_loss,
                     unsupervised_loss)
from .model import (DEFAULT_ARCH, DenseTargets, HeadOutput, PyramidGeometry,
                    assign_targets, copy_param_data, decode, forward,
                    init_params, params_from_arrays, permute_dense_targets,
                    stack_targets)
from .pseudo import (CategoryStats, adaptive_thresholds, partition_instances,
                     render_pseudo_targets, update_stats)
from .teacher import TeacherState, ema_update, init_teacher, teacher_infer
from .tensorio import load_bundle, save_bundle

METRICS_COLUMNS = ("step", "L_s", "L_u", "L_scale", "N_pos", "lr")

# counter-based rng stream ids
_S_INIT, _S_SUP, _S_WEAK, _S_STRONG, _S_META = 0, 1, 2, 3, 4


class NumericFailure(RuntimeError):
    """Loss or gradients left the finite range; the run cannot continue."""


def step_rng(seed, stream, step):
    return np.random.default_rng([int(seed), int(stream), int(step)])


def lr_at(step, cfg: TrainConfig):
    """Step-decayed learning rate; decay applies from each milestone on."""
    lr = cfg.lr
    for frac in cfg.milestone_fracs:
        if step >= int(cfg.total_steps * frac):
            lr *= cfg.lr_decay
    return lr


def sgd_step(params, velocity, lr, momentum, weight_decay):
    """Momentum SGD over every parameter that received a gradient."""
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad + weight_decay * p.data
        v = velocity[name]
        v *= momentum
        v += g
        p.data -= lr * v


@dataclasses.dataclass
class TrainState:
    step: int
    params: dict                       # name -> Tensor
    velocity: dict                     # name -> ndarray
    teacher: TeacherState | None = None
    stats: CategoryStats | None = None
    embedder: dict | None = None       # frozen proxy-embedder params
    proxies: M.ProxyTable | None = None

    def clone(self):
        return TrainState(
            step=self.step,
            params=params_from_arrays(copy_param_data(self.params)),
            velocity={k: v.copy() for k, v in self.velocity.items()},
            teacher=self.teacher.copy() if self.teacher else None,
            stats=self.stats.copy() if self.stats else None,
            embedder=(params_from_arrays(copy_param_data(self.embedder))
                      if self.embedder else None),
            proxies=(M.ProxyTable(self.proxies.vectors.copy(), self.proxies.counts.copy())
                     if self.proxies else None),
        )


@dataclasses.dataclass
class DataBundle:
    """Everything a run needs from disk, preloaded."""

    dataset: object
    geometry: PyramidGeometry
    images: dict                       # image id -> [3,h,w] float32
    labeled_ids: list
    unlabeled_ids: list


def prepare_data(cfg: TrainConfig):
    dataset = load_dataset(cfg.data_dir)
    sizes = {(r.width, r.height) for r in dataset.images}
    if len(sizes) != 1:
        raise ValueError(f"training images must share one size, found {sorted(sizes)}")
    (w, h) = sizes.pop()
    if w != h:
        raise ValueError(f"training images must be square, found {w}x{h}")
    geometry = PyramidGeometry.build(w)
    ids = [r.id for r in dataset.images]
    li, ui = split_dataset(len(ids), cfg.labeled_fraction, cfg.split_seed)
    images = {r.id: dataset.load_image(r) for r in dataset.images}
    return DataBundle(dataset=dataset, geometry=geometry, images=images,
                      labeled_ids=[ids[i] for i in li],
                      unlabeled_ids=[ids[i] for i in ui] or [ids[i] for i in li])


# ---------------------------------------------------------------------------
# batch builders
# ---------------------------------------------------------------------------

def _labeled_batch(bundle: DataBundle, cfg, rng):
    picks = rng.choice(np.asarray(bundle.labeled_ids), size=cfg.batch_labeled, replace=True)
    imgs, targets = [], []
    for image_id in picks:
        img = bundle.images[int(image_id)]
        annos = bundle.dataset.annos(int(image_id))
        img, annos, _ = weak_augment(img, annos, rng)
        imgs.append(img)
        targets.append(assign_targets(annos, bundle.geometry))
    return np.stack(imgs), stack_targets(targets)


def _split_head(out: HeadOutput, first):
    total = out.cls[0].shape[0]

    def cut(ts, a, n):
        return [T.narrow(t, 0, a, n) for t in ts]

    head_a = HeadOutput(cls=cut(out.cls, 0, first), ctr=cut(out.ctr, 0, first),
                        dist=cut(out.dist, 0, first))
    head_b = HeadOutput(cls=cut(out.cls, first, total - first),
                        ctr=cut(out.ctr, first, total - first),
                        dist=cut(out.dist, first, total - first))
    return head_a, head_b


def _check_finite(step, **losses):
    bad = {k: float(v) for k, v in losses.items() if not np.isfinite(v)}
    if bad:
        desc = ", ".join(f"{k}={v}" for k, v in bad.items())
        raise NumericFailure(f"non-finite loss at step {step}: {desc}")


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------

def supervised_step(state: TrainState, bundle: DataBundle, cfg: TrainConfig, seed):
    """One labeled-only optimizer step; returns a metrics row dict."""
    rng = step_rng(seed, _S_SUP, state.step)
    imgs, targets = _labeled_batch(bundle, cfg, rng)
    out = forward(imgs, state.params, use_rla=cfg.use_rla)
    n_pos = targets.num_positive()
    loss = supervised_loss(out, targets, strides=bundle.geometry.strides)
    _check_finite(state.step, L_s=loss.data)
    T.zero_grads(state.params.values())
    loss.backward()
    lr = lr_at(state.step, cfg)
    sgd_step(state.params, state.velocity, lr, cfg.momentum, cfg.weight_decay)
    row = {"step": state.step, "L_s": float(loss.data), "L_u": 0.0,
           "L_scale": 0.0, "N_pos": n_pos, "lr": lr}
    state.step += 1
    return row


def _pseudo_label_image(state, cfg, image, detections):
    """Partition + optional proxy refinement for one weak view."""
    if cfg.use_adaptive:
        tau2 = adaptive_thresholds(state.stats, cfg.tau, cfg.beta,
                                   (cfg.tau2_min, cfg.tau2_max))
        tau1 = cfg.tau1
    else:
        tau2 = np.full(len(state.stats.mass), cfg.single_thresh)
        tau1 = cfg.single_thresh
    instances = partition_instances(detections, tau1, tau2)
    if cfg.use_metanet and state.proxies is not None:
        instances = M.refine(instances, image, state.proxies, state.embedder,
                             gate=cfg.metanet_gate)
    return instances


def dsl_step(state: TrainState, bundle: DataBundle, cfg: TrainConfig, seed):
    """One full semi-supervised optimizer step; returns a metrics row dict."""
    geometry = bundle.geometry

    # 1) weak views + teacher candidates
    rng_w = step_rng(seed, _S_WEAK, state.step)
    picks = rng_w.choice(np.asarray(bundle.unlabeled_ids),
                         size=cfg.batch_unlabeled, replace=True)
    weak_imgs = []
    for image_id in picks:
        img, _, _ = weak_augment(bundle.images[int(image_id)], [], rng_w)
        weak_imgs.append(img)
    detections = teacher_infer(state.teacher, np.stack(weak_imgs), geometry,
                               score_thresh=cfg.teacher_score_thresh,
                               nms_iou=cfg.nms_iou, max_dets=cfg.max_dets,
                               use_rla=cfg.use_rla)

    # 2) partition, refine, update running stats
    per_image = [_pseudo_label_image(state, cfg, img, dets)
                 for img, dets in zip(weak_imgs, detections)]
    state.stats = update_stats(state.stats, [i for pi in per_image for i in pi])

    # 3) strong views + dense pseudo-targets replayed onto the strong frame
    rng_s = step_rng(seed, _S_STRONG, state.step)
    strong_imgs, pseudo_targets = [], []
    for img, instances in zip(weak_imgs, per_image):
        strong, rec = strong_augment(img, rng_s, jitter=cfg.jitter,
                                     max_cutouts=cfg.max_cutouts)
        if cfg.use_patch_shuffle:
            strong, cuts = patch_shuffle(strong, rng_s, iters=cfg.shuffle_iters,
                                         snap=max(geometry.strides))
            rec.cuts = cuts
        targets = render_pseudo_targets(instances, geometry)
        pseudo_targets.append(permute_dense_targets(targets, rec, geometry))
        strong_imgs.append(strong)
    strong_batch = np.stack(strong_imgs)
    pseudo = stack_targets(pseudo_targets)

    # 4) optional scale pair
    small_batch = None
    if cfg.use_scale_loss:
        small_batch = np.stack([make_scale_pair(s, cfg.downsample)[1]
                                for s in strong_imgs])

    # 5) losses (labeled + strong views share one batched forward)
    rng_l = step_rng(seed, _S_SUP, state.step)
    lab_imgs, lab_targets = _labeled_batch(bundle, cfg, rng_l)
    out = forward(np.concatenate([lab_imgs, strong_batch]), state.params,
                  use_rla=cfg.use_rla)
    sup_out, unsup_out = _split_head(out, len(lab_imgs))
    l_s = supervised_loss(sup_out, lab_targets, strides=geometry.strides)
    l_u = unsupervised_loss(unsup_out, pseudo, strides=geometry.strides)
    l_sc = None
    if cfg.use_scale_loss:
        small_out = forward(small_batch, state.params, use_rla=cfg.use_rla)
        l_sc = scale_consistency_loss(small_out, unsup_out)
    loss = total_loss(l_s, l_u, l_sc, alpha=cfg.alpha, scale_weight=cfg.scale_weight)
    _check_finite(state.step, L_s=l_s.data, L_u=l_u.data,
                  L_scale=(l_sc.data if l_sc is not None else 0.0), total=loss.data)

    # 6) optimize
    T.zero_grads(state.params.values())
    loss.backward()
    lr = lr_at(state.step, cfg)
    sgd_step(state.params, state.velocity, lr, cfg.momentum, cfg.weight_decay)

    # 7) fold into the teacher (plain copy when the EMA teacher is disabled)
    eps = cfg.ema_epsilon if cfg.use_ema_teacher else 0.0
    ema_update(state.teacher, state.params, eps=eps)

    row = {"step": state.step, "L_s": float(l_s.data), "L_u": float(l_u.data),
           "L_scale": float(l_sc.data) if l_sc is not None else 0.0,
           "N_pos": lab_targets.num_positive() + pseudo.num_positive(), "lr": lr}
    state.step += 1
    return row


# ---------------------------------------------------------------------------
# phases
# ---------------------------------------------------------------------------

def init_state(cfg: TrainConfig, seed):
    params = init_params([seed, _S_INIT])
    velocity = {k: np.zeros_like(v.data) for k, v in params.items()}
    return TrainState(step=0, params=params, velocity=velocity,
                      stats=CategoryStats.fresh())


def burn_in(state: TrainState, bundle: DataBundle, cfg: TrainConfig, seed,
            until=None, writer=None):
    """Supervised-only warmup; the teacher does not exist yet."""
    until = cfg.burnin() if until is None else until
    while state.step < until:
        row = supervised_step(state, bundle, cfg, seed)
        if writer:
            writer(row)
    return state


def fit_proxies(state: TrainState, bundle: DataBundle, cfg: TrainConfig, seed):
    """Train the crop embedder on labeled ground truth and freeze proxies."""
    crops, labels = [], []
    for image_id in bundle.labeled_ids:
        img = bundle.images[image_id]
        for a in bundle.dataset.annos(image_id):
            crops.append(M.crop_box(img, a.box))
            labels.append(a.category)
    if not crops:
        raise ValueError("no labeled annotations available to fit proxies")
    state.embedder = M.train_embedder(np.stack(crops), labels, seed=[seed, _S_META],
                                      steps=cfg.metanet_steps, lr=cfg.metanet_lr)
    state.proxies = M.compute_proxies(np.stack(crops), labels, state.embedder)
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(dirpath, state: TrainState):
    arrays = {}
    for k, v in state.params.items():
        arrays[f"student.{k}"] = v.data
    for k, v in state.velocity.items():
        arrays[f"velocity.{k}"] = v
    if state.teacher is not None:
        for k, v in state.teacher.params.items():
            arrays[f"teacher.{k}"] = v
    if state.embedder is not None:
        for k, v in state.embedder.items():
            arrays[f"embedder.{k}"] = v.data
    if state.proxies is not None:
        arrays["proxies.vectors"] = state.proxies.vectors
        arrays["proxies.counts"] = state.proxies.counts
    arrays["stats.mass"] = state.stats.mass
    extra = {"kind": "train-state", "step": state.step,
             "teacher_updates": state.teacher.updates if state.teacher else 0,
             "stats_updates": state.stats.updates}
    save_bundle(dirpath, arrays, extra=extra)


def load_checkpoint(dirpath):
    arrays, extra = load_bundle(dirpath)
    if extra.get("kind") != "train-state":
        raise ValueError(f"{dirpath}: bundle is not a training checkpoint")
    groups: dict[str, dict] = {}
    for name, arr in arrays.items():
        prefix, _, rest = name.partition(".")
        groups.setdefault(prefix, {})[rest] = arr
    params = params_from_arrays(groups.get("student", {}))
    velocity = {k: v.copy() for k, v in groups.get("velocity", {}).items()}
    teacher = None
    if "teacher" in groups:
        teacher = TeacherState({k: v.copy() for k, v in groups["teacher"].items()},
                               updates=int(extra.get("teacher_updates", 0)))
    embedder = params_from_arrays(groups["embedder"]) if "embedder" in groups else None
    proxies = None
    if "proxies" in groups:
        proxies = M.ProxyTable(vectors=groups["proxies"]["vectors"],
                               counts=groups["proxies"]["counts"].astype(np.int64))
    stats = CategoryStats(mass=groups["stats"]["mass"].astype(np.float64),
                          updates=int(extra.get("stats_updates", 0)))
    return TrainState(step=int(extra["step"]), params=params, velocity=velocity,
                      teacher=teacher, stats=stats, embedder=embedder, proxies=proxies)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_params(param_arrays, dataset, use_rla=True, score_thresh=0.05,
                    nms_iou=0.5, max_dets=50, batch=4):
    """Decode a parameter snapshot over a dataset and score it."""
    sizes = {(r.width, r.height) for r in dataset.images}
    if len(sizes) != 1:
        raise ValueError("evaluation images must share one size")
    geometry = PyramidGeometry.build(sizes.pop()[0])
    params = {k: T.Tensor(v) for k, v in param_arrays.items()}
    records = sorted(dataset.images, key=lambda r: r.id)
    detections, truths = [], []
    with T.no_grad():
        for i in range(0, len(records), batch):
            chunk = records[i : i + batch]
            imgs = np.stack([dataset.load_image(r) for r in chunk])
            out = forward(imgs, params, use_rla=use_rla)
            detections.extend(decode(out, geometry, score_thresh=score_thresh,
                                     nms_iou=nms_iou, max_dets=max_dets))
            truths.extend([dataset.annos(r.id) for r in chunk])
    from .data import CATEGORY_NAMES
    return compute_map(detections, truths, category_names=list(CATEGORY_NAMES))


def eval_snapshot(state: TrainState, cfg: TrainConfig, dataset):
    """Evaluate the teacher when it exists, otherwise the student."""
    if state.teacher is not None:
        arrays = state.teacher.params
    else:
        arrays = copy_param_data(state.params)
    return evaluate_params(arrays, dataset, use_rla=cfg.use_rla,
                           score_thresh=0.05, nms_iou=cfg.nms_iou,
                           max_dets=cfg.max_dets)


# ---------------------------------------------------------------------------
# run drivers
# ---------------------------------------------------------------------------

class MetricsWriter:
    def __init__(self, path, resume=False):
        self.path = Path(path)
        exists = self.path.is_file()
        self._fh = open(self.path, "a" if resume else "w", newline="")
        self._csv = csv.writer(self._fh)
        if not (resume and exists):
            self._csv.writerow(METRICS_COLUMNS)

    def __call__(self, row):
        self._csv.writerow([row["step"], f"{row['L_s']:.6f}", f"{row['L_u']:.6f}",
                            f"{row['L_scale']:.6f}", row["N_pos"], f"{row['lr']:.6g}"])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _finish_run(state, cfg, run_dir, summary):
    run_dir = Path(run_dir)
    save_checkpoint(run_dir / "checkpoint", state)
    if cfg.eval_dir:
        result = eval_snapshot(state, cfg, load_dataset(cfg.eval_dir))
        summary["map"] = result.map
        summary["ap50"] = result.ap50
        summary["per_category"] = result.per_category
        (run_dir / "eval.json").write_text(json.dumps(
            {"map": result.map, "ap50": result.ap50,
             "per_category": result.per_category,
             "num_images": result.num_images}, indent=1))
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1, default=float))
    return summary


def train_supervised(cfg: TrainConfig, run_dir, bundle=None):
    """Labeled-split-only baseline over the full step budget."""
    cfg.validate()
    seed = cfg.resolved_seed()
    run_dir = Path(run_dir)
    write_run_manifest(run_dir, cfg, kind="train-supervised")
    bundle = bundle or prepare_data(cfg)
    state = init_state(cfg, seed)
    writer = MetricsWriter(run_dir / "metrics.csv")
    try:
        burn_in(state, bundle, cfg, seed, until=cfg.total_steps, writer=writer)
    finally:
        writer.close()
    summary = {"kind": "train-supervised", "steps": state.step,
               "labeled": len(bundle.labeled_ids)}
    return _finish_run(state, cfg, run_dir, summary)


def train_dsl(cfg: TrainConfig, run_dir, bundle=None, warm_state: TrainState | None = None,
              resume_from=None):
    """Full semi-supervised run: burn-in, teacher, pseudo-labeled steps.

    ``warm_state`` injects a pre-computed burn-in state (it is cloned, never
    mutated); ``resume_from`` restarts from a saved checkpoint directory.
    """
    cfg.validate()
    seed = cfg.resolved_seed()
    run_dir = Path(run_dir)
    write_run_manifest(run_dir, cfg, kind="train-dsl")
    bundle = bundle or prepare_data(cfg)

    resume = False
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        resume = True
    elif warm_state is not None:
        if warm_state.step > cfg.burnin():
            raise ValueError(
                f"warm state is at step {warm_state.step}, past burn-in {cfg.burnin()}")
        state = warm_state.clone()
    else:
        state = init_state(cfg, seed)

    writer = MetricsWriter(run_dir / "metrics.csv", resume=resume)
    try:
        burnin_end = cfg.burnin()
        if state.step < burnin_end:
            burn_in(state, bundle, cfg, seed, until=burnin_end, writer=writer)
        if cfg.use_metanet and state.proxies is None:
            fit_proxies(state, bundle, cfg, seed)
        if state.teacher is None:
            state.teacher = init_teacher(state.params)
        while state.step < cfg.total_steps:
            row = dsl_step(state, bundle, cfg, seed)
            writer(row)
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(run_dir / "checkpoint", state)
    finally:
        writer.close()
    summary = {"kind": "train-dsl", "steps": state.step,
               "labeled": len(bundle.labeled_ids),
               "unlabeled": len(bundle.unlabeled_ids),
               "stats_mass": [float(v) for v in state.stats.mass]}
    return _finish_run(state, cfg, run_dir, summary)


# ---------------------------------------------------------------------------
# ablation lattice
# ---------------------------------------------------------------------------

# cumulative component lattice: each row switches one more mechanism on.
# the first row is plain self-training with a single fixed threshold.
ABLATION_ROWS = (
    ("baseline", dict(use_adaptive=False, use_metanet=False, use_ema_teacher=False,
                      use_rla=False, use_patch_shuffle=False, use_scale_loss=False)),
    ("+adaptive-thresholds", dict(use_adaptive=True, use_metanet=False,
                                  use_ema_teacher=False, use_rla=False,
                                  use_patch_shuffle=False, use_scale_loss=False)),
    ("+proxy-gate", dict(use_adaptive=True, use_metanet=True, use_ema_teacher=False,
                         use_rla=False, use_patch_shuffle=False, use_scale_loss=False)),
    ("+aggregated-teacher", dict(use_adaptive=True, use_metanet=True,
                                 use_ema_teacher=True, use_rla=True,
                                 use_patch_shuffle=False, use_scale_loss=False)),
    ("+patch-shuffle", dict(use_adaptive=True, use_metanet=True, use_ema_teacher=True,
                            use_rla=True, use_patch_shuffle=True, use_scale_loss=False)),
    ("+scale-consistency", dict(use_adaptive=True, use_metanet=True,
                                use_ema_teacher=True, use_rla=True,
                                use_patch_shuffle=True, use_scale_loss=True)),
)


def run_ablation(base_cfg: TrainConfig, out_dir, folds=1):
    """Supervised reference plus the 6-row component lattice over data folds.

    Rows within a fold share the supervised burn-in (cached per backbone
    variant), so the comparison isolates the semi-supervised machinery.  A
    row tripping the non-finite-loss guard is recorded as failed rather than
    aborting the sweep.  Returns a dict with per-row results and a rendered
    markdown table (also written to ``out_dir``).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_seed = base_cfg.resolved_seed()
    names = ["supervised-only"] + [n for n, _ in ABLATION_ROWS]
    results = {n: [] for n in names}
    for fold in range(folds):
        fold_cfg = dataclasses.replace(base_cfg, seed=base_seed + fold,
                                       split_seed=base_cfg.split_seed + fold)
        fold_dir = out_dir / f"fold{fold}"
        bundle = prepare_data(fold_cfg)

        sup_cfg = dataclasses.replace(fold_cfg, use_rla=False)
        summary = train_supervised(sup_cfg, fold_dir / "supervised-only", bundle)
        results["supervised-only"].append({"status": "ok", "map": summary.get("map")})

        warm_cache: dict[bool, TrainState] = {}
        for name, flags in ABLATION_ROWS:
            row_cfg = dataclasses.replace(fold_cfg, **flags)
            if row_cfg.use_rla not in warm_cache:
                ws = init_state(row_cfg, row_cfg.resolved_seed())
                burn_in(ws, bundle, row_cfg, row_cfg.resolved_seed())
                warm_cache[row_cfg.use_rla] = ws
            try:
                summary = train_dsl(row_cfg, fold_dir / name.strip("+"), bundle,
                                    warm_state=warm_cache[row_cfg.use_rla])
                results[name].append({"status": "ok", "map": summary.get("map")})
            except NumericFailure as e:
                results[name].append({"status": "numeric-failure", "error": str(e)})

    rows = []
    for name in names:
        cells = results[name]
        maps = [c["map"] for c in cells if c["status"] == "ok" and c.get("map") is not None]
        rows.append({
            "name": name,
            "status": "ok" if all(c["status"] == "ok" for c in cells) else "numeric-failure",
            "mean_map": float(np.mean(maps)) if maps else None,
            "per_fold": cells,
        })
    lines = ["| configuration | status | mean mAP |", "|---|---|---|"]
    for r in rows:
        mm = f"{r['mean_map']:.4f}" if r["mean_map"] is not None else "-"
        lines.append(f"| {r['name']} | {r['status']} | {mm} |")
    markdown = "\n".join(lines)
    table = {"folds": folds, "rows": rows, "markdown": markdown}
    (out_dir / "ablation.json").write_text(json.dumps(table, indent=1))
    (out_dir / "ablation.md").write_text(markdown + "\n")
    return table
