"""Training loop, leave-one-out evaluation, experiment runners, and reports.

One epoch encodes both graph views, runs the side-wise diffusion loss, draws
the task batch, forms the joint objective, and applies one Adam update per
parameter group. Everything downstream of (config, seed, dataset) is
bit-reproducible; wall-clock timings are kept out of the reproducible payload.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .diffusion import (
    DenoiserGrads,
    DenoiserParams,
    DiffusionConfig,
    build_schedule,
    denoise_predict,
    denoise_predict_vjp,
    diffusion_loss,
    reverse_denoise,
)
from .encoder import EncoderConfig, encode_vjp, relation_adjacencies
from .hetgraph import (
    GraphError,
    HeteroGraph,
    LabelSet,
    NoiseSpec,
    Relation,
    bucket_labels,
    generate_synthetic,
    inject_edge_noise,
    load_edge_list,
    load_labels,
    load_schema,
    sparsity_buckets,
)
from .numerics import AdamState, Rng, adam_step
from .tasks import (
    ClassifierParams,
    JointLossConfig,
    TripletBatch,
    bpr_loss,
    ce_loss,
    class_metrics,
    classifier_logits,
    fuse,
    joint_loss,
    rank_metrics,
    sample_triplets,
)


class ConfigError(ValueError):
    """Run configuration that cannot be executed."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, parts):
        self.epoch = epoch
        self.parts = parts
        detail = ", ".join(f"{k}={v}" for k, v in parts.items())
        super().__init__(f"non-finite loss at epoch {epoch}: {detail}")


VARIANTS = ("full", "-D", "-U", "-I", "-H", "DAE")


@dataclass
class SyntheticSpec:
    users: int = 200
    items: int = 100
    aux_relations: int = 2
    density: float = 0.05
    fidelity: float = 0.9
    seed: int | None = None  # falls back to the run seed


@dataclass
class RunConfig:
    task: str = "link"
    synthetic: SyntheticSpec | None = None
    edge_file: str | None = None
    schema_file: str | None = None
    label_file: str | None = None
    labeled_type: str = "user"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    loss: JointLossConfig = field(default_factory=JointLossConfig)
    lr: float = 1e-3
    batch_size: int = 1024
    epochs: int = 30
    eval_every: int = 0  # 0 = final evaluation only
    seed: int = 0
    variant: str = "full"
    k: int = 20
    bucket_boundaries: tuple = (2, 4, 8, 16)
    use_diffusion: bool = True
    stop_grad_denoised: bool = False
    train_labels_per_class: int = 20
    init_scale: float = 0.1
    patience: int = 0  # stop after this many non-improving evals; 0 = fixed epochs

    def __post_init__(self):
        if self.task not in ("link", "node"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1, lr > 0 required")
        self.loss = replace(self.loss, task=self.task)
        self.bucket_boundaries = tuple(self.bucket_boundaries)

    def to_dict(self):
        d = asdict(self)
        d["bucket_boundaries"] = list(self.bucket_boundaries)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("synthetic") is not None:
            d["synthetic"] = SyntheticSpec(**d["synthetic"])
        for key, sub in (("encoder", EncoderConfig), ("diffusion", DiffusionConfig),
                         ("loss", JointLossConfig)):
            if key in d and isinstance(d[key], dict):
                d[key] = sub(**d[key])
        if "bucket_boundaries" in d:
            d["bucket_boundaries"] = tuple(d["bucket_boundaries"])
        return cls(**d)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class VariantPlan:
    has_source: bool
    diffusion_sides: tuple
    raw_sides: tuple
    lam: float
    dae: bool = False


def resolve_variant(cfg: RunConfig, graph: HeteroGraph) -> VariantPlan:
    """Map the variant selector onto which sides diffuse, which fuse raw
    source embeddings, and the effective denoising weight."""
    target = graph.relations[graph.target]
    if cfg.task == "link":
        sides = tuple(dict.fromkeys((target.src_type, target.dst_type)))
    else:
        sides = (cfg.labeled_type,)
    lam = cfg.loss.lam
    v = cfg.variant
    if v == "full":
        active = sides if cfg.use_diffusion else ()
    elif v == "-D":
        active, lam = (), 0.0
    elif v == "-U":
        active = sides[1:] if len(sides) > 1 else ()
    elif v == "-I":
        active = sides[:-1] if len(sides) > 1 else sides
    elif v == "-H":
        return VariantPlan(False, (), (), 0.0)
    else:  # DAE
        return VariantPlan(True, sides, (), lam, dae=True)
    raw = tuple(s for s in sides if s not in active)
    return VariantPlan(True, active, raw, lam)


# ------------------------------------------------------------------ data


@dataclass
class LinkSplit:
    train_graph: HeteroGraph
    test_users: np.ndarray
    test_items: np.ndarray
    n_excluded: int


def leave_one_out_split(g: HeteroGraph) -> LinkSplit:
    """Hold out each user's last target edge (file order stands in for time).

    Users with no target edge are excluded from the test set and counted.
    """
    rel = g.relations[g.target]
    last = {}
    for i, (u, _) in enumerate(rel.edges):
        last[int(u)] = i
    held = np.array(sorted(last.values()), dtype=np.int64)
    keep = np.ones(rel.edges.shape[0], dtype=bool)
    keep[held] = False
    train_rel = Relation(rel.name, rel.src_type, rel.dst_type, rel.edges[keep])
    rels = [train_rel if r.name == rel.name else r for r in g.relations.values()]
    train_graph = HeteroGraph(g.node_counts, rels, g.target)
    test_users = rel.edges[held, 0]
    test_items = rel.edges[held, 1]
    n_excluded = g.node_counts[rel.src_type] - len(last)
    return LinkSplit(train_graph, test_users, test_items, n_excluded)


@dataclass
class NodeSplit:
    train: LabelSet
    test: LabelSet


def labeled_node_split(labels: LabelSet, per_class, seed) -> NodeSplit:
    rng = Rng(seed).derive("labelsplit")
    order = rng.permutation(labels.node_ids.size)
    ids, classes = labels.node_ids[order], labels.class_ids[order]
    taken = np.zeros(labels.n_classes, dtype=np.int64)
    in_train = np.zeros(ids.size, dtype=bool)
    for i, c in enumerate(classes):
        if taken[c] < per_class:
            taken[c] += 1
            in_train[i] = True
    if not in_train.any() or in_train.all():
        raise ConfigError("label split left train or test empty")
    mk = lambda m: LabelSet(labels.node_type, ids[m], classes[m], labels.n_classes)
    return NodeSplit(mk(in_train), mk(~in_train))


def load_dataset(cfg: RunConfig):
    """Materialize (graph, labels) from the synthetic spec or dataset files."""
    if cfg.synthetic is not None:
        spec = cfg.synthetic
        seed = cfg.seed if spec.seed is None else spec.seed
        graph, labels = generate_synthetic(spec.users, spec.items, spec.aux_relations,
                                           spec.density, spec.fidelity, seed)
        return graph, labels
    if cfg.edge_file is None or cfg.schema_file is None:
        raise ConfigError("need either a synthetic spec or edge + schema files")
    schema = load_schema(cfg.schema_file)
    graph = load_edge_list(cfg.edge_file, schema)
    labels = None
    if cfg.label_file is not None:
        labeled_type = schema.labeled_type or cfg.labeled_type
        labels = load_labels(cfg.label_file, labeled_type)
    return graph, labels


# ------------------------------------------------------------------ trainer


@dataclass
class ModelParams:
    e0: np.ndarray
    denoiser: DenoiserParams | None
    classifier: ClassifierParams | None


@dataclass
class EpochDraws:
    side_t: dict
    side_noise: dict
    triplets: object = None


@dataclass
class TrainTrace:
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)


class Trainer:
    """Owns one run: data, parameter groups, optimizer state, and rng streams."""

    def __init__(self, cfg: RunConfig, graph=None, labels=None, features=None):
        self.cfg = cfg
        if graph is None:
            graph, loaded_labels = load_dataset(cfg)
            labels = labels if labels is not None else loaded_labels
        self.graph = graph
        self.labels = labels
        self.plan = resolve_variant(cfg, graph)
        root = Rng(cfg.seed)
        self.rngs = {name: root.derive(name)
                     for name in ("init", "triplets", "diffusion")}

        if cfg.task == "link":
            self.split = leave_one_out_split(graph)
            self.train_graph = self.split.train_graph
        else:
            if labels is None:
                raise ConfigError("node task needs labels")
            self.split = labeled_node_split(labels, cfg.train_labels_per_class, cfg.seed)
            self.train_graph = graph
        if self.plan.has_source and not graph.auxiliary_names():
            raise ConfigError("variant needs auxiliary relations but none exist")

        view = self.train_graph
        if not self.plan.has_source:
            view = view.with_relations([graph.target])
        self.adjacencies = relation_adjacencies(view)
        self.target_adj = {graph.target: self.adjacencies[graph.target]}
        self.aux_adj = {n: self.adjacencies[n] for n in view.relations
                        if n != graph.target}
        self.schedule = build_schedule(cfg.diffusion)

        init_rng = self.rngs["init"]
        if features is not None:
            e0 = np.array(features, dtype=np.float64)
            if e0.shape != (graph.num_nodes, cfg.encoder.dim):
                raise ConfigError(f"features must be {graph.num_nodes}x{cfg.encoder.dim}")
        else:
            e0 = init_rng.derive("e0").normal(graph.num_nodes, cfg.encoder.dim) \
                * cfg.init_scale
        denoiser = None
        if self.plan.diffusion_sides:
            denoiser = DenoiserParams.init(cfg.encoder.dim, cfg.diffusion.steps,
                                           init_rng.derive("denoiser"))
        classifier = None
        if cfg.task == "node":
            classifier = ClassifierParams.init(cfg.encoder.dim, labels.n_classes,
                                               init_rng.derive("classifier"))
        self.params = ModelParams(e0, denoiser, classifier)
        self.adam = {"e0": AdamState.for_param(e0, lr=cfg.lr)}
        if denoiser is not None:
            for name, arr in denoiser.arrays().items():
                self.adam[f"denoiser.{name}"] = AdamState.for_param(arr, lr=cfg.lr)
        if classifier is not None:
            for name, arr in classifier.arrays().items():
                self.adam[f"classifier.{name}"] = AdamState.for_param(arr, lr=cfg.lr)

        if cfg.task == "link":
            rel = self.train_graph.relations[graph.target]
            self.train_edges = rel.edges
            if cfg.epochs > 0 and self.train_edges.shape[0] == 0:
                raise ConfigError("leave-one-out split left no training edges; "
                                  "the dataset is too sparse to train on")
            self.user_type, self.item_type = rel.src_type, rel.dst_type
            self.positives = {}
            for u, v in rel.edges:
                self.positives.setdefault(int(u), set()).add(int(v))

    # -- helpers

    def side_slice(self, node_type):
        off = self.graph.offset(node_type)
        return slice(off, off + self.graph.node_counts[node_type])

    def draw_epoch(self) -> EpochDraws:
        cfg, plan = self.cfg, self.plan
        side_t, side_noise = {}, {}
        rng = self.rngs["diffusion"]
        for side in plan.diffusion_sides:
            n = self.graph.node_counts[side]
            if plan.dae:
                side_t[side] = self.schedule.steps
            elif cfg.diffusion.per_row_t:
                side_t[side] = rng.integers(1, self.schedule.steps + 1, size=n)
            else:
                side_t[side] = int(rng.integers(1, self.schedule.steps + 1))
            side_noise[side] = rng.standard_normal((n, cfg.encoder.dim))
        triplets = None
        if cfg.task == "link":
            triplets = sample_triplets(
                self.train_edges, self.graph.node_counts[self.item_type],
                self.graph.offset(self.user_type), self.graph.offset(self.item_type),
                self.rngs["triplets"], positives=self.positives)
        return EpochDraws(side_t, side_noise, triplets)

    def compute_losses(self, draws: EpochDraws, params: ModelParams = None):
        """Pure joint forward/backward for one epoch's draws.

        Returns (total, parts, grads) where grads maps parameter-group names
        to arrays shaped like the parameters.
        """
        cfg, plan = self.cfg, self.plan
        params = params or self.params
        (target_out, vjp_t), source_pack = self._encode(params.e0)
        e_target = target_out.pooled
        e_source, vjp_s = (source_pack[0].pooled, source_pack[1]) if source_pack \
            else (None, None)

        side_results = {}
        deno_parts = []
        denoised = e_source.copy() if e_source is not None else None
        sigma_dae = float(np.sqrt(1.0 - self.schedule.alpha_bar[-1]))
        for side in plan.diffusion_sides:
            sl = self.side_slice(side)
            if plan.dae:
                corrupted = e_source[sl] + sigma_dae * draws.side_noise[side]
                pred, vjp_pred = denoise_predict_vjp(params.denoiser, corrupted,
                                                     self.schedule.steps)
                diff = pred - e_target[sl]
                n = pred.shape[0]
                loss = float((diff * diff).sum()) / n
                g_pred = (2.0 / n) * diff
                grads, g_h = vjp_pred(g_pred)
                res = _SideResult(loss, pred, grads, g_h, -g_pred, vjp_pred, 1.0)
            else:
                out = diffusion_loss(params.denoiser, self.schedule, e_source[sl],
                                     e_target[sl], t=draws.side_t[side],
                                     noise=draws.side_noise[side])
                res = _SideResult(out.loss, out.denoised, out.grads, out.grad_source,
                                  out.grad_target, out.predict_vjp, out.scale)
            side_results[side] = res
            deno_parts.append(res.loss)
            denoised[sl] = res.denoised
        deno = float(np.mean(deno_parts)) if deno_parts else 0.0

        if plan.has_source:
            fused = fuse(e_target, denoised)
        else:
            fused = e_target

        clf_grads = None
        if cfg.task == "link":
            main, g_fused = self._bpr_over_chunks(fused, draws.triplets)
        else:
            main, g_fused, clf_grads = ce_loss(
                fused, params.classifier, self.split.train,
                row_offset=self.graph.offset(self.cfg.labeled_type))

        if np.isfinite(main) and np.isfinite(deno):
            total, parts = joint_loss(main, deno, replace(cfg.loss, lam=plan.lam),
                                      params.e0)
        else:
            # joint_loss requires finite components; report the blow-up as-is
            reg = cfg.loss.l2 * float(np.square(params.e0).sum())
            parts = {"main": float(main), "deno": float(deno),
                     "deno_weighted": plan.lam * float(deno), "l2": reg}
            total = float(main) + plan.lam * float(deno) + reg
        parts["total"] = total

        # backward: fusion is an elementwise sum, so upstream passes through
        g_e_target = g_fused.copy()
        grads = {}
        if plan.has_source:
            g_source = np.zeros_like(e_source)
            g_denoised = np.zeros_like(g_fused) if cfg.stop_grad_denoised else g_fused
            for side in plan.raw_sides:
                sl = self.side_slice(side)
                g_source[sl] += g_denoised[sl]
            if plan.diffusion_sides:
                coef = plan.lam / len(plan.diffusion_sides)
                acc = DenoiserGrads.zeros_like(params.denoiser)
                for side in plan.diffusion_sides:
                    sl = self.side_slice(side)
                    res = side_results[side]
                    for name, arr in res.grads.arrays().items():
                        acc.arrays()[name] += coef * arr
                    g_source[sl] += coef * res.grad_source
                    g_e_target[sl] += coef * res.grad_target
                    up = g_denoised[sl]
                    if np.any(up):
                        extra, g_h = res.predict_vjp(up)
                        for name, arr in extra.arrays().items():
                            acc.arrays()[name] += arr
                        g_source[sl] += res.scale * g_h
                for name, arr in acc.arrays().items():
                    grads[f"denoiser.{name}"] = arr
            g_e0 = vjp_t(g_e_target) + vjp_s(g_source)
        else:
            g_e0 = vjp_t(g_e_target)
        g_e0 += 2.0 * cfg.loss.l2 * params.e0
        grads["e0"] = g_e0
        if clf_grads is not None:
            for name, arr in clf_grads.arrays().items():
                grads[f"classifier.{name}"] = arr
        return total, parts, grads

    def _encode(self, e0):
        target_pack = encode_vjp(self.target_adj, e0, self.cfg.encoder)
        source_pack = None
        if self.plan.has_source:
            source_pack = encode_vjp(self.aux_adj, e0, self.cfg.encoder)
        return target_pack, source_pack

    def _bpr_over_chunks(self, fused, triplets):
        total = len(triplets)
        grad = np.zeros_like(fused)
        loss = 0.0
        for start in range(0, total, self.cfg.batch_size):
            chunk = _slice_batch(triplets, start, start + self.cfg.batch_size)
            weight = len(chunk) / total
            part, g = bpr_loss(fused, chunk)
            loss += weight * part
            grad += weight * g
        return loss, grad

    def run_epoch(self, epoch):
        draws = self.draw_epoch()
        total, parts, grads = self.compute_losses(draws)
        if not np.isfinite(total):
            raise DivergenceError(epoch, parts)
        self._apply(grads)
        return parts

    def _apply(self, grads):
        adam_step(self.adam["e0"], self.params.e0, grads["e0"])
        if self.params.denoiser is not None:
            for name, arr in self.params.denoiser.arrays().items():
                key = f"denoiser.{name}"
                if key in grads:
                    adam_step(self.adam[key], arr, grads[key])
        if self.params.classifier is not None:
            for name, arr in self.params.classifier.arrays().items():
                key = f"classifier.{name}"
                if key in grads:
                    adam_step(self.adam[key], arr, grads[key])

    def train(self):
        cfg = self.cfg
        trace = TrainTrace()
        best = None
        stale = 0
        last_epoch = 0
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            parts = self.run_epoch(epoch)
            trace.epoch_seconds.append(time.perf_counter() - started)
            parts["epoch"] = epoch
            trace.losses.append(parts)
            last_epoch = epoch
            if cfg.eval_every and epoch % cfg.eval_every == 0 and epoch < cfg.epochs:
                report = self.to_model().evaluate(epoch=epoch, trace=trace)
                trace.evals.append(report)
                if cfg.patience:
                    score = next(iter(report.metrics.values()))
                    if best is None or (score is not None and score > best):
                        best, stale = score, 0
                    else:
                        stale += 1
                        if stale >= cfg.patience:
                            break
        model = self.to_model()
        trace.evals.append(model.evaluate(epoch=last_epoch, trace=trace,
                                          tag="final"))
        return model, trace

    def to_model(self):
        return TrainedModel(self.cfg, self.plan, self.graph, self.labels,
                            self.split, self.adjacencies, self.schedule,
                            self.params, self)


class _SideResult:
    def __init__(self, loss, denoised, grads, grad_source, grad_target,
                 predict_vjp, scale):
        self.loss = loss
        self.denoised = denoised
        self.grads = grads
        self.grad_source = grad_source
        self.grad_target = grad_target
        self.predict_vjp = predict_vjp
        self.scale = scale


def _slice_batch(batch, start, stop):
    return TripletBatch(batch.users[start:stop], batch.pos[start:stop],
                        batch.neg[start:stop])


# ------------------------------------------------------------------ reports


@dataclass
class EvalReport:
    task: str
    metrics: dict
    buckets: dict
    n_test: int
    n_excluded: int
    seed: int
    variant: str
    epoch: int | None
    config: dict
    config_fingerprint: str
    dataset_fingerprint: str
    loss_trace: list = field(default_factory=list)
    wall_clock_per_epoch: float | None = None

    def reproducible_payload(self):
        """Everything that must be bit-identical across reruns (no timing)."""
        return {
            "task": self.task,
            "metrics": self.metrics,
            "buckets": self.buckets,
            "n_test": self.n_test,
            "n_excluded": self.n_excluded,
            "seed": self.seed,
            "variant": self.variant,
            "epoch": self.epoch,
            "config": self.config,
            "config_fingerprint": self.config_fingerprint,
            "dataset_fingerprint": self.dataset_fingerprint,
            "loss_trace": self.loss_trace,
        }

    def to_json(self):
        payload = self.reproducible_payload()
        payload["wall_clock_per_epoch"] = self.wall_clock_per_epoch
        return json.dumps(payload, indent=2, sort_keys=True)

    def lines(self):
        out = [f"task={self.task}", f"variant={self.variant}", f"seed={self.seed}",
               f"dataset={self.dataset_fingerprint}", f"config={self.config_fingerprint}"]
        for name, value in self.metrics.items():
            out.append(f"{name}={_fmt(value)}")
        for label, vals in self.buckets.items():
            for name, value in vals.items():
                out.append(f"bucket[{label}].{name}={_fmt(value)}")
        out.append(f"n_test={self.n_test}")
        out.append(f"n_excluded={self.n_excluded}")
        if self.wall_clock_per_epoch is not None:
            out.append(f"wall_clock_per_epoch={self.wall_clock_per_epoch:.6f}")
        return out


def _fmt(value):
    if value is None:
        return "undefined"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class TrainedModel:
    cfg: RunConfig
    plan: VariantPlan
    graph: HeteroGraph
    labels: LabelSet | None
    split: object
    adjacencies: dict
    schedule: object
    params: ModelParams
    _trainer: Trainer | None = None

    def inference_tables(self, tag="final"):
        """Deterministic embedding tables for evaluation and export.

        The denoised table comes from the full reverse pass (or the one-shot
        reconstruction for the autoencoder variant), seeded by `tag`.
        """
        cfg, plan = self.cfg, self.plan
        trainer = self._require_trainer()
        (target_out, _), source_pack = trainer._encode(self.params.e0)
        tables = {"target": target_out.pooled}
        for name, table in target_out.per_relation.items():
            tables[f"relation:{name}"] = table
        if not plan.has_source:
            tables["fused"] = target_out.pooled
            return tables
        source_out = source_pack[0]
        tables["source"] = source_out.pooled
        for name, table in source_out.per_relation.items():
            tables[f"relation:{name}"] = table
        denoised = source_out.pooled.copy()
        rng = Rng(cfg.seed).derive(f"eval:{tag}")
        for side in plan.diffusion_sides:
            sl = trainer.side_slice(side)
            side_rng = rng.derive(side)
            if plan.dae:
                sigma = float(np.sqrt(1.0 - self.schedule.alpha_bar[-1]))
                noise = side_rng.standard_normal(denoised[sl].shape)
                denoised[sl] = denoise_predict(self.params.denoiser,
                                               denoised[sl] + sigma * noise,
                                               self.schedule.steps)
            else:
                denoised[sl] = reverse_denoise(
                    self.params.denoiser, self.schedule, denoised[sl],
                    cfg.diffusion.effective_infer_steps(), rng=side_rng)
        tables["denoised"] = denoised
        tables["fused"] = fuse(target_out.pooled, denoised)
        return tables

    def evaluate(self, epoch=None, trace=None, tag=None):
        tag = tag or (f"epoch{epoch}" if epoch is not None else "final")
        tables = self.inference_tables(tag=tag)
        if self.cfg.task == "link":
            report = self._evaluate_link(tables["fused"])
        else:
            report = self._evaluate_node(tables["fused"])
        report.epoch = epoch
        if trace is not None:
            report.loss_trace = list(trace.losses)
            if trace.epoch_seconds:
                report.wall_clock_per_epoch = float(np.mean(trace.epoch_seconds))
        return report

    def _evaluate_link(self, fused):
        cfg = self.cfg
        trainer = self._require_trainer()
        split = self.split
        users = fused[trainer.side_slice(trainer.user_type)]
        items = fused[trainer.side_slice(trainer.item_type)]
        scores = users[split.test_users] @ items.T
        for row, u in enumerate(split.test_users):
            pos = trainer.positives.get(int(u))
            if pos:
                scores[row, sorted(pos)] = -np.inf
        recall, ndcg = rank_metrics(scores, split.test_items, cfg.k)
        metrics = {f"recall@{cfg.k}": recall, f"ndcg@{cfg.k}": ndcg}

        buckets = {}
        ids = sparsity_buckets(split.train_graph, split.test_users,
                               cfg.bucket_boundaries)
        labels = bucket_labels(cfg.bucket_boundaries)
        for b, label in enumerate(labels):
            mask = ids == b
            if not mask.any():
                continue
            r, n = rank_metrics(scores[mask], split.test_items[mask], cfg.k)
            buckets[label] = {f"recall@{cfg.k}": r, f"ndcg@{cfg.k}": n,
                              "n_users": int(mask.sum())}
        return self._report(metrics, buckets, int(split.test_users.size),
                            split.n_excluded)

    def _evaluate_node(self, fused):
        test = self.split.test
        rows = test.node_ids + self.graph.offset(self.cfg.labeled_type)
        logits, _, _ = classifier_logits(fused[rows], self.params.classifier)
        m = class_metrics(logits, test.class_ids)
        metrics = {"micro_f1": m.micro_f1, "macro_f1": m.macro_f1, "auc": m.auc}
        return self._report(metrics, {}, int(test.node_ids.size), 0)

    def _report(self, metrics, buckets, n_test, n_excluded):
        return EvalReport(
            task=self.cfg.task, metrics=metrics, buckets=buckets, n_test=n_test,
            n_excluded=n_excluded, seed=self.cfg.seed, variant=self.cfg.variant,
            epoch=None, config=self.cfg.to_dict(),
            config_fingerprint=self.cfg.fingerprint(),
            dataset_fingerprint=self.graph.fingerprint())

    def _require_trainer(self):
        if self._trainer is None:
            raise RuntimeError("model is not attached to a trainer")
        return self._trainer

    # -- persistence

    def save(self, path):
        arrays = {"e0": self.params.e0}
        if self.params.denoiser is not None:
            for name, arr in self.params.denoiser.arrays().items():
                arrays[f"denoiser.{name}"] = arr
        if self.params.classifier is not None:
            for name, arr in self.params.classifier.arrays().items():
                arrays[f"classifier.{name}"] = arr
        arrays["config_json"] = np.frombuffer(
            json.dumps(self.cfg.to_dict()).encode(), dtype=np.uint8)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path, graph=None, labels=None):
        data = np.load(path)
        cfg = RunConfig.from_dict(json.loads(bytes(data["config_json"]).decode()))
        trainer = Trainer(cfg, graph=graph, labels=labels)
        trainer.params.e0[...] = data["e0"]
        if trainer.params.denoiser is not None:
            for name, arr in trainer.params.denoiser.arrays().items():
                arr[...] = data[f"denoiser.{name}"]
        if trainer.params.classifier is not None:
            for name, arr in trainer.params.classifier.arrays().items():
                arr[...] = data[f"classifier.{name}"]
        return trainer.to_model()


def train(cfg: RunConfig, graph=None, labels=None, features=None):
    """Run a full training job; returns (TrainedModel, TrainTrace)."""
    trainer = Trainer(cfg, graph=graph, labels=labels, features=features)
    return trainer.train()


# ------------------------------------------------------------------ runners


def run_ablation(cfg: RunConfig, variants=VARIANTS, graph=None, labels=None):
    """Train every variant on identical data and seed; one report each."""
    if graph is None:
        graph, labels = load_dataset(cfg)
    reports = {}
    for variant in variants:
        model, trace = train(replace(cfg, variant=variant), graph=graph, labels=labels)
        reports[variant] = trace.evals[-1]
    return reports


@dataclass
class NoiseRobustnessResult:
    ratios: tuple
    relations: tuple
    clean: EvalReport
    noisy_reports: dict        # (relation, ratio) -> EvalReport
    retention: dict            # (relation, ratio) -> {metric: percent}

    def table_lines(self, metric_names=None):
        """Per-relation rows with one (Recall, NDCG) column pair per ratio."""
        metric_names = metric_names or list(self.clean.metrics)
        header = ["relation"]
        for ratio in self.ratios:
            for m in metric_names:
                header.append(f"{int(round(ratio * 100))}%:{m}")
        rows = [header]
        for rel in self.relations:
            row = [rel]
            for ratio in self.ratios:
                cell = self.retention[(rel, ratio)]
                for m in metric_names:
                    row.append("n/a" if cell.get(m) is None else f"{cell[m]:.2f}%")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        return ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)) for r in rows]


def run_noise_robustness(cfg: RunConfig, ratios, graph=None, labels=None):
    """Retrain per (auxiliary relation, ratio) on a noised copy of the data and
    report metric retention as a percentage of the clean run."""
    ratios = tuple(ratios)
    if any(not 0.0 <= r <= 1.0 for r in ratios):
        raise ConfigError("noise ratios must lie in [0,1]")
    if graph is None:
        graph, labels = load_dataset(cfg)
    relations = tuple(graph.auxiliary_names())
    if not relations:
        raise ConfigError("noise robustness needs auxiliary relations")
    _, clean_trace = train(cfg, graph=graph, labels=labels)
    clean = clean_trace.evals[-1]
    noisy_reports, retention = {}, {}
    for rel in relations:
        for ratio in ratios:
            if ratio == 0.0:
                noisy_reports[(rel, ratio)] = clean
                retention[(rel, ratio)] = {m: 100.0 for m in clean.metrics}
                continue
            noise_seed = Rng(cfg.seed).derive(f"noise:{rel}:{ratio}").integers(0, 2 ** 31)
            noised = inject_edge_noise(graph, NoiseSpec(rel, ratio, int(noise_seed)))
            _, trace = train(cfg, graph=noised, labels=labels)
            report = trace.evals[-1]
            noisy_reports[(rel, ratio)] = report
            retention[(rel, ratio)] = {
                m: (100.0 * report.metrics[m] / clean.metrics[m]
                    if clean.metrics.get(m) not in (None, 0.0)
                       and report.metrics.get(m) is not None else None)
                for m in clean.metrics}
    return NoiseRobustnessResult(ratios, relations, clean, noisy_reports, retention)


# ------------------------------------------------------------------ export


def export_embeddings(model: TrainedModel, path, table="fused"):
    """Write one embedding row per node: `node_id node_type tag v1..vd`.

    The header records the dimension and the node-type offsets so files are
    self-describing; floats print via repr and round-trip exactly.
    """
    tables = model.inference_tables(tag="export")
    if table not in tables:
        raise ConfigError(f"unknown table {table!r}; have {sorted(tables)}")
    data = tables[table]
    graph = model.graph
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#dim {data.shape[1]}\n")
        offsets = " ".join(f"{t}={graph.offset(t)}" for t in graph.node_counts)
        fh.write(f"#offsets {offsets}\n")
        fh.write(f"#tag {table}\n")
        for node_type, count in graph.node_counts.items():
            base = graph.offset(node_type)
            for i in range(count):
                vec = " ".join(repr(float(v)) for v in data[base + i])
                fh.write(f"{i} {node_type} {table} {vec}\n")
    return path


def read_embeddings(path):
    """Round-trip reader for the export format."""
    dim = None
    offsets = {}
    tag = None
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#dim "):
                dim = int(line.split()[1])
            elif line.startswith("#offsets "):
                for part in line.split()[1:]:
                    t, off = part.split("=")
                    offsets[t] = int(off)
            elif line.startswith("#tag "):
                tag = line.split()[1]
            elif line:
                parts = line.split()
                rows.append((int(parts[0]), parts[1], parts[2],
                             np.array([float(x) for x in parts[3:]])))
    if dim is None or tag is None:
        raise GraphError(f"{path}: missing export header")
    table = np.stack([vec for _, _, _, vec in rows]) if rows else np.empty((0, dim))
    meta = [(i, t, g) for i, t, g, _ in rows]
    return {"dim": dim, "offsets": offsets, "tag": tag, "rows": meta, "table": table}
