"""Warm-up and multi-round self-training with alternating D / S / (F, C) updates."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import checkpoint as ckpt
from .autodiff import (
    NonFiniteError,
    OptimizerState,
    ParameterStore,
    Schedule,
    Tensor,
    adam_step,
    adamw_step,
    backward,
    default_dtype,
    stop_gradient,
)
from .config import ExperimentConfig
from .diagnostics import DynamicsTrace, track
from .metrics import ConfusionMatrix, miou
from .momentum import MomentumPair, ema_update, init_pairs, teacher_branches
from .nets import (
    classifier_forward,
    discriminator_forward,
    extractor_forward,
    init_classifier,
    init_discriminator,
    init_extractor,
    init_similarity,
    similarity_forward,
)
from .objectives import (
    LossBundle,
    adversarial_variant,
    ce_source,
    ce_target,
    discriminator_loss,
    dynamic_weights,
    generator_adv_loss,
    pseudo_label,
    sim_loss,
)
from .synthdata import SceneSample, augment, generate

LOSS_COLUMNS = ("iter", "ce_source", "ce_target", "adv", "sim", "lr_fc", "lr_ds")
WARMUP, TRAIN = "warmup", "train"

# sub-seed tags, one per independent random stream of an experiment
(STREAM_INIT, STREAM_SOURCE, STREAM_TARGET, STREAM_TEST, STREAM_PROBE,
 STREAM_SOURCE_TEST, STREAM_BATCH) = range(1, 8)


def derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(1)[0])


class TrainingAborted(RuntimeError):
    """A loss or gradient went non-finite; ``diagnostics`` holds the snapshot."""

    def __init__(self, diagnostics: dict):
        self.diagnostics = diagnostics
        super().__init__(f"non-finite values at iteration {diagnostics.get('iteration')}: "
                         f"{diagnostics.get('reason')}")


@dataclass
class DomainBatch:
    source_images: np.ndarray  # (B, 3, H, W)
    source_masks: np.ndarray  # (B, H, W)
    target_images: np.ndarray  # (B, 3, H, W)


@dataclass
class TrainState:
    extractor: ParameterStore
    classifier: ParameterStore
    discriminator: Optional[ParameterStore]
    similarity: Optional[ParameterStore]
    snapshot: dict[str, ParameterStore]
    pairs: dict[str, MomentumPair] = field(default_factory=dict)
    optimizers: dict[str, OptimizerState] = field(default_factory=dict)
    iteration: int = 0
    round: int = 0

    def live(self) -> dict[str, ParameterStore]:
        out = {"extractor": self.extractor, "classifier": self.classifier}
        if self.discriminator is not None:
            out["discriminator"] = self.discriminator
        if self.similarity is not None:
            out["similarity"] = self.similarity
        return out


def init_state(cfg: ExperimentConfig) -> TrainState:
    """Seeded initialization; the F, C snapshot taken here is the round re-init point."""
    rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_INIT))
    K = cfg.data.domain_spec(cfg.extractor.image_size).num_total
    F = init_extractor(cfg.extractor, rng)
    C = init_classifier(cfg.extractor, K, rng)
    D = S = None
    if cfg.discriminator_mode != "none":
        D = init_discriminator(cfg.extractor.embed_dim, K, cfg.discriminator_mode, rng, cfg.head_hidden)
    if cfg.dynamic_weights:
        S = init_similarity(cfg.extractor.embed_dim, rng, cfg.head_hidden)
    snapshot = {"extractor": F.copy(requires_grad=False), "classifier": C.copy(requires_grad=False)}
    state = TrainState(F, C, D, S, snapshot)
    state.pairs = init_pairs(cfg.smoothing, {"extractor": F, "classifier": C})
    for kind, store in state.live().items():
        state.optimizers[kind] = OptimizerState.for_store(store, Schedule())
    return state


# -- data ---------------------------------------------------------------------------------

def _stack(samples: list[SceneSample]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.mask for s in samples]))


class DataPool:
    """Fixed seeded pools; the batch for an iteration depends only on (seed, iteration)."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.spec = cfg.data.domain_spec(cfg.extractor.image_size)
        d, seed = cfg.data, cfg.seed
        self.source = generate(self.spec, "source", d.n_source, derive_seed(seed, STREAM_SOURCE))
        self.target = generate(self.spec, "target", d.n_target, derive_seed(seed, STREAM_TARGET))
        self.test_images, self.test_masks = _stack(
            generate(self.spec, "target", d.n_test, derive_seed(seed, STREAM_TEST)))
        self.source_test_images, self.source_test_masks = _stack(
            generate(self.spec, "source", d.n_test, derive_seed(seed, STREAM_SOURCE_TEST)))
        self.probe_images, _ = _stack(
            generate(self.spec, "target", cfg.tracking.probe_count, derive_seed(seed, STREAM_PROBE)))

    def batch(self, iteration: int, size: int) -> DomainBatch:
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, STREAM_BATCH, int(iteration)]))
        src = [self.source[i] for i in rng.integers(0, len(self.source), size)]
        tgt = [self.target[i] for i in rng.integers(0, len(self.target), size)]
        if self.cfg.data.augment:
            aug = self.cfg.data.augmentation
            src = [augment(s, rng, aug) for s in src]
            tgt = [augment(s, rng, aug) for s in tgt]
        si, sm = _stack(src)
        ti, _ = _stack(tgt)  # target masks never leave the pool
        return DomainBatch(si, sm, ti)


# -- trainer -------------------------------------------------------------------------------

class Trainer:
    """Drives one experiment. Iterations are global; phase and round follow from the counter."""

    def __init__(self, cfg: ExperimentConfig, state: Optional[TrainState] = None,
                 data: Optional[DataPool] = None):
        self.cfg = cfg.validate()
        self.spec = cfg.data.domain_spec(cfg.extractor.image_size)
        self.num_classes = self.spec.num_total
        self.variant = adversarial_variant(cfg.discriminator_mode, cfg.dynamic_weights)
        self.state = state if state is not None else init_state(cfg)
        self.data = data if data is not None else DataPool(cfg)
        self.loss_log: list[dict] = []
        self.on_substep: Optional[Callable[[str, "Trainer"], None]] = None
        self.traces: dict[str, DynamicsTrace] = {}
        tr = cfg.tracking
        if tr.enabled:
            tags = ["classifier_target"]
            if cfg.discriminator_mode != "none":
                tags.append("discriminator_target")
            for tag in tags:
                self.traces[tag] = DynamicsTrace(tag, probe_seed=derive_seed(cfg.seed, STREAM_PROBE),
                                                 capacity=tr.capacity, meta={"variant": cfg.variant_name()})
        self._bind_schedules()

    # schedules ------------------------------------------------------------------------

    @property
    def total_iters(self) -> int:
        return self.cfg.schedule.total_iters

    def phase_at(self, iteration: int) -> tuple[str, int]:
        s = self.cfg.schedule
        if iteration < s.warmup_iters:
            return WARMUP, 0
        return TRAIN, (iteration - s.warmup_iters) // s.iters_per_round + 1

    def _fc_schedule(self, rnd: int) -> Schedule:
        s, o = self.cfg.schedule, self.cfg.optim
        length = s.warmup_iters if rnd == 0 else s.iters_per_round
        return Schedule("linear", o.lr_fc, max(length, 1), min(o.lr_warmup_iters, length))

    def _ds_schedule(self) -> Schedule:
        o = self.cfg.optim
        return Schedule("poly", o.lr_ds, max(self.total_iters, 1), power=o.poly_power)

    def _bind_schedules(self) -> None:
        fc = self._fc_schedule(self.state.round)
        ds = self._ds_schedule()
        wd = self.cfg.optim.weight_decay
        for kind, opt in self.state.optimizers.items():
            if kind in ("extractor", "classifier"):
                opt.schedule, opt.weight_decay = fc, wd
            else:
                opt.schedule, opt.weight_decay = ds, 0.0
        for pair in self.state.pairs.values():
            pair.m = self.cfg.smoothing.m

    def begin_round(self, rnd: int) -> None:
        """Teacher from the finishing weights, student back to the snapshot, fresh F/C optimizer."""
        st = self.state
        for pair in st.pairs.values():
            pair.target.assign_from(pair.source)
        st.extractor.assign_from(st.snapshot["extractor"])
        st.classifier.assign_from(st.snapshot["classifier"])
        sched = self._fc_schedule(rnd)
        for kind in ("extractor", "classifier"):
            st.optimizers[kind] = OptimizerState.for_store(st.live()[kind], sched, self.cfg.optim.weight_decay)
        st.round = rnd

    # one iteration ---------------------------------------------------------------------

    def _hook(self, name: str) -> None:
        if self.on_substep is not None:
            self.on_substep(name, self)

    def _images(self, arr: np.ndarray) -> Tensor:
        return Tensor(np.asarray(arr, dtype=default_dtype()))

    def step(self, batch: DomainBatch, phase: str = TRAIN) -> LossBundle:
        try:
            return self._step(batch, phase)
        except NonFiniteError as exc:
            raise TrainingAborted(self._diagnostics(f"{exc}")) from exc

    def _step(self, batch: DomainBatch, phase: str) -> LossBundle:
        cfg, st = self.cfg, self.state
        ecfg = cfg.extractor
        adversarial = cfg.discriminator_mode != "none"
        with_target_ce = phase == TRAIN
        target_grad = adversarial and cfg.optim.generator_target_branch and not cfg.smoothing.mo_fa
        xs = self._images(batch.source_images)
        xt = self._images(batch.target_images)
        for store in st.live().values():
            store.zero_grad()
        (pl_F, pl_C), fa_F = teacher_branches(cfg.smoothing, {"extractor": st.extractor,
                                                               "classifier": st.classifier}, st.pairs)
        bundle = LossBundle(variant=self.variant)

        # (1) features
        f_src = extractor_forward(st.extractor, xs, ecfg)
        p_src = classifier_forward(st.classifier, f_src, ecfg)
        f_tgt_live = extractor_forward(st.extractor, xt, ecfg) if with_target_ce or target_grad else None
        p_tgt_live = classifier_forward(st.classifier, f_tgt_live, ecfg) if with_target_ce else None
        f_tgt_fa = None
        if adversarial:
            # target features reach D and S only as values; no gradient flows back through them
            # (by default: the live branch acts as a gradient-free copy, like the momentum branch)
            if cfg.smoothing.mo_fa or f_tgt_live is None:
                f_tgt_fa = stop_gradient(extractor_forward(fa_F if cfg.smoothing.mo_fa else st.extractor.detached(),
                                                           xt, ecfg))
            else:
                f_tgt_fa = stop_gradient(f_tgt_live)
        p_hat = None
        if with_target_ce or cfg.dynamic_weights or cfg.discriminator_mode == "class":
            if cfg.smoothing.mo_pl or p_tgt_live is None:
                p_hat = classifier_forward(pl_C, extractor_forward(pl_F, xt, ecfg), ecfg)
            else:
                p_hat = stop_gradient(p_tgt_live)
        f_src_d = stop_gradient(f_src)
        self._hook("features")

        w_src = w_tgt = None
        lr_ds = None
        if adversarial:
            if cfg.dynamic_weights:
                s_src = similarity_forward(st.similarity, f_src_d)
                s_tgt = similarity_forward(st.similarity, f_tgt_fa)
                w_src, w_tgt = dynamic_weights(p_src, p_hat, s_src, s_tgt)
            # (2) discriminator
            mode, K = cfg.discriminator_mode, self.num_classes
            d_src = discriminator_forward(st.discriminator, f_src_d, mode, K)
            d_tgt = discriminator_forward(st.discriminator, f_tgt_fa, mode, K)
            p_hat_data = None if p_hat is None else p_hat.data
            loss_d = discriminator_loss(self.variant, d_src, d_tgt, w_src, w_tgt, p_src.data, p_hat_data)
            backward(loss_d)
            lr_ds = adam_step(st.discriminator, st.optimizers["discriminator"])
            bundle.adv = loss_d
            self._hook("discriminator")
            # (3) similarity
            if cfg.dynamic_weights:
                loss_s = sim_loss(s_src, s_tgt)
                backward(loss_s)
                lr_ds = adam_step(st.similarity, st.optimizers["similarity"])
                bundle.sim = loss_s
                self._hook("similarity")
                # (4) weights from the updated similarity network
                S = st.similarity.detached()
                w_src, w_tgt = dynamic_weights(p_src, p_hat, similarity_forward(S, f_src_d),
                                               similarity_forward(S, f_tgt_fa))
            self._hook("weights")

        # (5) pseudo labels
        y_hat = pseudo_label(p_hat) if with_target_ce else None

        # (6) segmentation update
        loss = ce_source(p_src, batch.source_masks)
        bundle.ce_source = loss
        if with_target_ce:
            bundle.ce_target = ce_target(p_tgt_live, y_hat)
            loss = loss + bundle.ce_target
        if adversarial:
            D = st.discriminator.detached()
            d_gen = discriminator_forward(D, f_src, cfg.discriminator_mode, self.num_classes)
            d_gen_t = (discriminator_forward(D, f_tgt_live, cfg.discriminator_mode, self.num_classes)
                       if target_grad else None)
            g = generator_adv_loss(self.variant, d_gen, d_gen_t, w_src, w_tgt, p_src.data,
                                   None if p_hat is None else p_hat.data,
                                   saturating=cfg.optim.saturating_generator)
            loss = loss + g * cfg.optim.lambda_adv
        backward(loss)
        self._check_grads()
        lr_fc = adamw_step(st.extractor, st.optimizers["extractor"])
        adamw_step(st.classifier, st.optimizers["classifier"])
        self._hook("segmentation")

        # (7) momentum teachers
        for pair in st.pairs.values():
            ema_update(pair)
        self._last_lrs = (lr_fc, lr_ds)
        return bundle

    def _check_grads(self) -> None:
        for kind, store in self.state.live().items():
            for name, t in store.items():
                if t.grad is not None and not np.isfinite(t.grad).all():
                    raise NonFiniteError(f"gradient of {kind}.{name}")

    def _diagnostics(self, reason: str) -> dict:
        norms = {}
        for kind, store in self.state.live().items():
            sq = [float(np.sum(np.square(t.grad, dtype=np.float64))) for t in store.values() if t.grad is not None]
            norms[kind] = math.sqrt(sum(sq)) if sq else None
        last = self.loss_log[-1] if self.loss_log else {}
        return {"iteration": self.state.iteration, "round": self.state.round, "reason": reason,
                "last_losses": last, "grad_norms": norms}

    # driving ------------------------------------------------------------------------------

    def run(self, until: Optional[int] = None) -> TrainState:
        st = self.state
        end = self.total_iters if until is None else min(int(until), self.total_iters)
        while st.iteration < end:
            it = st.iteration
            phase, rnd = self.phase_at(it)
            if phase == TRAIN and st.round < rnd:
                self.begin_round(rnd)
            bundle = self.step(self.data.batch(it, self.cfg.batch_size), phase)
            st.iteration += 1
            self._log(it, bundle)
            if self.traces and it % self.cfg.tracking.stride == 0:
                self.track(it)
        return st

    def warmup_phase(self) -> TrainState:
        return self.run(until=self.cfg.schedule.warmup_iters)

    def train_phase(self) -> TrainState:
        if self.state.iteration < self.cfg.schedule.warmup_iters:
            raise RuntimeError("train_phase requires the warm-up phase to be completed")
        return self.run()

    def _log(self, it: int, bundle: LossBundle) -> None:
        vals = bundle.as_floats()
        for k, v in vals.items():
            if v is not None and not math.isfinite(v):
                raise TrainingAborted(self._diagnostics(f"loss {k} = {v}"))
        lr_fc, lr_ds = self._last_lrs
        self.loss_log.append({"iter": it, **vals, "lr_fc": lr_fc, "lr_ds": lr_ds})

    # predictions -------------------------------------------------------------------------

    def teacher_predictions(self, images: np.ndarray) -> np.ndarray:
        """Pseudo-label branch probabilities (EMA network under MoPL, live otherwise)."""
        st = self.state
        (F, C), _ = teacher_branches(self.cfg.smoothing, {"extractor": st.extractor,
                                                          "classifier": st.classifier}, st.pairs)
        return classifier_forward(C, extractor_forward(F, self._images(images), self.cfg.extractor),
                                  self.cfg.extractor).data

    def discriminator_predictions(self, images: np.ndarray) -> np.ndarray:
        st = self.state
        _, fa = teacher_branches(self.cfg.smoothing, {"extractor": st.extractor,
                                                      "classifier": st.classifier}, st.pairs)
        feat = extractor_forward(fa.detached() if fa is st.extractor else fa, self._images(images),
                                 self.cfg.extractor)
        return discriminator_forward(st.discriminator.detached(), feat, self.cfg.discriminator_mode,
                                     self.num_classes).data

    def track(self, iteration: int) -> None:
        probes = self.data.probe_images
        if "classifier_target" in self.traces:
            track(self.traces["classifier_target"], iteration, self.teacher_predictions(probes))
        if "discriminator_target" in self.traces:
            track(self.traces["discriminator_target"], iteration, self.discriminator_predictions(probes))

    def predict(self, images: np.ndarray, batch: int = 16) -> np.ndarray:
        """Argmax masks from the live network."""
        F, C = self.state.extractor.detached(), self.state.classifier.detached()
        out = []
        for i in range(0, len(images), batch):
            p = classifier_forward(C, extractor_forward(F, self._images(images[i:i + batch]), self.cfg.extractor),
                                   self.cfg.extractor)
            out.append(np.argmax(p.data, axis=1).astype(np.uint8))
        return np.concatenate(out)

    def evaluate(self, domain: str = "target") -> ConfusionMatrix:
        if domain == "target":
            images, masks = self.data.test_images, self.data.test_masks
        elif domain == "source":
            images, masks = self.data.source_test_images, self.data.source_test_masks
        else:
            raise ValueError(f"domain must be source or target, got {domain!r}")
        cm = ConfusionMatrix(self.num_classes)
        cm.accumulate(self.predict(images), masks)
        return cm

    def target_miou(self) -> float:
        return miou(self.evaluate("target"), range(self.spec.num_common))

    def similarity_ordering(self) -> Optional[dict[str, float]]:
        """Mean similarity score over source-private, common and target-private pixels.

        Scores come from the live extractor and S, upsampled to pixels by
        repetition and averaged over held-out source and target images. A
        group with no pixels (or no S) reports NaN / None.
        """
        st = self.state
        if st.similarity is None:
            return None
        p = self.cfg.extractor.patch_size
        F, S = st.extractor.detached(), st.similarity.detached()
        sums = {"source_private": [0.0, 0], "common": [0.0, 0], "target_private": [0.0, 0]}
        for images, masks in ((self.data.source_test_images, self.data.source_test_masks),
                              (self.data.test_images, self.data.test_masks)):
            s = similarity_forward(S, extractor_forward(F, self._images(images), self.cfg.extractor)).data
            s = np.repeat(np.repeat(s[:, 0], p, axis=1), p, axis=2)
            groups = {"common": masks < self.spec.num_common}
            if self.spec.source_private_id is not None:
                groups["source_private"] = masks == self.spec.source_private_id
            if self.spec.target_private_id is not None:
                groups["target_private"] = masks == self.spec.target_private_id
            for name, sel in groups.items():
                sums[name][0] += float(s[sel].sum())
                sums[name][1] += int(sel.sum())
        return {k: (v[0] / v[1] if v[1] else float("nan")) for k, v in sums.items()}

    # output ------------------------------------------------------------------------------

    def write_loss_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOSS_COLUMNS)
            for row in self.loss_log:
                w.writerow([row["iter"]] + ["" if row[c] is None else f"{row[c]:.9g}" for c in LOSS_COLUMNS[1:]])
        return path


# -- checkpoints ------------------------------------------------------------------------------

def to_checkpoint(state: TrainState) -> ckpt.Checkpoint:
    ck = ckpt.Checkpoint()
    for kind, store in state.live().items():
        ck.stores[("live", kind)] = store.state_arrays()
    for kind, pair in state.pairs.items():
        ck.stores[("ema", kind)] = pair.target.state_arrays()
    for kind, store in state.snapshot.items():
        ck.stores[("snapshot", kind)] = store.state_arrays()
    for kind, opt in state.optimizers.items():
        arrays = {}
        for name in opt.m:
            arrays[f"m.{name}"] = opt.m[name]
            arrays[f"v.{name}"] = opt.v[name]
        ck.optimizers[kind] = (opt.step, arrays)
    ck.counters = {"iteration": state.iteration, "round": state.round}
    return ck


def _store(kind: str, arrays: dict[str, np.ndarray], requires_grad: bool) -> ParameterStore:
    ps = ParameterStore(kind)
    for name, arr in arrays.items():
        ps.add(name, Tensor(arr.copy(), requires_grad=requires_grad, dtype=arr.dtype))
    return ps


def from_checkpoint(ck: ckpt.Checkpoint, m: float = 0.999) -> TrainState:
    """Rebuild a state; schedules are rebound by the Trainer from its config."""
    live = {k: _store(k, a, True) for (role, k), a in ck.stores.items() if role == "live"}
    snap = {k: _store(k, a, False) for (role, k), a in ck.stores.items() if role == "snapshot"}
    for need in ("extractor", "classifier"):
        if need not in live or need not in snap:
            raise ckpt.CheckpointError(f"checkpoint lacks the {need} live/snapshot stores")
    state = TrainState(live["extractor"], live["classifier"], live.get("discriminator"),
                       live.get("similarity"), snap)
    for (role, kind), arrays in ck.stores.items():
        if role == "ema":
            state.pairs[kind] = MomentumPair(live[kind], _store(kind, arrays, False), m)
    for kind, (step, arrays) in ck.optimizers.items():
        opt = OptimizerState(Schedule(), step=step)
        for name in live[kind].names():
            opt.m[name] = arrays[f"m.{name}"].copy()
            opt.v[name] = arrays[f"v.{name}"].copy()
        state.optimizers[kind] = opt
    state.iteration = int(ck.counters["iteration"])
    state.round = int(ck.counters["round"])
    return state


def save_checkpoint(state: TrainState, path) -> Path:
    return ckpt.write(to_checkpoint(state), path)


def load_checkpoint(path, m: float = 0.999) -> TrainState:
    return from_checkpoint(ckpt.read(path), m)
