"""Optimizers, the training-method registry, and the joint training loop.

One loop covers every method: per-domain experts trained on their own
minibatches, a target model trained on the concatenated batch with a
method-specific guidance term, and (for the dynamic aggregation baseline)
a domain-weighting network, all updated by a single shared optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models as mm
from .domains import DomainDataset, make_batches, one_hot

ERM = "erm"
LFME = "lfme"
ERM_PLUS = "erm_plus"
LS = "ls"
KD_ZZ = "kd_zz"
KD_QZ = "kd_qz"
KD_QQ = "kd_qq"
KD_CE = "kd_ce"
LFME_GUID = "lfme_guid"
SELF_GUID = "self_guid"
ERMP_W_EXPT = "ermp_w_expt"
ERMP_W_SELF = "ermp_w_self"
AGG_AVG = "agg_avg"
AGG_MS = "agg_ms"
AGG_CONF = "agg_conf"
AGG_DYN = "agg_dyn"

METHOD_KINDS = (
    ERM, LFME, ERM_PLUS, LS, KD_ZZ, KD_QZ, KD_QQ, KD_CE, LFME_GUID,
    SELF_GUID, ERMP_W_EXPT, ERMP_W_SELF, AGG_AVG, AGG_MS, AGG_CONF, AGG_DYN,
)
EXPERT_KINDS = frozenset({LFME, KD_ZZ, KD_QZ, KD_QQ, KD_CE, ERMP_W_EXPT,
                          AGG_AVG, AGG_MS, AGG_CONF, AGG_DYN})
AGG_KINDS = frozenset({AGG_AVG, AGG_MS, AGG_CONF, AGG_DYN})

DEFAULT_HIDDEN = (64, 64)
ALPHA_HALF_GRID = (0.0, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)


class ConfigError(Exception):
    """Invalid method or training configuration."""


@dataclass(frozen=True)
class MethodSpec:
    kind: str
    alpha_half: float = 1.0
    ls_epsilon: float = 0.1
    ramp_steps: int | None = None       # KD_CE ramp length; default steps // 2
    hard_weight_beta: float = 1.0

    def validate(self):
        if self.kind not in METHOD_KINDS:
            raise ConfigError(f"unknown method kind {self.kind!r}")
        if self.alpha_half < 0:
            raise ConfigError(f"alpha_half must be >= 0, got {self.alpha_half}")
        if not 0.0 <= self.ls_epsilon < 1.0:
            raise ConfigError(f"ls_epsilon must be in [0,1), got {self.ls_epsilon}")

    @property
    def name(self) -> str:
        return self.kind


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"             # "adam" or "sgd"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    steps: int = 5000
    batch_per_domain: int = 32
    seed: int = 0
    eval_every: int = 250
    hidden_dims: tuple[int, ...] = DEFAULT_HIDDEN
    probe_per_domain: int = 40

    def validate(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0 or self.steps <= 0 or self.batch_per_domain <= 0 or self.eval_every <= 0:
            raise ConfigError("lr must be >= 0 and steps/batch/eval_every positive")


class SgdMomentum:
    def __init__(self, params, lr, weight_decay=0.0, momentum=0.9):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v


class Adam:
    def __init__(self, params, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def make_optimizer(params, config: TrainConfig):
    if config.optimizer == "sgd":
        return SgdMomentum(params, config.lr, config.weight_decay)
    return Adam(params, config.lr, config.weight_decay)


# ---------------------------------------------------------------------------
# Losses


def loss_expert(z: ad.Tensor, y_onehot) -> ad.Tensor:
    return ad.cross_entropy(ad.softmax(z), y_onehot)


def loss_lfme(z: ad.Tensor, y_onehot, q_expert, alpha_half: float) -> ad.Tensor:
    """Classification loss plus logit regression toward expert probabilities."""
    q_expert = q_expert.data if isinstance(q_expert, ad.Tensor) else np.asarray(q_expert)
    if q_expert.shape != z.data.shape:
        raise ad.ShapeError(f"expert rows {q_expert.shape} misaligned with logits {z.data.shape}")
    cla = ad.cross_entropy(ad.softmax(z), y_onehot)
    if alpha_half == 0.0:
        return cla
    return ad.add(cla, ad.scale(ad.mse(z, ad.tensor(q_expert)), alpha_half))


def loss_erm_plus(z: ad.Tensor, y_onehot, alpha_half: float) -> ad.Tensor:
    cla = ad.cross_entropy(ad.softmax(z), y_onehot)
    if alpha_half == 0.0:
        return cla
    return ad.add(cla, ad.scale(ad.mse(z, ad.tensor(np.asarray(y_onehot, dtype=np.float64))),
                                alpha_half))


def loss_ls(z: ad.Tensor, y_onehot, epsilon: float) -> ad.Tensor:
    y_onehot = np.asarray(y_onehot, dtype=np.float64)
    if epsilon == 0.0:
        return ad.cross_entropy(ad.softmax(z), y_onehot)
    k = y_onehot.shape[-1]
    smoothed = (1.0 - epsilon) * y_onehot + epsilon / k
    return ad.soft_cross_entropy(ad.softmax(z), smoothed)


def kd_weight(alpha_half: float, step: int, ramp_steps: int | None) -> float:
    """Linear ramp from 0 to alpha_half over ramp_steps (no ramp when None)."""
    if ramp_steps is None or ramp_steps <= 0:
        return alpha_half
    return alpha_half * min(1.0, step / ramp_steps)


def loss_kd_variant(kind: str, z: ad.Tensor, y_onehot, z_expert, q_expert,
                    weight_t: float) -> ad.Tensor:
    z_expert = np.asarray(z_expert, dtype=np.float64)
    q_expert = np.asarray(q_expert, dtype=np.float64)
    q = ad.softmax(z)
    if kind == KD_CE:
        cla = ad.scale(ad.cross_entropy(q, y_onehot), 1.0 - weight_t)
        if weight_t == 0.0:
            return cla
        return ad.add(cla, ad.scale(ad.soft_cross_entropy(q, q_expert), weight_t))
    cla = ad.cross_entropy(q, y_onehot)
    if weight_t == 0.0:
        return cla
    if kind == KD_ZZ:
        guid = ad.mse(z, ad.tensor(z_expert))
    elif kind == KD_QZ:
        guid = ad.mse(q, ad.tensor(z_expert))
    elif kind == KD_QQ:
        guid = ad.mse(q, ad.tensor(q_expert))
    else:
        raise ConfigError(f"not a KD kind: {kind!r}")
    return ad.add(cla, ad.scale(guid, weight_t))


def loss_self_guid(z: ad.Tensor) -> ad.Tensor:
    """Guidance toward the model's own detached probabilities."""
    q_const = ad.detach(ad.softmax(z))
    return ad.mse(z, q_const)


def loss_lfme_guid(q_new: ad.Tensor, q_teacher) -> ad.Tensor:
    """Guidance toward probabilities of a frozen, previously trained model."""
    q_teacher = q_teacher.data if isinstance(q_teacher, ad.Tensor) else np.asarray(q_teacher)
    return ad.mse(q_new, ad.tensor(q_teacher))


def hard_weights(expert_losses: np.ndarray, beta: float) -> np.ndarray:
    """Per-sample weights rising with loss z-score, mean near 1, clamped."""
    losses = np.asarray(expert_losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise ConfigError("hard_weights needs a nonempty loss vector")
    w = 1.0 + beta * (losses - losses.mean()) / (losses.std() + 1e-8)
    return np.clip(w, 0.1, 10.0)


# ---------------------------------------------------------------------------
# Evaluation helpers


def softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def entropy_rows(q: np.ndarray) -> np.ndarray:
    terms = np.where(q > 0.0, q * np.log(np.maximum(q, 1e-300)), 0.0)
    return -terms.sum(axis=-1)


def predict(model: mm.MlpModel, x: np.ndarray) -> np.ndarray:
    return mm.forward_array(model, x).argmax(axis=1)


def accuracy(model: mm.MlpModel, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(model, x) == y))


def average_parameters(experts: list[mm.MlpModel]) -> mm.MlpModel:
    dims = experts[0].layer_dims
    for e in experts[1:]:
        if e.layer_dims != dims:
            raise ConfigError(f"architecture mismatch for parameter soup: {e.layer_dims} vs {dims}")
    soup = mm.init_mlp(dims, 0)
    stacks = [np.mean([e.param_arrays()[i] for e in experts], axis=0)
              for i in range(len(soup.parameters()))]
    soup.load_param_arrays(stacks)
    return soup


def aggregate_predict(kind: str, experts: list[mm.MlpModel],
                      weighting: mm.MlpModel | None, x: np.ndarray) -> np.ndarray:
    """Combined expert probabilities for one inference-time aggregation rule."""
    if kind == AGG_MS:
        return softmax_np(mm.forward_array(average_parameters(experts), x))
    probs = np.stack([softmax_np(mm.forward_array(e, x)) for e in experts])
    if kind == AGG_AVG:
        return probs.mean(axis=0)
    if kind == AGG_CONF:
        ent = np.stack([entropy_rows(p) for p in probs])           # M x B
        pick = ent.argmin(axis=0)                                  # ties -> lowest id
        return probs[pick, np.arange(x.shape[0])]
    if kind == AGG_DYN:
        if weighting is None:
            raise ConfigError("dynamic aggregation needs a trained weighting network")
        w = softmax_np(mm.forward_array(weighting, x))             # B x M
        return np.einsum("mbk,bm->bk", probs, w)
    raise ConfigError(f"not an aggregation kind: {kind!r}")


# ---------------------------------------------------------------------------
# Run records


@dataclass
class EvalPoint:
    step: int
    target_loss: float
    train_acc: dict[int, float]
    val_acc: dict[int, float]
    mean_val_acc: float
    val_entropy: float
    probe_logit_sum: float
    rescale_f: float | None = None
    rescale_fp: float | None = None
    expert_val_acc: dict[int, float] = field(default_factory=dict)
    probe_probs: np.ndarray | None = None
    target_params: list[np.ndarray] | None = None
    expert_params: list[list[np.ndarray]] | None = None
    weighting_params: list[np.ndarray] | None = None


@dataclass
class Probe:
    x: np.ndarray
    y: np.ndarray
    domain_ids: np.ndarray
    domain_pos: dict[int, int]       # domain id -> position among sources


@dataclass
class RunResult:
    method: MethodSpec
    config: TrainConfig
    source_ids: list[int]
    held_out_id: int | None
    loss_trace: np.ndarray
    target_loss_trace: np.ndarray
    evals: list[EvalPoint]
    selected_index: int
    probe: Probe
    ood_accuracy: float | None = None
    expert_probe_losses: np.ndarray | None = None    # at selected step

    @property
    def selected(self) -> EvalPoint:
        return self.evals[self.selected_index]

    @property
    def selected_step(self) -> int:
        return self.selected.step

    def selected_target_model(self) -> mm.MlpModel | None:
        ev = self.selected
        if ev.target_params is None:
            return None
        dims = [self.probe.x.shape[1], *self.config.hidden_dims, _k_from_params(ev.target_params)]
        model = mm.init_mlp(dims, 0)
        model.load_param_arrays(ev.target_params)
        return model

    def selected_expert_models(self) -> list[mm.MlpModel] | None:
        ev = self.selected
        if ev.expert_params is None:
            return None
        out = []
        for arrays in ev.expert_params:
            dims = [self.probe.x.shape[1], *self.config.hidden_dims, _k_from_params(arrays)]
            model = mm.init_mlp(dims, 0)
            model.load_param_arrays(arrays)
            out.append(model)
        return out


def _k_from_params(arrays: list[np.ndarray]) -> int:
    return arrays[-1].shape[0]


def make_probe(sources: list[DomainDataset], config: TrainConfig) -> Probe:
    xs, ys, ids = [], [], []
    for ds in sources:
        rng = np.random.default_rng([config.seed, 15485863, ds.domain_id])
        take = rng.choice(ds.val_idx, size=min(config.probe_per_domain, len(ds.val_idx)),
                          replace=False)
        xs.append(ds.features[take])
        ys.append(ds.labels[take])
        ids.append(np.full(len(take), ds.domain_id, dtype=np.int64))
    pos = {ds.domain_id: i for i, ds in enumerate(sources)}
    return Probe(np.concatenate(xs), np.concatenate(ys), np.concatenate(ids), pos)


def rescale_factors(z: np.ndarray, q: np.ndarray, q_expert: np.ndarray,
                    y: np.ndarray, alpha: float):
    """Batch means of the ground-truth and non-ground-truth gradient ratios.

    Samples whose ground-truth probability saturates are excluded; returns
    (nan, nan) when nothing survives the guard.
    """
    b = np.arange(len(y))
    q_star = q[b, y]
    mask = q_star < 1.0 - 1e-9
    if not np.any(mask):
        return float("nan"), float("nan")
    z_star = z[b, y][mask]
    qe_star = q_expert[b, y][mask]
    qs = q_star[mask]
    sum_nongt = z.sum(axis=1)[mask] - z_star
    f = 1.0 - alpha * (z_star - qe_star) / (1.0 - qs)
    fp = 1.0 - alpha * (1.0 - sum_nongt - qe_star) / (1.0 - qs)
    return float(f.mean()), float(fp.mean())


# ---------------------------------------------------------------------------
# The training loop


def entropy_like_ce(q: np.ndarray, y_onehot: np.ndarray) -> np.ndarray:
    return -(y_onehot * np.log(np.maximum(q, ad.LOG_FLOOR))).sum(axis=1)


def train_run(sources: list[DomainDataset], method: MethodSpec, config: TrainConfig,
              held_out: DomainDataset | None = None,
              teacher: mm.MlpModel | None = None) -> RunResult:
    """Train one method on the given source domains.

    Experts, the target model, and (for dynamic aggregation) the weighting
    network are updated by one shared optimizer, every step, from one joint
    scalar loss. Expert probabilities entering any guidance term are
    detached first.
    """
    method.validate()
    config.validate()
    if len(sources) < 2:
        raise ConfigError("need at least 2 source domains")
    k = sources[0].n_classes
    d = sources[0].features.shape[1]
    n_src = len(sources)
    dims = [d, *config.hidden_dims, k]

    needs_experts = method.kind in EXPERT_KINDS
    needs_target = method.kind not in AGG_KINDS
    needs_weighting = method.kind == AGG_DYN
    if method.kind == LFME_GUID and teacher is None:
        raise ConfigError("lfme_guid needs a frozen teacher model")

    target = mm.init_mlp(dims, [config.seed, 11, 0]) if needs_target else None
    experts = ([mm.init_mlp(dims, [config.seed, 12, i]) for i in range(n_src)]
               if needs_experts else None)
    weighting = mm.init_mlp([d, *config.hidden_dims, n_src], [config.seed, 13, 0]) \
        if needs_weighting else None

    params = []
    if experts:
        for e in experts:
            params.extend(e.parameters())
    if target:
        params.extend(target.parameters())
    if weighting:
        params.extend(weighting.parameters())
    opt = make_optimizer(params, config)

    probe = make_probe(sources, config)
    ramp = method.ramp_steps if method.ramp_steps is not None else config.steps // 2
    use_weighted = method.kind in (ERMP_W_EXPT, ERMP_W_SELF) and method.hard_weight_beta != 0.0

    pooled_val_x = np.concatenate([ds.features[ds.val_idx] for ds in sources])

    loss_trace = np.zeros(config.steps)
    target_loss_trace = np.zeros(config.steps)
    evals: list[EvalPoint] = []

    for step in range(config.steps):
        batch = make_batches(sources, config.batch_per_domain, config.seed, step)
        y_all_1h = one_hot(batch.y_all, k)
        terms = []

        q_expert_rows = None
        z_expert_rows = None
        expert_sample_losses = None
        if experts is not None:
            q_parts, z_parts, loss_parts = [], [], []
            for i, e in enumerate(experts):
                z_i = mm.forward(e, ad.tensor(batch.xs[i]))
                q_i = ad.softmax(z_i)
                rows_i = ad.cross_entropy_rows(q_i, one_hot(batch.ys[i], k))
                terms.append(ad.scale(ad.sum_all(rows_i), 1.0 / config.batch_per_domain))
                q_parts.append(q_i.data)
                z_parts.append(z_i.data)
                loss_parts.append(rows_i.data)
            q_expert_rows = np.concatenate(q_parts)
            z_expert_rows = np.concatenate(z_parts)
            expert_sample_losses = np.concatenate(loss_parts)

        if weighting is not None:
            zw = mm.forward(weighting, ad.tensor(batch.x_all))
            dom_pos = np.concatenate([np.full(config.batch_per_domain, i, dtype=np.int64)
                                      for i in range(n_src)])
            terms.append(ad.cross_entropy(ad.softmax(zw), one_hot(dom_pos, n_src)))

        target_loss_val = float("nan")
        if target is not None:
            z = mm.forward(target, ad.tensor(batch.x_all))
            kind = method.kind
            if kind == ERM:
                t_loss = ad.cross_entropy(ad.softmax(z), y_all_1h)
            elif kind == LFME:
                t_loss = loss_lfme(z, y_all_1h, q_expert_rows, method.alpha_half)
            elif kind == ERM_PLUS or (kind in (ERMP_W_EXPT, ERMP_W_SELF) and not use_weighted):
                t_loss = loss_erm_plus(z, y_all_1h, method.alpha_half)
            elif kind == LS:
                t_loss = loss_ls(z, y_all_1h, method.ls_epsilon)
            elif kind in (KD_ZZ, KD_QZ, KD_QQ, KD_CE):
                wt = kd_weight(method.alpha_half, step, ramp if kind == KD_CE else None)
                t_loss = loss_kd_variant(kind, z, y_all_1h, z_expert_rows, q_expert_rows, wt)
            elif kind == SELF_GUID:
                cla = ad.cross_entropy(ad.softmax(z), y_all_1h)
                t_loss = (cla if method.alpha_half == 0.0
                          else ad.add(cla, ad.scale(loss_self_guid(z), method.alpha_half)))
            elif kind == LFME_GUID:
                q = ad.softmax(z)
                cla = ad.cross_entropy(q, y_all_1h)
                q_teach = softmax_np(mm.forward_array(teacher, batch.x_all))
                t_loss = (cla if method.alpha_half == 0.0
                          else ad.add(cla, ad.scale(loss_lfme_guid(q, q_teach),
                                                    method.alpha_half)))
            elif kind in (ERMP_W_EXPT, ERMP_W_SELF):
                q = ad.softmax(z)
                v = ad.cross_entropy_rows(q, y_all_1h)
                if method.alpha_half != 0.0:
                    v = ad.add(v, ad.scale(ad.sq_norm_rows(z, y_all_1h), method.alpha_half))
                ref = expert_sample_losses if kind == ERMP_W_EXPT else v.data
                t_loss = ad.weighted_mean(v, hard_weights(ref, method.hard_weight_beta))
            else:
                raise ConfigError(f"unhandled method kind {kind!r}")
            terms.append(t_loss)
            target_loss_val = t_loss.item()

        loss = terms[0]
        for t in terms[1:]:
            loss = ad.add(loss, t)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()

        loss_trace[step] = loss.item()
        target_loss_trace[step] = target_loss_val

        if (step + 1) % config.eval_every == 0 or step == config.steps - 1:
            evals.append(_evaluate(step, sources, method, config, target, experts,
                                   weighting, probe, pooled_val_x, target_loss_val))

    mean_vals = np.array([ev.mean_val_acc for ev in evals])
    selected_index = int(np.argmax(mean_vals))

    result = RunResult(
        method=method, config=config,
        source_ids=[ds.domain_id for ds in sources],
        held_out_id=held_out.domain_id if held_out is not None else None,
        loss_trace=loss_trace, target_loss_trace=target_loss_trace,
        evals=evals, selected_index=selected_index, probe=probe,
    )

    if experts is not None:
        sel_experts = result.selected_expert_models()
        per_domain = []
        for i, e in enumerate(sel_experts):
            mask = probe.domain_ids == sources[i].domain_id
            q = softmax_np(mm.forward_array(e, probe.x[mask]))
            per_domain.append((np.flatnonzero(mask),
                               entropy_like_ce(q, one_hot(probe.y[mask], k))))
        flat = np.zeros(len(probe.y))
        for idx, vals in per_domain:
            flat[idx] = vals
        result.expert_probe_losses = flat

    if held_out is not None:
        sel = result.selected
        if method.kind in AGG_KINDS:
            ex = result.selected_expert_models()
            w_model = None
            if sel.weighting_params is not None:
                w_model = mm.init_mlp([d, *config.hidden_dims, n_src], 0)
                w_model.load_param_arrays(sel.weighting_params)
            probs = aggregate_predict(method.kind, ex, w_model, held_out.features)
            result.ood_accuracy = float(np.mean(probs.argmax(axis=1) == held_out.labels))
        else:
            model = result.selected_target_model()
            result.ood_accuracy = accuracy(model, held_out.features, held_out.labels)
    return result


def _evaluate(step, sources, method, config, target, experts, weighting, probe,
              pooled_val_x, target_loss_val) -> EvalPoint:
    k = sources[0].n_classes
    train_acc, val_acc = {}, {}
    expert_val_acc = {}
    if method.kind in AGG_KINDS:
        w_model = weighting
        for ds in sources:
            probs = aggregate_predict(method.kind, experts, w_model, ds.features)
            pred = probs.argmax(axis=1)
            train_acc[ds.domain_id] = float(np.mean(pred[ds.train_idx] == ds.labels[ds.train_idx]))
            val_acc[ds.domain_id] = float(np.mean(pred[ds.val_idx] == ds.labels[ds.val_idx]))
        probe_probs = aggregate_predict(method.kind, experts, w_model, probe.x)
        probe_logits = np.log(np.maximum(probe_probs, ad.LOG_FLOOR))
        val_entropy = float("nan")
    else:
        for ds in sources:
            pred = predict(target, ds.features)
            train_acc[ds.domain_id] = float(np.mean(pred[ds.train_idx] == ds.labels[ds.train_idx]))
            val_acc[ds.domain_id] = float(np.mean(pred[ds.val_idx] == ds.labels[ds.val_idx]))
        probe_logits = mm.forward_array(target, probe.x)
        probe_probs = softmax_np(probe_logits)
        val_entropy = float(entropy_rows(softmax_np(mm.forward_array(target, pooled_val_x))).mean())

    rescale_f = rescale_fp = None
    if experts is not None:
        for i, e in enumerate(experts):
            ds = sources[i]
            expert_val_acc[ds.domain_id] = accuracy(e, ds.features[ds.val_idx],
                                                    ds.labels[ds.val_idx])
        if method.kind == LFME and method.alpha_half > 0 and target is not None:
            qe = np.zeros_like(probe_probs)
            for i, e in enumerate(experts):
                mask = probe.domain_ids == sources[i].domain_id
                qe[mask] = softmax_np(mm.forward_array(e, probe.x[mask]))
            rescale_f, rescale_fp = rescale_factors(
                probe_logits, probe_probs, qe, probe.y, 2.0 * method.alpha_half)

    return EvalPoint(
        step=step,
        target_loss=target_loss_val,
        train_acc=train_acc, val_acc=val_acc,
        mean_val_acc=float(np.mean(list(val_acc.values()))),
        val_entropy=val_entropy,
        probe_logit_sum=float(probe_logits.sum(axis=1).mean()),
        rescale_f=rescale_f, rescale_fp=rescale_fp,
        expert_val_acc=expert_val_acc,
        probe_probs=probe_probs,
        target_params=target.param_arrays() if target is not None else None,
        expert_params=[e.param_arrays() for e in experts] if experts is not None else None,
        weighting_params=weighting.param_arrays() if weighting is not None else None,
    )


def run_method(sources, method: MethodSpec, config: TrainConfig,
               held_out: DomainDataset | None = None) -> RunResult:
    """Entry point handling methods that need a previously trained teacher."""
    if method.kind == LFME_GUID:
        lfme_run = train_run(sources, MethodSpec(LFME, alpha_half=method.alpha_half),
                             config, held_out=None)
        teacher = lfme_run.selected_target_model()
        return train_run(sources, method, config, held_out=held_out, teacher=teacher)
    return train_run(sources, method, config, held_out=held_out)
