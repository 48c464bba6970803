"""Online adversarial augmentation training.

Each outer iteration runs three phases of ``inner`` epochs each:

    adv   theta <- grad CE(P^r) + CE(P^d)                   (augmentor frozen)
    tune  theta <- grad CE(P)                                (clean data only)
    coef  phi   <- grad l_cd R_cd + l_sym R_sym - l_adv CE(P^d)  (classifier frozen)

followed by ``final`` epochs of clean fine-tuning.  The classifier is a small
PointNet: shared per-point MLP, max-pool, dense head.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import nn
from .coefnet import (CoefNetConfig, coefnet_backward_batch, coefnet_forward_batch,
                      combine, init_coefnet)
from .errors import ArtifactNotFoundError
from .geometry import PointCloud
from .losses import chamfer_grad, cross_entropy_grad, symmetry_loss_grad

log = logging.getLogger(__name__)

AUGMENT_MODES = ("guided", "random-coef", "random-offset")


@dataclass
class TrainConfig:
    outer: int = 3
    inner: int = 2
    final: int = 10
    lambda_cd: float = 0.1
    lambda_sym: float = 0.1
    lambda_adv: float = 0.01
    v: int = 2
    batch: int = 32
    lr_cls: float = 1e-3
    lr_coef: float = 1e-3
    seed: int = 0
    beta: float = 0.1
    mu_a: float = 0.0
    sigma_a: float = 0.5
    m: int = 15
    direct: bool = False
    augment: str = "guided"
    sigma_offset: float = 0.05
    mixture_joint: bool = False
    distribution_tuning: bool = True
    reuse_final_optimizer: bool = False
    eval_every_epoch: bool = True

    def __post_init__(self):
        for name in ("outer", "inner", "final"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("lambda_cd", "lambda_sym", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.v < 1 or self.batch < 1:
            raise ValueError("v and batch must be >= 1")
        if self.augment not in AUGMENT_MODES:
            raise ValueError(f"augment must be one of {AUGMENT_MODES}")

    @classmethod
    def full_length(cls, **kw) -> "TrainConfig":
        """Full-length schedule: 15 outer x 10 inner epochs, 100 final epochs."""
        return cls(**{"outer": 15, "inner": 10, "final": 100, **kw})

    @property
    def coef(self) -> CoefNetConfig:
        return CoefNetConfig(self.beta, self.mu_a, self.sigma_a, self.m, self.direct)

    def expected_epochs(self) -> int:
        phases = 1 + int(self.distribution_tuning) + int(self.augment == "guided")
        return self.outer * phases * self.inner + self.final

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]


# --- classifier ------------------------------------------------------------


def init_classifier(n_classes: int, rng) -> dict:
    return {
        "encoder": nn.init_mlp([3, 64, 128, 256], rng, last="relu"),
        "head": nn.init_mlp([256, 128, n_classes], rng),
    }


def classifier_forward_batch(params, X):
    """Logits for a batch of equal-size clouds X (B, n, 3)."""
    g, ecache = nn.pointnet_forward(params["encoder"], X)
    logits, hcache = nn.mlp_forward(params["head"], g)
    return logits, (ecache, hcache)


def classifier_backward_batch(params, cache, dlogits, need_input=False):
    ecache, hcache = cache
    dg, gh = nn.mlp_backward(params["head"], hcache, dlogits)
    dX, ge = nn.pointnet_backward(params["encoder"], ecache, dg, need_input=need_input)
    return dX, {"encoder": ge, "head": gh}


def classifier_forward(params, cloud) -> np.ndarray:
    X = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    return classifier_forward_batch(params, X[None])[0][0]


def _stack(clouds):
    return np.stack([np.asarray(getattr(c, "points", c)) for c in clouds])


def ce_loss_grad(params, X, y):
    """Mean CE over the batch, its parameter gradients, and the forward cache."""
    logits, cache = classifier_forward_batch(params, X)
    losses, dlog = cross_entropy_grad(logits, y)
    B = X.shape[0]
    _, grads = classifier_backward_batch(params, cache, dlog / B)
    return float(losses.mean()), grads


def supervised_step(theta, state, clouds) -> float:
    """Plain supervised Adam step on the given clouds."""
    X = _stack(clouds)
    y = np.array([c.label for c in clouds])
    loss, grads = ce_loss_grad(theta, X, y)
    nn.adam_update(theta, grads, state)
    return loss


# --- augmentation of a batch -------------------------------------------------


@dataclass
class Augmentor:
    """How P^d is produced for a batch: CoefNet-guided or one of the baselines."""

    config: TrainConfig
    phi: dict | None = None

    def deformed(self, arts, rng):
        cfg = self.config
        if cfg.augment == "random-offset":
            out = []
            for art in arts:
                O = rng.normal(0.0, cfg.sigma_offset, size=(art.C0.shape[0], 3))
                out.append(art.W @ (art.C0 + O))
            return np.stack(out), None
        a_rand = np.stack([rng.normal(cfg.mu_a, cfg.sigma_a, size=art.M.shape[0]) for art in arts])
        M = np.stack([art.M for art in arts])
        if cfg.augment == "guided":
            F = np.stack([art.F_mh for art in arts])
            C0 = np.stack([art.C0 for art in arts])
            a_off, cache = coefnet_forward_batch(self.phi, a_rand, F, C0, M)
            a = combine(a_rand, a_off, cfg.coef)
        else:
            a_off, cache = np.zeros_like(a_rand), None
            a = a_rand
        D = np.stack([art.W @ (art.C0 + np.tensordot(a[b], M[b], axes=1)) for b, art in enumerate(arts)])
        return D, (a_rand, a_off, a, cache)


def recovered_batch(arts):
    return np.stack([art.W @ art.C0 for art in arts])


def adversarial_step(theta, phi, theta_state, batch, arts, config: TrainConfig, rng, augmentor=None):
    """theta update on recovered + deformed clouds; phi is only read.

    Returns (loss on P^r, loss on P^d, loss on P or None).
    """
    augmentor = augmentor or Augmentor(config, phi)
    y = np.array([c.label for c in batch])
    Pr = recovered_batch(arts)
    Pd, _ = augmentor.deformed(arts, rng)
    groups = [Pr, Pd]
    if config.mixture_joint:
        groups.insert(0, _stack(batch))
    parts, grads = grouped_loss_grad(theta, groups, y)
    nn.adam_update(theta, grads, theta_state)
    if config.mixture_joint:
        return parts[1], parts[2], parts[0]
    return parts[0], parts[1], None


def grouped_loss_grad(theta, groups, y):
    """Sum over groups of the per-group mean CE, with its theta gradient.

    Every group holds one cloud per label in ``y``.  Returns ([mean CE per group], grads).
    """
    B = len(y)
    X = np.concatenate(groups)
    logits, cache = classifier_forward_batch(theta, X)
    losses, dlog = cross_entropy_grad(logits, np.tile(y, len(groups)))
    _, grads = classifier_backward_batch(theta, cache, dlog / B)
    return [float(losses[k * B:(k + 1) * B].mean()) for k in range(len(groups))], grads


def distribution_tuning_step(theta, theta_state, batch) -> float:
    return supervised_step(theta, theta_state, batch)


def coefnet_objective_grad(theta, phi, arts, y, a_rand, config: TrainConfig):
    """lambda_cd R_cd + lambda_sym R_sym - lambda_adv CE(P^d), batch mean, and its phi gradient.

    Returns (objective, grads, (R_cd, R_sym, CE)) with the three terms as batch means.
    """
    cfg = config
    B = len(arts)
    M = np.stack([art.M for art in arts])
    F = np.stack([art.F_mh for art in arts])
    C0 = np.stack([art.C0 for art in arts])
    a_off, cache = coefnet_forward_batch(phi, a_rand, F, C0, M)
    a = combine(a_rand, a_off, cfg.coef)
    Pr = recovered_batch(arts)
    Pd = np.stack([art.W @ (art.C0 + np.tensordot(a[b], M[b], axes=1)) for b, art in enumerate(arts)])

    dPd = np.zeros_like(Pd)
    r_cd = np.zeros(B)
    r_sym = np.zeros(B)
    for b in range(B):
        if cfg.lambda_cd:
            r_cd[b], g, _ = chamfer_grad(Pd[b], Pr[b])
            dPd[b] += cfg.lambda_cd * g
        if cfg.lambda_sym:
            r_sym[b], g = symmetry_loss_grad(Pd[b], cfg.v)
            dPd[b] += cfg.lambda_sym * g

    logits, ccache = classifier_forward_batch(theta, Pd)
    ce, dlog = cross_entropy_grad(logits, y)
    if cfg.lambda_adv:
        dX, _ = classifier_backward_batch(theta, ccache, dlog, need_input=True)
        dPd -= cfg.lambda_adv * dX
    dPd /= B
    objective = float(np.mean(cfg.lambda_cd * r_cd + cfg.lambda_sym * r_sym - cfg.lambda_adv * ce))

    dO = np.einsum("bnc,bnd->bcd", np.stack([art.W for art in arts]), dPd)
    da = np.einsum("bicd,bcd->bi", M, dO)
    d_aoff = da if cfg.direct else cfg.beta * da
    grads = coefnet_backward_batch(phi, cache, d_aoff)
    return objective, grads, (float(r_cd.mean()), float(r_sym.mean()), float(ce.mean()))


def coefnet_update_step(theta, phi, phi_state, batch, arts, config: TrainConfig, rng, a_rand=None):
    """phi update against the frozen classifier.  Returns (R_cd, R_sym, CE(P^d)).

    ``a_rand`` (B, m) may be given to hold the random draw fixed.
    """
    cfg = config
    y = np.array([c.label for c in batch])
    if a_rand is None:
        a_rand = np.stack([rng.normal(cfg.mu_a, cfg.sigma_a, size=art.M.shape[0]) for art in arts])
    _, grads, terms = coefnet_objective_grad(theta, phi, arts, y, a_rand, cfg)
    nn.adam_update(phi, grads, phi_state)
    return terms


def _check_frozen(model, before, what):
    if nn.checksum(model) != before:
        raise RuntimeError(f"{what} changed during a step that must leave it frozen")


# --- evaluation and corruptions --------------------------------------------


def predict(model, clouds, batch=64) -> np.ndarray:
    """argmax predictions; ``model`` is classifier params or a callable cloud -> logits."""
    clouds = list(clouds)
    if callable(model):
        return np.array([int(np.argmax(model(c))) for c in clouds], dtype=np.int64)
    out = np.empty(len(clouds), dtype=np.int64)
    by_size = {}
    for i, c in enumerate(clouds):
        by_size.setdefault(np.asarray(getattr(c, "points", c)).shape[0], []).append(i)
    for idx in by_size.values():
        for s in range(0, len(idx), batch):
            chunk = idx[s:s + batch]
            logits, _ = classifier_forward_batch(model, _stack([clouds[i] for i in chunk]))
            out[chunk] = np.argmax(logits, axis=1)
    return out


def evaluate(model, dataset) -> float:
    clouds = list(dataset)
    if not clouds:
        raise ValueError("cannot evaluate on an empty dataset")
    labels = np.array([c.label for c in clouds])
    return float(np.mean(predict(model, clouds) == labels))


CORRUPTION_GRID = (
    ("jitter", 0.01), ("jitter", 0.03), ("jitter", 0.05),
    ("dropout", 0.25), ("dropout", 0.5), ("dropout", 0.75),
    ("scale", 0.9), ("scale", 1.1),
)


def corrupt(cloud: PointCloud, kind: str, level: float, rng) -> PointCloud:
    P = cloud.points
    if kind == "jitter":
        if level < 0:
            raise ValueError("jitter sigma must be >= 0")
        return cloud.with_points(P + rng.normal(0.0, level, size=P.shape) if level else P)
    if kind == "dropout":
        if not 0 <= level < 1:
            raise ValueError(f"dropout ratio must be in [0, 1), got {level}")
        drop = int(np.floor(level * P.shape[0]))
        keep = np.sort(rng.permutation(P.shape[0])[drop:])
        return cloud.with_points(P[keep])
    if kind == "scale":
        return cloud.with_points(P * level)
    raise ValueError(f"unknown corruption {kind!r}")


def parse_corruption(text: str):
    kind, sep, level = text.partition(":")
    if not sep:
        raise ValueError(f"corruption must look like kind:level, got {text!r}")
    if kind not in ("jitter", "dropout", "scale"):
        raise ValueError(f"unknown corruption {kind!r} (jitter, dropout, scale)")
    try:
        value = float(level)
    except ValueError:
        raise ValueError(f"corruption level must be a number, got {level!r}") from None
    if kind == "dropout" and not 0 <= value < 1:
        raise ValueError(f"dropout ratio must be in [0, 1), got {value}")
    if kind == "jitter" and value < 0:
        raise ValueError("jitter sigma must be >= 0")
    return kind, value


def evaluate_corrupted(model, dataset, grid=CORRUPTION_GRID, seed=0) -> list:
    """[(kind, level, accuracy)] for every corruption in ``grid``."""
    rows = []
    for kind, level in grid:
        rng = np.random.default_rng([seed, len(rows)])
        noisy = [corrupt(c, kind, level, rng) for c in dataset]
        rows.append((kind, level, evaluate(model, noisy)))
    return rows


# --- the schedule ----------------------------------------------------------


REPORT_FIELDS = ("epoch", "outer", "phase", "loss_p", "loss_pr", "loss_pd",
                 "r_cd", "r_sym", "adv", "test_acc")


@dataclass
class TrainReport:
    config: dict
    seed: int
    records: list = field(default_factory=list)
    wall_clock: float = 0.0
    final_test_acc: float | None = None

    def deterministic_view(self) -> list:
        """Records without wall-clock timings."""
        return [{k: v for k, v in r.items() if k != "seconds"} for r in self.records]

    def to_tsv(self) -> str:
        """One line per epoch; timings live in ``timing_tsv`` so this is reproducible."""
        lines = ["\t".join(REPORT_FIELDS)]
        for r in self.records:
            lines.append("\t".join(_fmt(r.get(k)) for k in REPORT_FIELDS))
        return "\n".join(lines) + "\n"

    def timing_tsv(self) -> str:
        lines = ["epoch\tphase\tseconds"]
        lines += [f"{r['epoch']}\t{r['phase']}\t{r['seconds']:.3f}" for r in self.records]
        lines.append(f"total\t-\t{self.wall_clock:.3f}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        out = [f"seed={self.seed}", f"epochs={len(self.records)}",
               f"final_test_acc={_fmt(self.final_test_acc)}"]
        out += [f"config.{k}={v}" for k, v in self.config.items()]
        return "\n".join(out) + "\n"


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rng_streams(seed):
    """Independent generators: theta init, phi init, shuffling, augmentation."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def _batches(order, size):
    for s in range(0, len(order), size):
        yield order[s:s + size]


def supervised_train(dataset, epochs, seed=0, batch=32, lr=1e-3, n_classes=None, test=None):
    """Plain supervised training with the same seeding as ``advtune_train``."""
    clouds = list(dataset)
    n_classes = n_classes or len(dataset.classes)
    r_theta, _, r_shuffle, _ = rng_streams(seed)
    theta = init_classifier(n_classes, r_theta)
    state = nn.AdamState.for_model(theta, lr=lr)
    accs = []
    for _ in range(epochs):
        for idx in _batches(r_shuffle.permutation(len(clouds)), batch):
            supervised_step(theta, state, [clouds[i] for i in idx])
        if test is not None:
            accs.append(evaluate(theta, test))
    return theta, accs


def advtune_train(dataset, artifacts: dict, config: TrainConfig, test=None, n_classes=None,
                  theta=None, phi=None, on_epoch=None):
    """Run the full schedule.  ``artifacts`` maps sample id -> SampleArtifacts.

    Returns (theta, phi, TrainReport).
    """
    cfg = config
    clouds = list(dataset)
    n_classes = n_classes or len(dataset.classes)
    if cfg.outer > 0 and cfg.inner > 0:
        missing = [c.id for c in clouds if c.id not in artifacts]
        if missing:
            raise ArtifactNotFoundError(f"{len(missing)} samples lack artifacts, e.g. {missing[0]!r}")
        if cfg.augment != "random-offset":
            for c in clouds:
                artifacts[c.id].require_prototypes()

    r_theta, r_phi, r_shuffle, r_aug = rng_streams(cfg.seed)
    theta = theta if theta is not None else init_classifier(n_classes, r_theta)
    phi = phi if phi is not None else init_coefnet(r_phi)
    theta_state = nn.AdamState.for_model(theta, lr=cfg.lr_cls)
    phi_state = nn.AdamState.for_model(phi, lr=cfg.lr_coef)
    augmentor = Augmentor(cfg, phi)
    report = TrainReport(asdict(cfg), cfg.seed)
    t_start = time.perf_counter()

    def run_epoch(outer, phase):
        t0 = time.perf_counter()
        sums = {}
        nb = 0
        for idx in _batches(r_shuffle.permutation(len(clouds)), cfg.batch):
            batch = [clouds[i] for i in idx]
            arts = [artifacts[c.id] for c in batch] if phase in ("adv", "coef") else None
            if phase == "adv":
                lpr, lpd, lp = adversarial_step(theta, phi, theta_state, batch, arts, cfg, r_aug, augmentor)
                vals = {"loss_pr": lpr, "loss_pd": lpd, "loss_p": lp}
            elif phase == "coef":
                rcd, rsym, adv = coefnet_update_step(theta, phi, phi_state, batch, arts, cfg, r_aug)
                vals = {"r_cd": rcd, "r_sym": rsym, "adv": adv}
            else:
                vals = {"loss_p": distribution_tuning_step(theta, theta_state, batch)}
            for k, v in vals.items():
                if v is not None:
                    sums[k] = sums.get(k, 0.0) + v
            nb += 1
        rec = {k: None for k in REPORT_FIELDS}
        rec.update({k: v / nb for k, v in sums.items()})
        rec.update(epoch=len(report.records), outer=outer, phase=phase)
        if test is not None and (cfg.eval_every_epoch or phase == "final"):
            rec["test_acc"] = evaluate(theta, test)
        rec["seconds"] = time.perf_counter() - t0
        report.records.append(rec)
        log.info("epoch %d %s %s", rec["epoch"], phase,
                 " ".join(f"{k}={rec[k]:.4f}" for k in REPORT_FIELDS[3:] if rec[k] is not None))
        if on_epoch:
            on_epoch(rec)

    for outer in range(cfg.outer):
        for _ in range(cfg.inner):
            phi_sum = nn.checksum(phi)
            run_epoch(outer, "adv")
            _check_frozen(phi, phi_sum, "augmentor")
        if cfg.distribution_tuning:
            for _ in range(cfg.inner):
                phi_sum = nn.checksum(phi)
                run_epoch(outer, "tune")
                _check_frozen(phi, phi_sum, "augmentor")
        if cfg.augment == "guided":
            for _ in range(cfg.inner):
                theta_sum = nn.checksum(theta)
                run_epoch(outer, "coef")
                _check_frozen(theta, theta_sum, "classifier")

    if not cfg.reuse_final_optimizer:
        theta_state = nn.AdamState.for_model(theta, lr=cfg.lr_cls)
    for _ in range(cfg.final):
        run_epoch(None, "final")

    report.wall_clock = time.perf_counter() - t_start
    if test is not None:
        report.final_test_acc = report.records[-1]["test_acc"] if report.records else evaluate(theta, test)
    return theta, phi, report
