"""Run configuration and the staged pipeline: MN -> SRN -> GAN -> heads -> report.

Each stage gets its own RNG stream derived from the run seed and the stage
name, so a stage restored from disk leaves later stages' randomness unchanged.
Stage artifacts live in directories named by a hash of every setting the stage
depends on (including upstream stages), which keeps incompatible checkpoints
apart.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as dsm
from . import evaluate as ev
from . import gan
from . import metric
from . import nn

log = logging.getLogger(__name__)

VARIANTS = ("A", "B", "C1", "C2", "C3", "C4", "C5")
VARIANT_SPEC = {
    # gan mode, heads, tune omega1, tune omega2
    "A": ("classic_a", ("vs",), False, False),
    "B": ("classic_b", ("vs",), False, False),
    "C1": ("sr", ("vs",), False, False),
    "C2": ("sr", ("ss",), False, False),
    "C3": ("sr", ("srs",), False, False),
    "C4": ("sr", ("vs", "srs"), False, True),
    "C5": ("sr", ("vs", "ss", "srs"), True, True),
}
STAGE_IDS = {"data": 0, "mn": 1, "srn": 2, "gan": 3, "eval": 4, "export": 5}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int | None = None
    out_dir: str = "runs"
    # data
    manifest: str = ""
    synth_num_seen: int = 24
    synth_num_unseen: int = 4
    synth_instances: int = 60
    synth_d_v: int = 64
    synth_d_a: int = 12
    synth_sigma: float = 1.0
    synth_overlap: float = 0.0
    normalize: bool = False
    # metric network and rectifier
    margin: float = 1.0
    rep_dim: int = 256
    input_mode: str = "multimodal"
    mining: str = "uniform"
    mn_hidden: int = 1024
    srn_hidden: int = 1024
    n_m: int = 50
    n_r: int = 50
    batch_mn: int = 64
    decay: float = 1e-4
    # optimiser
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    # generator stage
    g_hidden: int = 1024
    d_hidden: int = 1024
    f_hidden: int = 512
    slope: float = 0.2
    d_z: int = 64
    n_loop: int = 2000
    n_d: int = 5
    n_g: int = 1
    batch_gan: int = 64
    lambda_gp: float = 10.0
    lambda1: float = 0.1
    lambda2: float = 0.1
    # classifiers
    variant: str = "C5"
    synth_per_class: int = 300
    head_steps: int = 500
    head_lr: float = 1e-3
    val_fraction: float = 0.2
    omega1: float | None = None
    omega2: float | None = None
    combine: str = "prob"

    def validate(self) -> RunConfig:
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        positive = ("synth_num_seen", "synth_num_unseen", "synth_instances", "synth_d_v", "synth_d_a",
                    "margin", "rep_dim", "mn_hidden", "srn_hidden", "n_m", "n_r", "batch_mn", "lr",
                    "g_hidden", "d_hidden", "f_hidden", "d_z", "n_loop", "n_d", "n_g", "batch_gan",
                    "synth_per_class", "head_steps", "head_lr")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        nonneg = ("decay", "lambda_gp", "lambda1", "lambda2", "synth_sigma")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        for name in ("omega1", "omega2"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name} must be non-negative or auto")
        if not 0.0 <= self.synth_overlap <= 1.0:
            raise ConfigError("synth_overlap must lie in [0, 1]")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if not 0.0 < self.slope < 1.0:
            raise ConfigError("slope must lie in (0, 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.input_mode not in metric.INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {metric.INPUT_MODES}")
        if self.mining not in ("uniform", "semihard"):
            raise ConfigError("mining must be uniform or semihard")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.combine not in ("prob", "logit"):
            raise ConfigError("combine must be prob or logit")
        return self

    # -- serialisation ----------------------------------------------------
    @classmethod
    def field_types(cls) -> dict[str, str]:
        return {f.name: str(f.type) for f in dataclasses.fields(cls)}

    @classmethod
    def parse_value(cls, key: str, raw: str):
        types = cls.field_types()
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        t = types[key]
        raw = raw.strip()
        try:
            if t.startswith("int"):
                return None if raw.lower() in ("", "none") else int(raw)
            if t == "bool":
                if raw.lower() in ("1", "true", "yes", "on"):
                    return True
                if raw.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            if t.startswith("float | None"):
                return None if raw.lower() in ("auto", "none", "") else float(raw)
            if t.startswith("float"):
                return float(raw)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return raw

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> RunConfig:
        values = {}
        if path:
            for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                k, v = (s.strip() for s in line.split("=", 1))
                values[k] = cls.parse_value(k, v)
        values.update(overrides or {})
        return cls(**values)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={'auto' if v is None and f.name.startswith('omega') else v}")
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> RunConfig:
        return dataclasses.replace(self, **kw)

    def stage_key(self, stage: str, data_fingerprint: str) -> str:
        keys = {
            "mn": ("seed", "margin", "rep_dim", "input_mode", "mining", "mn_hidden", "n_m", "batch_mn",
                   "decay", "lr", "beta1", "beta2", "slope"),
            "srn": ("srn_hidden", "n_r"),
            "gan": ("g_hidden", "d_hidden", "f_hidden", "d_z", "n_loop", "n_d", "n_g", "batch_gan",
                    "lambda_gp", "lambda1", "lambda2"),
        }
        order = ["mn", "srn", "gan"]
        chain = {"data": data_fingerprint, "normalize": self.normalize}
        for s in order[:order.index(stage) + 1]:
            chain.update({k: getattr(self, k) for k in keys[s]})
        if stage == "gan":
            chain["gan_mode"] = VARIANT_SPEC[self.variant][0]
        blob = json.dumps(chain, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def stage_rng(seed: int, stage: str, extra: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), STAGE_IDS[stage], int(extra)])


def load_dataset(cfg: RunConfig) -> dsm.ZslDataset:
    if cfg.manifest:
        ds = dsm.load(cfg.manifest)
    else:
        ds = dsm.synth_generate(dsm.SynthConfig(
            num_seen=cfg.synth_num_seen, num_unseen=cfg.synth_num_unseen,
            instances_per_class=cfg.synth_instances, d_v=cfg.synth_d_v, d_a=cfg.synth_d_a,
            visual_noise_sigma=cfg.synth_sigma, unseen_overlap=cfg.synth_overlap, seed=cfg.seed))
    return dsm.minmax_normalize(ds) if cfg.normalize else ds


# -- in-memory stages -----------------------------------------------------

def fit_metric(cfg: RunConfig, ds: dsm.ZslDataset):
    rng = stage_rng(cfg.seed, "mn")
    M = metric.build_metric_net(ds.d_v, ds.d_a, cfg.rep_dim, (cfg.mn_hidden,), cfg.input_mode,
                                cfg.margin, cfg.slope, seed=rng)
    opt = nn.Adam(M.mlp.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
    history = metric.train_mn(ds, M, cfg.n_m, cfg.batch_mn, opt, rng, cfg.decay, cfg.mining)
    return M, history


def fit_srn(cfg: RunConfig, ds: dsm.ZslDataset, M: metric.MetricNet):
    rng = stage_rng(cfg.seed, "srn")
    R = metric.build_srn(ds.d_a, M.rep_dim, (cfg.srn_hidden,), cfg.slope, seed=rng)
    opt = nn.Adam(R.mlp.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
    history = metric.train_srn(ds, R, M, cfg.n_r, opt, rng, cfg.decay)
    return R, history


def fit_gan(cfg: RunConfig, ds: dsm.ZslDataset, R: metric.Srn, M: metric.MetricNet, mode: str | None = None):
    mode = mode or VARIANT_SPEC[cfg.variant][0]
    rng = stage_rng(cfg.seed, "gan", gan.MODES.index(mode))
    bundle = gan.build_bundle(ds.d_v, ds.d_a, R.mlp.out_dim, mode, cfg.d_z, (cfg.g_hidden,), (cfg.d_hidden,),
                              (cfg.f_hidden,), cfg.slope, cfg.lambda_gp, cfg.lambda1, cfg.lambda2, seed=rng)
    schedule = gan.TrainSchedule(cfg.n_loop, cfg.n_d, cfg.n_g, cfg.batch_gan)
    history = gan.train_gan(ds, bundle, schedule, R, M, rng, cfg.lr, cfg.beta1, cfg.beta2)
    return bundle, history


def _holdout(ds: dsm.ZslDataset, fraction: float, rng: np.random.Generator):
    train, val = [], []
    for c in ds.seen_classes:
        idx = ds.class_indices(int(c), "train")
        idx = rng.permutation(idx)
        k = int(round(fraction * idx.size)) if idx.size > 1 else 0
        k = min(max(k, 1 if idx.size > 1 else 0), idx.size - 1)
        val += idx[:k].tolist()
        train += idx[k:].tolist()
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(val), dtype=np.int64)


def evaluate_pipeline(cfg: RunConfig, ds: dsm.ZslDataset, R: metric.Srn, bundle: gan.GanBundle,
                      mode: str = "gzsl", variant: str | None = None) -> ev.EvalReport:
    """Synthesize unseen features, train the variant's heads, pick omegas, score the test splits."""
    if mode not in ("zsl", "gzsl"):
        raise ValueError("mode must be zsl or gzsl")
    variant = variant or cfg.variant
    gan_mode, heads, tune1, tune2 = VARIANT_SPEC[variant]
    if bundle.mode != gan_mode:
        raise ValueError(f"variant {variant} needs a {gan_mode} generator, got {bundle.mode}")
    # keyed by generator mode only: variants sharing a generator see the same
    # synthetic features and the same per-head classifiers
    rng = stage_rng(cfg.seed, "eval", gan.MODES.index(gan_mode))
    seen, unseen = ds.seen_classes, ds.unseen_classes
    x_syn, y_syn = ev.synthesize_features(bundle, R, ds, unseen, cfg.synth_per_class, rng)
    x_val_u, y_val_u = ev.synthesize_features(bundle, R, ds, unseen, max(20, cfg.synth_per_class // 3), rng)
    if mode == "gzsl":
        tr, va = _holdout(ds, cfg.val_fraction, rng)
        x_train = np.vstack([ds.visual[tr], x_syn])
        y_train = np.concatenate([ds.labels[tr], y_syn])
        x_val = np.vstack([ds.visual[va], x_val_u])
        y_val = np.concatenate([ds.labels[va], y_val_u])
        classes = np.concatenate([seen, unseen])
    else:
        x_train, y_train, x_val, y_val, classes = x_syn, y_syn, x_val_u, y_val_u, unseen
    clf = ev.train_heads(x_train, y_train, classes, bundle.F1, bundle.F2, rng, heads,
                         cfg.head_steps, cfg.head_lr, cfg.combine)
    if tune1 or tune2:
        w1, w2 = ev.select_omegas(clf, x_val, y_val, bundle.F1, bundle.F2, seen, unseen, mode,
                                  tune1=tune1 and cfg.omega1 is None, tune2=tune2 and cfg.omega2 is None)
        if tune1:
            clf.omega1 = w1 if cfg.omega1 is None else cfg.omega1
        if tune2:
            clf.omega2 = w2 if cfg.omega2 is None else cfg.omega2
    report = ev.EvalReport(mode=mode, variant=variant, omega1=clf.omega1, omega2=clf.omega2,
                           rep_dim=R.mlp.out_dim, seed=cfg.seed)
    if mode == "gzsl":
        xs, ys = ds.visual[ds.test_seen_idx], ds.labels[ds.test_seen_idx]
        xu, yu = ds.visual[ds.test_unseen_idx], ds.labels[ds.test_unseen_idx]
        ps = clf.class_ids[np.argmax(ev.ensemble_score(clf, xs, bundle.F1, bundle.F2), axis=1)]
        pu = clf.class_ids[np.argmax(ev.ensemble_score(clf, xu, bundle.F1, bundle.F2), axis=1)]
        report.u, report.s, report.h = ev.gzsl_metrics(ps, ys, pu, yu, seen, unseen)
        report.per_class = {**ev.per_class_accuracies(ps, ys), **ev.per_class_accuracies(pu, yu)}
    else:
        xu, yu = ds.visual[ds.test_unseen_idx], ds.labels[ds.test_unseen_idx]
        pu = clf.class_ids[np.argmax(ev.ensemble_score(clf, xu, bundle.F1, bundle.F2), axis=1)]
        report.t1 = ev.per_class_top1(pu, yu, unseen)
        report.per_class = ev.per_class_accuracies(pu, yu)
    return report


def run_ablation(ds: dsm.ZslDataset, variant_id: str, cfg: RunConfig, mode: str = "gzsl",
                 cache: dict | None = None) -> ev.EvalReport:
    """Train (or reuse from ``cache``) the stages a variant needs and evaluate it."""
    if variant_id not in VARIANTS:
        raise ValueError(f"unknown variant {variant_id!r}; expected one of {VARIANTS}")
    cache = {} if cache is None else cache
    if "M" not in cache:
        cache["M"], _ = fit_metric(cfg, ds)
    if "R" not in cache:
        cache["R"], _ = fit_srn(cfg, ds, cache["M"])
    gan_mode = VARIANT_SPEC[variant_id][0]
    key = f"gan:{gan_mode}"
    if key not in cache:
        cache[key], _ = fit_gan(cfg, ds, cache["R"], cache["M"], gan_mode)
    return evaluate_pipeline(cfg, ds, cache["R"], cache[key], mode, variant_id)


def run_ablation_suite(ds: dsm.ZslDataset, cfg: RunConfig, variants=VARIANTS, mode: str = "gzsl"):
    cache: dict = {}
    return [run_ablation(ds, v, cfg, mode, cache) for v in variants]


# -- on-disk stages -------------------------------------------------------

LOG_FIELDS = ("stage", "step", "loss", "L_D", "L_G", "L_F1", "L_F2", "wasserstein")


@dataclass
class TrainedRun:
    cfg: RunConfig
    ds: dsm.ZslDataset
    M: metric.MetricNet
    R: metric.Srn
    bundle: gan.GanBundle
    stage_dirs: dict = field(default_factory=dict)
    resumed: list = field(default_factory=list)


def stage_dir(cfg: RunConfig, stage: str, ds: dsm.ZslDataset) -> Path:
    return Path(cfg.out_dir) / f"{stage}-{cfg.stage_key(stage, ds.fingerprint())}"


def _write_log(path: Path, stage: str, rows: list[dict]):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in
                        {"stage": stage, **row}.items()})


def _finish(tmp: Path, final: Path):
    (tmp / "DONE").write_text("ok\n", encoding="utf-8")
    if final.exists():
        # incomplete leftovers, or a deliberate retrain without resume
        shutil.rmtree(final)
    tmp.rename(final)


def _fresh_tmp(final: Path) -> Path:
    tmp = final.with_name(final.name + ".partial")
    if tmp.exists():
        for p in tmp.iterdir():
            p.unlink()
    else:
        tmp.mkdir(parents=True)
    return tmp


def _complete(d: Path) -> bool:
    return (d / "DONE").is_file()


def _load_metric(cfg: RunConfig, d: Path) -> metric.MetricNet:
    return metric.MetricNet(nn.load_mlp(d / "metric.ckpt", cfg.slope), cfg.input_mode, cfg.margin)


def _load_srn(cfg: RunConfig, d: Path) -> metric.Srn:
    return metric.Srn(nn.load_mlp(d / "srn.ckpt", cfg.slope))


def mn_stage(cfg: RunConfig, ds: dsm.ZslDataset, resume: bool = True):
    d = stage_dir(cfg, "mn", ds)
    if resume and _complete(d):
        return _load_metric(cfg, d), True
    try:
        M, hist = fit_metric(cfg, ds)
    except nn.NumericError:
        raise
    except Exception as exc:
        raise StageError("mn", str(exc)) from exc
    tmp = _fresh_tmp(d)
    nn.save_mlp(M.mlp, tmp / "metric.ckpt")
    _write_log(tmp / "log.csv", "mn", [{"step": i, "loss": v} for i, v in enumerate(hist)])
    _finish(tmp, d)
    return M, False


def srn_stage(cfg: RunConfig, ds: dsm.ZslDataset, resume: bool = True):
    d = stage_dir(cfg, "srn", ds)
    if resume and _complete(d):
        return _load_srn(cfg, d), True
    mn_dir = stage_dir(cfg, "mn", ds)
    if not _complete(mn_dir):
        raise StageError("srn", f"frozen metric-network checkpoint missing ({mn_dir})")
    M = _load_metric(cfg, mn_dir)
    try:
        R, hist = fit_srn(cfg, ds, M)
    except nn.NumericError:
        raise
    except Exception as exc:
        raise StageError("srn", str(exc)) from exc
    tmp = _fresh_tmp(d)
    nn.save_mlp(R.mlp, tmp / "srn.ckpt")
    _write_log(tmp / "log.csv", "srn", [{"step": i, "loss": v} for i, v in enumerate(hist)])
    _finish(tmp, d)
    return R, False


def _load_bundle(cfg: RunConfig, d: Path, mode: str) -> gan.GanBundle:
    nets = {name: nn.load_mlp(d / f"{name}.ckpt", cfg.slope)
            for name in ("G", "D", "F1", "F2") if (d / f"{name}.ckpt").exists()}
    return gan.GanBundle(nets["G"], nets["D"], nets["F1"], nets.get("F2"), cfg.d_z, mode,
                         cfg.lambda_gp, cfg.lambda1, cfg.lambda2)


def gan_stage(cfg: RunConfig, ds: dsm.ZslDataset, resume: bool = True, mode: str | None = None):
    """Generator stage. Refuses to start unless both frozen upstream checkpoints exist."""
    mode = mode or VARIANT_SPEC[cfg.variant][0]
    cfg_m = cfg.replace(variant=next(v for v in VARIANTS if VARIANT_SPEC[v][0] == mode))
    d = stage_dir(cfg_m, "gan", ds)
    if resume and _complete(d):
        return _load_bundle(cfg, d, mode), True
    mn_dir, srn_dir = stage_dir(cfg, "mn", ds), stage_dir(cfg, "srn", ds)
    for name, sd in (("metric-network", mn_dir), ("rectifier", srn_dir)):
        if not _complete(sd):
            raise StageError("gan", f"frozen {name} checkpoint missing ({sd})")
    M, R = _load_metric(cfg, mn_dir), _load_srn(cfg, srn_dir)
    try:
        bundle, hist = fit_gan(cfg, ds, R, M, mode)
    except nn.NumericError:
        raise
    except Exception as exc:
        raise StageError("gan", str(exc)) from exc
    tmp = _fresh_tmp(d)
    for name, net in bundle.networks().items():
        nn.save_mlp(net, tmp / f"{name}.ckpt")
    _write_log(tmp / "log.csv", "gan", hist)
    _finish(tmp, d)
    return bundle, False


def train_run(cfg: RunConfig, resume: bool = True, ds: dsm.ZslDataset | None = None) -> TrainedRun:
    """MN -> SRN -> GAN, each stage skipped when its checkpoint directory is complete."""
    cfg.validate()
    ds = ds if ds is not None else load_dataset(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    run = TrainedRun(cfg, ds, None, None, None)
    for stage, fn in (("mn", mn_stage), ("srn", srn_stage), ("gan", gan_stage)):
        log.info("stage %s", stage)
        obj, reused = fn(cfg, ds, resume)
        setattr(run, {"mn": "M", "srn": "R", "gan": "bundle"}[stage], obj)
        run.stage_dirs[stage] = stage_dir(cfg, stage, ds)
        if reused:
            run.resumed.append(stage)
    write_training_log(run, out / "train_log.csv")
    return run


def write_training_log(run: TrainedRun, path: Path):
    """Concatenate the per-stage logs in stage order into one CSV."""
    with Path(path).open("w", newline="", encoding="utf-8") as out:
        out.write(",".join(LOG_FIELDS) + "\n")
        for stage in ("mn", "srn", "gan"):
            lines = (run.stage_dirs[stage] / "log.csv").read_text(encoding="utf-8").splitlines()
            out.writelines(line + "\n" for line in lines[1:])


def eval_run(cfg: RunConfig, mode: str = "gzsl", resume: bool = True) -> ev.EvalReport:
    run = train_run(cfg, resume)
    report = evaluate_pipeline(cfg, run.ds, run.R, run.bundle, mode)
    out = Path(cfg.out_dir)
    (out / f"eval-{mode}-{cfg.variant}.txt").write_text(report.table() + "\n", encoding="utf-8")
    ev.write_reports_csv([report], out / f"eval-{mode}-{cfg.variant}.csv")
    return report


def ablate_run(cfg: RunConfig, variants=VARIANTS, mode: str = "gzsl") -> list[ev.EvalReport]:
    """All variants on disk-cached stages; variants sharing a generator mode share its stage."""
    cfg.validate()
    ds = load_dataset(cfg)
    reports = []
    for v in variants:
        vcfg = cfg.replace(variant=v)
        run = train_run(vcfg, True, ds)
        reports.append(evaluate_pipeline(vcfg, ds, run.R, run.bundle, mode, v))
    return reports
