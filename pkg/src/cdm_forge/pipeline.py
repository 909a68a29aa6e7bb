"""Stage runners behind the command line.

Every stage reads its inputs from the run directory, writes one primary
artifact named ``<stage>-<hash>.<ext>`` plus a ``.prov`` provenance record,
and returns the artifact path.  ``<hash>`` covers the config keys the stage
and all of its upstream stages depend on, so artifacts from incompatible
configs never collide.  Each stage draws randomness only from
``cfg.stage_seed(stage)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import calibration as C
from .checkpoint import (Checkpoint, bank_checkpoint, bank_from_checkpoint, file_hash, load_checkpoint,
                         params_checkpoint, restore_params, save_checkpoint)
from .config import RunConfig, format_value
from .diffusion import NoiseSchedule, SamplerConfig, linear_beta_schedule, train_ldm
from .errors import DependencyError
from .metrics import MetricReport, build_report, few_shot_classification
from .nets import (Autoencoder, AutoencoderTrainConfig, Denoiser, DenoiserTrainConfig, ExtractorTrainConfig,
                   FeatureExtractor, extract_feature, train_autoencoder, train_extractor)
from .rng import SeededRNG
from .synth import Dataset, GroundTruth, SplitSpec, SyntheticSpec, generate_dataset, load_dataset, sample_episode, save_dataset
from .synth import split as make_split

PROVENANCE_FORMAT_VERSION = 1

# stage -> (config keys or sections it reads, upstream stages, artifact extension)
STAGES = {
    "synth-data": (("seed", "data", "split"), (), "bin"),
    "train-extractor": (("extractor",), ("synth-data",), "ckpt"),
    "train-ae": (("autoencoder",), ("synth-data",), "ckpt"),
    "stats": (("calibration.allow_singleton",), ("train-extractor",), "ckpt"),
    "train-ldm": (("schedule", "denoiser"), ("stats", "train-ae"), "ckpt"),
    "calibrate": (("calibration",), ("stats",), "ckpt"),
    "invert": (("inversion",), ("train-ldm", "calibrate"), "ckpt"),
    "generate": (("sampler",), ("invert",), "ckpt"),
    "evaluate": (("eval",), ("generate",), "csv"),
}
STAGE_ORDER = tuple(STAGES)


def stage_keys(stage: str) -> list[str]:
    keys, todo, seen = [], [stage], set()
    while todo:
        s = todo.pop()
        if s in seen:
            continue
        seen.add(s)
        keys.extend(STAGES[s][0])
        todo.extend(STAGES[s][1])
    return sorted(set(keys))


def config_text(cfg: RunConfig, keys) -> str:
    keys = set(keys)
    return "".join(f"{k} = {format_value(v)}\n" for k, v in cfg.items()
                   if k in keys or k.split(".")[0] in keys)


def stage_hash(cfg: RunConfig, stage: str) -> str:
    return hashlib.sha256(config_text(cfg, stage_keys(stage)).encode()).hexdigest()[:12]


@dataclass
class Run:
    cfg: RunConfig
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def path(self, stage: str, suffix: str | None = None) -> Path:
        ext = suffix or STAGES[stage][2]
        return self.root / f"{stage}-{stage_hash(self.cfg, stage)}.{ext}"

    def require(self, stage: str) -> Path:
        p = self.path(stage)
        if not p.is_file():
            raise DependencyError(f"missing upstream artifact for stage {stage!r} ({p.name}); run it first")
        return p

    def record(self, stage: str, artifact: Path, inputs=(), extra=None) -> None:
        lines = [
            f"format_version {PROVENANCE_FORMAT_VERSION}",
            f"stage {stage}",
            f"artifact {artifact.name}",
            f"artifact_sha256 {file_hash(artifact)}",
            f"config_hash {stage_hash(self.cfg, stage)}",
            f"seed {self.cfg.seed}",
            f"stage_seed {self.cfg.stage_seed(stage)}",
        ]
        for p in inputs:
            lines.append(f"input {Path(p).name} {file_hash(p)}")
        for k, v in (extra or {}).items():
            lines.append(f"note {k} {v}")
        for line in config_text(self.cfg, stage_keys(stage)).splitlines():
            lines.append(f"config {line}")
        self.path(stage, "prov").write_text("\n".join(lines) + "\n")

    def rng(self, stage: str) -> SeededRNG:
        return SeededRNG(self.cfg.stage_seed(stage))


# ---------------------------------------------------------------------------
# loaders


def load_split(run: Run) -> SplitSpec:
    ck = load_checkpoint(run.require("synth-data").with_suffix(".split"), "split")
    ids = lambda s: tuple(int(c) for c in s.split(",") if c)
    return SplitSpec(ids(ck.meta["seen"]), ids(ck.meta["unseen"]))


def load_extractor(run: Run) -> FeatureExtractor:
    ck = load_checkpoint(run.require("train-extractor"), "extractor")
    m = ck.meta
    model = FeatureExtractor(int(m["d_x"]), int(m["d_f"]), [int(c) for c in m["classes"].split(",")],
                             hidden=int(m["hidden"]))
    restore_params(model.params, ck)
    return model


def load_autoencoder(run: Run) -> Autoencoder:
    ck = load_checkpoint(run.require("train-ae"), "autoencoder")
    ae = Autoencoder(int(ck.meta["d_x"]), int(ck.meta["d_z"]), mode=ck.meta["mode"])
    restore_params(ae.params, ck)
    return ae


def load_denoiser(run: Run) -> tuple[Denoiser, NoiseSchedule]:
    ck = load_checkpoint(run.require("train-ldm"), "denoiser")
    m = ck.meta
    den = Denoiser(int(m["d_z"]), int(m["d_f"]), int(m["num_steps"]), d_c=int(m["d_c"]), d_t=int(m["d_t"]),
                   hidden=int(m["hidden"]))
    arrays = dict(ck.arrays)
    sched = NoiseSchedule(arrays.pop("schedule.betas"))
    restore_params(den.params, Checkpoint("denoiser", arrays))
    return den, sched


def sampler_config(cfg: RunConfig, seed: int) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(steps=s.steps, eta=s.eta, guidance=s.guidance, seed=seed)


# ---------------------------------------------------------------------------
# stages


def synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    d = cfg.data
    return SyntheticSpec(d.n_classes, d.dim, d.n_per_class, d.nonlinearity, d.anchor_scale, d.scale_low,
                         d.scale_high, d.class_manifold_dim, seed=cfg.seed)


def ground_truth(cfg: RunConfig) -> GroundTruth:
    """Generator parameters behind the synth-data artifact (regenerated, not stored)."""
    return generate_dataset(synthetic_spec(cfg), SeededRNG(cfg.stage_seed("synth-data")).spawn("dataset")).truth


def run_synth_data(run: Run) -> Path:
    cfg = run.cfg
    rng = run.rng("synth-data")
    ds = generate_dataset(synthetic_spec(cfg), rng.spawn("dataset"))
    if cfg.split.unseen_ids:
        sp = make_split(ds.classes, unseen_ids=cfg.split.unseen_ids)
    else:
        sp = make_split(ds.classes, cfg.split.seen_fraction, rng=rng.spawn("split"))
    run.root.mkdir(parents=True, exist_ok=True)
    out = run.path("synth-data")
    save_dataset(ds, out)
    split_ck = Checkpoint("split", meta={"seen": ",".join(map(str, sp.seen)),
                                         "unseen": ",".join(map(str, sp.unseen))})
    save_checkpoint(split_ck, out.with_suffix(".split"))
    run.record("synth-data", out, extra={"split_sha256": file_hash(out.with_suffix(".split"))})
    return out


def _seen_data(run: Run) -> tuple[Dataset, SplitSpec]:
    ds = load_dataset(run.require("synth-data"))
    sp = load_split(run)
    return ds.subset(sp.seen), sp


def run_train_extractor(run: Run) -> Path:
    e = run.cfg.extractor
    seen, _ = _seen_data(run)
    model, hist = train_extractor(seen.x, seen.y, ExtractorTrainConfig(epochs=e.epochs, batch_size=e.batch_size,
                                                                       lr=e.lr),
                                  run.rng("train-extractor"), d_f=e.d_f, hidden=e.hidden)
    out = run.path("train-extractor")
    save_checkpoint(params_checkpoint("extractor", model.params, d_x=model.d_x, d_f=model.d_f, hidden=model.hidden,
                                      classes=",".join(map(str, model.classes))), out)
    run.record("train-extractor", out, [run.require("synth-data")],
               {"final_loss": f"{hist[-1]:.12g}" if hist else "nan"})
    return out


def run_train_ae(run: Run) -> Path:
    a, d = run.cfg.autoencoder, run.cfg.data
    seen, _ = _seen_data(run)
    ae = Autoencoder(d.dim, a.d_z, mode=a.mode, rng=run.rng("train-ae").spawn("init"))
    extra = {}
    if a.mode == "linear":
        hist = train_autoencoder(ae, seen.x, AutoencoderTrainConfig(a.epochs, a.batch_size, a.lr), run.rng("train-ae"))
        extra["final_loss"] = f"{hist[-1]:.12g}" if hist else "nan"
    out = run.path("train-ae")
    save_checkpoint(params_checkpoint("autoencoder", ae.params, mode=ae.mode, d_x=ae.d_x, d_z=ae.d_z), out)
    run.record("train-ae", out, [run.require("synth-data")], extra)
    return out


def run_stats(run: Run) -> Path:
    seen, sp = _seen_data(run)
    ext = load_extractor(run)
    feats = {c: extract_feature(ext, seen.x[seen.y == c]) for c in sp.seen}
    bank = C.compute_seen_stats(feats, allow_singleton=run.cfg.calibration.allow_singleton)
    out = run.path("stats")
    save_checkpoint(bank_checkpoint("seen-stats", bank.values()), out)
    run.record("stats", out, [run.require("synth-data"), run.require("train-extractor")])
    return out


def load_bank(run: Run, stage: str) -> dict:
    module = {"stats": "seen-stats", "calibrate": "unseen-calibrated", "invert": "unseen-inverted"}[stage]
    return bank_from_checkpoint(load_checkpoint(run.require(stage), module))


def run_train_ldm(run: Run) -> Path:
    cfg = run.cfg
    seen, _ = _seen_data(run)
    bank = load_bank(run, "stats")
    ae = load_autoencoder(run)
    s, dn = cfg.schedule, cfg.denoiser
    sched = linear_beta_schedule(s.num_steps, s.beta_start, s.beta_end)
    rng = run.rng("train-ldm")
    d_f = next(iter(bank.values())).mean.shape[0]
    den = Denoiser(ae.d_z, d_f, s.num_steps, d_c=dn.d_c, d_t=dn.d_t, hidden=dn.hidden, rng=rng.spawn("init"))
    tcfg = DenoiserTrainConfig(dn.epochs, dn.batch_size, dn.lr, dn.warmup_steps, dn.p_uncond, dn.vlb_weight)
    hist = train_ldm(seen.x, seen.y, bank, ae, den, sched, tcfg, rng.spawn("train"))
    ck = params_checkpoint("denoiser", den.params, d_z=den.d_z, d_f=den.d_f, num_steps=den.num_steps, d_c=den.d_c,
                           d_t=den.d_t, hidden=den.hidden)
    ck.arrays["schedule.betas"] = sched.betas
    out = run.path("train-ldm")
    save_checkpoint(ck, out)
    tail = hist[-100:] if hist else [float("nan")]
    run.record("train-ldm", out, [run.require("synth-data"), run.require("stats"), run.require("train-ae")],
               {"final_loss_mean100": f"{float(np.mean(tail)):.12g}"})
    return out


def episodes(run: Run, ds: Dataset, sp: SplitSpec) -> dict:
    k = run.cfg.calibration.shots
    return {c: sample_episode(ds, sp, c, k, seed=run.cfg.stage_seed(f"episode-{c}")) for c in sp.unseen}


def run_calibrate(run: Run) -> Path:
    cal = run.cfg.calibration
    ds = load_dataset(run.require("synth-data"))
    sp = load_split(run)
    ext = load_extractor(run)
    bank = load_bank(run, "stats")
    dists, meta = [], {}
    for c, ep in episodes(run, ds, sp).items():
        feats = extract_feature(ext, ds.x[list(ep.support)])
        dists.append(C.calibrate(bank, c, feats, cal.neighbors, per_support=cal.per_support))
        meta[f"class.{c}.support"] = ",".join(map(str, ep.support))
    ck = bank_checkpoint("unseen-calibrated", dists)
    ck.meta.update(meta)
    out = run.path("calibrate")
    save_checkpoint(ck, out)
    run.record("calibrate", out, [run.require("synth-data"), run.require("stats"), run.require("train-extractor")])
    return out


def supports_of(run: Run, ds: Dataset, c: int) -> np.ndarray:
    ck = load_checkpoint(run.require("calibrate"), "unseen-calibrated")
    rows = [int(i) for i in ck.meta[f"class.{c}.support"].split(",")]
    return ds.x[rows]


def run_invert(run: Run) -> Path:
    inv = run.cfg.inversion
    ds = load_dataset(run.require("synth-data"))
    den, sched = load_denoiser(run)
    ae = load_autoencoder(run)
    calibrated = load_bank(run, "calibrate")
    rng = run.rng("invert")
    out_dists, extra = [], {}
    for c, dist in calibrated.items():
        hist = []
        icfg = C.InversionConfig(steps=inv.steps, lr=inv.lr, seed=run.cfg.stage_seed("invert"))
        out_dists.append(C.invert_optimize(dist, supports_of(run, ds, c), den, sched, ae, icfg,
                                           rng.spawn(f"class-{c}"), history=hist))
        if hist:
            extra[f"class{c}_loss_first100"] = f"{float(np.mean(hist[:100])):.12g}"
            extra[f"class{c}_loss_last100"] = f"{float(np.mean(hist[-100:])):.12g}"
    out = run.path("invert")
    save_checkpoint(bank_checkpoint("unseen-inverted", out_dists), out)
    run.record("invert", out, [run.require("train-ldm"), run.require("calibrate"), run.require("train-ae")], extra)
    return out


def generate_for(run: Run, dists: dict) -> dict:
    """Generated data for every class in ``dists``; identical seeds whatever the provenance."""
    den, sched = load_denoiser(run)
    ae = load_autoencoder(run)
    rng = run.rng("generate")
    scfg = sampler_config(run.cfg, run.cfg.stage_seed("generate"))
    return {c: C.generate_unseen(d, run.cfg.sampler.count, den, sched, ae, scfg, rng.spawn(f"class-{c}"))
            for c, d in sorted(dists.items())}


def run_generate(run: Run) -> Path:
    samples = generate_for(run, load_bank(run, "invert"))
    out = run.path("generate")
    save_checkpoint(Checkpoint("samples", {f"class.{c}": x for c, x in samples.items()},
                               {"classes": ",".join(map(str, samples))}), out)
    run.record("generate", out, [run.require("invert"), run.require("train-ldm"), run.require("train-ae")])
    return out


def load_samples(run: Run) -> dict:
    ck = load_checkpoint(run.require("generate"), "samples")
    return {int(c): ck.arrays[f"class.{c}"] for c in ck.meta["classes"].split(",")}


def real_queries(run: Run, ds: Dataset) -> dict:
    """Held-out real items per unseen class: everything except that class's supports."""
    ck = load_checkpoint(run.require("calibrate"), "unseen-calibrated")
    out = {}
    for c in bank_from_checkpoint(ck):
        support = {int(i) for i in ck.meta[f"class.{c}.support"].split(",")}
        out[c] = ds.x[[i for i in ds.indices_of(c) if int(i) not in support]]
    return out


def score(run: Run, ext: FeatureExtractor, real: dict, fake: dict) -> MetricReport:
    return build_report({c: extract_feature(ext, x) for c, x in real.items()},
                        {c: extract_feature(ext, x) for c, x in fake.items()},
                        seed=run.cfg.seed, full=run.cfg.eval.full_covariance,
                        config={"config_hash": stage_hash(run.cfg, "evaluate")})


def fewshot(run: Run, ds: Dataset, sp: SplitSpec, ext: FeatureExtractor):
    cfg = run.cfg
    den, sched = load_denoiser(run)
    ae = load_autoencoder(run)
    bank = load_bank(run, "stats")
    scfg = sampler_config(cfg, cfg.stage_seed("fewshot-sampler"))

    def generate(c, support_x, rng):
        dist = C.calibrate(bank, c, extract_feature(ext, support_x), cfg.calibration.neighbors,
                           per_support=cfg.calibration.per_support)
        if cfg.eval.fewshot_invert and cfg.inversion.steps:
            dist = C.invert_optimize(dist, support_x, den, sched, ae,
                                     C.InversionConfig(steps=cfg.inversion.steps, lr=cfg.inversion.lr),
                                     rng.spawn("invert"))
        return C.generate_unseen(dist, cfg.eval.n_fake, den, sched, ae, scfg, rng.spawn("sample"))

    return few_shot_classification(ds.x, ds.y, sp.unseen, lambda x: extract_feature(ext, x), generate,
                                   cfg.eval.n_way, cfg.calibration.shots, cfg.eval.episodes,
                                   run.rng("fewshot"), head_epochs=cfg.eval.head_epochs)


def run_evaluate(run: Run) -> Path:
    ds = load_dataset(run.require("synth-data"))
    sp = load_split(run)
    ext = load_extractor(run)
    report = score(run, ext, real_queries(run, ds), load_samples(run))
    notes = {}
    if run.cfg.eval.fewshot:
        res = fewshot(run, ds, sp, ext)
        report.accuracy, report.baseline_accuracy = res.accuracy, res.baseline_accuracy
        notes["fewshot_accuracy"] = f"{res.accuracy:.12g}"
        notes["fewshot_baseline"] = f"{res.baseline_accuracy:.12g}"
    out = run.path("evaluate")
    out.write_text(report.to_csv())
    summary = run.path("evaluate", "txt")
    summary.write_text(report.summary())
    run.record("evaluate", out, [run.require("generate"), run.require("calibrate"), run.require("train-extractor")],
               {**notes, "summary_sha256": file_hash(summary)})
    return out


def read_notes(run: Run, stage: str) -> dict:
    out = {}
    for line in run.path(stage, "prov").read_text().splitlines():
        if line.startswith("note "):
            _, key, value = line.split(" ", 2)
            out[key] = value
    return out


RUNNERS = {
    "synth-data": run_synth_data,
    "train-extractor": run_train_extractor,
    "train-ae": run_train_ae,
    "stats": run_stats,
    "train-ldm": run_train_ldm,
    "calibrate": run_calibrate,
    "invert": run_invert,
    "generate": run_generate,
    "evaluate": run_evaluate,
}


def ensure(run: Run, stage: str, fresh: bool = False, log=None) -> Path:
    """Build ``stage`` and any missing upstream artifacts (all of them when ``fresh``)."""
    for s in STAGES[stage][1]:
        ensure(run, s, fresh, log)
    p = run.path(stage)
    if fresh or not p.is_file():
        if log:
            log(f"[{stage}] -> {p.name}")
        p = RUNNERS[stage](run)
    return p


def run_experiment(run: Run, fresh: bool = True, log=None) -> MetricReport:
    done: set = set()

    def build(stage):
        for s in STAGES[stage][1]:
            if s not in done:
                build(s)
        if fresh or not run.path(stage).is_file():
            if log:
                log(f"[{stage}] -> {run.path(stage).name}")
            RUNNERS[stage](run)
        done.add(stage)

    build("evaluate")
    return read_report(run.path("evaluate"))


def read_report(path: Path) -> MetricReport:
    import csv
    rows = [r for r in csv.reader(l for l in Path(path).read_text().splitlines() if not l.startswith("#"))]
    per = {}
    for r in rows[1:]:
        if r[0].startswith("class_"):
            per[int(r[0][6:])] = {"frechet": float(r[1]), "diversity": float(r[2]), "n_real": int(r[3]),
                                  "n_fake": int(r[4])}
    return MetricReport(per)


@dataclass
class AblationResult:
    without: MetricReport
    with_inversion: MetricReport

    @property
    def frechet_delta(self) -> float:
        return self.with_inversion.frechet - self.without.frechet

    @property
    def diversity_delta(self) -> float:
        return self.with_inversion.diversity - self.without.diversity

    def summary(self) -> str:
        a, b = self.without, self.with_inversion
        lines = ["inversion ablation (format 1)",
                 f"  without inversion: frechet {a.frechet:.6f}  diversity {a.diversity:.6f}",
                 f"  with inversion:    frechet {b.frechet:.6f}  diversity {b.diversity:.6f}",
                 f"  delta (with - without): frechet {self.frechet_delta:+.6f}  diversity {self.diversity_delta:+.6f}"]
        return "\n".join(lines) + "\n"


def ablate_inversion(run: Run, fresh: bool = False, log=None) -> AblationResult:
    """Generate from the calibrated and from the inverted statistics with identical sampler seeds."""
    ensure(run, "invert", fresh, log)
    ds = load_dataset(run.require("synth-data"))
    ext = load_extractor(run)
    real = real_queries(run, ds)
    arms = {}
    for name, stage in (("without", "calibrate"), ("with", "invert")):
        arms[name] = score(run, ext, real, generate_for(run, load_bank(run, stage)))
    result = AblationResult(arms["without"], arms["with"])
    tag = stage_hash(run.cfg, "generate")
    for name, rep in arms.items():
        (run.root / f"ablate-inversion-{tag}-{name}.csv").write_text(rep.to_csv())
    (run.root / f"ablate-inversion-{tag}.txt").write_text(result.summary())
    return result
