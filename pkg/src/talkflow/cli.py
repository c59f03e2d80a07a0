"""``talkflow`` command line: data generation, training, adaptation, sampling, evaluation, gradcheck.

Every command reads and writes artifacts in ``--out`` (MTLK containers, CSV,
one JSON manifest). Outputs are byte-identical across runs with the same seed
and config; the ``wall_time`` CSV column stays empty unless ``--timing`` is given.

Exit codes: 0 ok, 1 usage, 2 validation, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import formats
from .config import RunConfig, float_list, int_list, load_config
from .errors import ConfigError, FormatError, NumericalError, ShapeError, StageError, TalkflowError
from .flowmatch import SolverConfig
from .formats import Artifact
from .nn import TransformerConfig, inject_lora

log = logging.getLogger("talkflow")

SPEAKERS = "speakers.mtlk"
IDENTITIES = "identities.mtlk"
MANIFEST = "manifest.json"
SYNC = "sync.mtlk"
A2M = "a2m.mtlk"
RENDERER = "renderer.mtlk"
ADAPT = "adapt.mtlk"
MOTION = "motion.mtlk"

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


class LossLog:
    """CSV loss log; ``wall_time`` is filled only when timing is requested, keeping files reproducible."""

    def __init__(self, columns: list[str], timing: bool, rows: list[list[str]] | None = None):
        self.columns = columns + ["wall_time"]
        self.timing = timing
        self.rows = rows or []
        self._t0 = time.perf_counter()

    def add(self, *values) -> None:
        wall = repr(round(time.perf_counter() - self._t0, 3)) if self.timing else ""
        self.rows.append([v if isinstance(v, str) else repr(v) for v in values] + [wall])

    def text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        w.writerows(self.rows)
        return buf.getvalue()

    def write(self, path: Path) -> None:
        formats.write_text_atomic(path, self.text())


def _require(path: Path, stage: str) -> Path:
    if not path.is_file():
        raise StageError(f"missing {path.name}: run `talkflow {stage}` first")
    return path


def _threads() -> int:
    raw = os.environ.get("MTLK_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MTLK_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("MTLK_THREADS must be >= 1")
    return n


def _solver(cfg: RunConfig) -> SolverConfig:
    return SolverConfig(cfg.sample.ode_method, cfg.sample.ode_steps)


def _transformer_cfg(cfg: RunConfig) -> TransformerConfig:
    m = cfg.model
    return TransformerConfig(hidden=m.hidden, layers=m.layers, heads=m.heads, head_size=m.head_size,
                             mlp_layers=m.mlp_layers)


def _load_speakers(out: Path):
    from .synthbench import SpeakerDataset

    return SpeakerDataset.from_arrays(formats.load(_require(out / SPEAKERS, "gen-data"), "speakers").arrays)


def _load_identities(out: Path):
    from .synthbench import IdentityWorld

    return IdentityWorld.from_arrays(formats.load(_require(out / IDENTITIES, "gen-data"), "identities").arrays)


def _load_scorer(path: Path):
    from .ics_a2m import SyncScorer

    art = formats.load(_require(path, "train-sync"), "sync_scorer")
    scorer = SyncScorer(np.random.default_rng(0))
    scorer.load_state_dict(art.arrays)
    return scorer.freeze()


def _model_from_artifact(art: Artifact):
    from .ics_a2m import build_model

    mc = art.config["model"]
    tcfg = TransformerConfig(hidden=mc["hidden"], layers=mc["layers"], heads=mc["heads"],
                             head_size=mc["head_size"], mlp_layers=mc["mlp_layers"])
    model = build_model(tcfg, 0, in_window=(mc["window_before"], mc["window_after"]))
    model.load_state_dict(art.arrays, prefix="model/")
    return model


def _read_matrix(path: Path, names: tuple[str, ...], widths: tuple[int, ...]) -> list[np.ndarray]:
    """Arrays from an MTLK file (by name) or a headerless CSV whose columns are split by ``widths``."""
    if not path.is_file():
        raise ConfigError(f"input file not found: {path}")
    if path.suffix == ".csv":
        data = np.loadtxt(path, delimiter=",", ndmin=2)
        if data.shape[1] != sum(widths):
            raise ShapeError(f"{path}: expected {sum(widths)} columns, found {data.shape[1]}")
        return np.split(data, np.cumsum(widths)[:-1], axis=1)
    art = formats.load(path)
    missing = [n for n in names if n not in art.arrays]
    if missing:
        raise FormatError(f"{path}: missing arrays {missing}")
    out = [art.arrays[n] for n in names]
    for a, wdt, n in zip(out, widths, names):
        if a.ndim != 2 or a.shape[1] != wdt:
            raise ShapeError(f"{path}: array {n!r} must be (frames, {wdt}), got {a.shape}")
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    from .synthbench import gen_identity_world, gen_speaker_dataset

    d = cfg.data
    ds = gen_speaker_dataset(d.n_speakers, d.clips_per, d.frames, np.random.default_rng([cfg.seed, 0]))
    world = gen_identity_world(d.n_identities, d.identity_frames, np.random.default_rng([cfg.seed, 1]))
    echo = {"data": cfg.to_dict()["data"]}
    formats.save(args.out / SPEAKERS, Artifact("speakers", ds.to_arrays(), echo, cfg.seed))
    formats.save(args.out / IDENTITIES, Artifact("identities", world.to_arrays(), echo, cfg.seed))
    manifest = {
        "seed": cfg.seed,
        "speaker_seed": [cfg.seed, 0],
        "identity_seed": [cfg.seed, 1],
        "n_speakers": d.n_speakers,
        "clips_per": d.clips_per,
        "frames": d.frames,
        "n_identities": d.n_identities,
        "identity_frames": d.identity_frames,
        "files": {"speakers": SPEAKERS, "identities": IDENTITIES},
        "clips": [{"index": i, "speaker": c.speaker, "heldout": c.heldout, "frames": len(c.audio)}
                  for i, c in enumerate(ds.clips)],
    }
    formats.write_text_atomic(args.out / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"gen-data: {len(ds.clips)} clips from {d.n_speakers} speakers, {d.n_identities} identities -> {args.out}")
    return EXIT_OK


def cmd_train_sync(cfg: RunConfig, args) -> int:
    from .ics_a2m import SyncTrainConfig, sync_ranking_accuracy, train_sync_scorer

    ds = _load_speakers(args.out)
    s = cfg.sync
    losses = LossLog(["step", "loss"], args.timing)
    scorer = train_sync_scorer(ds, SyncTrainConfig(s.epochs, s.per_clip, s.batch, s.lr, cfg.seed),
                               on_log=lambda step, loss: losses.add(step, loss))
    acc = sync_ranking_accuracy(scorer, ds.heldout_clips(), seed=cfg.seed)
    echo = {"sync": cfg.to_dict()["sync"], "heldout_accuracy": acc}
    formats.save(args.out / SYNC, Artifact("sync_scorer", scorer.state_dict(), echo, cfg.seed))
    losses.write(args.out / "sync_loss.csv")
    print(f"train-sync: held-out ranking accuracy {acc:.4f}")
    return EXIT_OK


def cmd_train_a2m(cfg: RunConfig, args) -> int:
    from .ics_a2m import A2MTrainConfig, A2MTrainer, build_model

    ds = _load_speakers(args.out)
    a = cfg.a2m
    scorer = None
    if a.lambda_sync > 0:
        if not (args.out / SYNC).is_file():
            raise StageError(f"lambda_sync={a.lambda_sync} needs {SYNC}: run `talkflow train-sync` first")
        scorer = _load_scorer(args.out / SYNC)
    tcfg = A2MTrainConfig(steps=a.steps, batch=a.batch, window=a.window, lr=a.lr, lambda_sync=a.lambda_sync,
                          p_drop=a.p_drop, seed=cfg.seed, log_every=a.log_every, warmup=a.warmup)
    model = build_model(_transformer_cfg(cfg), cfg.seed, in_window=(cfg.model.window_before, cfg.model.window_after))
    trainer = A2MTrainer(model, ds, tcfg, scorer)
    echo = {"model": cfg.to_dict()["model"], "a2m": cfg.to_dict()["a2m"]}
    csv_path = args.out / "a2m_loss.csv"
    rows = []
    if args.resume:
        art = formats.load(_require(args.out / A2M, "train-a2m"), "a2m")
        if art.config != echo or art.seed != cfg.seed:
            raise ConfigError("checkpoint was trained with a different config or seed; cannot resume")
        trainer.load_state_arrays(art.arrays)
        if csv_path.is_file():
            with open(csv_path, newline="") as fh:
                rows = [r for r in list(csv.reader(fh))[1:] if int(r[0]) <= trainer.step]
    losses = LossLog(["step", "total", "cfm", "sync"], args.timing, rows)
    end = a.steps if args.max_steps is None else min(a.steps, args.max_steps)
    if end > trainer.step:
        trainer.run(end - trainer.step, on_log=lambda r: losses.add(r.step, r.total, r.cfm, r.sync))
    formats.save(args.out / A2M, Artifact("a2m", trainer.state_arrays(), echo, cfg.seed))
    losses.write(csv_path)
    last = trainer.history[-1] if trainer.history else None
    print(f"train-a2m: step {trainer.step}/{a.steps}" + (f", loss {last.total:.5f}" if last else ""))
    return EXIT_OK


def _renderer(cfg: RunConfig, args, world):
    from .sd_hybrid import GenericRenderer, PretrainConfig, pretrain_generic

    ad = cfg.adapt
    echo = {"pretrain_steps": ad.pretrain_steps, "pretrain_batch": ad.pretrain_batch,
            "pretrain_identities": ad.pretrain_identities}
    path = args.out / RENDERER
    if path.is_file():
        art = formats.load(path, "renderer")
        if art.config == echo and art.seed == cfg.seed:
            renderer = GenericRenderer(cfg.seed)
            renderer.load_state_dict(art.arrays)
            return renderer
    losses = LossLog(["step", "l1"], args.timing)
    renderer, _ = pretrain_generic(
        world, PretrainConfig(steps=ad.pretrain_steps, batch=ad.pretrain_batch, seed=cfg.seed,
                              n_train=ad.pretrain_identities),
        on_log=lambda step, loss: losses.add(step, loss) if (step + 1) % 10 == 0 else None)
    formats.save(path, Artifact("renderer", renderer.state_dict(), echo, cfg.seed))
    losses.write(args.out / "pretrain_loss.csv")
    return renderer


def _check_identity(cfg: RunConfig, world, identity: int) -> None:
    if not cfg.adapt.pretrain_identities <= identity < len(world):
        raise ConfigError(f"adapt identity must be a held-out index in [{cfg.adapt.pretrain_identities}, "
                          f"{len(world)}), got {identity}")


def cmd_adapt(cfg: RunConfig, args) -> int:
    from .sd_hybrid import AdaptConfig, heldout_metrics, sd_hybrid_adapt

    world = _load_identities(args.out)
    ad = cfg.adapt
    _check_identity(cfg, world, ad.identity)
    renderer = _renderer(cfg, args, world)
    comps = tuple(c.strip() for c in ad.components.split(",") if c.strip())
    acfg = AdaptConfig(components=comps, iters=ad.iters, lr=ad.lr, rank=cfg.model.lora_rank, seed=cfg.seed)
    frames, conds = world.frames[ad.identity], world.conditions[ad.identity]
    result = sd_hybrid_adapt(renderer, frames, conds, acfg)
    losses = LossLog(["step", "l1"], args.timing)
    for i, loss in enumerate(result.losses, 1):
        if i % 10 == 0:
            losses.add(i, loss)
    p, l1, train_l1 = heldout_metrics(result, frames, conds)
    arrays = {"grid": result.grid.grid.data}
    arrays.update({f"decoder/{k}": v for k, v in result.decoder.state_dict().items()})
    echo = {"adapt": cfg.to_dict()["adapt"], "lora_rank": cfg.model.lora_rank,
            "heldout_psnr": p, "heldout_l1": l1, "train_l1": train_l1}
    formats.save(args.out / ADAPT, Artifact("adaptation", arrays, echo, cfg.seed))
    losses.write(args.out / "adapt_loss.csv")
    print(f"adapt: identity {ad.identity} components {'+'.join(comps)} held-out PSNR {p:.3f} dB")
    return EXIT_OK


def load_adaptation(out: Path, cfg: RunConfig):
    """Rebuild an AdaptationResult from ``adapt.mtlk`` and the cached generic renderer."""
    from .autograd import parameter
    from .sd_hybrid import AdaptationResult, AdaptConfig, FeatureGrid, GenericRenderer

    art = formats.load(_require(out / ADAPT, "adapt"), "adaptation")
    rart = formats.load(_require(out / RENDERER, "adapt"), "renderer")
    renderer = GenericRenderer(rart.seed)
    renderer.load_state_dict(rart.arrays)
    ad = art.config["adapt"]
    comps = tuple(c for c in ad["components"].split(",") if c)
    decoder = copy.deepcopy(renderer.decoder).freeze()
    if "lora" in comps:
        inject_lora(decoder, art.config["lora_rank"], np.random.default_rng(0))
    decoder.load_state_dict(art.arrays, prefix="decoder/")
    grid = FeatureGrid(parameter(art.arrays["grid"].copy()), trainable="inversion" in comps)
    return AdaptationResult(grid, decoder, AdaptConfig(components=comps, iters=ad["iters"], lr=ad["lr"],
                                                       rank=art.config["lora_rank"], seed=art.seed))


def cmd_sample(cfg: RunConfig, args) -> int:
    from .ics_a2m import infer_stylized, infer_unstylized
    from .synthbench import D_AUDIO, D_MOTION

    ckpt = Path(args.checkpoint) if args.checkpoint else args.out / A2M
    model = _model_from_artifact(formats.load(_require(ckpt, "train-a2m"), "a2m"))
    if args.audio is None:
        raise UsageError("sample needs --audio PATH")
    (audio,) = _read_matrix(Path(args.audio), ("audio",), (D_AUDIO,))
    rng = np.random.default_rng([cfg.seed, 7])
    meta = {"cfg_w": cfg.sample.cfg_w, "ode_method": cfg.sample.ode_method, "ode_steps": cfg.sample.ode_steps,
            "frames": len(audio)}
    if args.prompt:
        p_audio, p_motion = _read_matrix(Path(args.prompt), ("audio", "motion"), (D_AUDIO, D_MOTION))
        if len(p_audio) != len(p_motion):
            raise ShapeError(f"prompt audio ({len(p_audio)} frames) and motion ({len(p_motion)}) are misaligned")
        motion = infer_stylized(model, audio, p_audio, p_motion, rng, w=cfg.sample.cfg_w, solver=_solver(cfg))
        meta.update(mode="stylized", prompt_frames=len(p_audio))
    else:
        motion = infer_unstylized(model, audio, rng, solver=_solver(cfg))
        meta.update(mode="unstylized")
    formats.save(args.out / MOTION, Artifact("motion", {"motion": motion}, meta, cfg.seed))
    if args.emit_csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame"] + [f"m{d}" for d in range(motion.shape[1])])
        for i, row in enumerate(motion):
            w.writerow([i] + [repr(float(v)) for v in row])
        formats.write_text_atomic(args.out / "motion.csv", buf.getvalue())
    print(f"sample: {len(motion)} frames ({meta['mode']}) -> {args.out / MOTION}")
    return EXIT_OK


def _ablation_job(job):
    from .sd_hybrid import AdaptConfig, heldout_metrics, sd_hybrid_adapt

    renderer, frames, conds, comps, iters, rank, seed = job
    res = sd_hybrid_adapt(renderer, frames, conds, AdaptConfig(components=comps, iters=iters, rank=rank, seed=seed))
    return heldout_metrics(res, frames, conds)


METRIC_COLUMNS = ["config", "seed", "style_success", "style_err", "sync_acc", "psnr", "l1"]


def cmd_eval(cfg: RunConfig, args) -> int:
    from .ics_a2m import generated_sync_accuracy, style_recovery_trials
    from .sd_hybrid import ABLATIONS, AblationRow, ablation_csv

    ds = _load_speakers(args.out)
    world = _load_identities(args.out)
    model = _model_from_artifact(formats.load(_require(args.out / A2M, "train-a2m"), "a2m"))
    scorer = _load_scorer(args.out / SYNC)
    _require(args.out / RENDERER, "adapt")
    renderer = _renderer(cfg, args, world)
    seeds = int_list(cfg.eval.seeds, "eval.seeds")
    sweep = float_list(cfg.eval.cfg_sweep, "eval.cfg_sweep")
    solver = _solver(cfg)
    rows = []
    for w in sweep:
        for seed in seeds:
            tri = style_recovery_trials(model, ds, cfg.eval.trials, seed=seed, w=w, solver=solver,
                                        prompt_len=cfg.sample.prompt_frames)
            acc = generated_sync_accuracy(model, scorer, ds, seed=seed, w=w, solver=solver,
                                          prompt_len=cfg.sample.prompt_frames)
            rows.append([f"a2m_w{w:g}", seed, tri.success_rate, float(tri.err_prompt.mean()), acc, "", ""])
    identity = cfg.adapt.identity
    _check_identity(cfg, world, identity)
    frames, conds = world.frames[identity], world.conditions[identity]
    jobs = [(renderer, frames, conds, comps, cfg.eval.adapt_iters, cfg.model.lora_rank, seed)
            for seed in seeds for comps in ABLATIONS.values()]
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = [_ablation_job(j) for j in jobs]
    ablation = []
    names = [n for _ in seeds for n in ABLATIONS]
    for job, name, (p, l1, tr) in zip(jobs, names, results):
        ablation.append(AblationRow(name, job[-1], p, l1, tr))
        rows.append([f"sd_{name}", job[-1], "", "", "", p, l1])
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(METRIC_COLUMNS)
    wr.writerows([[v if isinstance(v, str) else repr(v) for v in r] for r in rows])
    formats.write_text_atomic(args.out / "metrics.csv", buf.getvalue())
    formats.write_text_atomic(args.out / "ablation.csv", ablation_csv(ablation))
    print(f"eval: {len(rows)} metric rows -> {args.out / 'metrics.csv'}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .autograd.gradcheck import run_suite

    results = run_suite(seed=cfg.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck: FAILED {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-sync": cmd_train_sync,
    "train-a2m": cmd_train_a2m,
    "adapt": cmd_adapt,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="talkflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default=".", help="artifact directory (default: current directory)")
        sp.add_argument("--timing", action="store_true", help="record wall_time in loss CSVs")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("sample", "eval"):
            sp.add_argument("--cfg-w", type=float)
            sp.add_argument("--ode-steps", type=int)
            sp.add_argument("--ode-method", choices=("euler", "midpoint"))
        if name == "sample":
            sp.add_argument("--checkpoint")
            sp.add_argument("--audio")
            sp.add_argument("--prompt")
            sp.add_argument("--emit-csv", action="store_true")
        if name == "train-a2m":
            sp.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
            sp.add_argument("--max-steps", type=int, help="stop (and checkpoint) after this many total steps")
    return p


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.command == "gradcheck" and cfg.seed is None:
        cfg.seed = 0
    for flag, attr in (("cfg_w", "cfg_w"), ("ode_steps", "ode_steps"), ("ode_method", "ode_method")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg.sample, attr, value)
    cfg.validate()
    args.out = Path(args.out)
    if not args.out.is_dir():
        if args.command == "gen-data":
            args.out.mkdir(parents=True, exist_ok=True)
        else:
            raise ConfigError(f"output directory does not exist: {args.out}")
    return cfg


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"talkflow: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"talkflow: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"talkflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (TalkflowError, ValueError, OSError) as exc:
        print(f"talkflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
