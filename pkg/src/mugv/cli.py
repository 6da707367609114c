"""``mugv`` command line: train-vae, train-dit, expand, posttrain, sample, datapipe, plan, eval.

Exit status: 0 on success, 1 on validation errors (bad arguments, configs,
inputs or checkpoint files), 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import config as cfgmod
from .checkpoint import ParameterSet, load_checkpoint, save_checkpoint
from .clips import VideoClip, moving_square, read_clip
from .datapipe import FilterThresholds, run_pipeline, write_manifest
from .dit import DiT, TextEncoder, config_from_dict, tokenize
from .errors import (CheckpointError, ConfigurationError, DimensionError, InputError, MugvError,
                     SchedulingError)
from .expansion import ExpansionConfig, expand_model, verify_preservation
from .flowtrain import (ConditionMask, CurriculumConfig, FlowBatch, TrainState, curriculum_schedule,
                        dit_velocity, sample, train_step)
from .infra import ClusterSpec, ModelSpec, plan_parallelism
from .metrics import eval_metrics
from .posttrain import (Conditioning, LabeledSample, PostTrainConfig, PostTrainState, PreferenceBatch,
                        PreferencePair, merge_checkpoints, post_train_step, rdpo_pairs)
from .synthetic import embed_prompts, moving_square_latents, random_forward_inputs
from .videovae import VaeConfig, psnr_pm1, train_vae

log = logging.getLogger("mugv")

VALIDATION_ERRORS = (ConfigurationError, InputError, DimensionError, CheckpointError, SchedulingError,
                     FileNotFoundError, IsADirectoryError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# small I/O helpers


class JsonLines:
    """Metrics sink: a file given by --metrics-out, otherwise stdout."""

    def __init__(self, path: str | None):
        self.path = path
        self.fh = open(path, "w") if path else sys.stdout

    def write(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self.path:
            self.fh.close()


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _figures_dir(path: str | None) -> Path | None:
    if path is None:
        return None
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _set_precision(name: str) -> torch.dtype:
    return cfgmod.PRECISIONS[name]


def save_dit(path, model: DiT, encoder: TextEncoder, extra: dict | None = None) -> None:
    params = ParameterSet(metadata={"kind": "dit", "config": json.dumps(model.config.to_dict(), sort_keys=True),
                                    **(extra or {})})
    for k, v in ParameterSet.from_module(model).items():
        params[f"dit.{k}"] = v
    for k, v in ParameterSet.from_module(encoder).items():
        params[f"text.{k}"] = v
    save_checkpoint(params, path)


def _split(params: ParameterSet, prefix: str) -> ParameterSet:
    return ParameterSet((k[len(prefix):], v) for k, v in params.items() if k.startswith(prefix))


def load_dit(path) -> tuple[DiT, TextEncoder, ParameterSet]:
    params = load_checkpoint(path)
    if params.metadata.get("kind") != "dit":
        raise InputError(f"{path} is not a DiT checkpoint")
    cfg = config_from_dict(json.loads(params.metadata["config"]))
    dtype = torch.from_numpy(params["dit.patch_in.weight"][:0]).dtype
    model = DiT(cfg).to(dtype)
    encoder = TextEncoder(cfg.vocab, cfg.text_dim, cfg.max_text_len).to(dtype)
    try:
        _split(params, "dit.").load_into(model)
        _split(params, "text.").load_into(encoder)
    except (RuntimeError, KeyError) as exc:
        raise CheckpointError(f"{path}: tensors do not match the stored config ({exc})") from None
    model.eval()
    return model, encoder, params


def save_latents(path, latents: torch.Tensor, prompts: Sequence[str], fps: float = 24.0) -> None:
    params = ParameterSet({"latents": latents.detach().cpu().numpy()},
                          metadata={"kind": "latents", "prompts": json.dumps(list(prompts)), "fps": repr(fps)})
    save_checkpoint(params, path)


def load_latents(path) -> tuple[torch.Tensor, list[str], float]:
    params = load_checkpoint(path)
    if params.metadata.get("kind") != "latents" or "latents" not in params:
        raise InputError(f"{path} is not a latents file")
    lat = torch.from_numpy(np.array(params["latents"], copy=True))
    prompts = json.loads(params.metadata.get("prompts", "[]"))
    return lat, prompts, float(params.metadata.get("fps", "24.0"))


def _digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().numpy().tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# commands


def cmd_train_vae(args) -> int:
    run = cfgmod.load_run(cfgmod.VaeRun, args.config)
    if args.clip:
        clip = read_clip(args.clip)
    else:
        clip = VideoClip(moving_square(16, 32))
    if clip.num_frames % 8:
        if not args.pad_last:
            raise InputError(f"clip has {clip.num_frames} frames; T must be a multiple of 8 (or pass --pad-last)")
        clip = clip.pad_to_multiple(8)
    vae_cfg = VaeConfig(c_z=run.c_z, lambda_kl=run.lambda_kl, gamma_gan=run.gamma_gan,
                        rec_weights=tuple(run.rec_weights), adaptive_floor=run.adaptive_floor,
                        in_channels=clip.frames.shape[1], widths=tuple(run.widths))
    sink = JsonLines(args.metrics_out)
    try:
        result = train_vae(clip.frames, vae_cfg, steps=run.steps, lr=run.lr, seed=run.seed,
                           adaptive_after=run.adaptive_after, gan_after=run.gan_after,
                           log=sink.write, target_psnr=run.target_psnr)
    finally:
        sink.close()
    vae = result.model
    with torch.no_grad():
        frames = torch.from_numpy(clip.frames)
        recon = vae.decode_units(vae.encode_frames(frames).units, 1)
    quality = psnr_pm1(frames, recon)
    meta = {"kind": "vae", "config": json.dumps(dataclasses.asdict(vae_cfg), sort_keys=True),
            "psnr": f"{quality:.4f}"}
    save_checkpoint(ParameterSet.from_module(vae, meta), args.out)
    figs = _figures_dir(args.figures)
    if figs:
        from .report import plot_history
        plot_history(result.history, figs / "vae_loss.png", title="VAE loss")
    log.info("VAE reconstruction PSNR %.2f dB after %d steps", quality, len(result.history))
    return 0


def cmd_train_dit(args) -> int:
    run = cfgmod.load_run(cfgmod.DitRun, args.config)
    model_cfg = cfgmod.dit_config_for(run, args.allow_paper_scale)
    cur = CurriculumConfig(boundaries=tuple(run.curriculum.boundaries), total_steps=run.curriculum.total_steps,
                           stages=tuple(run.curriculum.stages), image_ratio=tuple(run.curriculum.image_ratio))
    for s in cur.stages:
        if s.clip_length % 8 or s.resolution % 2:
            raise ConfigurationError("stage clip_length must be a multiple of 8 and resolution even")
    dtype = _set_precision(run.precision)
    torch.manual_seed(run.seed)
    model = DiT(model_cfg).to(dtype)
    encoder = TextEncoder(model_cfg.vocab, model_cfg.text_dim, model_cfg.max_text_len).to(dtype)
    state = TrainState.create(model, run.lr, run.weight_decay, run.seed)
    data_gen = torch.Generator().manual_seed(run.seed + 1)
    sink = JsonLines(args.metrics_out)
    history = []
    out = Path(args.out)
    try:
        for step in range(cur.total_steps):
            d = curriculum_schedule(step, cur)
            images = torch.rand(run.batch_size, generator=data_gen) < d.image_ratio
            lb = moving_square_latents(run.batch_size, d.clip_length // 8, d.resolution, model_cfg.c_z,
                                       data_gen, images)
            text, mask = embed_prompts(lb.prompts, encoder)
            batch = FlowBatch.draw(lb.latents.to(dtype), text, mask, lb.fps, data_gen)
            state, m = train_step(state, batch, d.first_frame_mask_prob)
            record = {"step": step, "stage": d.stage, "loss": m["loss"], "grad_norm": m["grad_norm"],
                      "lr": m["lr"], "image_ratio": d.image_ratio}
            sink.write(record)
            history.append(record)
            if run.save_every and (step + 1) % run.save_every == 0:
                save_dit(out.with_name(f"{out.stem}.step{step + 1:06d}{out.suffix}"), model, encoder,
                         {"step": str(step + 1)})
    finally:
        sink.close()
    save_dit(out, model, encoder, {"step": str(cur.total_steps)})
    figs = _figures_dir(args.figures)
    if figs and history:
        from .report import plot_history
        plot_history(history, figs / "dit_loss.png", title="flow-matching loss")
    return 0


def cmd_expand(args) -> int:
    model, encoder, params = load_dit(args.inp)
    bias_mode = {"preserve": "preserve_function", "literal": "literal_eq2"}[args.bias_mode]
    ecfg = ExpansionConfig(e=args.factor, eps_scale=args.eps, bias_mode=bias_mode, seed=args.seed)
    big = expand_model(model, ecfg)
    dtype = next(model.parameters()).dtype
    inputs = random_forward_inputs(model.config, 16, torch.Generator().manual_seed(args.seed), dtype=dtype)
    report = verify_preservation(model, big, inputs, tol=args.tol)
    save_dit(args.out, big, encoder, {"expanded_from": Path(args.inp).name, "factor": str(args.factor)})
    _emit({"factor": args.factor, "eps_scale": args.eps, "bias_mode": bias_mode, **report.to_dict()})
    return 0


def _prompt_conditioning(prompt: str, encoder: TextEncoder, fps: float) -> Conditioning:
    with torch.no_grad():
        emb, _ = encoder(tokenize(prompt, encoder.vocab))
    return Conditioning(emb.detach().clone(), fps)


def _read_preferences(path: Path, encoder: TextEncoder, dtype) -> list:
    items = []
    base = path.parent
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{lineno}: invalid JSON ({exc})") from None
        kind = rec.get("kind")
        allowed = {"pair": {"kind", "winner", "loser", "prompt", "source"},
                   "label": {"kind", "sample", "desirable", "prompt", "source"}}
        if kind not in allowed:
            raise InputError(f"{path}:{lineno}: kind must be 'pair' or 'label'")
        unknown = sorted(set(rec) - allowed[kind])
        if unknown:
            raise InputError(f"{path}:{lineno}: unknown keys {unknown}")

        def latent(key):
            if key not in rec:
                raise InputError(f"{path}:{lineno}: missing {key!r}")
            lat, prompts, fps = load_latents(base / rec[key])
            if lat.ndim == 5 and lat.shape[0] == 1:
                lat = lat[0]
            if lat.ndim != 4:
                raise DimensionError(f"{rec[key]}: expected one (U, h, w, C) sample")
            return lat.to(dtype), (prompts[0] if prompts else ""), fps

        if kind == "pair":
            win, prompt, fps = latent("winner")
            lose, _, _ = latent("loser")
            if win.shape != lose.shape:
                raise DimensionError(f"{path}:{lineno}: winner and loser shapes differ")
            cond = _prompt_conditioning(rec.get("prompt", prompt), encoder, fps)
            items.append(("dpo", PreferencePair(win, lose, cond, rec.get("source", "human_pairwise"))))
        else:
            if not isinstance(rec.get("desirable"), bool):
                raise InputError(f"{path}:{lineno}: 'desirable' must be true or false")
            lat, prompt, fps = latent("sample")
            cond = _prompt_conditioning(rec.get("prompt", prompt), encoder, fps)
            items.append(("kto", LabeledSample(lat, cond, rec["desirable"], rec.get("source", "human_label"))))
    if not items:
        raise InputError(f"{path}: no preference records")
    return items


def _rdpo_items(model, encoder, run, dtype, gen) -> list:
    lb = moving_square_latents(run.batch_size, 2, 8, model.config.c_z, gen)
    real = lb.latents.to(dtype)
    text, mask = embed_prompts(lb.prompts, encoder)
    conds = [_prompt_conditioning(p, encoder, 24.0) for p in lb.prompts]
    velocity = dit_velocity(model, text, mask, lb.fps.to(dtype))
    pairs = rdpo_pairs(real, velocity, run.rdpo_steps, run.seed, conds)
    items = [("dpo", p) for p in pairs]
    for p in pairs:
        items.append(("kto", LabeledSample(p.winner, p.conditioning, True, "rdpo")))
        items.append(("kto", LabeledSample(p.loser, p.conditioning, False, "rdpo")))
    return items


def cmd_posttrain(args) -> int:
    run = cfgmod.load_run(cfgmod.PostRun, args.config)
    pcfg = PostTrainConfig(beta=run.beta, alpha_sft=run.alpha_sft, gamma_merge=run.gamma_merge,
                           kto_weights=tuple(run.kto_weights), plan=tuple(run.plan),
                           lr_start=run.lr_start, lr_end=run.lr_end, horizon=max(run.steps, 1))
    if run.steps < 1 or run.batch_size < 1:
        raise ConfigurationError("steps and batch_size must be >= 1")
    model, encoder, _ = load_dit(args.ckpt)
    dtype = next(model.parameters()).dtype
    torch.manual_seed(run.seed)
    gen = torch.Generator().manual_seed(run.seed + 1)
    items = (_read_preferences(Path(args.prefs), encoder, dtype) if args.prefs
             else _rdpo_items(model, encoder, run, dtype, gen))
    pools = {}
    for tag in pcfg.plan:
        pool = [(k, x) for k, x in items if k == tag or x.source == tag]
        if not pool:
            raise ConfigurationError(f"interleave plan tag {tag!r} matches no preference data")
        if len({k for k, _ in pool}) > 1:
            raise ConfigurationError(f"plan tag {tag!r} mixes pairwise and labeled data")
        pools[tag] = pool
    state = PostTrainState.create(model, pcfg, run.seed)
    sink = JsonLines(args.metrics_out)
    snapshots, history = [], []
    cursor = {tag: 0 for tag in pools}
    try:
        for step in range(run.steps):
            tag = state.plan.expected
            pool = pools[tag]
            take = [pool[(cursor[tag] + i) % len(pool)][1] for i in range(min(run.batch_size, len(pool)))]
            cursor[tag] = (cursor[tag] + len(take)) % len(pool)
            batch = PreferenceBatch(pool[0][0], take, take[0].source)
            lb = moving_square_latents(run.batch_size, 2, 8, model.config.c_z, gen)
            text, mask = embed_prompts(lb.prompts, encoder)
            sft = FlowBatch.draw(lb.latents.to(dtype), text, mask, lb.fps, gen)
            state, m = post_train_step(state, batch, sft, pcfg)
            sink.write(m)
            history.append(m)
            if run.merge_every and (step + 1) % run.merge_every == 0:
                snapshots.append(ParameterSet.from_module(state.model))
    finally:
        sink.close()
    if snapshots:
        merge_checkpoints(snapshots, pcfg.gamma_merge).load_into(state.model)
    save_dit(args.out, state.model, encoder, {"posttrain_steps": str(run.steps),
                                               "merged_checkpoints": str(len(snapshots))})
    figs = _figures_dir(args.figures)
    if figs:
        from .report import plot_history
        plot_history(history, figs / "posttrain_loss.png", title="post-training loss")
    return 0


def cmd_sample(args) -> int:
    if args.steps < 1:
        raise InputError("steps must be ≥ 1")
    model, encoder, _ = load_dit(args.ckpt)
    dtype = next(model.parameters()).dtype
    prompts = [args.prompt] * args.batch
    text, mask = embed_prompts(prompts, encoder)
    fps = torch.full((args.batch,), args.fps, dtype=dtype)
    shape = (args.batch, args.units, args.size, args.size, model.config.c_z)
    cond = None
    if args.condition:
        lat, _, _ = load_latents(args.condition)
        if lat.ndim == 4:
            lat = lat[None]
        if lat.shape[0] == 1:
            lat = lat.expand(args.batch, *lat.shape[1:])
        if tuple(lat.shape[:1]) + tuple(lat.shape[2:]) != shape[:1] + shape[2:] or lat.shape[1] < 1:
            raise DimensionError(f"condition latents {tuple(lat.shape)} do not fit sample shape {shape}")
        full = torch.zeros(shape, dtype=dtype)
        full[:, : min(lat.shape[1], args.units)] = lat[:, : args.units].to(dtype)
        cond = ConditionMask.first_units(full, args.condition_units)
    out = sample(dit_velocity(model, text, mask, fps), shape, cond, args.steps, args.seed, dtype)
    if args.out:
        save_latents(args.out, out, prompts, args.fps)
    _emit({"shape": list(out.shape), "steps": args.steps, "seed": args.seed,
           "conditioned_units": args.condition_units if cond is not None else 0, "sha256": _digest(out)})
    return 0


def cmd_datapipe(args) -> int:
    thresholds = FilterThresholds.from_dict(cfgmod.load_json(args.thresholds))
    tags = cfgmod.load_json(args.tags) if args.tags else None
    target = cfgmod.load_json(args.target) if args.target else None
    if not Path(args.inp).is_dir():
        raise InputError(f"{args.inp} is not a directory")
    records = run_pipeline(args.inp, thresholds, tags=tags, target=target)
    write_manifest(records, args.out)
    kept = sum(r.status == "kept" for r in records)
    log.info("%d segments, %d kept", len(records), kept)
    return 0


_PLAN_COLUMNS = ("dp", "tp", "pp", "microbatches", "step_time", "compute_time", "comm_time",
                 "comm_fraction", "bubble_fraction")


def plan_table(plans) -> str:
    rows = [list(_PLAN_COLUMNS)]
    for p in plans:
        d = p.to_dict()
        rows.append([str(d[c]) if isinstance(d[c], int) else f"{d[c]:.6g}" for c in _PLAN_COLUMNS])
    widths = [max(len(r[i]) for r in rows) for i in range(len(_PLAN_COLUMNS))]
    return "".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) + "\n" for r in rows)


def cmd_plan(args) -> int:
    try:
        model = ModelSpec(**cfgmod.load_json(args.model))
        cluster = ClusterSpec(**cfgmod.load_json(args.cluster))
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    plans = plan_parallelism(model, cluster, args.microbatches)
    if args.top:
        plans = plans[: args.top]
    if args.format in ("json", "both"):
        _emit({"world_size": cluster.world_size, "microbatches": args.microbatches,
               "params": model.num_params, "plans": [p.to_dict() for p in plans]})
    if args.format == "text":
        sys.stdout.write(plan_table(plans))
    elif args.format == "both":
        sys.stderr.write(plan_table(plans))
    figs = _figures_dir(args.figures)
    if figs:
        from .report import plot_plans
        plot_plans(plans, figs / "plan_step_times.png")
        (figs / "plan_table.txt").write_text(plan_table(plans))
    return 0


def cmd_eval(args) -> int:
    ref, cand = read_clip(args.reference), read_clip(args.candidate)
    _emit(eval_metrics(ref, cand))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mugv", description="Desk-scale video generation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("train-vae", help="overfit the video VAE on one clip")
    s.add_argument("--config")
    s.add_argument("--clip", help="raw clip (.f32 + .json); default: synthetic moving square")
    s.add_argument("--pad-last", action="store_true", help="repeat the last frame up to a multiple of 8")
    s.add_argument("--out", required=True)
    s.add_argument("--metrics-out")
    s.add_argument("--figures", help="directory for loss-curve figures")
    s.set_defaults(func=cmd_train_vae)

    s = sub.add_parser("train-dit", help="curriculum flow-matching training on moving squares")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--metrics-out")
    s.add_argument("--figures")
    s.add_argument("--allow-paper-scale", action="store_true")
    s.set_defaults(func=cmd_train_dit)

    s = sub.add_parser("expand", help="function-preserving width expansion of a DiT checkpoint")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--factor", type=int, default=2)
    s.add_argument("--eps", type=float, default=0.0)
    s.add_argument("--bias-mode", choices=("preserve", "literal"), default="preserve")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-5)
    s.set_defaults(func=cmd_expand)

    s = sub.add_parser("posttrain", help="interleaved DPO / KTO post-training with checkpoint merging")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--prefs", help="preference JSON-lines; default: RDPO pairs from synthetic data")
    s.add_argument("--config")
    s.add_argument("--metrics-out")
    s.add_argument("--figures")
    s.set_defaults(func=cmd_posttrain)

    s = sub.add_parser("sample", help="Euler sampling from a DiT checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prompt", default="a square moving right")
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--units", type=int, default=2)
    s.add_argument("--size", type=int, default=8)
    s.add_argument("--fps", type=float, default=24.0)
    s.add_argument("--condition", help="latents file whose leading units are held fixed")
    s.add_argument("--condition-units", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("datapipe", help="clip curation pipeline")
    dsub = s.add_subparsers(dest="action", parser_class=_Parser)
    r = dsub.add_parser("run")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--thresholds", required=True)
    r.add_argument("--tags", help="JSON {source_id: [tags]}")
    r.add_argument("--target", help="JSON {tag: share} for balancing weights")
    r.set_defaults(func=cmd_datapipe)

    s = sub.add_parser("plan", help="rank (dp, tp, pp) layouts with the analytic cost model")
    s.add_argument("--model", required=True)
    s.add_argument("--cluster", required=True)
    s.add_argument("--microbatches", type=int, required=True)
    s.add_argument("--format", choices=("json", "text", "both"), default="json")
    s.add_argument("--top", type=int, default=0)
    s.add_argument("--figures")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("eval", help="PSNR / SSIM between two raw clips")
    s.add_argument("--reference", required=True)
    s.add_argument("--candidate", required=True)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func: Callable | None = getattr(args, "func", None)
    if func is None:
        sys.stderr.write(parser.format_usage())
        return 1
    try:
        return func(args)
    except VALIDATION_ERRORS as exc:
        sys.stderr.write(f"mugv: error: {exc}\n")
        return 1
    except (MugvError, RuntimeError, OSError, ArithmeticError) as exc:
        sys.stderr.write(f"mugv: runtime failure: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
