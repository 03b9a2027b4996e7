"""``biome`` command-line entry point.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 shape/config mismatch.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, archive, dsp, profiler, synth
from .distill import (DISTILL_LAYERS, Distiller, NonFiniteLossError, TrainSchedule, lr_at, make_batch,
                      student_config)
from .encoder import BioMEEncoder, EncoderConfig, build_config

SAMPLE_RATE = 16000
FEATURES = ("mel", "modspec", "msab", "patches")


class CLIError(Exception):
    code = 1


class InputError(CLIError):
    code = 2


class NumericalError(CLIError):
    code = 3


class ShapeError(CLIError):
    code = 4


# ---------------------------------------------------------------- helpers


def resolve_seed(seed):
    if seed is not None:
        return int(seed)
    env = os.environ.get("BIOME_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise InputError(f"BIOME_SEED must be an integer, got {env!r}") from None


def write_json(path, obj) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"cannot read JSON {path}: {e}") from None


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed: int, inputs, outputs) -> None:
    """Run manifest, written atomically before any result file."""
    write_json(out_dir / "manifest.json", {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": [str(Path(p).relative_to(out_dir)) for p in outputs],
    })


def load_clip(path, sample_rate: int = SAMPLE_RATE) -> dsp.AudioClip:
    try:
        clip = dsp.read_wav(path)
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read WAV {path}: {e}") from None
    return dsp.resample(clip, sample_rate)


def dsp_params(args) -> dict:
    return {
        "sample_rate": args.sample_rate,
        "n_mels": args.n_mels,
        "mel_win_s": dsp.MEL_WIN_S,
        "mel_hop_s": dsp.MEL_HOP_S,
        "log_eps": dsp.LOG_EPS,
        "mod_win_s": dsp.MOD_WIN_S,
        "mod_hop_s": dsp.MOD_HOP_S,
        "msab_nfft": args.nfft,
        "patch": dsp.PATCH,
    }


def load_student(checkpoint, config_path=None) -> BioMEEncoder:
    """Load a student from a training output dir or a ``.tarc`` file plus config JSON."""
    ckpt = Path(checkpoint)
    if ckpt.is_dir():
        weights_path, cfg_path = ckpt / "student.tarc", ckpt / "config.json"
    else:
        weights_path, cfg_path = ckpt, Path(config_path) if config_path else ckpt.with_suffix(".json")
    cfg_doc = read_json(config_path or cfg_path)
    try:
        cfg = EncoderConfig.from_dict(cfg_doc.get("student", cfg_doc))
    except (TypeError, ValueError) as e:
        raise ShapeError(f"invalid encoder config: {e}") from None
    try:
        tensors = archive.load(weights_path)
    except OSError as e:
        raise InputError(f"cannot read checkpoint {weights_path}: {e}") from None
    except archive.ArchiveError as e:
        raise InputError(str(e)) from None
    model = BioMEEncoder(cfg).double()
    expected = model.state_dict()
    if set(tensors) != set(expected):
        missing, extra = sorted(set(expected) - set(tensors)), sorted(set(tensors) - set(expected))
        raise ShapeError(f"checkpoint does not match config (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, t in expected.items():
        if tuple(tensors[name].shape) != tuple(t.shape):
            raise ShapeError(f"{name}: checkpoint shape {tensors[name].shape} != config shape {tuple(t.shape)}")
    model.load_state_dict({k: torch.as_tensor(v, dtype=torch.float64) for k, v in tensors.items()})
    return model.eval()


# ---------------------------------------------------------------- extract


def cmd_extract(args) -> int:
    clip = load_clip(args.input, args.sample_rate)
    feats = args.features or ["mel"]
    out = {}
    try:
        if "mel" in feats or "patches" in feats:
            mel = dsp.mel_spectrogram(clip, n_mels=args.n_mels)
            if "mel" in feats:
                out["mel"] = mel.values.astype(np.float32)
            if "patches" in feats:
                out["patches"] = dsp.patchify(mel).patches.astype(np.float32)
        if "modspec" in feats or "msab" in feats:
            ms = dsp.modulation_spectrogram(clip, 2 * args.nfft, 2 * args.nfft)
            square = dsp.ModulationSpectrogram(ms.values[: args.nfft, : args.nfft], ms.acoustic_bin_hz,
                                               ms.mod_bin_hz, ms.metadata)
            if "modspec" in feats:
                out["modspec"] = square.values.astype(np.float32)
            if "msab" in feats:
                out["msab"] = dsp.msab(square).values.astype(np.float32)
    except ValueError as e:
        raise InputError(str(e)) from None
    archive.save(args.out, out)
    params = dsp_params(args)
    params["features"] = sorted(out)
    params["source"] = str(args.input)
    write_json(Path(str(args.out) + ".json"), params)
    return 0


# ---------------------------------------------------------------- train


def _synthetic_clips(rng, n, seconds):
    return [synth.random_clip(rng, seconds) for _ in range(n)]


def _wav_clips(wav_dir, seconds):
    paths = sorted(Path(wav_dir).glob("*.wav"))
    if not paths:
        raise InputError(f"no .wav files in {wav_dir}")
    return [dsp.fix_length(load_clip(p), seconds) for p in paths], paths


def cmd_train(args) -> int:
    doc = read_json(args.config)
    seed = resolve_seed(args.seed if args.seed is not None else doc.get("seed"))
    try:
        sched_kw = dict(doc.get("schedule", {}))
        sched_kw["seed"] = seed
        sched = TrainSchedule(**sched_kw)
        student_doc = doc.get("student", {"d_model": 32})
        cfg = student_config(student_doc["d_model"]) if set(student_doc) == {"d_model"} \
            else EncoderConfig.from_dict(student_doc)
    except (TypeError, ValueError, KeyError) as e:
        raise ShapeError(f"invalid training config: {e}") from None
    d_teacher = int(doc.get("d_teacher", 64))
    layers = tuple(doc.get("layers", DISTILL_LAYERS))
    data = doc.get("data", {})
    seconds = float(data.get("seconds", 2.0))
    every = int(doc.get("checkpoint_every", 0))

    out = Path(args.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    inputs = [Path(args.config)]
    rng = np.random.default_rng(seed)
    if "wav_dir" in data:
        pool, paths = _wav_clips(data["wav_dir"], seconds)
        inputs += paths
    else:
        pool = _synthetic_clips(rng, int(data.get("n_clips", sched.batch_size)), seconds)
    fixed = bool(data.get("fixed_batch", True))

    config_doc = {"schedule": sched.to_dict(), "student": cfg.to_dict(), "d_teacher": d_teacher,
                  "layers": list(layers), "data": data, "checkpoint_every": every}
    outputs = [out / n for n in ("config.json", "metrics.csv", "student.tarc", "heads.tarc", "state.json")]
    write_manifest(out, "train", config_doc, seed, inputs, outputs)
    write_json(out / "config.json", config_doc)

    torch.manual_seed(seed)
    run = Distiller.create(cfg, sched, d_teacher, layers)

    def next_batch():
        if fixed:
            return make_batch(pool[: sched.batch_size], seconds)
        idx = rng.choice(len(pool), size=sched.batch_size, replace=len(pool) < sched.batch_size)
        return make_batch([pool[i] for i in idx], seconds)

    batch = next_batch()
    history, rows = [], []

    def save_state(step, status):
        archive.save(out / "student.tarc", run.student.state_dict())
        archive.save(out / "heads.tarc", run.heads.state_dict())
        write_json(out / "state.json", {"step": step, "seed": seed, "status": status, "loss_history": history})
        _write_metrics(out / "metrics.csv", rows, layers)

    step = 0
    try:
        for step in range(sched.total_steps):
            if not fixed and step:
                batch = next_batch()
            loss = run.step(batch, step)
            row = {"step": step, "lr": lr_at(step, sched), **loss.row()}
            rows.append(row)
            history.append(row["total"])
            if every and (step + 1) % every == 0:
                ck = out / "checkpoints" / f"step_{step + 1:06d}"
                archive.save(ck.with_suffix(".student.tarc"), run.student.state_dict())
                archive.save(ck.with_suffix(".heads.tarc"), run.heads.state_dict())
    except NonFiniteLossError as e:
        save_state(step, "non-finite loss")
        raise NumericalError(str(e)) from None
    final = run.evaluate(batch)
    rows.append({"step": sched.total_steps, "lr": lr_at(sched.total_steps, sched), **final.row()})
    history.append(final.row()["total"])
    save_state(sched.total_steps, "complete")
    print(f"initial loss {history[0]:.6f}  final loss {history[-1]:.6f}")
    return 0


def _write_metrics(path, rows, layers):
    cols = ["step", "lr", "total", "l1_term", "cos_term"]
    for k in layers:
        cols += [f"l1_k{k}", f"cos_k{k}"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: (repr(float(r[c])) if c != "step" else int(r[c])) for c in cols})
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(buf.getvalue(), encoding="utf-8")
    os.replace(tmp, path)


# ---------------------------------------------------------------- profile


def cmd_profile(args) -> int:
    if args.config:
        doc = read_json(args.config)
        try:
            cfg = EncoderConfig.from_dict(doc.get("student", doc))
        except (TypeError, ValueError) as e:
            raise ShapeError(f"invalid encoder config: {e}") from None
        configs = [cfg]
    else:
        sizes = ["edge", "small", "base"] if args.size == "all" else [args.size]
        configs = [build_config(s) for s in sizes]
    reports = []
    for cfg in configs:
        rep = profiler.profile(cfg, args.duration, args.bytes_per_scalar).to_dict()
        rep["size"] = cfg.size_tag or "custom"
        rep["config"] = cfg.to_dict()
        rep["published"] = profiler.PUBLISHED.get(cfg.size_tag or "")
        reports.append(rep)
    if args.format == "json":
        print(json.dumps(reports if len(reports) > 1 else reports[0], indent=2, sort_keys=True))
    elif args.format == "csv":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["size", "param_count", "mmacs_per_s", "peak_mem_bytes_estimate", "published_params_m",
                    "published_mmacs_per_s"])
        for r in reports:
            ref = r["published"] or {}
            w.writerow([r["size"], r["param_count"], f"{r['mmacs_per_s']:.3f}", r["peak_mem_bytes_estimate"],
                        ref.get("params_m", ""), ref.get("mmacs_per_s", "")])
    else:
        print(f"{'size':<8}{'params (M)':>12}{'MMACs/s':>12}{'peak mem (MB)':>16}{'pub. #P':>10}{'pub. MMACs/s':>15}")
        for r in reports:
            ref = r["published"] or {}
            print(f"{r['size']:<8}{r['param_count'] / 1e6:>12.2f}{r['mmacs_per_s']:>12.1f}"
                  f"{r['peak_mem_bytes_estimate'] / 1e6:>16.1f}{str(ref.get('params_m', '-')):>10}"
                  f"{str(ref.get('mmacs_per_s', '-')):>15}")
        print(f"duration {args.duration:g} s; memory is an analytic lower bound "
              "(reported 5-min FP32 peaks: Edge 1.7 GB, Small 3.6 GB, Base 4.3 GB)")
    return 0


# ---------------------------------------------------------------- probe


def load_task(path):
    doc = read_json(path)
    base = Path(path).parent
    try:
        kind, metric, items = doc["kind"], doc.get("metric", "accuracy"), doc["items"]
        paths = [base / it["path"] for it in items]
        labels = [it["label"] for it in items]
        splits = [it.get("split") for it in items]
    except (KeyError, TypeError) as e:
        raise InputError(f"malformed task manifest {path}: {e}") from None
    return doc.get("name", Path(path).stem), kind, metric, paths, labels, splits


def split_indices(labels, splits, seed, train_fraction=0.7):
    """Honor explicit splits; otherwise a seeded stratified split per label."""
    if all(s is not None for s in splits):
        train = [i for i, s in enumerate(splits) if s == "train"]
        test = [i for i, s in enumerate(splits) if s != "train"]
        return train, test
    rng = np.random.default_rng(seed)
    keys = [json.dumps(lab) for lab in labels]
    train, test = [], []
    for key in sorted(set(keys)):
        idx = np.array([i for i, k in enumerate(keys) if k == key])
        idx = idx[rng.permutation(idx.size)]
        n_train = max(1, int(round(train_fraction * idx.size)))
        if idx.size > 1:
            n_train = min(n_train, idx.size - 1)
        train += idx[:n_train].tolist()
        test += idx[n_train:].tolist()
    return sorted(train), sorted(test)


def cmd_probe(args) -> int:
    from . import probe as pe

    seed = resolve_seed(args.seed)
    if args.checkpoint:
        model = load_student(args.checkpoint, args.config)
    else:
        torch.manual_seed(seed)
        if args.config:
            try:
                cfg = EncoderConfig.from_dict(read_json(args.config).get("student", read_json(args.config)))
            except (TypeError, ValueError) as e:
                raise ShapeError(f"invalid encoder config: {e}") from None
        else:
            cfg = build_config(args.size)
        model = BioMEEncoder(cfg).double().eval()
    if model.cfg.msab_dim != 2 * args.nfft:
        raise ShapeError(f"model expects {model.cfg.msab_dim}-dim MSAB, --nfft {args.nfft} gives {2 * args.nfft}")

    name, kind, metric, paths, labels, splits = load_task(args.task)
    clips = [load_clip(p) for p in paths]
    emb = np.stack([pe.clip_embedding(model, c, condition=not args.no_msab, msab_nfft=args.nfft) for c in clips])
    y = np.asarray(labels)
    train, test = split_indices(labels, splits, seed)
    try:
        task = pe.ProbeTask(kind, emb[train], y[train], metric)
        head = pe.fit_linear_probe(task, seed=seed)
        eval_idx = test or train
        score = pe.evaluate_probe(head, emb[eval_idx], y[eval_idx], metric)
        train_score = pe.evaluate_probe(head, emb[train], y[train], metric)
    except ValueError as e:
        raise InputError(str(e)) from None
    if not np.isfinite(score):
        raise NumericalError(f"non-finite {metric}")
    result = {"task": name, "kind": kind, "metric": metric, "score": score, "train_score": train_score,
              "n_train": len(train), "n_test": len(test), "seed": seed, "msab": not args.no_msab}
    if kind in ("binary_classification", "multiclass"):
        _, tree_acc = pe.separability_probe(emb, y) if np.bincount(np.unique(y, return_inverse=True)[1]).min() >= 3 \
            else (None, float("nan"))
        result["separability_tree_accuracy"] = tree_acc

    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        figs = [out / "saliency.png", out / "projection.png"] if args.plot else []
        inputs = [Path(args.task)] + paths + ([Path(args.checkpoint) / "student.tarc"]
                                              if args.checkpoint and Path(args.checkpoint).is_dir() else [])
        write_manifest(out, "probe", {"model": model.cfg.to_dict(), "task": str(args.task), "nfft": args.nfft},
                       seed, inputs, [out / "metrics.json"] + figs)
        write_json(out / "metrics.json", result)
        if args.plot:
            from . import plots
            sal = pe.saliency_map(model, clips[0], pe.probe_logit(head, 0) if kind != "regression" else
                                  "embedding_norm", condition=not args.no_msab, msab_nfft=args.nfft)
            plots.render_saliency(sal.values, out / "saliency.png")
            proj = pe.pca_2d(emb)
            plots.render_projection(proj, y, out / "projection.png")
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------- plot / synth


def cmd_plot(args) -> int:
    from . import plots

    try:
        tensors = archive.load(args.archive)
    except OSError as e:
        raise InputError(f"cannot read archive {args.archive}: {e}") from None
    except archive.ArchiveError as e:
        raise InputError(str(e)) from None
    name = args.tensor or {"spectrogram": "mel", "modspec": "modspec", "saliency": "saliency"}[args.kind]
    if name not in tensors:
        raise InputError(f"archive has no tensor {name!r} (available: {sorted(tensors) or 'none'})")
    arr = np.asarray(tensors[name], dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"tensor {name!r} must be 2-D, got shape {arr.shape}")
    out = Path(args.out) if args.out else Path(str(args.archive) + f".{args.kind}.png")
    {"spectrogram": plots.render_spectrogram, "modspec": plots.render_modspec,
     "saliency": plots.render_saliency}[args.kind](arr, out)
    print(out)
    return 0


def cmd_synth_task(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = resolve_seed(args.seed)
    clips, labels = synth.am_rate_task(args.n_per_class, tuple(args.rates), args.seconds, seed)
    items = []
    for i, (clip, lab) in enumerate(zip(clips, labels)):
        fname = f"clip_{i:04d}.wav"
        dsp.write_wav(out / fname, clip)
        items.append({"path": fname, "label": int(lab)})
    write_json(out / "task.json", {"name": "am_rate", "kind": "multiclass", "metric": "accuracy",
                                   "rates_hz": list(args.rates), "items": items})
    print(out / "task.json")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="biome", description="BioME modulation-aware bioacoustic encoder toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def dsp_flags(sp):
        sp.add_argument("--sample-rate", type=int, default=SAMPLE_RATE,
                        help="resample input to this rate (default 16000; all audio is used at 16 kHz)")
        sp.add_argument("--n-mels", type=int, default=dsp.N_MELS, help="mel bins (default 128)")
        sp.add_argument("--nfft", type=int, default=dsp.MSAB_NFFT,
                        help="MSAB resolution: an NFFT x NFFT modulation map, 2*NFFT-dim vector "
                             "(default 256, the best trade-off in the NFFT ablation; 512-dim MSAB)")

    sp = sub.add_parser("extract", help="compute front-end features from a WAV file")
    sp.add_argument("input")
    sp.add_argument("--features", nargs="+", choices=FEATURES, default=None,
                    help="tensors to write (default: mel)")
    sp.add_argument("--out", required=True, help="output tensor archive")
    dsp_flags(sp)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("train", help="layer-wise distillation from a toy teacher")
    sp.add_argument("--config", required=True, help="training JSON (schedule, student, d_teacher, data)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, default=None, help="overrides config seed and BIOME_SEED")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("profile", help="parameter / MAC / memory accounting")
    sp.add_argument("--size", choices=["edge", "small", "base", "all"], default="all")
    sp.add_argument("--config", help="encoder config JSON instead of a named size")
    sp.add_argument("--duration", type=float, default=1.0, help="audio seconds (default 1)")
    sp.add_argument("--bytes-per-scalar", type=int, default=4)
    sp.add_argument("--format", choices=["json", "table", "csv"], default="table")
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("probe", help="linear probe on frozen embeddings")
    sp.add_argument("--task", required=True, help="task manifest JSON")
    sp.add_argument("--checkpoint", help="training output dir or student .tarc (random init if omitted)")
    sp.add_argument("--config", help="encoder config JSON (with a .tarc checkpoint or random init)")
    sp.add_argument("--size", choices=["edge", "small", "base"], default="edge",
                    help="named size for a random-init encoder")
    sp.add_argument("--nfft", type=int, default=dsp.MSAB_NFFT)
    sp.add_argument("--no-msab", action="store_true", help="skip FiLM conditioning (ablated model)")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", help="directory for metrics.json, manifest and figures")
    sp.add_argument("--plot", action="store_true", help="write saliency.png and projection.png to --out")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("plot", help="render a tensor from an archive")
    sp.add_argument("archive")
    sp.add_argument("--kind", choices=["spectrogram", "modspec", "saliency"], required=True)
    sp.add_argument("--tensor", help="tensor name (default depends on --kind)")
    sp.add_argument("--out", help="PNG or SVG path")
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("synth-task", help="write a synthetic AM-rate classification task")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-per-class", type=int, default=10)
    sp.add_argument("--rates", type=float, nargs="+", default=[4.0, 12.0, 30.0])
    sp.add_argument("--seconds", type=float, default=2.0)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_synth_task)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "probe" and args.plot and not args.out:
        print("error: --plot requires --out", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
