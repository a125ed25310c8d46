"""``nsynth-forge`` command line.

Exit status: 0 on success, 1 on usage errors, 2 on bad input data.
Results go to stdout as ``key=value`` lines; progress and the resolved
configuration go to stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import ThreadpoolController

from .autodiff import read_checkpoint
from .baseline import BaselineAutoencoder, BaselineConfig, from_grid, reconstruct_audio
from .data.corpus import corpus_stats, generate_toy_corpus, read_corpus, write_corpus
from .data.example import ExampleError
from .data.records import RecordError
from .dsp import MAX_PITCH, MIN_PITCH, SAMPLE_RATE, wav_read, wav_write
from .eval import (ClassifierConfig, PitchQualityClassifier, chance_octave_rate, confusion_matrix,
                   embedding_correlation, evaluate_reconstructions, linear_pitch_probe, train_classifier,
                   write_confusion_csv, write_key_values, write_report_text)
from .pipeline import (baseline_reconstruct, toy_baseline_config, toy_wavenet_configs, train_baseline,
                       train_wavenet, wavenet_embeddings, wavenet_reconstruct)
from .rainbowgram import CqtConfig, rainbowgram_to_image, render_rainbowgram
from .spectral import StftConfig
from .wavenet import WavenetAutoencoder, interpolate

DEFAULT_SHIFT_OFFSETS = (-12, -8, -5, 0, 4, 7, 12)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _emit(**items) -> None:
    for k, v in items.items():
        print(f"{k}={v}")


# model loading
def _load_model(path):
    _, cfg = read_checkpoint(path)
    kind = (cfg or {}).get("kind")
    if kind == "wavenet":
        return WavenetAutoencoder.load(path)
    if kind == "baseline":
        return BaselineAutoencoder.load(path)
    if kind == "classifier":
        return PitchQualityClassifier.load(path)
    raise ValueError(f"{path}: checkpoint kind {kind!r} not recognised")


def _read_audio(path) -> np.ndarray:
    x, sr = wav_read(path)
    if sr != SAMPLE_RATE:
        raise ValueError(f"{path}: sample rate {sr}, expected {SAMPLE_RATE}")
    return x


def _corpus_arrays(path, limit: int | None = None):
    audio, pitches, quals, recs = [], [], [], []
    for i, r in enumerate(read_corpus(path)):
        if limit is not None and i >= limit:
            break
        audio.append(r.audio.astype(np.float64))
        pitches.append(r.pitch)
        quals.append(r.qualities)
        recs.append(r)
    if not audio:
        raise ValueError(f"{path}: no records")
    lengths = {len(a) for a in audio}
    if len(lengths) != 1:
        raise ValueError(f"{path}: notes have differing lengths {sorted(lengths)[:5]}")
    return np.stack(audio), np.asarray(pitches), np.stack(quals), recs


def _need_pitch(model, pitch):
    conditioned = (model.dec_cfg.pitch_conditioning if isinstance(model, WavenetAutoencoder)
                   else model.cfg.pitch_conditioning)
    if conditioned and pitch is None:
        raise UsageError("this model is pitch-conditioned; pass --pitch")
    return pitch if conditioned else None


# train
def cmd_train(a) -> int:
    audio, pitches, quals, _ = _corpus_arrays(a.data, a.limit)
    if a.model == "wavenet":
        enc, dec = toy_wavenet_configs(a.pitch_cond)
        if a.stride:
            enc.pool_stride = a.stride
        model = WavenetAutoencoder(enc, dec, seed=a.seed)
        _log("config: " + json.dumps(model.config_dict(), sort_keys=True))
        hist = train_wavenet(model, audio, pitches if a.pitch_cond else None, steps=a.steps, lr=a.lr or 3e-3,
                             batch_size=a.batch, crop=a.crop, seed=a.seed, log=_log, log_every=a.log_every)
    elif a.model == "baseline":
        cfg = toy_baseline_config(a.pitch_cond)
        model = BaselineAutoencoder(cfg, seed=a.seed)
        _log("config: " + json.dumps(model.config_dict(), sort_keys=True))
        grids = np.stack([model.prepare_audio(x)[0] for x in audio])
        hist = train_baseline(model, grids, pitches if a.pitch_cond else None, steps=a.steps, lr=a.lr or 2e-3,
                              batch_size=a.batch, seed=a.seed, log=_log, log_every=a.log_every)
    else:
        cfg = ClassifierConfig(BaselineConfig(depth=4, channels=[16, 32, 32, 64], input_hw=(32, 256),
                                              fft_size=512, hop_size=128))
        proto = PitchQualityClassifier(cfg, seed=a.seed)
        _log("config: " + json.dumps(proto.config_dict(), sort_keys=True))
        grids = np.stack([proto.features(x) for x in audio])
        model, hist = train_classifier(grids, pitches, quals, cfg, steps=a.steps, batch_size=a.batch,
                                       lr=a.lr or 2e-3, seed=a.seed, log=_log, log_every=a.log_every)
    model.save(a.out)
    _emit(model=a.model, steps=a.steps, final_loss=f"{hist[-1]:.6f}", checkpoint=a.out)
    return 0


# generation
def _encode(model, x):
    if isinstance(model, WavenetAutoencoder):
        return model.encode(x)
    grid, _ = model.prepare_audio(x)
    return model.encode(grid)


def cmd_encode(a) -> int:
    model = _load_model(a.ckpt)
    z = _encode(model, _read_audio(a.input))
    np.save(a.out, z)
    _emit(shape="x".join(map(str, z.shape)), out=a.out)
    return 0


def _baseline_render(model: BaselineAutoencoder, z, pitch, length, a):
    M = model.decode(z, pitch)
    frames = -(-length // model.cfg.hop_size)
    M.values = from_grid(M.values, frames, model.cfg.fft_size // 2 + 1)
    M.config, M.length = StftConfig(model.cfg.fft_size, model.cfg.hop_size), length
    return reconstruct_audio(M, gl_iters=a.gl_iters, seed=a.seed)[:length]


def cmd_reconstruct(a) -> int:
    model = _load_model(a.ckpt)
    x = _read_audio(a.input)
    pitch = _need_pitch(model, a.pitch)
    if isinstance(model, WavenetAutoencoder):
        y = wavenet_reconstruct(model, x[None], None if pitch is None else [pitch], seed=a.seed)[0]
    elif isinstance(model, BaselineAutoencoder):
        y = baseline_reconstruct(model, [x], None if pitch is None else [pitch], gl_iters=a.gl_iters, seed=a.seed)[0]
    else:
        raise ValueError("reconstruct needs an autoencoder checkpoint")
    wav_write(y, a.out)
    _emit(samples=len(y), out=a.out)
    return 0


def _generate(model, z, pitch, length, a):
    if isinstance(model, WavenetAutoencoder):
        n = min(length, z.shape[0] * model.enc_cfg.pool_stride)
        y = np.zeros(length)
        y[:n] = model.sample(z, n_samples=n, pitch=pitch, seed=a.seed)
        return y
    return _baseline_render(model, z, pitch, length, a)


def cmd_sample(a) -> int:
    model = _load_model(a.ckpt)
    z = np.load(a.z)
    pitch = _need_pitch(model, a.pitch)
    y = _generate(model, z, pitch, a.n_samples, a)
    wav_write(y, a.out)
    _emit(samples=len(y), out=a.out)
    return 0


def cmd_interpolate(a) -> int:
    if not 0.0 <= a.alpha <= 1.0:
        raise UsageError("--alpha must lie in [0, 1]")
    model = _load_model(a.ckpt)
    xa, xb = _read_audio(a.a), _read_audio(a.b)
    n = min(len(xa), len(xb))
    za, zb = _encode(model, xa[:n]), _encode(model, xb[:n])
    z = interpolate(za, zb, a.alpha)
    y = _generate(model, z, _need_pitch(model, a.pitch), n, a)
    wav_write(y, a.out)
    _emit(alpha=a.alpha, samples=len(y), out=a.out)
    return 0


def cmd_pitch_shift(a) -> int:
    model = _load_model(a.ckpt)
    if isinstance(model, PitchQualityClassifier):
        raise ValueError("pitch-shift needs an autoencoder checkpoint")
    conditioned = (model.dec_cfg.pitch_conditioning if isinstance(model, WavenetAutoencoder)
                   else model.cfg.pitch_conditioning)
    if not conditioned:
        raise ValueError(f"{a.ckpt}: model is not pitch-conditioned")
    if a.pitch is None:
        raise UsageError("pass --pitch with the note's MIDI pitch")
    x = _read_audio(a.input)
    z = _encode(model, x)
    out_dir = Path(a.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for off in a.pitches:
        p = a.pitch + off
        if not MIN_PITCH <= p <= MAX_PITCH:
            raise ValueError(f"shifted pitch {p} outside [{MIN_PITCH}, {MAX_PITCH}]")
        path = out_dir / f"shift_{off:+03d}.wav"
        wav_write(_generate(model, z, p, len(x), a), path)
        _emit(**{f"offset{off:+d}": str(path)})
    return 0


def cmd_rainbowgram(a) -> int:
    cfg = CqtConfig(a.min_pitch, a.max_pitch, a.bins_per_octave, a.hop, a.filter_scale)
    _log("config: " + json.dumps(cfg.__dict__, sort_keys=True))
    r = render_rainbowgram(_read_audio(a.input), cfg)
    rainbowgram_to_image(r, a.out)
    _emit(frames=r.magnitude.shape[0], bins=r.magnitude.shape[1], out=a.out)
    return 0


# data
def cmd_data(a) -> int:
    if a.action == "synth":
        n = write_corpus(generate_toy_corpus(a.instruments, a.seed, a.pitches, tuple(a.velocities), a.duration),
                         a.out)
        _emit(records=n, out=a.out)
    elif a.action == "stats":
        stats = corpus_stats(read_corpus(a.path))
        lines = stats.report_lines()
        if a.out:
            Path(a.out).write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    else:
        n = 0
        for rec in read_corpus(a.path):
            rec.validate(strict_length=not a.lenient)
            n += 1
        _emit(valid_records=n)
    return 0


# eval
def cmd_eval(a) -> int:
    audio, pitches, quals, recs = _corpus_arrays(a.data, a.limit)
    rng = np.random.default_rng(a.seed)
    if a.action == "recon":
        clf = PitchQualityClassifier.load(a.classifier)
        idx = np.sort(rng.permutation(len(audio))[: a.n])
        model = _load_model(a.ckpt)
        cond = model.dec_cfg.pitch_conditioning if isinstance(model, WavenetAutoencoder) else model.cfg.pitch_conditioning
        p = pitches[idx] if cond else None
        if isinstance(model, WavenetAutoencoder):
            rec = wavenet_reconstruct(model, audio[idx], p, seed=a.seed)
        else:
            rec = baseline_reconstruct(model, audio[idx], p, gl_iters=a.gl_iters, seed=a.seed)
        orig_rep, rec_rep = evaluate_reconstructions(clf, list(audio[idx]), list(rec), pitches[idx], quals[idx])
        out = Path(a.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report_text(out / "report.txt", {"original": orig_rep, "reconstruction": rec_rep})
        write_key_values(out / "report.kv", [(ln.split("=", 1)[0], ln.split("=", 1)[1])
                                             for ln in orig_rep.lines("original.") + rec_rep.lines("reconstruction.")])
        write_confusion_csv(out / "confusion_reconstruction.csv", rec_rep.confusion)
        print("\n".join(orig_rep.lines("original.") + rec_rep.lines("reconstruction.")))
        return 0
    model = _load_model(a.ckpt)
    if isinstance(model, WavenetAutoencoder):
        emb = wavenet_embeddings(model, audio)
    elif isinstance(model, BaselineAutoencoder):
        emb = np.stack([model.encode(model.prepare_audio(x)[0]) for x in audio])
    else:
        raise ValueError("embedding evaluation needs an autoencoder checkpoint")
    if a.action == "probe":
        res = linear_pitch_probe(emb.reshape(len(emb), -1), pitches, held_out_n=a.held_out, seed=a.seed)
        conf = confusion_matrix(res.predictions, res.labels)
        items = [("probe_accuracy", f"{res.accuracy:.4f}"), ("n_train", res.n_train), ("n_test", res.n_test),
                 ("converged", res.converged), ("grad_norm", f"{res.grad_norm:.3e}"), ("tolerance", res.tolerance),
                 ("octave_error_rate", f"{conf.octave_error_rate:.4f}"),
                 ("chance_octave_rate", f"{chance_octave_rate(res.labels):.4f}")]
        if a.out:
            write_key_values(a.out, items)
        for k, v in items:
            print(f"{k}={v}")
        return 0
    sel = {}
    for r, e in zip(recs, emb):
        if r.instrument_id == a.instrument and r.velocity == a.velocity:
            sel[r.pitch] = e
    if len(sel) < 2:
        raise ValueError(f"instrument {a.instrument} has fewer than two pitches at velocity {a.velocity}")
    corr = embedding_correlation(sel)
    np.savetxt(a.out, corr, delimiter=",", fmt="%.8f")
    _emit(pitches=len(sel), out=a.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nsynth-forge", description="WaveNet and spectral autoencoders for musical notes, at desk scale.",
                fromfile_prefix_chars="@")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads (default: NSFORGE_THREADS or all)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model on a record file")
    t.add_argument("model", choices=["wavenet", "baseline", "classifier"])
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=250)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--crop", type=int, default=None, help="wavenet crop length (multiple of the stride)")
    t.add_argument("--stride", type=int, default=None, help="wavenet pooling stride")
    t.add_argument("--pitch-cond", action="store_true")
    t.add_argument("--limit", type=int, default=None, help="use only the first N records")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="write the embedding of a WAV file as .npy")
    e.add_argument("input")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    def gen_flags(q):
        q.add_argument("--ckpt", required=True)
        q.add_argument("--pitch", type=int, default=None)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--gl-iters", type=int, default=200)

    r = sub.add_parser("reconstruct", help="encode and resynthesize a WAV file")
    r.add_argument("input")
    r.add_argument("--out", required=True)
    gen_flags(r)
    r.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("sample", help="synthesize audio from a saved embedding")
    s.add_argument("--z", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n-samples", type=int, default=64000)
    gen_flags(s)
    s.set_defaults(func=cmd_sample)

    i = sub.add_parser("interpolate", help="synthesize from a mix of two notes' embeddings")
    i.add_argument("a")
    i.add_argument("b")
    i.add_argument("--alpha", type=float, default=0.5)
    i.add_argument("--out", required=True)
    gen_flags(i)
    i.set_defaults(func=cmd_interpolate)

    ps = sub.add_parser("pitch-shift", help="resynthesize one embedding at several pitches")
    ps.add_argument("input")
    ps.add_argument("--pitches", type=_int_list, default=list(DEFAULT_SHIFT_OFFSETS), help="semitone offsets")
    ps.add_argument("--out-dir", required=True)
    gen_flags(ps)
    ps.set_defaults(func=cmd_pitch_shift)

    rb = sub.add_parser("rainbowgram", help="render a CQT rainbowgram PNG")
    rb.add_argument("input")
    rb.add_argument("--out", required=True)
    rb.add_argument("--min-pitch", type=int, default=24)
    rb.add_argument("--max-pitch", type=int, default=96)
    rb.add_argument("--bins-per-octave", type=int, default=40)
    rb.add_argument("--hop", type=int, default=256)
    rb.add_argument("--filter-scale", type=float, default=0.8)
    rb.set_defaults(func=cmd_rainbowgram)

    d = sub.add_parser("data", help="record file tools")
    dsub = d.add_subparsers(dest="action", required=True, parser_class=_Parser)
    ds = dsub.add_parser("stats")
    ds.add_argument("path")
    ds.add_argument("--out", default=None)
    dv = dsub.add_parser("validate")
    dv.add_argument("path")
    dv.add_argument("--lenient", action="store_true", help="accept audio lengths other than 64000")
    dy = dsub.add_parser("synth")
    dy.add_argument("--instruments", type=int, required=True)
    dy.add_argument("--seed", type=int, default=0)
    dy.add_argument("--pitches", type=int, default=12, help="pitches per instrument")
    dy.add_argument("--velocities", type=_int_list, default=[100, 127])
    dy.add_argument("--duration", type=float, default=4.0)
    dy.add_argument("--out", required=True)
    d.set_defaults(func=cmd_data)

    ev = sub.add_parser("eval", help="evaluation instruments")
    esub = ev.add_subparsers(dest="action", required=True, parser_class=_Parser)
    for name in ("recon", "probe", "correlation"):
        q = esub.add_parser(name)
        q.add_argument("--data", required=True)
        q.add_argument("--ckpt", required=True)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--limit", type=int, default=None)
        if name == "recon":
            q.add_argument("--classifier", required=True)
            q.add_argument("--n", type=int, default=4096)
            q.add_argument("--gl-iters", type=int, default=200)
            q.add_argument("--out-dir", required=True)
        elif name == "probe":
            q.add_argument("--held-out", type=int, default=4096)
            q.add_argument("--out", default=None)
        else:
            q.add_argument("--instrument", type=int, required=True)
            q.add_argument("--velocity", type=int, default=127)
            q.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)
    return p


def _thread_cap(threads: int):
    """Lower every BLAS/OpenMP pool to at most ``threads``, never raise one.

    Growing an OpenBLAS pool past its start-up size crashes some builds.
    """
    ctl = ThreadpoolController()
    limits: dict[str, int] = {}
    for pool in ctl.info():
        limits[pool["prefix"]] = min(limits.get(pool["prefix"], threads), pool["num_threads"])
    return ctl.limit(limits=limits)


def _join_negative_lists(argv: list[str]) -> list[str]:
    # argparse takes "-12,-8" for a flag; glue it to its option instead
    out = []
    for tok in argv:
        if out and out[-1] == "--pitches" and tok.startswith("-") and tok[1:2].isdigit():
            out[-1] = f"--pitches={tok}"
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(_join_negative_lists(sys.argv[1:] if argv is None else list(argv)))
    threads = args.threads or (int(os.environ["NSFORGE_THREADS"]) if os.environ.get("NSFORGE_THREADS") else None)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    _log("args: " + json.dumps(resolved, sort_keys=True, default=str))
    try:
        if threads:
            with _thread_cap(threads):
                return args.func(args)
        return args.func(args)
    except UsageError as exc:
        _log(f"nsynth-forge: usage error: {exc}")
        return 1
    except (ValueError, RecordError, ExampleError, OSError, FloatingPointError) as exc:
        _log(f"nsynth-forge: error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
