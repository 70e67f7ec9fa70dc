"""``lightcnn`` command line: align, train, extract, eval, bench, mfm-stats."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("lightcnn")

PAPER_LATENCY_MS = {"A": 71, "B": 67}


class CommandError(Exception):
    """Bad input detected after argument parsing; exits with status 2."""


def _echo(**kv):
    for k, v in kv.items():
        print(f"# {k}={v}", file=sys.stderr)


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


# ---------------------------------------------------------------------------
# align
# ---------------------------------------------------------------------------

def _align_one(args):
    from .align import ManifestRecord, align_face, load_image, save_image

    i, rec, src_base, out_dir, spec = args
    try:
        image = load_image(_resolve(src_base, rec.path))
    except (OSError, ValueError) as exc:
        return i, None, f"cannot read {rec.path}: {exc}"
    aligned, _, moved = align_face(image, rec.landmarks, spec)
    name = f"{i:06d}_{Path(rec.path).stem}.png"
    save_image(out_dir / name, aligned)
    return i, ManifestRecord(name, rec.label, moved), None


def cmd_align(a):
    from .align import SPECS, read_manifest, write_manifest

    spec = SPECS[a.spec]
    _echo(spec=a.spec, size=spec.size, ec_mc_y=spec.ec_mc_y, ec_y=spec.ec_y, workers=a.workers,
          seed=a.seed)
    try:
        records = read_manifest(a.manifest)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    base = Path(a.manifest).resolve().parent
    jobs = [(i, r, base, out, spec) for i, r in enumerate(records)]
    if a.workers > 1 and jobs:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(a.workers) as pool:
            results = list(pool.map(_align_one, jobs))
    else:
        results = [_align_one(j) for j in jobs]
    kept = []
    for _, rec, warning in sorted(results, key=lambda r: r[0]):
        if warning:
            log.warning("skipping: %s", warning)
        else:
            kept.append(rec)
    write_manifest(out / "manifest.tsv", kept)
    print(f"aligned={len(kept)}")
    print(f"skipped={len(records) - len(kept)}")
    print(f"size={spec.size}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def load_dataset(data_dir):
    from .align import load_image, read_manifest
    from .trainer import TrainSample

    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.tsv" if data_dir.is_dir() else data_dir
    base = manifest.parent
    samples = []
    for rec in read_manifest(manifest):
        try:
            samples.append(TrainSample(load_image(_resolve(base, rec.path)), rec.label))
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", rec.path, exc)
    return samples


def cmd_train(a):
    from . import modelio, plotting
    from .tensor import make_rng
    from .trainer import (LogRow, TrainingDiverged, format_config, load_config, parse_config,
                          split_train_val, train_loop, write_log)
    from .zoo import build_network, init_weights

    overrides = {"seed": a.seed, "max_iters": a.iters}
    try:
        config = load_config(a.config, **overrides) if a.config else parse_config("", **overrides)
    except (OSError, ValueError) as exc:
        raise CommandError(f"config: {exc}") from None
    samples = load_dataset(a.data)
    if not samples:
        raise CommandError(f"no training images under {a.data}")
    labels = np.array([s.label for s in samples])
    num_classes = config.num_classes or int(labels.max()) + 1
    _echo(arch=a.arch, num_classes=num_classes, images=len(samples))
    for line in format_config(config).splitlines():
        print(f"# {line.replace(' = ', '=')}", file=sys.stderr)

    train_idx, val_idx = split_train_val(labels, make_rng(config.seed))
    if a.resume:
        model, start, rng, rows = modelio.load_checkpoint(a.resume)
        rows = [LogRow(*r) for r in rows]
        if model.name != a.arch:
            raise CommandError(f"checkpoint holds network {model.name}, --arch is {a.arch}")
    else:
        model = build_network(a.arch, num_classes=num_classes, width=config.width,
                              activation=config.activation, dropout_ratio=config.dropout_ratio)
        init_weights(model, make_rng(config.seed + 1))
        start, rng, rows = 0, make_rng(config.seed + 2), []

    out = Path(a.out)

    def checkpoint(done, rows_so_far):
        modelio.save_checkpoint(out, model, done, rng, rows_so_far)

    try:
        rows = train_loop(model, samples, config, train_idx, val_idx, rng=rng, start_iter=start,
                          log_rows=rows, on_checkpoint=checkpoint)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    modelio.save(model, out)
    log_path = Path(a.log) if a.log else out.with_suffix(".log.csv")
    write_log(log_path, rows)
    if rows:
        plotting.plot_training_log(rows, log_path.with_suffix(".png"))
        last = rows[-1]
        print(f"final_loss={last.loss:.6g}")
        if last.val_accuracy is not None:
            print(f"val_accuracy={last.val_accuracy:.6g}")
    print(f"iterations={len(rows)}")
    print(f"model={out}")
    return 0


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------

def _manifest_images(path):
    from .align import load_image, read_manifest
    from .trainer import center_view

    base = Path(path).resolve().parent
    records = read_manifest(path)
    views = []
    for rec in records:
        img = load_image(_resolve(base, rec.path))
        try:
            views.append(center_view(img))
        except ValueError as exc:
            raise CommandError(f"{rec.path}: {exc}") from None
    images = np.stack(views) if views else np.zeros((0, 1, 128, 128), np.float32)
    return records, images


def cmd_extract(a):
    from . import modelio
    from .embeddings import extract_embeddings, write_embeddings

    model = modelio.load(a.model)
    _echo(model=a.model, arch=model.name, workers=a.workers, seed=a.seed)
    records, images = _manifest_images(a.manifest)
    vecs = extract_embeddings(model, images)
    if vecs.shape[1:] != (256,):
        raise CommandError(f"embedding dimension {vecs.shape[1:]} != 256")
    write_embeddings(a.out, [r.path for r in records], vecs)
    print(f"embeddings={len(records)}")
    print(f"dim={vecs.shape[1]}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _folds(pairs, scores):
    from .protocols import ScoreSet

    folds = sorted({p.fold for p in pairs})
    out = []
    for f in folds:
        idx = [i for i, p in enumerate(pairs) if p.fold == f]
        out.append(ScoreSet(scores[idx], [pairs[i].same for i in idx]))
    return folds, out


def _write_fold_csv(path, fold_ids, result):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("fold,threshold,accuracy\n")
        for f, t, acc in zip(fold_ids, result.thresholds, result.fold_accuracies):
            fh.write(f"{f},{t:.9g},{acc:.9g}\n")


def cmd_eval(a):
    from . import plotting
    from .embeddings import EmbeddingTable, read_pairs, read_probe_list
    from .protocols import (ScoreSet, closed_set_rank1, normalize_rows, open_set_dir_far,
                            tpr_at_far, verification_10fold, ytf_video_similarity)
    from .tensor import make_rng

    table = EmbeddingTable.load(a.embeddings)
    far = a.far if a.far is not None else (0.01 if a.protocol == "lfw-open" else 0.001)
    _echo(protocol=a.protocol, embeddings=a.embeddings, far=far, seed=a.seed)

    def need(flag, value):
        if not value:
            raise CommandError(f"--{flag} is required for --protocol {a.protocol}")
        return value

    try:
        if a.protocol in ("lfw-verify", "ytf"):
            pairs = read_pairs(need("pairs", a.pairs))
            if not pairs:
                raise CommandError("pair list is empty")
            if a.protocol == "lfw-verify":
                A = table.stack([p.a for p in pairs])
                B = table.stack([p.b for p in pairs])
                scores = np.sum(normalize_rows(A) * normalize_rows(B), axis=1)
            else:
                videos = table.videos()
                rng = make_rng(a.seed)
                scores = []
                for p in pairs:
                    for v in (p.a, p.b):
                        if v not in videos:
                            raise KeyError(f"id {v!r} not found in embedding file")
                    scores.append(ytf_video_similarity(videos[p.a], videos[p.b], a.frames, rng))
                scores = np.array(scores)
            fold_ids, folds = _folds(pairs, scores)
            res = verification_10fold(folds)
            labels = np.array([p.same for p in pairs])
            print(f"accuracy={res.mean_accuracy:.6f}")
            print(f"accuracy_std={np.std(res.fold_accuracies):.6f}")
            print(f"folds={len(folds)}")
            if labels.any() and (~labels).any():
                print(f"tpr_at_far={tpr_at_far(ScoreSet(scores, labels), far):.6f}")
                print(f"far={far:g}")
            if a.csv:
                _write_fold_csv(a.csv, fold_ids, res)
            if a.plot:
                plotting.plot_roc(scores, labels, a.plot)
        else:
            entries = read_probe_list(need("gallery", a.gallery))
            gal = [e for e in entries if e.role == "gallery"]
            gen = [e for e in entries if e.role == "genuine"]
            imp = [e for e in entries if e.role == "impostor"]
            G = table.stack([e.id for e in gal])
            P = table.stack([e.id for e in gen])
            if a.protocol == "lfw-closed":
                r1 = closed_set_rank1(G, [e.identity for e in gal], P, [e.identity for e in gen])
                print(f"rank1={r1:.6f}")
                print(f"probes={len(gen)}")
            else:
                if not imp:
                    raise CommandError("lfw-open needs impostor probes (role 'impostor')")
                I = table.stack([e.id for e in imp])
                dir_ = open_set_dir_far(G, [e.identity for e in gal], P, [e.identity for e in gen],
                                        I, far)
                print(f"dir_at_far={dir_:.6f}")
                print(f"far={far:g}")
                print(f"genuine={len(gen)}")
                print(f"impostors={len(imp)}")
    except KeyError as exc:
        raise CommandError(str(exc.args[0])) from None
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(a):
    from threadpoolctl import threadpool_limits

    from . import plotting
    from .tensor import make_rng
    from .zoo import build_network, count_parameters, init_weights

    if a.threads != 1:
        raise CommandError("bench runs on exactly one worker thread (--threads 1)")
    if a.iters < 1:
        raise CommandError("--iters must be >= 1")
    _echo(arch=a.arch, iters=a.iters, threads=1, warmup=3, seed=a.seed)
    model = build_network(a.arch)
    init_weights(model, make_rng(a.seed))
    x = make_rng(a.seed + 1).random((1, 1, 128, 128)).astype(np.float32)
    times = []
    with threadpool_limits(limits=1):
        for _ in range(3):
            model.embed(x)
        for _ in range(a.iters):
            t0 = time.perf_counter()
            model.embed(x)
            times.append((time.perf_counter() - t0) * 1e3)
    times = np.array(times)
    paper = count_parameters(model, "paper").total
    true = count_parameters(model, "true").total
    print(f"arch={a.arch}")
    print(f"mean_ms={times.mean():.3f}")
    print(f"min_ms={times.min():.3f}")
    print(f"params_paper={paper}")
    print(f"params_paper_k={paper // 1000}K")
    print(f"params_true={true}")
    print(f"float32_bytes={true * 4}")
    print("paper: A=71ms, B=67ms, single core i7-4790")
    if a.csv:
        with open(a.csv, "w", encoding="utf-8") as fh:
            fh.write("run,ms\n")
            for i, t in enumerate(times):
                fh.write(f"{i},{t:.6f}\n")
    if a.plot:
        plotting.plot_latency(times, a.plot, PAPER_LATENCY_MS[a.arch])
    return 0


# ---------------------------------------------------------------------------
# mfm-stats
# ---------------------------------------------------------------------------

def cmd_mfm_stats(a):
    from . import modelio, plotting
    from .embeddings import mfm_stats, write_histogram_csv

    model = modelio.load(a.model)
    _echo(model=a.model, arch=model.name, bins=a.bins, seed=a.seed)
    records, images = _manifest_images(a.manifest)
    if not records:
        raise CommandError("manifest has no images")
    labels = np.array([r.label for r in records])
    if labels.min() < 0 or labels.max() >= model.num_classes:
        log.warning("manifest labels outside the model's %d classes; using predictions",
                    model.num_classes)
        labels = None
    rows, summary = mfm_stats(model, images, labels, bins=a.bins)
    write_histogram_csv(a.out, rows)
    plot = a.plot or str(Path(a.out).with_suffix(".png"))
    plotting.plot_mfm_histograms(rows, plot)
    grad = [v for (layer, kind), v in summary.items() if kind == "gradient"]
    total = sum(n for n, _ in grad)
    zero = sum(n * f for n, f in grad) / total
    for (layer, kind), (n, frac) in summary.items():
        print(f"{layer}.{kind}.count={n}")
        print(f"{layer}.{kind}.zero_fraction={frac:.6f}")
    print(f"gradient_zero_fraction={zero:.6f}")
    print(f"histogram={a.out}")
    print(f"figure={plot}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lightcnn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=42)
        return sp

    sp = common(sub.add_parser("align", help="normalize faces from 5 landmarks"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--spec", choices=("train", "test"), required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_align)

    sp = common(sub.add_parser("train", help="train network A or B"))
    sp.add_argument("--arch", choices=("A", "B"), required=True)
    sp.add_argument("--data", required=True, help="aligned directory (manifest.tsv) or manifest")
    sp.add_argument("--config", help="key = value solver config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--log", help="CSV training log (default: <out>.log.csv)")
    sp.add_argument("--iters", type=int, help="override max_iters")
    sp.add_argument("--resume", help="checkpoint written by a previous run")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("extract", help="write 256-d fc1 embeddings"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_extract)

    sp = common(sub.add_parser("eval", help="verification / identification protocols"))
    sp.add_argument("--protocol", choices=("lfw-verify", "lfw-closed", "lfw-open", "ytf"),
                    required=True)
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--pairs")
    sp.add_argument("--gallery")
    sp.add_argument("--far", type=float)
    sp.add_argument("--frames", type=int, default=100, help="frames sampled per video (ytf)")
    sp.add_argument("--csv", help="per-fold results")
    sp.add_argument("--plot", help="ROC figure (verification protocols)")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("bench", help="single-thread forward latency"))
    sp.add_argument("--arch", choices=("A", "B"), required=True)
    sp.add_argument("--iters", type=int, default=20)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--csv")
    sp.add_argument("--plot")
    sp.set_defaults(func=cmd_bench)

    sp = common(sub.add_parser("mfm-stats", help="MFM value / gradient histograms"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--bins", type=int, default=50)
    sp.add_argument("--plot", help="figure path (default: <out>.png)")
    sp.set_defaults(func=cmd_mfm_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if args.command == "bench":
        os.environ.setdefault("OMP_NUM_THREADS", "1")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
