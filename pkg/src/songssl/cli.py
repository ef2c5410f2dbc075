"""``songssl`` command line: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, config, dataio
from .config import ConfigError, RunConfig
from .training import CheckpointError, TrainingDiverged, load_checkpoint, model_from_checkpoint, seed_everything

log = logging.getLogger("songssl")


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------


def _out_dir(cfg: RunConfig, explicit) -> Path:
    return Path(explicit) if explicit else config.run_dir(cfg)


def _split(cfg: RunConfig) -> dataio.SplitSpec:
    if not cfg.paths.split:
        raise ConfigError(f"stage {cfg.stage} needs --split")
    path = Path(cfg.paths.split)
    if not path.exists():
        raise dataio.DataError(f"split manifest not found: {path}")
    return dataio.SplitSpec.load(path)


def _corpus(cfg: RunConfig, split: dataio.SplitSpec, ids=None):
    data_dir = cfg.paths.data_dir or split.data_dir
    if data_dir is None:
        raise ConfigError("no data directory: pass --data-dir or record one in the split manifest")
    return dataio.load_corpus(data_dir, split.all_ids if ids is None else ids, allow_any_rate=cfg.data.allow_any_rate)


def _pool_ids(split: dataio.SplitSpec, name: str) -> list[str]:
    pools = {"test": split.test_ids, "plus1": split.plus1_ids, "plus2": split.plus2_ids,
             "heldout": split.plus1_ids + split.plus2_ids, "all": split.all_ids}
    if name not in pools:
        raise ConfigError(f"unknown unlabeled pool {name!r}; choose from {', '.join(pools)}")
    return list(pools[name])


def _write_metrics(directory: Path, metrics: dict):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    flat = {k: v for k, v in metrics.items() if isinstance(v, (int, float, str, bool)) or v is None}
    with open(directory / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k in sorted(flat):
            w.writerow([k, flat[k]])


def _finish(cfg, out: Path, metrics: dict, sha=None):
    _write_metrics(out, metrics)
    config.write_run_files(out, cfg, metrics, sha)
    print(out)
    return 0


def _last(history, *names):
    return {n: float(history.column(n)[-1]) for n in names} if history.rows else {}


def _classifier(ckpt_path):
    ckpt = load_checkpoint(ckpt_path)
    model = model_from_checkpoint(ckpt)
    if model.cfg.head != "classifier":
        raise CheckpointError(f"{ckpt_path} holds a {model.cfg.head} model, not a classifier")
    return model


# ----------------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------------


def run_synth(cfg: RunConfig, args) -> int:
    from .synth import gen_corpus, token_counts

    out = Path(args.out or cfg.paths.out_dir)
    corpus = gen_corpus(cfg.synth.n_recordings, seed=cfg.seed, bird_id=cfg.synth.bird_id, out_dir=out,
                        train_fraction=cfg.synth.train_fraction)
    metrics = {"recordings": len(corpus.recordings), "few_shot": len(corpus.split.few_shot_ids),
               "test": len(corpus.split.test_ids),
               "tokens": {str(k): v for k, v in token_counts(corpus.recordings).items()}}
    return _finish(cfg, out, metrics)


def run_pretrain(cfg: RunConfig, args) -> int:
    if cfg.paths.split:
        split = _split(cfg)
        corpus = _corpus(cfg, split)
    elif cfg.paths.data_dir:
        corpus = dataio.load_corpus(cfg.paths.data_dir, allow_any_rate=cfg.data.allow_any_rate)
    else:
        raise ConfigError(f"stage {cfg.stage} needs --split or --data-dir")
    rng = seed_everything(cfg.seed)
    out = _out_dir(cfg, args.out)
    if cfg.stage == "pretrain-mae":
        from .ssl_mae import pretrain_mae

        res = pretrain_mae(corpus, cfg.mae, rng, model_cfg=cfg.model, spec_cfg=cfg.spectrogram, aug=cfg.augment,
                           out_dir=out, plot_every=args.plot_every, seed=cfg.seed)
        metrics = _last(res.log, "loss")
    else:
        from .ssl_osc import pretrain_osc

        res = pretrain_osc(corpus, cfg.osc, cfg.osc_plan, rng, model_cfg=cfg.model, spec_cfg=cfg.spectrogram,
                           aug=cfg.augment, out_dir=out, seed=cfg.seed)
        metrics = _last(res.log, "l_ce", "l_gini", "l_oc", "max_cluster_share", "argmax_share")
        metrics["max_cluster_share_all_epochs"] = float(max(res.log.column("max_cluster_share"), default=0.0))
    metrics["recordings"] = len(corpus)
    return _finish(cfg, out, metrics, res.checkpoint_sha256)


def _test_metrics(model, cfg, split, prefix=""):
    from .supervised import evaluate

    test = _corpus(cfg, split, split.test_ids)
    m = evaluate(model, test, cfg.spectrogram)
    return {f"{prefix}{k}": v for k, v in m.items()}


def run_train(cfg: RunConfig, args) -> int:
    from .supervised import train_supervised

    split = _split(cfg)
    train_recs = _corpus(cfg, split, split.train_ids(cfg.data.train_size))
    init = "random" if cfg.paths.init in (None, "random") else load_checkpoint(cfg.paths.init)
    rng = seed_everything(cfg.seed)
    out = _out_dir(cfg, args.out)
    res = train_supervised(train_recs, split.num_classes, cfg.train, rng, init=init, model_cfg=cfg.model,
                           spec_cfg=cfg.spectrogram, aug=cfg.augment, freeze_backbone=cfg.stage == "probe",
                           out_dir=out, seed=cfg.seed)
    metrics = {"init": cfg.paths.init or "random", "train_recordings": len(train_recs), **_last(res.log, "loss")}
    if split.test_ids and not args.no_eval:
        metrics.update(_test_metrics(res.model, cfg, split, "test_"))
    return _finish(cfg, out, metrics, res.checkpoint_sha256)


def run_posttrain(cfg: RunConfig, args) -> int:
    from .semisl import posttrain

    if not cfg.paths.ckpt:
        raise ConfigError("posttrain needs --ckpt")
    split = _split(cfg)
    model = _classifier(cfg.paths.ckpt)
    labeled = _corpus(cfg, split, split.train_ids(cfg.data.train_size))
    unl_ids = _pool_ids(split, cfg.data.unlabeled)
    unlabeled = _corpus(cfg, split, unl_ids)
    transductive = bool(set(unl_ids) & set(split.test_ids))
    if transductive:
        log.warning("transductive run: the unlabeled pool overlaps the evaluation recordings")
    rng = seed_everything(cfg.seed)
    out = _out_dir(cfg, args.out)
    metrics = {"transductive": transductive, "unlabeled_pool": cfg.data.unlabeled, "unlabeled_recordings": len(unl_ids)}
    if split.test_ids and not args.no_eval:
        metrics.update(_test_metrics(model, cfg, split, "before_"))
    res = posttrain(labeled, unlabeled, model, cfg.semi_plan, rng, cfg=cfg.semi, spec_cfg=cfg.spectrogram,
                    aug=cfg.augment, out_dir=out, seed=cfg.seed)
    metrics.update(_last(res.log, "l_ce", "l_u", "gate_rate"))
    if split.test_ids and not args.no_eval:
        metrics.update(_test_metrics(res.model, cfg, split, "test_"))
    return _finish(cfg, out, metrics, res.checkpoint_sha256)


def write_frame_csv(path, labels, probs, frame_hop_s):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "time_s", "label", "confidence"])
        conf = probs.max(axis=-1)
        for t, (lab, c) in enumerate(zip(labels, conf)):
            w.writerow([t, f"{t * frame_hop_s:.6f}", int(lab), f"{c:.6f}"])


def read_frame_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and "label" not in rows[0]:
        raise dataio.DataError(f"{path}: no 'label' column")
    return np.array([int(r["label"]) for r in rows], dtype=np.int64)


def run_predict(cfg: RunConfig, args) -> int:
    from .supervised import predict_full

    if not cfg.paths.ckpt:
        raise ConfigError("predict needs --ckpt")
    if not args.wav:
        raise ConfigError("predict needs --wav")
    model = _classifier(cfg.paths.ckpt)
    out = Path(args.out) if args.out else Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hop_s = cfg.spectrogram.hop_seconds()
    for wav in args.wav:
        rec = dataio.load_recording(wav, allow_any_rate=cfg.data.allow_any_rate)
        labels, probs = predict_full(model, rec, cfg.spectrogram)
        write_frame_csv(out / f"{rec.id}.frames.csv", labels, probs, hop_s)
        segs = analysis.segments_from_frames(labels, cfg.analysis.min_len_frames)
        dataio.write_annotations(out / f"{rec.id}.segments.csv", analysis.segments_to_intervals(segs, hop_s))
        print(out / f"{rec.id}.frames.csv")
    return 0


def run_eval(cfg: RunConfig, args) -> int:
    if not cfg.paths.ckpt:
        raise ConfigError("eval needs --ckpt")
    model = _classifier(cfg.paths.ckpt)
    split = _split(cfg)
    out = _out_dir(cfg, args.out)
    metrics = _test_metrics(model, cfg, split)
    return _finish(cfg, out, metrics)


def run_analyze(cfg: RunConfig, args) -> int:
    out = Path(args.out) if args.out else config.run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "cluster":
        return _analyze_cluster(cfg, args, out)
    if not args.pred_csv:
        raise ConfigError(f"analyze {args.kind} needs --pred-csv")
    pred = [analysis.segments_from_frames(read_frame_csv(p), cfg.analysis.min_len_frames) for p in args.pred_csv]
    true = None
    if args.true_csv:
        hop_s = cfg.spectrogram.hop_seconds()
        true = []
        for p in args.true_csv:
            ivs = dataio.read_annotations(p)
            n = int(np.ceil(max((iv.offset_s for iv in ivs), default=0.0) / hop_s)) + 1
            true.append(analysis.segments_from_frames(dataio.frames_from_intervals(ivs, n, hop_s), 1))
    if args.kind == "durations":
        return _analyze_durations(cfg, pred, true, out)
    return _analyze_transitions(cfg, pred, true, out)


def _analyze_durations(cfg, pred, true, out: Path) -> int:
    from .plots import duration_histograms

    labels = sorted({s.label for segs in pred + (true or []) for s in segs})
    metrics = {}
    with open(out / "durations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "source", "n", "mean_ms", "median_ms", "iqr_ms", "w1_ms"])
        for lab in labels:
            for source, segs in (("pred", pred), ("true", true)):
                if segs is None:
                    continue
                d = analysis.duration_distribution(segs, lab, spec_cfg=cfg.spectrogram, bin_ms=cfg.analysis.bin_ms)
                w1 = analysis.duration_w1(true, pred, lab, cfg.spectrogram) if true is not None else float("nan")
                w.writerow([lab, source, d["n"], d.get("mean", ""), d.get("median", ""), d.get("iqr", ""), w1])
            if true is not None:
                metrics[f"w1_ms_{lab}"] = analysis.duration_w1(true, pred, lab, cfg.spectrogram)
            duration_histograms(analysis.segment_durations_ms(true or [], lab, cfg.spectrogram),
                                analysis.segment_durations_ms(pred, lab, cfg.spectrogram),
                                out / f"durations_{lab}.png", title=f"syllable {lab}")
    _write_metrics(out, metrics)
    config.write_run_files(out, cfg, metrics)
    print(out)
    return 0


def _analyze_transitions(cfg, pred, true, out: Path) -> int:
    from .plots import transition_heatmap

    gap = None
    if cfg.analysis.break_at_gaps:
        gap = int(round(cfg.analysis.max_gap_ms / analysis.frame_ms(cfg.spectrogram)))
    labels = sorted({s.label for segs in pred + (true or []) for s in segs})
    metrics = {}
    for source, segs in (("pred", pred), ("true", true)):
        if segs is None:
            continue
        tm = analysis.transition_matrix(segs, labels, max_gap_frames=gap)
        with open(out / f"transitions_{source}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["from"] + [f"to_{lab}" for lab in tm.labels])
            for lab, row in zip(tm.labels, tm.probabilities):
                w.writerow([lab] + [f"{v:.6f}" for v in row])
        transition_heatmap(tm, out / f"transitions_{source}.png")
        metrics[f"{source}_bigrams"] = int(tm.counts.sum())
    _write_metrics(out, metrics)
    config.write_run_files(out, cfg, metrics)
    print(out)
    return 0


def _analyze_cluster(cfg, args, out: Path) -> int:
    if not args.ssl_ckpt:
        raise ConfigError("analyze cluster needs --ssl-ckpt")
    split = _split(cfg)
    model = model_from_checkpoint(load_checkpoint(args.ssl_ckpt))
    recs = _corpus(cfg, split)
    emb = analysis.embed_syllables(model, recs, spec_cfg=cfg.spectrogram, n_components=cfg.analysis.n_components,
                                   pooling=cfg.analysis.pooling, seed=cfg.seed)
    k = args.k or len(np.unique(emb.labels))
    ids, ami = analysis.cluster_embeddings(emb.features, k, cfg.seed, emb.labels, n_init=cfg.analysis.gmm_n_init)
    with open(out / "embeddings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["recording", "label", "duration_s", "cluster"] + [f"f{i}" for i in range(emb.features.shape[1])])
        for i in range(len(ids)):
            w.writerow([emb.rec_ids[i], int(emb.labels[i]), f"{emb.durations_s[i]:.6f}", int(ids[i])]
                       + [f"{v:.6f}" for v in emb.features[i]])
    rows = analysis.curation_report(emb.rec_ids, ids, rare_fraction=cfg.analysis.rare_fraction,
                                    top=cfg.analysis.top_exemplars)
    (out / "curation.md").write_text(analysis.curation_markdown(rows))
    with open(out / "curation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "population", "share", "rare", "exemplars"])
        for r in rows:
            w.writerow([r["cluster"], r["population"], f"{r['share']:.6f}", int(r["rare"]), " ".join(r["exemplars"])])
    metrics = {"ami": ami, "k": k, "syllables": len(ids), "rare_clusters": [r["cluster"] for r in rows if r["rare"]]}
    _write_metrics(out, metrics)
    config.write_run_files(out, cfg, metrics)
    print(out)
    return 0


RUNNERS = {
    "synth": run_synth,
    "pretrain-mae": run_pretrain,
    "pretrain-osc": run_pretrain,
    "train": run_train,
    "probe": run_train,
    "posttrain": run_posttrain,
    "predict": run_predict,
    "eval": run_eval,
    "analyze": run_analyze,
}


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--preset", choices=sorted(config.PRESETS), help="named defaults applied before --config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. train.epochs=60 (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", help="root for content-addressed run directories")
    common.add_argument("--out", help="exact output directory (skips content addressing)")
    common.add_argument("--data-dir")
    common.add_argument("--split", help="split manifest (split.yaml)")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="songssl", description=__doc__)
    sub = p.add_subparsers(dest="stage", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic annotated corpus")
    s.add_argument("--n", type=int, help="number of recordings")

    for name in ("pretrain-mae", "pretrain-osc"):
        s = sub.add_parser(name, parents=[common], help="self-supervised pretraining")
        s.add_argument("--epochs", type=int)
        s.add_argument("--plot-every", type=int, default=0, help="MAE reconstruction plot period (epochs)")

    for name in ("train", "probe"):
        s = sub.add_parser(name, parents=[common], help="supervised finetuning" if name == "train" else
                           "linear probe on a frozen backbone")
        s.add_argument("--init", help="'random' or a pretraining checkpoint")
        s.add_argument("--epochs", type=int)
        s.add_argument("--train-size", choices=["few_shot", "plus1", "plus2"])
        s.add_argument("--no-eval", action="store_true")

    s = sub.add_parser("posttrain", parents=[common], help="semi-supervised post-training")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--unlabeled", help="unlabeled pool: test (transductive), plus1, plus2, heldout, all")
    s.add_argument("--epochs", type=int)
    s.add_argument("--train-size", choices=["few_shot", "plus1", "plus2"])
    s.add_argument("--no-eval", action="store_true")

    s = sub.add_parser("predict", parents=[common], help="frame and segment CSVs for WAV files")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--wav", nargs="+", required=True)

    s = sub.add_parser("eval", parents=[common], help="frame metrics on the test split")
    s.add_argument("--ckpt", required=True)

    s = sub.add_parser("analyze", parents=[common], help="song-structure analyses")
    s.add_argument("kind", choices=["durations", "transitions", "cluster"])
    s.add_argument("--pred-csv", nargs="+", help="frame CSVs written by predict")
    s.add_argument("--true-csv", nargs="+", help="annotation CSVs for comparison")
    s.add_argument("--ssl-ckpt")
    s.add_argument("--k", type=int, help="cluster count (default: number of annotated classes)")
    return p


def resolve(args) -> RunConfig:
    overrides = list(args.overrides)
    for flag, key in (("out_dir", "paths.out_dir"), ("data_dir", "paths.data_dir"), ("split", "paths.split"),
                      ("init", "paths.init"), ("ckpt", "paths.ckpt"), ("train_size", "data.train_size"),
                      ("unlabeled", "data.unlabeled"), ("n", "synth.n_recordings")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    return config.resolve_config(args.config, overrides, stage=args.stage, preset=args.preset, seed=args.seed,
                                 epochs=getattr(args, "epochs", None))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        return RUNNERS[cfg.stage](cfg, args)
    except (ConfigError, CheckpointError, dataio.DataError, TrainingDiverged) as exc:
        print(f"songssl {args.stage}: error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        # CollapseError and other stage failures
        print(f"songssl {args.stage}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
