"""Command-line entry point wiring the library into reproducible experiments.

Subcommands: verify, diarize, score, synth, magface-check, fit-transform.
Every run is deterministic given identical flags and seeds; diagnostics go
to stderr and the exit code is zero only when the computation completed.
"""

from __future__ import annotations

import argparse
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import PldaParams, VbxConfig, read_backend_config
from .core import (
    Annotation,
    EmbeddingSet,
    Labeling,
    Timeline,
    parse_rttm,
    read_embedding_archive,
    read_timelines,
    read_trials,
    write_embedding_archive,
    write_labeling,
    write_rttm,
    write_trials,
)
from .diarmetrics import evaluate
from .magface import MagfaceBatch, MagfaceParams, magface_grad, magface_loss
from .pipeline import AhcBase, TwoStepConfig, VbxBase, diarize_recording, two_step_cluster
from .quality import PrecisionParams, fit_precision_params
from .synth import SynthSpec, TrialSpec, generate_meeting, generate_trials
from .verify import rejection_curve, score_trials, verification_report, write_scores


class CliError(Exception):
    pass


def _read_text(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"file not found: {path}")
    return p.read_text()


def _precision_params(args) -> PrecisionParams:
    if getattr(args, "params", None):
        return PrecisionParams.from_text(_read_text(args.params))
    return PrecisionParams(s=args.s, gamma=args.gamma, dur_cap_s=args.dur_cap)


def _add_transform_flags(parser):
    parser.add_argument("--params", help="precision-transform parameter file")
    parser.add_argument("--s", type=float, default=1.0, help="global precision scale")
    parser.add_argument("--gamma", type=float, default=0.0, help="duration adjustment weight")
    parser.add_argument("--dur-cap", type=float, default=20.0, help="duration cap in seconds")


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    embeddings = read_embedding_archive(_read_text(args.embeddings))
    trials = read_trials(_read_text(args.trials))
    backends = ["cosine", "gme"] if args.backend == "both" else [args.backend]
    precision = _precision_params(args) if "gme" in backends else None
    for backend in backends:
        scored = score_trials(embeddings, trials, backend, precision)
        report = verification_report(scored, p_target=args.p_target)
        prefix = f"{backend} " if len(backends) > 1 else ""
        print(f"{prefix}eer {report.eer:.6f}")
        print(f"{prefix}min_dcf {report.min_dcf:.6f}")
        if args.scores_out:
            suffix = f".{backend}" if len(backends) > 1 else ""
            Path(args.scores_out + suffix).write_text(write_scores(scored))
        if args.reject:
            fractions = sorted(float(f) for f in args.reject.split(","))
            curve = rejection_curve(embeddings, trials, backend, precision, fractions)
            for frac, value in curve:
                shown = "undefined" if value is None else f"{value:.6f}"
                print(f"{prefix}reject {frac:.3f} {shown}")
            if args.reject_out:
                suffix = f".{backend}" if len(backends) > 1 else ""
                lines = "".join(
                    f"{frac:.3f} {'nan' if value is None else f'{value:.6f}'}\n"
                    for frac, value in curve
                )
                Path(args.reject_out + suffix).write_text(lines)
    return 0


# ---------------------------------------------------------------------------
# diarize


def _build_two_step(args, plda: PldaParams | None, cfg: VbxConfig | None) -> TwoStepConfig:
    if args.cluster == "ahc":
        base = AhcBase(threshold=args.threshold, metric=args.metric, plda=plda)
    else:
        if plda is None:
            raise CliError(
                "vbx clustering requires --sigma-b2/--sigma-w2 or a --backend-config with them"
            )
        if cfg is None:
            cfg = VbxConfig(
                p_loop=args.p_loop,
                f_a=args.fa,
                f_b=args.fb,
                max_speakers=args.max_speakers,
                max_iters=args.max_iters,
                elbo_rel_tol=args.elbo_tol,
                min_cluster_mass=args.min_mass,
            )
        base = VbxBase(
            vbx=cfg,
            plda=plda,
            init_threshold=args.threshold,
            up=args.up,
            precision=_precision_params(args) if args.up else None,
            init_metric=args.metric,
        )
    variant = {"2.1": "centroid_assign", "2.2": "refit_all", "2.3": "refit_remaining"}[
        args.two_step
    ]
    return TwoStepConfig(percentile=args.percentile, base=base, variant=variant)


def _vad_filter(sub: EmbeddingSet, vad: Timeline | None) -> EmbeddingSet:
    """Keep segments whose midpoint falls inside a VAD region."""
    if vad is None or len(vad) == 0:
        return sub
    kept = [
        e.id
        for e in sub.items
        if any(a <= (e.start_s + e.end_s) / 2 <= b for a, b in vad.intervals)
    ]
    if not kept:
        raise CliError(f"VAD leaves no segments for recording {sub.items[0].recording_id!r}")
    return sub.subset(kept)


def _diarize_one(task):
    rec, sub, vad, osd, cfg = task
    sub = _vad_filter(sub, vad)
    lab = two_step_cluster(sub, cfg)
    return rec, diarize_recording(sub, lab, osd), lab


def cmd_diarize(args) -> int:
    embeddings = read_embedding_archive(_read_text(args.embeddings))
    recs = embeddings.recording_ids()
    vads = read_timelines(_read_text(args.vad), recs[0] if len(recs) == 1 else None) if args.vad else {}
    osds = read_timelines(_read_text(args.osd), recs[0] if len(recs) == 1 else None) if args.osd else {}

    plda = None
    vbx_cfg = None
    if args.backend_config:
        vbx_cfg, plda = read_backend_config(_read_text(args.backend_config))
    if args.sigma_b2 is not None or args.sigma_w2 is not None:
        if args.sigma_b2 is None or args.sigma_w2 is None:
            raise CliError("--sigma-b2 and --sigma-w2 must be given together")
        plda = PldaParams(args.sigma_b2, args.sigma_w2)
    cfg = _build_two_step(args, plda, vbx_cfg)

    tasks = []
    for rec in recs:
        sub = embeddings.subset(e.id for e in embeddings.items if e.recording_id == rec)
        tasks.append((rec, sub, vads.get(rec), osds.get(rec), cfg))
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_diarize_one, tasks))
    else:
        results = [_diarize_one(t) for t in tasks]
    results.sort(key=lambda rh: rh[0])

    hyp = Annotation(())
    for _, ann, _lab in results:
        hyp = hyp.merged_with(ann)
    Path(args.output).write_text(write_rttm(hyp))
    if args.labels_out:
        # cluster ids restart per recording, so offset them into one id space
        combined = {}
        offset = 0
        for _, _, lab in results:
            for eid in sorted(lab.assignment):
                combined[eid] = lab.assignment[eid] + offset
            offset += lab.num_clusters()
        Path(args.labels_out).write_text(write_labeling(Labeling(combined)))
    print(f"wrote {len(hyp)} turns for {len(recs)} recording(s) to {args.output}",
          file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# score


def cmd_score(args) -> int:
    ref = parse_rttm(_read_text(args.ref))
    hyp = parse_rttm(_read_text(args.hyp))
    include_overlap = not args.no_overlap
    report = evaluate(ref, hyp, collar_s=args.collar, include_overlap=include_overlap)
    if report.total_ref_s > 0:
        print(f"DER  {100.0 * report.der:.2f}")
        print(f"MISS {100.0 * report.miss_s / report.total_ref_s:.2f}")
        print(f"FA   {100.0 * report.fa_s / report.total_ref_s:.2f}")
        print(f"CONF {100.0 * report.confusion_s / report.total_ref_s:.2f}")
    else:
        print("DER  undefined (no scored reference speech)")
    if math.isnan(report.jer):
        print("JER  undefined (empty reference)")
    else:
        print(f"JER  {100.0 * report.jer:.2f}")
    scored_note = f"scored reference: {report.total_ref_s:.3f} s"
    if args.collar > 0 or args.no_overlap:
        full = evaluate(ref, hyp, collar_s=0.0, include_overlap=True)
        scored_note += f" (excluded {full.total_ref_s - report.total_ref_s:.3f} s)"
    print(scored_note, file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    out = Path(args.out)
    if not out.exists():
        out.mkdir(parents=True)
    if args.mode == "meeting":
        spec = SynthSpec(
            n_speakers=args.speakers,
            dim=args.dim,
            n_segments=args.segments,
            turn_len_s=args.turn_len,
            within_std=args.within_std,
            noise_fraction=args.noise_fraction,
            noise_std=args.noise_std,
            seed=args.seed,
        )
        embeddings, ref, osd = generate_meeting(spec, recording_id=args.recording)
        (out / "embeddings.jsonl").write_text(write_embedding_archive(embeddings))
        (out / "ref.rttm").write_text(write_rttm(ref))
        osd_lines = "".join(f"{a:.3f} {b:.3f}\n" for a, b in osd.intervals)
        (out / "osd.txt").write_text(osd_lines)
        vad_lines = "".join(
            f"{t.start_s:.3f} {t.end_s:.3f}\n" for t in ref.turns
        )
        (out / "vad.txt").write_text(vad_lines)
        print(f"wrote meeting ({len(embeddings)} segments) to {out}", file=sys.stderr)
    else:
        spec = TrialSpec(
            n_speakers=args.speakers,
            dim=args.dim,
            per_speaker=args.per_speaker,
            n_target=args.targets,
            n_nontarget=args.nontargets,
            degraded_fraction=args.degraded_fraction,
            within_std=args.within_std,
            noise_std=args.noise_std,
            seed=args.seed,
        )
        embeddings, trials = generate_trials(spec)
        (out / "embeddings.jsonl").write_text(write_embedding_archive(embeddings))
        (out / "trials.txt").write_text(write_trials(trials))
        print(f"wrote {len(trials)} trials over {len(embeddings)} utterances to {out}",
              file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# magface-check


def cmd_magface_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    p = MagfaceParams(scale_s=30.0, lambda_g=0.35)
    worst = 0.0
    for _ in range(args.batches):
        n, c, d = 8, 5, 16
        x = rng.standard_normal((n, d))
        x = x / np.linalg.norm(x, axis=1, keepdims=True) * rng.uniform(20, 100, n)[:, None]
        w = rng.standard_normal((c, d))
        y = rng.integers(0, c, n)
        batch = MagfaceBatch(x, w, y)
        dx, dw = magface_grad(batch, p)
        h = args.step
        for arr, grad, rebuild in (
            (x, dx, lambda a: MagfaceBatch(a, w, y)),
            (w, dw, lambda a: MagfaceBatch(x, a, y)),
        ):
            fd = np.zeros_like(arr)
            for i in range(arr.shape[0]):
                for j in range(arr.shape[1]):
                    up = arr.copy(); up[i, j] += h
                    dn = arr.copy(); dn[i, j] -= h
                    fd[i, j] = (
                        magface_loss(rebuild(up), p)[0] - magface_loss(rebuild(dn), p)[0]
                    ) / (2 * h)
            rel = float(np.abs(grad - fd).max() / max(np.abs(fd).max(), 1e-12))
            worst = max(worst, rel)
    print(f"max relative gradient error over {args.batches} batches: {worst:.3e}")
    if worst > args.tol:
        print(f"FAIL: exceeds tolerance {args.tol:.1e}", file=sys.stderr)
        return 1
    print(f"PASS: within tolerance {args.tol:.1e}")
    return 0


# ---------------------------------------------------------------------------
# fit-transform


def cmd_fit_transform(args) -> int:
    embeddings = read_embedding_archive(_read_text(args.embeddings))
    params = fit_precision_params(
        embeddings, target_median_r=args.target_median, dur_cap_s=args.dur_cap
    )
    Path(args.out).write_text(params.to_text())
    print(f"s {params.s:.6g}")
    print(f"gamma {params.gamma:.6g}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="magdiar",
        description="Magnitude-aware speaker verification and diarization back-end",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="score verification trials and report EER/minDCF")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--backend", choices=("cosine", "gme", "both"), default="cosine")
    p.add_argument("--p-target", type=float, default=0.01)
    p.add_argument("--reject", help="comma-separated rejection fractions, e.g. 0,0.1,0.2")
    p.add_argument("--scores-out", help="write per-trial scores ('enroll test score' lines)")
    p.add_argument("--reject-out", help="write the rejection curve as two-column text")
    _add_transform_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("diarize", help="cluster embeddings and write a hypothesis RTTM")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--vad", help="VAD timeline (RTTM-like or two-column text)")
    p.add_argument("--osd", help="OSD timeline (RTTM-like or two-column text)")
    p.add_argument("--output", required=True)
    p.add_argument("--cluster", choices=("ahc", "vbx"), default="ahc")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="AHC stopping (or VBx init) threshold")
    p.add_argument("--metric", choices=("cosine", "plda"), default="cosine")
    p.add_argument("--two-step", choices=("2.1", "2.2", "2.3"), default="2.1")
    p.add_argument("--percentile", type=float, default=0.0,
                   help="magnitude percentile for the reliable split (0 = one-step)")
    p.add_argument("--sigma-b2", type=float, help="between-speaker variance")
    p.add_argument("--sigma-w2", type=float, help="within-speaker variance")
    p.add_argument("--up", action="store_true", help="propagate magnitude uncertainty into VBx")
    p.add_argument("--p-loop", type=float, default=0.9)
    p.add_argument("--fa", type=float, default=1.0)
    p.add_argument("--fb", type=float, default=1.0)
    p.add_argument("--max-speakers", type=int, default=20)
    p.add_argument("--max-iters", type=int, default=40)
    p.add_argument("--elbo-tol", type=float, default=1e-6)
    p.add_argument("--min-mass", type=float, default=1.0)
    p.add_argument("--backend-config", help="key-value file overriding VBx/PLDA settings")
    p.add_argument("--labels-out", help="write per-segment cluster labels ('id cluster' lines)")
    p.add_argument("--jobs", type=int, default=1, help="parallel recordings")
    _add_transform_flags(p)
    p.set_defaults(func=cmd_diarize)

    p = sub.add_parser("score", help="score a hypothesis RTTM against a reference")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--collar", type=float, default=0.0)
    p.add_argument("--no-overlap", action="store_true",
                   help="exclude reference overlap regions from scoring")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("synth", help="generate synthetic meetings or trial lists")
    p.add_argument("--mode", choices=("meeting", "trials"), default="meeting")
    p.add_argument("--out", required=True)
    p.add_argument("--recording", default="synth")
    p.add_argument("--speakers", type=int, default=3)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--segments", type=int, default=200)
    p.add_argument("--turn-len", type=float, default=4.0)
    p.add_argument("--within-std", type=float, default=5.0)
    p.add_argument("--noise-fraction", type=float, default=0.3)
    p.add_argument("--noise-std", type=float, default=60.0)
    p.add_argument("--per-speaker", type=int, default=6)
    p.add_argument("--targets", type=int, default=300)
    p.add_argument("--nontargets", type=int, default=300)
    p.add_argument("--degraded-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("magface-check", help="finite-difference check of the loss gradients")
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_magface_check)

    p = sub.add_parser("fit-transform", help="fit precision-transform parameters on a dev set")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--target-median", type=float, default=5.0)
    p.add_argument("--dur-cap", type=float, default=20.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_transform)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
