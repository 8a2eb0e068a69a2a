"""Command-line entry point: phantom generation, preprocessing, fold
planning, training, prediction, evaluation, false-negative reports,
explainability export, and the review service."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import cohort, explain as explain_mod, metrics, phantoms, plots, predictions
from .volume import preprocess_exam, write_stack_cache


def _fail(e):
    sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
    sys.exit(1)


class _ErrorHandlingGroup(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.exceptions.ClickException:
            raise
        except click.exceptions.Abort:
            raise
        except Exception as e:
            _fail(e)


@click.group(cls=_ErrorHandlingGroup)
def main():
    """Breast-MRI triage pipeline (desk scale)."""


@main.command()
@click.option("--n", type=int, required=True, help="number of synthetic exams")
@click.option("--positive-fraction", type=float, default=0.2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--sequences", default="T1_sub,DWI_1500,T2w", show_default=True)
@click.option("--out", type=click.Path(), required=True)
def phantom(n, positive_fraction, seed, sequences, out):
    """Generate a synthetic phantom cohort (manifest + volumes)."""
    manifest = phantoms.generate_phantoms(
        n, positive_fraction, seed, out, sequences=tuple(sequences.split(","))
    )
    n_pos = sum(1 for r in manifest.records if r.label == "suspicious")
    click.echo(f"wrote {len(manifest.records)} exams ({n_pos} positive) to {out}")


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--sequences", default="T1_sub", show_default=True)
@click.option("--data-root", envvar="MST_DATA_ROOT", default=None,
              help="root for relative sequence paths [default: manifest directory]")
@click.option("--out", type=click.Path(), required=True)
def preprocess(manifest_path, sequences, data_root, out):
    """Resample + normalize every exam into the model-input cache."""
    man = cohort.load_manifest(manifest_path)
    root = data_root or str(Path(manifest_path).parent)
    seqs = tuple(sequences.split(","))
    for rec in man.records:
        stack = preprocess_exam(rec, seqs, data_root=root)
        write_stack_cache(stack, out, rec.exam_id)
    click.echo(f"cached {len(man.records)} exams x {len(seqs)} sequences in {out}")


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--k", "n_folds", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def folds(manifest_path, n_folds, seed, out):
    """Build the patient-level stratified cross-validation plan."""
    man = cohort.load_manifest(manifest_path)
    plan = cohort.make_folds(man, n_folds=n_folds, seed=seed)
    Path(out).write_text(plan.to_json())
    click.echo(f"fold plan for {len(plan.assignments)} exams written to {out}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--fold-plan", "plan_path", type=click.Path(exists=True), required=True)
@click.option("--cache", "cache_dir", type=click.Path(exists=True), required=True)
@click.option("--fold", default="all", show_default=True, help="fold index or 'all'")
@click.option("--out", type=click.Path(), required=True)
def train(config_path, manifest_path, plan_path, cache_dir, fold, out):
    """Train cross-validation folds; writes checkpoints, histories, and (for
    'all') the concatenated test predictions."""
    from .training import TrainConfig, run_cv, train_fold

    config = TrainConfig.from_json(Path(config_path).read_text())
    man = cohort.load_manifest(manifest_path)
    plan = cohort.FoldPlan.from_json(Path(plan_path).read_text())
    if fold == "all":
        pset = run_cv(config, plan, man, cache_dir, out)
        predictions.write_predictions(pset, Path(out) / "predictions.csv")
        click.echo(f"trained {plan.n_folds} folds; predictions in {out}/predictions.csv")
    else:
        ckpt_dir, history = train_fold(config, int(fold), plan, man, cache_dir, out)
        click.echo(f"fold {fold}: best val AUC "
                   f"{max(h['val_auc'] for h in history):.3f}, checkpoint {ckpt_dir}")


@main.command("predict")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--cache", "cache_dir", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def predict_cmd(checkpoint, manifest_path, cache_dir, out):
    """Score a manifest with one checkpoint (external-validation mode)."""
    from .training import predict

    man = cohort.load_manifest(manifest_path)
    pset = predict(checkpoint, man, cache_dir)
    predictions.write_predictions(pset, out)
    click.echo(f"wrote {len(pset.rows)} predictions to {out}")


def _load_prediction_sets(paths):
    psets = {}
    for item in paths:
        if "=" in item:
            name, path = item.split("=", 1)
        else:
            name, path = Path(item).stem, item
        psets[name] = predictions.read_predictions(path)
    return psets


@main.command()
@click.option("--predictions", "pred_paths", multiple=True, required=True,
              help="SEQ=path.csv (repeatable)")
@click.option("--reference", default=None, help="reference sequence id")
@click.option("--out", type=click.Path(), required=True)
def evaluate(pred_paths, reference, out):
    """Performance table (AUC, specificity at fixed sensitivity, DeLong +
    FDR) plus ROC curves as CSV and image."""
    psets = _load_prediction_sets(pred_paths)
    reference = reference or next(iter(psets))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report = metrics.aggregate_fold_metrics(psets, reference)
    (out / "table2.json").write_text(report.to_json())
    (out / "table2.txt").write_text(report.to_text())
    curves = {}
    for name, pset in psets.items():
        curve = metrics.roc_curve(pset.scores(), pset.labels(), pset.exam_ids())
        curves[name] = curve
        plots.save_roc_csv(curve, out / f"roc_{name}.csv")
    plots.save_roc_plot(curves, out / "roc.png")
    click.echo(f"evaluation written to {out}")


@main.command("fn-report")
@click.option("--predictions", "pred_paths", multiple=True, required=True,
              help="SEQ=path.csv (repeatable)")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--thresholds", default="0.90,0.95,0.975", show_default=True)
@click.option("--out", type=click.Path(), required=True)
def fn_report(pred_paths, manifest_path, thresholds, out):
    """False-negative characteristics per sequence and sensitivity target."""
    psets = _load_prediction_sets(pred_paths)
    man = cohort.load_manifest(manifest_path)
    targets = tuple(float(t) for t in thresholds.split(","))
    report = metrics.false_negative_report(psets, man, targets=targets)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table3.json").write_text(report.to_json())
    (out / "table3.txt").write_text(report.to_text())
    for w in report.warnings:
        click.echo(f"warning: {w}", err=True)
    click.echo(f"false-negative report written to {out}")


@main.command("explain")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--predictions", "pred_path", type=click.Path(exists=True), required=True)
@click.option("--cache", "cache_dir", type=click.Path(exists=True), required=True)
@click.option("--threshold-at", type=float, default=0.90, show_default=True,
              help="sensitivity target fixing the true-positive threshold")
@click.option("--out", type=click.Path(), required=True)
def explain(checkpoint, manifest_path, pred_path, cache_dir, threshold_at, out):
    """Export attention case bundles for true positives at an operating
    point."""
    from .model import load_checkpoint
    from .volume import read_stack_cache

    model, ckpt_manifest = load_checkpoint(checkpoint)
    pset = predictions.read_predictions(pred_path)
    curve = metrics.roc_curve(pset.scores(), pset.labels(), pset.exam_ids())
    op = metrics.operating_point(curve, threshold_at)
    tp_ids = explain_mod.select_true_positives(pset, op.threshold)
    by_exam = {r.exam_id: r for r in pset.rows}
    for eid in tp_ids:
        stack = read_stack_cache(cache_dir, eid, sequences=ckpt_manifest["channel_map"])
        bundle = model.attention_bundle(stack)
        explain_mod.render_overlay(
            stack, bundle, out, eid,
            score=by_exam[eid].score, label=by_exam[eid].label,
            model_hash=ckpt_manifest.get("encoder_hash", ""),
        )
    click.echo(f"rendered {len(tp_ids)} true-positive case bundles to {out} "
               f"(threshold {op.threshold:.4f})")


@main.command()
@click.option("--bundles", type=click.Path(exists=True), required=True)
@click.option("--ratings", type=click.Path(), required=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--static-dir", type=click.Path(), default=None,
              help="built review app to serve at /")
def review(bundles, ratings, port, static_dir):
    """Serve the rating workflow (API + optional UI)."""
    from .review_service import serve

    serve(bundles, ratings, port=port, static_dir=static_dir)


if __name__ == "__main__":
    main()
