"""Command-line interface: dataset synthesis, training, inference, void
queries, calibration reports, detection evaluation, and self-checks.

Every command is a pure function of its flags, input files, and seed; all
randomness flows from --seed, and outputs echo the resolved configuration
plus RNG metadata.  Exit codes: 0 success, 2 validation error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import calibrate as cal
from . import evaluate as ev
from . import infer as inf
from . import marked, marks, network, pointprocess as pp, report, synth
from .train import TrainConfig, train as train_model
from .core import (
    FormatError,
    Grid,
    NumericError,
    RngStream,
    ShapeError,
    TestRegion,
    ValidationError,
    read_grid,
    write_grid,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


def _resolve_threads(value: int | None) -> int:
    if value is not None and value > 0:
        return value
    env = os.environ.get("CMPPP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ValidationError(f"CMPPP_THREADS={env!r} is not an integer") from exc
    return os.cpu_count() or 1


def _parse_region(text: str) -> TestRegion:
    parts = text.split(",")
    if len(parts) != 4:
        raise ValidationError("--region expects cx,cy,rw,rh")
    try:
        cx, cy, rw, rh = (float(p) for p in parts)
    except ValueError as exc:
        raise ValidationError(f"--region has a non-numeric field: {text!r}") from exc
    return TestRegion(cx=cx, cy=cy, rw=rw, rh=rh)


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON: {exc}") from exc


def _write_json(doc: dict, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=1), encoding="utf-8")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec_fields = _load_json(args.spec) if args.spec else {}
    if args.seed is not None:
        spec_fields["seed"] = args.seed
    spec = synth.SceneSpec.from_dict(spec_fields)
    manifest = synth.generate_dataset(spec, args.n, args.out)
    print(json.dumps({"spec": spec.to_dict(), "rng": manifest["rng"], "n_images": args.n}))
    print(f"wrote {args.n} images to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    fields = _load_json(args.config) if args.config else {}
    if args.data:
        fields["data"] = args.data
    if args.seed is not None:
        fields["seed"] = args.seed
    fields["threads"] = _resolve_threads(args.threads)
    config = TrainConfig.from_dict(fields)
    out = Path(args.out)
    result = train_model(config, out_dir=out)
    report.save_training_curves(result.log, out / "training_loss.png")
    print(json.dumps({"config": config.to_dict(), "sigma": result.checkpoint.sigma}))
    print(f"checkpoint: {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = network.load_checkpoint(args.ckpt)
    dataset = synth.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    members = [network.load_checkpoint(p) for p in args.ensemble] if args.ensemble else []

    lines = []
    for item in dataset:
        grid = item.input()
        if members:
            all_ckpts = [ckpt, *members]
            fields, maps_list = [], []
            for member in all_ckpts:
                f, m = network.forward(member.params, grid)
                fields.append(f)
                maps_list.append(m)
            field_, maps, std = inf.ensemble(fields, maps_list)
            write_grid(std, out / f"{item.image_id}.intensity_std.grid")
            dets, _ = inf.detect_from_maps(field_, maps, args.crop)
        else:
            dets = inf.detect(ckpt, grid, args.crop)
        for det in dets:
            lines.append(json.dumps({"image_id": item.image_id, **det.to_dict()}))

    path = out / "detections.jsonl"
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    _write_json(
        {
            "config": {"ckpt": args.ckpt, "crop_px": args.crop, "ensemble": list(args.ensemble or [])},
            "rng": {"algorithm_id": ckpt.rng_algorithm, "seed": ckpt.rng_seed},
            "n_images": len(dataset),
            "n_detections": len(lines),
        },
        out / "infer_summary.json",
    )
    print(f"{len(lines)} detections -> {path}")
    return EXIT_OK


def cmd_void(args) -> int:
    ckpt = network.load_checkpoint(args.ckpt)
    grid = read_grid(args.image)
    region = _parse_region(args.region) if args.region else None
    field_, maps = network.forward(ckpt.params, grid)
    model = ckpt.residual_model()

    if args.mode == "center":
        if region is None:
            raise ValidationError("--region is required for mode=center")
        prob = pp.center_void_probability(field_, region)
    elif args.mode == "box":
        if region is None:
            raise ValidationError("--region is required for mode=box")
        prob = marked.box_void_probability(field_, maps, model, region)
    else:
        if not args.mask:
            raise ValidationError("--mask is required for mode=mask")
        mask = read_grid(args.mask)
        prob = marked.void_probability_general(field_, maps, model, mask)

    doc = {
        "probability": prob,
        "mode": args.mode,
        "region": region.to_dict() if region else None,
        "mask": args.mask or None,
        "config": {"ckpt": args.ckpt, "image": args.image, "sigma": ckpt.sigma,
                   "residual_kind": ckpt.residual_kind},
        "rng": {"algorithm_id": ckpt.rng_algorithm, "seed": ckpt.rng_seed},
    }
    print(f"{prob:.6f}")
    if args.out:
        _write_json(doc, Path(args.out))
    else:
        print(json.dumps(doc))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    dataset = synth.load_dataset(args.data)
    source = "true" if args.source == "true" else network.load_checkpoint(args.source)
    stream = RngStream(args.seed if args.seed is not None else 0)
    threads = _resolve_threads(args.threads)

    records = cal.collect_records(
        dataset,
        source,
        mode=args.mode,
        area_frac=args.area,
        boxes_per_image=args.boxes,
        stream=stream,
        threads=threads,
    )
    h0 = dataset.items[0].input().h_px
    w0 = dataset.items[0].input().w_px
    meta = {
        "mode": args.mode,
        "area_fraction": args.area,
        "area_pixels": args.area * h0 * w0,
        "boxes_per_image": args.boxes,
        "source": args.source,
        "rng": stream.metadata(),
    }
    rep = cal.reliability_report(records, n_bins=args.bins, meta=meta)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = rep.to_dict()
    if args.recalibrate != "none":
        result = cal.recalibrate_records(records, args.recalibrate, args.fit_frac, stream)
        doc["recalibration"] = {
            "method": result["method"],
            "params": result["params"],
            "ece_before": result["before"].ece,
            "ece_after": result["after"].ece,
        }
        report.save_reliability_diagram(
            result["after"], out / "reliability_recalibrated.png",
            title=f"recalibrated ({args.recalibrate}) ECE = {result['after'].ece:.4f}",
        )
    _write_json(doc, out / "reliability.json")
    import csv as _csv

    with open(out / "reliability.csv", "w", newline="") as fh:
        _csv.writer(fh).writerows(rep.csv_rows())
    report.save_reliability_diagram(rep, out / "reliability.png")

    if args.heatmaps > 0:
        for item in dataset.items[: args.heatmaps]:
            field_, _ = cal._resolve_fields(source, item)
            report.write_pgm(field_.lam, out / f"{item.image_id}.intensity.pgm")

    print(f"ece {rep.ece:.6f} ({len(records)} records) -> {out / 'reliability.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = network.load_checkpoint(args.ckpt)
    dataset = synth.load_dataset(args.data)
    threads = _resolve_threads(args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    summary = ev.evaluate_dataset(
        ckpt, dataset, crop_px=args.crop, iou_threshold=args.iou, multi_iou=args.multi_iou,
        threads=threads,
    )
    doc = {
        "config": {"ckpt": args.ckpt, "crop_px": args.crop, "iou": args.iou,
                   "multi_iou": args.multi_iou},
        "rng": {"algorithm_id": ckpt.rng_algorithm, "seed": ckpt.rng_seed},
        "summary": summary.to_dict(),
    }

    import csv as _csv

    with open(out / "ap_table.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["class_id", "ap", "n_gt_classes_total"])
        for k, v in sorted(summary.ap_per_class.items()):
            writer.writerow([k, repr(v), len(summary.ap_per_class)])
        writer.writerow(["mean", repr(summary.mean_ap), len(summary.ap_per_class)])

    if args.ablate:
        crops = [int(c) for c in args.ablate.split(",")]
        rows = ev.crop_ablation(ckpt, dataset, crops, iou_threshold=args.iou, threads=threads)
        with open(out / "ablation.csv", "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["crop_px", "fp_count", "mean_ap"])
            for row in rows:
                writer.writerow([row.crop_px, row.fp_count, repr(row.mean_ap)])
        report.save_ablation_curve(rows, out / "ablation.png")
        doc["ablation"] = [
            {"crop_px": r.crop_px, "fp_count": r.fp_count, "mean_ap": r.mean_ap} for r in rows
        ]

    _write_json(doc, out / "eval_summary.json")
    print(f"mAP@{args.iou} = {summary.mean_ap:.4f}, FP = {summary.fp_count} -> {out / 'eval_summary.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Self-check suite
# ---------------------------------------------------------------------------


def _segment_sums(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    csum = np.concatenate([[0.0], np.cumsum(values)])
    return csum[offsets[1:]] - csum[offsets[:-1]]


def _random_smooth_field(rng, h, w, lo=-1.0, hi=1.0):
    base = synth._bump_field(rng, h, w, 3, 5, 0.08, 0.3, -1.0, 1.0)
    span = base.max() - base.min()
    if span == 0:
        return np.full((h, w), lo)
    return lo + (base - base.min()) * (hi - lo) / span


def _check_sampler_law(seed: int):
    rng = RngStream(seed, 11).generator()
    field = pp.IntensityField.from_log_intensity(np.zeros((32, 32)))
    n = 20000
    offsets, _, _ = pp.sample_positions_batch(field, rng, n)
    counts = np.diff(offsets)
    p0_hat = float(np.mean(counts == 0))
    p0 = math.exp(-1.0)
    tol = 4.0 * math.sqrt(p0 * (1.0 - p0) / n)
    ok = abs(p0_hat - p0) <= tol
    return ok, f"P(N=0) = {p0_hat:.4f} vs {p0:.4f} (tol {tol:.4f})"


def _check_characteristic_function(seed: int):
    rng = RngStream(seed, 12).generator()
    field = pp.IntensityField.from_log_intensity(np.full((16, 16), math.log(2.0)))
    n = 20000
    offsets, _, _ = pp.sample_positions_batch(field, rng, n)
    counts = np.diff(offsets)
    tau = 1.0
    emp = np.exp(1j * tau * counts).mean()
    theo = np.exp(2.0 * (np.exp(1j * tau) - 1.0))
    tol = 5.0 / math.sqrt(n)
    ok = abs(emp - theo) <= tol
    return ok, f"|char fn gap| = {abs(emp - theo):.4f} (tol {tol:.4f})"


def _check_rn_identity(seed: int):
    rng = RngStream(seed, 13).generator()
    h = w = 24
    log_l = _random_smooth_field(rng, h, w, -1.0, 0.6)
    field = pp.IntensityField.from_log_intensity(log_l)
    reference = pp.IntensityField.from_log_intensity(np.zeros((h, w)))
    n = 20000
    offsets, xs, ys = pp.sample_positions_batch(reference, rng, n)
    from .core import pixels_of

    if xs.size:
        ii, jj = pixels_of(xs, ys, h, w)
        point_terms = _segment_sums(field.log_values[ii, jj], offsets)
    else:
        point_terms = np.zeros(n)
    log_rn = -(field.total_mass - 1.0) + point_terms
    mean = float(np.exp(log_rn).mean())
    ok = abs(mean - 1.0) <= 0.03
    return ok, f"E[relative density] = {mean:.4f} (mass {field.total_mass:.3f})"


def _check_nll_gradient(seed: int):
    rng = RngStream(seed, 14).generator()
    h = w = 8
    log_l = rng.normal(0.0, 0.5, (h, w))
    b = rng.normal(0.12, 0.04, (h, w, 2))
    c = rng.normal(0.0, 1.0, (h, w, 3))
    gt = synth.MarkedPointConfig(
        image_id="check",
        points=tuple(
            synth.MarkedPoint(x=float(rng.random()), y=float(rng.random()),
                              w=float(rng.uniform(0, 0.3)), h=float(rng.uniform(0, 0.3)),
                              class_id=int(rng.integers(0, 3)))
            for _ in range(3)
        ),
    )
    model = marks.ResidualModel(kind="laplace", sigma=0.1)

    def loss(lv, bv, cv):
        field = pp.IntensityField.from_log_intensity(lv)
        mm = marks.MarkMaps(b=Grid.from_values(bv), c=Grid.from_values(cv))
        return marked.nll(field, mm, model, gt).total

    field = pp.IntensityField.from_log_intensity(log_l)
    mm = marks.MarkMaps(b=Grid.from_values(b), c=Grid.from_values(c))
    d_log, d_b, d_c = marked.nll_grad(field, mm, model, gt)
    eps = 1e-6
    worst = 0.0
    for _ in range(40):
        which = rng.integers(0, 3)
        if which == 0:
            i, j = rng.integers(0, h), rng.integers(0, w)
            lp, lm = log_l.copy(), log_l.copy()
            lp[i, j] += eps
            lm[i, j] -= eps
            fd = (loss(lp, b, c) - loss(lm, b, c)) / (2 * eps)
            an = d_log[i, j]
        elif which == 1:
            i, j, k = rng.integers(0, h), rng.integers(0, w), rng.integers(0, 2)
            bp, bm = b.copy(), b.copy()
            bp[i, j, k] += eps
            bm[i, j, k] -= eps
            fd = (loss(log_l, bp, c) - loss(log_l, bm, c)) / (2 * eps)
            an = d_b[i, j, k]
        else:
            i, j, k = rng.integers(0, h), rng.integers(0, w), rng.integers(0, 3)
            cp, cm = c.copy(), c.copy()
            cp[i, j, k] += eps
            cm[i, j, k] -= eps
            fd = (loss(log_l, b, cp) - loss(log_l, b, cm)) / (2 * eps)
            an = d_c[i, j, k]
        worst = max(worst, abs(fd - an) / max(1.0, abs(fd), abs(an)))
    ok = worst <= 1e-5
    return ok, f"max relative gradient error = {worst:.2e}"


def _check_chain_gradient(seed: int):
    rng = RngStream(seed, 15).generator()
    params = network.init(rng, num_classes=2, mean_count=2.0, hidden=4)
    grid = Grid.from_values(rng.random((6, 6, 3)))
    gt = synth.MarkedPointConfig(
        image_id="check",
        points=(synth.MarkedPoint(0.3, 0.4, 0.2, 0.15, 1), synth.MarkedPoint(0.8, 0.7, 0.1, 0.1, 0)),
    )
    model = marks.ResidualModel(kind="laplace", sigma=1.0)

    def loss_and_signs(flat):
        p = network.ConvNetParams(params.arch, flat)
        field, maps, cache = network.forward_with_cache(p, grid)
        signs = [z > 0 for _, z in cache[:-1]]
        return marked.nll(field, maps, model, gt).total, signs

    field, maps, cache = network.forward_with_cache(params, grid)
    d_log, d_b, d_c = marked.nll_grad(field, maps, model, gt)
    analytic = network.grad_from_cache(params, cache, d_log, d_b, d_c)
    eps = 1e-5
    worst = 0.0
    for k in rng.choice(params.flat.size, size=60, replace=False):
        fp, fm = params.flat.copy(), params.flat.copy()
        fp[k] += eps
        fm[k] -= eps
        up, s_up = loss_and_signs(fp)
        dn, s_dn = loss_and_signs(fm)
        if any(not np.array_equal(a, b) for a, b in zip(s_up, s_dn)):
            continue  # central difference invalid across a ReLU kink
        fd = (up - dn) / (2 * eps)
        worst = max(worst, abs(fd - analytic[k]) / max(1.0, abs(fd), abs(analytic[k])))
    ok = worst <= 1e-4
    return ok, f"max relative chain gradient error = {worst:.2e}"


def _random_check_scene(rng, h=48, w=48):
    log_l = _random_smooth_field(rng, h, w, -2.0, 1.0)
    log_l += math.log(2.0) - math.log(np.exp(log_l).mean())
    field = pp.IntensityField.from_log_intensity(log_l)
    bw = _random_smooth_field(rng, h, w, 0.10, 0.22)
    bh = _random_smooth_field(rng, h, w, 0.10, 0.22)
    maps = marks.MarkMaps(
        b=Grid.from_values(np.stack([bw, bh], axis=2)),
        c=Grid.from_values(rng.normal(0, 1, (h, w, 2))),
    )
    model = marks.ResidualModel(kind="laplace", sigma=float(rng.uniform(0.015, 0.03)))
    region = TestRegion(cx=float(rng.uniform(0.3, 0.7)), cy=float(rng.uniform(0.3, 0.7)),
                        rw=float(rng.uniform(0.1, 0.25)), rh=float(rng.uniform(0.1, 0.25)))
    return field, maps, model, region


def _mc_void_frequencies(field, maps, model, region, rng, n_samples):
    offsets, xs, ys = pp.sample_positions_batch(field, rng, n_samples)
    if xs.size == 0:
        return 1.0, 1.0
    from .core import pixels_of

    ii, jj = pixels_of(xs, ys, field.h_px, field.w_px)
    # predicates use pixel centers, the membership rule of the discretized model
    xs = (jj + 0.5) / field.w_px
    ys = (ii + 0.5) / field.h_px
    ws, hs = marks.sample_sizes_batch(model, maps.widths[ii, jj], maps.heights[ii, jj], rng)
    center_in = (
        (xs >= region.x_lo) & (xs <= region.x_hi) & (ys >= region.y_lo) & (ys <= region.y_hi)
    )
    hit = (
        (ws >= 0)
        & (hs >= 0)
        & (np.abs(region.cx - xs) <= (region.rw + ws) / 2.0)
        & (np.abs(region.cy - ys) <= (region.rh + hs) / 2.0)
    ) | center_in
    center_free = _segment_sums(center_in.astype(np.float64), offsets) == 0
    box_free = _segment_sums(hit.astype(np.float64), offsets) == 0
    return float(center_free.mean()), float(box_free.mean())


def _check_void_mc(seed: int):
    stream = RngStream(seed, 16)
    n_samples = 4000
    worst = 0.0
    for trial in range(3):
        rng = stream.substream(trial).generator()
        field, maps, model, region = _random_check_scene(rng)
        p_center = pp.center_void_probability(field, region)
        p_box = marked.box_void_probability(field, maps, model, region)
        f_center, f_box = _mc_void_frequencies(field, maps, model, region, rng, n_samples)
        for p, f in ((p_center, f_center), (p_box, f_box)):
            se = math.sqrt(max(p * (1 - p), 1e-9) / n_samples)
            worst = max(worst, abs(p - f) / (4 * se + 5e-3))
    ok = worst <= 1.0
    return ok, f"worst normalized void gap = {worst:.2f} (<= 1 passes)"


def _check_mask_cross(seed: int):
    rng = RngStream(seed, 17).generator()
    h = w = 32
    field = pp.IntensityField.from_log_intensity(_random_smooth_field(rng, h, w, -1.5, 1.0))
    maps = marks.MarkMaps(
        b=Grid.from_values(rng.uniform(0.08, 0.2, (h, w, 2))),
        c=Grid.from_values(rng.normal(0, 1, (h, w, 2))),
    )
    model = marks.ResidualModel(kind="laplace", sigma=0.05)
    region = TestRegion(cx=0.5, cy=0.5, rw=0.25, rh=0.375)
    mask = Grid.from_values(pp.region_pixel_mask(region, h, w).astype(np.float64))
    a = marked.box_void_probability(field, maps, model, region)
    b = marked.void_probability_general(field, maps, model, mask)
    ok = abs(a - b) <= 1e-12
    return ok, f"|rect mask - box formula| = {abs(a - b):.2e}"


def _check_sigma_grid(seed: int):
    rng = RngStream(seed, 18).generator()
    residuals = rng.laplace(0.0, 0.08, (40, 2))
    sigma = marked.estimate_sigma(residuals, "laplace")
    s_abs = float(np.abs(residuals).sum())
    n = residuals.shape[0]

    def reg_nll(s):
        return 2 * n * math.log(2 * s) + s_abs / s

    best = reg_nll(sigma)
    ok = all(reg_nll(sigma * 2.0**k) >= best for k in range(-3, 4))
    return ok, f"sigma = {sigma:.4f} beats its 7-point grid"


def _check_area_doubling(seed: int):
    grid = Grid.from_values(np.full((16, 16), 0.5))
    r1 = TestRegion(cx=0.25, cy=0.25, rw=0.25, rh=0.25)  # 4x4 pixels
    r2 = TestRegion(cx=0.25, cy=0.5, rw=0.25, rh=0.5)  # 4x8 pixels
    p1 = cal.baseline_product_void(grid, r1)
    p2 = cal.baseline_product_void(grid, r2)
    ok = p2 == p1 * p1
    return ok, f"p(2A) = {p2:.3e}, p(A)^2 = {p1 * p1:.3e}"


def _check_peak_separation(seed: int):
    rng = RngStream(seed, 19).generator()
    field = pp.IntensityField.from_log_intensity(rng.normal(2.0, 1.0, (32, 32)))
    for crop in (5, 8):
        peaks = inf.extract_peaks(field, crop).peaks
        sep = math.ceil(crop / 2)
        for a in range(len(peaks)):
            for b in range(a + 1, len(peaks)):
                cheb = max(abs(peaks[a][0] - peaks[b][0]), abs(peaks[a][1] - peaks[b][1]))
                if cheb < sep:
                    return False, f"peaks {peaks[a]} and {peaks[b]} too close for crop {crop}"
    return True, "pairwise Chebyshev separation >= ceil(crop/2)"


CHECKS = (
    ("poisson-sampler-law", _check_sampler_law),
    ("characteristic-function", _check_characteristic_function),
    ("relative-density-identity", _check_rn_identity),
    ("nll-gradient-fd", _check_nll_gradient),
    ("full-chain-gradient-fd", _check_chain_gradient),
    ("void-probability-mc", _check_void_mc),
    ("mask-vs-rectangle", _check_mask_cross),
    ("sigma-grid-optimality", _check_sigma_grid),
    ("product-area-doubling", _check_area_doubling),
    ("peak-separation", _check_peak_separation),
)


def cmd_check(args) -> int:
    seed = args.seed if args.seed is not None else 0
    failures = 0
    for name, fn in CHECKS:
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # a crash in a check is a failure, not an abort
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        status = "PASS" if ok else "FAIL"
        print(f"{status}  {name}: {detail}")
        failures += 0 if ok else 1
    print(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmppp",
        description="Spatial point process object detection toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: CMPPP_THREADS or all cores)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="scene spec JSON file")
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--out", required=True, help="output directory")
    add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train the detection model")
    p.add_argument("--config", help="training config JSON file")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run detection inference")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--crop", type=int, default=32, help="suppression crop size in pixels")
    p.add_argument("--ensemble", nargs="*", help="additional member checkpoints")
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("void", help="void probability for one region")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="input grid file")
    p.add_argument("--region", help="cx,cy,rw,rh in normalized coordinates")
    p.add_argument("--mode", choices=("center", "box", "mask"), default="center")
    p.add_argument("--mask", help="0/1 mask grid file for mode=mask")
    p.add_argument("--out", help="write the JSON result here instead of stdout")
    add_common(p)
    p.set_defaults(fn=cmd_void)

    p = sub.add_parser("calibrate", help="calibration protocol and reliability report")
    p.add_argument("--source", required=True, help="checkpoint path, or 'true' for the generative intensity")
    p.add_argument("--data", required=True)
    p.add_argument("--area", type=float, required=True, help="test box area as a fraction of the image")
    p.add_argument("--mode", choices=("center", "box"), default="center")
    p.add_argument("--boxes", type=int, default=50, help="test boxes per image")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--recalibrate", choices=("none", "temp", "platt"), default="none")
    p.add_argument("--fit-frac", type=float, default=0.2, dest="fit_frac")
    p.add_argument("--heatmaps", type=int, default=0, help="dump PGM intensity heatmaps for N images")
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("eval", help="detection quality evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--crop", type=int, default=32)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--multi-iou", action="store_true", dest="multi_iou",
                   help="average AP over IoU 0.50:0.05:0.95")
    p.add_argument("--ablate", help="comma-separated crop sizes for the ablation table")
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("check", help="run the built-in verification suites")
    add_common(p)
    p.set_defaults(fn=cmd_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValidationError, FormatError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
