//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the libtest
//! harness so the lines are always shown.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sftmn_core::backbones::ForwardCtx;
use sftmn_core::featureio::{generate_synthetic, SyntheticSpec, VideoSample};
use sftmn_core::graph::{Graph, Mat};
use sftmn_core::harness::{evaluate, load_checkpoint, save_checkpoint, train, TrainConfig};
use sftmn_core::metrics::{
    edit_score, f1_at_overlap, f1_avg, frame_scores, labels_to_segments, MeanStd, OVERLAPS,
};
use sftmn_core::objective::{smoothing_loss, stage_loss, total_loss_over, LossConfig};
use sftmn_core::slowfast::{
    fuse, segment_count, segment_pool, upsample_repeat, BackboneKind, Design, ForwardOptions,
    FusionWeights, PoolingMode, SfTmn, SfTmnConfig,
};

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

// ---------------------------------------------------------------- oracles

fn runs(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (t, &c) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(last) if last.0 == c => last.2 = t + 1,
            _ => out.push((c, t, t + 1)),
        }
    }
    out
}

fn lev_oracle(a: &[usize], b: &[usize], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let key = (a.len(), b.len());
    if let Some(&v) = memo.get(&key) {
        return v;
    }
    let cost = usize::from(a[a.len() - 1] != b[b.len() - 1]);
    let v = (lev_oracle(&a[..a.len() - 1], b, memo) + 1)
        .min(lev_oracle(a, &b[..b.len() - 1], memo) + 1)
        .min(lev_oracle(&a[..a.len() - 1], &b[..b.len() - 1], memo) + cost);
    memo.insert(key, v);
    v
}

fn edit_oracle(pred: &[usize], gt: &[usize]) -> f64 {
    let p: Vec<usize> = runs(pred).iter().map(|r| r.0).collect();
    let g: Vec<usize> = runs(gt).iter().map(|r| r.0).collect();
    let d = lev_oracle(&p, &g, &mut HashMap::new()) as f64;
    ((1.0 - d / p.len().max(g.len()) as f64) * 100.0).max(0.0)
}

/// IoU by counting frames of the two segments' index sets.
fn frame_iou(a: (usize, usize, usize), b: (usize, usize, usize)) -> f64 {
    let end = a.2.max(b.2);
    let (mut inter, mut union) = (0usize, 0usize);
    for t in 0..end {
        let ia = (a.1..a.2).contains(&t);
        let ib = (b.1..b.2).contains(&t);
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    inter as f64 / union as f64
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        100.0 * 2.0 * precision * recall / (precision + recall)
    }
}

/// Walks predicted segments in order; each takes the first same-class gt
/// segment of highest IoU and scores a hit if unused and IoU ≥ k.
fn f1_greedy_oracle(pred: &[usize], gt: &[usize], k: f64) -> f64 {
    let (p, g) = (runs(pred), runs(gt));
    let mut used = vec![false; g.len()];
    let mut tp = 0;
    for &ps in &p {
        let mut best: Option<(usize, f64)> = None;
        for (i, &gs) in g.iter().enumerate() {
            if gs.0 != ps.0 {
                continue;
            }
            let iou = frame_iou(ps, gs);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((i, iou));
            }
        }
        if let Some((i, iou)) = best {
            if iou >= k && !used[i] {
                used[i] = true;
                tp += 1;
            }
        }
    }
    f1_from_counts(tp, p.len() - tp, g.len() - tp)
}

/// Largest one-to-one same-class matching with IoU ≥ k, by exhaustive search.
fn f1_max_matching(pred: &[usize], gt: &[usize], k: f64) -> f64 {
    fn best(p: &[(usize, usize, usize)], g: &[(usize, usize, usize)], used: &mut Vec<bool>, k: f64) -> usize {
        let Some((&first, rest)) = p.split_first() else { return 0 };
        let mut top = best(rest, g, used, k);
        for i in 0..g.len() {
            if !used[i] && g[i].0 == first.0 && frame_iou(first, g[i]) >= k {
                used[i] = true;
                top = top.max(1 + best(rest, g, used, k));
                used[i] = false;
            }
        }
        top
    }
    let (p, g) = (runs(pred), runs(gt));
    let tp = best(&p, &g, &mut vec![false; g.len()], k);
    f1_from_counts(tp, p.len() - tp, g.len() - tp)
}

fn compare_pair(pred: &[usize], gt: &[usize], greedy_vs_max: &mut usize) -> Result<(), String> {
    let (ps, gs) = (labels_to_segments(pred).unwrap(), labels_to_segments(gt).unwrap());
    let e = edit_score(&ps, &gs);
    let eo = edit_oracle(pred, gt);
    check(e == eo, || format!("edit {e} vs oracle {eo} on {pred:?}/{gt:?}"))?;
    for k in OVERLAPS {
        let f = f1_at_overlap(&ps, &gs, k);
        let fo = f1_greedy_oracle(pred, gt, k);
        check(f == fo, || format!("F1@{k} {f} vs oracle {fo} on {pred:?}/{gt:?}"))?;
        if fo != f1_max_matching(pred, gt, k) {
            *greedy_vs_max += 1;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- criteria

fn metric_oracles() -> Outcome {
    let mut exhaustive = 0usize;
    let mut differ = 0usize;
    for len in 1..=6u32 {
        for a in 0..(1usize << len) {
            for b in 0..(1usize << len) {
                let seq = |bits: usize| (0..len).map(|i| (bits >> i) & 1).collect::<Vec<_>>();
                compare_pair(&seq(a), &seq(b), &mut differ)?;
                exhaustive += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for _ in 0..1000 {
        let len = rng.gen_range(1..=50);
        // runs rather than i.i.d. frames so segments are longer than one frame
        let mut draw = || {
            let mut v = Vec::with_capacity(len);
            while v.len() < len {
                let c = rng.gen_range(0..7);
                let n = rng.gen_range(1..=8).min(len - v.len());
                v.extend(std::iter::repeat(c).take(n));
            }
            v
        };
        let (p, g) = (draw(), draw());
        compare_pair(&p, &g, &mut differ)?;
    }
    Ok(format!(
        "{exhaustive} exhaustive + 1000 random pairs agree exactly; greedy differs from maximum matching in {differ} (pair, k) cases"
    ))
}

fn hand_fixtures() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 0.01;
    let fs = frame_scores(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
    check(
        close(fs.accuracy, 75.0) && close(fs.precision, 75.0) && close(fs.recall, 83.33) && close(fs.jaccard, 58.33),
        || format!("frame scores {fs:?}"),
    )?;
    let seg = |v: &[usize]| labels_to_segments(v).unwrap();
    let e = edit_score(&seg(&[0, 1, 2]), &seg(&[0, 2]));
    check(close(e, 66.67), || format!("edit {e}"))?;
    let gt: Vec<usize> = [0; 5].into_iter().chain([1; 5]).collect();
    let f = f1_at_overlap(&seg(&[0; 10]), &seg(&gt), 0.5);
    check(close(f, 66.67), || format!("F1@50 {f}"))?;
    let a = f1_avg(85.1, 83.4, 76.0);
    check(close(a, 81.5), || format!("F1_AVG {a}"))?;
    Ok(format!("frame {:.2}/{:.2}/{:.2}/{:.2}, edit {e:.2}, F1@50 {f:.2}, F1_AVG {a:.2}", fs.accuracy, fs.precision, fs.recall, fs.jaccard))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn log_softmax(z: &Mat) -> Mat {
    let mut out = z.clone();
    for mut col in out.columns_mut() {
        let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + col.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        col.mapv_inplace(|v| v - lse);
    }
    out
}

/// The training objective with every frame-(t−1) log-probability of the
/// smoothing term frozen at `frozen`. Its derivative at `z = frozen` is the
/// stop-gradient derivative the optimiser follows.
fn detached_objective(combined: &[Mat], frozen: &[Mat], labels: &[usize], cfg: &LossConfig) -> f64 {
    combined
        .iter()
        .zip(frozen)
        .map(|(z, z0)| {
            let (lp, lp0) = (log_softmax(z), log_softmax(z0));
            let (c, t) = lp.dim();
            let ce = labels.iter().enumerate().map(|(f, &l)| -lp[[l, f]]).sum::<f64>() / t as f64;
            let mut sm = 0.0;
            for k in 0..c {
                for f in 1..t {
                    sm += (lp[[k, f]] - lp0[[k, f - 1]]).powi(2).min(cfg.tau * cfg.tau);
                }
            }
            let pairs = (c * (t - 1)).max(1) as f64;
            ce + cfg.lambda * sm / pairs
        })
        .sum()
}

fn gradient_checks() -> Outcome {
    const H: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;

    // fuse weights
    let (slow, fast, seed) = (random_matrix(&mut rng, 3, 7), random_matrix(&mut rng, 3, 7), random_matrix(&mut rng, 3, 7));
    let (w1, w2) = (0.3, 0.8);
    let mut g = Graph::new();
    let (s, f) = (g.input(slow.clone()), g.input(fast.clone()));
    let (a, b) = (g.input(Mat::from_elem((1, 1), w1)), g.input(Mat::from_elem((1, 1), w2)));
    let (sa, fb) = (g.scale_by(s, a).unwrap(), g.scale_by(f, b).unwrap());
    let out = g.add(sa, fb).unwrap();
    let fused = fuse(&slow, &fast, FusionWeights { w1, w2 }).unwrap();
    check(g.value(out) == &fused, || "graph fusion differs from fuse()".into())?;
    let grads = g.backward_with(out, seed.clone());
    let obj = |w1: f64, w2: f64| (&fuse(&slow, &fast, FusionWeights { w1, w2 }).unwrap() * &seed).sum();
    let n1 = (obj(w1 + H, w2) - obj(w1 - H, w2)) / (2.0 * H);
    let n2 = (obj(w1, w2 + H) - obj(w1, w2 - H)) / (2.0 * H);
    let grads_fuse = (grads.var(a).unwrap()[[0, 0]], grads.var(b).unwrap()[[0, 0]]);
    worst = worst.max(rel_err(grads_fuse.0, n1)).max(rel_err(grads_fuse.1, n2));

    // total loss w.r.t. logits: 3 classes, 5 frames, several stages sharing labels.
    // With λ = 0 plain finite differences apply; otherwise the previous frame is frozen.
    let labels = [0usize, 2, 2, 1, 0];
    let stages: Vec<Mat> = (0..3).map(|_| random_matrix(&mut rng, 3, 5).mapv(|v| 3.0 * v)).collect();
    for cfg in [LossConfig { lambda: 0.0, ..LossConfig::default() }, LossConfig::default()] {
        let mut g = Graph::new();
        let vars: Vec<_> = stages.iter().map(|m| g.input(m.clone())).collect();
        let terms: Vec<_> = vars.iter().map(|&v| g.stage_loss(v, &labels, &cfg).unwrap()).collect();
        let total = g.sum(&terms).unwrap();
        let grads = g.backward(total);
        for (si, &v) in vars.iter().enumerate() {
            for r in 0..3 {
                for c in 0..5 {
                    let idx = (r, c);
                    let mut plus = stages.clone();
                    plus[si][idx] += H;
                    let mut minus = stages.clone();
                    minus[si][idx] -= H;
                    let num = if cfg.lambda == 0.0 {
                        (total_loss_over(&plus, &labels, &cfg).unwrap() - total_loss_over(&minus, &labels, &cfg).unwrap()) / (2.0 * H)
                    } else {
                        (detached_objective(&plus, &stages, &labels, &cfg) - detached_objective(&minus, &stages, &labels, &cfg)) / (2.0 * H)
                    };
                    let e = rel_err(grads.var(v).unwrap()[idx], num);
                    check(e < 1e-4, || format!("logits {si}{idx:?} λ={}: rel {e:.2e}", cfg.lambda))?;
                    worst = worst.max(e);
                }
            }
        }
    }
    let cfg = LossConfig::default();

    // tiny end-to-end model, design (a), both backbones
    let mut checked = 0usize;
    for backbone in [BackboneKind::Mstcn, BackboneKind::Asformer] {
        let cfg_m = SfTmnConfig {
            backbone,
            design: Design::A,
            layers: 2,
            feature_maps: 4,
            refinement_stages: 1,
            segment_length: 3,
            seed: 3,
            ..SfTmnConfig::reference(5, 3)
        };
        let mut model = SfTmn::new(cfg_m).unwrap();
        // move the fusion scalars off their symmetric init
        for id in model.params().ids().collect::<Vec<_>>() {
            let name = model.params().name(id).to_string();
            if name.starts_with("fusion") {
                let v = rng.gen_range(0.3..0.9);
                model.params_mut().get_mut(id).fill(v);
            }
        }
        let x = random_matrix(&mut rng, 5, 12);
        let labels: Vec<usize> = (0..12).map(|t| (t / 4) % 3).collect();
        let frozen = model.forward_values(&x).unwrap().combined;
        let loss_of = |m: &SfTmn| detached_objective(&m.forward_values(&x).unwrap().combined, &frozen, &labels, &cfg);

        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let vars = model.forward(&mut g, xv, &mut ForwardCtx::eval(), &ForwardOptions::default()).unwrap();
        let terms: Vec<_> = vars.combined.iter().map(|&c| g.stage_loss(c, &labels, &cfg).unwrap()).collect();
        let total = g.sum(&terms).unwrap();
        let reference = total_loss_over(&frozen, &labels, &cfg).unwrap();
        check((g.value(total)[[0, 0]] - reference).abs() < 1e-12, || "graph loss differs from total_loss".into())?;
        check((loss_of(&model) - reference).abs() < 1e-12, || "detached objective differs from total_loss at the base point".into())?;
        let grads = g.backward(total);

        let targets: Vec<_> = model
            .params()
            .iter()
            .filter(|(_, n, _)| n.starts_with("fusion") || n.contains("stage0.layer0.") || n.ends_with("stage0.conv_in.w"))
            .map(|(id, n, _)| (id, n.to_string()))
            .collect();
        for (id, name) in targets {
            let analytic = grads.param(id).cloned().unwrap_or_else(|| Mat::zeros(model.params().get(id).dim()));
            for idx in [(0usize, 0usize), (analytic.nrows() - 1, analytic.ncols() - 1)] {
                let orig = model.params().get(id)[idx];
                model.params_mut().get_mut(id)[idx] = orig + H;
                let lp = loss_of(&model);
                model.params_mut().get_mut(id)[idx] = orig - H;
                let lm = loss_of(&model);
                model.params_mut().get_mut(id)[idx] = orig;
                let num = (lp - lm) / (2.0 * H);
                let e = rel_err(analytic[idx], num);
                check(e < 1e-4, || format!("{backbone} {name}{idx:?}: analytic {} numeric {num} (rel {e:.2e})", analytic[idx]))?;
                worst = worst.max(e);
                checked += 1;
            }
        }
    }
    check(worst < 1e-4, || format!("worst relative error {worst:.2e}"))?;
    let fuse_err = rel_err(grads_fuse.0, n1).max(rel_err(grads_fuse.1, n2));
    check(fuse_err < 1e-4, || format!("fuse weights rel {fuse_err:.2e}"))?;
    Ok(format!("fuse weights, total loss (λ = 0 and default, t−1 term frozen) and {checked} model entries; worst relative error {worst:.2e}"))
}

fn shape_sweep() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut runs = 0;
    for backbone in [BackboneKind::Mstcn, BackboneKind::Asformer] {
        for len in [1usize, 4, 32] {
            for design in Design::ALL {
                let cfg = SfTmnConfig {
                    backbone,
                    design,
                    segment_length: len,
                    layers: 3,
                    feature_maps: 8,
                    refinement_stages: 3,
                    seed: 1,
                    ..SfTmnConfig::reference(6, 5)
                };
                let model = SfTmn::new(cfg).unwrap();
                let mut lengths = vec![1, len.saturating_sub(1), len, len + 1, 10 * len + 3];
                lengths.retain(|&t| t > 0);
                for t in lengths {
                    let out = model.forward_values(&random_matrix(&mut rng, 6, t)).map_err(|e| e.to_string())?;
                    check(out.combined.len() == 4, || format!("{backbone}/{design}/L={len}/T={t}: {} outputs", out.combined.len()))?;
                    for c in &out.combined {
                        check(c.dim() == (5, t), || format!("{backbone}/{design}/L={len}/T={t}: shape {:?}", c.dim()))?;
                        check(c.iter().all(|v| v.is_finite()), || "non-finite output".into())?;
                    }
                    runs += 1;
                }
            }
        }
    }
    Ok(format!("{runs} forward passes, N+1 = 4 outputs of shape C × T each (T = L-1 skipped when L = 1)"))
}

fn wiring() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let base = |design| SfTmnConfig {
        design,
        layers: 2,
        feature_maps: 6,
        refinement_stages: 2,
        segment_length: 4,
        seed: 9,
        ..SfTmnConfig::reference(5, 3)
    };
    let x = random_matrix(&mut rng, 5, 23);
    let labels: Vec<usize> = (0..23).map(|t| (t / 6) % 3).collect();
    let mut detail = Vec::new();

    for backbone in [BackboneKind::Mstcn, BackboneKind::Asformer] {
        // (a): final combined loss reaches the first fast stage
        let model = SfTmn::new(SfTmnConfig { backbone, ..base(Design::A) }).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let vars = model.forward(&mut g, xv, &mut ForwardCtx::eval(), &ForwardOptions::default()).unwrap();
        let last = *vars.combined.last().unwrap();
        let loss = g.stage_loss(last, &labels, &LossConfig::default()).unwrap();
        let grads = g.backward(loss);
        let fast0: Vec<_> = model.params().iter().filter(|(_, n, _)| n.starts_with("fast.stage0.")).map(|(id, _, _)| id).collect();
        let reached = fast0
            .iter()
            .filter(|&&id| grads.param(id).is_some_and(|g| g.iter().any(|v| *v != 0.0)))
            .count();
        check(reached == fast0.len(), || format!("{backbone} (a): {reached}/{} fast stage-1 tensors get gradient", fast0.len()))?;

        // (c): slow refinement inputs ignore the fast path; (a) does not
        for (design, expect_invariant) in [(Design::C, true), (Design::A, false)] {
            let model = SfTmn::new(SfTmnConfig { backbone, ..base(design) }).unwrap();
            let plain = model.forward_values(&x).unwrap();
            let zeroed = model
                .forward_values_with(&x, &ForwardOptions { zero_fast_stage: Some(0) })
                .unwrap();
            check(plain.combined[0] != zeroed.combined[0], || "zeroing the fast stage changed nothing".into())?;
            let invariant = plain.slow_inputs[1..] == zeroed.slow_inputs[1..];
            check(invariant == expect_invariant, || {
                format!("{backbone} ({design}): slow refinement inputs invariant = {invariant}")
            })?;
        }
        detail.push(format!("{backbone}: (a) {reached}/{} fast stage-1 tensors reached", fast0.len()));
    }
    Ok(format!("{}; (c) slow refinement inputs bitwise unchanged by zeroed fast stage-1", detail.join(", ")))
}

fn pooling_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let modes = [PoolingMode::Max, PoolingMode::Average, PoolingMode::PowerAverage { p: 3.0 }];
    for case in 0..200 {
        let d = rng.gen_range(1..5);
        let t = rng.gen_range(1..90);
        let len = rng.gen_range(2..12);
        let x = random_matrix(&mut rng, d, t);
        for mode in modes {
            let id = segment_pool(&x, 1, mode).unwrap();
            let expect = if matches!(mode, PoolingMode::PowerAverage { .. }) {
                // the power mean pools magnitudes
                x.mapv(f64::abs)
            } else {
                x.clone()
            };
            let ok = match mode {
                PoolingMode::PowerAverage { .. } => id.iter().zip(&expect).all(|(a, b)| (a - b).abs() <= 1e-12 * b.max(1.0)),
                _ => id == expect,
            };
            check(ok, || format!("case {case}: L=1 is not the identity for {mode:?}"))?;
        }
        let segs = segment_count(t, len);
        let pooled = segment_pool(&x, len, PoolingMode::Max).unwrap();
        let avg = segment_pool(&x, len, PoolingMode::Average).unwrap();
        check(pooled.dim() == (d, segs), || format!("case {case}: pooled shape {:?}", pooled.dim()))?;
        for r in 0..d {
            for s in 0..segs {
                let (lo, hi) = (s * len, ((s + 1) * len).min(t));
                let window = &x.row(r).to_vec()[lo..hi];
                let m = pooled[[r, s]];
                check(window.contains(&m) && window.iter().all(|&v| v <= m), || format!("case {case}: max membership"))?;
                let mean = window.iter().sum::<f64>() / window.len() as f64;
                check(avg[[r, s]] == mean, || format!("case {case}: window {s} mean {} vs {mean}", avg[[r, s]]))?;
            }
        }
        if t % len != 0 {
            check(t - (segs - 1) * len == t % len, || "partial window extent".into())?;
        }
        let up = upsample_repeat(&pooled, len, t).unwrap();
        check(up.dim() == (d, t), || format!("case {case}: upsample shape {:?}", up.dim()))?;
        check((0..t).all(|f| up.column(f) == pooled.column(f / len)), || "upsample content".into())?;
    }
    Ok("200 seeded inputs: identity, membership, partial window, upsample length all exact".into())
}

fn overfit_data() -> Vec<VideoSample> {
    generate_synthetic(&SyntheticSpec {
        num_videos: 5,
        num_classes: 4,
        feature_dim: 8,
        min_len: 80,
        max_len: 160,
        mean_segment: 25.0,
        noise: 0.0,
        separation: 3.0,
        seed: 5,
    })
    .unwrap()
    .0
}

fn overfit_config(epochs: usize) -> TrainConfig {
    let model = SfTmnConfig {
        design: Design::A,
        segment_length: 4,
        layers: 4,
        feature_maps: 16,
        refinement_stages: 2,
        seed: 2,
        ..SfTmnConfig::reference(8, 4)
    };
    TrainConfig {
        learning_rate: 5e-3,
        epochs,
        ..TrainConfig::reference(model)
    }
}

fn overfit() -> Outcome {
    let data = overfit_data();
    let trained = train(&overfit_config(200), &data).map_err(|e| e.to_string())?;
    let recs = &trained.log.records;
    let (first, last) = (&recs[0], recs.last().unwrap());
    let report = evaluate(&trained.model, &data).map_err(|e| e.to_string())?;
    let acc = report.aggregate.accuracy.mean;
    let frames: usize = data.iter().map(|v| v.labels.len()).sum();
    let correct: f64 = report.videos.iter().zip(&data).map(|(r, v)| r.frame.accuracy * v.labels.len() as f64 / 100.0).sum();
    let pooled_acc = 100.0 * correct / frames as f64;
    let edit = report.aggregate.edit.mean;
    check(recs.iter().all(|r| r.loss.is_finite()), || "non-finite epoch loss".into())?;
    check(last.loss < first.loss, || format!("loss {} → {}", first.loss, last.loss))?;
    check(pooled_acc >= 99.0, || format!("training frame accuracy {pooled_acc:.2}%"))?;
    check(edit >= 90.0, || format!("edit {edit:.2}"))?;
    Ok(format!(
        "200 epochs: loss {:.3} → {:.4}, frame accuracy {pooled_acc:.2}% (per-video mean {acc:.2}), edit {edit:.2}",
        first.loss, last.loss
    ))
}

fn determinism() -> Outcome {
    let data = overfit_data();
    let a = train(&overfit_config(10), &data).map_err(|e| e.to_string())?;
    let b = train(&overfit_config(10), &data).map_err(|e| e.to_string())?;
    check(a.log == b.log, || "train logs differ".into())?;
    let x = data[0].features.values();
    let fa = a.model.forward_values(x).unwrap();
    check(fa == b.model.forward_values(x).unwrap(), || "forward outputs differ".into())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&a.model, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let fb = back.forward_values(x).unwrap();
    let bitwise = fa
        .combined
        .iter()
        .flatten()
        .zip(fb.combined.iter().flatten())
        .all(|(p, q)| p.to_bits() == q.to_bits());
    check(bitwise, || "checkpoint forward is not bitwise identical".into())?;
    save_checkpoint(&back, &dir.path().join("again.ckpt")).map_err(|e| e.to_string())?;
    let same_file = std::fs::read(&path).unwrap() == std::fs::read(dir.path().join("again.ckpt")).unwrap();
    check(same_file, || "re-saved checkpoint bytes differ".into())?;
    Ok("identical logs and outputs across runs; checkpoint round trip bitwise".into())
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let logits = random_matrix(&mut rng, 5, 9).mapv(|v| 4.0 * v);
    let labels = [0usize, 1, 2, 3, 4, 4, 3, 2, 1];
    let cfg = LossConfig::default();
    let ce_only = stage_loss(&logits, &labels, &LossConfig { lambda: 0.0, ..cfg }).unwrap();
    let ce = sftmn_core::objective::classification_loss(&logits, &labels).unwrap();
    check((ce_only - ce).abs() <= 1e-9, || format!("λ=0: {ce_only} vs {ce}"))?;

    let column = random_matrix(&mut rng, 5, 1);
    let constant = Mat::from_shape_fn((5, 9), |(c, _)| column[[c, 0]]);
    let s = smoothing_loss(&constant, &cfg).unwrap();
    check(s.abs() <= 1e-9, || format!("constant logits smoothing {s}"))?;

    let single = stage_loss(&logits, &labels, &cfg).unwrap();
    for n in [1usize, 2, 4] {
        let total = total_loss_over(&vec![logits.clone(); n], &labels, &cfg).unwrap();
        check((total - n as f64 * single).abs() <= 1e-9, || format!("{n} stages: {total} vs {}", n as f64 * single))?;
    }

    // two classes, jumps of ±m in each class log-probability: contribution τ² when m ≥ τ
    for m in [4.0, 5.5, 12.0] {
        let z = |a: f64| [a, 0.0];
        let (p0, p1) = (z(0.0), z(2.0 * m));
        let two = Mat::from_shape_fn((2, 2), |(c, t)| if t == 0 { p0[c] } else { p1[c] });
        let logp = |col: [f64; 2]| {
            let lse = (col[0].exp() + col[1].exp()).ln();
            [col[0] - lse, col[1] - lse]
        };
        let (a, b) = (logp(p0), logp(p1));
        let jumps = [(b[0] - a[0]).abs(), (b[1] - a[1]).abs()];
        let expect = jumps.iter().map(|j| j.min(cfg.tau).powi(2)).sum::<f64>() / 2.0;
        let got = smoothing_loss(&two, &cfg).unwrap();
        check((got - expect).abs() <= 1e-9, || format!("jump {m}: {got} vs {expect}"))?;
        if jumps.iter().all(|&j| j >= cfg.tau) {
            check((got - cfg.tau * cfg.tau).abs() <= 1e-9, || format!("jump {m}: {got} ≠ τ²"))?;
        }
    }
    Ok(format!("λ=0, constant logits, N × single stage (N = 1, 2, 4) and τ² truncation within 1e-9"))
}

fn report_fidelity() -> Outcome {
    let (data, _) = generate_synthetic(&SyntheticSpec {
        num_videos: 12,
        num_classes: 5,
        feature_dim: 6,
        min_len: 40,
        max_len: 90,
        mean_segment: 12.0,
        noise: 1.0,
        separation: 1.5,
        seed: 61,
    })
    .unwrap();
    let model = SfTmn::new(SfTmnConfig {
        layers: 3,
        feature_maps: 8,
        refinement_stages: 1,
        segment_length: 4,
        ..SfTmnConfig::reference(6, 5)
    })
    .unwrap();
    let report = evaluate(&model, &data).map_err(|e| e.to_string())?;
    check(report == evaluate(&model, &data).unwrap(), || "evaluate is not repeatable".into())?;
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    for key in ["accuracy", "precision", "recall", "jaccard"] {
        let v = &json["aggregate"][key];
        check(v["mean"].is_number() && v["std"].is_number(), || format!("aggregate.{key} lacks mean/std"))?;
    }
    let mut worst = 0.0f64;
    for (col, agg) in report.aggregate.values().iter().enumerate() {
        let vals: Vec<f64> = report.videos.iter().map(|v| v.values()[col]).collect();
        let mut sum = 0.0;
        for v in &vals {
            sum += v;
        }
        let mean = sum / vals.len() as f64;
        let mut sq = 0.0;
        for v in &vals {
            sq += (v - mean).powi(2);
        }
        let std = (sq / vals.len() as f64).sqrt();
        worst = worst.max((agg.mean - mean).abs()).max((agg.std - std).abs());
    }
    check(worst <= 1e-9, || format!("aggregate deviates by {worst:e}"))?;
    let two = MeanStd::of(&[90.0, 100.0]).unwrap();
    check(two.mean == 95.0 && two.std == 5.0, || format!("{two:?}"))?;
    check(report.frame_table().contains(" ± "), || "frame table lacks mean ± std".into())?;
    Ok(format!("{} videos; aggregate within {worst:.1e} of recomputation", report.videos.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("metric oracle suite", metric_oracles),
        ("hand-computed fixtures", hand_fixtures),
        ("gradient checks", gradient_checks),
        ("shape/boundary sweep", shape_sweep),
        ("design-wiring connectivity", wiring),
        ("pooling identities", pooling_identities),
        ("overfit oracle", overfit),
        ("determinism", determinism),
        ("loss identities", loss_identities),
        ("report-format fidelity", report_fidelity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
