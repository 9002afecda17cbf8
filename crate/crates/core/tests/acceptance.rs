//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.
//!
//! Optional: set `UIE_CLIP_WEIGHTS` to a CLIP checkpoint to add the held-out
//! rank-correlation check of the prompt-learning criterion.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uie_core::backbone::{cosine_rows, BackboneConfig, BackboneHandle, Backbones, FeatureExtractor};
use uie_core::config::RunConfig;
use uie_core::enhancer::{enhance, Enhancer, ReferenceCnn, ReferenceCnnConfig};
use uie_core::losses::{
    classify_scores, composite_loss, contrastive_regularization, cr_from_distances, cr_tensor, hinge,
    total_loss, BatchTargets, CrConfig, CurriculumLog, CurriculumWeights, LossContext, LossWeights,
};
use uie_core::metrics::noref::uism;
use uie_core::metrics::{
    average_ranks, evaluate_dataset, plcc, psnr, score_image, srocc, ssim, uciqe, uiqm, MetricReport,
};
use uie_core::negatives::{NegativeBuilder, NegativeSet};
use uie_core::perception::{
    evaluate_perception_model, s_out_tensor, train_perception_model, MosSample, PerceptionModel, PerceptionScore,
    PromptPair, QaTrainConfig,
};
use uie_core::trainer::{train_enhancer, TrainOptions, TrainingPair, TrainingRunRecord};
use uie_core::{DType, ImageTensor, Parallelism};

type Outcome = Result<String, String>;

const ORACLE_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_ABS_FLOOR: f64 = 1e-8;
const FD_STEP: f64 = 1e-6;

/// The README sentence criterion 8 looks for.
const NON_REPRO_STATEMENT: &str = "Full-scale benchmark numbers are not reproduced by this repository's tests";

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fail<T>(msg: impl Into<String>) -> Result<T, String> {
    Err(msg.into())
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn vec1(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

// ---------- oracles: plain loops over plain numbers ----------

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Two-way softmax, first coordinate.
fn oracle_s_out(sp: f64, sn: f64, t: f64) -> f64 {
    let ep = (sp / t).exp();
    let en = (sn / t).exp();
    ep / (ep + en)
}

fn oracle_hinge(s_enh: f64, s_ref: f64, alpha: f64) -> f64 {
    let v = (1.0 - s_enh) - alpha * (1.0 - s_ref);
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn oracle_weight(s_anchor: f64, s_neg: f64, gamma: f64, flip: bool) -> f64 {
    let hard = if flip { s_neg > s_anchor } else { s_anchor > s_neg };
    if hard {
        1.0 + gamma
    } else {
        1.0 - gamma
    }
}

fn oracle_mean_abs(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

/// Ratio form over distances: `sum_i xi_i * pos_i / (sum_q w_q neg_qi + z * easy_i)`.
fn oracle_cr(pos: &[f64], negs: &[Vec<f64>], easy: &[f64], w: &[f64], xi: &[f64]) -> f64 {
    let z = negs.len() as f64;
    let mut total = 0.0;
    for i in 0..xi.len() {
        let mut den = z * easy[i];
        for q in 0..negs.len() {
            den += w[q] * negs[q][i];
        }
        total += xi[i] * pos[i] / den;
    }
    total
}

fn oracle_total(l1: f64, clip: f64, cr: f64, l1w: f64, l2w: f64) -> f64 {
    l1 + l1w * clip + l2w * cr
}

/// Anchor score from raw embeddings, bypassing the production scoring path.
fn oracle_image_score(model: &PerceptionModel, img: &ImageTensor) -> f64 {
    let t = img.to_tensor(DType::F64, &Device::Cpu).unwrap();
    let emb = vec1(&model.backbones.image.encode(&t).unwrap());
    let (tp, tn) = model.text_embeddings().unwrap();
    oracle_s_out(oracle_cosine(&emb, &vec1(&tp)), oracle_cosine(&emb, &vec1(&tn)), model.temperature)
}

/// Per-layer feature distances of `a` to `b`, both single images.
fn oracle_layer_distances(fx: &dyn FeatureExtractor, layers: &[usize], a: &ImageTensor, b: &ImageTensor) -> Vec<f64> {
    let fa = fx.extract(&a.to_tensor(DType::F64, &Device::Cpu).unwrap(), layers).unwrap();
    let fb = fx.extract(&b.to_tensor(DType::F64, &Device::Cpu).unwrap(), layers).unwrap();
    fa.iter().zip(&fb).map(|(x, y)| oracle_mean_abs(&vec1(x), &vec1(y))).collect()
}

fn stack(images: &[&ImageTensor]) -> Tensor {
    ImageTensor::stack(images, DType::F64, &Device::Cpu).unwrap()
}

// ---------- criterion 1 ----------

fn criterion_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let backbones = Backbones::stub(0, DType::F64).map_err(e2s)?;
    let model = PerceptionModel::new(backbones.clone()).map_err(e2s)?;
    let fx = backbones.features.as_ref();
    let instances = 1000;
    let mut worst: f64 = 0.0;
    let mut note = |label: &str, got: f64, want: f64| -> Result<(), String> {
        let err = (got - want).abs() / 1f64.max(got.abs()).max(want.abs());
        worst = worst.max(err);
        check(err <= ORACLE_TOL, || format!("{label}: production {got} vs oracle {want}"))
    };

    for n in 0..instances {
        // score from similarities, scalar and tensor forms
        let (sp, sn) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let t = rng.gen_range(0.05..2.0);
        let want = oracle_s_out(sp, sn, t);
        note("score", PerceptionScore::from_similarities(sp, sn, t).s_out, want)?;
        let st = s_out_tensor(
            &Tensor::new(&[sp], &Device::Cpu).unwrap(),
            &Tensor::new(&[sn], &Device::Cpu).unwrap(),
            t,
        )
        .map_err(e2s)?;
        note("score tensor", vec1(&st)[0], want)?;

        // hinge
        let (se, sr, alpha) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        note("hinge", hinge(se, sr, alpha), oracle_hinge(se, sr, alpha))?;

        // classification
        let gamma = rng.gen_range(0.0..0.5);
        let flip = rng.gen_bool(0.2);
        let anchor = rng.gen_range(0.0..1.0);
        let negs: Vec<f64> = (0..rng.gen_range(1..7))
            .map(|_| if rng.gen_bool(0.1) { anchor } else { rng.gen_range(0.0..1.0) })
            .collect();
        let cw = classify_scores(anchor, &negs, gamma, flip).map_err(e2s)?;
        for (q, &s) in negs.iter().enumerate() {
            note("curriculum weight", cw.per_negative[q], oracle_weight(anchor, s, gamma, flip))?;
        }
        note("easy weight", cw.easy_weight, negs.len() as f64)?;

        // regularizer over scalar distances
        let pos: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let easy: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
        let nd: Vec<Vec<f64>> = negs.iter().map(|_| (0..5).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let xi: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let got = cr_from_distances(&pos, &nd, &easy, &cw, &xi, None).map_err(e2s)?;
        note("cr distances", got, oracle_cr(&pos, &nd, &easy, &cw.per_negative, &xi))?;

        // total
        let w = LossWeights {
            lambda1: rng.gen_range(0.0..1.0),
            lambda2: rng.gen_range(0.0..1.0),
            alpha,
        };
        let (a, b, c) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..5.0));
        note("total", total_loss(a, b, c, &w), oracle_total(a, b, c, w.lambda1, w.lambda2))?;

        // batched composite loss on 8x8 images with stub features, every instance
        let z = 2;
        let bsz = 2;
        let img = |r: &mut ChaCha8Rng| common::random_image(r, 8, 8);
        let anchors: Vec<ImageTensor> = (0..bsz).map(|_| img(&mut rng)).collect();
        let refs: Vec<ImageTensor> = (0..bsz).map(|_| img(&mut rng)).collect();
        let inputs: Vec<ImageTensor> = (0..bsz).map(|_| img(&mut rng)).collect();
        let negatives: Vec<Vec<ImageTensor>> = (0..z).map(|_| (0..bsz).map(|_| img(&mut rng)).collect()).collect();
        let ref_scores: Vec<f64> = (0..bsz).map(|_| rng.gen_range(0.2..0.9)).collect();
        let neg_scores: Vec<Vec<f64>> = (0..bsz).map(|_| (0..z).map(|_| rng.gen_range(0.3..0.7)).collect()).collect();
        let cr_cfg = CrConfig {
            gamma,
            z,
            flip_comparison: flip,
            ..CrConfig::default()
        };
        let ctx = LossContext {
            perception: &model,
            features: fx,
            weights: w.clone(),
            cr: cr_cfg.clone(),
            enable_clip: true,
            enable_cr: true,
        };
        let anchor_t = stack(&anchors.iter().collect::<Vec<_>>());
        let ref_t = stack(&refs.iter().collect::<Vec<_>>());
        let in_t = stack(&inputs.iter().collect::<Vec<_>>());
        let neg_t: Vec<Tensor> = negatives.iter().map(|q| stack(&q.iter().collect::<Vec<_>>())).collect();
        let targets = BatchTargets {
            input: &in_t,
            reference: &ref_t,
            negatives: &neg_t,
            reference_scores: &ref_scores,
            negative_scores: &neg_scores,
        };
        let (_, report) = composite_loss(&anchor_t, &targets, &ctx, None).map_err(e2s)?;

        let (mut l1, mut clip, mut cr) = (0.0, 0.0, 0.0);
        let mut sample_weights: Vec<CurriculumWeights> = Vec::new();
        for k in 0..bsz {
            l1 += oracle_mean_abs(anchors[k].data(), refs[k].data()) / bsz as f64;
            let s = oracle_image_score(&model, &anchors[k]);
            clip += oracle_hinge(s, ref_scores[k], w.alpha) / bsz as f64;
            let wq: Vec<f64> = neg_scores[k].iter().map(|&sn| oracle_weight(s, sn, gamma, flip)).collect();
            let layers = &cr_cfg.layer_ids;
            let pos = oracle_layer_distances(fx, layers, &anchors[k], &refs[k]);
            let easy = oracle_layer_distances(fx, layers, &anchors[k], &inputs[k]);
            let nd: Vec<Vec<f64>> = (0..z)
                .map(|q| oracle_layer_distances(fx, layers, &anchors[k], &negatives[q][k]))
                .collect();
            let ratio = oracle_cr(&pos, &nd, &easy, &wq, &cr_cfg.xi);
            cr += ratio / bsz as f64;

            // single-image regularizer with the same weights
            let cw = classify_scores(s, &neg_scores[k], gamma, flip).map_err(e2s)?;
            let non_easy: Vec<ImageTensor> = (0..z).map(|q| negatives[q][k].clone()).collect();
            let single = contrastive_regularization(&anchors[k], &refs[k], &inputs[k], &non_easy, &cw, &cr_cfg, fx)
                .map_err(e2s)?;
            note("cr single image", single, ratio)?;
            sample_weights.push(cw);
        }
        note("composite l1", report.l1, l1)?;
        note("composite clip", report.l_clip, clip)?;
        note("composite cr", report.l_cr, cr)?;
        note("composite total", report.l_total, oracle_total(l1, clip, cr, w.lambda1, w.lambda2))?;
        let batched = cr_tensor(&anchor_t, &targets, &sample_weights, &cr_cfg, fx).map_err(e2s)?;
        note("cr tensor", vec1(&batched)[0], cr)?;
        if n == 0 {
            // guard against a vacuous comparison
            check(cr > 0.0 && clip >= 0.0 && l1 > 0.0, || "degenerate first instance".into())?;
        }
    }
    Ok(format!("{instances} random instances, worst relative error {worst:.2e}"))
}

// ---------- criterion 2 ----------

struct GradCheck {
    worst: f64,
    count: usize,
}

impl GradCheck {
    fn compare(&mut self, label: &str, analytic: f64, numeric: f64) -> Result<(), String> {
        let err = (analytic - numeric).abs();
        let bound = GRAD_REL_TOL * analytic.abs().max(numeric.abs()) + GRAD_ABS_FLOOR;
        self.count += 1;
        if analytic.abs().max(numeric.abs()) > 0.0 {
            self.worst = self.worst.max(err / analytic.abs().max(numeric.abs()));
        }
        check(err <= bound, || format!("{label}: analytic {analytic:e} vs finite difference {numeric:e}"))
    }
}

fn perturbed(t: &Tensor, idx: usize, delta: f64) -> Tensor {
    let mut v = vec1(t);
    v[idx] += delta;
    Tensor::from_vec(v, t.dims(), t.device()).unwrap()
}

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let backbones = Backbones::stub(0, DType::F64).map_err(e2s)?;
    let mut gc = GradCheck { worst: 0.0, count: 0 };

    // prompt loss with respect to the positive and negative prompt tokens
    let base = PerceptionModel::new(backbones.clone()).map_err(e2s)?;
    let samples: Vec<MosSample> = (0..5)
        .map(|_| MosSample::new(common::random_image(&mut rng, 8, 8), rng.gen_range(0.1..0.9)).unwrap())
        .collect();
    let images = stack(&samples.iter().map(|s| &s.image).collect::<Vec<_>>());
    let emb = backbones.image.encode(&images).map_err(e2s)?;
    let mos = Tensor::from_vec(samples.iter().map(|s| s.s_mos).collect::<Vec<_>>(), samples.len(), &Device::Cpu)
        .map_err(e2s)?;
    let pos = Var::from_tensor(&base.prompts.positive).map_err(e2s)?;
    let neg = Var::from_tensor(&base.prompts.negative).map_err(e2s)?;
    let tp = backbones.text.encode(pos.as_tensor()).map_err(e2s)?;
    let tn = backbones.text.encode(neg.as_tensor()).map_err(e2s)?;
    let s = s_out_tensor(&cosine_rows(&emb, &tp).map_err(e2s)?, &cosine_rows(&emb, &tn).map_err(e2s)?, 1.0)
        .map_err(e2s)?;
    let loss = (mos - s).and_then(|d| d.sqr()).and_then(|d| d.mean_all()).map_err(e2s)?;
    let analytic_loss = vec1(&loss)[0];
    check(close(analytic_loss, base.prompt_loss(&samples).map_err(e2s)?, 1e-9), || {
        "tensor prompt loss disagrees with prompt_loss".into()
    })?;
    let grads = loss.backward().map_err(e2s)?;
    for (which, var) in [("positive", &pos), ("negative", &neg)] {
        let g = vec1(grads.get(var.as_tensor()).ok_or("missing prompt gradient")?);
        for _ in 0..12 {
            let idx = rng.gen_range(0..g.len());
            let eval = |delta: f64| -> f64 {
                let t = perturbed(var.as_tensor(), idx, delta);
                let prompts = if which == "positive" {
                    PromptPair { positive: t, negative: base.prompts.negative.clone() }
                } else {
                    PromptPair { positive: base.prompts.positive.clone(), negative: t }
                };
                PerceptionModel::from_parts(backbones.clone(), prompts, 1.0)
                    .unwrap()
                    .prompt_loss(&samples)
                    .unwrap()
            };
            let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            gc.compare(&format!("{which} token {idx}"), g[idx], fd)?;
        }
    }

    // composite loss with respect to anchor pixels and enhancer parameters
    let model = base;
    let z = 2;
    let bsz = 2;
    let img = |r: &mut ChaCha8Rng| common::random_image(r, 8, 8);
    let inputs: Vec<ImageTensor> = (0..bsz).map(|_| img(&mut rng)).collect();
    let refs: Vec<ImageTensor> = (0..bsz).map(|_| img(&mut rng)).collect();
    let negs: Vec<Tensor> = (0..z)
        .map(|_| {
            let v: Vec<ImageTensor> = (0..bsz).map(|_| img(&mut rng)).collect();
            stack(&v.iter().collect::<Vec<_>>())
        })
        .collect();
    let in_t = stack(&inputs.iter().collect::<Vec<_>>());
    let ref_t = stack(&refs.iter().collect::<Vec<_>>());
    let ref_scores = vec![0.9, 0.95];
    let neg_scores = vec![vec![0.3, 0.7], vec![0.6, 0.2]];
    let targets = BatchTargets {
        input: &in_t,
        reference: &ref_t,
        negatives: &negs,
        reference_scores: &ref_scores,
        negative_scores: &neg_scores,
    };
    let ctx = LossContext {
        perception: &model,
        features: backbones.features.as_ref(),
        weights: LossWeights { lambda1: 0.5, lambda2: 0.5, alpha: 0.975 },
        cr: CrConfig { z, ..CrConfig::default() },
        enable_clip: true,
        enable_cr: true,
    };
    let loss_of = |anchor: &Tensor| -> f64 { composite_loss(anchor, &targets, &ctx, None).unwrap().1.l_total };

    let anchor_var = Var::from_tensor(&stack(&(0..bsz).map(|_| img(&mut rng)).collect::<Vec<_>>().iter().collect::<Vec<_>>()))
        .map_err(e2s)?;
    let (loss, report) = composite_loss(anchor_var.as_tensor(), &targets, &ctx, None).map_err(e2s)?;
    check(report.l_clip > 0.0 && report.l_cr > 0.0, || "gradient check needs every term active".into())?;
    let grads = loss.backward().map_err(e2s)?;
    let g = vec1(grads.get(anchor_var.as_tensor()).ok_or("missing anchor gradient")?);
    for _ in 0..24 {
        let idx = rng.gen_range(0..g.len());
        let a = anchor_var.as_tensor();
        let fd = (loss_of(&perturbed(a, idx, FD_STEP)) - loss_of(&perturbed(a, idx, -FD_STEP))) / (2.0 * FD_STEP);
        gc.compare(&format!("anchor pixel {idx}"), g[idx], fd)?;
    }

    let net = ReferenceCnn::new(ReferenceCnnConfig { width: 4, seed: 3 }, DType::F64, &Device::Cpu).map_err(e2s)?;
    for (name, var) in net.named_vars() {
        if name == "out.weight" {
            let dims = var.dims().to_vec();
            let n: usize = dims.iter().product();
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect();
            var.set(&Tensor::from_vec(w, dims, &Device::Cpu).map_err(e2s)?).map_err(e2s)?;
        }
    }
    let net_loss = || -> f64 { loss_of(&net.forward(&in_t).unwrap()) };
    let (loss, _) = composite_loss(&net.forward(&in_t).map_err(e2s)?, &targets, &ctx, None).map_err(e2s)?;
    let grads = loss.backward().map_err(e2s)?;
    for (name, var) in net.named_vars() {
        let g = vec1(grads.get(var.as_tensor()).ok_or_else(|| format!("missing gradient for {name}"))?);
        let original = var.as_tensor().copy().map_err(e2s)?;
        for _ in 0..3 {
            let idx = rng.gen_range(0..g.len());
            var.set(&perturbed(&original, idx, FD_STEP)).map_err(e2s)?;
            let up = net_loss();
            var.set(&perturbed(&original, idx, -FD_STEP)).map_err(e2s)?;
            let down = net_loss();
            var.set(&original).map_err(e2s)?;
            gc.compare(&format!("{name}[{idx}]"), g[idx], (up - down) / (2.0 * FD_STEP))?;
        }
    }
    Ok(format!("{} coordinates checked, worst relative error {:.2e}", gc.count, gc.worst))
}

// ---------- criterion 3 ----------

fn criterion_curriculum() -> Outcome {
    let negative = 0.5;
    let ramp = [0.40, 0.45, 0.49, 0.50, 0.51, 0.55, 0.60, 0.70];
    let mut log = CurriculumLog::default();
    for &s in &ramp {
        let w = classify_scores(s, &[negative], 0.25, false).map_err(e2s)?;
        log.record("ramp/dcp", w.per_negative[0]);
    }
    let first_strict = ramp.iter().position(|&s| s > negative).unwrap();
    let got = log.transitions("ramp/dcp");
    check(got == vec![(first_strict, 0.75, 1.25)], || {
        format!("expected one flip 0.75 -> 1.25 at step {first_strict}, got {got:?}")
    })?;
    check(log.history["ramp/dcp"][3] == 0.75, || "tie did not resolve to very-hard".into())?;
    Ok(format!("single flip 0.75 -> 1.25 at step {first_strict} of {}", ramp.len()))
}

// ---------- criteria 4 and 6: toy training ----------

struct ToyRun {
    record: TrainingRunRecord,
    net: ReferenceCnn,
}

fn toy_negatives(pairs: &[TrainingPair], methods: &[String]) -> Result<BTreeMap<String, NegativeSet>, String> {
    let specs = methods.iter().map(|m| m.parse()).collect::<Result<Vec<_>, _>>().map_err(e2s)?;
    let builder = NegativeBuilder::new(specs, None).map_err(e2s)?;
    let inputs: Vec<(String, ImageTensor)> = pairs.iter().map(|p| (p.id.clone(), p.input.clone())).collect();
    builder.build_all(&inputs, Parallelism::default()).map_err(e2s)
}

fn toy_run(
    cfg: &RunConfig,
    pairs: &[TrainingPair],
    negatives: &BTreeMap<String, NegativeSet>,
    model: &PerceptionModel,
) -> Result<ToyRun, String> {
    let net = ReferenceCnn::new(cfg.uie.enhancer.clone(), cfg.dtype(), &model.backbones.device).map_err(e2s)?;
    let empty = BTreeMap::new();
    let negs = if cfg.uie.needs_negatives() { negatives } else { &empty };
    let record = train_enhancer(pairs, negs, model, &net, &cfg.uie, TrainOptions::default()).map_err(e2s)?;
    Ok(ToyRun { record, net })
}

fn toy_config(extra_uie: &str) -> Result<RunConfig, String> {
    let raw = std::fs::read_to_string(workspace_root().join("configs/toy.toml")).map_err(e2s)?;
    let raw = raw.replacen("[uie]\n", &format!("[uie]\n{extra_uie}"), 1);
    RunConfig::from_toml_str(&raw).map_err(e2s)
}

fn mean_psnr(pairs: &[TrainingPair], net: Option<&ReferenceCnn>, dtype: DType) -> Result<f64, String> {
    let mut total = 0.0;
    for p in pairs {
        let out = match net {
            Some(n) => enhance(&p.input, n, dtype, &Device::Cpu).map_err(e2s)?,
            None => p.input.clone(),
        };
        total += psnr(&out, &p.reference).map_err(e2s)?;
    }
    Ok(total / pairs.len() as f64)
}

struct ToyFixture {
    pairs: Vec<TrainingPair>,
    negatives: BTreeMap<String, NegativeSet>,
    model: PerceptionModel,
    full: RunConfig,
}

fn toy_fixture() -> Result<ToyFixture, String> {
    let full = toy_config("")?;
    let pairs = common::toy_pairs(16, 32);
    let negatives = toy_negatives(&pairs, &full.negatives.methods)?;
    let backbones = Backbones::load(&full.backbone, full.dtype()).map_err(e2s)?;
    let model = PerceptionModel::new(backbones).map_err(e2s)?;
    Ok(ToyFixture { pairs, negatives, model, full })
}

fn criterion_toy_training(fx: &ToyFixture, out: &mut Option<ToyRun>) -> Outcome {
    let started = Instant::now();
    let run = toy_run(&fx.full, &fx.pairs, &fx.negatives, &fx.model)?;
    let elapsed = started.elapsed();
    let curve = run.record.loss_curve();
    let (first, last) = (curve[0], *curve.last().unwrap());
    let baseline = mean_psnr(&fx.pairs, None, fx.full.dtype())?;
    let trained = mean_psnr(&fx.pairs, Some(&run.net), fx.full.dtype())?;
    let summary = format!(
        "loss {first:.4} -> {last:.4} (ratio {:.3}), PSNR {baseline:.2} -> {trained:.2} dB, {:.0}s",
        last / first,
        elapsed.as_secs_f64()
    );
    *out = Some(run);
    check(last <= 0.5 * first, || format!("loss did not halve: {summary}"))?;
    check(trained >= baseline + 2.0, || format!("PSNR gain below 2 dB: {summary}"))?;
    check(elapsed < Duration::from_secs(600), || format!("too slow: {summary}"))?;
    Ok(summary)
}

/// Full objective of a trained network over the whole training set, so
/// models trained under different objectives are measured the same way.
fn full_objective(fx: &ToyFixture, net: &ReferenceCnn) -> Result<f64, String> {
    let cfg = &fx.full.uie;
    let dtype = fx.full.dtype();
    let dev = &fx.model.backbones.device;
    let inputs: Vec<&ImageTensor> = fx.pairs.iter().map(|p| &p.input).collect();
    let refs: Vec<&ImageTensor> = fx.pairs.iter().map(|p| &p.reference).collect();
    let in_t = ImageTensor::stack(&inputs, dtype, dev).map_err(e2s)?;
    let ref_t = ImageTensor::stack(&refs, dtype, dev).map_err(e2s)?;
    let sets: Vec<&NegativeSet> = fx.pairs.iter().map(|p| &fx.negatives[&p.id]).collect();
    let neg_t: Vec<Tensor> = (0..cfg.cr.z)
        .map(|q| ImageTensor::stack(&sets.iter().map(|s| &s.non_easy[q]).collect::<Vec<_>>(), dtype, dev))
        .collect::<Result<_, _>>()
        .map_err(e2s)?;
    let reference_scores: Vec<f64> =
        fx.model.score_batch(&refs).map_err(e2s)?.iter().map(|s| s.s_out).collect();
    let negative_scores: Vec<Vec<f64>> = sets
        .iter()
        .map(|s| {
            let imgs: Vec<&ImageTensor> = s.non_easy.iter().collect();
            fx.model.score_batch(&imgs).map(|v| v.iter().map(|x| x.s_out).collect())
        })
        .collect::<Result<_, _>>()
        .map_err(e2s)?;
    let targets = BatchTargets {
        input: &in_t,
        reference: &ref_t,
        negatives: &neg_t,
        reference_scores: &reference_scores,
        negative_scores: &negative_scores,
    };
    let ctx = LossContext {
        perception: &fx.model,
        features: fx.model.backbones.features.as_ref(),
        weights: cfg.loss.clone(),
        cr: cfg.cr.clone(),
        enable_clip: true,
        enable_cr: true,
    };
    let anchor = net.forward(&in_t).map_err(e2s)?.detach();
    Ok(composite_loss(&anchor, &targets, &ctx, None).map_err(e2s)?.1.l_total)
}

fn criterion_ablation(fx: &ToyFixture, full_run: Option<ToyRun>) -> Outcome {
    let variants = [
        ("l1", "enable_clip = false\nenable_cr = false\n"),
        ("clip", "enable_cr = false\n"),
        ("cr", "enable_clip = false\n"),
        ("both", ""),
    ];
    let dir = tempfile::tempdir().map_err(e2s)?;
    let mut finals = BTreeMap::new();
    let mut columns = Vec::new();
    let mut full_run = full_run;
    for (name, extra) in variants {
        let cfg = toy_config(extra)?;
        let run = match (name, full_run.take()) {
            ("both", Some(r)) => r,
            _ => toy_run(&cfg, &fx.pairs, &fx.negatives, &fx.model)?,
        };
        let rows = fx
            .pairs
            .iter()
            .map(|p| {
                let out = enhance(&p.input, &run.net, cfg.dtype(), &Device::Cpu)?;
                score_image(&p.id, &out, Some(&p.reference), Some(&fx.model))
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(e2s)?;
        let report = MetricReport::from_rows(rows);
        report.write(&dir.path().join(format!("{name}.csv"))).map_err(e2s)?;
        let csv = report.to_csv().map_err(e2s)?;
        columns.push(csv.lines().next().unwrap_or_default().to_string());
        let common = full_objective(fx, &run.net)?;
        finals.insert(name, (*run.record.loss_curve().last().unwrap(), report.summary.psnr.unwrap_or(f64::NAN), common));
    }
    check(columns.windows(2).all(|w| w[0] == w[1]), || format!("reports are not comparable: {columns:?}"))?;
    let (l1, ..) = finals["l1"];
    let (both, ..) = finals["both"];
    let detail: Vec<String> = finals
        .iter()
        .map(|(k, (l, p, c))| format!("{k}: L_total {l:.4} PSNR {p:.2} full-objective {c:.4}"))
        .collect();
    check(both <= 1.1 * l1, || format!("full loss {both} exceeds 1.1 x L1-only {l1}; {}", detail.join(", ")))?;
    Ok(detail.join(", "))
}

// ---------- criterion 5 ----------

/// Learning rate for the ladder run; the recipe's 0.002 is also reported.
const LADDER_LR: f64 = 0.02;

fn ladder_samples(ladder: Vec<(ImageTensor, f64)>) -> Vec<MosSample> {
    ladder.into_iter().map(|(i, m)| MosSample::new(i, m).unwrap()).collect()
}

fn ladder_ratio(samples: &[MosSample], backbones: &Backbones, lr: f64) -> Result<(f64, PerceptionModel), String> {
    let cfg = QaTrainConfig {
        iterations: 2000,
        lr,
        log_every: 500,
        ..QaTrainConfig::default()
    };
    let initial = PerceptionModel::new(backbones.clone()).map_err(e2s)?.prompt_loss(samples).map_err(e2s)?;
    let out = train_perception_model(samples, &cfg, backbones, Parallelism::default()).map_err(e2s)?;
    let fin = out.model.prompt_loss(samples).map_err(e2s)?;
    Ok((fin / initial, out.model))
}

fn criterion_prompt_learning() -> Outcome {
    let samples = ladder_samples(common::blur_ladder(6));
    let stub = Backbones::stub(0, DType::F64).map_err(e2s)?;
    let (ratio, _) = ladder_ratio(&samples, &stub, LADDER_LR)?;
    let (recipe_ratio, _) = ladder_ratio(&samples, &stub, QaTrainConfig::default().lr)?;
    let mut summary = format!(
        "stub loss ratio {ratio:.3} at lr {LADDER_LR} (recipe lr {}: {recipe_ratio:.3})",
        QaTrainConfig::default().lr
    );
    check(ratio <= 0.2, || format!("prompt loss fell by less than 80%: {summary}"))?;

    match std::env::var_os("UIE_CLIP_WEIGHTS") {
        Some(path) => {
            let config = BackboneConfig {
                clip: BackboneHandle::real(PathBuf::from(path)),
                ..BackboneConfig::default()
            };
            let real = Backbones::load(&config, DType::F32).map_err(e2s)?;
            let (_, model) = ladder_ratio(&samples, &real, QaTrainConfig::default().lr)?;
            let held_out =
                ladder_samples(common::blur_ladder_of(&common::ladder_base(64, [-0.1, 0.1, 0.2]), 6));
            let (_, rho) = evaluate_perception_model(&model, &held_out, Parallelism::default()).map_err(e2s)?;
            summary.push_str(&format!(", CLIP held-out SROCC {rho:.3}"));
            check(rho >= 0.6, || format!("held-out SROCC below 0.6: {summary}"))?;
        }
        None => summary.push_str(", CLIP check skipped (UIE_CLIP_WEIGHTS unset)"),
    }
    Ok(summary)
}

// ---------- criterion 7 ----------

fn criterion_metrics() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let black = ImageTensor::filled(16, 16, [0.0; 3]);
    let white = ImageTensor::filled(16, 16, [1.0; 3]);
    let grey = ImageTensor::filled(16, 16, [0.5; 3]);
    let p = |a: &ImageTensor, b: &ImageTensor| psnr(a, b).unwrap();
    check(p(&grey, &grey) == 100.0, || "identical PSNR is not the cap".into())?;
    check(p(&black, &white).abs() < 1e-12, || "black vs white PSNR is not 0 dB".into())?;
    check((p(&black, &grey) - 10.0 * 4f64.log10()).abs() < 1e-9, || "black vs grey PSNR".into())?;

    let x = common::random_image(&mut rng, 24, 24);
    let mut last = f64::INFINITY;
    for k in 1..8 {
        let amp = 0.02 * k as f64;
        let noisy = ImageTensor::from_fn(24, 24, |y, xx, c| x.get(y, xx, c) + if (y + xx + c) % 2 == 0 { amp } else { -amp });
        let v = p(&x, &noisy);
        check(v < last, || format!("PSNR not strictly decreasing at amplitude {amp}"))?;
        check((v - p(&noisy, &x)).abs() < 1e-12, || "PSNR not symmetric".into())?;
        last = v;
    }

    let y = common::random_image(&mut rng, 24, 24);
    let s = |a: &ImageTensor, b: &ImageTensor| ssim(a, b).unwrap();
    check((s(&x, &x) - 1.0).abs() < 1e-12, || "SSIM(x, x) != 1".into())?;
    check((s(&x, &y) - s(&y, &x)).abs() < 1e-9, || "SSIM not symmetric".into())?;
    let flat = ImageTensor::filled(16, 16, [0.2; 3]);
    let flat2 = ImageTensor::filled(16, 16, [0.7; 3]);
    check(s(&flat, &flat2) < 1.0, || "flat images SSIM not below 1".into())?;

    let a: Vec<f64> = (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let b: Vec<f64> = a.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
    let affine: Vec<f64> = a.iter().map(|v| 2.0 * v + 1.0).collect();
    check((plcc(&a, &affine).unwrap() - 1.0).abs() < 1e-12, || "plcc of affine copy".into())?;
    let r = plcc(&a, &b).unwrap();
    let scaled: Vec<f64> = b.iter().map(|v| 0.3 * v - 7.0).collect();
    check((plcc(&a, &scaled).unwrap() - r).abs() < 1e-12, || "plcc not affine invariant".into())?;
    let rho = srocc(&a, &b).unwrap();
    let mono: Vec<f64> = b.iter().map(|v| v.exp() + v.powi(3)).collect();
    check((srocc(&a, &mono).unwrap() - rho).abs() < 1e-12, || "srocc not monotone invariant".into())?;
    let mut sorted = a.clone();
    sorted.sort_by(f64::total_cmp);
    let reversed: Vec<f64> = sorted.iter().rev().copied().collect();
    check((srocc(&sorted, &reversed).unwrap() + 1.0).abs() < 1e-12, || "reversed srocc".into())?;
    check(
        (srocc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12,
        || "hand-computed srocc".into(),
    )?;
    check(
        (srocc(&a, &b).unwrap() - plcc(&average_ranks(&a), &average_ranks(&b)).unwrap()).abs() < 1e-12,
        || "srocc is not plcc of ranks".into(),
    )?;
    check(plcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err(), || "zero variance accepted".into())?;

    check(uciqe(&grey).abs() < 1e-9, || format!("UCIQE of grey is {}", uciqe(&grey)))?;
    let mut perm: Vec<usize> = (0..24 * 24).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let shuffled = ImageTensor::from_fn(24, 24, |yy, xx, c| {
        let src = perm[yy * 24 + xx];
        x.get(src / 24, src % 24, c)
    });
    check(close(uciqe(&x), uciqe(&shuffled), 1e-9), || "UCIQE not permutation invariant".into())?;
    check(uciqe(&x) == uciqe(&x) && uiqm(&x) == uiqm(&x), || "metrics not deterministic".into())?;
    let sharp = common::ladder_base(40, [0.1, 0.0, -0.1]);
    check(uism(&sharp) > uism(&common::box_blur(&sharp, 2)), || "blur did not lower UISM".into())?;
    check(uism(&ImageTensor::filled(20, 20, [0.3, 0.5, 0.7])) == 0.0, || "uniform UISM".into())?;

    let dir = tempfile::tempdir().map_err(e2s)?;
    let (enh, refs) = (dir.path().join("enh"), dir.path().join("ref"));
    std::fs::create_dir_all(&enh).map_err(e2s)?;
    std::fs::create_dir_all(&refs).map_err(e2s)?;
    let q = x.quantize_u8();
    q.save_png(enh.join("a.png")).map_err(e2s)?;
    q.save_png(refs.join("a.png")).map_err(e2s)?;
    y.quantize_u8().save_png(enh.join("b.png")).map_err(e2s)?;
    x.quantize_u8().save_png(refs.join("b.png")).map_err(e2s)?;
    let report = evaluate_dataset(&enh, Some(&refs), None, Parallelism::default()).map_err(e2s)?;
    check(report.rows.len() == 2, || "row count".into())?;
    let a_row = report.rows.iter().find(|r| r.id == "a").ok_or("missing row a")?;
    check(a_row.psnr == Some(100.0) && (a_row.ssim.unwrap() - 1.0).abs() < 1e-12, || "identical row".into())?;
    let mean_psnr = report.rows.iter().map(|r| r.psnr.unwrap()).sum::<f64>() / 2.0;
    let mean_uiqm = report.rows.iter().map(|r| r.uiqm).sum::<f64>() / 2.0;
    check(
        (report.summary.psnr.unwrap() - mean_psnr).abs() < 1e-9 && (report.summary.uiqm - mean_uiqm).abs() < 1e-9,
        || "aggregates are not row means".into(),
    )?;
    let noref = evaluate_dataset(&enh, None, None, Parallelism::default()).map_err(e2s)?;
    check(noref.rows.iter().all(|r| r.psnr.is_none() && r.ssim.is_none()), || "no-reference rows".into())?;

    let elapsed = started.elapsed();
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("all identities hold in {:.1}s", elapsed.as_secs_f64()))
}

// ---------- criterion 8 ----------

fn criterion_full_scale_docs() -> Outcome {
    let root = workspace_root();
    let cfg = RunConfig::load(&root.join("configs/full.toml")).map_err(e2s)?;
    let defaults = RunConfig::default();
    check(cfg.uie.loss == defaults.uie.loss && cfg.uie.cr == defaults.uie.cr, || "loss settings differ".into())?;
    check(
        cfg.uie.epochs == 800 && cfg.uie.lr == defaults.uie.lr && cfg.qa == defaults.qa,
        || "training settings differ from the defaults".into(),
    )?;
    check(cfg.negatives == defaults.negatives, || "negative set differs".into())?;
    check(
        cfg.backbone.clip.weights_ref.is_some() && cfg.backbone.features.weights_ref.is_some(),
        || "full-scale config must name pretrained weights".into(),
    )?;
    let readme = std::fs::read_to_string(root.join("README.md")).map_err(e2s)?;
    check(readme.contains(NON_REPRO_STATEMENT), || "README lacks the non-reproducibility statement".into())?;
    Ok("configs/full.toml parses to the full recipe; README states the limits".into())
}

// ---------- driver ----------

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = started.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("PASS criterion {id} ({name}, {secs:.1}s): {detail}"),
        Err(detail) => println!("FAIL criterion {id} ({name}, {secs:.1}s): {detail}"),
    }
    result.is_ok()
}

fn main() {
    // `cargo test -- --list` and filters are harness flags; this suite always runs whole.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = true;
    ok &= run(1, "loss oracles", criterion_oracles);
    ok &= run(2, "gradient checks", criterion_gradients);
    ok &= run(3, "curriculum transition", criterion_curriculum);

    let fixture = toy_fixture();
    let mut full_run = None;
    ok &= run(4, "toy training", || match &fixture {
        Ok(fx) => criterion_toy_training(fx, &mut full_run),
        Err(e) => fail(e.clone()),
    });
    ok &= run(5, "prompt learning", criterion_prompt_learning);
    ok &= run(6, "loss ablation", || match &fixture {
        Ok(fx) => criterion_ablation(fx, full_run.take()),
        Err(e) => fail(e.clone()),
    });
    ok &= run(7, "metric properties", criterion_metrics);
    ok &= run(8, "full-scale statement", criterion_full_scale_docs);
    if !ok {
        std::process::exit(1);
    }
}
