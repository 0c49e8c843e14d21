//! Acceptance gate: one test per criterion, each printing a PASS line with
//! its measured values. These pin the project's numeric contracts: the
//! correlation and labeling oracles, the gradient suites, the residual
//! identity, loss arithmetic, the update scheduler, metric conventions,
//! the overfit smoke test, the baseline-vs-updatable benchmark and
//! determinism.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siamup::backbone::{TemplateSet, TemplateTag};
use siamup::data::{synth_sequence, SynthConfig};
use siamup::eval::{precision_at, run_benchmark, success_auc, median_of};
use siamup::fusion::Fusion;
use siamup::geometry::{
    assign_labels, generate_anchors, iou, AnchorConfig, BBox, CropSizes, Label, LabelConfig,
};
use siamup::loss::LossConfig;
use siamup::model::{Model, ModelConfig};
use siamup::nn::kernels::depthwise_xcorr_fwd;
use siamup::nn::{Ctx, NormalSampler, ParamStore, Tensor};
use siamup::tracker::TrackerConfig;
use siamup::trainer::{build_triplet, train_step, Sgd, TrainConfig};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Criterion 1: depth-wise correlation equals a four-nested-loop oracle on
/// 50 random shapes, max abs diff < 1e-6, in under 10 s.
#[test]
fn criterion_01_correlation_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut max_diff = 0.0f64;
    for _ in 0..50 {
        let c = rng.gen_range(1..6);
        let sh = rng.gen_range(4..16);
        let sw = rng.gen_range(4..16);
        let kh = rng.gen_range(1..=sh.min(9));
        let kw = rng.gen_range(1..=sw.min(9));
        let search = rand_tensor(&mut rng, &[c, sh, sw]);
        let kernel = rand_tensor(&mut rng, &[c, kh, kw]);
        let fast = depthwise_xcorr_fwd(&search, &kernel);

        // Naive four-nested-loop oracle.
        let (oh, ow) = (sh - kh + 1, sw - kw + 1);
        let mut slow = Tensor::zeros(&[c, oh, ow]);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            acc += search.at3(ch, oy + ky, ox + kx) * kernel.at3(ch, ky, kx);
                        }
                    }
                    slow.set3(ch, oy, ox, acc);
                }
            }
        }
        max_diff = max_diff.max(fast.max_abs_diff(&slow));
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(max_diff < 1e-6, "max abs diff {max_diff}");
    assert!(elapsed < 10.0, "took {elapsed:.1}s");
    println!("PASS criterion 1: correlation oracle, 50 shapes, max abs diff {max_diff:.3e}, {elapsed:.2}s");
}

/// Criterion 2: finite-difference gradient suites for fusion, RPN (both
/// branches + aggregation logits), the three-aspect loss and the tiny
/// backbone: max relative error < 1e-4, in under 5 minutes.
#[test]
fn criterion_02_gradient_suite() {
    let start = Instant::now();
    let outcome = siamup::gradsuite::run_all().expect("suites run");
    let elapsed = start.elapsed().as_secs_f64();
    for r in &outcome.reports {
        assert!(
            r.passed(siamup::gradsuite::TOLERANCE),
            "{}: max rel err {} ({} non-smooth) worst {}",
            r.module,
            r.max_rel_err,
            r.nonsmooth_skipped,
            r.worst_param
        );
    }
    assert!(elapsed < 300.0, "took {elapsed:.0}s");
    println!(
        "PASS criterion 2: gradient suites (fusion/rpn/backbone/loss) max rel err {:.3e}, {elapsed:.0}s",
        outcome.max_rel_err
    );
}

/// Criterion 3: residual identity. Zero-initialized fusion returns the
/// exemplar bitwise for 100 random update templates, and tracking with
/// updates enabled vs disabled produces identical result files at
/// initialization (exercised through the CLI).
#[test]
fn criterion_03_residual_identity() {
    // Bitwise identity over 100 random update samples.
    let mut ps = ParamStore::new();
    let mut sampler = NormalSampler::new(33);
    let fusion = Fusion::init(16, &mut ps, &mut sampler).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for case in 0..100 {
        let mk = |rng: &mut ChaCha8Rng, tag| TemplateSet {
            levels: [rand_tensor(rng, &[16, 7, 7]), rand_tensor(rng, &[16, 7, 7])],
            tag,
        };
        let zf = mk(&mut rng, TemplateTag::Initial);
        let uf = mk(&mut rng, TemplateTag::Update);
        let mut ctx = Ctx::eval(&ps);
        let fused = fusion.fuse_detached(&mut ctx, &zf, &uf).unwrap();
        for li in 0..2 {
            let a: Vec<u64> = fused.levels[li].data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = zf.levels[li].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "case {case} level {li} not bitwise identical");
        }
    }

    // CLI: track vs track --no-update from a freshly initialized model.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = siamup::config::RunConfig::default();
    cfg.synth.length = 12;
    cfg.synth.frame_size = 128;
    cfg.synth.object_size = 14.0;
    cfg.synth.occlusions = vec![];
    cfg.tracker.confidence_threshold = 0.05; // make refreshes fire
    cfg.tracker.refresh_period = 3;
    let seq = synth_sequence(&cfg.synth, 9).unwrap();
    let seq_dir = dir.path().join("seq");
    siamup::data::save_otb(&seq, &seq_dir).unwrap();
    let model = Model::init(&cfg.model, 1).unwrap();
    let ckpt = dir.path().join("init.ckpt");
    siamup::checkpoint::save(&ckpt, &model, &cfg, 0, 0).unwrap();
    let run = |extra: &[&str]| {
        let out_file = dir.path().join(format!("r{}.txt", extra.len()));
        let mut args = vec![
            "track".to_string(),
            "--checkpoint".into(),
            ckpt.to_str().unwrap().into(),
            "--sequence".into(),
            seq_dir.to_str().unwrap().into(),
            "--out".into(),
            out_file.to_str().unwrap().into(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_siamup"))
            .args(&args)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(&out_file).unwrap()
    };
    let with_update = run(&[]);
    let without = run(&["--no-update"]);
    assert_eq!(with_update, without, "result files must be identical at initialization");
    println!("PASS criterion 3: residual identity bitwise over 100 cases; track == track --no-update at init");
}

/// Criterion 4: loss additivity. Grand total = sum of aspect totals within
/// 1e-9 relative over 100 random batches, and aspect total = cls + 1.2*reg
/// exactly.
#[test]
fn criterion_04_loss_additivity() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let loss_cfg = LossConfig::default();
    assert_eq!(loss_cfg.lambda, 1.2);
    let layout = siamup::rpn::MapLayout { anchors: 3, response: 5 };
    let mut worst_rel = 0.0f64;
    for case in 0..100 {
        // Random label map over the grid.
        let n = layout.anchor_count();
        let mut labels = vec![Label::Ignore; n];
        let mut targets = vec![[f64::NAN; 4]; n];
        let mut num_pos = 0;
        let mut num_neg = 0;
        for i in 0..n {
            match rng.gen_range(0..4) {
                0 => {
                    labels[i] = Label::Positive;
                    targets[i] = [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ];
                    num_pos += 1;
                }
                1 => {
                    labels[i] = Label::Negative;
                    num_neg += 1;
                }
                _ => {}
            }
        }
        let label_map = siamup::geometry::LabelMap {
            labels,
            reg_targets: targets,
            num_pos,
            num_neg,
            no_positives: num_pos == 0,
        };
        let ps = ParamStore::new();
        let mut ctx = Ctx::eval(&ps);
        let mut aspects = Vec::new();
        let mut sum_of_totals = 0.0;
        for _ in 0..3 {
            let cls = ctx.constant(rand_tensor(&mut rng, &[2 * layout.anchors, 5, 5]));
            let reg = ctx.constant(rand_tensor(&mut rng, &[4 * layout.anchors, 5, 5]));
            let outputs = siamup::rpn::RpnOutputs {
                cls,
                reg,
                per_level_cls: [cls; 2],
                per_level_reg: [reg; 2],
                layout,
            };
            let a = siamup::loss::aspect_loss(&mut ctx, &outputs, &label_map, &loss_cfg).unwrap();
            // Aspect total = cls + 1.2 * reg, exactly as computed in f64.
            let cls_v = ctx.g.value(a.cls).item();
            let reg_v = ctx.g.value(a.reg).item();
            let total_v = ctx.g.value(a.total).item();
            assert_eq!(total_v, cls_v + 1.2 * reg_v, "case {case}: aspect arithmetic");
            sum_of_totals += total_v;
            aspects.push(a);
        }
        let grand = siamup::loss::total_loss(&mut ctx, &aspects);
        let grand_v = ctx.g.value(grand).item();
        let rel = (grand_v - sum_of_totals).abs() / sum_of_totals.abs().max(1e-300);
        worst_rel = worst_rel.max(rel);
        assert!(rel < 1e-9, "case {case}: relative error {rel}");
    }
    println!("PASS criterion 4: loss additivity over 100 batches, worst relative error {worst_rel:.3e}");
}

/// Criterion 5: label assignment with subsampling off equals brute-force
/// IoU thresholding on 200 random cases, exactly.
#[test]
fn criterion_05_labeling_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let cfg = AnchorConfig::default();
    let anchors = generate_anchors(&cfg, 17).unwrap();
    let lcfg = LabelConfig { subsample: false, ..Default::default() };
    for case in 0..200 {
        let gt = BBox::new(
            rng.gen_range(30.0..225.0),
            rng.gen_range(30.0..225.0),
            rng.gen_range(8.0..130.0),
            rng.gen_range(8.0..130.0),
        )
        .unwrap();
        let got = assign_labels(&anchors, &gt, &lcfg).unwrap();
        for (i, anchor) in anchors.boxes.iter().enumerate() {
            let v = iou(anchor, &gt);
            let expect = if v > lcfg.hi_thresh {
                Label::Positive
            } else if v < lcfg.lo_thresh {
                Label::Negative
            } else {
                Label::Ignore
            };
            assert_eq!(got.labels[i], expect, "case {case} anchor {i}: iou {v}");
        }
    }
    println!("PASS criterion 5: labeling oracle exact on 200 random cases");
}

/// Criterion 6: the update scheduler fires exactly on the frames a
/// reference simulator predicts over a 100-frame scripted-confidence run
/// (T_m = 0.9, N = 10), and never fires when nothing qualifies.
#[test]
fn criterion_06_scheduler_property() {
    let cfg = TrackerConfig::default();
    assert_eq!(cfg.confidence_threshold, 0.9);
    assert_eq!(cfg.refresh_period, 10);

    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for case in 0..20 {
        let confs: Vec<f64> = (0..100).map(|_| rng.gen_range(0.4..1.0)).collect();

        // Reference simulator (five lines).
        let mut buffered = false;
        let mut expected = Vec::new();
        for (i, &c) in confs.iter().enumerate() {
            if c > 0.9 { buffered = true; }
            if (i + 1) % 10 == 0 && buffered { expected.push(i + 1); }
        }

        let mut sched = siamup::tracker::UpdateScheduler::new(&cfg);
        let mut fired = Vec::new();
        for (i, &c) in confs.iter().enumerate() {
            sched.offer(i + 1, c, || Ok(Tensor::scalar(0.0))).unwrap();
            if sched.due(i + 1) {
                fired.push(i + 1);
            }
        }
        assert_eq!(fired, expected, "case {case}");
    }

    // All confidences <= 0.9: never fires.
    let mut sched = siamup::tracker::UpdateScheduler::new(&cfg);
    for i in 1..=100 {
        sched.offer(i, 0.9, || Ok(Tensor::scalar(0.0))).unwrap();
        assert!(!sched.due(i), "fired at {i} without a qualifying sample");
    }
    println!("PASS criterion 6: scheduler matches the reference simulator on 20 scripted runs; never fires at <= 0.9");
}

/// Criterion 7: metric sanity. pred == gt gives precision 1.0 and success
/// AUC 20/21; both metrics match scalar references exactly on 50 random
/// result sets.
#[test]
fn criterion_07_metric_sanity() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let gt: Vec<BBox> = (0..25)
        .map(|_| {
            BBox::new(
                rng.gen_range(30.0..200.0),
                rng.gen_range(30.0..200.0),
                rng.gen_range(5.0..50.0),
                rng.gen_range(5.0..50.0),
            )
            .unwrap()
        })
        .collect();
    let auc = success_auc(&gt, &gt).unwrap();
    assert_eq!(auc, 20.0 / 21.0);
    assert_eq!(precision_at(&gt, &gt, 20.0).unwrap(), 1.0);

    for case in 0..50 {
        let n = rng.gen_range(5..60);
        let truth: Vec<BBox> = (0..n)
            .map(|_| {
                BBox::new(
                    rng.gen_range(30.0..220.0),
                    rng.gen_range(30.0..220.0),
                    rng.gen_range(4.0..70.0),
                    rng.gen_range(4.0..70.0),
                )
                .unwrap()
            })
            .collect();
        let pred: Vec<BBox> = truth
            .iter()
            .map(|g| {
                BBox::new(
                    g.cx + rng.gen_range(-40.0..40.0),
                    g.cy + rng.gen_range(-40.0..40.0),
                    (g.w + rng.gen_range(-3.0..25.0)).max(1.0),
                    (g.h + rng.gen_range(-3.0..25.0)).max(1.0),
                )
                .unwrap()
            })
            .collect();
        // Scalar references.
        let mut ref_auc = 0.0;
        for ti in 0..21 {
            let t = ti as f64 * 0.05;
            let mut hits = 0;
            for i in 0..n {
                if iou(&pred[i], &truth[i]) > t { hits += 1; }
            }
            ref_auc += hits as f64 / n as f64;
        }
        ref_auc /= 21.0;
        let mut prec_hits = 0;
        for i in 0..n {
            if pred[i].center_distance(&truth[i]) <= 20.0 { prec_hits += 1; }
        }
        let ref_prec = prec_hits as f64 / n as f64;
        assert_eq!(success_auc(&pred, &truth).unwrap(), ref_auc, "case {case}");
        assert_eq!(precision_at(&pred, &truth, 20.0).unwrap(), ref_prec, "case {case}");
    }
    println!("PASS criterion 7: pred==gt gives AUC 20/21 and precision 1.0; exact match with scalar references on 50 sets");
}

/// Criterion 10: determinism. Same (config, seed) renders bit-identical
/// synthetic sequences, and two identical training runs reproduce the loss
/// curve exactly on this substrate.
#[test]
fn criterion_10_determinism() {
    // synth determinism, including through the CLI byte-for-byte.
    let synth_cfg = SynthConfig {
        length: 8,
        frame_size: 128,
        object_size: 14.0,
        occlusions: vec![siamup::data::EventWindow { start: 3, len: 2 }],
        ..Default::default()
    };
    let a = synth_sequence(&synth_cfg, 123).unwrap();
    let b = synth_sequence(&synth_cfg, 123).unwrap();
    for t in 0..a.len() {
        assert_eq!(a.frame(t).unwrap(), b.frame(t).unwrap(), "frame {t}");
        assert_eq!(a.gt[t], b.gt[t]);
    }

    // Training determinism: identical loss curves, bit for bit.
    let curve = || {
        let mut model = Model::init(&ModelConfig::tiny(), 10).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            pairs_per_epoch: 4,
            batch_size: 2,
            ..Default::default()
        };
        let seqs = vec![synth_sequence(&synth_cfg, 5).unwrap()];
        siamup::trainer::train(
            &mut model,
            &seqs,
            &cfg,
            &LabelConfig::default(),
            &LossConfig::default(),
            77,
            None,
            |_, _| Ok(()),
        )
        .unwrap()
        .loss_curve
    };
    let c1 = curve();
    let c2 = curve();
    let bits = |c: &[f64]| c.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&c1), bits(&c2), "loss curves must reproduce exactly");
    println!(
        "PASS criterion 10: synth bit-identical; training loss curve reproduced exactly ({} steps, mode: exact single-threaded substrate)",
        c1.len()
    );
}

// Criteria 8 (overfit smoke) and 9 (desk-scale ablation) live below; they
// are the heavyweight end of the gate.

/// Criterion 8: 200 training steps on 16 fixed triplets push the total
/// loss below 10% of its initial value, in under 10 minutes.
#[test]
fn criterion_08_overfit_smoke() {
    let start = Instant::now();
    let mut model = Model::init(&ModelConfig::tiny(), 7).unwrap();
    let tcfg = TrainConfig::default();
    let crops = CropSizes::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut triplets = Vec::new();
    for s in 0..4 {
        let seq = synth_sequence(
            &SynthConfig { length: 20, occlusions: vec![], ..Default::default() },
            100 + s,
        )
        .unwrap();
        for _ in 0..4 {
            triplets.push(build_triplet(&seq, &mut rng, &tcfg, &crops).unwrap());
        }
    }
    assert_eq!(triplets.len(), 16);
    let anchors = generate_anchors(&model.cfg.anchors, 25).unwrap();
    let mut opt = Sgd::new(&tcfg);
    let label_cfg = LabelConfig::default();
    let loss_cfg = LossConfig::default();
    let mut initial = f64::NAN;
    let mut last = f64::NAN;
    for step in 0..200 {
        // Short warm-up into a constant rate; the fixed batch needs no decay.
        let lr = if step < 40 {
            0.001 + (0.01 - 0.001) * step as f64 / 40.0
        } else {
            0.01
        };
        let out = train_step(
            &mut model, &mut opt, &triplets, &anchors, &label_cfg, &loss_cfg,
            lr, lr / 16.0, false, false, 777,
        )
        .unwrap();
        if step == 0 {
            initial = out.losses.grand_total;
        }
        last = out.losses.grand_total;
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        last < 0.1 * initial,
        "loss {last:.4} not below 10% of initial {initial:.4}"
    );
    assert!(elapsed < 600.0, "took {elapsed:.0}s");
    println!(
        "PASS criterion 8: overfit smoke, loss {initial:.3} -> {last:.3} ({:.1}% of initial) in {elapsed:.0}s / 200 steps",
        100.0 * last / initial
    );
}

/// Criterion 9: desk-scale ablation. Train the tiny preset on 200 drift
/// sequences (strong appearance drift, occasional occlusion), evaluate
/// baseline vs updatable on 20 held-out pure-drift sequences over 5 seeds:
/// the median AUC delta must be positive. Also smoke-checks the trained
/// tracker on a static sequence (IoU >= 0.5 on every frame).
#[test]
fn criterion_09_update_ablation() {
    let start = Instant::now();
    let (model, train_synth) = train_tiny_for_ablation();

    // End-to-end smoke: static sequence, every frame IoU >= 0.5.
    let static_cfg = SynthConfig {
        length: 20,
        velocity: 0.0,
        motion_noise: 0.0,
        drift_rate: 0.0,
        scale_amp: 0.0,
        occlusions: vec![],
        blurs: vec![],
        distractors: 0,
        ..train_synth.clone()
    };
    let static_seq = synth_sequence(&static_cfg, 4321).unwrap();
    let (rows, _) = siamup::tracker::track_sequence(&model, &static_seq, &TrackerConfig::default()).unwrap();
    let mut min_iou = 1.0f64;
    for (t, row) in rows.iter().enumerate() {
        let v = iou(&row.bbox, &static_seq.gt[t].unwrap());
        min_iou = min_iou.min(v);
    }
    assert!(min_iou >= 0.5, "static-sequence IoU fell to {min_iou:.3}");

    // Ablation: 5 seeds x 20 held-out drift sequences, longer than the
    // training sequences so the appearance fully swaps mid-run.
    let eval_synth = SynthConfig {
        length: 90,
        occlusions: vec![],
        blurs: vec![],
        velocity: 1.4,
        ..train_synth.clone()
    };
    let outcome = run_benchmark(
        &model,
        &TrackerConfig::default(),
        |seed| {
            (0..20)
                .map(|i| synth_sequence(&eval_synth, 10_000 + seed * 100 + i))
                .collect()
        },
        &[1, 2, 3, 4, 5],
    )
    .unwrap();
    assert!(outcome.failures.is_empty(), "sequence failures: {:?}", outcome.failures);
    assert_eq!(outcome.auc_deltas.len(), 100);
    let median = median_of(&outcome.auc_deltas);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        median > 0.0,
        "median(updatable - baseline AUC) = {median:.4} not positive; mean {:.4}",
        outcome.mean_auc_delta
    );
    assert!(elapsed < 3.0 * 3600.0, "took {elapsed:.0}s");
    println!(
        "PASS criterion 9: ablation median AUC delta {median:+.4} (mean {:+.4}) over 100 sequence pairs; static smoke min IoU {min_iou:.3}; {:.0} min total",
        outcome.mean_auc_delta,
        elapsed / 60.0
    );
}

/// Train the tiny preset for the ablation; shared by criterion 9.
fn train_tiny_for_ablation() -> (Model, SynthConfig) {
    let train_synth = SynthConfig {
        drift_rate: 0.02,
        distractors: 2,
        ..Default::default()
    };
    let sequences: Vec<_> = (0..200)
        .map(|i| synth_sequence(&train_synth, 1000 + i).unwrap())
        .collect();
    let mut model = Model::init(&ModelConfig::tiny(), 42).unwrap();
    let tcfg = TrainConfig::default();
    siamup::trainer::train(
        &mut model,
        &sequences,
        &tcfg,
        &LabelConfig::default(),
        &LossConfig::default(),
        42,
        None,
        |_, _| Ok(()),
    )
    .unwrap();
    (model, train_synth)
}
