//! Scratch calibration probe, ignored by default.

use zslu::alphabet::SymbolAlphabet;
use zslu::asr::{train_asr, AsrConfig};
use zslu::corpus::{build_world, render_natural, Utterance, WorldConfig};
use zslu::train::{OptimizerKind, TrainHyper};

#[test]
#[ignore]
fn probe_overfit() {
    let world = build_world(&WorldConfig::default(), 3).unwrap();
    let text = "ab cd".to_string();
    let feats = render_natural(&world, &text, 77).unwrap();
    let utts: Vec<Utterance> = (0..16)
        .map(|i| Utterance {
            id: format!("u-{i}"),
            text: text.clone(),
            features: Some(feats.clone()),
        })
        .collect();
    let cfg = AsrConfig {
        feature_dim: 8,
        conv_kernel: 3,
        conv_stride: 2,
        encoder_width: 12,
        proj_widths: [16, 12, 8],
        leaky_slope: 0.01,
    };
    let chars: Vec<char> = ('a'..='z').collect();
    let alphabet = SymbolAlphabet::chars_only(&chars).unwrap();
    for (opt, lr) in [
        (OptimizerKind::SgdMomentum, 0.01),
        (OptimizerKind::SgdMomentum, 0.02),
        (OptimizerKind::SgdMomentum, 0.05),
        (OptimizerKind::SgdMomentum, 0.1),
        (OptimizerKind::SgdMomentum, 0.2),
        (OptimizerKind::Adam, 0.002),
        (OptimizerKind::Adam, 0.005),
        (OptimizerKind::Adam, 0.01),
    ] {
        let hyper = TrainHyper {
            epochs: 200,
            batch_size: 16,
            lr,
            momentum: 0.9,
            lr_halve_patience: 1000,
            grad_clip: 5.0,
            optimizer: opt,
        };
        match train_asr::<f32>(&utts, &cfg, &hyper, &alphabet, 5) {
            Ok((model, log)) => {
                let losses: Vec<f64> = log
                    .epochs
                    .iter()
                    .step_by(40)
                    .map(|e| (e.train_loss * 1000.0).round() / 1000.0)
                    .collect();
                println!(
                    "{opt:?} lr={lr}: final={:.4} hyp={:?} trail={losses:?}",
                    log.final_train_loss(),
                    model.transcribe(&feats).unwrap()
                );
            }
            Err(e) => println!("{opt:?} lr={lr}: {e}"),
        }
    }
}

use zslu::mat::Mat;
use zslu::nn::{gradient_check, GradCheckable};
use zslu::rng::rng_from;
use zslu::t2e::{T2eGradBlock, T2eModel, T2eConfig};

#[test]
#[ignore]
fn probe_t2e_grad() {
    let cfg = T2eConfig {
        char_embed_dim: 6,
        conv_channels: 6,
        conv_kernel: 3,
        conv_layers: 2,
        enc_lstm_width: 5,
        dec_lstm_width: 8,
        prenet_dim: 5,
        prenet_dropout: 0.5,
        guided_attention_weight: 0.3,
        guided_attention_sigma: 0.2,
        attn_dim: 5,
        out_dim: 3,
        stop_threshold: 0.5,
        stop_pos_weight: 5.0,
        max_frames: 50,
    };
    let chars: Vec<char> = ('a'..='z').collect();
    let alphabet = zslu::alphabet::SymbolAlphabet::chars_only(&chars).unwrap();
    let mut rng = rng_from(67);
    let model = T2eModel::<f64>::new(&cfg, alphabet, &mut rng);
    let target = Mat::from_fn(6, 3, |r, c| (((r * 3 + c) as f64 * 0.21 + 0.4).sin() * 0.8));
    let mut block = T2eGradBlock { model, transcript: "ab c".to_string(), target };
    // Scale parameters away from the near-linear init regime.
    let scaled: Vec<f64> = block.params_flat().iter().map(|v| v * 3.0).collect();
    block.set_params_flat(&scaled);

    // Manual sweep reporting worst offenders with param names.
    let base = block.params_flat();
    let (_, grad) = block.loss_and_grad().unwrap();
    let mut names: Vec<(String, usize)> = Vec::new();
    {
        let mut p = Vec::new();
        block.model.collect_params_with(&mut p);
        for pr in &p { names.push((pr.name.clone(), pr.value.data().len())); }
    }
    let eps: f64 = std::env::var("PROBE_EPS").map(|v| v.parse().unwrap()).unwrap_or(1e-5);
    let mut work = base.clone();
    let mut worst: Vec<(f64, usize, f64, f64)> = Vec::new();
    for i in 0..base.len() {
        work[i] = base[i] + eps;
        block.set_params_flat(&work);
        let (lp, _) = block.loss_and_grad().unwrap();
        work[i] = base[i] - eps;
        block.set_params_flat(&work);
        let (lm, _) = block.loss_and_grad().unwrap();
        work[i] = base[i];
        let numeric = (lp - lm) / (2.0 * eps);
        let analytic = grad[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst.push((rel, i, analytic, numeric));
    }
    worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let name_of = |i: usize| -> String {
        let mut off = 0;
        for (n, len) in &names {
            if i < off + len { return format!("{n}[{}]", i - off); }
            off += len;
        }
        "?".into()
    };
    for (rel, i, a, n) in worst.iter().take(10) {
        println!("rel={rel:.3e} {} analytic={a:.6e} numeric={n:.6e}", name_of(*i));
    }
}

use zslu::corpus::CorpusSizes;
use zslu::pipeline::cache::StageCache;
use zslu::pipeline::runs::RunContext;
use zslu::pipeline::{run_matrix, ExperimentConfig};

fn probe_config(scale: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    if scale < 1.0 {
        cfg.sizes = CorpusSizes {
            asr_train: (500.0 * scale) as usize,
            ner_train: (400.0 * scale) as usize,
            ner_dev: (50.0 * scale).max(10.0) as usize,
            test: (100.0 * scale).max(20.0) as usize,
        };
    }
    cfg
}

#[test]
#[ignore]
fn probe_pipeline_smoke() {
    let scale: f64 = std::env::var("PROBE_SCALE").map(|v| v.parse().unwrap()).unwrap_or(0.2);
    let cfg = probe_config(scale);
    let root = std::env::temp_dir().join(format!("zslu-probe-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    let cache = StageCache::new(&root);
    let t0 = std::time::Instant::now();
    let ctx = RunContext::new(&cfg, &cache, 3).unwrap();

    let asr = ctx.asr().unwrap();
    println!("[{:6.1}s] asr trained", t0.elapsed().as_secs_f64());
    let bundle = ctx.bundle().unwrap();
    let wer = zslu::asr::evaluate_wer(
        &asr,
        &bundle
            .test
            .iter()
            .map(|u| zslu::corpus::Utterance {
                id: u.id.clone(),
                text: u.tagged.bare_text(),
                features: u.features.clone(),
            })
            .collect::<Vec<_>>(),
    )
    .unwrap();
    println!("ASR test WER = {:.3}%", 100.0 * wer.wer());

    let data = ctx.t2e_data().unwrap();
    println!(
        "[{:6.1}s] t2e data: {} train / {} val / {} dropped",
        t0.elapsed().as_secs_f64(),
        data.train.len(),
        data.val.len(),
        data.dropped
    );
    let t2e = ctx.t2e().unwrap();
    println!("[{:6.1}s] t2e trained", t0.elapsed().as_secs_f64());
    // Embedding fidelity diagnostic on a few training transcripts.
    let mut sims = Vec::new();
    for p in data.train.iter().take(10) {
        let sim = t2e.synthesize(&p.transcript, cfg.t2e.max_frames).unwrap();
        if sim.rows() > 0 {
            sims.push(zslu::t2e::dtw_cosine(&p.target, &sim).unwrap());
        }
        if sims.len() == 1 {
            println!("  len real {} vs sim {}", p.target.rows(), sim.rows());
        }
    }
    println!("  dtw cosine (train pairs): {:?}", sims.iter().map(|s| (s * 100.0).round() / 100.0).collect::<Vec<_>>());

    let report = zslu::pipeline::run_proposed(&ctx).unwrap();
    println!(
        "[{:6.1}s] simulated: dev NEER {:.1}% test NEER {:.1}% (wer {:.2}%, repairs {})",
        t0.elapsed().as_secs_f64(),
        100.0 * report.dev.neer,
        100.0 * report.test.neer,
        100.0 * report.test.wer,
        report.test.repair_total
    );
    let oracle = zslu::pipeline::run_oracle(&ctx).unwrap();
    println!(
        "[{:6.1}s] oracle:    dev NEER {:.1}% test NEER {:.1}%",
        t0.elapsed().as_secs_f64(),
        100.0 * oracle.dev.neer,
        100.0 * oracle.test.neer
    );
    let _ = std::fs::remove_dir_all(&root);
}

#[test]
#[ignore]
fn probe_matrix() {
    let scale: f64 = std::env::var("PROBE_SCALE").map(|v| v.parse().unwrap()).unwrap_or(1.0);
    let seeds: Vec<u64> = std::env::var("PROBE_SEEDS")
        .map(|v| v.split(',').map(|s| s.parse().unwrap()).collect())
        .unwrap_or_else(|_| vec![3]);
    let cfg = probe_config(scale);
    let root = std::env::temp_dir().join(format!("zslu-probe-mx-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    let cache = StageCache::new(&root);
    let table = run_matrix(&cfg, &cache, &seeds).unwrap();
    println!("{}", table.render_text());
    let _ = std::fs::remove_dir_all(&root);
}

#[test]
#[ignore]
fn probe_asr_convergence() {
    let epochs: usize = std::env::var("PROBE_EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(20);
    let lr: f64 = std::env::var("PROBE_LR").map(|v| v.parse().unwrap()).unwrap_or(0.01);
    let cfg = probe_config(1.0);
    let world = zslu::corpus::build_world(&cfg.world, 3).unwrap();
    let grammar = zslu::corpus::TemplateGrammar::default_grammar(cfg.world.entity_types.len());
    let bundle = zslu::corpus::generate_corpus(&world, &cfg.sizes, &grammar, 3).unwrap();
    let chars: Vec<char> = cfg.world.chars.clone();
    let alphabet = zslu::alphabet::SymbolAlphabet::chars_only(&chars).unwrap();
    let patience: usize = std::env::var("PROBE_PATIENCE").map(|v| v.parse().unwrap()).unwrap_or(2);
    let opt = match std::env::var("PROBE_OPT").as_deref() {
        Ok("adam") => OptimizerKind::Adam,
        _ => OptimizerKind::SgdMomentum,
    };
    let hyper = TrainHyper {
        epochs,
        lr,
        lr_halve_patience: patience,
        optimizer: opt,
        ..TrainHyper::default()
    };
    let t0 = std::time::Instant::now();
    let (model, log) = zslu::asr::train_asr::<f32>(&bundle.asr_train, &cfg.asr, &hyper, &alphabet, 3).unwrap();
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    for e in log.epochs.iter() {
        if e.epoch % 2 == 0 || e.epoch + 1 == epochs {
            println!("  epoch {:2}: train {:8.3} val {:8.3} lr {:.4} gnorm {:9.2}", e.epoch, e.train_loss, e.val_loss, e.lr, e.grad_norm);
        }
    }
    let test_utts: Vec<zslu::corpus::Utterance> = bundle
        .test
        .iter()
        .map(|u| zslu::corpus::Utterance {
            id: u.id.clone(),
            text: u.tagged.bare_text(),
            features: u.features.clone(),
        })
        .collect();
    let wer = zslu::asr::evaluate_wer(&model, &test_utts).unwrap();
    println!("test WER = {:.2}%  (S={} I={} D={} / N={})", 100.0 * wer.wer(),
        wer.counts.substitutions, wer.counts.insertions, wer.counts.deletions, wer.ref_tokens);
    for u in bundle.test.iter().take(3) {
        let hyp = model.transcribe(u.features.as_ref().unwrap()).unwrap();
        println!("  ref: {}\n  hyp: {}", u.tagged.bare_text(), hyp);
    }
}

#[test]
#[ignore]
fn probe_t2e_timing() {
    let cfg = probe_config(1.0);
    let root = std::env::temp_dir().join("zslu-probe-shared");
    let cache = StageCache::new(&root);
    let ctx = RunContext::new(&cfg, &cache, 3).unwrap();
    let t0 = std::time::Instant::now();
    let _asr = ctx.asr().unwrap();
    println!("asr ready at {:.1}s", t0.elapsed().as_secs_f64());
    let data = ctx.t2e_data().unwrap();
    println!(
        "t2e data at {:.1}s ({} train pairs, mean target len {:.1})",
        t0.elapsed().as_secs_f64(),
        data.train.len(),
        data.train.iter().map(|p| p.target.rows()).sum::<usize>() as f64 / data.train.len() as f64
    );
    let hyper = TrainHyper {
        epochs: 2,
        ..cfg.t2e_train.clone()
    };
    let t1 = std::time::Instant::now();
    let alphabet = zslu::alphabet::SymbolAlphabet::chars_only(&cfg.world.chars).unwrap();
    let (_m, log) = zslu::t2e::train_t2e::<f32>(&data, &cfg.t2e, &hyper, &alphabet, 7).unwrap();
    println!(
        "2 t2e epochs in {:.1}s (loss {:.4} -> {:.4})",
        t1.elapsed().as_secs_f64(),
        log.epochs[0].train_loss,
        log.epochs[1].train_loss
    );
}

#[test]
#[ignore]
fn probe_slu_timing() {
    let cfg = probe_config(1.0);
    let root = std::env::temp_dir().join("zslu-probe-shared");
    let cache = StageCache::new(&root);
    let ctx = RunContext::new(&cfg, &cache, 3).unwrap();
    let t0 = std::time::Instant::now();
    let samples = ctx.slu_data(false).unwrap();
    println!(
        "slu data at {:.1}s ({} samples, mean input len {:.1})",
        t0.elapsed().as_secs_f64(),
        samples.len(),
        samples.iter().map(|s| s.input.rows()).sum::<usize>() as f64 / samples.len() as f64
    );
    let hyper = TrainHyper {
        epochs: 2,
        ..cfg.slu_train.clone()
    };
    let tag_alpha = zslu::alphabet::SymbolAlphabet::with_tags(
        &cfg.world.chars,
        cfg.world.entity_types.clone(),
    )
    .unwrap();
    let t1 = std::time::Instant::now();
    let (_m, log) =
        zslu::slu::train_slu::<f32>(&samples, &cfg.slu, &hyper, &tag_alpha, 7).unwrap();
    println!(
        "2 slu epochs in {:.1}s (loss {:.2} -> {:.2}, skipped {})",
        t1.elapsed().as_secs_f64(),
        log.epochs[0].train_loss,
        log.epochs[1].train_loss,
        log.skipped
    );
}

#[test]
#[ignore]
fn probe_t2e_quality() {
    let epochs: usize = std::env::var("PROBE_EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(30);
    let lr: f64 = std::env::var("PROBE_LR").map(|v| v.parse().unwrap()).unwrap_or(2e-3);
    let cfg = probe_config(1.0);
    let root = std::env::temp_dir().join("zslu-probe-shared");
    let cache = StageCache::new(&root);
    let ctx = RunContext::new(&cfg, &cache, 3).unwrap();
    let asr = ctx.asr().unwrap();
    let data = ctx.t2e_data().unwrap();
    let alphabet = zslu::alphabet::SymbolAlphabet::chars_only(&cfg.world.chars).unwrap();
    let hyper = TrainHyper {
        epochs,
        lr,
        lr_halve_patience: std::env::var("PROBE_PATIENCE").map(|v| v.parse().unwrap()).unwrap_or(8),
        optimizer: OptimizerKind::Adam,
        ..TrainHyper::default()
    };
    let mut t2e_cfg = cfg.t2e.clone();
    if let Ok(scale) = std::env::var("PROBE_T2E_CAP") {
        let k: f64 = scale.parse().unwrap();
        t2e_cfg.conv_channels = (cfg.t2e.conv_channels as f64 * k) as usize;
        t2e_cfg.enc_lstm_width = (cfg.t2e.enc_lstm_width as f64 * k) as usize;
        t2e_cfg.dec_lstm_width = (cfg.t2e.dec_lstm_width as f64 * k) as usize;
        t2e_cfg.prenet_dim = (cfg.t2e.prenet_dim as f64 * k) as usize;
        t2e_cfg.attn_dim = (cfg.t2e.attn_dim as f64 * k) as usize;
    }
    if let Ok(d) = std::env::var("PROBE_DROPOUT") {
        t2e_cfg.prenet_dropout = d.parse().unwrap();
    }
    let t0 = std::time::Instant::now();
    let (t2e, log) = zslu::t2e::train_t2e::<f32>(&data, &t2e_cfg, &hyper, &alphabet, 7).unwrap();
    println!("t2e {epochs} epochs in {:.0}s", t0.elapsed().as_secs_f64());
    for e in log.epochs.iter().step_by(5) {
        println!("  epoch {:2}: train {:8.4} val_mse {:8.4} lr {:.5}", e.epoch, e.train_loss, e.val_loss, e.lr);
    }
    // Readability: does the recognizer's own output head transcribe the
    // simulated embeddings back to the source text?
    let mut shown = 0;
    let mut len_ratio = Vec::new();
    let mut wer_pairs = Vec::new();
    for p in data.train.iter().take(60) {
        let sim = t2e.synthesize(&p.transcript, cfg.t2e.max_frames).unwrap();
        let logits = asr.logits_from_embeddings(&sim);
        let text = asr.alphabet.decode_text(&asr.decode_symbols(&logits));
        len_ratio.push(sim.rows() as f64 / p.target.rows() as f64);
        if text != p.transcript && shown < 5 {
            println!("  src: {}\n  dec: {}", p.transcript, text);
            shown += 1;
        }
        wer_pairs.push((p.transcript.clone(), text));
    }
    let (c, n) = zslu::pipeline::eval::micro_wer(&wer_pairs);
    println!(
        "readback WER {:.1}% , len ratio mean {:.2}",
        100.0 * c.distance() as f64 / n as f64,
        len_ratio.iter().sum::<f64>() / len_ratio.len() as f64
    );
    // Attention sharpness on one example.
    let (out, attn) = t2e
        .synthesize_with_attention(&data.train[0].transcript, cfg.t2e.max_frames)
        .unwrap();
    println!("example: {} chars -> {} frames", data.train[0].transcript.len(), out.rows());
    for (t, row) in attn.iter().enumerate().step_by(6) {
        let arg = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, v)| (i, *v))
            .unwrap();
        println!("  step {t:2}: argmax pos {:2} weight {:.2}", arg.0, arg.1);
    }
}
