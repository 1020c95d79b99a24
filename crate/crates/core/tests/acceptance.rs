//! End-to-end acceptance criteria A1–A9. Each test prints one
//! `A<n> PASS|FAIL` line before asserting.

use std::collections::HashMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use mdlzoo::attention::{attention_map_columns, field_union};
use mdlzoo::autodiff::{grad_check, Tape, Var};
use mdlzoo::charlm::{char_tokens, NGramLm};
use mdlzoo::cli::{bench_wavefront, BenchArgs};
use mdlzoo::ctc::{ctc_loss, ctc_loss_var, estimate_priors, prefix_beam_decode, FusionConfig, PosteriorMatrix};
use mdlzoo::layers::{
    collapse, conv2d, dropout, gated_conv, linear, maxpool2d, tiling, CollapseMode, ConvLayer, GatedConvLayer,
    LinearLayer, PoolLayer,
};
use mdlzoo::netzoo::{Arch, DropoutPreset, Network, NetworkSpec, VariantKnobs};
use mdlzoo::recurrent::{lstm1d, mdlstm2d, mdlstm2d_reference, Combine, Lstm1dLayer, Mdlstm2dLayer, Schedule};
use mdlzoo::synthline::{
    generate_samples, generate_transcripts, Charset, CorpusConfig, Difficulty, MarkovText, TextSource, BUNDLED_SNIPPET,
};
use mdlzoo::tensor::Tensor;
use mdlzoo::trainer::{
    decode_all, glorot_init, posteriors, prepare_examples, score, train, Decoding, EarlyStopping, Example, Prepared,
    StopDecision, StopReason, TrainConfig, TrainOutcome,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: &str, pass: bool, detail: impl AsRef<str>) {
    // bypasses the harness capture so the line shows for passing tests too
    let line = format!("{id} {}: {}\n", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(pass, "{id} failed: {}", detail.as_ref());
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

#[test]
fn a1_parameter_audit() {
    let start = Instant::now();
    let rows = |arch: Arch| -> Vec<u64> {
        let spec = NetworkSpec::build(arch, VariantKnobs::default()).unwrap();
        spec.audit(128, 1000)
            .unwrap()
            .rows
            .iter()
            .map(|r| r.params)
            .filter(|&p| p > 0)
            .collect()
    };
    let puig_expect = vec![
        160, 4640, 13872, 27712, 46160, 3147776, 1574912, 1574912, 1574912, 1574912, 28270,
    ];
    let gnn_expect = vec![
        296, 1040, 2320, 4640, 9248, 16448, 36928, 73856, 263168, 32768, 263168, 28380,
    ];
    let puig = rows(Arch::Puigcerver);
    let gnn = rows(Arch::Gnn1dLstm);
    let total: u64 = puig.iter().sum();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "A1",
        puig == puig_expect && gnn == gnn_expect && total == 9_568_238 && secs < 1.0,
        format!("puigcerver rows {puig:?} total {total}; gnn1dlstm rows {gnn:?}; {secs:.3}s"),
    );
}

#[test]
fn a2_mac_audit() {
    let start = Instant::now();
    let macs = |arch: Arch| {
        let r = NetworkSpec::build(arch, VariantKnobs::default())
            .unwrap()
            .audit(128, 1000)
            .unwrap();
        (r.total_macs() as f64 / 1e6, r.total_params(), r)
    };
    let (puig, _, _) = macs(Arch::Puigcerver);
    let (gnn, _, _) = macs(Arch::Gnn1dLstm);
    let (md, md_params, md_report) = macs(Arch::Mdlstm2d);
    let table = md_report.to_table();
    println!("{table}");
    let secs = start.elapsed().as_secs_f64();
    let within = |v: f64, r: f64| (v - r).abs() <= 0.10 * r;
    verdict(
        "A2",
        within(puig, 1609.0) && within(gnn, 216.0) && table.contains("reference") && secs < 1.0,
        format!(
            "puigcerver {puig:.1}M (ref 1609M), gnn1dlstm {gnn:.1}M (ref 216M), \
             2dlstm {md_params} params / {md:.1}M vs 836k / 344M ({:+.1}%); {secs:.3}s",
            100.0 * (md - 344.0) / 344.0
        ),
    );
}

/// Max relative error over input and parameter gradients of `f`.
fn check_all(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> mdlzoo::Result<Var>) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let res = grad_check(
            |tape, x| {
                let vars: Vec<Var> = (0..inputs.len())
                    .map(|j| if j == k { x } else { tape.constant(inputs[j].clone()) })
                    .collect();
                f(tape, &vars)
            },
            &inputs[k],
            1e-6,
        )
        .unwrap();
        worst = worst.max(res.max_rel_error);
    }
    worst
}

/// Scalar projection of `y` onto fixed random weights.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> mdlzoo::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tape.weighted_sum(y, &random(&shape, &mut rng, 1.0))
}

#[test]
fn a3_gradient_suite() {
    let start = Instant::now();
    let shapes = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: HashMap<&str, f64> = HashMap::new();
    let mut note = |name: &'static str, err: f64| {
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max(err);
    };
    for case in 0..shapes {
        let seed = 1000 + case as u64;
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(2..=6), rng.gen_range(2..=7));

        let kernel = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let stride = (rng.gen_range(1..=2), rng.gen_range(1..=2));
        let groups = if c == 2 { 2 } else { 1 };
        let out = groups * rng.gen_range(1..=2);
        let conv = ConvLayer::new(c, out, kernel).strided(stride).grouped(groups);
        let ws = conv.weight_shape();
        let inputs = vec![
            random(&[c, h, w], &mut rng, 1.0),
            random(&ws, &mut rng, 0.5),
            random(&[out], &mut rng, 0.5),
        ];
        note(
            "conv",
            check_all(inputs, |t, v| {
                let y = conv2d(t, v[0], &conv, v[1], Some(v[2]))?;
                probe(t, y, seed)
            }),
        );

        let gated = GatedConvLayer {
            channels: c,
            kernel: (3, 3),
        };
        let gs = gated.gate().weight_shape();
        let inputs = vec![
            random(&[c, h, w], &mut rng, 1.0),
            random(&gs, &mut rng, 0.5),
            random(&[c], &mut rng, 0.5),
        ];
        note(
            "gated_conv",
            check_all(inputs, |t, v| {
                let y = gated_conv(t, v[0], &gated, v[1], v[2])?;
                probe(t, y, seed)
            }),
        );

        let pool = PoolLayer {
            window: (rng.gen_range(1..=3), rng.gen_range(1..=3)),
            stride: (rng.gen_range(1..=2), rng.gen_range(1..=2)),
        };
        // distinct values keep the max away from ties
        let mut vals: Vec<f64> = (0..c * h * w).map(|i| i as f64 * 0.37).collect();
        vals.shuffle(&mut rng);
        let x = Tensor::new(&[c, h, w], vals).unwrap();
        note(
            "maxpool",
            check_all(vec![x], |t, v| {
                let y = maxpool2d(t, v[0], &pool)?;
                probe(t, y, seed)
            }),
        );

        let block = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        note(
            "tiling",
            check_all(vec![random(&[c, h, w], &mut rng, 1.0)], |t, v| {
                let y = tiling(t, v[0], block)?;
                probe(t, y, seed)
            }),
        );

        for (name, mode) in [
            ("collapse_max", CollapseMode::MaxpoolHeight),
            ("collapse_concat", CollapseMode::ConcatHeight),
        ] {
            let mut vals: Vec<f64> = (0..c * h * w).map(|i| i as f64 * 0.29).collect();
            vals.shuffle(&mut rng);
            let x = Tensor::new(&[c, h, w], vals).unwrap();
            note(
                name,
                check_all(vec![x], |t, v| {
                    let y = collapse(t, v[0], mode)?;
                    probe(t, y, seed)
                }),
            );
        }

        let dirs = rng.gen_range(1..=2);
        let lin = LinearLayer {
            in_dim: rng.gen_range(1..=4),
            out_dim: rng.gen_range(1..=4),
            bias: true,
            directions: dirs,
        };
        let steps = rng.gen_range(1..=5);
        let inputs = vec![
            random(&[steps, dirs * lin.in_dim], &mut rng, 1.0),
            random(&lin.weight_shape(), &mut rng, 0.5),
            random(&lin.bias_shape(), &mut rng, 0.5),
        ];
        note(
            "linear",
            check_all(inputs, |t, v| {
                let y = linear(t, v[0], &lin, v[1], Some(v[2]))?;
                probe(t, y, seed)
            }),
        );

        note(
            "dropout_off",
            check_all(vec![random(&[c, h, w], &mut rng, 1.0)], |t, v| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let y = dropout(t, v[0], 0.5, false, &mut r)?;
                probe(t, y, seed)
            }),
        );

        let combine = if case % 2 == 0 { Combine::Concat } else { Combine::Sum };
        let l1 = Lstm1dLayer {
            input_dim: rng.gen_range(1..=3),
            hidden: rng.gen_range(1..=3),
            combine,
        };
        let [ws, us, bs] = l1.shapes();
        let inputs = vec![
            random(&[rng.gen_range(1..=5), l1.input_dim], &mut rng, 1.0),
            random(&ws, &mut rng, 0.6),
            random(&us, &mut rng, 0.6),
            random(&bs, &mut rng, 0.6),
        ];
        note(
            "lstm1d",
            check_all(inputs, |t, v| {
                let y = lstm1d(t, v[0], &l1, v[1], v[2], v[3])?;
                probe(t, y, seed)
            }),
        );

        let md = Mdlstm2dLayer {
            input_dim: rng.gen_range(1..=2),
            hidden: rng.gen_range(1..=2),
            grouped_input: case % 3 == 0,
            half_forget: case % 4 == 1,
        };
        let [ws, us, bs] = md.shapes();
        let inputs = vec![
            random(
                &[md.input_channels(), rng.gen_range(1..=4), rng.gen_range(1..=4)],
                &mut rng,
                1.0,
            ),
            random(&ws, &mut rng, 0.6),
            random(&us, &mut rng, 0.6),
            random(&bs, &mut rng, 0.6),
        ];
        // the probe spans all four direction blocks
        note(
            "mdlstm",
            check_all(inputs, |t, v| {
                let y = mdlstm2d(t, v[0], &md, v[1], v[2], v[3], Schedule::Raster)?;
                probe(t, y, seed)
            }),
        );

        let classes = rng.gen_range(2..=5);
        let frames = rng.gen_range(3..=8);
        let label_len = rng.gen_range(0..=frames.min(3) / 2 + 1).min(frames / 2);
        let labels: Vec<usize> = (0..label_len).map(|_| rng.gen_range(1..classes)).collect();
        note(
            "ctc",
            check_all(vec![random(&[frames, classes], &mut rng, 2.0)], |t, v| {
                ctc_loss_var(t, v[0], &labels)
            }),
        );
    }
    let secs = start.elapsed().as_secs_f64();
    let mut names: Vec<_> = worst.iter().collect();
    names.sort_by_key(|(n, _)| **n);
    let summary: Vec<String> = names.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    let pass = worst.values().all(|&e| e < 1e-5) && worst.len() == 11 && secs < 300.0;
    verdict(
        "A3",
        pass,
        format!("{shapes} shapes each; max rel error {}; {secs:.1}s", summary.join(", ")),
    );
}

/// Probability of `labels` by summing every length-T path that collapses to it.
fn brute_force_prob(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let (t, c) = (probs.len(), probs[0].len());
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = usize::MAX;
        for &k in &path {
            if k != prev && k != 0 {
                collapsed.push(k);
            }
            prev = k;
        }
        if collapsed == labels {
            total += path.iter().enumerate().map(|(i, &k)| probs[i][k]).product::<f64>();
        }
        let mut i = 0;
        loop {
            if i == t {
                return total;
            }
            path[i] += 1;
            if path[i] < c {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn softmax_rows(logits: &Tensor<f64>) -> Vec<Vec<f64>> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Every label sequence reachable in `t` frames with its total probability.
fn all_label_probs(probs: &[Vec<f64>]) -> HashMap<Vec<usize>, f64> {
    let (t, c) = (probs.len(), probs[0].len());
    let mut out: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut path = vec![0usize; t];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = usize::MAX;
        for &k in &path {
            if k != prev && k != 0 {
                collapsed.push(k);
            }
            prev = k;
        }
        *out.entry(collapsed).or_insert(0.0) += path.iter().enumerate().map(|(i, &k)| probs[i][k]).product::<f64>();
        let mut i = 0;
        loop {
            if i == t {
                return out;
            }
            path[i] += 1;
            if path[i] < c {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

#[test]
fn a4_ctc_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let (mut loss_cases, mut loss_err) = (0, 0.0f64);
    while loss_cases < 600 {
        let t = rng.gen_range(1..=6);
        let c = rng.gen_range(2..=4);
        let len = rng.gen_range(0..=3);
        let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(1..c)).collect();
        let logits = random(&[t, c], &mut rng, 3.0);
        let expect = brute_force_prob(&softmax_rows(&logits), &labels);
        match ctc_loss(&logits, &labels) {
            Ok((loss, _)) => {
                assert!(expect > 0.0);
                loss_err = loss_err.max((loss - (-expect.ln())).abs());
            }
            Err(_) => assert_eq!(expect, 0.0, "rejected an alignable instance"),
        }
        loss_cases += 1;
    }
    let (mut beam_cases, mut beam_mismatch) = (0, 0);
    for _ in 0..300 {
        let t = rng.gen_range(1..=4);
        let c = rng.gen_range(2..=4);
        let probs = softmax_rows(&random(&[t, c], &mut rng, 3.0));
        let table = all_label_probs(&probs);
        let (best, best_p) = table
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(l, p)| (l.clone(), *p))
            .unwrap();
        let post = PosteriorMatrix::new(t, c, probs.concat()).unwrap();
        let d = prefix_beam_decode(&post, &FusionConfig::new(table.len() + 1)).unwrap();
        if d.labels != best || (d.score - best_p.ln()).abs() > 1e-9 {
            beam_mismatch += 1;
        }
        beam_cases += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "A4",
        loss_err < 1e-9 && beam_mismatch == 0 && secs < 120.0,
        format!(
            "{loss_cases} loss cases, max |Δ| {loss_err:.1e}; {beam_cases} exhaustive beam cases, {beam_mismatch} mismatches; {secs:.1}s"
        ),
    );
}

#[test]
fn a5_wavefront_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let layer = Mdlstm2dLayer {
            input_dim: rng.gen_range(1..=3),
            hidden: rng.gen_range(1..=3),
            grouped_input: rng.gen_bool(0.5),
            half_forget: rng.gen_bool(0.3),
        };
        let (h, w) = (rng.gen_range(1..=9), rng.gen_range(1..=9));
        let workers = rng.gen_range(1..=4);
        let [ws, us, bs] = layer.shapes();
        let x = random(&[layer.input_channels(), h, w], &mut rng, 1.0);
        let (wt, ut, bt) = (
            random(&ws, &mut rng, 0.7),
            random(&us, &mut rng, 0.7),
            random(&bs, &mut rng, 0.7),
        );
        let expect = mdlstm2d_reference(&x, &layer, &wt, &ut, &bt).unwrap();
        let mut tape = Tape::<f64>::new();
        let [xv, wv, uv, bv] = [x, wt, ut, bt].map(|t| tape.constant(t));
        let y = mdlstm2d(&mut tape, xv, &layer, wv, uv, bv, Schedule::Wavefront { workers }).unwrap();
        worst = worst.max(tape.value(y).max_abs_diff(&expect));
    }
    let report = bench_wavefront(&BenchArgs {
        height: 64,
        width: 500,
        hidden: 32,
        input_dim: 4,
        workers: vec![1, 2, 4],
        repeats: 5,
        seed: 0,
    })
    .unwrap();
    println!("{}", report.table());
    let speedup = report.speedup(4).unwrap();
    verdict(
        "A5",
        worst < 1e-9 && report.rows.len() == 3,
        format!(
            "200 configs, max |Δ| {worst:.1e}; 64x500 h=32 speedup at 4 workers {speedup:.2}x \
             (soft target 1.5x, {} CPUs available)",
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    );
}

/// Seeded 64-line hard corpus of short lines shared by A6 and A8.
fn overfit_examples() -> &'static Vec<Example> {
    static EXAMPLES: OnceLock<Vec<Example>> = OnceLock::new();
    EXAMPLES.get_or_init(|| {
        let charset = Charset::default_set();
        let cfg = CorpusConfig {
            lines: 64,
            difficulty: Difficulty::Hard,
            seed: 6,
            chars: (3, 6),
            height: 128,
        };
        let lines: Vec<_> = generate_samples(&cfg, &charset, &TextSource::bundled(&charset))
            .unwrap()
            .into_iter()
            .map(|s| (s.image, s.transcript))
            .collect();
        prepare_examples(&lines, &charset, 128).unwrap().examples
    })
}

fn overfit(arch: Arch) -> TrainOutcome {
    let charset = Charset::default_set();
    let knobs = VariantKnobs {
        dropout: DropoutPreset::None,
        ..Default::default()
    };
    let mut net = Network::<f32>::zeros(NetworkSpec::build(arch, knobs).unwrap()).unwrap();
    glorot_init(&mut net, 0);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 200,
        target_cer: Some(2.0),
        ..Default::default()
    };
    let start = Instant::now();
    let outcome = train(net, overfit_examples(), &[], &charset, &cfg, &mut |e| {
        if e.epoch % 10 == 0 {
            println!("{} epoch {e}\t{:.0}s", arch.name(), start.elapsed().as_secs_f64());
        }
    })
    .unwrap();
    println!(
        "{}: best train CER {:.2}% at epoch {}, {:?}, {:.0}s",
        arch.name(),
        outcome.best_cer,
        outcome.best_epoch,
        outcome.stop,
        start.elapsed().as_secs_f64()
    );
    outcome
}

fn overfit_gnn() -> &'static TrainOutcome {
    static GNN: OnceLock<TrainOutcome> = OnceLock::new();
    GNN.get_or_init(|| overfit(Arch::Gnn1dLstm))
}

fn scripted_patience_ok() -> bool {
    let mut stop = EarlyStopping::new(20);
    let mut decisions = vec![stop.observe(1, 50.0), stop.observe(2, 40.0)];
    for epoch in 3..=21 {
        decisions.push(stop.observe(epoch, if epoch % 2 == 0 { 40.0 } else { 45.0 }));
    }
    let before = decisions[2..].iter().all(|d| *d == StopDecision::Continue);
    let last = stop.observe(22, 40.0);
    decisions[0] == StopDecision::Improved
        && decisions[1] == StopDecision::Improved
        && before
        && last == StopDecision::Stop
        && stop.best_epoch() == 2
}

#[test]
fn a6_overfit_runs() {
    let patience = scripted_patience_ok();
    let gnn = overfit_gnn();
    let md = &overfit(Arch::Mdlstm2d);
    let loss_drops = |o: &TrainOutcome| o.log.len() >= 10 && o.log[9].train_loss < o.log[0].train_loss;
    let reached = |o: &TrainOutcome| o.best_cer < 2.0 && o.best_epoch <= 200 && o.stop == StopReason::Target;
    verdict(
        "A6",
        patience && reached(gnn) && reached(md) && loss_drops(gnn) && loss_drops(md),
        format!(
            "gnn1dlstm {:.2}% at epoch {}, 2dlstm {:.2}% at epoch {} (64 hard lines, lr 1e-3, no dropout, seed 0); \
             patience script {}",
            gnn.best_cer,
            gnn.best_epoch,
            md.best_cer,
            md.best_epoch,
            if patience { "ok" } else { "wrong" }
        ),
    );
}

const A7_SEED: u64 = 7;

#[test]
fn a7_lm_direction() {
    let charset = Charset::default_set();
    // six characters of context, so orders above five have something to model
    let source = TextSource::Markov(MarkovText::from_text(BUNDLED_SNIPPET, 6, charset.chars(), 0.01));
    let chars = (4, 12);
    let corpus = |lines, seed| {
        let cfg = CorpusConfig {
            lines,
            difficulty: Difficulty::Medium,
            seed,
            chars,
            height: 128,
        };
        let samples: Vec<_> = generate_samples(&cfg, &charset, &source)
            .unwrap()
            .into_iter()
            .map(|s| (s.image, s.transcript))
            .collect();
        prepare_examples(&samples, &charset, 128).unwrap()
    };
    let train_set = corpus(128, A7_SEED).examples;
    let valid = corpus(500, A7_SEED + 1);

    let knobs = VariantKnobs {
        dropout: DropoutPreset::None,
        ..Default::default()
    };
    let mut net = Network::<f32>::zeros(NetworkSpec::build(Arch::Gnn1dLstm, knobs).unwrap()).unwrap();
    glorot_init(&mut net, A7_SEED);
    // stops as soon as training CER falls under 40%
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 80,
        target_cer: Some(40.0),
        seed: A7_SEED,
        ..Default::default()
    };
    let outcome = train(net, &train_set, &[], &charset, &cfg, &mut |_| {}).unwrap();
    let net = outcome.best;

    let lm_text = generate_transcripts(
        &CorpusConfig {
            lines: 5000,
            difficulty: Difficulty::Medium,
            seed: A7_SEED + 2,
            chars: (4, 32),
            height: 128,
        },
        &source,
    );
    let sentences: Vec<Vec<String>> = lm_text.iter().map(|l| char_tokens(l)).collect();
    let extra: Vec<String> = charset
        .chars()
        .iter()
        .flat_map(|c| char_tokens(&c.to_string()))
        .collect();
    let lm7 = NGramLm::estimate(&sentences, 7, &extra).unwrap();
    let lm5 = NGramLm::estimate(&sentences, 5, &extra).unwrap();

    let labels: Vec<Vec<usize>> = train_set.iter().map(|e| e.labels.clone()).collect();
    let priors = estimate_priors(&labels, charset.class_count());
    let symbols = charset.class_symbols();
    let dev = corpus(100, A7_SEED + 3);
    let dev_posts = posteriors(&net, &dev.examples, 1).unwrap();
    let valid_posts = posteriors(&net, &valid.examples, 1).unwrap();
    let run = |set: &Prepared, posts: &[PosteriorMatrix], lm: Option<&NGramLm>, lm_weight: f64, bonus: f64| {
        let decoding = match lm {
            None => Decoding::Greedy,
            Some(lm) => {
                let mut f = FusionConfig::new(16);
                f.priors = Some(&priors);
                f.symbols = Some(&symbols);
                f.char_lm = Some(lm);
                f.lm_weight = lm_weight;
                f.insertion_bonus = bonus;
                Decoding::Beam(f)
            }
        };
        score(
            &set.examples,
            decode_all(posts, &charset, &decoding).unwrap(),
            set.oov_lines,
        )
        .cer
    };

    // one fusion setting, chosen on the dev split with the 7-gram, is shared by both orders
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for lm_weight in [0.3, 0.5] {
        for bonus in [2.0, 2.5, 3.0, 3.5] {
            let cer = run(&dev, &dev_posts, Some(&lm7), lm_weight, bonus);
            if cer < best.0 {
                best = (cer, lm_weight, bonus);
            }
        }
    }
    let (_, lm_weight, bonus) = best;
    let greedy = run(&valid, &valid_posts, None, 0.0, 0.0);
    let cer7 = run(&valid, &valid_posts, Some(&lm7), lm_weight, bonus);
    let cer5 = run(&valid, &valid_posts, Some(&lm5), lm_weight, bonus);
    verdict(
        "A7",
        cer7 <= greedy && cer7 <= cer5,
        format!(
            "seed {A7_SEED}, model stopped at train CER {:.1}% (epoch {}); dev-tuned lm weight {lm_weight}, \
             bonus {bonus}; 500 valid lines: greedy {greedy:.2}%, 5-gram {cer5:.2}%, 7-gram {cer7:.2}%",
            outcome.best_cer, outcome.best_epoch
        ),
    );
}

#[test]
fn a8_attention_confinement() {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let cnn_knobs = VariantKnobs::default();
    let mut cnn = Network::<f64>::zeros(NetworkSpec::build(Arch::Cnn, cnn_knobs).unwrap()).unwrap();
    glorot_init(&mut cnn, 8);
    let spec = cnn.spec().clone();
    let mut violations = 0;
    let probes = 50;
    for i in 0..probes {
        let (h, w) = (128, rng.gen_range(64..=256));
        let x = random(&[1, h, w], &mut rng, 1.0);
        let frames = spec.output_frames(w);
        let columns: Vec<usize> = if i == 0 {
            (0..frames).collect()
        } else {
            let k = rng.gen_range(1..=3.min(frames));
            let mut all: Vec<usize> = (0..frames).collect();
            all.shuffle(&mut rng);
            all.truncate(k);
            all
        };
        let class = rng.gen_range(0..spec.class_count());
        let map = attention_map_columns(&cnn, &x, class, Some(&columns), 1.0).unwrap();
        let union = field_union(&spec, h, w, &columns).unwrap();
        violations += map.support(0.0).iter().filter(|&&(y, xx)| !union[y * w + xx]).count();
    }

    let gnn = &overfit_gnn().best;
    let gnn64 = gnn.cast::<f64>();
    let gspec = gnn.spec().clone();
    let examples = overfit_examples();
    let mut beyond = 0;
    let gnn_probes = 20;
    for ex in examples.iter().take(gnn_probes) {
        let (h, w) = (ex.image.shape()[1], ex.image.shape()[2]);
        let logits = gnn.infer(&ex.image, Schedule::Raster).unwrap();
        let c = logits.shape()[1];
        let argmax: Vec<usize> = logits
            .data()
            .chunks(c)
            .map(|r| r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0)
            .collect();
        let candidates: Vec<usize> = (0..argmax.len()).filter(|&t| argmax[t] != 0).collect();
        let t = *candidates.choose(&mut rng).unwrap_or(&0);
        let map = attention_map_columns(&gnn64, &ex.image.cast::<f64>(), argmax[t], Some(&[t]), 1.0).unwrap();
        let union = field_union(&gspec, h, w, &[t]).unwrap();
        let threshold = 0.01 * map.max_abs();
        if map.support(threshold).iter().any(|&(y, xx)| !union[y * w + xx]) {
            beyond += 1;
        }
    }
    let fraction = beyond as f64 / gnn_probes as f64;
    verdict(
        "A8",
        violations == 0 && fraction >= 0.9,
        format!(
            "cnn: {violations} support pixels outside the receptive-field union over {probes} inputs; \
             gnn1dlstm: support (≥1% of max) exceeds the encoder field on {beyond}/{gnn_probes} probes"
        ),
    );
}

#[test]
#[ignore = "slow suite: several CPU hours"]
fn a9_recurrence_necessity() {
    let charset = Charset::default_set();
    let source = TextSource::bundled(&charset);
    let corpus = |lines, seed| {
        let cfg = CorpusConfig {
            lines,
            difficulty: Difficulty::Hard,
            seed,
            chars: (3, 6),
            height: 128,
        };
        let samples: Vec<_> = generate_samples(&cfg, &charset, &source)
            .unwrap()
            .into_iter()
            .map(|s| (s.image, s.transcript))
            .collect();
        prepare_examples(&samples, &charset, 128).unwrap().examples
    };
    let train_set = corpus(1000, 9);
    let valid = corpus(200, 10);
    let mut cer = HashMap::new();
    for arch in [Arch::Cnn, Arch::Gnn1dLstm, Arch::Mdlstm2d] {
        let knobs = VariantKnobs {
            dropout: DropoutPreset::None,
            ..Default::default()
        };
        let mut net = Network::<f32>::zeros(NetworkSpec::build(arch, knobs).unwrap()).unwrap();
        glorot_init(&mut net, 0);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 200,
            ..Default::default()
        };
        let start = Instant::now();
        let outcome = train(net, &train_set, &valid, &charset, &cfg, &mut |e| {
            println!("{} {e}\t{:.0}s", arch.name(), start.elapsed().as_secs_f64())
        })
        .unwrap();
        println!(
            "{}: valid CER {:.2}% at epoch {}",
            arch.name(),
            outcome.best_cer,
            outcome.best_epoch
        );
        cer.insert(arch, outcome.best_cer);
    }
    let (c, g, m) = (cer[&Arch::Cnn], cer[&Arch::Gnn1dLstm], cer[&Arch::Mdlstm2d]);
    verdict(
        "A9",
        c > g && c > m,
        format!(
            "valid CER: cnn {c:.2}%, gnn1dlstm {g:.2}%, 2dlstm {m:.2}% (1000 train / 200 valid hard lines, seed 0)"
        ),
    );
}
