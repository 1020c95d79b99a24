//! Training loop (Glorot init, RMSProp, width-bucketed minibatches, early
//! stopping) and Levenshtein-based evaluation.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::ctc::{ctc_loss_var, greedy_decode, min_frames, prefix_beam_decode, FusionConfig, PosteriorMatrix};
use crate::error::{Error, Result};
use crate::netzoo::{ForwardMode, Network, ParamRole};
use crate::recurrent::Schedule;
use crate::synthline::{preprocess_to, splitmix64, Charset, GrayImage};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub rho: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Rescale the batch gradient to this global L2 norm when exceeded.
    pub clip_norm: Option<f64>,
    pub workers: usize,
    /// Stop as soon as validation CER (%) falls below this value.
    pub target_cer: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            patience: 20,
            rho: 0.9,
            epsilon: 1e-8,
            max_epochs: 200,
            seed: 0,
            clip_norm: None,
            workers: 1,
            target_cer: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 || self.workers == 0 {
            return Err(Error::invalid(
                "batch size, patience, max epochs and workers must be at least 1",
            ));
        }
        if !(0.0..1.0).contains(&self.rho) || self.epsilon <= 0.0 {
            return Err(Error::invalid("rmsprop needs 0 <= rho < 1 and epsilon > 0"));
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0 || c.is_nan()) {
            return Err(Error::invalid("clip norm must be positive"));
        }
        Ok(())
    }
}

/// Uniform Glorot weights, zero biases.
pub fn glorot_init<T: Real>(net: &mut Network<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roles: Vec<ParamRole> = net.param_infos().iter().map(|p| p.role).collect();
    for (param, role) in net.params_mut().iter_mut().zip(roles) {
        match role {
            ParamRole::Bias => param.data_mut().iter_mut().for_each(|v| *v = T::zero()),
            ParamRole::Weight { fan_in, fan_out } => {
                let bound = glorot_bound(fan_in, fan_out);
                for v in param.data_mut() {
                    *v = T::from_f64(rng.gen_range(-bound..=bound));
                }
            }
        }
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; nothing was updated.
    SkippedNonFinite {
        tensor: usize,
        index: usize,
    },
}

/// RMSProp without momentum.
#[derive(Clone, Debug)]
pub struct RmsProp<T: Real> {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    mean_square: Vec<Tensor<T>>,
}

impl<T: Real> RmsProp<T> {
    pub fn new(learning_rate: f64, rho: f64, epsilon: f64, params: &[Tensor<T>]) -> Self {
        Self {
            learning_rate,
            rho,
            epsilon,
            mean_square: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn mean_square(&self) -> &[Tensor<T>] {
        &self.mean_square
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<StepOutcome> {
        if params.len() != grads.len() || params.len() != self.mean_square.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} tensors, got {} params and {} grads",
                self.mean_square.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "parameter {k} has shape {:?} but its gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if let Some(index) = g.first_non_finite() {
                log::warn!("non-finite gradient in tensor {k} at {index}; step skipped");
                return Ok(StepOutcome::SkippedNonFinite { tensor: k, index });
            }
        }
        let (rho, eps, lr) = (self.rho, self.epsilon, self.learning_rate);
        for ((p, g), a) in params.iter_mut().zip(grads).zip(&mut self.mean_square) {
            for ((pv, &gv), av) in p.data_mut().iter_mut().zip(g.data()).zip(a.data_mut()) {
                let gf = gv.as_f64();
                let acc = rho * av.as_f64() + (1.0 - rho) * gf * gf;
                *av = T::from_f64(acc);
                *pv = T::from_f64(pv.as_f64() - lr * gf / (acc + eps).sqrt());
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescale to `max_norm` if larger; returns the original norm when clipped.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> Option<f64> {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        grads.iter_mut().for_each(|g| *g = g.scale(s));
        Some(norm)
    } else {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly lower CER.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, cer: f64) -> StopDecision {
        if cer < self.best {
            self.best = cer;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// A preprocessed line ready for the network.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Tensor<f32>,
    pub labels: Vec<usize>,
    pub transcript: String,
}

impl Example {
    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub examples: Vec<Example>,
    /// Lines dropped for characters outside the charset.
    pub oov_lines: usize,
}

pub fn prepare_examples(lines: &[(GrayImage, String)], charset: &Charset, height: usize) -> Result<Prepared> {
    let results: Vec<Option<Example>> = lines
        .par_iter()
        .map(|(image, text)| {
            let Ok(labels) = charset.encode(text) else {
                return Ok(None);
            };
            Ok(Some(Example {
                image: preprocess_to(image, height)?,
                labels,
                transcript: text.clone(),
            }))
        })
        .collect::<Result<_>>()?;
    let oov_lines = results.iter().filter(|r| r.is_none()).count();
    if oov_lines > 0 {
        log::warn!("{oov_lines} line(s) contain characters outside the charset and are excluded");
    }
    Ok(Prepared {
        examples: results.into_iter().flatten().collect(),
        oov_lines,
    })
}

/// One epoch's learning-curve entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_cer: f64,
    pub valid_wer: f64,
    pub skipped_steps: usize,
    pub clipped_steps: usize,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.4}\t{:.4}",
            self.epoch, self.train_loss, self.valid_cer, self.valid_wer
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Target,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best-validation epoch.
    pub best: Network<f32>,
    pub best_epoch: usize,
    pub best_cer: f64,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
    /// Lines with fewer output frames than CTC needs; never trained on.
    pub unalignable_lines: usize,
}

/// Loss and parameter gradients of one line; `None` if CTC cannot align it.
pub fn line_gradients(
    net: &Network<f32>,
    example: &Example,
    dropout_seed: Option<u64>,
    schedule: Schedule,
) -> Result<Option<(f64, Vec<Tensor<f32>>)>> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let x = tape.constant(example.image.clone());
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let mut mode = ForwardMode {
        dropout_rng: rng.as_mut().map(|r| r as &mut dyn rand::RngCore),
        schedule,
    };
    let logits = net.forward(&mut tape, &bound, x, &mut mode)?;
    let loss = match ctc_loss_var(&mut tape, logits, &example.labels) {
        Ok(l) => l,
        Err(Error::Unalignable { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let value = tape.value(loss).data()[0].as_f64();
    let mut grads = tape.backward(&[(loss, Tensor::scalar(1.0))])?;
    let out = bound
        .vars()
        .iter()
        .zip(net.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(Some((value, out)))
}

/// Shuffled batches of similar width.
pub fn width_batches<R: Rng + ?Sized>(widths: &[usize], batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    const BUCKET: usize = 64;
    let mut order: Vec<usize> = (0..widths.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| widths[i] / BUCKET);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {workers} worker threads: {e}")))
}

/// Train from the current parameters of `net`. An empty `valid` set
/// validates on `train`.
pub fn train(
    net: Network<f32>,
    train: &[Example],
    valid: &[Example],
    charset: &Charset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if net.spec().class_count() != charset.class_count() {
        return Err(Error::invalid(format!(
            "network emits {} classes but the charset needs {}",
            net.spec().class_count(),
            charset.class_count()
        )));
    }
    let alignable: Vec<usize> = (0..train.len())
        .filter(|&i| net.spec().output_frames(train[i].width()) >= min_frames(&train[i].labels))
        .collect();
    let unalignable_lines = train.len() - alignable.len();
    if unalignable_lines > 0 {
        log::warn!("{unalignable_lines} training line(s) are too narrow for their transcripts and are skipped");
    }
    if alignable.is_empty() {
        return Err(Error::invalid(
            "no training line has enough output frames for its transcript",
        ));
    }
    let valid = if valid.is_empty() { train } else { valid };
    let workers = pool(cfg.workers)?;
    let mut net = net;
    let mut opt = RmsProp::new(cfg.learning_rate, cfg.rho, cfg.epsilon, net.params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = net.clone();
    let mut log = Vec::new();
    let widths: Vec<usize> = alignable.iter().map(|&i| train[i].width()).collect();
    let mut stop = StopReason::MaxEpochs;
    let schedule = Schedule::Wavefront { workers: 1 };

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ (epoch as u64) << 32));
        let batches = width_batches(&widths, cfg.batch_size, &mut rng);
        let (mut loss_sum, mut loss_lines, mut skipped, mut clipped) = (0.0, 0usize, 0, 0);
        for (b, batch) in batches.iter().enumerate() {
            let results: Vec<Option<(f64, Vec<Tensor<f32>>)>> = workers.install(|| {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(j, &k)| {
                        let seed = splitmix64(cfg.seed ^ splitmix64(((epoch * 1_000_003 + b) * 4099 + j) as u64));
                        line_gradients(&net, &train[alignable[k]], Some(seed), schedule)
                    })
                    .collect::<Result<_>>()
            })?;
            let mut sum: Option<Vec<Tensor<f32>>> = None;
            let mut n = 0usize;
            for (loss, grads) in results.into_iter().flatten() {
                loss_sum += loss;
                loss_lines += 1;
                n += 1;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let Some(mut grads) = sum else { continue };
            let inv = 1.0 / n as f32;
            grads.iter_mut().for_each(|g| *g = g.scale(inv));
            if let Some(max) = cfg.clip_norm {
                if let Some(norm) = clip_grad_norm(&mut grads, max) {
                    log::info!("epoch {epoch} batch {b}: gradient norm {norm:.3e} clipped to {max}");
                    clipped += 1;
                }
            }
            if let StepOutcome::SkippedNonFinite { .. } = opt.step(net.params_mut(), &grads)? {
                skipped += 1;
            }
        }
        let report = workers.install(|| evaluate(&net, valid, charset, &Decoding::Greedy, 1))?;
        let entry = EpochLog {
            epoch,
            train_loss: if loss_lines > 0 {
                loss_sum / loss_lines as f64
            } else {
                f64::NAN
            },
            valid_cer: report.cer,
            valid_wer: report.wer,
            skipped_steps: skipped,
            clipped_steps: clipped,
        };
        on_epoch(&entry);
        log.push(entry);
        let decision = stopper.observe(epoch, report.cer);
        if decision == StopDecision::Improved {
            best = net.clone();
        }
        if matches!(cfg.target_cer, Some(t) if report.cer < t) {
            stop = StopReason::Target;
            break;
        }
        if decision == StopDecision::Stop {
            stop = StopReason::Patience;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch: stopper.best_epoch(),
        best_cer: stopper.best(),
        log,
        stop,
        unalignable_lines,
    })
}

// ---------------------------------------------------------------------------
// evaluation

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    fn add(&mut self, o: &EditCounts) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
    }
}

/// One minimal edit script from `reference` to `hypothesis`.
pub fn edit_ops<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]) {
            if reference[i - 1] != hypothesis[j - 1] {
                counts.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineResult {
    pub reference: String,
    pub hypothesis: String,
    pub chars: EditCounts,
    pub words: EditCounts,
    /// Set when beam search fell back to the greedy path.
    pub fell_back: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Percent.
    pub cer: f64,
    /// Percent.
    pub wer: f64,
    pub lines: Vec<LineResult>,
    pub chars: EditCounts,
    pub words: EditCounts,
    pub reference_chars: usize,
    pub reference_words: usize,
    pub oov_lines: usize,
}

impl EvalReport {
    /// Aggregate `(reference, hypothesis)` pairs.
    pub fn from_pairs<I: IntoIterator<Item = (String, String)>>(pairs: I) -> Self {
        let lines: Vec<LineResult> = pairs
            .into_iter()
            .map(|(reference, hypothesis)| {
                let rc: Vec<char> = reference.chars().collect();
                let hc: Vec<char> = hypothesis.chars().collect();
                let rw: Vec<&str> = reference.split_whitespace().collect();
                let hw: Vec<&str> = hypothesis.split_whitespace().collect();
                LineResult {
                    chars: edit_ops(&rc, &hc),
                    words: edit_ops(&rw, &hw),
                    reference,
                    hypothesis,
                    fell_back: false,
                }
            })
            .collect();
        Self::aggregate(lines, 0)
    }

    fn aggregate(lines: Vec<LineResult>, oov_lines: usize) -> Self {
        let mut chars = EditCounts::default();
        let mut words = EditCounts::default();
        let (mut rc, mut rw) = (0, 0);
        for l in &lines {
            chars.add(&l.chars);
            words.add(&l.words);
            rc += l.reference.chars().count();
            rw += l.reference.split_whitespace().count();
        }
        let pct = |e: usize, n: usize| if n == 0 { 0.0 } else { 100.0 * e as f64 / n as f64 };
        Self {
            cer: pct(chars.total(), rc),
            wer: pct(words.total(), rw),
            lines,
            chars,
            words,
            reference_chars: rc,
            reference_words: rw,
            oov_lines,
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "CER {:.2}% ({} sub, {} ins, {} del over {} chars)  WER {:.2}% over {} words  lines {}  oov-excluded {}",
            self.cer,
            self.chars.substitutions,
            self.chars.insertions,
            self.chars.deletions,
            self.reference_chars,
            self.wer,
            self.reference_words,
            self.lines.len(),
            self.oov_lines
        )
    }
}

#[derive(Clone, Debug)]
pub enum Decoding<'a> {
    Greedy,
    Beam(FusionConfig<'a>),
}

/// Softmax posteriors of every example, computed in parallel.
pub fn posteriors(net: &Network<f32>, examples: &[Example], workers: usize) -> Result<Vec<PosteriorMatrix>> {
    let run = || {
        examples
            .par_iter()
            .map(|e| PosteriorMatrix::from_logits(&net.infer(&e.image, Schedule::Wavefront { workers: 1 })?))
            .collect::<Result<Vec<_>>>()
    };
    if workers == 1 && rayon::current_num_threads() == 1 {
        run()
    } else {
        pool(workers)?.install(run)
    }
}

/// Decode posteriors into text.
pub fn decode_all(
    posts: &[PosteriorMatrix],
    charset: &Charset,
    decoding: &Decoding<'_>,
) -> Result<Vec<(String, bool)>> {
    posts
        .par_iter()
        .map(|p| match decoding {
            Decoding::Greedy => Ok((charset.decode(&greedy_decode(p)), false)),
            Decoding::Beam(cfg) => {
                let d = prefix_beam_decode(p, cfg)?;
                Ok((charset.decode(&d.labels), d.fell_back))
            }
        })
        .collect()
}

pub fn score(examples: &[Example], decoded: Vec<(String, bool)>, oov_lines: usize) -> EvalReport {
    let mut report = EvalReport::from_pairs(
        examples
            .iter()
            .zip(&decoded)
            .map(|(e, (h, _))| (e.transcript.clone(), h.clone())),
    );
    for (line, (_, fell_back)) in report.lines.iter_mut().zip(decoded) {
        line.fell_back = fell_back;
    }
    report.oov_lines = oov_lines;
    report
}

pub fn evaluate(
    net: &Network<f32>,
    examples: &[Example],
    charset: &Charset,
    decoding: &Decoding<'_>,
    workers: usize,
) -> Result<EvalReport> {
    let posts = posteriors(net, examples, workers)?;
    let decoded = decode_all(&posts, charset, decoding)?;
    Ok(score(examples, decoded, 0))
}
