//! Command-line front end.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{attention_map_columns, render_overlay};
use crate::autodiff::Tape;
use crate::charlm::{char_tokens, word_tokens, LexiconTrie, NGramLm};
use crate::ctc::{estimate_priors, FusionConfig};
use crate::error::{Error, Result};
use crate::layers::CollapseMode;
use crate::netzoo::{
    load_checkpoint, save_checkpoint, Arch, CheckpointMeta, DropoutPreset, Network, NetworkSpec, VariantKnobs,
};
use crate::recurrent::{mdlstm2d, mdlstm2d_reference, Mdlstm2dLayer, Schedule};
use crate::synthline::{
    load_corpus, make_corpus, preprocess_to, Charset, CorpusConfig, Difficulty, GrayImage, TextSource, CHARSET_FILE,
};
use crate::tensor::Tensor;
use crate::trainer::{decode_all, glorot_init, posteriors, prepare_examples, score, train, Decoding, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "mdlzoo",
    version,
    about = "Text-line recognition: data, training, decoding and analysis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(untagged)]
pub enum Command {
    /// Render a synthetic line corpus.
    GenData(GenDataArgs),
    /// Train a network with CTC and early stopping.
    Train(TrainArgs),
    /// Score a model on a manifest, with and without a language model.
    Eval(EvalArgs),
    /// Transcribe PGM line images.
    Decode(DecodeArgs),
    /// Estimate an n-gram model and write it as ARPA.
    LmTrain(LmTrainArgs),
    /// Per-layer parameter and MAC table.
    Audit(AuditArgs),
    /// Input-gradient attention map of one output class.
    Attend(AttendArgs),
    /// Time the 2D-LSTM wavefront at several worker counts.
    BenchWavefront(BenchArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Decode(_) => "decode",
            Command::LmTrain(_) => "lm-train",
            Command::Audit(_) => "audit",
            Command::Attend(_) => "attend",
            Command::BenchWavefront(_) => "bench-wavefront",
        }
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollapseArg {
    Maxpool,
    Concat,
}

impl From<CollapseArg> for CollapseMode {
    fn from(c: CollapseArg) -> Self {
        match c {
            CollapseArg::Maxpool => CollapseMode::MaxpoolHeight,
            CollapseArg::Concat => CollapseMode::ConcatHeight,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LmUnit {
    Char,
    Word,
}

#[derive(Debug, Args, Serialize)]
pub struct ArchArgs {
    #[arg(long, default_value = "gnn1dlstm")]
    pub arch: Arch,
    /// -2, 0 or 4 encoder convolutions relative to the reference stack.
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    pub encoder_extra_convs: i32,
    #[arg(long)]
    pub decoder_blstm: Option<usize>,
    #[arg(long, value_enum)]
    pub collapse: Option<CollapseArg>,
    #[arg(long, default_value_t = 1.0)]
    pub depth: f64,
    #[arg(long, default_value = "medium")]
    pub dropout: DropoutPreset,
    #[arg(long, default_value_t = 110)]
    pub class_count: usize,
}

impl ArchArgs {
    pub fn spec(&self) -> Result<NetworkSpec> {
        let knobs = VariantKnobs {
            encoder_extra_convs: self.encoder_extra_convs,
            decoder_blstm_count: self.decoder_blstm,
            collapse_mode: self.collapse.map(Into::into),
            depth_multiplier: self.depth,
            dropout: self.dropout,
            class_count: self.class_count,
        };
        NetworkSpec::build(self.arch, knobs)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 64)]
    pub lines: usize,
    #[arg(long, default_value = "medium")]
    pub difficulty: Difficulty,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub min_chars: usize,
    #[arg(long, default_value_t = 32)]
    pub max_chars: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    /// Transcripts, one per line, used in order instead of the Markov source.
    #[arg(long)]
    pub text: Option<PathBuf>,
    /// Charset file, one symbol per line.
    #[arg(long)]
    pub charset: Option<PathBuf>,
    #[arg(long, default_value_t = default_workers())]
    pub workers: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Learning-curve TSV; defaults to `<out>.curve.tsv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub charset: Option<PathBuf>,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, default_value_t = 200)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub target_cer: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = default_workers())]
    pub workers: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeFlags {
    /// Beam width; 0 decodes greedily.
    #[arg(long, default_value_t = 16)]
    pub beam: usize,
    /// Character n-gram model (ARPA).
    #[arg(long)]
    pub lm: Option<PathBuf>,
    /// Word n-gram model (ARPA).
    #[arg(long)]
    pub word_lm: Option<PathBuf>,
    /// Word list restricting the search, one word per line.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub lm_weight: f64,
    #[arg(long, default_value_t = 0.7)]
    pub prior_weight: f64,
    /// Log-score bonus per emitted character.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub insertion_bonus: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub decode: DecodeFlags,
    /// Per-line TSV of reference and hypothesis.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = default_workers())]
    pub workers: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[arg(long, default_value_t = default_workers())]
    pub workers: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct LmTrainArgs {
    /// Plain text, one sentence per line.
    #[arg(long, required_unless_present = "manifest")]
    pub text: Option<PathBuf>,
    /// Take sentences from a corpus manifest's transcripts.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub order: usize,
    #[arg(long, value_enum, default_value = "char")]
    pub unit: LmUnit,
    /// Symbols that always get unigram mass (char models).
    #[arg(long)]
    pub charset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AuditArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long, default_value_t = 1000)]
    pub width: usize,
    #[arg(long)]
    pub tsv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AttendArgs {
    /// Checkpoint; without it a Glorot-initialized `--arch` network is used.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub class: usize,
    /// Output columns to seed, comma separated; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub columns: Option<Vec<usize>>,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    /// Prefix of the written `.map.pgm`, `.overlay.ppm` and `.txt`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 500)]
    pub width: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub input_dim: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub workers: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    User = 1,
    Internal = 2,
}

pub fn exit_class(err: &Error) -> Exit {
    match err {
        Error::Tape(_) | Error::NonFinite { .. } => Exit::Internal,
        _ => Exit::User,
    }
}

/// Parse `argv`, run the subcommand and report its exit status.
pub fn main_with_args<I, S>(argv: I) -> Exit
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Exit::User } else { Exit::Success };
        }
    };
    match run(&cli.command) {
        Ok(()) => Exit::Success,
        Err(e) => {
            eprintln!("error: {e}");
            exit_class(&e)
        }
    }
}

/// `key = value` lines for every resolved flag.
pub fn resolved_config(cmd: &Command) -> String {
    let mut out = format!("# {} config\n", cmd.name());
    if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(cmd) {
        flatten_into(&mut out, "", &map);
    }
    out
}

fn flatten_into(out: &mut String, prefix: &str, map: &serde_json::Map<String, serde_json::Value>) {
    for (k, v) in map {
        match v {
            serde_json::Value::Object(inner) => flatten_into(out, prefix, inner),
            serde_json::Value::Null => out.push_str(&format!("{prefix}{k} = none\n")),
            serde_json::Value::String(s) => out.push_str(&format!("{prefix}{k} = {s}\n")),
            other => out.push_str(&format!("{prefix}{k} = {other}\n")),
        }
    }
}

pub fn run(cmd: &Command) -> Result<()> {
    print!("{}", resolved_config(cmd));
    match cmd {
        Command::GenData(a) => with_workers(a.workers, || gen_data(a)),
        Command::Train(a) => with_workers(a.workers, || train_cmd(a)),
        Command::Eval(a) => with_workers(a.workers, || eval_cmd(a)),
        Command::Decode(a) => with_workers(a.workers, || decode_cmd(a)),
        Command::LmTrain(a) => lm_train(a),
        Command::Audit(a) => audit(a),
        Command::Attend(a) => attend(a),
        Command::BenchWavefront(a) => {
            let report = bench_wavefront(a)?;
            print!("{}", report.table());
            Ok(())
        }
    }
}

fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    if workers == 0 {
        return Err(Error::InvalidArgument("--workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {workers} workers: {e}")))?
        .install(f)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Explicit file, else `charset.txt` beside the manifest, else the default set.
fn resolve_charset(explicit: Option<&Path>, manifest: Option<&Path>) -> Result<Charset> {
    if let Some(p) = explicit {
        return Charset::load(p);
    }
    if let Some(m) = manifest {
        let beside = m.parent().unwrap_or(Path::new(".")).join(CHARSET_FILE);
        if beside.exists() {
            return Charset::load(beside);
        }
    }
    Ok(Charset::default_set())
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let charset = resolve_charset(a.charset.as_deref(), None)?;
    let source = match &a.text {
        Some(p) => TextSource::Lines(read_lines(p)?.into_iter().filter(|l| !l.trim().is_empty()).collect()),
        None => TextSource::bundled(&charset),
    };
    let cfg = CorpusConfig {
        lines: a.lines,
        difficulty: a.difficulty,
        seed: a.seed,
        chars: (a.min_chars, a.max_chars),
        height: a.height,
    };
    let entries = make_corpus(&a.out, &cfg, &charset, &source)?;
    println!("wrote {} lines to {}", entries.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let charset = resolve_charset(a.charset.as_deref(), Some(&a.train))?;
    if charset.class_count() != a.arch.class_count {
        return Err(Error::InvalidArgument(format!(
            "charset has {} classes but --class-count is {}",
            charset.class_count(),
            a.arch.class_count
        )));
    }
    let spec = a.arch.spec()?;
    let train_set = prepare_examples(&load_corpus(&a.train)?, &charset, a.height)?;
    let valid_set = match &a.valid {
        Some(v) => prepare_examples(&load_corpus(v)?, &charset, a.height)?,
        None => crate::trainer::Prepared {
            examples: Vec::new(),
            oov_lines: 0,
        },
    };
    if train_set.oov_lines + valid_set.oov_lines > 0 {
        log::warn!(
            "dropped {} train and {} valid lines with characters outside the charset",
            train_set.oov_lines,
            valid_set.oov_lines
        );
    }
    let mut net = Network::<f32>::zeros(spec)?;
    glorot_init(&mut net, a.seed);
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        patience: a.patience,
        max_epochs: a.max_epochs,
        seed: a.seed,
        clip_norm: a.clip_norm,
        workers: a.workers,
        target_cer: a.target_cer,
        ..TrainConfig::default()
    };
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.as_os_str().to_owned();
        p.push(".curve.tsv");
        PathBuf::from(p)
    });
    let mut curve = String::from("epoch\ttrain_loss\tvalid_cer\tvalid_wer\n");
    println!("epoch\ttrain_loss\tvalid_cer\tvalid_wer");
    let outcome = train(
        net,
        &train_set.examples,
        &valid_set.examples,
        &charset,
        &cfg,
        &mut |e| {
            println!("{e}");
            curve.push_str(&format!("{e}\n"));
        },
    )?;
    std::fs::write(&log_path, &curve).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let labels: Vec<Vec<usize>> = train_set.examples.iter().map(|e| e.labels.clone()).collect();
    let meta = CheckpointMeta {
        charset: Some(charset.chars().iter().collect()),
        priors: Some(estimate_priors(&labels, charset.class_count())),
    };
    save_checkpoint(&outcome.best, &meta, &a.out)?;
    println!(
        "stopped: {:?}; best epoch {} valid CER {:.2}%; {} unalignable lines; model {}",
        outcome.stop,
        outcome.best_epoch,
        outcome.best_cer,
        outcome.unalignable_lines,
        a.out.display()
    );
    Ok(())
}

fn model_charset(meta: &CheckpointMeta, net: &Network<f32>) -> Result<Charset> {
    let charset = match &meta.charset {
        Some(s) => Charset::new(s.chars().collect())?,
        None => Charset::default_set(),
    };
    if charset.class_count() != net.spec().class_count() {
        return Err(Error::Checkpoint(format!(
            "checkpoint charset has {} classes, network emits {}",
            charset.class_count(),
            net.spec().class_count()
        )));
    }
    Ok(charset)
}

/// Language resources named by the decoding flags.
struct DecodeResources {
    char_lm: Option<NGramLm>,
    word_lm: Option<NGramLm>,
    lexicon: Option<LexiconTrie>,
}

impl DecodeResources {
    fn load(f: &DecodeFlags) -> Result<Self> {
        let arpa = |p: &Path| -> Result<NGramLm> {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.into(),
                source: e,
            })?;
            NGramLm::from_arpa(&text)
        };
        Ok(Self {
            char_lm: f.lm.as_deref().map(arpa).transpose()?,
            word_lm: f.word_lm.as_deref().map(arpa).transpose()?,
            lexicon: f
                .lexicon
                .as_deref()
                .map(|p| {
                    read_lines(p)
                        .map(|ws| LexiconTrie::from_words(ws.iter().map(|w| w.trim()).filter(|w| !w.is_empty())))
                })
                .transpose()?,
        })
    }

    fn has_language(&self) -> bool {
        self.char_lm.is_some() || self.word_lm.is_some() || self.lexicon.is_some()
    }
}

fn fusion<'a>(
    f: &DecodeFlags,
    res: &'a DecodeResources,
    priors: Option<&'a [f64]>,
    symbols: &'a [char],
    with_language: bool,
) -> Decoding<'a> {
    if f.beam == 0 {
        return Decoding::Greedy;
    }
    let mut cfg = FusionConfig::new(f.beam);
    cfg.prior_weight = f.prior_weight;
    cfg.priors = priors;
    cfg.lm_weight = f.lm_weight;
    cfg.symbols = Some(symbols);
    if with_language {
        cfg.insertion_bonus = f.insertion_bonus;
        cfg.char_lm = res.char_lm.as_ref();
        cfg.word_lm = res.word_lm.as_ref();
        cfg.lexicon = res.lexicon.as_ref();
    }
    Decoding::Beam(cfg)
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (net, meta) = load_checkpoint(&a.model, None)?;
    let charset = model_charset(&meta, &net)?;
    let prepared = prepare_examples(&load_corpus(&a.manifest)?, &charset, net.spec().input_height)?;
    let res = DecodeResources::load(&a.decode)?;
    let symbols = charset.class_symbols();
    let posts = posteriors(&net, &prepared.examples, a.workers)?;

    let greedy = score(
        &prepared.examples,
        decode_all(&posts, &charset, &Decoding::Greedy)?,
        prepared.oov_lines,
    );
    println!("greedy            {}", greedy.summary());
    let plain = fusion(&a.decode, &res, meta.priors.as_deref(), &symbols, false);
    let no_lm = score(
        &prepared.examples,
        decode_all(&posts, &charset, &plain)?,
        prepared.oov_lines,
    );
    println!("beam without LM   {}", no_lm.summary());
    let mut last = no_lm;
    if res.has_language() {
        let fused = fusion(&a.decode, &res, meta.priors.as_deref(), &symbols, true);
        let with_lm = score(
            &prepared.examples,
            decode_all(&posts, &charset, &fused)?,
            prepared.oov_lines,
        );
        println!("beam with LM      {}", with_lm.summary());
        last = with_lm;
    }
    if let Some(p) = &a.report {
        let mut tsv = String::from("reference\thypothesis\tchar_edits\n");
        for l in &last.lines {
            let edits = l.chars.substitutions + l.chars.insertions + l.chars.deletions;
            tsv.push_str(&format!("{}\t{}\t{}\n", l.reference, l.hypothesis, edits));
        }
        std::fs::write(p, tsv).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn decode_cmd(a: &DecodeArgs) -> Result<()> {
    let (net, meta) = load_checkpoint(&a.model, None)?;
    let charset = model_charset(&meta, &net)?;
    let res = DecodeResources::load(&a.decode)?;
    let symbols = charset.class_symbols();
    let decoding = fusion(&a.decode, &res, meta.priors.as_deref(), &symbols, true);
    let examples = a
        .images
        .iter()
        .map(|p| {
            let img = GrayImage::load(p)?;
            Ok(crate::trainer::Example {
                image: preprocess_to(&img, net.spec().input_height)?,
                labels: Vec::new(),
                transcript: String::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let posts = posteriors(&net, &examples, a.workers)?;
    for (path, (text, _)) in a.images.iter().zip(decode_all(&posts, &charset, &decoding)?) {
        println!("{}\t{}", path.display(), text);
    }
    Ok(())
}

fn lm_train(a: &LmTrainArgs) -> Result<()> {
    let lines: Vec<String> = match (&a.text, &a.manifest) {
        (_, Some(m)) => crate::synthline::read_manifest(m)?
            .into_iter()
            .map(|e| e.transcript)
            .collect(),
        (Some(t), None) => read_lines(t)?,
        (None, None) => return Err(Error::InvalidArgument("lm-train needs --text or --manifest".into())),
    };
    let sentences: Vec<Vec<String>> = lines
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match a.unit {
            LmUnit::Char => char_tokens(l),
            LmUnit::Word => word_tokens(l),
        })
        .collect();
    let extra: Vec<String> = match (a.unit, &a.charset) {
        (LmUnit::Char, Some(p)) => Charset::load(p)?
            .chars()
            .iter()
            .flat_map(|&c| char_tokens(&c.to_string()))
            .collect(),
        _ => Vec::new(),
    };
    let lm = NGramLm::estimate(&sentences, a.order, &extra)?;
    std::fs::write(&a.out, lm.to_arpa()).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    println!(
        "{}-gram {:?} model over {} sentences, vocabulary {}, written to {}",
        a.order,
        a.unit,
        sentences.len(),
        lm.vocab_len(),
        a.out.display()
    );
    Ok(())
}

fn audit(a: &AuditArgs) -> Result<()> {
    let report = a.arch.spec()?.audit(a.height, a.width)?;
    print!("{}", report.to_table());
    if let Some(p) = &a.tsv {
        std::fs::write(p, report.to_tsv()).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn attend(a: &AttendArgs) -> Result<()> {
    let net = match &a.model {
        Some(p) => load_checkpoint(p, None)?.0,
        None => {
            let mut n = Network::<f32>::zeros(a.arch.spec()?)?;
            glorot_init(&mut n, a.seed);
            n
        }
    };
    let image = preprocess_to(&GrayImage::load(&a.image)?, net.spec().input_height)?;
    let map = attention_map_columns(
        &net.cast::<f64>(),
        &image.cast::<f64>(),
        a.class,
        a.columns.as_deref(),
        1.0,
    )?;
    let written = render_overlay(&map, &image, &a.out)?;
    print!("{}", map.sidecar());
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

/// Median timing of one worker count.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub workers: usize,
    pub median_secs: f64,
    /// Max |Δ| of outputs against the direct reference.
    pub max_delta: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn speedup(&self, workers: usize) -> Option<f64> {
        let base = self.rows.iter().find(|r| r.workers == 1).or(self.rows.first())?;
        let row = self.rows.iter().find(|r| r.workers == workers)?;
        Some(base.median_secs / row.median_secs)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "mdlstm forward+backward, H={} W={} h={}\nworkers\tmedian_s\tspeedup\tmax_delta\n",
            self.height, self.width, self.hidden
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{:.4}\t{:.2}\t{:.3e}\n",
                r.workers,
                r.median_secs,
                self.speedup(r.workers).unwrap_or(f64::NAN),
                r.max_delta
            ));
        }
        out
    }
}

/// Check every worker count against the direct reference, then time
/// forward+backward `repeats` times each.
pub fn bench_wavefront(a: &BenchArgs) -> Result<BenchReport> {
    if a.height == 0 || a.width == 0 || a.hidden == 0 || a.input_dim == 0 || a.repeats == 0 {
        return Err(Error::InvalidArgument("sizes and repeats must be at least 1".into()));
    }
    if a.workers.is_empty() || a.workers.contains(&0) {
        return Err(Error::InvalidArgument("worker counts must be at least 1".into()));
    }
    let layer = Mdlstm2dLayer {
        input_dim: a.input_dim,
        hidden: a.hidden,
        grouped_input: false,
        half_forget: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut random = |shape: &[usize], scale: f64| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
    };
    let [ws, us, bs] = layer.shapes();
    let x = random(&[a.input_dim, a.height, a.width], 1.0)?;
    let bound = (6.0 / (a.input_dim + a.hidden) as f64).sqrt();
    let (w, u, b) = (random(&ws, bound)?, random(&us, bound)?, random(&bs, 0.1)?);
    let expect = mdlstm2d_reference(&x, &layer, &w, &u, &b)?;

    let run = |workers: usize| -> Result<Tensor<f64>> {
        let mut tape = Tape::<f64>::new();
        let [xv, wv, uv, bv] = [&x, &w, &u, &b].map(|t| tape.leaf(t.clone(), true));
        let y = mdlstm2d(&mut tape, xv, &layer, wv, uv, bv, Schedule::Wavefront { workers })?;
        let seed = tape.value(y).map(|_| 1.0);
        let out = tape.value(y).clone();
        tape.backward(&[(y, seed)])?;
        Ok(out)
    };
    let mut rows = Vec::new();
    for &workers in &a.workers {
        let max_delta = run(workers)?.max_abs_diff(&expect);
        if max_delta.is_nan() || max_delta >= 1e-9 {
            return Err(Error::NonFinite {
                context: format!("wavefront with {workers} workers deviates from the reference by {max_delta:e}"),
                index: 0,
            });
        }
        let mut times: Vec<f64> = (0..a.repeats)
            .map(|_| {
                let start = Instant::now();
                run(workers).map(|_| start.elapsed().as_secs_f64())
            })
            .collect::<Result<_>>()?;
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            workers,
            median_secs: times[times.len() / 2],
            max_delta,
        });
    }
    Ok(BenchReport {
        height: a.height,
        width: a.width,
        hidden: a.hidden,
        rows,
    })
}
