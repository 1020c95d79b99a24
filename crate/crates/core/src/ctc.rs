//! CTC loss, greedy decoding and prefix beam search with prior scaling and
//! shallow language-model fusion. Class 0 is the blank.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::charlm::{LexiconTrie, NGramLm, TokenId, SPACE};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BLANK: usize = 0;

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Per-frame class probabilities, `frames × classes`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMatrix {
    frames: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl PosteriorMatrix {
    pub fn new(frames: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if frames == 0 || classes < 2 {
            return Err(Error::invalid(format!(
                "posterior matrix needs frames >= 1 and classes >= 2, got {frames}x{classes}"
            )));
        }
        if probs.len() != frames * classes {
            return Err(Error::Shape(format!(
                "{frames}x{classes} posteriors need {} values, got {}",
                frames * classes,
                probs.len()
            )));
        }
        for (t, row) in probs.chunks(classes).enumerate() {
            if let Some(c) = row.iter().position(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid(format!(
                    "posterior at frame {t} class {c} is outside [0,1]: {}",
                    row[c]
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(format!("frame {t} sums to {s}, not 1")));
            }
        }
        Ok(Self { frames, classes, probs })
    }

    /// Row-wise softmax of `[T, C]` logits.
    pub fn from_logits<T: Real>(logits: &Tensor<T>) -> Result<Self> {
        let (frames, classes) = match *logits.shape() {
            [t, c] => (t, c),
            ref s => return Err(Error::Shape(format!("logits must be [T, C], got {s:?}"))),
        };
        if let Some(i) = logits.first_non_finite() {
            return Err(Error::NonFinite {
                context: "ctc logits".into(),
                index: i,
            });
        }
        let lp = log_softmax_rows(logits, classes);
        Self::new(frames, classes, lp.iter().map(|v| v.exp()).collect())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.classes..(t + 1) * self.classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.probs
    }

    /// First line `T C`, then one row of probabilities per frame.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.frames, self.classes);
        for t in 0..self.frames {
            let row: Vec<String> = self.row(t).iter().map(|p| format!("{p:.9e}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or_else(|| Error::parse(1, "empty posterior file"))?;
        let dims: Vec<usize> = head
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(1, "header must be 'T C'"))?;
        let [frames, classes] = dims[..] else {
            return Err(Error::parse(1, "header must be 'T C'"));
        };
        let mut probs = Vec::with_capacity(frames * classes);
        let mut rows = 0;
        for (n, l) in lines {
            let row: Vec<f64> = l
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(n + 1, "non-numeric probability"))?;
            if row.len() != classes {
                return Err(Error::parse(
                    n + 1,
                    format!("expected {classes} values, got {}", row.len()),
                ));
            }
            probs.extend(row);
            rows += 1;
        }
        if rows != frames {
            return Err(Error::parse(
                text.lines().count(),
                format!("expected {frames} rows, got {rows}"),
            ));
        }
        Self::new(frames, classes, probs)
    }
}

fn log_softmax_rows<T: Real>(logits: &Tensor<T>, classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(classes) {
        let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z = row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln() + m;
        out.extend(row.iter().map(|v| v.as_f64() - z));
    }
    out
}

/// Fewest frames that can carry `labels`: one per label plus a blank between
/// each adjacent repeat.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `labels` and its gradient with respect to the
/// `[T, C]` logits.
pub fn ctc_loss<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (frames, classes) = match *logits.shape() {
        [t, c] => (t, c),
        ref s => return Err(Error::Shape(format!("logits must be [T, C], got {s:?}"))),
    };
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(Error::invalid(format!("label {bad} outside [1, {}]", classes - 1)));
    }
    let required = min_frames(labels);
    if frames < required {
        return Err(Error::Unalignable { frames, required });
    }
    if let Some(i) = logits.first_non_finite() {
        return Err(Error::NonFinite {
            context: "ctc logits".into(),
            index: i,
        });
    }
    let lp = log_softmax_rows(logits, classes);
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(labels.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + lp[t * classes + ext[s]];
        }
    }
    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let nxt = |s2: usize| beta[(t + 1) * s_len + s2] + lp[(t + 1) * classes + ext[s2]];
            let mut b = nxt(s);
            if s + 1 < s_len {
                b = log_add(b, nxt(s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, nxt(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }
    let mut log_like = alpha[last + s_len - 1];
    if s_len > 1 {
        log_like = log_add(log_like, alpha[last + s_len - 2]);
    }
    if !log_like.is_finite() {
        return Err(Error::NonFinite {
            context: "ctc likelihood".into(),
            index: 0,
        });
    }
    let mut grad = vec![T::zero(); frames * classes];
    let mut occ = vec![ninf; classes];
    for t in 0..frames {
        occ.iter_mut().for_each(|o| *o = ninf);
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            occ[ext[s]] = log_add(occ[ext[s]], v);
        }
        for c in 0..classes {
            let g = lp[t * classes + c].exp() - (occ[c] - log_like).exp();
            grad[t * classes + c] = T::from_f64(g);
        }
    }
    Ok((-log_like, Tensor::new(&[frames, classes], grad)?))
}

/// Scalar CTC loss node on the tape.
pub fn ctc_loss_var<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (loss, grad) = ctc_loss(tape.try_value(logits)?, labels)?;
    tape.record(
        "ctc_loss",
        Tensor::scalar(T::from_f64(loss)),
        &[logits],
        move |_: &[&Tensor<T>], _: &Tensor<T>, gy: &Tensor<T>, _: &[bool]| Ok(vec![Some(grad.scale(gy.data()[0]))]),
    )
}

/// Per-frame argmax (ties to the lower class), repeats collapsed, blanks
/// dropped.
pub fn greedy_decode(post: &PosteriorMatrix) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for t in 0..post.frames() {
        let row = post.row(t);
        let mut best = 0;
        for (c, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = c;
            }
        }
        if best != BLANK && best != prev {
            out.push(best);
        }
        prev = best;
    }
    out
}

/// Non-blank class frequencies over transcripts, add-one smoothed. Entry 0
/// (blank) is 1 so that it never scales anything.
pub fn estimate_priors(transcripts: &[Vec<usize>], classes: usize) -> Vec<f64> {
    let mut counts = vec![1.0; classes];
    for t in transcripts {
        for &c in t {
            if c != BLANK && c < classes {
                counts[c] += 1.0;
            }
        }
    }
    let total: f64 = counts[1..].iter().sum();
    let mut priors: Vec<f64> = counts.iter().map(|c| c / total).collect();
    priors[BLANK] = 1.0;
    priors
}

/// Decoding knobs for [`prefix_beam_decode`].
#[derive(Clone, Debug)]
pub struct FusionConfig<'a> {
    pub beam_width: usize,
    /// Exponent on class priors; emissions become `p / (K·prior)^w` for the
    /// `K` non-blank classes.
    pub prior_weight: f64,
    /// Per-class priors, indexed like the posteriors. `None` disables scaling.
    pub priors: Option<&'a [f64]>,
    pub lm_weight: f64,
    /// Log-score added for every emitted label; offsets the per-character LM
    /// cost that otherwise favors deletions.
    pub insertion_bonus: f64,
    /// Character model whose tokens are the class symbols, with the space
    /// mapped to the word-space token.
    pub char_lm: Option<&'a NGramLm>,
    /// Restricts every word to a path in the trie.
    pub lexicon: Option<&'a LexiconTrie>,
    /// Word model scored whenever a word is completed.
    pub word_lm: Option<&'a NGramLm>,
    /// Symbol of each class; index 0 (blank) is ignored. Required whenever an
    /// LM or lexicon is set.
    pub symbols: Option<&'a [char]>,
}

impl<'a> FusionConfig<'a> {
    pub fn new(beam_width: usize) -> Self {
        Self {
            beam_width,
            prior_weight: 0.7,
            priors: None,
            lm_weight: 1.0,
            insertion_bonus: 0.0,
            char_lm: None,
            lexicon: None,
            word_lm: None,
            symbols: None,
        }
    }
}

/// Best hypothesis of a beam search and its fused log score.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub labels: Vec<usize>,
    pub score: f64,
    /// Set when every prefix was pruned and the greedy path was returned.
    pub fell_back: bool,
}

#[derive(Clone, Debug)]
struct Beam {
    blank: f64,
    non_blank: f64,
    /// Accumulated weighted LM log score plus insertion bonuses.
    lm: f64,
    /// Trie node of the word being spelled.
    node: usize,
    /// Start of the current word in the label prefix.
    word_start: usize,
    char_hist: Vec<TokenId>,
    word_hist: Vec<TokenId>,
}

impl Beam {
    fn total(&self) -> f64 {
        log_add(self.blank, self.non_blank) + self.lm
    }
}

const LN10: f64 = std::f64::consts::LN_10;

struct Fusion<'c, 'a> {
    cfg: &'c FusionConfig<'a>,
    char_tokens: Vec<TokenId>,
    space_class: Option<usize>,
}

impl Fusion<'_, '_> {
    fn word_of(&self, prefix: &[usize], start: usize) -> String {
        let symbols = self.cfg.symbols.expect("symbols checked");
        prefix[start..].iter().map(|&c| symbols[c]).collect()
    }

    fn word_score(&self, word: &str, hist: &[TokenId]) -> (f64, TokenId) {
        match self.cfg.word_lm {
            Some(lm) => {
                let id = lm.token(word);
                (self.cfg.lm_weight * LN10 * lm.logprob(id, hist), id)
            }
            None => (0.0, 0),
        }
    }

    /// Extend `beam` (for `prefix`) by class `c`; `None` if the lexicon
    /// forbids it.
    fn extend(&self, prefix: &[usize], beam: &Beam, c: usize) -> Option<Beam> {
        let mut next = Beam {
            blank: f64::NEG_INFINITY,
            non_blank: f64::NEG_INFINITY,
            lm: beam.lm,
            node: beam.node,
            word_start: beam.word_start,
            char_hist: Vec::new(),
            word_hist: Vec::new(),
        };
        let is_space = Some(c) == self.space_class;
        if is_space && (self.cfg.lexicon.is_some() || self.cfg.word_lm.is_some()) {
            if prefix.len() == beam.word_start {
                return self.cfg.lexicon.is_none().then(|| next.clone_hist(beam));
            }
            if let Some(trie) = self.cfg.lexicon {
                if !trie.is_terminal(beam.node) {
                    return None;
                }
            }
            let word = self.word_of(prefix, beam.word_start);
            let (s, id) = self.word_score(&word, &beam.word_hist);
            next.lm += s;
            next.word_hist = beam.word_hist.clone();
            if self.cfg.word_lm.is_some() {
                next.word_hist.push(id);
            }
            next.node = LexiconTrie::ROOT;
            next.word_start = prefix.len() + 1;
        } else if is_space {
            next.word_hist = beam.word_hist.clone();
            next.word_start = prefix.len() + 1;
        } else {
            if let Some(trie) = self.cfg.lexicon {
                let symbols = self.cfg.symbols.expect("symbols checked");
                next.node = trie.child(beam.node, symbols[c])?;
            }
            next.word_hist = beam.word_hist.clone();
        }
        next.lm += self.cfg.insertion_bonus;
        next.char_hist = beam.char_hist.clone();
        if let Some(lm) = self.cfg.char_lm {
            let tok = self.char_tokens[c];
            next.lm += self.cfg.lm_weight * LN10 * lm.logprob(tok, &beam.char_hist);
            next.char_hist.push(tok);
            let keep = lm.order().saturating_sub(1);
            if next.char_hist.len() > keep {
                next.char_hist.drain(..next.char_hist.len() - keep);
            }
        }
        Some(next)
    }

    /// End-of-line score, or `None` if the last word is not in the lexicon.
    fn finish(&self, prefix: &[usize], beam: &Beam) -> Option<f64> {
        let mut extra = 0.0;
        let open_word = prefix.len() > beam.word_start;
        if open_word {
            if let Some(trie) = self.cfg.lexicon {
                if !trie.is_terminal(beam.node) {
                    return None;
                }
            }
        }
        if let Some(lm) = self.cfg.word_lm {
            let mut hist = beam.word_hist.clone();
            if open_word {
                let word = self.word_of(prefix, beam.word_start);
                let (s, id) = self.word_score(&word, &hist);
                extra += s;
                hist.push(id);
            }
            extra += self.cfg.lm_weight * LN10 * lm.logprob(lm.eos(), &hist);
        }
        if let Some(lm) = self.cfg.char_lm {
            extra += self.cfg.lm_weight * LN10 * lm.logprob(lm.eos(), &beam.char_hist);
        }
        Some(beam.total() + extra)
    }
}

impl Beam {
    fn clone_hist(mut self, from: &Beam) -> Beam {
        self.word_hist = from.word_hist.clone();
        self.char_hist = from.char_hist.clone();
        self
    }
}

/// CTC prefix beam search with prior-scaled emissions and shallow LM fusion.
pub fn prefix_beam_decode(post: &PosteriorMatrix, cfg: &FusionConfig<'_>) -> Result<Decoded> {
    if cfg.beam_width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    if cfg.lm_weight < 0.0 {
        return Err(Error::invalid("lm weight must be non-negative"));
    }
    let classes = post.classes();
    let needs_symbols = cfg.char_lm.is_some() || cfg.lexicon.is_some() || cfg.word_lm.is_some();
    if needs_symbols && cfg.symbols.is_none_or(|s| s.len() != classes) {
        return Err(Error::invalid(format!(
            "language-model fusion needs one symbol per class ({classes})"
        )));
    }
    if let Some(p) = cfg.priors {
        if p.len() != classes {
            return Err(Error::Shape(format!("{} priors for {classes} classes", p.len())));
        }
    }
    let space_class = cfg
        .symbols
        .and_then(|s| s.iter().skip(1).position(|&c| c == ' ').map(|i| i + 1));
    let char_tokens: Vec<TokenId> = match (cfg.char_lm, cfg.symbols) {
        (Some(lm), Some(sym)) => sym
            .iter()
            .map(|&c| {
                if c == ' ' {
                    lm.token(SPACE)
                } else {
                    lm.token(c.encode_utf8(&mut [0; 4]))
                }
            })
            .collect(),
        _ => Vec::new(),
    };
    let fusion = Fusion {
        cfg,
        char_tokens,
        space_class,
    };
    // priors are taken relative to uniform, so a flat prior leaves the
    // blank/non-blank balance untouched
    let uniform = (classes - 1) as f64;
    let prior_penalty: Vec<f64> = (0..classes)
        .map(|c| match cfg.priors {
            Some(p) if c != BLANK && cfg.prior_weight != 0.0 => cfg.prior_weight * (p[c] * uniform).ln(),
            _ => 0.0,
        })
        .collect();
    let start = Beam {
        blank: 0.0,
        non_blank: f64::NEG_INFINITY,
        lm: 0.0,
        node: LexiconTrie::ROOT,
        word_start: 0,
        char_hist: cfg.char_lm.map(|lm| vec![lm.bos()]).unwrap_or_default(),
        word_hist: cfg.word_lm.map(|lm| vec![lm.bos()]).unwrap_or_default(),
    };
    let mut beams: Vec<(Vec<usize>, Beam)> = vec![(Vec::new(), start)];
    for t in 0..post.frames() {
        let row = post.row(t);
        let emit: Vec<f64> = row.iter().zip(&prior_penalty).map(|(&p, &pen)| p.ln() - pen).collect();
        let mut next: HashMap<Vec<usize>, Beam> = HashMap::with_capacity(beams.len() * 4);
        for (prefix, beam) in &beams {
            let here = log_add(beam.blank, beam.non_blank);
            let stay = next.entry(prefix.clone()).or_insert_with(|| Beam {
                blank: f64::NEG_INFINITY,
                non_blank: f64::NEG_INFINITY,
                ..beam.clone()
            });
            stay.blank = log_add(stay.blank, here + emit[BLANK]);
            let last = prefix.last().copied();
            if let Some(l) = last {
                stay.non_blank = log_add(stay.non_blank, beam.non_blank + emit[l]);
            }
            for c in 1..classes {
                if emit[c] == f64::NEG_INFINITY {
                    continue;
                }
                let from = if Some(c) == last { beam.blank } else { here };
                if from == f64::NEG_INFINITY {
                    continue;
                }
                let mut ext = prefix.clone();
                ext.push(c);
                let slot = match next.get_mut(&ext) {
                    Some(s) => s,
                    None => match fusion.extend(prefix, beam, c) {
                        Some(b) => next.entry(ext).or_insert(b),
                        None => continue,
                    },
                };
                slot.non_blank = log_add(slot.non_blank, from + emit[c]);
            }
        }
        let mut ranked: Vec<(Vec<usize>, Beam)> = next
            .into_iter()
            .filter(|(_, b)| b.total() > f64::NEG_INFINITY)
            .collect();
        ranked.sort_by(|a, b| b.1.total().total_cmp(&a.1.total()).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cfg.beam_width);
        beams = ranked;
    }
    let best = beams
        .iter()
        .filter_map(|(p, b)| fusion.finish(p, b).map(|s| (p, s)))
        .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(a.0)));
    match best {
        Some((p, s)) => Ok(Decoded {
            labels: p.clone(),
            score: s,
            fell_back: false,
        }),
        None => {
            log::warn!("every beam hypothesis was pruned; falling back to greedy decoding");
            Ok(Decoded {
                labels: greedy_decode(post),
                score: f64::NEG_INFINITY,
                fell_back: true,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn collapse(path: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = BLANK;
        for &c in path {
            if c != BLANK && c != prev {
                out.push(c);
            }
            prev = c;
        }
        out
    }

    /// Probability of every collapsed string by enumerating all `C^T` paths.
    fn enumerate(post: &PosteriorMatrix) -> HashMap<Vec<usize>, f64> {
        let (t_len, c_len) = (post.frames(), post.classes());
        let mut out: HashMap<Vec<usize>, f64> = HashMap::new();
        let mut path = vec![0usize; t_len];
        loop {
            let p: f64 = path.iter().enumerate().map(|(t, &c)| post.row(t)[c]).product();
            *out.entry(collapse(&path)).or_default() += p;
            let mut i = 0;
            loop {
                if i == t_len {
                    return out;
                }
                path[i] += 1;
                if path[i] < c_len {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    fn random_logits(t: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::new(&[t, c], (0..t * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        let logits = Tensor::<f64>::from_f64(&[1, 3], &[0.1, 0.7, -0.3]).unwrap();
        let post = PosteriorMatrix::from_logits(&logits).unwrap();
        let (loss, _) = ctc_loss(&logits, &[1]).unwrap();
        assert!((loss + post.row(0)[1].ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        let logits = Tensor::<f64>::from_f64(&[2, 2], &[0.3, -0.2, 1.1, 0.4]).unwrap();
        let p = PosteriorMatrix::from_logits(&logits).unwrap();
        let (a1, a2, b1, b2) = (p.row(0)[1], p.row(1)[1], p.row(0)[0], p.row(1)[0]);
        let expect = -(a1 * a2 + a1 * b2 + b1 * a2).ln();
        let (loss, _) = ctc_loss(&logits, &[1]).unwrap();
        assert!((loss - expect).abs() < 1e-9);
    }

    #[test]
    fn six_frames_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = random_logits(6, 3, &mut rng);
        let post = PosteriorMatrix::from_logits(&logits).unwrap();
        let table = enumerate(&post);
        let (loss, _) = ctc_loss(&logits, &[1, 2]).unwrap();
        assert!((loss + table[&vec![1, 2]].ln()).abs() < 1e-9);
    }

    #[test]
    fn unalignable_names_both_lengths() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        match ctc_loss(&logits, &[1, 1]) {
            Err(Error::Unalignable { frames, required }) => assert_eq!((frames, required), (2, 3)),
            other => panic!("{other:?}"),
        }
        let msg = ctc_loss(&logits, &[1, 1]).unwrap_err().to_string();
        assert!(msg.contains('2') && msg.contains('3'));
    }

    #[test]
    fn empty_label_is_all_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = random_logits(4, 3, &mut rng);
        let post = PosteriorMatrix::from_logits(&logits).unwrap();
        let (loss, _) = ctc_loss(&logits, &[]).unwrap();
        let expect: f64 = (0..4).map(|t| post.row(t)[0].ln()).sum();
        assert!((loss + expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random_logits(7, 4, &mut rng);
        for labels in [vec![1, 2, 2], vec![3], vec![]] {
            let r = grad_check(|t, x| ctc_loss_var(t, x, &labels), &logits, 1e-6).unwrap();
            assert!(r.passes(1e-5), "{labels:?}: {r:?}");
        }
    }

    #[test]
    fn greedy_rules() {
        let frames = [1usize, 1, 0, 1, 2, 2];
        let mut probs = vec![0.0; 6 * 3];
        for (t, &c) in frames.iter().enumerate() {
            probs[t * 3 + c] = 1.0;
        }
        let post = PosteriorMatrix::new(6, 3, probs).unwrap();
        assert_eq!(greedy_decode(&post), vec![1, 1, 2]);
        let blank = PosteriorMatrix::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(greedy_decode(&blank).is_empty());
        let tie = PosteriorMatrix::new(1, 3, vec![0.0, 0.5, 0.5]).unwrap();
        assert_eq!(greedy_decode(&tie), vec![1]);
    }

    /// Posteriors with one dominant class per frame.
    fn peaked(t: usize, c: usize, rng: &mut ChaCha8Rng) -> PosteriorMatrix {
        let mut probs = Vec::with_capacity(t * c);
        for _ in 0..t {
            let top = rng.gen_range(0..c);
            let rest: Vec<f64> = (0..c - 1).map(|_| rng.gen_range(0.0..1.0)).collect();
            let z: f64 = rest.iter().sum::<f64>() / 0.1;
            let mut it = rest.iter();
            probs.extend((0..c).map(|k| if k == top { 0.9 } else { it.next().unwrap() / z }));
        }
        PosteriorMatrix::new(t, c, probs).unwrap()
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let uniform = vec![1.0 / 3.0; 4];
        for _ in 0..50 {
            let post = peaked(10, 4, &mut rng);
            let mut cfg = FusionConfig::new(1);
            cfg.priors = Some(&uniform);
            assert_eq!(prefix_beam_decode(&post, &cfg).unwrap().labels, greedy_decode(&post));
        }
    }

    #[test]
    fn wider_beam_can_score_lower() {
        let mut rng = ChaCha8Rng::seed_from_u64(683383008884831082);
        let post = PosteriorMatrix::from_logits(&random_logits(3, 4, &mut rng)).unwrap();
        let score = |w| prefix_beam_decode(&post, &FusionConfig::new(w)).unwrap().score;
        assert!(score(4) < score(2));
        assert!(score(2) <= score(64) + 1e-12);
    }

    #[test]
    fn unbounded_beam_is_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let post = PosteriorMatrix::from_logits(&random_logits(3, 3, &mut rng)).unwrap();
            let table = enumerate(&post);
            let (best, p) = table
                .iter()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, v)| (k.clone(), *v))
                .unwrap();
            let d = prefix_beam_decode(&post, &FusionConfig::new(27)).unwrap();
            assert_eq!(d.labels, best);
            assert!((d.score - p.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn char_lm_flips_ambiguous_ending() {
        // classes: blank, q, a, u
        let symbols = ['_', 'q', 'a', 'u'];
        let corpus: Vec<Vec<String>> = (0..20).map(|_| vec!["q".into(), "u".into()]).collect();
        let lm = NGramLm::estimate(&corpus, 2, &["a".to_string()]).unwrap();
        let probs = vec![
            0.05, 0.9, 0.025, 0.025, //
            0.9, 0.05, 0.025, 0.025, //
            0.05, 0.05, 0.48, 0.42,
        ];
        let post = PosteriorMatrix::new(3, 4, probs).unwrap();
        let plain = prefix_beam_decode(&post, &FusionConfig::new(8)).unwrap();
        assert_eq!(plain.labels, vec![1, 2]);
        let mut cfg = FusionConfig::new(8);
        cfg.char_lm = Some(&lm);
        cfg.symbols = Some(&symbols);
        let fused = prefix_beam_decode(&post, &cfg).unwrap();
        assert_eq!(fused.labels, vec![1, 3]);
        // the flip is explained by the LM term alone
        let lm_gap = (lm.logprob_str("u", &["q"]) - lm.logprob_str("a", &["q"])) * LN10;
        assert!(lm_gap > (0.48f64 / 0.42).ln());
    }

    #[test]
    fn insertion_bonus_counters_deletion() {
        let post = PosteriorMatrix::new(1, 2, vec![0.6, 0.4]).unwrap();
        let mut cfg = FusionConfig::new(4);
        assert!(prefix_beam_decode(&post, &cfg).unwrap().labels.is_empty());
        cfg.insertion_bonus = 2f64.ln();
        let d = prefix_beam_decode(&post, &cfg).unwrap();
        assert_eq!(d.labels, vec![1]);
        assert!((d.score - 0.8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lexicon_restricts_words() {
        // classes: blank, a, b, space
        let symbols = ['_', 'a', 'b', ' '];
        let probs = vec![
            0.1, 0.6, 0.2, 0.1, //
            0.1, 0.2, 0.6, 0.1, //
        ];
        let post = PosteriorMatrix::new(2, 4, probs).unwrap();
        let trie = LexiconTrie::from_words(["aa", "a"]);
        let mut cfg = FusionConfig::new(16);
        cfg.lexicon = Some(&trie);
        cfg.symbols = Some(&symbols);
        let d = prefix_beam_decode(&post, &cfg).unwrap();
        assert_eq!(d.labels, vec![1]);
        // no blank mass and no admissible word: every prefix dies
        let blankless = PosteriorMatrix::new(2, 4, vec![0.0, 0.7, 0.3, 0.0, 0.0, 0.3, 0.7, 0.0]).unwrap();
        let none = LexiconTrie::from_words(["zz"]);
        cfg.lexicon = Some(&none);
        let d = prefix_beam_decode(&blankless, &cfg).unwrap();
        assert!(d.fell_back);
        assert_eq!(d.labels, greedy_decode(&blankless));
    }

    #[test]
    fn text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let post = PosteriorMatrix::from_logits(&random_logits(5, 4, &mut rng)).unwrap();
        let back = PosteriorMatrix::from_text(&post.to_text()).unwrap();
        for (a, b) in post.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(PosteriorMatrix::from_text("2 2\n0.5 0.5\n").is_err());
    }

    #[test]
    fn priors_skip_blank() {
        let p = estimate_priors(&[vec![1, 1, 2]], 4);
        assert_eq!(p[0], 1.0);
        assert!((p[1..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[1] > p[2] && p[2] > p[3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn loss_equals_enumeration(
            t in 1usize..=6, c in 2usize..=4, seed in any::<u64>(),
            raw in proptest::collection::vec(1usize..4, 0..=3)
        ) {
            let labels: Vec<usize> = raw.iter().map(|&l| 1 + (l - 1) % (c - 1)).collect();
            prop_assume!(min_frames(&labels) <= t);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = random_logits(t, c, &mut rng);
            let post = PosteriorMatrix::from_logits(&logits).unwrap();
            let table = enumerate(&post);
            let (loss, _) = ctc_loss(&logits, &labels).unwrap();
            prop_assert!((loss + table[&labels].ln()).abs() < 1e-9);
        }

        #[test]
        fn exhaustive_beam_scores_at_least_any_narrower(seed in any::<u64>(), t in 2usize..=7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let post = PosteriorMatrix::from_logits(&random_logits(t, 4, &mut rng)).unwrap();
            // 3^0 + ... + 3^7 = 3280 prefixes fit in the beam
            let best = prefix_beam_decode(&post, &FusionConfig::new(4096)).unwrap().score;
            for w in [1, 2, 4, 8, 16, 64] {
                let d = prefix_beam_decode(&post, &FusionConfig::new(w)).unwrap();
                prop_assert!(d.score <= best + 1e-12, "width {} score {} > {}", w, d.score, best);
            }
        }

        #[test]
        fn zero_weights_equal_plain_search(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let post = PosteriorMatrix::from_logits(&random_logits(6, 4, &mut rng)).unwrap();
            let symbols = ['_', 'a', 'b', ' '];
            let corpus = vec![vec!["a".to_string(), SPACE.to_string(), "b".to_string()]];
            let lm = NGramLm::estimate(&corpus, 2, &[]).unwrap();
            let priors = estimate_priors(&[vec![1, 2, 3, 1]], 4);
            let mut cfg = FusionConfig::new(4);
            cfg.char_lm = Some(&lm);
            cfg.symbols = Some(&symbols);
            cfg.priors = Some(&priors);
            cfg.prior_weight = 0.0;
            cfg.lm_weight = 0.0;
            let fused = prefix_beam_decode(&post, &cfg).unwrap();
            let plain = prefix_beam_decode(&post, &FusionConfig::new(4)).unwrap();
            prop_assert_eq!(fused.labels, plain.labels);
        }
    }
}
