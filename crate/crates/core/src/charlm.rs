//! Character and word n-gram language models with interpolated Witten–Bell
//! estimation, ARPA persistence and backoff scoring.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
/// Inter-word space as a character-level token.
pub const SPACE: &str = "<space>";

/// Stored log10 probability of the sentence-start token, which is never
/// predicted.
const BOS_LOGPROB: f64 = -99.0;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Entry {
    logprob: f64,
    backoff: f64,
}

/// Backoff n-gram model; probabilities and backoff weights are log10.
#[derive(Clone, Debug)]
pub struct NGramLm {
    order: usize,
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
    /// `levels[k-1]` holds the k-grams.
    levels: Vec<HashMap<Vec<TokenId>, Entry>>,
    bos: TokenId,
    eos: TokenId,
    unk: TokenId,
}

fn round6(v: f64) -> f64 {
    format!("{v:.6}").parse().expect("formatted float parses")
}

impl NGramLm {
    /// Estimate an interpolated Witten–Bell model. `extra_vocab` adds tokens
    /// that receive unigram mass even if unseen.
    pub fn estimate<S: AsRef<str>>(sentences: &[Vec<S>], order: usize, extra_vocab: &[S]) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("n-gram order must be at least 1"));
        }
        if sentences.is_empty() {
            return Err(Error::invalid("cannot estimate a language model from an empty corpus"));
        }
        let longest = sentences.iter().map(|s| s.len() + 2).max().unwrap_or(2);
        if order > longest {
            return Err(Error::invalid(format!(
                "order {order} exceeds the longest padded sentence ({longest} tokens)"
            )));
        }

        let mut vocab: Vec<String> = vec![BOS.into(), EOS.into(), UNK.into()];
        let mut index: HashMap<String, TokenId> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        let mut intern = |tok: &str, vocab: &mut Vec<String>| -> TokenId {
            *index.entry(tok.to_string()).or_insert_with(|| {
                vocab.push(tok.to_string());
                (vocab.len() - 1) as TokenId
            })
        };
        for t in extra_vocab {
            intern(t.as_ref(), &mut vocab);
        }
        let mut padded: Vec<Vec<TokenId>> = Vec::with_capacity(sentences.len());
        for s in sentences {
            let mut ids = vec![0];
            ids.extend(s.iter().map(|t| intern(t.as_ref(), &mut vocab)));
            ids.push(1);
            padded.push(ids);
        }
        let (bos, eos, unk) = (0, 1, 2);

        // counts[k-1][gram]
        let mut counts: Vec<HashMap<Vec<TokenId>, u64>> = vec![HashMap::new(); order];
        for ids in &padded {
            for k in 1..=order {
                for win in ids.windows(k) {
                    if k == 1 && win[0] == bos {
                        continue;
                    }
                    *counts[k - 1].entry(win.to_vec()).or_default() += 1;
                }
            }
        }
        // history totals and distinct followers, keyed by history
        let mut hist: Vec<HashMap<Vec<TokenId>, (u64, u64)>> = vec![HashMap::new(); order];
        for k in 1..=order {
            for (gram, &c) in &counts[k - 1] {
                let e = hist[k - 1].entry(gram[..k - 1].to_vec()).or_default();
                e.0 += c;
                e.1 += 1;
            }
        }

        let predictable = vocab.len() - 1;
        let uniform = 1.0 / predictable as f64;
        let (total, types) = hist[0][&Vec::new()];
        let mut probs: Vec<HashMap<Vec<TokenId>, f64>> = vec![HashMap::new(); order];
        for id in 0..vocab.len() as TokenId {
            if id == bos {
                continue;
            }
            let c = counts[0].get(&vec![id]).copied().unwrap_or(0);
            let p = (c as f64 + types as f64 * uniform) / (total + types) as f64;
            probs[0].insert(vec![id], p);
        }
        let lower = |probs: &Vec<HashMap<Vec<TokenId>, f64>>, gram: &[TokenId]| -> f64 {
            // interpolated lower-order value, recursing through backoff
            let mut g = gram;
            let mut scale = 1.0;
            loop {
                if let Some(&p) = probs[g.len() - 1].get(g) {
                    return scale * p;
                }
                let h = &g[..g.len() - 1];
                if let Some(&(c, n)) = hist[h.len()].get(h) {
                    scale *= n as f64 / (c + n) as f64;
                }
                g = &g[1..];
            }
        };
        for k in 2..=order {
            let mut level = HashMap::with_capacity(counts[k - 1].len());
            for (gram, &c) in &counts[k - 1] {
                let (hc, hn) = hist[k - 1][&gram[..k - 1]];
                let pl = lower(&probs, &gram[1..]);
                level.insert(gram.clone(), (c as f64 + hn as f64 * pl) / (hc + hn) as f64);
            }
            probs[k - 1] = level;
        }

        let mut levels: Vec<HashMap<Vec<TokenId>, Entry>> = vec![HashMap::new(); order];
        for k in 1..=order {
            for (gram, &p) in &probs[k - 1] {
                let backoff = if k < order {
                    hist[k]
                        .get(gram)
                        .map_or(0.0, |&(c, n)| (n as f64 / (c + n) as f64).log10())
                } else {
                    0.0
                };
                levels[k - 1].insert(
                    gram.clone(),
                    Entry {
                        logprob: round6(p.log10()),
                        backoff: round6(backoff),
                    },
                );
            }
        }
        let bos_backoff = hist
            .get(1)
            .and_then(|h| h.get(&vec![bos]))
            .map_or(0.0, |&(c, n)| (n as f64 / (c + n) as f64).log10());
        levels[0].insert(
            vec![bos],
            Entry {
                logprob: BOS_LOGPROB,
                backoff: if order > 1 { round6(bos_backoff) } else { 0.0 },
            },
        );
        Ok(Self {
            order,
            vocab,
            index,
            levels,
            bos,
            eos,
            unk,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn unk(&self) -> TokenId {
        self.unk
    }

    pub fn entry_count(&self, k: usize) -> usize {
        self.levels.get(k.wrapping_sub(1)).map_or(0, |l| l.len())
    }

    /// Token id, mapping out-of-vocabulary tokens to `<unk>`.
    pub fn token(&self, tok: &str) -> TokenId {
        self.index.get(tok).copied().unwrap_or(self.unk)
    }

    pub fn contains(&self, tok: &str) -> bool {
        self.index.contains_key(tok)
    }

    pub fn token_str(&self, id: TokenId) -> &str {
        &self.vocab[id as usize]
    }

    /// log10 p(token | history); only the last `order - 1` history tokens
    /// matter.
    pub fn logprob(&self, token: TokenId, history: &[TokenId]) -> f64 {
        let keep = history.len().min(self.order - 1);
        let mut ctx = &history[history.len() - keep..];
        let mut gram: Vec<TokenId> = Vec::with_capacity(keep + 1);
        let mut acc = 0.0;
        loop {
            gram.clear();
            gram.extend_from_slice(ctx);
            gram.push(token);
            if let Some(e) = self.levels[ctx.len()].get(&gram) {
                return acc + e.logprob;
            }
            if ctx.is_empty() {
                // token without a unigram entry
                return acc + self.levels[0].get(&vec![self.unk]).map_or(BOS_LOGPROB, |e| e.logprob);
            }
            if let Some(e) = self.levels[ctx.len() - 1].get(ctx) {
                acc += e.backoff;
            }
            ctx = &ctx[1..];
        }
    }

    pub fn logprob_str(&self, token: &str, history: &[&str]) -> f64 {
        let h: Vec<TokenId> = history.iter().map(|t| self.token(t)).collect();
        self.logprob(self.token(token), &h)
    }

    /// log10 probability of a sentence including the end marker.
    pub fn sentence_logprob<S: AsRef<str>>(&self, tokens: &[S]) -> f64 {
        let mut hist = vec![self.bos];
        let mut total = 0.0;
        for t in tokens {
            let id = self.token(t.as_ref());
            total += self.logprob(id, &hist);
            hist.push(id);
        }
        total + self.logprob(self.eos, &hist)
    }

    /// Perplexity over all predicted tokens, end markers included.
    pub fn perplexity<S: AsRef<str>>(&self, sentences: &[Vec<S>]) -> f64 {
        let mut lp = 0.0;
        let mut n = 0usize;
        for s in sentences {
            lp += self.sentence_logprob(s);
            n += s.len() + 1;
        }
        10f64.powf(-lp / n.max(1) as f64)
    }

    pub fn to_arpa(&self) -> String {
        let mut out = String::from("\\data\\\n");
        for (k, level) in self.levels.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", k + 1, level.len());
        }
        for (k, level) in self.levels.iter().enumerate() {
            let _ = write!(out, "\n\\{}-grams:\n", k + 1);
            let mut rows: Vec<(String, &Entry)> = level
                .iter()
                .map(|(g, e)| {
                    let words: Vec<&str> = g.iter().map(|&t| self.token_str(t)).collect();
                    (words.join(" "), e)
                })
                .collect();
            rows.sort_by(|a, b| a.0.cmp(&b.0));
            for (words, e) in rows {
                if k + 1 < self.order {
                    let _ = writeln!(out, "{:.6}\t{}\t{:.6}", e.logprob, words, e.backoff);
                } else {
                    let _ = writeln!(out, "{:.6}\t{}", e.logprob, words);
                }
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn from_arpa(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let mut i = 0;
        while i < lines.len() && lines[i].trim().is_empty() {
            i += 1;
        }
        if lines.get(i).map(|l| l.trim()) != Some("\\data\\") {
            return Err(Error::parse(i + 1, "expected \\data\\ header"));
        }
        i += 1;
        let mut declared: Vec<usize> = Vec::new();
        while i < lines.len() {
            let l = lines[i].trim();
            i += 1;
            if l.is_empty() {
                if !declared.is_empty() {
                    break;
                }
                continue;
            }
            let rest = l
                .strip_prefix("ngram ")
                .ok_or_else(|| Error::parse(i, format!("expected 'ngram k=n', got '{l}'")))?;
            let (k, n) = rest
                .split_once('=')
                .ok_or_else(|| Error::parse(i, "malformed ngram count"))?;
            let k: usize = k.trim().parse().map_err(|_| Error::parse(i, "bad n-gram order"))?;
            let n: usize = n.trim().parse().map_err(|_| Error::parse(i, "bad n-gram count"))?;
            if k != declared.len() + 1 {
                return Err(Error::parse(i, format!("n-gram orders out of sequence at {k}")));
            }
            declared.push(n);
        }
        if declared.is_empty() {
            return Err(Error::parse(i, "no n-gram counts declared"));
        }
        let order = declared.len();
        let mut vocab: Vec<String> = Vec::new();
        let mut index: HashMap<String, TokenId> = HashMap::new();
        let mut levels: Vec<HashMap<Vec<TokenId>, Entry>> = vec![HashMap::new(); order];
        let mut section: Option<usize> = None;
        let mut ended = false;
        let close = |section: Option<usize>, levels: &[HashMap<Vec<TokenId>, Entry>], line: usize| {
            if let Some(k) = section {
                if levels[k - 1].len() != declared[k - 1] {
                    return Err(Error::parse(
                        line,
                        format!(
                            "{k}-gram section has {} entries but header declares {}",
                            levels[k - 1].len(),
                            declared[k - 1]
                        ),
                    ));
                }
            }
            Ok(())
        };
        while i < lines.len() {
            let l = lines[i].trim();
            i += 1;
            if l.is_empty() {
                continue;
            }
            if l == "\\end\\" {
                close(section, &levels, i)?;
                ended = true;
                break;
            }
            if let Some(k) = l.strip_prefix('\\').and_then(|r| r.strip_suffix("-grams:")) {
                close(section, &levels, i)?;
                let k: usize = k.parse().map_err(|_| Error::parse(i, "bad section header"))?;
                if k == 0 || k > order {
                    return Err(Error::parse(i, format!("section for undeclared order {k}")));
                }
                section = Some(k);
                continue;
            }
            let k = section.ok_or_else(|| Error::parse(i, "entry outside an n-gram section"))?;
            let fields: Vec<&str> = l.split_whitespace().collect();
            if fields.len() != k + 1 && fields.len() != k + 2 {
                return Err(Error::parse(i, format!("expected {k} tokens in '{l}'")));
            }
            let logprob: f64 = fields[0].parse().map_err(|_| Error::parse(i, "bad log probability"))?;
            let backoff: f64 = if fields.len() == k + 2 {
                fields[k + 1]
                    .parse()
                    .map_err(|_| Error::parse(i, "bad backoff weight"))?
            } else {
                0.0
            };
            let gram: Vec<TokenId> = fields[1..=k]
                .iter()
                .map(|t| {
                    *index.entry(t.to_string()).or_insert_with(|| {
                        vocab.push(t.to_string());
                        (vocab.len() - 1) as TokenId
                    })
                })
                .collect();
            levels[k - 1].insert(gram, Entry { logprob, backoff });
        }
        if !ended {
            return Err(Error::parse(lines.len(), "missing \\end\\ marker"));
        }
        let mut ensure = |tok: &str| -> TokenId {
            *index.entry(tok.to_string()).or_insert_with(|| {
                vocab.push(tok.to_string());
                (vocab.len() - 1) as TokenId
            })
        };
        let (bos, eos, unk) = (ensure(BOS), ensure(EOS), ensure(UNK));
        Ok(Self {
            order,
            vocab,
            index,
            levels,
            bos,
            eos,
            unk,
        })
    }

    /// Total probability over every predictable token for one history.
    pub fn mass(&self, history: &[TokenId]) -> f64 {
        (0..self.vocab.len() as TokenId)
            .filter(|&t| t != self.bos)
            .map(|t| 10f64.powf(self.logprob(t, history)))
            .sum()
    }
}

/// Fold typographic variants onto the modeled character set.
pub fn normalize_text(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    for ch in line.chars() {
        match ch {
            'œ' => out.push_str("oe"),
            'Œ' => out.push_str("OE"),
            '\u{2019}' | '\u{2018}' => out.push('\''),
            '\u{2013}' | '\u{2014}' => out.push('-'),
            _ => out.push(ch),
        }
    }
    out
}

/// Normalize every line and drop those with characters outside `modeled`.
pub fn filter_corpus<'a>(lines: impl IntoIterator<Item = &'a str>, modeled: &dyn Fn(char) -> bool) -> Vec<String> {
    lines
        .into_iter()
        .map(|l| normalize_text(l.trim_end_matches(['\r', '\n'])))
        .filter(|l| !l.trim().is_empty() && l.chars().all(modeled))
        .collect()
}

/// Character tokens with the inter-word space as its own token.
pub fn char_tokens(line: &str) -> Vec<String> {
    line.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .chars()
        .map(|c| if c == ' ' { SPACE.to_string() } else { c.to_string() })
        .collect()
}

/// Whitespace-separated words, with every digit split into its own token.
pub fn word_tokens(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in line.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_digit() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Prefix tree over a word vocabulary.
#[derive(Clone, Debug, Default)]
pub struct LexiconTrie {
    nodes: Vec<TrieNode>,
    words: usize,
}

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: BTreeMap<char, usize>,
    terminal: bool,
}

impl LexiconTrie {
    pub const ROOT: usize = 0;

    pub fn new() -> Self {
        Self {
            nodes: vec![TrieNode::default()],
            words: 0,
        }
    }

    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut t = Self::new();
        for w in words {
            t.insert(w.as_ref());
        }
        t
    }

    /// Keep the `cap` most frequent words (ties broken alphabetically).
    pub fn from_counts(counts: &HashMap<String, u64>, cap: Option<usize>) -> Self {
        let mut ranked: Vec<(&String, &u64)> = counts.iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let keep = cap.unwrap_or(ranked.len());
        Self::from_words(ranked.into_iter().take(keep).map(|(w, _)| w.as_str()))
    }

    pub fn insert(&mut self, word: &str) {
        if word.is_empty() {
            return;
        }
        let mut node = Self::ROOT;
        for ch in word.chars() {
            node = match self.nodes[node].children.get(&ch) {
                Some(&n) => n,
                None => {
                    self.nodes.push(TrieNode::default());
                    let n = self.nodes.len() - 1;
                    self.nodes[node].children.insert(ch, n);
                    n
                }
            };
        }
        if !self.nodes[node].terminal {
            self.nodes[node].terminal = true;
            self.words += 1;
        }
    }

    pub fn child(&self, node: usize, ch: char) -> Option<usize> {
        self.nodes[node].children.get(&ch).copied()
    }

    pub fn is_terminal(&self, node: usize) -> bool {
        self.nodes[node].terminal
    }

    pub fn walk(&self, word: &str) -> Option<usize> {
        word.chars().try_fold(Self::ROOT, |n, ch| self.child(n, ch))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.walk(word).is_some_and(|n| self.is_terminal(n))
    }

    pub fn len(&self) -> usize {
        self.words
    }

    pub fn is_empty(&self) -> bool {
        self.words == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_string).collect()
    }

    #[test]
    fn witten_bell_bigram_by_hand() {
        // one sentence "a b a b": padded <s> a b a b </s>
        let lm = NGramLm::estimate(&[toks("a b a b")], 2, &[]).unwrap();
        // unigram: counts a2 b2 </s>1, N=5, types=3, predictable vocab {</s>,<unk>,a,b}=4
        let uni = |c: f64| (c + 3.0 * 0.25) / 8.0;
        // history a: followed by b twice, c=2, N1+=1
        let p_b_a = (2.0 + 1.0 * uni(2.0)) / 3.0;
        let got = lm.logprob_str("b", &["a"]);
        assert!((got - p_b_a.log10()).abs() < 1e-6, "{got}");
        // unseen bigram (a, a): backoff(a) + unigram(a)
        let expect = (1.0f64 / 3.0).log10() + uni(2.0).log10();
        assert!((lm.logprob_str("a", &["a"]) - expect).abs() < 2e-6);
        // empty history is the unigram
        assert!((lm.logprob_str("</s>", &[]) - uni(1.0).log10()).abs() < 1e-6);
    }

    #[test]
    fn single_token_unigram_normalizes() {
        let lm = NGramLm::estimate(&[toks("x")], 1, &[]).unwrap();
        let lp = lm.logprob_str("x", &[]);
        assert!(lp < 0.0);
        assert!((lm.mass(&[]) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn order_larger_than_sentences_rejected() {
        assert!(NGramLm::estimate(&[toks("a b")], 5, &[]).is_err());
        assert!(NGramLm::estimate(&[toks("a b")], 4, &[]).is_ok());
        assert!(NGramLm::estimate::<String>(&[], 2, &[]).is_err());
    }

    fn corpus() -> Vec<Vec<String>> {
        [
            "le chat dort sur le tapis",
            "un chien court dans le jardin",
            "la maison est grande et belle",
            "le jardin est vert au printemps",
            "une femme lit un livre",
        ]
        .iter()
        .map(|l| char_tokens(l))
        .collect()
    }

    #[test]
    fn conditionals_sum_to_one() {
        let lm = NGramLm::estimate(&corpus(), 4, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids: Vec<TokenId> = (0..lm.vocab_len() as TokenId).filter(|&t| t != lm.bos()).collect();
        for _ in 0..100 {
            let len = rng.gen_range(0..4);
            let mut h: Vec<TokenId> = (0..len).map(|_| *ids.choose(&mut rng).unwrap()).collect();
            if rng.gen_bool(0.3) {
                h.insert(0, lm.bos());
            }
            let m = lm.mass(&h);
            assert!((m - 1.0).abs() < 1e-4, "history {h:?} mass {m}");
        }
        // histories taken from the corpus exercise explicit entries
        let s = &corpus()[0];
        let mut h = vec![lm.bos()];
        for t in s {
            assert!((lm.mass(&h) - 1.0).abs() < 1e-4);
            h.push(lm.token(t));
        }
    }

    #[test]
    fn histories_of_entries_exist() {
        let lm = NGramLm::estimate(&corpus(), 5, &[]).unwrap();
        for k in 2..=5 {
            for gram in lm.levels[k - 1].keys() {
                assert!(lm.levels[k - 2].contains_key(&gram[..k - 1]));
            }
        }
    }

    #[test]
    fn arpa_round_trip() {
        let lm = NGramLm::estimate(&corpus(), 3, &[]).unwrap();
        let text = lm.to_arpa();
        let back = NGramLm::from_arpa(&text).unwrap();
        assert_eq!(back.to_arpa(), text);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vocab: Vec<String> = lm.vocab().iter().filter(|t| *t != BOS).cloned().collect();
        for _ in 0..100 {
            let tok = vocab.choose(&mut rng).unwrap();
            let hist: Vec<&str> = (0..rng.gen_range(0..3))
                .map(|_| vocab.choose(&mut rng).unwrap().as_str())
                .collect();
            assert_eq!(lm.logprob_str(tok, &hist), back.logprob_str(tok, &hist));
        }
    }

    #[test]
    fn arpa_missing_end_is_reported_at_last_line() {
        let text = "\\data\\\nngram 1=2\n\n\\1-grams:\n-0.3\ta\n-0.3\tb\n";
        match NGramLm::from_arpa(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, text.lines().count()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn arpa_count_mismatch_rejected() {
        let text = "\\data\\\nngram 1=3\n\n\\1-grams:\n-0.3\ta\n-0.3\tb\n\n\\end\\\n";
        match NGramLm::from_arpa(text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 8);
                assert!(message.contains("declares 3"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hand_written_arpa_backoff() {
        let text = "\\data\\\nngram 1=3\nngram 2=2\n\n\\1-grams:\n-0.5\ta\t-0.2\n-0.6\tb\t-0.1\n-0.7\tc\n\n\\2-grams:\n-0.1\ta b\n-0.3\tb a\n\n\\end\\\n";
        let lm = NGramLm::from_arpa(text).unwrap();
        assert_eq!(lm.logprob_str("b", &["a"]), -0.1);
        assert!((lm.logprob_str("c", &["a"]) - (-0.2 - 0.7)).abs() < 1e-12);
        assert!((lm.logprob_str("c", &["c"]) - (-0.7)).abs() < 1e-12);
        assert!((lm.logprob_str("a", &["b"]) - (-0.3)).abs() < 1e-12);
    }

    #[test]
    fn training_text_beats_shuffled_characters() {
        let train = corpus();
        let lm = NGramLm::estimate(&train, 5, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shuffled: Vec<Vec<String>> = train
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.shuffle(&mut rng);
                s
            })
            .collect();
        assert!(lm.perplexity(&train) <= lm.perplexity(&shuffled));
    }

    #[test]
    fn higher_order_lowers_training_perplexity() {
        let train = corpus();
        let ppl: Vec<f64> = (5..=7)
            .map(|n| NGramLm::estimate(&train, n, &[]).unwrap().perplexity(&train))
            .collect();
        assert!(ppl[2] <= ppl[1] && ppl[1] <= ppl[0], "{ppl:?}");
    }

    #[test]
    fn normalization_and_filtering() {
        assert_eq!(normalize_text("cœur l\u{2019}eau a\u{2014}b"), "coeur l'eau a-b");
        let keep = filter_corpus(["abc", "ab#", "cœ"], &|c: char| c.is_ascii_lowercase());
        assert_eq!(keep, vec!["abc".to_string(), "coe".to_string()]);
    }

    #[test]
    fn tokenizers() {
        assert_eq!(char_tokens("a b"), vec!["a", SPACE, "b"]);
        assert_eq!(word_tokens("page 12b"), vec!["page", "1", "2", "b"]);
    }

    #[test]
    fn trie_paths() {
        let mut counts = HashMap::new();
        for (w, c) in [("le", 9), ("la", 5), ("les", 3), ("lune", 1)] {
            counts.insert(w.to_string(), c);
        }
        let t = LexiconTrie::from_counts(&counts, Some(3));
        assert_eq!(t.len(), 3);
        assert!(t.contains("les") && t.contains("le") && !t.contains("lune"));
        assert!(t.walk("lu").is_none());
        assert!(!t.is_terminal(t.walk("l").unwrap()));
    }
}
