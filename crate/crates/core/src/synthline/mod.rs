//! Deterministic synthetic text-line images with graded difficulty, the
//! line preprocessing used for training, and the manifest/PGM formats.

mod font;
mod text;

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use font::repertoire;
pub use text::{MarkovText, BUNDLED_SNIPPET};

/// Ordered unique symbols; class `k + 1` is `chars[k]`, class 0 is blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charset {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Charset {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(chars.len());
        for (k, &c) in chars.iter().enumerate() {
            if index.insert(c, k + 1).is_some() {
                return Err(Error::invalid(format!("duplicate character {c:?} in charset")));
            }
        }
        if !index.contains_key(&' ') {
            return Err(Error::invalid("charset must contain the space character"));
        }
        Ok(Self { chars, index })
    }

    /// The 109 drawable symbols of the built-in font.
    pub fn default_set() -> Self {
        Self::new(font::repertoire()).expect("built-in repertoire is valid")
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// Symbols plus the blank.
    pub fn class_count(&self) -> usize {
        self.chars.len() + 1
    }

    /// Symbol per class index with a placeholder at the blank, as the
    /// decoder's `symbols` table expects.
    pub fn class_symbols(&self) -> Vec<char> {
        std::iter::once('\0').chain(self.chars.iter().copied()).collect()
    }

    pub fn class_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn symbol(&self, class: usize) -> Option<char> {
        class.checked_sub(1).and_then(|k| self.chars.get(k).copied())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.class_of(c)
                    .ok_or_else(|| Error::invalid(format!("character {c:?} is not in the charset")))
            })
            .collect()
    }

    /// Unknown classes and the blank are skipped.
    pub fn decode(&self, labels: &[usize]) -> String {
        labels.iter().filter_map(|&l| self.symbol(l)).collect()
    }

    /// One character per line; the space is written as a line with a
    /// single space.
    pub fn to_file_string(&self) -> String {
        self.chars.iter().map(|c| format!("{c}\n")).collect()
    }

    pub fn from_file_string(s: &str) -> Result<Self> {
        let mut chars = Vec::new();
        for (i, line) in s.lines().enumerate() {
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                (None, _) => continue,
                _ => return Err(Error::parse(i + 1, "expected exactly one character per line")),
            }
        }
        Self::new(chars)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        })
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Self::Easy),
            "medium" => Ok(Self::Medium),
            "hard" => Ok(Self::Hard),
            _ => Err(Error::invalid(format!("unknown difficulty '{s}' (easy, medium, hard)"))),
        }
    }
}

/// 8-bit grayscale image, row-major, 255 = paper.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height || width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "image {width}x{height} cannot hold {} pixels",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::invalid("truncated PGM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P5" {
            return Err(Error::invalid(format!("not a binary PGM (magic {})", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad PGM header field '{s}'")))
        };
        let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::invalid(format!("unsupported PGM maxval {maxval}")));
        }
        let data = bytes
            .get(pos..pos + w * h)
            .ok_or_else(|| Error::invalid("PGM pixel data is truncated"))?;
        Self::new(w, h, data.to_vec())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    /// Ink coverage in [0, 1] of pixel `i`.
    pub fn ink(&self, i: usize) -> f64 {
        f64::from(255 - self.pixels[i]) / 255.0
    }

    /// Total ink of rows `rows`.
    pub fn ink_mass(&self, rows: std::ops::Range<usize>) -> f64 {
        rows.flat_map(|y| (0..self.width).map(move |x| y * self.width + x))
            .map(|i| self.ink(i))
            .sum()
    }
}

/// Mean per-pixel binary entropy (bits) of ink coverage.
pub fn ink_entropy(image: &GrayImage) -> f64 {
    let h = |p: f64| {
        if p <= 0.0 || p >= 1.0 {
            0.0
        } else {
            -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
        }
    };
    let n = image.pixels.len();
    (0..n).map(|i| h(image.ink(i))).sum::<f64>() / n as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineSample {
    pub image: GrayImage,
    pub transcript: String,
    pub difficulty: Difficulty,
    pub seed: u64,
}

/// Ranges the per-line style is drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderStyle {
    pub height: usize,
    pub slant: f32,
    pub thickness: (f32, f32),
    pub scale: (f32, f32),
    pub center_jitter: f32,
    pub wobble: f32,
    pub speckle: f64,
    pub neighbors: bool,
}

impl RenderStyle {
    pub fn for_difficulty(d: Difficulty, height: usize) -> Self {
        match d {
            Difficulty::Easy => Self {
                height,
                slant: 0.05,
                thickness: (2.2, 2.8),
                scale: (0.97, 1.03),
                center_jitter: 0.01,
                wobble: 0.0,
                speckle: 0.0,
                neighbors: false,
            },
            Difficulty::Medium => Self {
                height,
                slant: 0.25,
                thickness: (1.8, 3.5),
                scale: (0.9, 1.1),
                center_jitter: 0.03,
                wobble: 0.25,
                speckle: 0.003,
                neighbors: false,
            },
            Difficulty::Hard => Self {
                height,
                slant: 0.4,
                thickness: (1.5, 4.5),
                scale: (0.85, 1.15),
                center_jitter: 0.05,
                wobble: 0.5,
                speckle: 0.012,
                neighbors: true,
            },
        }
    }
}

/// Grid unit as a fraction of the image height.
const UNIT: f32 = 0.05;
const GRID_CENTER_ROW: f32 = 4.5;
const BASELINE_ROW: f32 = 7.0;

struct Canvas {
    width: usize,
    height: usize,
    ink: Vec<f32>,
}

impl Canvas {
    fn segment(&mut self, a: (f32, f32), b: (f32, f32), radius: f32, level: f32) {
        let pad = radius + 1.0;
        let x0 = (a.0.min(b.0) - pad).floor().max(0.0) as usize;
        let y0 = (a.1.min(b.1) - pad).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + pad).ceil().max(0.0) as usize).min(self.width);
        let y1 = ((a.1.max(b.1) + pad).ceil().max(0.0) as usize).min(self.height);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let t = if len2 > 0.0 {
                    (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
                let cover = (radius + 0.5 - (qx * qx + qy * qy).sqrt()).clamp(0.0, 1.0) * level;
                let cell = &mut self.ink[y * self.width + x];
                *cell = cell.max(cover);
            }
        }
    }
}

/// Per-glyph placement.
struct Pen {
    unit: f32,
    slant: f32,
    baseline: f32,
    wobble_amp: f32,
    wobble_period: f32,
    wobble_phase: f32,
}

impl Pen {
    fn map(&self, x0: f32, p: (f32, f32)) -> (f32, f32) {
        let x = x0 + p.0 * self.unit + self.slant * (BASELINE_ROW - p.1) * self.unit;
        let wob = self.wobble_amp * (std::f32::consts::TAU * x / self.wobble_period + self.wobble_phase).sin();
        (x, self.baseline + (p.1 - BASELINE_ROW) * self.unit + wob)
    }

    fn draw(&self, canvas: &mut Canvas, c: char, x0: f32, radius: f32, level: f32) {
        for stroke in font::glyph(c).unwrap_or_default() {
            if stroke.len() == 1 {
                let p = self.map(x0, stroke[0]);
                canvas.segment(p, p, radius * 1.2, level);
            }
            for w in stroke.windows(2) {
                canvas.segment(self.map(x0, w[0]), self.map(x0, w[1]), radius, level);
            }
        }
    }
}

fn advance(c: char, unit: f32) -> f32 {
    let glyph = font::glyph(c).unwrap_or_default();
    match glyph.iter().flatten().map(|p| p.0).reduce(f32::max) {
        Some(right) => (right + 1.4) * unit,
        None => 2.5 * unit,
    }
}

/// Render `text` with a style drawn from `style` under `seed`.
pub fn render_line(text: &str, charset: &Charset, difficulty: Difficulty, seed: u64) -> Result<LineSample> {
    render_with_style(
        text,
        charset,
        &RenderStyle::for_difficulty(difficulty, 128),
        difficulty,
        seed,
    )
}

pub fn render_with_style(
    text: &str,
    charset: &Charset,
    style: &RenderStyle,
    difficulty: Difficulty,
    seed: u64,
) -> Result<LineSample> {
    if text.is_empty() {
        return Err(Error::invalid("cannot render an empty line"));
    }
    if let Some(c) = text
        .chars()
        .find(|&c| charset.class_of(c).is_none() || font::glyph(c).is_none())
    {
        return Err(Error::invalid(format!("character {c:?} is not in the charset")));
    }
    if style.height < 16 {
        return Err(Error::invalid(format!(
            "line height {} is below 16 pixels",
            style.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = style.height as f32;
    let span = |r: (f32, f32), rng: &mut ChaCha8Rng| {
        if r.1 > r.0 {
            rng.gen_range(r.0..r.1)
        } else {
            r.0
        }
    };
    let unit = UNIT * h * span(style.scale, &mut rng);
    let slant = if style.slant > 0.0 {
        rng.gen_range(-style.slant..style.slant)
    } else {
        0.0
    };
    let radius = span(style.thickness, &mut rng) / 2.0 * h / 128.0;
    let level = rng.gen_range(0.85..1.0);
    let center = h / 2.0
        + if style.center_jitter > 0.0 {
            rng.gen_range(-style.center_jitter..style.center_jitter) * h
        } else {
            0.0
        };
    let pen = Pen {
        unit,
        slant,
        baseline: center + (BASELINE_ROW - GRID_CENTER_ROW) * unit,
        wobble_amp: style.wobble * unit,
        wobble_period: rng.gen_range(6.0..14.0) * unit,
        wobble_phase: rng.gen_range(0.0..std::f32::consts::TAU),
    };
    let margin = 2.0 * unit + slant.abs() * 9.0 * unit;
    let body: f32 = text.chars().map(|c| advance(c, unit)).sum();
    let width = (body + 2.0 * margin).ceil() as usize;
    let mut canvas = Canvas {
        width,
        height: style.height,
        ink: vec![0.0; width * style.height],
    };
    let mut x = margin;
    for c in text.chars() {
        pen.draw(&mut canvas, c, x, radius, level);
        x += advance(c, unit);
    }
    if style.neighbors {
        draw_neighbors(&mut canvas, &mut rng, unit, radius, level);
    }
    if style.speckle > 0.0 {
        for v in canvas.ink.iter_mut() {
            if rng.gen_bool(style.speckle) {
                *v = v.max(rng.gen_range(0.2..0.9));
            }
        }
    }
    let pixels = canvas
        .ink
        .iter()
        .map(|&v| 255 - (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(LineSample {
        image: GrayImage::new(width, style.height, pixels)?,
        transcript: text.to_string(),
        difficulty,
        seed,
    })
}

/// Descenders of a phantom line above and ascenders of one below.
fn draw_neighbors(canvas: &mut Canvas, rng: &mut ChaCha8Rng, unit: f32, radius: f32, level: f32) {
    const DESCENDERS: &[char] = &['g', 'j', 'p', 'q', 'y'];
    const ASCENDERS: &[char] = &['b', 'd', 'f', 'h', 'k', 'l', 't', 'A', 'H', 'T', 'W'];
    let h = canvas.height as f32;
    for (pool, top) in [(DESCENDERS, true), (ASCENDERS, false)] {
        let baseline = if top {
            rng.gen_range(0.0..0.04) * h
        } else {
            // ascender tops land inside the bottom band
            h - rng.gen_range(0.03..0.12) * h + (BASELINE_ROW - 1.0) * unit
        };
        let pen = Pen {
            unit,
            slant: rng.gen_range(-0.2..0.2),
            baseline,
            wobble_amp: 0.0,
            wobble_period: 1.0,
            wobble_phase: 0.0,
        };
        let mut x = rng.gen_range(0.0..2.0) * unit;
        let mut first = true;
        while x < canvas.width as f32 {
            let c = pool[rng.gen_range(0..pool.len())];
            if first || rng.gen_bool(0.6) {
                pen.draw(canvas, c, x, radius, level);
            }
            first = false;
            x += advance(c, unit) + rng.gen_range(0.0..3.0) * unit;
        }
    }
}

/// Transcript length groups: short (<8), medium (8..=19), long (>19).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LengthGroup {
    Short,
    Medium,
    Long,
}

pub fn length_group(transcript: &str) -> LengthGroup {
    match transcript.chars().count() {
        0..=7 => LengthGroup::Short,
        8..=19 => LengthGroup::Medium,
        _ => LengthGroup::Long,
    }
}

/// Stream of transcripts for a corpus.
#[derive(Clone, Debug)]
pub enum TextSource {
    Markov(MarkovText),
    /// Lines are used in order, cycling.
    Lines(Vec<String>),
}

impl TextSource {
    pub fn bundled(charset: &Charset) -> Self {
        Self::Markov(MarkovText::bundled(charset.chars()))
    }

    fn line(&self, index: usize, rng: &mut ChaCha8Rng, chars: (usize, usize)) -> String {
        match self {
            Self::Markov(m) => m.sample_line(rng, chars.0, chars.1),
            Self::Lines(lines) => lines[index % lines.len()].clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub lines: usize,
    pub difficulty: Difficulty,
    pub seed: u64,
    /// Inclusive transcript length range for generated text.
    pub chars: (usize, usize),
    pub height: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            lines: 64,
            difficulty: Difficulty::Medium,
            seed: 0,
            chars: (4, 32),
            height: 128,
        }
    }
}

/// splitmix64 step.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed of sample `index` in a corpus seeded with `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ index as u64)
}

/// Transcripts only, without rendering.
pub fn generate_transcripts(cfg: &CorpusConfig, source: &TextSource) -> Vec<String> {
    (0..cfg.lines)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, i) ^ 0x7E47);
            source.line(i, &mut rng, cfg.chars)
        })
        .collect()
}

/// Render a corpus in memory; independent of the rayon pool size.
pub fn generate_samples(cfg: &CorpusConfig, charset: &Charset, source: &TextSource) -> Result<Vec<LineSample>> {
    if cfg.lines == 0 {
        return Err(Error::invalid("corpus needs at least one line"));
    }
    let style = RenderStyle::for_difficulty(cfg.difficulty, cfg.height);
    generate_transcripts(cfg, source)
        .into_par_iter()
        .enumerate()
        .map(|(i, text)| render_with_style(&text, charset, &style, cfg.difficulty, sample_seed(cfg.seed, i)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub image: PathBuf,
    pub transcript: String,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CHARSET_FILE: &str = "charset.txt";

/// Write images, `manifest.tsv` and `charset.txt` under `dir`.
pub fn make_corpus(
    dir: impl AsRef<Path>,
    cfg: &CorpusConfig,
    charset: &Charset,
    source: &TextSource,
) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let samples = generate_samples(cfg, charset, source)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = PathBuf::from("images").join(format!("line_{i:06}.pgm"));
        s.image.save(dir.join(&rel))?;
        entries.push(ManifestEntry {
            image: rel,
            transcript: s.transcript.clone(),
        });
    }
    write_manifest(dir.join(MANIFEST_FILE), &entries)?;
    charset.save(dir.join(CHARSET_FILE))?;
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for e in entries {
        writeln!(f, "{}\t{}", e.image.display(), e.transcript).map_err(|err| Error::io(path, err))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (image, transcript) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(i + 1, "expected 'path<TAB>transcript'"))?;
        if transcript.is_empty() {
            return Err(Error::parse(i + 1, "empty transcript"));
        }
        out.push(ManifestEntry {
            image: PathBuf::from(image),
            transcript: transcript.to_string(),
        });
    }
    Ok(out)
}

/// Load a manifest and its images (paths resolved against its directory).
pub fn load_corpus(manifest: impl AsRef<Path>) -> Result<Vec<(GrayImage, String)>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_par_iter()
        .map(|e| Ok((GrayImage::load(base.join(&e.image))?, e.transcript)))
        .collect()
}

/// Height-normalized, standardized network input `[1, height, W']`.
pub fn preprocess(image: &GrayImage) -> Result<Tensor<f32>> {
    preprocess_to(image, 128)
}

pub fn preprocess_to(image: &GrayImage, height: usize) -> Result<Tensor<f32>> {
    if image.height < 8 {
        return Err(Error::invalid(format!(
            "image height {} is below 8 pixels",
            image.height
        )));
    }
    let ratio = height as f64 / image.height as f64;
    let width = ((image.width as f64 * ratio).round() as usize).max(1);
    let ink: Vec<f64> = (0..image.pixels.len()).map(|i| image.ink(i)).collect();
    let sample = |x: usize, y: usize| ink[y * image.width + x];
    let mut out = Vec::with_capacity(width * height);
    let sx = image.width as f64 / width as f64;
    let sy = image.height as f64 / height as f64;
    for oy in 0..height {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (image.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let ty = fy - y0 as f64;
        for ox in 0..width {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (image.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            let tx = fx - x0 as f64;
            let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
            let top = lerp(sample(x0, y0), sample(x1, y0), tx);
            let bottom = lerp(sample(x0, y1), sample(x1, y1), tx);
            out.push(lerp(top, bottom, ty));
        }
    }
    standardize(&mut out);
    Tensor::new(&[1, height, width], out.into_iter().map(|v| v as f32).collect())
}

/// In-place zero mean, unit variance; near-constant inputs divide by 1e-6.
pub fn standardize(values: &mut [f64]) {
    let n = values.len().max(1) as f64;
    let first = values.first().copied().unwrap_or(0.0);
    let mean = first + values.iter().map(|v| v - first).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-6 {
        log::warn!("image has near-zero variance (sd {sd:e}); standardizing with 1e-6");
    }
    let sd = sd.max(1e-6);
    for v in values.iter_mut() {
        *v = (*v - mean) / sd;
    }
}
