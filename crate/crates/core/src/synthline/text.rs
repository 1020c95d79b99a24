//! Seeded character-level Markov text over a bundled public-domain snippet.

use std::collections::HashMap;

use rand::Rng;

/// Excerpts from Lewis Carroll (1865) and Jules Verne (1872).
pub const BUNDLED_SNIPPET: &str = "\
Alice was beginning to get very tired of sitting by her sister on the bank, and of having \
nothing to do: once or twice she had peeped into the book her sister was reading, but it had \
no pictures or conversations in it, 'and what is the use of a book,' thought Alice 'without \
pictures or conversations?' So she was considering in her own mind (as well as she could, for \
the hot day made her feel very sleepy and stupid), whether the pleasure of making a \
daisy-chain would be worth the trouble of getting up and picking the daisies, when suddenly a \
White Rabbit with pink eyes ran close by her. There was nothing so very remarkable in that; \
nor did Alice think it so very much out of the way to hear the Rabbit say to itself, 'Oh \
dear! Oh dear! I shall be late!' When she thought it over afterwards, it occurred to her that \
she ought to have wondered at this, but at the time it all seemed quite natural; but when the \
Rabbit actually took a watch out of its waistcoat-pocket, and looked at it, and then hurried \
on, Alice started to her feet, for it flashed across her mind that she had never before seen \
a rabbit with either a waistcoat-pocket, or a watch to take out of it, and burning with \
curiosity, she ran across the field after it, and fortunately was just in time to see it pop \
down a large rabbit-hole under the hedge. \
En l'année 1872, la maison portant le numéro 7 de Saville-row, Burlington Gardens, maison dans \
laquelle Sheridan mourut en 1814, était habitée par Phileas Fogg, esq., l'un des membres les \
plus singuliers et les plus remarqués du Reform-Club de Londres, bien qu'il semblât prendre à \
tâche de ne rien faire qui pût attirer l'attention. À l'un des plus grands orateurs qui \
honorent l'Angleterre, succédait donc ce Phileas Fogg, personnage énigmatique, dont on ne \
savait rien, sinon que c'était un fort galant homme et l'un des plus beaux gentlemen de la \
haute société anglaise. On disait qu'il ressemblait à Byron, mais un Byron à moustaches et à \
favoris, un Byron impassible, qui aurait vécu mille ans sans vieillir. Anglais, à coup sûr, \
Phileas Fogg n'était peut-être pas Londonner. On ne l'avait jamais vu ni à la Bourse, ni à la \
Banque, ni dans aucun des comptoirs de la Cité. Ni les bassins ni les docks de Londres n'avaient \
jamais reçu un navire ayant pour armateur Phileas Fogg. Ce gentleman ne figurait dans aucun \
comité d'administration. Son nom n'avait jamais retenti dans un collège d'avocats, ni au \
Temple, ni à Lincoln's-inn, ni à Gray's-inn. Jamais il ne plaida ni à la Cour du chancelier, \
ni au Banc de la Reine, ni à l'Échiquier, ni en Cour ecclésiastique. Il n'était ni \
industriel, ni négociant, ni marchand, ni agriculteur. Il ne faisait partie ni de \
l'Institution royale de la Grande-Bretagne, ni de l'Institution de Londres, ni de \
l'Institution des Artisans, ni de l'Institution Russell, ni de l'Institution littéraire de \
l'Ouest, ni de l'Institution du Droit, ni de cette Institution des Arts et des Sciences \
réunis, qui est placée sous le patronage direct de Sa Gracieuse Majesté. Il n'appartenait \
enfin à aucune des nombreuses sociétés qui pullulent dans la capitale de l'Angleterre, depuis \
la Société de l'Armonica jusqu'à la Société entomologique, fondée principalement dans le but \
de détruire les insectes nuisibles. Phileas Fogg était membre du Reform-Club, et voilà tout.";

/// Order-`k` character chain with a start table of word-initial contexts.
#[derive(Clone, Debug)]
pub struct MarkovText {
    order: usize,
    next: HashMap<Vec<char>, Vec<(char, u32)>>,
    starts: Vec<Vec<char>>,
    extras: Vec<char>,
    extra_rate: f64,
}

impl MarkovText {
    /// `allowed` filters the training text; characters of `allowed` that
    /// never occur in it are injected at `extra_rate` per character.
    pub fn from_text(text: &str, order: usize, allowed: &[char], extra_rate: f64) -> Self {
        let order = order.max(1);
        let chars: Vec<char> = text
            .chars()
            .map(|c| if c.is_whitespace() { ' ' } else { c })
            .filter(|c| allowed.contains(c))
            .collect();
        let mut counts: HashMap<Vec<char>, HashMap<char, u32>> = HashMap::new();
        let mut starts = Vec::new();
        for i in 0..chars.len().saturating_sub(order) {
            let ctx = chars[i..i + order].to_vec();
            if (i == 0 || chars[i - 1] == ' ') && ctx[0] != ' ' {
                starts.push(ctx.clone());
            }
            *counts.entry(ctx).or_default().entry(chars[i + order]).or_default() += 1;
        }
        let next = counts
            .into_iter()
            .map(|(k, v)| {
                let mut v: Vec<(char, u32)> = v.into_iter().collect();
                v.sort_unstable();
                (k, v)
            })
            .collect();
        starts.sort();
        starts.dedup();
        let extras = allowed
            .iter()
            .copied()
            .filter(|c| *c != ' ' && !chars.contains(c))
            .collect();
        Self {
            order,
            next,
            starts,
            extras,
            extra_rate,
        }
    }

    pub fn bundled(allowed: &[char]) -> Self {
        Self::from_text(BUNDLED_SNIPPET, 3, allowed, 0.01)
    }

    /// One word-like line of `min..=max` characters (best effort at the
    /// upper bound, never empty).
    pub fn sample_line<R: Rng + ?Sized>(&self, rng: &mut R, min: usize, max: usize) -> String {
        let max = max.max(min).max(1);
        let target = rng.gen_range(min.max(1)..=max);
        if self.starts.is_empty() {
            return (0..target).map(|_| self.extra(rng)).collect();
        }
        loop {
            let mut line = self.starts[rng.gen_range(0..self.starts.len())].clone();
            while line.len() < max {
                if line.len() >= target && line.last() == Some(&' ') {
                    break;
                }
                let ctx = &line[line.len() - self.order..];
                let c = match self.next.get(ctx) {
                    Some(options) => pick(options, rng),
                    None => ' ',
                };
                if c != ' ' && !self.extras.is_empty() && rng.gen_bool(self.extra_rate) {
                    line.push(self.extra(rng));
                } else {
                    line.push(c);
                }
                // restart the context after a space at a random word start
                if c == ' ' && line.len() + self.order < max && rng.gen_bool(0.3) {
                    let s = &self.starts[rng.gen_range(0..self.starts.len())];
                    line.extend_from_slice(s);
                }
            }
            line.truncate(max);
            let text: String = line.into_iter().collect::<String>().trim().to_string();
            let text = text.split(' ').filter(|w| !w.is_empty()).collect::<Vec<_>>().join(" ");
            if text.chars().count() >= min.max(1) {
                return text;
            }
        }
    }

    fn extra<R: Rng + ?Sized>(&self, rng: &mut R) -> char {
        if self.extras.is_empty() {
            'x'
        } else {
            self.extras[rng.gen_range(0..self.extras.len())]
        }
    }
}

fn pick<R: Rng + ?Sized>(options: &[(char, u32)], rng: &mut R) -> char {
    let total: u32 = options.iter().map(|(_, n)| n).sum();
    let mut r = rng.gen_range(0..total);
    for &(c, n) in options {
        if r < n {
            return c;
        }
        r -= n;
    }
    options[options.len() - 1].0
}
