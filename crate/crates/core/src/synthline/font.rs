//! Skeleton stroke font on a 5×10 grid.
//!
//! Rows: 0 accent line, 1 cap/ascender top, 3 x-height, 7 baseline,
//! 9 descender bottom. Columns 0..=4. A glyph is a list of polylines, each
//! written as concatenated `xy` digit pairs; a single point is a dot.

const GRAVE: &str = "1122";
const ACUTE: &str = "2112";
const CIRCUMFLEX: &str = "122132";
const DIAERESIS: &str = "11 31";
const CAP_GRAVE: &str = "1021";
const CAP_ACUTE: &str = "3021";

const DOTLESS_I: &str = "1317";
const A: &str = "13233437 351506172736";
const C: &str = "331304061737";
const E: &str = "053534231304061737";
const O: &str = "1323343536271706050413";
const U: &str = "0306172736 3337";

/// Basic glyphs without composed accents.
static BASE: &[(char, &str)] = &[
    ('a', A),
    ('b', "0107 032334362707"),
    ('c', C),
    ('d', "3137 331304061737"),
    ('e', E),
    ('f', "31211217 0323"),
    ('g', "331304051636 33382909"),
    ('h', "0107 0413233437"),
    ('i', "1317 1112"),
    ('j', "23281908 2122"),
    ('k', "0107 3305 1437"),
    ('l', "111627"),
    ('m', "0307 04132427 24334447"),
    ('n', "0307 0413233437"),
    ('o', O),
    ('p', "0309 032334362707"),
    ('q', "3339 331304061737"),
    ('r', "0307 05142333"),
    ('s', "3313041525362707"),
    ('t', "11162737 0333"),
    ('u', U),
    ('v', "032743"),
    ('w', "0317253743"),
    ('x', "0337 3307"),
    ('y', "0306172736 33382909"),
    ('z', "03330737"),
    ('A', "072147 1535"),
    ('B', "0107 0131423303 033344463707"),
    ('C', "411102061747"),
    ('D', "0107 013142463707"),
    ('E', "41010747 0434"),
    ('F', "410107 0434"),
    ('G', "41110206174744 2444"),
    ('H', "0107 4147 0444"),
    ('I', "1131 2127 1737"),
    ('J', "1141 3136271706"),
    ('K', "0107 4104 2347"),
    ('L', "010747"),
    ('M', "0701244147"),
    ('N', "07014741"),
    ('O', "113142463717060211"),
    ('P', "07013142433404"),
    ('Q', "113142463717060211 3548"),
    ('R', "07013142433404 2447"),
    ('S', "423111020314344546371706"),
    ('T', "0141 2127"),
    ('U', "010617374641"),
    ('V', "012741"),
    ('W', "0117243741"),
    ('X', "0147 4107"),
    ('Y', "012441 2427"),
    ('Z', "01410747"),
    ('0', "112132362717060211"),
    ('1', "122127 1737"),
    ('2', "02113142430747"),
    ('3', "021131423313 334446371706"),
    ('4', "310444 3137"),
    ('5', "4101033344463707"),
    ('6', "3112030617374645341403"),
    ('7', "014117"),
    ('8', "13021131423313 1304061737464433"),
    ('9', "431302113142463717"),
    (' ', ""),
    ('.', "1617"),
    (',', "161708"),
    (';', "1314 161708"),
    (':', "1314 1617"),
    ('!', "1115 17"),
    ('?', "02113142432425 27"),
    ('\'', "1112"),
    ('"', "1112 2122"),
    ('-', "0525"),
    ('(', "21121627"),
    (')', "11222617"),
    ('/', "0741"),
    ('&', "4703021121220506172745"),
    ('%', "0741 11 37"),
    ('+', "2226 0444"),
    ('=', "0444 0646"),
    ('*', "2125 0344 0443"),
    ('#', "1127 3147 0343 0545"),
    ('@', "44241526364642311102061747"),
    ('_', "0848"),
    ('[', "21111727"),
    (']', "11212717"),
    ('<', "330537"),
    ('>', "033507"),
    ('œ', "231304061727 2327 2545443323 2747"),
    ('æ', "13232427 25150617 2545443323 2747"),
];

/// Accented glyphs as (char, base skeleton, accent skeleton).
static COMPOSED: &[(char, &str, &str)] = &[
    ('à', A, GRAVE),
    ('â', A, CIRCUMFLEX),
    ('ä', A, DIAERESIS),
    ('ç', C, "172818"),
    ('é', E, ACUTE),
    ('è', E, GRAVE),
    ('ê', E, CIRCUMFLEX),
    ('ë', E, DIAERESIS),
    ('î', DOTLESS_I, CIRCUMFLEX),
    ('ï', DOTLESS_I, DIAERESIS),
    ('ô', O, CIRCUMFLEX),
    ('ö', O, DIAERESIS),
    ('ù', U, GRAVE),
    ('û', U, CIRCUMFLEX),
    ('ü', U, DIAERESIS),
    ('ÿ', "0306172736 33382909", DIAERESIS),
    ('É', "41010747 0434", CAP_ACUTE),
    ('È', "41010747 0434", CAP_GRAVE),
    ('À', "072147 1535", CAP_GRAVE),
    ('Ç', "411102061747", "172818"),
];

pub type Stroke = Vec<(f32, f32)>;

fn parse(spec: &str, out: &mut Vec<Stroke>) {
    for part in spec.split_whitespace() {
        let digits: Vec<f32> = part.bytes().map(|b| f32::from(b - b'0')).collect();
        out.push(digits.chunks_exact(2).map(|p| (p[0], p[1])).collect());
    }
}

/// Strokes of `c` in grid units, or `None` if the font lacks it.
pub fn glyph(c: char) -> Option<Vec<Stroke>> {
    let mut strokes = Vec::new();
    if let Some((_, s)) = BASE.iter().find(|(g, _)| *g == c) {
        parse(s, &mut strokes);
        return Some(strokes);
    }
    let (_, base, accent) = COMPOSED.iter().find(|(g, _, _)| *g == c)?;
    parse(base, &mut strokes);
    parse(accent, &mut strokes);
    Some(strokes)
}

/// Every character the font can draw, in charset order.
pub fn repertoire() -> Vec<char> {
    BASE.iter()
        .map(|(c, _)| *c)
        .chain(COMPOSED.iter().map(|(c, _, _)| *c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn skeletons_well_formed() {
        for spec in BASE
            .iter()
            .map(|(_, s)| *s)
            .chain(COMPOSED.iter().flat_map(|(_, b, a)| [*b, *a]))
        {
            for part in spec.split_whitespace() {
                assert!(
                    part.len() % 2 == 0 && part.bytes().all(|b| b.is_ascii_digit()),
                    "{part}"
                );
                for p in part.as_bytes().chunks(2) {
                    assert!(p[0] - b'0' <= 4, "{part}");
                }
            }
        }
    }

    #[test]
    fn glyphs_distinct() {
        let reps = repertoire();
        assert_eq!(reps.len(), 109);
        let unique: HashSet<char> = reps.iter().copied().collect();
        assert_eq!(unique.len(), reps.len());
        let mut seen = HashSet::new();
        for c in reps {
            let key = format!("{:?}", glyph(c).unwrap());
            assert!(seen.insert(key), "glyph of {c:?} duplicates another");
        }
    }
}
