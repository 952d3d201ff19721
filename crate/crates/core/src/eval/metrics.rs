use rust_stemmers::{Algorithm, Stemmer};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

fn pair_counts(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<Vec<(u64, u64)>> {
    if preds.len() != gts.len() {
        return Err(Error::data(format!("{} predictions for {} ground-truth masks", preds.len(), gts.len())));
    }
    preds
        .iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (p, g))| p.overlap(g).map_err(|e| Error::data(format!("pair {i}: {e}"))))
        .collect()
}

/// Cumulative IoU: total intersection over total union. Pairs that are
/// both empty add nothing; an all-empty set scores 0.
pub fn ciou(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    let (mut inter, mut union) = (0u64, 0u64);
    for (i, u) in pair_counts(preds, gts)? {
        inter += i;
        union += u;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Mean per-pair IoU; a pair that is empty on both sides scores 1.
pub fn giou(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    let counts = pair_counts(preds, gts)?;
    if counts.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = counts
        .iter()
        .map(|&(i, u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
        .sum();
    Ok(total / counts.len() as f64)
}

/// First standalone letter A–D (either case) in a response.
pub fn extract_choice(response: &str) -> Option<char> {
    let chars: Vec<char> = response.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let up = c.to_ascii_uppercase();
        if !('A'..='D').contains(&up) {
            continue;
        }
        let before = i == 0 || !chars[i - 1].is_alphanumeric();
        let after = i + 1 == chars.len() || !chars[i + 1].is_alphanumeric();
        if before && after {
            return Some(up);
        }
    }
    None
}

/// Fraction of responses whose extracted letter equals the key.
pub fn mcq_accuracy<S: AsRef<str>>(responses: &[S], keys: &[char]) -> Result<f64> {
    if keys.is_empty() {
        return Err(Error::data("no answer keys"));
    }
    if responses.len() != keys.len() {
        return Err(Error::data(format!("{} responses for {} keys", responses.len(), keys.len())));
    }
    if let Some(k) = keys.iter().find(|k| !('A'..='D').contains(*k)) {
        return Err(Error::data(format!("answer key {k:?} is not one of A-D")));
    }
    let correct = responses
        .iter()
        .zip(keys)
        .filter(|(r, &k)| extract_choice(r.as_ref()) == Some(k))
        .count();
    Ok(correct as f64 / keys.len() as f64)
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_THETA: f64 = 3.0;

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Unigram alignment as `(candidate position, reference position)` pairs,
/// exact matches first, then Porter2 stem matches, each pass greedy left
/// to right.
pub fn meteor_alignment(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let stemmer = Stemmer::create(Algorithm::English);
    let mut cand_used = vec![false; candidate.len()];
    let mut ref_used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let cs: Vec<String> = candidate.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let rs: Vec<String> = reference.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    for stage in 0..2 {
        for i in 0..candidate.len() {
            if cand_used[i] {
                continue;
            }
            let hit = (0..reference.len()).find(|&j| {
                !ref_used[j] && if stage == 0 { candidate[i] == reference[j] } else { cs[i] == rs[j] }
            });
            if let Some(j) = hit {
                cand_used[i] = true;
                ref_used[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// METEOR with exact and stem matching only.
pub fn meteor_lite(candidate: &str, reference: &str) -> Result<f64> {
    let r = words(reference);
    if r.is_empty() {
        return Err(Error::data("empty METEOR reference"));
    }
    let c = words(candidate);
    let pairs = meteor_alignment(&c, &r);
    let m = pairs.len();
    if m == 0 {
        return Ok(0.0);
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let f = p * rec / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * rec);
    let chunks = 1 + pairs.windows(2).filter(|w| w[1].1 != w[0].1 + 1).count();
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_THETA);
    Ok(f * (1.0 - penalty))
}

/// Mean of caption METEOR, MCQ accuracy, and the mean of cIoU and gIoU,
/// all in percent.
pub fn perbench_overall(meteor_pct: f64, accuracy_pct: f64, ciou_pct: f64, giou_pct: f64) -> Result<f64> {
    for (name, v) in [("meteor", meteor_pct), ("accuracy", accuracy_pct), ("ciou", ciou_pct), ("giou", giou_pct)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::data(format!("{name} {v} is outside [0, 100]")));
        }
    }
    Ok((meteor_pct + accuracy_pct + (ciou_pct + giou_pct) / 2.0) / 3.0)
}

/// Pixels of `mask` within Chebyshev distance `radius` of the background
/// (outside the image counts as background).
pub fn boundary_band(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let r = radius as isize;
    BinaryMask::from_fn(h, w, |y, x| {
        if !mask.get(y, x) {
            return false;
        }
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize || !mask.get(yy as usize, xx as usize) {
                    return true;
                }
            }
        }
        false
    })
}

/// Cumulative IoU of boundary bands.
pub fn boundary_iou(preds: &[BinaryMask], gts: &[BinaryMask], radius: usize) -> Result<f64> {
    let bp: Vec<BinaryMask> = preds.iter().map(|m| boundary_band(m, radius)).collect();
    let bg: Vec<BinaryMask> = gts.iter().map(|m| boundary_band(m, radius)).collect();
    ciou(&bp, &bg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(1, bits.len(), bits.to_vec()).unwrap()
    }

    #[test]
    fn distinguishing_pairs() {
        let preds = [m(&[1, 1, 0, 0]), m(&[1, 1, 1, 0])];
        let gts = [m(&[1, 0, 1, 1]), m(&[1, 1, 1, 0])];
        assert_eq!(ciou(&preds, &gts).unwrap(), 4.0 / 7.0);
        assert_eq!(giou(&preds, &gts).unwrap(), 0.625);
    }

    #[test]
    fn empty_pairs() {
        let e = [m(&[0, 0])];
        assert_eq!(giou(&e, &e).unwrap(), 1.0);
        assert_eq!(ciou(&e, &e).unwrap(), 0.0);
        assert!(ciou(&[m(&[0])], &[m(&[0, 1])]).is_err());
    }

    #[test]
    fn letter_extraction() {
        assert_eq!(extract_choice("The answer is B."), Some('B'));
        assert_eq!(extract_choice("banana"), None);
        assert_eq!(extract_choice("(c) is right"), Some('C'));
        assert_eq!(mcq_accuracy(&["A", "B"], &['A', 'C']).unwrap(), 0.5);
        assert!(mcq_accuracy::<&str>(&[], &[]).is_err());
    }

    #[test]
    fn meteor_cases() {
        let s = meteor_lite("the red disk", "the red disk").unwrap();
        assert!((s - (1.0 - 0.5 / 27.0)).abs() < 1e-12);
        assert_eq!(meteor_lite("blue", "red disk").unwrap(), 0.0);
        assert!(meteor_lite("cats sleeping", "cat sleeps").unwrap() > 0.0);
        assert!(meteor_lite("x", " . ").is_err());
    }

    #[test]
    fn band_of_solid_square() {
        let sq = BinaryMask::from_fn(7, 7, |y, x| (1..6).contains(&y) && (1..6).contains(&x));
        let band = boundary_band(&sq, 1);
        assert_eq!(band.area(), 25 - 9);
    }
}
