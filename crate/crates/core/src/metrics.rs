//! Superpixel-level AUROC.
//!
//! The area under the ROC curve equals the Mann–Whitney statistic: the
//! fraction of (positive, negative) pairs in which the positive scores higher,
//! with ties worth half a pair.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::superpixel::{Class, LabelMatrix, SuperpixelScores, CLASS_COUNT};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::invalid(format!("score {s} is not comparable")));
    }
    Ok(())
}

/// AUROC by sorting and midranks, O(n log n). `None` when either class is absent.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of doubled midranks of the positives; doubling keeps every rank an integer.
    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share the midrank (start + 1 + end) / 2
        let doubled_mid = (start + 1 + end) as u128;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i]).count() as u128;
        doubled_rank_sum += doubled_mid * pos_in_group;
        start = end;
    }
    let (p, n) = (positives as u128, negatives as u128);
    // 2U = 2·R − P(P+1); AUROC = U / (P·N)
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(Some(doubled_u as f64 / (2 * p * n) as f64))
}

/// Exhaustive pair counting, O(P·N). Reference for [`auroc`].
pub fn auroc_oracle(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_inputs(scores, labels)?;
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Ok(None);
    }
    let mut wins = 0u64;
    let mut ties = 0u64;
    for &a in &pos {
        for &b in &neg {
            if a > b {
                wins += 1;
            } else if a == b {
                ties += 1;
            }
        }
    }
    let pairs = (pos.len() * neg.len()) as f64;
    Ok(Some((wins as f64 + 0.5 * ties as f64) / pairs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRoc {
    pub class: String,
    /// `None` when the pool lacks positives or negatives for this class.
    pub auroc: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocResult {
    pub classes: Vec<ClassRoc>,
    /// Mean over classes with a defined AUROC; `None` if there are none.
    pub macro_average: Option<f64>,
}

/// One image's predicted scores and ground truth.
#[derive(Debug, Clone, Copy)]
pub struct EvalImage<'a> {
    pub name: &'a str,
    pub scores: &'a SuperpixelScores,
    pub labels: &'a LabelMatrix,
}

/// Pools superpixels from every image and scores each class with one ROC.
pub fn evaluate(images: &[EvalImage<'_>]) -> Result<RocResult> {
    for img in images {
        if img.scores.len() != img.labels.len() {
            return Err(Error::shape(format!(
                "image {}: {} scored superpixels but {} labelled",
                img.name,
                img.scores.len(),
                img.labels.len()
            )));
        }
    }
    let mut classes = Vec::with_capacity(CLASS_COUNT);
    for class in Class::ALL {
        let c = class.index();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for img in images {
            scores.extend(img.scores.rows().iter().map(|r| r[c]));
            labels.extend(img.labels.rows().iter().map(|r| r[c] == 1));
        }
        let positives = labels.iter().filter(|&&l| l).count();
        classes.push(ClassRoc {
            class: class.name().to_string(),
            auroc: auroc(&scores, &labels)?,
            positives,
            negatives: labels.len() - positives,
        });
    }
    let defined: Vec<f64> = classes.iter().filter_map(|c| c.auroc).collect();
    let macro_average =
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(RocResult {
        classes,
        macro_average,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn four_point_example() {
        let s = [0.9, 0.8, 0.3, 0.2];
        let l = [true, false, true, false];
        assert_eq!(auroc(&s, &l).unwrap(), Some(0.75));
        assert_eq!(auroc_oracle(&s, &l).unwrap(), Some(0.75));
    }

    #[test]
    fn separated_and_tied() {
        let l = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.2, 0.3, 0.4], &l).unwrap(), Some(1.0));
        assert_eq!(auroc(&[0.5; 4], &l).unwrap(), Some(0.5));
    }

    #[test]
    fn single_class_is_undefined() {
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]).unwrap(), None);
        assert_eq!(auroc_oracle(&[0.1, 0.2], &[false, false]).unwrap(), None);
        assert_eq!(auroc(&[], &[]).unwrap(), None);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(auroc(&[0.1], &[true, false]).is_err());
        assert!(auroc(&[f64::NAN, 0.1], &[true, false]).is_err());
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
        let n = rng.gen_range(2..=200);
        // a small pool of values forces duplicates
        let pool: Vec<f64> = (0..rng.gen_range(1..=n)).map(|_| rng.gen()).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores = (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
        (scores, labels)
    }

    #[test]
    fn sorted_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..1000 {
            let (s, l) = random_instance(&mut rng);
            let fast = auroc(&s, &l).unwrap().unwrap();
            let slow = auroc_oracle(&s, &l).unwrap().unwrap();
            assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn flipped_labels_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for _ in 0..200 {
            let (s, l) = random_instance(&mut rng);
            let flipped: Vec<bool> = l.iter().map(|v| !v).collect();
            let a = auroc(&s, &l).unwrap().unwrap();
            let b = auroc(&s, &flipped).unwrap().unwrap();
            assert!((a + b - 1.0).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_transform(
            raw in proptest::collection::vec((0u8..20, any::<bool>()), 2..80)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s) / 20.0).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&warped, &labels).unwrap());
        }
    }

    fn matrices(rows: &[[u8; 4]], scores: &[[f64; 4]]) -> (LabelMatrix, SuperpixelScores) {
        (
            LabelMatrix::new(rows.to_vec()).unwrap(),
            SuperpixelScores::new(scores.to_vec()).unwrap(),
        )
    }

    #[test]
    fn perfect_predictions_and_undefined_class() {
        let rows = [[1, 0, 0, 1], [0, 1, 0, 0], [1, 1, 0, 0]];
        let (labels, scores) = matrices(&rows, &rows.map(|r| r.map(f64::from)));
        let imgs = [EvalImage {
            name: "a",
            scores: &scores,
            labels: &labels,
        }];
        let res = evaluate(&imgs).unwrap();
        assert_eq!(res.classes[0].auroc, Some(1.0));
        assert_eq!(res.classes[2].auroc, None);
        assert_eq!(res.classes[2].positives, 0);
        assert_eq!(res.macro_average, Some(1.0));
    }

    #[test]
    fn count_mismatch_names_image() {
        let (labels, _) = matrices(&[[0; 4], [1; 4]], &[]);
        let scores = SuperpixelScores::new(vec![[0.5; 4]]).unwrap();
        let imgs = [EvalImage {
            name: "img_007",
            scores: &scores,
            labels: &labels,
        }];
        let err = evaluate(&imgs).unwrap_err().to_string();
        assert!(err.contains("img_007"), "{err}");
    }

    #[test]
    fn random_scores_average_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let rows: Vec<[u8; 4]> = (0..10_000).map(|_| [0; 4].map(|_| rng.gen_bool(0.3) as u8)).collect();
        let scores: Vec<[f64; 4]> = (0..10_000).map(|_| [0.0; 4].map(|_| rng.gen())).collect();
        let (labels, scores) = matrices(&rows, &scores);
        let res = evaluate(&[EvalImage {
            name: "null",
            scores: &scores,
            labels: &labels,
        }])
        .unwrap();
        let avg = res.macro_average.unwrap();
        assert!((avg - 0.5).abs() < 0.03, "{avg}");
        let defined: Vec<f64> = res.classes.iter().filter_map(|c| c.auroc).collect();
        let lo = defined.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = defined.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= avg && avg <= hi);
    }
}
