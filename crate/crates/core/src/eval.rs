//! Transcription scoring, both ways: framewise multi-F0 counts over roll
//! cells, and note-tracking precision/recall over event lists matched by
//! pitch and onset (optionally offset) within tolerances.

use crate::midi::TimedNote;
use crate::tensor::Tensor;

pub const DEFAULT_ONSET_TOLERANCE: f64 = 0.05;
pub const DEFAULT_OFFSET_RATIO: f64 = 0.2;
pub const OFFSET_TOLERANCE_FLOOR: f64 = 0.05;

/// Precision/recall/F-measure with the usual empty-set conventions:
/// no predictions means precision 1, no references means recall 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrfReport {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl PrfReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            1.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f_measure = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        PrfReport {
            precision,
            recall,
            f_measure,
            tp,
            fp,
            fn_,
        }
    }

    /// One CSV row: `label,precision,recall,f_measure,tp,fp,fn`.
    pub fn csv_row(&self, label: &str) -> String {
        format!(
            "{label},{:.6},{:.6},{:.6},{},{},{}",
            self.precision, self.recall, self.f_measure, self.tp, self.fp, self.fn_
        )
    }
}

/// Cell-by-cell counts over binary sustain planes (values >= 0.5 count as
/// active; callers threshold real-valued activations first).
pub fn framewise_prf(pred: &Tensor<f32>, reference: &Tensor<f32>) -> PrfReport {
    assert!(
        pred.same_shape(reference),
        "framewise scoring needs equal roll shapes, got {:?} vs {:?}",
        pred.shape(),
        reference.shape()
    );
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (&p, &r) in pred.data().iter().zip(reference.data()) {
        match (p >= 0.5, r >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    PrfReport::from_counts(tp, fp, fn_)
}

fn offset_matches(pred: &TimedNote, reference: &TimedNote, offset_ratio: f64) -> bool {
    let dur = reference.offset - reference.onset;
    let tol = (offset_ratio * dur).max(OFFSET_TOLERANCE_FLOOR);
    (pred.offset - reference.offset).abs() <= tol
}

fn note_prf_impl(
    pred: &[TimedNote],
    reference: &[TimedNote],
    onset_tol: f64,
    offset_ratio: Option<f64>,
) -> PrfReport {
    // Candidate pairs: equal pitch, onsets within the (closed) tolerance,
    // plus the offset condition when requested. Greedy one-to-one matching
    // in increasing onset-distance order, ties broken by earlier reference
    // onset, then earlier prediction.
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (ri, r) in reference.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            if p.pitch != r.pitch {
                continue;
            }
            let dist = (p.onset - r.onset).abs();
            if dist > onset_tol {
                continue;
            }
            if let Some(ratio) = offset_ratio {
                if !offset_matches(p, r, ratio) {
                    continue;
                }
            }
            candidates.push((dist, ri, pi));
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut ref_used = vec![false; reference.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut tp = 0;
    for &(_, ri, pi) in &candidates {
        if !ref_used[ri] && !pred_used[pi] {
            ref_used[ri] = true;
            pred_used[pi] = true;
            tp += 1;
        }
    }
    PrfReport::from_counts(tp, pred.len() - tp, reference.len() - tp)
}

/// Note tracking by onset only: a match needs equal pitch and onsets
/// within `tolerance_s` (closed interval).
pub fn note_onset_prf(pred: &[TimedNote], reference: &[TimedNote], tolerance_s: f64) -> PrfReport {
    note_prf_impl(pred, reference, tolerance_s, None)
}

/// Note tracking with offsets: additionally, offsets must agree within
/// `max(offset_ratio * reference duration, 0.05 s)`.
pub fn note_onset_offset_prf(
    pred: &[TimedNote],
    reference: &[TimedNote],
    onset_tol: f64,
    offset_ratio: f64,
) -> PrfReport {
    note_prf_impl(pred, reference, onset_tol, Some(offset_ratio))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn notes(spec: &[(u8, f64, f64)]) -> Vec<TimedNote> {
        spec.iter().map(|&(p, a, b)| TimedNote::new(p, a, b)).collect()
    }

    #[test]
    fn framewise_trivial_cases() {
        let mut reference = Tensor::<f32>::zeros(&[4, 6]);
        reference.set(1, 2, 1.0);
        reference.set(3, 4, 1.0);

        let perfect = framewise_prf(&reference, &reference);
        assert_eq!((perfect.precision, perfect.recall, perfect.f_measure), (1.0, 1.0, 1.0));

        let empty = Tensor::<f32>::zeros(&[4, 6]);
        let miss = framewise_prf(&empty, &reference);
        assert_eq!(miss.recall, 0.0);
        assert_eq!(miss.f_measure, 0.0);
        assert_eq!(miss.precision, 1.0);

        let mut half = Tensor::<f32>::zeros(&[4, 6]);
        half.set(1, 2, 1.0);
        let r = framewise_prf(&half, &reference);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 0.5);
        assert!((r.f_measure - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn onset_matching_trivial_cases() {
        let reference = notes(&[(60, 1.0, 2.0), (64, 1.5, 2.5)]);
        let perfect = note_onset_prf(&reference, &reference, 0.05);
        assert_eq!(perfect.f_measure, 1.0);

        // Exactly at tolerance still matches (closed interval); 0.05 is
        // exactly representable as the difference of these onsets.
        let reference_b = notes(&[(60, 0.0, 1.0)]);
        let pred = notes(&[(60, 0.05, 1.0)]);
        let r = note_onset_prf(&pred, &reference_b, 0.05);
        assert_eq!(r.tp, 1);

        let pred = notes(&[(60, 1.0, 2.0)]);
        let r = note_onset_prf(&pred, &reference, 0.05);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 0.5);
        assert!((r.f_measure - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn onset_offset_conditions() {
        let reference = notes(&[(60, 1.0, 2.0)]);
        let identical = note_onset_offset_prf(&reference, &reference, 0.05, 0.2);
        assert_eq!(identical.f_measure, 1.0);

        // Offset off by 90% of a 1 s duration fails the 0.2 ratio.
        let pred = notes(&[(60, 1.0, 2.9)]);
        let r = note_onset_offset_prf(&pred, &reference, 0.05, 0.2);
        assert_eq!(r.tp, 0);

        // 0.04 s offset error on a 0.1 s note passes via the 0.05 s floor.
        let reference = notes(&[(60, 1.0, 1.1)]);
        let pred = notes(&[(60, 1.0, 1.14)]);
        let r = note_onset_offset_prf(&pred, &reference, 0.05, 0.2);
        assert_eq!(r.tp, 1);
    }

    #[test]
    fn empty_versus_empty_scores_perfect() {
        let r = note_onset_prf(&[], &[], 0.05);
        assert_eq!((r.precision, r.recall, r.f_measure), (1.0, 1.0, 1.0));
        let f = framewise_prf(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2, 2]));
        assert_eq!((f.precision, f.recall, f.f_measure), (1.0, 1.0, 1.0));
    }

    #[test]
    fn unmatched_additions_never_help() {
        let reference = notes(&[(60, 1.0, 2.0), (62, 2.0, 3.0)]);
        let pred = notes(&[(60, 1.0, 2.0)]);
        let base = note_onset_prf(&pred, &reference, 0.05);
        let mut more = pred.clone();
        more.push(TimedNote::new(100, 9.0, 9.5));
        let noisy = note_onset_prf(&more, &reference, 0.05);
        assert!(noisy.precision < base.precision);
        assert_eq!(noisy.recall, base.recall);

        let mut more_ref = reference.clone();
        more_ref.push(TimedNote::new(101, 5.0, 6.0));
        let harder = note_onset_prf(&pred, &more_ref, 0.05);
        assert!(harder.recall < base.recall);
    }

    #[test]
    fn matching_is_one_to_one() {
        // Two predictions near one reference: only one may match.
        let reference = notes(&[(60, 1.0, 2.0)]);
        let pred = notes(&[(60, 0.99, 2.0), (60, 1.01, 2.0)]);
        let r = note_onset_prf(&pred, &reference, 0.05);
        assert_eq!(r.tp, 1);
        assert_eq!(r.fp, 1);
        assert!(r.tp <= pred.len().min(reference.len()));
    }

    /// Exhaustive maximum bipartite matching oracle for small instances.
    fn optimal_tp(pred: &[TimedNote], reference: &[TimedNote], tol: f64) -> usize {
        fn augment(
            ri: usize,
            adj: &Vec<Vec<usize>>,
            seen: &mut Vec<bool>,
            owner: &mut Vec<Option<usize>>,
        ) -> bool {
            for &pi in &adj[ri] {
                if seen[pi] {
                    continue;
                }
                seen[pi] = true;
                if owner[pi].is_none()
                    || augment(owner[pi].unwrap(), adj, seen, owner)
                {
                    owner[pi] = Some(ri);
                    return true;
                }
            }
            false
        }
        let adj: Vec<Vec<usize>> = reference
            .iter()
            .map(|r| {
                pred.iter()
                    .enumerate()
                    .filter(|(_, p)| p.pitch == r.pitch && (p.onset - r.onset).abs() <= tol)
                    .map(|(pi, _)| pi)
                    .collect()
            })
            .collect();
        let mut owner: Vec<Option<usize>> = vec![None; pred.len()];
        let mut tp = 0;
        for ri in 0..reference.len() {
            let mut seen = vec![false; pred.len()];
            if augment(ri, &adj, &mut seen, &mut owner) {
                tp += 1;
            }
        }
        tp
    }

    /// Random valid transcription pairs: per-pitch monophonic reference
    /// streams, predictions derived by jitter, drops and insertions. On
    /// this class greedy and optimal matching coincide.
    fn random_instance(rng: &mut rand_chacha::ChaCha8Rng) -> (Vec<TimedNote>, Vec<TimedNote>) {
        use rand::Rng;
        let mut reference = Vec::new();
        let mut pred = Vec::new();
        for pitch in 60u8..=63 {
            if rng.gen_bool(0.3) {
                continue;
            }
            let mut t = rng.gen_range(0.0..0.5);
            while t < 2.0 && reference.len() < 8 {
                let dur = rng.gen_range(0.2..0.5);
                reference.push(TimedNote::new(pitch, t, t + dur));
                if rng.gen_bool(0.8) {
                    let jitter = rng.gen_range(-0.04..0.04);
                    pred.push(TimedNote::new(pitch, (t + jitter).max(0.0), t + dur));
                }
                t += dur + rng.gen_range(0.15..0.4);
            }
        }
        let extras = rng.gen_range(0..3);
        for _ in 0..extras {
            let pitch = rng.gen_range(60u8..64);
            let onset = rng.gen_range(2.5..4.0);
            pred.push(TimedNote::new(pitch, onset, onset + 0.2));
        }
        (pred, reference)
    }

    #[test]
    fn greedy_agrees_with_optimal_on_random_small_instances() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(55);
        for round in 0..500 {
            let (pred, reference) = random_instance(&mut rng);
            let greedy = note_onset_prf(&pred, &reference, 0.05).tp;
            let optimal = optimal_tp(&pred, &reference, 0.05);
            assert_eq!(greedy, optimal, "round {round}");
        }
    }

    #[test]
    fn greedy_never_beats_optimal_even_on_contrived_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(56);
        for _ in 0..300 {
            let gen = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<TimedNote> {
                let n = rng.gen_range(0..=8);
                (0..n)
                    .map(|_| {
                        let pitch = rng.gen_range(60..62);
                        let onset = rng.gen_range(0.0..0.4);
                        TimedNote::new(pitch, onset, onset + 0.3)
                    })
                    .collect()
            };
            let pred = gen(&mut rng);
            let reference = gen(&mut rng);
            let greedy = note_onset_prf(&pred, &reference, 0.05).tp;
            let optimal = optimal_tp(&pred, &reference, 0.05);
            assert!(greedy <= optimal);
        }
    }

    #[test]
    fn csv_row_format() {
        let r = PrfReport::from_counts(3, 1, 2);
        assert_eq!(r.csv_row("framewise"), "framewise,0.750000,0.600000,0.666667,3,1,2");
    }
}
