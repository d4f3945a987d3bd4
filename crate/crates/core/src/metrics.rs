//! Token error rate and the post-aggregation frame statistics.

use crate::ctc::TokenSeq;
use crate::split::SlotCase;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorRate {
    pub edits: usize,
    pub reference_len: usize,
    /// `edits / |ref|`, or `|hyp|` when the reference is empty.
    pub rate: f64,
    pub empty_reference: bool,
}

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

pub fn error_rate(hyp: &TokenSeq, reference: &TokenSeq) -> ErrorRate {
    let edits = edit_distance(hyp.as_slice(), reference.as_slice());
    let n = reference.len();
    ErrorRate {
        edits,
        reference_len: n,
        rate: edits as f64 / n.max(1) as f64,
        empty_reference: n == 0,
    }
}

/// Corpus-level rate: total edits over total reference length.
pub fn corpus_error_rate(rates: &[ErrorRate]) -> f64 {
    let edits: usize = rates.iter().map(|r| r.edits).sum();
    let n: usize = rates.iter().map(|r| r.reference_len).sum();
    edits as f64 / n.max(1) as f64
}

/// What one utterance contributes to [`UmaStats`].
#[derive(Clone, Debug, PartialEq)]
pub struct UttCounts {
    pub duration: f64,
    pub tokens: usize,
    pub subsampled_frames: usize,
    /// Greedy slot outcomes, one per aggregated frame.
    pub slots: Vec<(usize, usize)>,
}

impl UttCounts {
    pub fn segments(&self) -> usize {
        self.slots.len()
    }

    pub fn frame_rate_before(&self) -> f64 {
        self.subsampled_frames as f64 / self.duration
    }

    pub fn frame_rate_after(&self) -> f64 {
        self.segments() as f64 / self.duration
    }
}

/// Rates in events per second; ratios over aggregated frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UmaStats {
    pub token_rate: f64,
    pub frame_rate_before: f64,
    pub frame_rate_after: f64,
    /// Aggregated frames emitting at least one non-blank token.
    pub nonblank_ratio: f64,
    /// Of the non-blank frames, those emitting two distinct tokens. `None`
    /// when there are no non-blank frames.
    pub two_nonblank_ratio: Option<f64>,
}

pub fn uma_statistics(utts: &[UttCounts]) -> UmaStats {
    let duration: f64 = utts.iter().map(|u| u.duration).sum();
    let tokens: usize = utts.iter().map(|u| u.tokens).sum();
    let before: usize = utts.iter().map(|u| u.subsampled_frames).sum();
    let frames: usize = utts.iter().map(UttCounts::segments).sum();
    let (mut nonblank, mut two) = (0usize, 0usize);
    for &(a, b) in utts.iter().flat_map(|u| &u.slots) {
        match SlotCase::classify(a, b) {
            SlotCase::BothBlank => {}
            SlotCase::OneToken => nonblank += 1,
            SlotCase::TwoTokens => {
                nonblank += 1;
                two += 1;
            }
        }
    }
    let per_second = |n: usize| if duration > 0.0 { n as f64 / duration } else { 0.0 };
    UmaStats {
        token_rate: per_second(tokens),
        frame_rate_before: per_second(before),
        frame_rate_after: per_second(frames),
        nonblank_ratio: nonblank as f64 / frames.max(1) as f64,
        two_nonblank_ratio: (nonblank > 0).then(|| two as f64 / nonblank as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(ids: &[usize]) -> TokenSeq {
        TokenSeq::new(ids.to_vec()).unwrap()
    }

    #[test]
    fn kitten_sitting() {
        let a: Vec<char> = "kitten".chars().collect();
        let b: Vec<char> = "sitting".chars().collect();
        assert_eq!(edit_distance(&a, &b), 3);
    }

    #[test]
    fn rates() {
        assert_eq!(error_rate(&seq(&[1, 2, 3]), &seq(&[1, 2, 3])).edits, 0);
        let r = error_rate(&seq(&[]), &seq(&[1, 2, 3, 4, 5]));
        assert_eq!((r.edits, r.rate), (5, 1.0));
        let r = error_rate(&seq(&[1, 2]), &seq(&[]));
        assert!(r.empty_reference);
        assert_eq!(r.rate, 2.0);
    }

    #[test]
    fn hand_counted_stats() {
        let u = UttCounts {
            duration: 1.5,
            tokens: 3,
            subsampled_frames: 6,
            slots: vec![(1, 1), (0, 0), (1, 2)],
        };
        let s = uma_statistics(&[u]);
        assert!((s.nonblank_ratio - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.two_nonblank_ratio, Some(0.5));
        assert_eq!(s.token_rate, 2.0);
        assert_eq!(s.frame_rate_before, 4.0);
        assert_eq!(s.frame_rate_after, 2.0);
    }

    #[test]
    fn all_blank_has_undefined_pair_ratio() {
        let u = UttCounts {
            duration: 1.0,
            tokens: 1,
            subsampled_frames: 4,
            slots: vec![(0, 0), (0, 0)],
        };
        let s = uma_statistics(&[u]);
        assert_eq!(s.nonblank_ratio, 0.0);
        assert_eq!(s.two_nonblank_ratio, None);
    }

    /// Plain full-table dynamic program.
    fn reference_distance(a: &[u8], b: &[u8]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let c = usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = (d[i - 1][j - 1] + c).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    proptest! {
        #[test]
        fn matches_full_table(a in prop::collection::vec(0u8..4, 0..10), b in prop::collection::vec(0u8..4, 0..10)) {
            let d = edit_distance(&a, &b);
            prop_assert_eq!(d, reference_distance(&a, &b));
            prop_assert_eq!(d, edit_distance(&b, &a));
            prop_assert!(d <= a.len().max(b.len()));
        }

        #[test]
        fn ratios_are_bounded(slots in prop::collection::vec((0usize..4, 0usize..4), 1..20)) {
            let s = uma_statistics(&[UttCounts { duration: 1.0, tokens: 1, subsampled_frames: 40, slots }]);
            prop_assert!((0.0..=1.0).contains(&s.nonblank_ratio));
            if let Some(r) = s.two_nonblank_ratio {
                prop_assert!((0.0..=1.0).contains(&r));
            }
        }
    }
}
