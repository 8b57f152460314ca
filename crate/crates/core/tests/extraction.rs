//! Column ranking and M-mode gathering against brute-force loops.

use mmode_ssl::mmode::{extract_mmode, rank_columns, BModeVideo};
use mmode_ssl::Tensor;
use proptest::prelude::*;

/// Small videos with integer pixels drawn from a narrow range so that
/// column totals tie often.
fn video_strategy() -> impl Strategy<Value = BModeVideo> {
    (1usize..=10, 1usize..=16, 1usize..=16, 0u32..4).prop_flat_map(|(t, h, w, spread)| {
        let max = [1u32, 3, 20, 255][spread as usize];
        (prop::collection::vec(0..=max, t * h * w), 0..w, 0..w).prop_map(move |(px, a, b)| {
            let (lo, hi) = (a.min(b), a.max(b));
            let frames = Tensor::new(vec![t, h, w], px.into_iter().map(f64::from).collect()).unwrap();
            BModeVideo::new(frames, 10.0, (lo, hi), "v").unwrap()
        })
    })
}

fn pixel(v: &BModeVideo, t: usize, r: usize, c: usize) -> f64 {
    v.frames().at(&[t, r, c])
}

/// Selection sort by descending total, lowest column first among ties.
fn oracle_ranking(v: &BModeVideo) -> Vec<(usize, f64)> {
    let mut left: Vec<(usize, f64)> = v
        .candidate_columns()
        .map(|c| {
            let mut total = 0.0;
            for t in 0..v.num_frames() {
                for r in 0..v.height() {
                    total += pixel(v, t, r, c);
                }
            }
            (c, total)
        })
        .collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (c, s) = left[i];
            let (bc, bs) = left[best];
            if s > bs || (s == bs && c < bc) {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ranking_matches_oracle(v in video_strategy()) {
        prop_assert_eq!(rank_columns(&v), oracle_ranking(&v));
    }

    #[test]
    fn gather_matches_oracle(v in video_strategy()) {
        for c in v.candidate_columns() {
            let m = extract_mmode(&v, c).unwrap();
            prop_assert_eq!(m.pixels.shape(), &[v.height(), v.num_frames()][..]);
            for r in 0..v.height() {
                for t in 0..v.num_frames() {
                    prop_assert_eq!(m.pixels.at(&[r, t]), pixel(&v, t, r, c));
                }
            }
            prop_assert_eq!(m.column_index, c);
        }
        let (lo, hi) = v.pleural_bounds();
        if hi + 1 < v.width() {
            prop_assert!(extract_mmode(&v, hi + 1).is_err());
        }
        if lo > 0 {
            prop_assert!(extract_mmode(&v, lo - 1).is_err());
        }
    }
}
