//! Edit distance and optimal alignments under unit costs.
//!
//! The dynamic program is restricted to a diagonal band that widens until
//! it provably contains an optimal path (a path of cost `d` never leaves the
//! band `|i - j| <= d`), so results are exact.
//!
//! Costs are `edits << 32 | gaps`: among alignments with the fewest edits,
//! the one with the fewest insertions and deletions wins, so a symbol
//! shifted inside a run reads as substitutions rather than a gap pair.

const INF: u64 = u64::MAX / 2;
const EDIT: u64 = 1 << 32;
const GAP: u64 = EDIT + 1;

/// Aligned pair of positions; `None` marks a gap.
pub type AlignedPair = (Option<usize>, Option<usize>);

struct Band {
    n: usize,
    m: usize,
    k: usize,
    width: usize,
    cost: Vec<u64>,
}

impl Band {
    fn idx(&self, i: usize, j: usize) -> Option<usize> {
        let off = j + self.k;
        if off < i || off - i >= self.width {
            return None;
        }
        Some(i * self.width + off - i)
    }

    fn get(&self, i: usize, j: usize) -> u64 {
        self.idx(i, j).map_or(INF, |x| self.cost[x])
    }
}

fn fill<T>(a: &[T], b: &[T], k: usize, eq: &impl Fn(&T, &T) -> bool) -> Band {
    let (n, m) = (a.len(), b.len());
    let width = 2 * k + 1;
    let mut band = Band {
        n,
        m,
        k,
        width,
        cost: vec![INF; (n + 1) * width],
    };
    for i in 0..=n {
        let lo = i.saturating_sub(k);
        let hi = (i + k).min(m);
        for j in lo..=hi {
            let v = if i == 0 {
                j as u64 * GAP
            } else if j == 0 {
                i as u64 * GAP
            } else {
                let sub = band.get(i - 1, j - 1) + EDIT * u64::from(!eq(&a[i - 1], &b[j - 1]));
                let del = band.get(i - 1, j) + GAP;
                let ins = band.get(i, j - 1) + GAP;
                sub.min(del).min(ins)
            };
            let x = band.idx(i, j).unwrap();
            band.cost[x] = v;
        }
    }
    band
}

fn solve<T>(a: &[T], b: &[T], eq: &impl Fn(&T, &T) -> bool) -> Band {
    let mut k = a.len().abs_diff(b.len()).max(32);
    loop {
        let band = fill(a, b, k, eq);
        let d = (band.get(band.n, band.m) >> 32) as usize;
        if d <= k || k >= a.len().max(b.len()) {
            return band;
        }
        k = (k * 2).max(d);
    }
}

/// Unit-cost edit distance with a custom equality.
pub fn edit_distance_by<T>(a: &[T], b: &[T], eq: impl Fn(&T, &T) -> bool) -> usize {
    let band = solve(a, b, &eq);
    (band.get(band.n, band.m) >> 32) as usize
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    edit_distance_by(a, b, |x, y| x == y)
}

/// One optimal alignment of `a` against `b`, in order, with the fewest
/// gaps. Remaining ties prefer a substitution, then a deletion from `a`.
pub fn align_by<T>(a: &[T], b: &[T], eq: impl Fn(&T, &T) -> bool) -> Vec<AlignedPair> {
    let band = solve(a, b, &eq);
    let (mut i, mut j) = (a.len(), b.len());
    let mut out = Vec::with_capacity(i.max(j));
    while i > 0 || j > 0 {
        let here = band.get(i, j);
        if i > 0 && j > 0 && here == band.get(i - 1, j - 1) + EDIT * u64::from(!eq(&a[i - 1], &b[j - 1])) {
            out.push((Some(i - 1), Some(j - 1)));
            i -= 1;
            j -= 1;
        } else if i > 0 && here == band.get(i - 1, j) + GAP {
            out.push((Some(i - 1), None));
            i -= 1;
        } else {
            out.push((None, Some(j - 1)));
            j -= 1;
        }
    }
    out.reverse();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(a: &[u8], b: &[u8]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let s = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = s.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn classic_examples() {
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(levenshtein(b"", b"abc"), 3);
        assert_eq!(levenshtein::<u8>(&[], &[]), 0);
        assert_eq!(levenshtein(b"flaw", b"lawn"), 2);
    }

    #[test]
    fn wide_difference_widens_band() {
        let a = vec![0u8; 300];
        let b = vec![1u8; 300];
        assert_eq!(levenshtein(&a, &b), 300);
    }

    proptest! {
        #[test]
        fn matches_naive(a in proptest::collection::vec(0u8..3, 0..80), b in proptest::collection::vec(0u8..3, 0..80)) {
            prop_assert_eq!(levenshtein(&a, &b), naive(&a, &b));
        }

        #[test]
        fn alignment_cost_equals_distance(a in proptest::collection::vec(0u8..2, 0..60), b in proptest::collection::vec(0u8..2, 0..60)) {
            let pairs = align_by(&a, &b, |x, y| x == y);
            let cost: usize = pairs.iter().map(|p| match p {
                (Some(i), Some(j)) => usize::from(a[*i] != b[*j]),
                _ => 1,
            }).sum();
            prop_assert_eq!(cost, levenshtein(&a, &b));
            prop_assert_eq!(pairs.iter().filter(|p| p.0.is_some()).count(), a.len());
            prop_assert_eq!(pairs.iter().filter(|p| p.1.is_some()).count(), b.len());
        }
    }
}
