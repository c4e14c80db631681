/// Edit distance with unit costs, two-row dynamic programming.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - distance / max(len)`; two empty sequences are identical.
pub fn normalized_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - edit_distance(a, b) as f64 / longest as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive recursion over the three edit operations.
    fn brute(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = brute(ra, rb) + usize::from(x != y);
                sub.min(brute(ra, b) + 1).min(brute(a, rb) + 1)
            }
        }
    }

    #[test]
    fn known_values() {
        assert_eq!(normalized_levenshtein(b"abc", b"abc"), 1.0);
        assert!((normalized_levenshtein(b"abc", b"abd") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(normalized_levenshtein(b"abc", b""), 0.0);
        assert_eq!(normalized_levenshtein::<u8>(&[], &[]), 1.0);
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
    }

    proptest! {
        #[test]
        fn matches_brute_force(a in proptest::collection::vec(0u8..3, 0..7), b in proptest::collection::vec(0u8..3, 0..7)) {
            prop_assert_eq!(edit_distance(&a, &b), brute(&a, &b));
            let s = normalized_levenshtein(&a, &b);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s, normalized_levenshtein(&b, &a));
        }
    }
}
