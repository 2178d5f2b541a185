use std::collections::BTreeMap;

/// Cramér's V between two categorical sequences, from the Pearson χ² of their
/// contingency table. Returns 0 (with a warning) when either side has fewer than
/// two distinct values or the lengths disagree.
pub fn cramers_v(labels: &[usize], attributes: &[usize]) -> f64 {
    if labels.len() != attributes.len() || labels.len() < 2 {
        log::warn!("cramers_v: need two equal-length sequences of at least 2 items");
        return 0.0;
    }
    let index = |xs: &[usize]| -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for x in xs {
            let next = m.len();
            m.entry(*x).or_insert(next);
        }
        m
    };
    let rows = index(labels);
    let cols = index(attributes);
    let (r, c) = (rows.len(), cols.len());
    if r < 2 || c < 2 {
        log::warn!("cramers_v: degenerate table ({r}x{c}), reporting 0");
        return 0.0;
    }
    let mut table = vec![0f64; r * c];
    for (l, a) in labels.iter().zip(attributes) {
        table[rows[l] * c + cols[a]] += 1.0;
    }
    let n = labels.len() as f64;
    let row_sum: Vec<f64> = (0..r).map(|i| table[i * c..(i + 1) * c].iter().sum()).collect();
    let col_sum: Vec<f64> = (0..c).map(|j| (0..r).map(|i| table[i * c + j]).sum()).collect();
    // Terms are summed in sorted order so the result is exactly symmetric.
    let mut terms = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            let expected = row_sum[i] * col_sum[j] / n;
            let d = table[i * c + j] - expected;
            terms.push(d * d / expected);
        }
    }
    terms.sort_by(f64::total_cmp);
    let chi2: f64 = terms.iter().sum();
    let k = (r.min(c) - 1) as f64;
    (chi2 / (n * k)).sqrt().min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn from_table(table: &[[usize; 2]; 2]) -> (Vec<usize>, Vec<usize>) {
        let mut l = vec![];
        let mut a = vec![];
        for (i, row) in table.iter().enumerate() {
            for (j, n) in row.iter().enumerate() {
                l.extend(std::iter::repeat(i).take(*n));
                a.extend(std::iter::repeat(j).take(*n));
            }
        }
        (l, a)
    }

    #[test]
    fn hand_examples() {
        let (l, a) = from_table(&[[50, 0], [0, 50]]);
        assert!((cramers_v(&l, &a) - 1.0).abs() < 1e-12);
        let (l, a) = from_table(&[[25, 25], [25, 25]]);
        assert_eq!(cramers_v(&l, &a), 0.0);
        // χ² = 10 with n = 80.
        let (l, a) = from_table(&[[2, 18], [30, 30]]);
        assert!((cramers_v(&l, &a) - (10.0f64 / 80.0).sqrt()).abs() < 1e-12);
        assert!((cramers_v(&l, &a) - 0.3536).abs() < 1e-4);
        // Every cell deviates by 10 from an expected 20: χ² = 20, V = 0.5.
        let (l, a) = from_table(&[[30, 10], [10, 30]]);
        assert!((cramers_v(&l, &a) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_give_zero() {
        assert_eq!(cramers_v(&[1, 1, 1], &[0, 1, 0]), 0.0);
        assert_eq!(cramers_v(&[1], &[0]), 0.0);
        assert_eq!(cramers_v(&[1, 2], &[0]), 0.0);
    }

    proptest! {
        #[test]
        fn symmetric_and_relabel_invariant(pairs in prop::collection::vec((0usize..4, 0usize..3), 2..80)) {
            let l: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let a: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let v = cramers_v(&l, &a);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v.to_bits(), cramers_v(&a, &l).to_bits());
            let relabeled: Vec<usize> = l.iter().map(|x| 10 - x).collect();
            prop_assert_eq!(v.to_bits(), cramers_v(&relabeled, &a).to_bits());
        }
    }
}
