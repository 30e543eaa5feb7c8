use crate::error::{Error, Result};

/// Per-class point counts and their normalized frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub counts: Vec<u64>,
    pub frequencies: Vec<f64>,
    pub num_classes: usize,
}

impl ClassStats {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total: u64 = counts.iter().sum();
        let frequencies = counts
            .iter()
            .map(|&c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
            .collect();
        Self {
            num_classes: counts.len(),
            counts,
            frequencies,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Classes with at least one point.
    pub fn present(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|&c| self.counts[c] > 0).collect()
    }

    pub fn merge(&self, other: &ClassStats) -> Result<ClassStats> {
        if self.num_classes != other.num_classes {
            return Err(Error::arg("class count mismatch"));
        }
        Ok(Self::from_counts(
            self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
        ))
    }
}

pub fn class_histogram(labels: &[u32], num_classes: usize) -> Result<ClassStats> {
    let mut counts = vec![0u64; num_classes];
    for (ordinal, &l) in labels.iter().enumerate() {
        let slot = counts.get_mut(l as usize).ok_or_else(|| Error::Data {
            ordinal,
            message: format!("label {l} outside 0..{num_classes}"),
        })?;
        *slot += 1;
    }
    Ok(ClassStats::from_counts(counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn small_example() {
        let s = class_histogram(&[0, 0, 1], 3).unwrap();
        assert_eq!(s.counts, vec![2, 1, 0]);
        assert_eq!(s.present(), vec![0, 1]);
        assert!((s.frequencies.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_labels() {
        let s = class_histogram(&[], 4).unwrap();
        assert_eq!(s.counts, vec![0; 4]);
        assert_eq!(s.frequencies, vec![0.0; 4]);
    }

    #[test]
    fn out_of_range_label() {
        assert!(matches!(
            class_histogram(&[0, 3], 3),
            Err(Error::Data { ordinal: 1, .. })
        ));
    }

    #[test]
    fn matches_tally_on_large_input() {
        let mut r = rng::seeded(3);
        let labels: Vec<u32> = (0..100_000).map(|_| r.random_range(0..19)).collect();
        let s = class_histogram(&labels, 19).unwrap();
        for c in 0..19u32 {
            let n = labels.iter().filter(|&&l| l == c).count() as u64;
            assert_eq!(s.counts[c as usize], n);
        }
        assert_eq!(s.total(), labels.len() as u64);
        assert!((s.frequencies.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
