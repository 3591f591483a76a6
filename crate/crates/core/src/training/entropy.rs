use crate::codec::LatentCode;
use crate::error::{Error, Result};

/// Empirical entropy (nats) of the chosen indices in a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEntropy {
    pub per_stage: Vec<f64>,
    /// Mean of `per_stage`; the headline diagnostic.
    pub mean: f64,
    /// Entropy of all indices pooled across stages.
    pub pooled: f64,
}

fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let total = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0)
}

pub fn batch_entropy(codes: &[LatentCode]) -> Result<BatchEntropy> {
    let first = codes
        .first()
        .ok_or_else(|| Error::InvalidArgument("batch entropy of an empty batch".into()))?;
    let (k, n) = (first.options(), first.stages());
    if codes.iter().any(|c| c.options() != k || c.stages() != n) {
        return Err(Error::InvalidArgument(
            "batch entropy over codes of different shapes".into(),
        ));
    }
    let mut pooled = vec![0usize; k];
    let per_stage: Vec<f64> = (0..n)
        .map(|i| {
            let mut counts = vec![0usize; k];
            for c in codes {
                counts[c.indices()[i] - 1] += 1;
                pooled[c.indices()[i] - 1] += 1;
            }
            entropy(&counts)
        })
        .collect();
    let mean = if n == 0 {
        0.0
    } else {
        per_stage.iter().sum::<f64>() / n as f64
    };
    Ok(BatchEntropy {
        mean,
        pooled: if n == 0 { 0.0 } else { entropy(&pooled) },
        per_stage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codes(k: usize, rows: &[&[usize]]) -> Vec<LatentCode> {
        rows.iter()
            .map(|r| LatentCode::new(k, r.to_vec()).unwrap())
            .collect()
    }

    #[test]
    fn point_mass_has_zero_entropy() {
        let e = batch_entropy(&codes(4, &[&[2, 3], &[2, 3], &[2, 3]])).unwrap();
        assert_eq!(e.per_stage, vec![0.0, 0.0]);
        assert_eq!(e.mean, 0.0);
        assert!((e.pooled - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_stage_reaches_ln_k() {
        let e = batch_entropy(&codes(4, &[&[1, 1], &[2, 1], &[3, 1], &[4, 1]])).unwrap();
        assert!((e.per_stage[0] - 4f64.ln()).abs() < 1e-12);
        assert_eq!(e.per_stage[1], 0.0);
        assert!((e.mean - 4f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariant_and_bounded() {
        let a = codes(
            8,
            &[&[1, 5, 2], &[3, 5, 8], &[3, 1, 2], &[7, 2, 2], &[1, 1, 1]],
        );
        let mut b = a.clone();
        b.reverse();
        b.swap(0, 2);
        let (ea, eb) = (batch_entropy(&a).unwrap(), batch_entropy(&b).unwrap());
        assert_eq!(ea, eb);
        assert!(ea.per_stage.iter().all(|&h| (0.0..=8f64.ln()).contains(&h)));
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(batch_entropy(&[]).is_err());
    }
}
