use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::check_mask;
use crate::tensor::Tensor;

/// One line of the training metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixacc: Option<f64>,
    pub wall_ms: f64,
}

impl MetricsRecord {
    /// The record without its wall time, which is the only field allowed to
    /// differ between two runs with the same seed.
    pub fn timeless(&self) -> MetricsRecord {
        MetricsRecord {
            wall_ms: 0.0,
            ..self.clone()
        }
    }
}

/// mIoU and pixel accuracy accumulated over the whole set. IoU per class is
/// `|pred ∩ gt| / |pred ∪ gt|` over all pixels of all pairs; classes absent
/// from both sides are left out of the mean.
pub fn evaluate(pred: &[Tensor], gt: &[Tensor], classes: usize) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidTensor(format!(
            "need equally many predicted and ground-truth masks, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = vec![0u64; classes];
    let mut union = vec![0u64; classes];
    let (mut correct, mut total) = (0u64, 0u64);
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("evaluate", p.shape(), g.shape()));
        }
        check_mask(p, classes).map_err(|e| Error::InvalidTensor(format!("prediction {i}: {e}")))?;
        check_mask(g, classes).map_err(|e| Error::InvalidTensor(format!("ground truth {i}: {e}")))?;
        for (&a, &b) in p.data().iter().zip(g.data()) {
            let (a, b) = (a as usize, b as usize);
            total += 1;
            if a == b {
                correct += 1;
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
    }
    let present: Vec<f64> = inter
        .iter()
        .zip(&union)
        .filter(|(_, &u)| u > 0)
        .map(|(&i, &u)| i as f64 / u as f64)
        .collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok((miou, correct as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(v: &[f64]) -> Tensor {
        Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let g = mask(&[0.0, 1.0, 2.0, 2.0]);
        assert_eq!(evaluate(&[g.clone()], &[g], 3).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn inverted_binary_is_zero() {
        let g = mask(&[0.0, 1.0, 1.0, 0.0]);
        let p = mask(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(evaluate(&[p], &[g], 2).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn worked_example() {
        let (miou, acc) = evaluate(&[mask(&[0.0, 1.0, 1.0, 1.0])], &[mask(&[0.0, 0.0, 1.0, 1.0])], 2).unwrap();
        assert_eq!(miou, (0.5 + 2.0 / 3.0) / 2.0);
        assert!((miou - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(acc, 0.75);
    }

    #[test]
    fn absent_class_is_excluded() {
        let g = mask(&[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(evaluate(&[g.clone()], &[g], 5).unwrap().0, 1.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = mask(&[0.0, 1.0]);
        assert!(evaluate(&[mask(&[0.0, 2.0])], &[g.clone()], 2).is_err());
        assert!(evaluate(&[mask(&[0.0, 0.5])], &[g.clone()], 2).is_err());
        assert!(evaluate(&[mask(&[0.0, 1.0, 1.0])], &[g.clone()], 2).is_err());
        assert!(evaluate(&[], &[g], 2).is_err());
    }
}
