use crate::error::{Error, Result};
use ndarray::{ArrayBase, Data, Dimension};

fn overlap_counts<S1, S2, D>(pred: &ArrayBase<S1, D>, gt: &ArrayBase<S2, D>) -> Result<(usize, usize, usize)>
where
    S1: Data<Elem = u8>,
    S2: Data<Elem = u8>,
    D: Dimension,
{
    if pred.shape() != gt.shape() {
        return Err(Error::arg(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (mut inter, mut a, mut b) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        a += usize::from(p);
        b += usize::from(g);
    }
    Ok((inter, a, b))
}

/// Dice similarity `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dsc<S1, S2, D>(pred: &ArrayBase<S1, D>, gt: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = u8>,
    S2: Data<Elem = u8>,
    D: Dimension,
{
    let (inter, a, b) = overlap_counts(pred, gt)?;
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Intersection over union; two empty masks score 1.
pub fn iou<S1, S2, D>(pred: &ArrayBase<S1, D>, gt: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = u8>,
    S2: Data<Elem = u8>,
    D: Dimension,
{
    let (inter, a, b) = overlap_counts(pred, gt)?;
    let union = a + b - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Pearson correlation of two equally long samples.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;

    fn block(r: usize, c: usize) -> Array2<u8> {
        let mut m = Array2::zeros((6, 6));
        for i in r..r + 2 {
            for j in c..c + 2 {
                m[[i, j]] = 1;
            }
        }
        m
    }

    #[test]
    fn dsc_reference_cases() {
        let a = block(1, 1);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &block(4, 4)).unwrap(), 0.0);
        assert_eq!(dsc(&a, &block(1, 2)).unwrap(), 0.5);
        let empty = Array2::<u8>::zeros((6, 6));
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert!(dsc(&a, &Array2::<u8>::zeros((5, 6))).is_err());
    }

    #[test]
    fn iou_reference_cases() {
        let a = block(1, 1);
        assert_eq!(iou(&a, &block(1, 2)).unwrap(), 2.0 / 6.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let v = Array3::<u8>::ones((2, 2, 2));
        assert_eq!(iou(&v, &v).unwrap(), 1.0);
    }

    #[test]
    fn pearson_of_affine_pair_is_one() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        assert!((pearson(&x, &y) - 1.0).abs() < 1e-12);
        assert_eq!(pearson(&x, &[1.0; 4]), 0.0);
    }

    proptest! {
        #[test]
        fn dsc_is_symmetric_and_bounded(a in proptest::collection::vec(0u8..2, 36), b in proptest::collection::vec(0u8..2, 36)) {
            let a = Array2::from_shape_vec((6, 6), a).unwrap();
            let b = Array2::from_shape_vec((6, 6), b).unwrap();
            let ab = dsc(&a, &b).unwrap();
            prop_assert_eq!(ab, dsc(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            if a.iter().any(|&v| v == 1) {
                prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
            }
        }
    }
}
