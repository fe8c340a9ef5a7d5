use rayon::prelude::*;

use crate::error::{Result, RfaError};
use crate::numcore::{Rng, Tensor};

pub const MIC_MIN_SAMPLES: usize = 25;

/// Equal-frequency bin index per sample; tied values always share a bin.
fn equal_frequency_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let bin = (i * bins / n).min(bins - 1);
        for &k in &idx[i..=j] {
            out[k] = bin;
        }
        i = j + 1;
    }
    out
}

fn mutual_information_bits(bx: &[usize], by: &[usize], a: usize, b: usize) -> f64 {
    let n = bx.len() as f64;
    let mut joint = vec![0usize; a * b];
    let mut px = vec![0usize; a];
    let mut py = vec![0usize; b];
    for (&i, &j) in bx.iter().zip(by) {
        joint[i * b + j] += 1;
        px[i] += 1;
        py[j] += 1;
    }
    let mut mi = 0.0;
    for i in 0..a {
        for j in 0..b {
            let c = joint[i * b + j];
            if c > 0 {
                let pxy = c as f64 / n;
                mi += pxy * (pxy / (px[i] as f64 / n * py[j] as f64 / n)).log2();
            }
        }
    }
    mi
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

/// Maximal information coefficient over equal-frequency grids with `a * b <= n^0.6`.
pub fn mic(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len();
    if n != ys.len() {
        return Err(RfaError::shape("mic", format!("{n} vs {} samples", ys.len())));
    }
    if n < MIC_MIN_SAMPLES {
        return Err(RfaError::InvalidArgument(format!(
            "mic needs at least {MIC_MIN_SAMPLES} samples, got {n}"
        )));
    }
    if is_constant(xs) || is_constant(ys) {
        return Ok(0.0);
    }
    let budget = (n as f64).powf(0.6).floor() as usize;
    let mut best: f64 = 0.0;
    for a in 2..=budget / 2 {
        let bx = equal_frequency_bins(xs, a);
        for b in 2..=budget / a {
            let by = equal_frequency_bins(ys, b);
            let score = mutual_information_bits(&bx, &by, a, b) / (a.min(b) as f64).log2();
            best = best.max(score);
        }
    }
    Ok(best.clamp(0.0, 1.0))
}

/// Mean [`mic`] over matched columns `i -> (zr[:, i], zn[:, i])`, using at most
/// `max_pairs` columns drawn without replacement from `seed`.
pub fn mic_features(zr: &Tensor, zn: &Tensor, max_pairs: usize, seed: u64) -> Result<f64> {
    if zr.rows() != zn.rows() || zr.row_len() != zn.row_len() {
        return Err(RfaError::shape(
            "mic_features",
            format!("{:?} vs {:?}", zr.shape(), zn.shape()),
        ));
    }
    let dim = zr.row_len();
    let mut dims = Rng::new(seed).split("mic-dims").permutation(dim);
    dims.truncate(max_pairs.max(1).min(dim));
    dims.sort_unstable();
    let column = |t: &Tensor, j: usize| (0..t.rows()).map(|i| t.row(i)[j]).collect::<Vec<f64>>();
    let scores = dims
        .par_iter()
        .map(|&j| mic(&column(zr, j), &column(zn, j)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_share_bins() {
        let b = equal_frequency_bins(&[1.0, 1.0, 1.0, 2.0], 2);
        assert_eq!(b, vec![0, 0, 0, 1]);
    }

    #[test]
    fn identical_streams_score_one() {
        let xs: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        assert!(mic(&xs, &xs).unwrap() >= 0.99);
    }

    #[test]
    fn constant_stream_scores_zero() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert_eq!(mic(&xs, &[1.0; 50]).unwrap(), 0.0);
    }

    #[test]
    fn input_checks() {
        assert!(mic(&[0.0; 10], &[0.0; 10]).is_err());
        assert!(mic(&[0.0; 30], &[0.0; 31]).is_err());
    }
}
