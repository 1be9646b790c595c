//! Depth-accuracy metric and prior-noise injection.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::raster::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub mre: f64,
    pub valid_pixel_count: usize,
}

/// Mean relative error `|est - gt| / gt` over pixels valid in both maps
/// (and, with a cap, with `gt <= cap`).
pub fn mre(estimate: &DepthMap, truth: &DepthMap, cap: Option<f64>) -> Result<MetricReport> {
    if estimate.dims() != truth.dims() {
        return Err(Error::DimensionMismatch { expected: truth.dims(), got: estimate.dims() });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (&e, &g)) in estimate.values().iter().zip(truth.values()).enumerate() {
        if !(estimate.mask()[i] && truth.mask()[i]) || cap.is_some_and(|c| g > c) {
            continue;
        }
        sum += (e - g).abs() / g;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(MetricReport { mre: sum / n as f64, valid_pixel_count: n })
}

/// Multiplies each valid depth by `1 + percent/100 * g`, `g ~ N(0, 1)`,
/// clamping the result to at least `floor`. Samples are drawn in raster
/// order over valid pixels only.
pub fn add_depth_noise(depth: &DepthMap, percent: f64, seed: u64, floor: f64) -> Result<DepthMap> {
    if !(0.0..=100.0).contains(&percent) {
        return Err(Error::Domain(alloc::format!("noise percent must be in [0, 100], got {}", percent)));
    }
    if percent == 0.0 {
        return Ok(depth.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = percent / 100.0;
    Ok(depth.map_valid(|_, _, d| {
        let g: f64 = rng.sample(StandardNormal);
        Some((d * (1.0 + s * g)).max(floor))
    }))
}

/// Frame-to-frame MRE table rows: `(frame, mre, mre - previous)`; the
/// first row's difference is NaN.
pub fn error_accumulation(per_frame: &[(usize, f64)]) -> Result<Vec<(usize, f64, f64)>> {
    if per_frame.len() < 2 {
        return Err(Error::Domain("error accumulation needs at least two evaluated frames".into()));
    }
    Ok(per_frame
        .iter()
        .enumerate()
        .map(|(k, &(f, m))| (f, m, if k == 0 { f64::NAN } else { m - per_frame[k - 1].1 }))
        .collect())
}

/// Mean of the first differences of an accumulation table.
pub fn mean_first_difference(rows: &[(usize, f64, f64)]) -> f64 {
    let diffs: Vec<f64> = rows.iter().skip(1).map(|r| r.2).collect();
    diffs.iter().sum::<f64>() / diffs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn map(values: Vec<f64>) -> DepthMap {
        let n = values.len();
        DepthMap::from_values(n, 1, values).unwrap()
    }

    #[test]
    fn metric_examples() {
        let gt = map(vec![1.0, 4.0]);
        assert_eq!(mre(&gt, &gt, None).unwrap().mre, 0.0);
        let r = mre(&map(vec![2.0, 4.0]), &gt, None).unwrap();
        assert_eq!(r.mre, 0.5);
        assert_eq!(r.valid_pixel_count, 2);
        let gt = map((1..=50).map(|i| i as f64 * 0.37).collect());
        let est = gt.map_valid(|_, _, d| Some(1.1 * d));
        assert!((mre(&est, &gt, None).unwrap().mre - 0.1).abs() < 1e-12);
    }

    #[test]
    fn metric_masks_and_cap() {
        let gt = map(vec![1.0, 100.0, 0.0]);
        let est = map(vec![1.5, 1.0, 3.0]);
        let r = mre(&est, &gt, Some(50.0)).unwrap();
        assert_eq!(r.valid_pixel_count, 1);
        assert_eq!(r.mre, 0.5);
        assert_eq!(mre(&map(vec![0.0, 0.0, 0.0]), &gt, None).unwrap_err(), Error::EmptyEvaluation);
        assert!(matches!(mre(&map(vec![1.0]), &gt, None), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn noise_properties() {
        let clean = DepthMap::from_values(200, 100, (0..20_000).map(|i| 1.0 + (i % 97) as f64).collect()).unwrap();
        assert_eq!(add_depth_noise(&clean, 0.0, 3, 1e-4).unwrap(), clean);
        let a = add_depth_noise(&clean, 5.0, 3, 1e-4).unwrap();
        assert_eq!(a, add_depth_noise(&clean, 5.0, 3, 1e-4).unwrap());
        assert_ne!(a, add_depth_noise(&clean, 5.0, 4, 1e-4).unwrap());
        let r: Vec<f64> = a.values().iter().zip(clean.values()).map(|(n, c)| n / c - 1.0).collect();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let sd = (r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (r.len() - 1) as f64).sqrt();
        assert!((sd - 0.05).abs() < 0.005, "sd {}", sd);
        assert!(add_depth_noise(&clean, 101.0, 0, 1e-4).is_err());
        let huge = add_depth_noise(&clean, 100.0, 1, 1e-4).unwrap();
        assert!(huge.values().iter().all(|&d| d >= 1e-4));
    }

    #[test]
    fn accumulation_table() {
        let rows = error_accumulation(&[(1, 0.1), (2, 0.1), (3, 0.1)]).unwrap();
        assert!(rows[0].2.is_nan());
        assert_eq!(mean_first_difference(&rows), 0.0);
        assert_eq!(error_accumulation(&[(1, 0.1), (2, 0.3)]).unwrap().len(), 2);
        assert!(error_accumulation(&[(1, 0.1)]).is_err());
    }
}
