use crate::data::Image;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const POWER_ITERS: usize = 100;
pub const POWER_TOL: f64 = 1e-6;

/// Leading principal directions of per-pixel feature vectors.
#[derive(Clone, Debug)]
pub struct Pca {
    /// Unit vectors in feature space; zero vectors pad a deficient rank.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component, non-increasing.
    pub variances: Vec<f64>,
    /// `components.len() × pixels` projections of the centred features.
    pub projections: Vec<Vec<f64>>,
}

fn start_vector(c: usize) -> Vec<f64> {
    // fixed low-discrepancy start, not aligned with any axis
    let v: Vec<f64> = (0..c).map(|i| ((i as f64 + 1.0) * 0.754_877_666_246_692_7).fract() + 0.5).collect();
    normalize(v).0
}

fn normalize(v: Vec<f64>) -> (Vec<f64>, f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        (v, 0.0)
    } else {
        (v.into_iter().map(|x| x / n).collect(), n)
    }
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let c = v.len();
    (0..c).map(|i| (0..c).map(|j| m[i * c + j] * v[j]).sum()).collect()
}

/// Top `k` components of the `[C×h×w]` field by power iteration with
/// deflation. Each component's sign makes its largest-magnitude entry
/// positive.
pub fn pca(features: &Tensor, k: usize) -> Result<Pca> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::shape("pca", format!("expected CxHxW features, got {s:?}")));
    }
    let (c, n) = (s[0], s[1] * s[2]);
    if n < 3 {
        return Err(Error::data(format!("PCA needs at least 3 pixels, got {n}")));
    }
    let d = features.data();
    let means: Vec<f64> = (0..c).map(|ch| d[ch * n..(ch + 1) * n].iter().map(|&v| v as f64).sum::<f64>() / n as f64).collect();
    let centred: Vec<Vec<f64>> = (0..c).map(|ch| d[ch * n..(ch + 1) * n].iter().map(|&v| v as f64 - means[ch]).collect()).collect();
    let mut cov = vec![0f64; c * c];
    for i in 0..c {
        for j in i..c {
            let v = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            cov[i * c + j] = v;
            cov[j * c + i] = v;
        }
    }
    let trace: f64 = (0..c).map(|i| cov[i * c + i]).sum();
    let floor = 1e-12 * trace.max(f64::MIN_POSITIVE);
    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v = start_vector(c);
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERS {
            let (next, norm) = normalize(mat_vec(&cov, &v));
            lambda = norm;
            if norm == 0.0 {
                break;
            }
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if delta < POWER_TOL {
                break;
            }
        }
        if lambda <= floor || trace <= 0.0 {
            components.push(vec![0.0; c]);
            variances.push(0.0);
            continue;
        }
        let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let rayleigh: f64 = v.iter().zip(mat_vec(&cov, &v)).map(|(a, b)| a * b).sum();
        for i in 0..c {
            for j in 0..c {
                cov[i * c + j] -= rayleigh * v[i] * v[j];
            }
        }
        components.push(v);
        variances.push(rayleigh.max(0.0));
    }
    let projections = components
        .iter()
        .map(|v| (0..n).map(|p| (0..c).map(|ch| v[ch] * centred[ch][p]).sum()).collect())
        .collect();
    Ok(Pca { components, variances, projections })
}

/// RGB rendering of the top three components, each min-max scaled to
/// `[0, 255]`; a channel with no spread is written as 0.
pub fn pca_feature_image(features: &Tensor) -> Result<Image> {
    let s = features.shape();
    let p = pca(features, 3)?;
    let (h, w) = (s[1], s[2]);
    let mut data = Vec::with_capacity(3 * h * w);
    for proj in &p.projections {
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        for &v in proj {
            let scaled = if range > 1e-12 { ((v - lo) / range * 255.0).round() } else { 0.0 };
            data.push(scaled.clamp(0.0, 255.0) as u8);
        }
    }
    Image::new(h, w, data)
}
