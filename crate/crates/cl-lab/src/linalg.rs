//! Singular values and effective rank of small dense matrices.
//!
//! Singular values are obtained from a cyclic Jacobi eigensolve of the
//! smaller Gram matrix, which covers every desk-scale shape in this
//! project (min dimension well under 512).

use crate::error::{Error, Result};
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

/// Nonnegative singular values in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularSpectrum {
    pub values: Vec<f64>,
}

/// Convergence target: off-diagonal Frobenius norm below
/// 1e-12 x the matrix Frobenius norm.
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Relative cutoff under which a Gram eigenvalue counts as zero.
const GRAM_NOISE_TOL: f64 = 1e-12;

/// Eigenvalues of a symmetric n x n matrix (row-major, destroyed in place),
/// unsorted.
fn symmetric_eigenvalues(a: &mut [f64], n: usize) -> Vec<f64> {
    let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || n == 1 {
        return (0..n).map(|i| a[i * n + i]).collect();
    }
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() < JACOBI_TOL * norm {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Singular values of an r x c matrix, descending.
pub fn singular_values(m: &Tensor) -> Result<SingularSpectrum> {
    if m.rank() != 2 {
        return Err(Error::Dimension(format!(
            "singular_values expects a matrix, got {:?}",
            m.shape
        )));
    }
    m.check_finite("singular_values input")?;
    let (r, c) = (m.shape[0], m.shape[1]);
    let k = r.min(c);
    if k == 0 {
        return Ok(SingularSpectrum { values: vec![] });
    }
    // Gram matrix on the smaller side.
    let mut gram = vec![0.0; k * k];
    if r <= c {
        gemm_nt(r, c, r, &m.data, &m.data, &mut gram); // M M^T
    } else {
        gemm_tn(c, r, c, &m.data, &m.data, &mut gram); // M^T M
    }
    let mut eig = symmetric_eigenvalues(&mut gram, k);
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    // Gram eigenvalues below the eigensolve's noise floor are numerical
    // zeros; the square root would otherwise inflate them into spurious
    // small singular values that bias the entropy of near-low-rank
    // spectra.
    let floor = eig.first().copied().unwrap_or(0.0).max(0.0) * GRAM_NOISE_TOL;
    let values = eig
        .into_iter()
        .map(|v| if v <= floor { 0.0 } else { v.sqrt() })
        .collect();
    Ok(SingularSpectrum { values })
}

/// exp of the Shannon entropy (natural log) of the normalized singular
/// value distribution. An all-zero spectrum has no effective dimensions
/// and maps to 0.
pub fn effective_rank(s: &SingularSpectrum) -> Result<f64> {
    if s.values.is_empty() {
        return Err(Error::Input("effective_rank of an empty spectrum".into()));
    }
    let total: f64 = s.values.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let mut entropy = 0.0;
    for &v in &s.values {
        let p = v / total;
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    Ok(entropy.exp())
}

/// out[t] = in[t] / max_{u <= t} in[u]; the fraction of the best
/// historical value still retained.
pub fn peak_normalize(points: &[f64]) -> Result<Vec<f64>> {
    match points.first() {
        None => Ok(vec![]),
        Some(&first) if first <= 0.0 => Err(Error::Input(
            "peak_normalize: first value must be positive".into(),
        )),
        Some(&first) => {
            let mut peak = first;
            Ok(points
                .iter()
                .map(|&v| {
                    peak = peak.max(v);
                    v / peak
                })
                .collect())
        }
    }
}

/// [O, C, kH, kW] kernel flattened to an O x (C*kH*kW) matrix; row o is
/// output channel o, channel-major then row-major.
pub fn matricize_conv_kernel(k: &Tensor) -> Result<Tensor> {
    if k.rank() != 4 {
        return Err(Error::Dimension(format!(
            "matricize_conv_kernel expects 4-D, got {:?}",
            k.shape
        )));
    }
    let o = k.shape[0];
    let rest = k.shape[1] * k.shape[2] * k.shape[3];
    // Row-major layout already matches: data is contiguous per output channel.
    Ok(Tensor {
        shape: vec![o, rest],
        data: k.data.clone(),
    })
}

/// Arithmetic mean of per-layer effective ranks over a layer group.
pub fn group_erank(layers: &[Tensor]) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::Input("group_erank of an empty group".into()));
    }
    let mut sum = 0.0;
    for m in layers {
        sum += effective_rank(&singular_values(m)?)?;
    }
    Ok(sum / layers.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn identity_singular_values_are_ones() {
        let s = singular_values(&eye(5)).unwrap();
        assert_eq!(s.values.len(), 5);
        for v in &s.values {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_matrix_spectrum() {
        let m = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]);
        let s = singular_values(&m).unwrap();
        assert!((s.values[0] - 3.0).abs() < 1e-12);
        assert!((s.values[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let m = Tensor::from_rows(&[vec![1.0, f64::NAN]]);
        assert!(singular_values(&m).is_err());
    }

    #[test]
    fn erank_uniform_and_rank_one() {
        let s = SingularSpectrum {
            values: vec![2.5; 7],
        };
        assert!((effective_rank(&s).unwrap() - 7.0).abs() < 1e-12);

        let r1 = SingularSpectrum {
            values: vec![4.0, 0.0, 0.0],
        };
        assert!((effective_rank(&r1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn erank_two_one_one() {
        // (2, 1, 1) -> 2*sqrt(2)
        let s = SingularSpectrum {
            values: vec![2.0, 1.0, 1.0],
        };
        let e = effective_rank(&s).unwrap();
        assert!((e - 2.0 * 2f64.sqrt()).abs() < 1e-12, "{e}");
    }

    #[test]
    fn erank_zero_spectrum_and_empty() {
        let z = SingularSpectrum {
            values: vec![0.0, 0.0],
        };
        assert_eq!(effective_rank(&z).unwrap(), 0.0);
        let e = SingularSpectrum { values: vec![] };
        assert!(effective_rank(&e).is_err());
    }

    #[test]
    fn peak_normalize_cases() {
        assert_eq!(
            peak_normalize(&[10.0, 8.0, 12.0, 6.0]).unwrap(),
            vec![1.0, 0.8, 1.0, 0.5]
        );
        assert_eq!(peak_normalize(&[3.0]).unwrap(), vec![1.0]);
        assert_eq!(
            peak_normalize(&[1.0, 2.0, 3.0]).unwrap(),
            vec![1.0, 1.0, 1.0]
        );
        assert!(peak_normalize(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn matricize_cases() {
        let k = Tensor::new(vec![2, 1, 1, 1], vec![5.0, -3.0]).unwrap();
        let m = matricize_conv_kernel(&k).unwrap();
        assert_eq!(m.shape, vec![2, 1]);
        assert_eq!(m.data, vec![5.0, -3.0]);

        let k2 = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m2 = matricize_conv_kernel(&k2).unwrap();
        assert_eq!(m2.shape, vec![1, 4]);
        assert_eq!(m2.data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matricize_matches_index_arithmetic_oracle() {
        let mut rng = crate::nn::seeded_rng(11, "matricize");
        let (o, c, kh, kw) = (8, 3, 3, 3);
        let data: Vec<f64> = (0..o * c * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = Tensor::new(vec![o, c, kh, kw], data.clone()).unwrap();
        let m = matricize_conv_kernel(&k).unwrap();
        // independent reshape by explicit index arithmetic
        let mut oracle = Tensor::zeros(&[o, c * kh * kw]);
        for oi in 0..o {
            for ci in 0..c {
                for i in 0..kh {
                    for j in 0..kw {
                        let src = ((oi * c + ci) * kh + i) * kw + j;
                        let dst = oi * (c * kh * kw) + (ci * kh + i) * kw + j;
                        oracle.data[dst] = data[src];
                    }
                }
            }
        }
        let e1 = effective_rank(&singular_values(&m).unwrap()).unwrap();
        let e2 = effective_rank(&singular_values(&oracle).unwrap()).unwrap();
        assert_eq!(m.data, oracle.data);
        assert!((e1 - e2).abs() < 1e-12);
    }

    #[test]
    fn group_erank_cases() {
        let g = group_erank(&[eye(4), eye(6)]).unwrap();
        assert!((g - 5.0).abs() < 1e-10);
        let m = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]);
        let single = group_erank(std::slice::from_ref(&m)).unwrap();
        let triple = group_erank(&[m.clone(), m.clone(), m]).unwrap();
        assert!((single - triple).abs() < 1e-12);
        assert!(group_erank(&[]).is_err());
    }

    #[test]
    fn frobenius_identity_on_random_matrices() {
        let mut rng = crate::nn::seeded_rng(3, "svd-frob");
        for _ in 0..20 {
            let r = rng.gen_range(1..=12);
            let c = rng.gen_range(1..=12);
            let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let m = Tensor::new(vec![r, c], data).unwrap();
            let frob2: f64 = m.data.iter().map(|v| v * v).sum();
            let s = singular_values(&m).unwrap();
            let sum2: f64 = s.values.iter().map(|v| v * v).sum();
            assert!((frob2 - sum2).abs() <= 1e-8 * frob2.max(1.0));
        }
    }
}
