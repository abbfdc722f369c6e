//! Forward kernels.
//!
//! Every kernel is a pure function of its inputs. The tape calls the same
//! functions when recording and when replaying, which is what makes replay
//! bit-exact. Row-wise kernels (`logsumexp`, `softmax`, `log_softmax`,
//! `kl_div`) operate along the last axis.

use super::{AutodiffError, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), AutodiffError> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), AutodiffError> {
    if t.ndim() != 2 {
        return Err(AutodiffError::NotMatrix {
            op,
            shape: t.shape().to_vec(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Shape left after reducing the last axis.
pub(crate) fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    match shape.len() {
        0 => Vec::new(),
        n => shape[..n - 1].to_vec(),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::with_shape(vec![m, n], out))
}

/// `a · bᵀ` without materializing the transpose.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` without materializing the transpose.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn zip_with(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, AutodiffError> {
    same_shape(op, a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Ok(Tensor::with_shape(a.shape().to_vec(), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

/// Adds a length-`n` bias vector to every row of an `[m, n]` matrix.
pub fn add_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor, AutodiffError> {
    let (_, n) = require_matrix("add_bias", a)?;
    if bias.ndim() != 1 || bias.numel() != n {
        return Err(AutodiffError::ShapeMismatch {
            op: "add_bias",
            lhs: a.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let b = bias.data();
    let data = a
        .data()
        .chunks(n)
        .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
        .collect();
    Ok(Tensor::with_shape(a.shape().to_vec(), data))
}

/// `max(0, x)`; the subgradient at exactly zero is taken as zero.
pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn exp(a: &Tensor) -> Tensor {
    a.map(f64::exp)
}

/// `D[i, k] = ||z_i - c_k||²` for `z: [m, F]`, `c: [K, F]`.
pub fn pairwise_sqdist(z: &Tensor, c: &Tensor) -> Result<Tensor, AutodiffError> {
    if z.ndim() == 0 || c.ndim() == 0 || z.cols() != c.cols() {
        return Err(AutodiffError::ShapeMismatch {
            op: "pairwise_sqdist",
            lhs: z.shape().to_vec(),
            rhs: c.shape().to_vec(),
        });
    }
    let (m, k) = (z.rows(), c.rows());
    let mut out = Vec::with_capacity(m * k);
    for i in 0..m {
        let zi = z.row(i);
        for j in 0..k {
            let d: f64 = zi
                .iter()
                .zip(c.row(j))
                .map(|(a, b)| {
                    let t = a - b;
                    t * t
                })
                .sum();
            out.push(d);
        }
    }
    Ok(Tensor::with_shape(vec![m, k], out))
}

fn row_lse(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

fn non_empty_rows(op: &'static str, a: &Tensor) -> Result<(), AutodiffError> {
    if a.numel() == 0 || a.cols() == 0 {
        return Err(AutodiffError::Empty(op));
    }
    Ok(())
}

/// Max-shifted `log Σ exp(v)` along the last axis.
pub fn logsumexp(a: &Tensor) -> Result<Tensor, AutodiffError> {
    non_empty_rows("logsumexp", a)?;
    let data = (0..a.rows()).map(|i| row_lse(a.row(i))).collect();
    Ok(Tensor::with_shape(reduced_shape(a.shape()), data))
}

/// `exp((v_i - max) / T) / Σ_j exp((v_j - max) / T)` along the last axis.
pub fn softmax(a: &Tensor, temperature: f64) -> Result<Tensor, AutodiffError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(AutodiffError::Temperature(temperature));
    }
    non_empty_rows("softmax", a)?;
    let mut data = Vec::with_capacity(a.numel());
    for i in 0..a.rows() {
        let row = a.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        data.extend(row.iter().map(|&v| ((v - max) / temperature).exp()));
        let total: f64 = data[start..].iter().sum();
        for v in &mut data[start..] {
            *v /= total;
        }
    }
    Ok(Tensor::with_shape(a.shape().to_vec(), data))
}

pub fn log_softmax(a: &Tensor) -> Result<Tensor, AutodiffError> {
    non_empty_rows("log_softmax", a)?;
    let mut data = Vec::with_capacity(a.numel());
    for i in 0..a.rows() {
        let row = a.row(i);
        let lse = row_lse(row);
        data.extend(row.iter().map(|&v| v - lse));
    }
    Ok(Tensor::with_shape(a.shape().to_vec(), data))
}

const DISTRIBUTION_TOL: f64 = 1e-9;

fn check_distribution(t: &Tensor) -> Result<(), AutodiffError> {
    for i in 0..t.rows() {
        let row = t.row(i);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(AutodiffError::InvalidDistribution { row: i, sum });
        }
    }
    Ok(())
}

/// `Σ p log(p / q)` along the last axis, in nats, with `0 · log 0 = 0`.
pub fn kl_div(p: &Tensor, q: &Tensor) -> Result<Tensor, AutodiffError> {
    same_shape("kl_div", p, q)?;
    non_empty_rows("kl_div", p)?;
    check_distribution(p)?;
    check_distribution(q)?;
    let mut data = Vec::with_capacity(p.rows());
    for i in 0..p.rows() {
        let mut acc = 0.0;
        for (j, (&pi, &qi)) in p.row(i).iter().zip(q.row(i)).enumerate() {
            if pi == 0.0 {
                continue;
            }
            if qi == 0.0 {
                return Err(AutodiffError::UndefinedKl {
                    index: i * p.cols() + j,
                });
            }
            acc += pi * (pi / qi).ln();
        }
        data.push(acc);
    }
    Ok(Tensor::with_shape(reduced_shape(p.shape()), data))
}

/// Mean of the rows of `z` grouped by `labels` (values in `0..k`).
pub fn group_mean(z: &Tensor, labels: &[usize], k: usize) -> Result<Tensor, AutodiffError> {
    let (m, f) = require_matrix("group_mean", z)?;
    if labels.len() != m {
        return Err(AutodiffError::ShapeMismatch {
            op: "group_mean",
            lhs: z.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let counts = group_counts(labels, k)?;
    let mut out = vec![0.0; k * f];
    for (i, &y) in labels.iter().enumerate() {
        for (o, &v) in out[y * f..(y + 1) * f].iter_mut().zip(z.row(i)) {
            *o += v;
        }
    }
    for (y, &n) in counts.iter().enumerate() {
        for o in &mut out[y * f..(y + 1) * f] {
            *o /= n as f64;
        }
    }
    Ok(Tensor::with_shape(vec![k, f], out))
}

pub(crate) fn group_counts(labels: &[usize], k: usize) -> Result<Vec<usize>, AutodiffError> {
    let mut counts = vec![0usize; k];
    for &y in labels {
        if y >= k {
            return Err(AutodiffError::Label {
                label: y,
                classes: k,
            });
        }
        counts[y] += 1;
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(AutodiffError::EmptyGroup(empty));
    }
    Ok(counts)
}

/// Picks `a[i, index[i]]` from every row.
pub fn gather(a: &Tensor, index: &[usize]) -> Result<Tensor, AutodiffError> {
    let (m, n) = require_matrix("gather", a)?;
    if index.len() != m {
        return Err(AutodiffError::ShapeMismatch {
            op: "gather",
            lhs: a.shape().to_vec(),
            rhs: vec![index.len()],
        });
    }
    let mut data = Vec::with_capacity(m);
    for (i, &j) in index.iter().enumerate() {
        if j >= n {
            return Err(AutodiffError::Label {
                label: j,
                classes: n,
            });
        }
        data.push(a.at(i, j));
    }
    Ok(Tensor::with_shape(vec![m], data))
}

/// Rows `index` of a matrix.
pub fn select_rows(a: &Tensor, index: &[usize]) -> Result<Tensor, AutodiffError> {
    let (m, _) = require_matrix("select_rows", a)?;
    if let Some(&bad) = index.iter().find(|&&i| i >= m) {
        return Err(AutodiffError::Label {
            label: bad,
            classes: m,
        });
    }
    Ok(a.select_rows(index))
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}

pub fn mean(a: &Tensor) -> Result<Tensor, AutodiffError> {
    if a.numel() == 0 {
        return Err(AutodiffError::Empty("mean"));
    }
    Ok(Tensor::scalar(
        a.data().iter().sum::<f64>() / a.numel() as f64,
    ))
}

/// Index of the smallest entry in each row; ties go to the lowest index.
pub fn argmin_rows(a: &Tensor) -> Vec<usize> {
    (0..a.rows())
        .map(|i| {
            let row = a.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(a: &Tensor) -> Vec<usize> {
    (0..a.rows())
        .map(|i| {
            let row = a.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
        Tensor::matrix(
            m,
            n,
            (0..m * n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_identity_and_selection() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let sel = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![2.0], vec![5.0]]).unwrap();
        assert_eq!(matmul(&sel, &col).unwrap().data(), &[2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_matrix(&mut rng, 3, 4);
        let b = rand_matrix(&mut rng, 4, 2);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.at(i, p) * b.at(p, j);
                }
                assert!((c.at(i, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(
            matmul(&a, &b),
            Err(AutodiffError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_matrix(&mut rng, 3, 5);
        let b = rand_matrix(&mut rng, 4, 5);
        let nt = matmul_nt(a.data(), b.data(), 3, 4, 5);
        for i in 0..3 {
            for j in 0..4 {
                let s: f64 = (0..5).map(|p| a.at(i, p) * b.at(j, p)).sum();
                assert!((nt[i * 4 + j] - s).abs() < 1e-12);
            }
        }
        let c = rand_matrix(&mut rng, 3, 2);
        let tn = matmul_tn(a.data(), c.data(), 3, 5, 2);
        for p in 0..5 {
            for j in 0..2 {
                let s: f64 = (0..3).map(|i| a.at(i, p) * c.at(i, j)).sum();
                assert!((tn[p * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_basics() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        assert_eq!(add(&a, &Tensor::vector(vec![0.0, 0.0])).unwrap(), a);
        assert_eq!(
            scale(&Tensor::vector(vec![1.0, -2.0]), 2.0).data(),
            &[2.0, -4.0]
        );
        assert!(add(&a, &Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn mul_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(1..20);
            let a = rand_matrix(&mut rng, 1, n);
            let b = rand_matrix(&mut rng, 1, n);
            let c = mul(&a, &b).unwrap();
            for j in 0..n {
                assert!((c.at(0, j) - a.at(0, j) * b.at(0, j)).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn relu_cases() {
        assert_eq!(
            relu(&Tensor::vector(vec![-1.0, 0.0, 2.0])).data(),
            &[0.0, 0.0, 2.0]
        );
        assert!(relu(&Tensor::vector(vec![-1.0, -5.0]))
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn pairwise_sqdist_cases() {
        let z = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(pairwise_sqdist(&z, &z).unwrap().data(), &[0.0]);
        let c = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(pairwise_sqdist(&z, &c).unwrap().data(), &[1.0, 4.0]);
        assert!(pairwise_sqdist(&z, &Tensor::zeros(vec![1, 3])).is_err());
    }

    #[test]
    fn pairwise_sqdist_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_matrix(&mut rng, 5, 3);
        let b = rand_matrix(&mut rng, 4, 3);
        let ab = pairwise_sqdist(&a, &b).unwrap();
        let ba = pairwise_sqdist(&b, &a).unwrap();
        for i in 0..5 {
            for k in 0..4 {
                assert_eq!(ab.at(i, k), ba.at(k, i));
            }
        }
    }

    #[test]
    fn logsumexp_cases() {
        let v = logsumexp(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert!((v.item() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(v.shape(), &[] as &[usize]);
        assert_eq!(
            logsumexp(&Tensor::vector(vec![-7.25])).unwrap().item(),
            -7.25
        );
        let big = logsumexp(&Tensor::vector(vec![1000.0, 1000.0]))
            .unwrap()
            .item();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(matches!(
            logsumexp(&Tensor::vector(vec![])),
            Err(AutodiffError::Empty(_))
        ));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::vector(vec![3.0, 3.0]), 0.7).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::vector(vec![-1.0, -4.0]), 1.0).unwrap();
        assert!((s.data()[0] - 0.952_574_126_822_433_4).abs() < 1e-12);
        assert!((s.data()[1] - 0.047_425_873_177_566_78).abs() < 1e-12);
        let flat = softmax(&Tensor::vector(vec![0.0, 10.0]), 1e6).unwrap();
        assert!((flat.data()[0] - 0.5).abs() < 1e-5);
        assert!(matches!(
            softmax(&Tensor::vector(vec![1.0]), 0.0),
            Err(AutodiffError::Temperature(_))
        ));
        assert!(softmax(&Tensor::vector(vec![1.0]), -2.0).is_err());
    }

    #[test]
    fn kl_cases() {
        let p = Tensor::vector(vec![0.3, 0.7]);
        assert_eq!(kl_div(&p, &p).unwrap().item(), 0.0);
        let p = Tensor::vector(vec![0.5, 0.5]);
        let q = Tensor::vector(vec![0.25, 0.75]);
        assert!((kl_div(&p, &q).unwrap().item() - 0.143_841_036_225_890_2).abs() < 1e-12);
        let q0 = Tensor::vector(vec![1.0, 0.0]);
        assert!(matches!(
            kl_div(&p, &q0),
            Err(AutodiffError::UndefinedKl { index: 1 })
        ));
        // p_i = 0 contributes nothing even where q_i = 0.
        assert_eq!(kl_div(&q0, &q0).unwrap().item(), 0.0);
        assert!(kl_div(&Tensor::vector(vec![0.6, 0.6]), &p).is_err());
    }

    #[test]
    fn group_mean_cases() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0], vec![5.0, 5.0]]).unwrap();
        let c = group_mean(&z, &[0, 0, 1], 2).unwrap();
        assert_eq!(c.row(0), &[2.0, 0.0]);
        assert_eq!(c.row(1), &[5.0, 5.0]);
        assert!(matches!(
            group_mean(&z, &[0, 0, 0], 2),
            Err(AutodiffError::EmptyGroup(1))
        ));
        assert!(group_mean(&z, &[0, 1, 2], 2).is_err());
    }

    #[test]
    fn argmin_ties_lowest() {
        let d = Tensor::from_rows(&[vec![1.0, 1.0, 0.5], vec![2.0, 2.0, 2.0]]).unwrap();
        assert_eq!(argmin_rows(&d), vec![2, 0]);
        assert_eq!(argmax_rows(&d), vec![0, 0]);
    }
}
