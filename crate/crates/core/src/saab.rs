//! Saab transform: a constant DC filter followed by PCA of the DC-removed,
//! mean-removed residuals.
//!
//! The fit works from second-moment statistics held in [`Moments`], which can
//! be built in pieces and merged. Covariances use the `1/N` normalization.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Running mean and co-moment (sum of centered outer products) of a stream of
/// vectors. Merging follows the pairwise update of Chan et al., so partial
/// accumulators combine without a second pass over the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    dim: usize,
    count: usize,
    mean: Vec<f64>,
    comoment: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        self.count += 1;
        let n = self.count as f64;
        let d = self.dim;
        let mut delta = [0.0; 64];
        let delta: &mut [f64] = if d <= 64 { &mut delta[..d] } else { &mut vec![0.0; d][..] };
        for j in 0..d {
            delta[j] = x[j] - self.mean[j];
            self.mean[j] += delta[j] / n;
        }
        for i in 0..d {
            let row = &mut self.comoment[i * d..(i + 1) * d];
            let di = delta[i];
            for j in 0..d {
                row[j] += di * (x[j] - self.mean[j]);
            }
        }
    }

    pub fn push_rows(&mut self, m: &Matrix) {
        self.merge(&Moments::from_rows(m));
    }

    /// Two-pass statistics of a block of rows.
    pub fn from_rows(m: &Matrix) -> Self {
        let d = m.cols();
        let mut out = Moments::new(d);
        if m.rows() == 0 {
            return out;
        }
        let n = m.rows() as f64;
        for r in m.iter_rows() {
            for (acc, v) in out.mean.iter_mut().zip(r) {
                *acc += v;
            }
        }
        out.mean.iter_mut().for_each(|v| *v /= n);
        let mut centered = vec![0.0; d];
        for r in m.iter_rows() {
            for j in 0..d {
                centered[j] = r[j] - out.mean[j];
            }
            for i in 0..d {
                let ci = centered[i];
                let row = &mut out.comoment[i * d..(i + 1) * d];
                for j in i..d {
                    row[j] += ci * centered[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                out.comoment[i * d + j] = out.comoment[j * d + i];
            }
        }
        out.count = m.rows();
        out
    }

    pub fn merge(&mut self, other: &Moments) {
        assert_eq!(self.dim, other.dim, "cannot merge moments of different dimension");
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let d = self.dim;
        let delta: Vec<f64> = (0..d).map(|j| other.mean[j] - self.mean[j]).collect();
        let w = na * nb / n;
        for i in 0..d {
            for j in 0..d {
                self.comoment[i * d + j] += other.comoment[i * d + j] + delta[i] * delta[j] * w;
            }
        }
        for j in 0..d {
            self.mean[j] += delta[j] * nb / n;
        }
        self.count += other.count;
    }

    /// Population covariance, `comoment / N`.
    pub fn covariance(&self) -> Matrix {
        let n = self.count.max(1) as f64;
        let data = self.comoment.iter().map(|v| v / n).collect();
        Matrix::from_vec(self.dim, self.dim, data).expect("square")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaabFilterBank {
    input_dim: usize,
    mean: Vec<f64>,
    dc_weight: Vec<f64>,
    /// (d-1) x d, row i is the i-th AC filter.
    ac_weights: Matrix,
    /// d values: DC variance first, then AC eigenvalues in descending order.
    eigenvalues: Vec<f64>,
}

impl SaabFilterBank {
    /// Reassembles a bank from stored parts, checking shapes only.
    pub fn from_parts(mean: Vec<f64>, ac_weights: Matrix, eigenvalues: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d < 2 || ac_weights.rows() != d - 1 || ac_weights.cols() != d || eigenvalues.len() != d {
            return Err(Error::InvalidInput(format!(
                "inconsistent Saab bank shapes: mean {d}, ac {}x{}, eigenvalues {}",
                ac_weights.rows(),
                ac_weights.cols(),
                eigenvalues.len()
            )));
        }
        Ok(Self {
            input_dim: d,
            mean,
            dc_weight: dc_weight(d),
            ac_weights,
            eigenvalues,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn dc_weight(&self) -> &[f64] {
        &self.dc_weight
    }

    pub fn ac_weights(&self) -> &Matrix {
        &self.ac_weights
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// All d filters stacked, DC first.
    pub fn full_weights(&self) -> Matrix {
        let mut w = Matrix::zeros(self.input_dim, self.input_dim);
        w.row_mut(0).copy_from_slice(&self.dc_weight);
        for i in 0..self.input_dim - 1 {
            w.row_mut(i + 1).copy_from_slice(self.ac_weights.row(i));
        }
        w
    }

    /// Stored scalars: input mean plus the d x d filter matrix.
    pub fn parameter_count(&self) -> usize {
        self.input_dim + self.input_dim * self.input_dim
    }

    /// Transforms one sample into `out` as `[DC, AC1, ..., AC(d-1)]`.
    pub fn apply_row(&self, a: &[f64], out: &mut [f64]) {
        let d = self.input_dim;
        let mut buf = [0.0; 64];
        let centered: &mut [f64] = if d <= 64 { &mut buf[..d] } else { &mut vec![0.0; d][..] };
        let mut dc = 0.0;
        for j in 0..d {
            centered[j] = a[j] - self.mean[j];
            dc += centered[j] * self.dc_weight[j];
        }
        for j in 0..d {
            centered[j] -= dc * self.dc_weight[j];
        }
        out[0] = dc;
        for i in 0..d - 1 {
            out[i + 1] = dot(self.ac_weights.row(i), centered);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dc_weight(d: usize) -> Vec<f64> {
    vec![1.0 / (d as f64).sqrt(); d]
}

/// Flips `v` so its entry of largest magnitude is positive; the earliest index
/// wins among equal magnitudes.
pub(crate) fn fix_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    // magnitudes within rounding of the maximum count as tied
    let best = v.iter().position(|x| x.abs() >= max * (1.0 - 1e-12)).unwrap_or(0);
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn fit_saab(samples: &Matrix) -> Result<SaabFilterBank> {
    if samples.cols() < 2 {
        return Err(Error::InvalidInput(format!(
            "Saab input dimension must be >= 2, got {}",
            samples.cols()
        )));
    }
    if samples.rows() < 2 {
        return Err(Error::InsufficientData(format!(
            "Saab fit needs >= 2 samples, got {}",
            samples.rows()
        )));
    }
    if !samples.is_finite() {
        return Err(Error::InvalidInput("Saab input has non-finite entries".into()));
    }
    let mut m = Moments::new(samples.cols());
    m.push_rows(samples);
    fit_from_moments(&m)
}

pub fn fit_from_moments(m: &Moments) -> Result<SaabFilterBank> {
    let d = m.dim();
    if d < 2 {
        return Err(Error::InvalidInput(format!("Saab input dimension must be >= 2, got {d}")));
    }
    if m.count() < 2 {
        return Err(Error::InsufficientData(format!(
            "Saab fit needs >= 2 samples, got {}",
            m.count()
        )));
    }
    let cov = m.covariance();
    if !cov.is_finite() || m.mean().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("Saab statistics are non-finite".into()));
    }
    let w = dc_weight(d);
    let c = DMatrix::from_row_slice(d, d, cov.as_slice());
    let wv = nalgebra::DVector::from_column_slice(&w);
    let cw = &c * &wv;
    let dc_var = wv.dot(&cw).max(0.0);

    // Residual covariance P C P with P = I - w w^T.
    let mut res = c.clone() - &cw * wv.transpose() - &wv * cw.transpose() + (&wv * wv.transpose()) * dc_var;
    res = (&res + res.transpose()) * 0.5;
    // Push the DC direction (a null vector of `res`) strictly below every
    // other eigenvalue so it can be dropped by position.
    let shift = res.trace().abs() + 1.0;
    let shifted = &res - (&wv * wv.transpose()) * shift;
    let eig = SymmetricEigen::new(shifted);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut ac = Matrix::zeros(d - 1, d);
    let mut eigenvalues = Vec::with_capacity(d);
    eigenvalues.push(dc_var);
    for (row, &k) in order.iter().take(d - 1).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let proj = dot(&v, &w);
        v.iter_mut().zip(&w).for_each(|(x, wi)| *x -= proj * wi);
        let norm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        fix_sign(&mut v);
        ac.row_mut(row).copy_from_slice(&v);
        eigenvalues.push(eig.eigenvalues[k].max(0.0));
    }

    Ok(SaabFilterBank {
        input_dim: d,
        mean: m.mean().to_vec(),
        dc_weight: w,
        ac_weights: ac,
        eigenvalues,
    })
}

pub fn apply_saab(bank: &SaabFilterBank, samples: &Matrix) -> Result<Matrix> {
    if samples.cols() != bank.input_dim {
        return Err(Error::InvalidInput(format!(
            "Saab bank expects {} columns, got {}",
            bank.input_dim,
            samples.cols()
        )));
    }
    let mut out = Matrix::zeros(samples.rows(), bank.input_dim);
    for r in 0..samples.rows() {
        bank.apply_row(samples.row(r), out.row_mut(r));
    }
    Ok(out)
}

/// Splits `parent_energy` across the channels in proportion to their
/// eigenvalues.
pub fn channel_energies(bank: &SaabFilterBank, parent_energy: f64) -> Vec<f64> {
    energy_shares(&bank.eigenvalues, parent_energy)
}

pub(crate) fn energy_shares(eigenvalues: &[f64], parent_energy: f64) -> Vec<f64> {
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 || parent_energy == 0.0 {
        return vec![0.0; eigenvalues.len()];
    }
    eigenvalues.iter().map(|l| parent_energy * l / total).collect()
}

/// `(1/N) B^T B` over the rows of a coefficient matrix.
pub fn cross_correlation(coeffs: &Matrix) -> Result<Matrix> {
    let n = coeffs.rows();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "correlation needs >= 2 samples, got {n}"
        )));
    }
    let d = coeffs.cols();
    let mut out = Matrix::zeros(d, d);
    for row in coeffs.iter_rows() {
        for i in 0..d {
            let ri = row[i];
            for j in i..d {
                let v = out.get(i, j) + ri * row[j];
                out.set(i, j, v);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = out.get(i, j) / n as f64;
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // uneven column scales give well separated eigenvalues
        let data = (0..n * d)
            .map(|i| rng.random_range(-1.0..1.0) * (1.0 + (i % d) as f64))
            .collect();
        Matrix::from_vec(n, d, data).unwrap()
    }

    fn four_by_two() -> Matrix {
        Matrix::from_rows(&[[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap()
    }

    #[test]
    fn four_by_two_example() {
        let bank = fit_saab(&four_by_two()).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((bank.dc_weight()[0] - s).abs() < 1e-12);
        let ac = bank.ac_weights().row(0);
        assert!((ac[0] - s).abs() < 1e-12 && (ac[1] + s).abs() < 1e-12);
        // Residuals along (1,-1)/sqrt2 are {sqrt2, -sqrt2, -1/sqrt2, 1/sqrt2};
        // variance (2 + 2 + 0.5 + 0.5) / 4 = 1.25. DC variance is the same.
        assert!((bank.eigenvalues()[1] - 1.25).abs() < 1e-12);
        assert!((bank.eigenvalues()[0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn apply_four_by_two() {
        let bank = fit_saab(&four_by_two()).unwrap();
        let out = apply_saab(&bank, &Matrix::from_rows(&[[2.0, 0.0]]).unwrap()).unwrap();
        assert!((out.get(0, 0) - 2f64.sqrt()).abs() < 1e-12);
        assert!((out.get(0, 1) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mean_input_maps_to_zero() {
        let m = random_matrix(50, 8, 1);
        let bank = fit_saab(&m).unwrap();
        let out = apply_saab(&bank, &Matrix::from_rows(&[bank.mean().to_vec()]).unwrap()).unwrap();
        assert!(out.as_slice().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn identical_rows_give_zero_spectrum() {
        let m = Matrix::from_rows(&vec![[1.0, 2.0, 3.0, 4.0]; 10]).unwrap();
        let bank = fit_saab(&m).unwrap();
        assert!(bank.eigenvalues().iter().all(|&l| l.abs() < 1e-12));
        let w = bank.full_weights();
        for i in 0..4 {
            for j in 0..4 {
                let g = dot(w.row(i), w.row(j));
                assert!((g - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
        assert!(channel_energies(&bank, 1.0).iter().all(|&e| e == 0.0));
    }

    #[test]
    fn weights_are_orthonormal() {
        let bank = fit_saab(&random_matrix(500, 24, 2)).unwrap();
        let w = bank.full_weights();
        for i in 0..24 {
            for j in 0..24 {
                let g = dot(w.row(i), w.row(j));
                assert!((g - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9, "({i},{j}) = {g}");
            }
        }
        for l in bank.eigenvalues()[1..].windows(2) {
            assert!(l[0] >= l[1]);
        }
        assert!(bank.dc_weight().iter().all(|&v| (v - 1.0 / 24f64.sqrt()).abs() < 1e-12));
    }

    #[test]
    fn channel_variances_equal_eigenvalues() {
        let m = random_matrix(400, 8, 3);
        let bank = fit_saab(&m).unwrap();
        let b = apply_saab(&bank, &m).unwrap();
        for c in 0..8 {
            let col = b.column(c);
            let mu = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / col.len() as f64;
            assert!((var - bank.eigenvalues()[c]).abs() < 1e-8, "channel {c}");
        }
    }

    #[test]
    fn energies_follow_eigenvalue_shares() {
        assert_eq!(energy_shares(&[3.0, 1.0], 1.0), vec![0.75, 0.25]);
        assert_eq!(energy_shares(&[3.0, 1.0], 0.0), vec![0.0, 0.0]);
        assert_eq!(energy_shares(&[1.25, 0.0], 0.5), vec![0.5, 0.0]);
        let bank = fit_saab(&random_matrix(100, 8, 4)).unwrap();
        let e = channel_energies(&bank, 0.37);
        assert!((e.iter().sum::<f64>() - 0.37).abs() < 1e-12);
    }

    #[test]
    fn ac_channels_decorrelate_on_training_data() {
        let m = random_matrix(300, 8, 5);
        let bank = fit_saab(&m).unwrap();
        let corr = cross_correlation(&apply_saab(&bank, &m).unwrap()).unwrap();
        let max_diag = (0..8).map(|i| corr.get(i, i)).fold(0.0, f64::max);
        for i in 1..8 {
            for j in 1..8 {
                if i != j {
                    assert!(corr.get(i, j).abs() <= 1e-8 * max_diag);
                }
            }
        }
    }

    #[test]
    fn single_channel_correlation_is_rank_one() {
        let rows: Vec<[f64; 3]> = (0..5).map(|i| [0.0, i as f64, 0.0]).collect();
        let c = cross_correlation(&Matrix::from_rows(&rows).unwrap()).unwrap();
        assert!((c.get(1, 1) - 6.0).abs() < 1e-12);
        let nonzero = c.as_slice().iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn merged_moments_match_single_pass() {
        let m = random_matrix(200, 8, 6);
        let mut whole = Moments::new(8);
        whole.push_rows(&m);
        let mut a = Moments::new(8);
        let mut b = Moments::new(8);
        for (i, r) in m.iter_rows().enumerate() {
            if i < 77 { a.push(r) } else { b.push(r) }
        }
        a.merge(&b);
        let (ca, cw) = (a.covariance(), whole.covariance());
        for (x, y) in ca.as_slice().iter().zip(cw.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn error_paths() {
        let one = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(fit_saab(&one), Err(Error::InsufficientData(_))));
        let nan = Matrix::from_rows(&[[1.0, f64::NAN], [0.0, 0.0]]).unwrap();
        assert!(matches!(fit_saab(&nan), Err(Error::InvalidInput(_))));
        let bank = fit_saab(&four_by_two()).unwrap();
        let wrong = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(apply_saab(&bank, &wrong), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn sign_convention() {
        let mut v = vec![0.1, -0.9, 0.3];
        fix_sign(&mut v);
        assert_eq!(v, vec![-0.1, 0.9, -0.3]);
        let mut tie = vec![-0.5, 0.5];
        fix_sign(&mut tie);
        assert_eq!(tie, vec![0.5, -0.5]);
    }
}
