//! Gaussian mixtures with diagonal components, optionally carrying a class
//! distribution per component.

use ndarray::{Array2, ArrayView2};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::DiagGaussian;
use crate::simplex::{argmax, check_simplex, log_sum_exp};

/// Weighted list of axis-aligned Gaussian components.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    weights: Vec<f64>,
    components: Vec<DiagGaussian>,
}

impl Gmm {
    pub fn new(weights: Vec<f64>, components: Vec<DiagGaussian>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Empty("mixture components"));
        }
        if weights.len() != components.len() {
            return Err(Error::DimensionMismatch { expected: components.len(), got: weights.len() });
        }
        check_simplex(&weights, "mixture weights")?;
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: c.dim() });
        }
        Ok(Self { weights, components })
    }

    pub fn single(component: DiagGaussian) -> Self {
        Self { weights: vec![1.0], components: vec![component] }
    }

    pub(crate) fn from_parts(weights: Vec<f64>, components: Vec<DiagGaussian>) -> Self {
        debug_assert_eq!(weights.len(), components.len());
        Self { weights, components }
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[DiagGaussian] {
        &self.components
    }

    pub(crate) fn components_mut(&mut self) -> &mut [DiagGaussian] {
        &mut self.components
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<DiagGaussian>) {
        (self.weights, self.components)
    }

    /// Fills `out[k]` with `log pi_k + log N(x; mu_k, sigma_k)`.
    pub fn weighted_log_densities(&self, x: &[f64], out: &mut [f64]) {
        for ((o, &w), c) in out.iter_mut().zip(&self.weights).zip(&self.components) {
            *o = w.ln() + c.log_density(x);
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.k()];
        self.weighted_log_densities(x, &mut buf);
        log_sum_exp(&buf)
    }

    /// Posterior component probabilities at `x`, computed in the log domain.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let mut buf = vec![0.0; self.k()];
        self.weighted_log_densities(x, &mut buf);
        let lse = log_sum_exp(&buf);
        buf.iter_mut().for_each(|v| *v = (*v - lse).exp());
        buf
    }

    /// Average log-likelihood of the rows of `x`.
    pub fn log_likelihood(&self, x: ArrayView2<f64>) -> Result<f64> {
        if x.nrows() == 0 {
            return Err(Error::Empty("data matrix"));
        }
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.ncols() });
        }
        let mut buf = vec![0.0; self.k()];
        let mut total = 0.0;
        for row in x.rows() {
            let row = row.to_vec();
            self.weighted_log_densities(&row, &mut buf);
            total += log_sum_exp(&buf);
        }
        Ok(total / x.nrows() as f64)
    }

    /// Draws `n` samples; deterministic given `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng).0
    }

    fn sample_with(&self, n: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
        let d = self.dim();
        let picker = WeightedIndex::new(&self.weights).expect("weights validated on construction");
        let mut x = Array2::zeros((n, d));
        let mut picked = Vec::with_capacity(n);
        for mut row in x.rows_mut() {
            let k = picker.sample(rng);
            let c = &self.components[k];
            for j in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                row[j] = c.mu()[j] + c.sigma()[j] * z;
            }
            picked.push(k);
        }
        (x, picked)
    }
}

/// A mixture whose components each carry a distribution over `n_classes` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGmm {
    base: Gmm,
    labels: Vec<Vec<f64>>,
}

impl LabeledGmm {
    pub fn new(base: Gmm, labels: Vec<Vec<f64>>) -> Result<Self> {
        if labels.len() != base.k() {
            return Err(Error::DimensionMismatch { expected: base.k(), got: labels.len() });
        }
        let nc = labels[0].len();
        if nc == 0 {
            return Err(Error::Empty("label rows"));
        }
        for (k, row) in labels.iter().enumerate() {
            if row.len() != nc {
                return Err(Error::DimensionMismatch { expected: nc, got: row.len() });
            }
            check_simplex(row, &format!("label row {k}"))?;
        }
        Ok(Self { base, labels })
    }

    pub(crate) fn from_parts(base: Gmm, labels: Vec<Vec<f64>>) -> Self {
        Self { base, labels }
    }

    pub fn gmm(&self) -> &Gmm {
        &self.base
    }

    pub(crate) fn gmm_mut(&mut self) -> &mut Gmm {
        &mut self.base
    }

    pub fn labels(&self) -> &[Vec<f64>] {
        &self.labels
    }

    pub(crate) fn labels_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.labels[0].len()
    }

    pub fn k(&self) -> usize {
        self.base.k()
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn into_parts(self) -> (Gmm, Vec<Vec<f64>>) {
        (self.base, self.labels)
    }

    /// Class scores `sum_k y_kj r_k(x)`.
    pub fn class_posterior(&self, x: &[f64]) -> Vec<f64> {
        let r = self.base.responsibilities(x);
        let mut scores = vec![0.0; self.n_classes()];
        for (rk, row) in r.iter().zip(&self.labels) {
            for (s, &y) in scores.iter_mut().zip(row) {
                *s += y * rk;
            }
        }
        scores
    }

    /// MAP class; ties go to the smallest class index.
    pub fn map_classify(&self, x: &[f64]) -> usize {
        argmax(&self.class_posterior(x))
    }

    pub fn classify_rows(&self, x: ArrayView2<f64>) -> Vec<usize> {
        x.rows().into_iter().map(|r| self.map_classify(&r.to_vec())).collect()
    }

    /// Draws `n` samples with a class drawn from the label row of the chosen
    /// component.
    pub fn sample(&self, n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, comps) = self.base.sample_with(n, &mut rng);
        let pickers: Vec<_> = self
            .labels
            .iter()
            .map(|row| WeightedIndex::new(row).expect("label rows validated on construction"))
            .collect();
        let y = comps.iter().map(|&k| pickers[k].sample(&mut rng)).collect();
        (x, y)
    }
}

/// Fraction of predictions equal to the reference labels.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::one_hot;
    use ndarray::array;

    fn g1(mu: f64, sigma: f64) -> DiagGaussian {
        DiagGaussian::new(vec![mu], vec![sigma]).unwrap()
    }

    #[test]
    fn constructor_checks() {
        assert!(Gmm::new(vec![], vec![]).is_err());
        assert!(Gmm::new(vec![0.5, 0.6], vec![g1(0.0, 1.0), g1(1.0, 1.0)]).is_err());
        let two_d = DiagGaussian::standard(2);
        assert!(matches!(
            Gmm::new(vec![0.5, 0.5], vec![g1(0.0, 1.0), two_d]),
            Err(Error::DimensionMismatch { .. })
        ));
        let base = Gmm::single(g1(0.0, 1.0));
        assert!(LabeledGmm::new(base.clone(), vec![vec![0.5, 0.4]]).is_err());
        assert!(LabeledGmm::new(base, vec![vec![1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn log_likelihood_standard_normal_at_zero() {
        let m = Gmm::single(g1(0.0, 1.0));
        let ll = m.log_likelihood(array![[0.0]].view()).unwrap();
        assert!((ll - (1.0 / (2.0 * std::f64::consts::PI).sqrt()).ln()).abs() < 1e-14);
    }

    #[test]
    fn duplicated_component_gives_same_likelihood() {
        let x = array![[0.3], [-1.2], [2.5]];
        let one = Gmm::single(g1(0.5, 1.3));
        let two = Gmm::new(vec![0.5, 0.5], vec![g1(0.5, 1.3), g1(0.5, 1.3)]).unwrap();
        let a = one.log_likelihood(x.view()).unwrap();
        let b = two.log_likelihood(x.view()).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn likelihood_is_translation_invariant() {
        let x = array![[0.3, 1.0], [-1.2, 0.0], [2.5, -3.0]];
        let comps = vec![
            DiagGaussian::new(vec![0.0, 1.0], vec![1.0, 2.0]).unwrap(),
            DiagGaussian::new(vec![2.0, -1.0], vec![0.5, 1.0]).unwrap(),
        ];
        let m = Gmm::new(vec![0.3, 0.7], comps.clone()).unwrap();
        let shift = [10.0, -4.0];
        let moved: Vec<_> = comps
            .iter()
            .map(|c| {
                let mu = c.mu().iter().zip(&shift).map(|(a, b)| a + b).collect();
                DiagGaussian::new(mu, c.sigma().to_vec()).unwrap()
            })
            .collect();
        let m2 = Gmm::new(vec![0.3, 0.7], moved).unwrap();
        let x2 = &x + &array![[10.0, -4.0]];
        let a = m.log_likelihood(x.view()).unwrap();
        let b = m2.log_likelihood(x2.view()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_errors() {
        let m = Gmm::single(g1(0.0, 1.0));
        assert!(matches!(m.log_likelihood(Array2::zeros((0, 1)).view()), Err(Error::Empty(_))));
        assert!(matches!(
            m.log_likelihood(Array2::zeros((2, 3)).view()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn map_classify_examples() {
        let base = Gmm::new(vec![0.5, 0.5], vec![g1(0.0, 1.0), g1(100.0, 1.0)]).unwrap();
        let lg = LabeledGmm::new(base.clone(), vec![one_hot(2, 0), one_hot(2, 1)]).unwrap();
        assert_eq!(lg.map_classify(&[1.0]), 0);
        assert_eq!(lg.map_classify(&[99.0]), 1);
        // far in the tail: densities underflow, log domain still decides
        assert_eq!(lg.map_classify(&[1e4]), 1);

        let same = LabeledGmm::new(base, vec![one_hot(3, 2), one_hot(3, 2)]).unwrap();
        for x in [-50.0, 0.0, 50.0, 300.0] {
            assert_eq!(same.map_classify(&[x]), 2);
        }

        let mirror = Gmm::new(vec![0.5, 0.5], vec![g1(-1.0, 1.0), g1(1.0, 1.0)]).unwrap();
        let mirror = LabeledGmm::new(mirror, vec![one_hot(2, 1), one_hot(2, 0)]).unwrap();
        assert_eq!(mirror.map_classify(&[0.0]), 0);
    }

    #[test]
    fn sampling_examples() {
        let tight = Gmm::single(DiagGaussian::new(vec![3.0, -1.0], vec![1e-9, 1e-9]).unwrap());
        let x = tight.sample(5, 1);
        for r in x.rows() {
            assert!((r[0] - 3.0).abs() < 1e-7 && (r[1] + 1.0).abs() < 1e-7);
        }

        let lopsided = Gmm::new(vec![1.0, 0.0], vec![g1(0.0, 1.0), g1(1000.0, 1.0)]).unwrap();
        let x = lopsided.sample(1000, 2);
        assert!(x.iter().all(|&v| v.abs() < 100.0));

        let n = 100_000;
        let x = Gmm::single(g1(3.0, 2.0)).sample(n, 3);
        let mean = x.sum() / n as f64;
        assert!((mean - 3.0).abs() < 3.0 * 2.0 / (n as f64).sqrt());

        assert_eq!(tight.sample(7, 11), tight.sample(7, 11));
    }

    #[test]
    fn labeled_sampling_follows_label_rows() {
        let base = Gmm::new(vec![0.5, 0.5], vec![g1(0.0, 1.0), g1(50.0, 1.0)]).unwrap();
        let lg = LabeledGmm::new(base, vec![one_hot(2, 0), one_hot(2, 1)]).unwrap();
        let (x, y) = lg.sample(500, 4);
        for (r, &c) in x.rows().into_iter().zip(&y) {
            assert_eq!(c, usize::from(r[0] > 25.0));
        }
    }
}
