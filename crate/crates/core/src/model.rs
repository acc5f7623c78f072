//! Loss models for the training loop: multinomial logistic regression, a
//! one-hidden-layer tanh network, and a quadratic bowl used as an analytic
//! test fixture.
//!
//! A model is a flat parameter vector plus a layout. The logistic layout is
//! class-major `[w_k (dim), b_k]` for each class k; the perceptron layout is
//! `[W1 (hidden×dim, row-major), b1, W2 (classes×hidden), b2]`.

use serde::{Deserialize, Serialize};

pub type Sample = (Vec<f64>, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LossModel {
    /// Softmax cross-entropy on affine scores, `classes·(dim+1)` parameters.
    Logistic { dim: usize, classes: usize },
    /// tanh hidden layer then softmax, `hidden·(dim+1) + classes·(hidden+1)`
    /// parameters.
    Perceptron {
        dim: usize,
        classes: usize,
        hidden: usize,
    },
    /// `L(w) = ½·|w − target|²`, independent of the data. Test fixture.
    Quadratic { target: Vec<f64> },
}

/// Hidden width that brings the perceptron's parameter count closest to
/// `budget` from below the exact solve, never below 1.
pub fn perceptron_width_for_budget(dim: usize, classes: usize, budget: usize) -> usize {
    let denom = (dim + 1 + classes) as f64;
    let h = ((budget.saturating_sub(classes)) as f64 / denom).round();
    (h as usize).max(1)
}

impl LossModel {
    pub fn num_params(&self) -> usize {
        match self {
            LossModel::Logistic { dim, classes } => classes * (dim + 1),
            LossModel::Perceptron {
                dim,
                classes,
                hidden,
            } => hidden * (dim + 1) + classes * (hidden + 1),
            LossModel::Quadratic { target } => target.len(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            LossModel::Logistic { classes, .. } => *classes,
            LossModel::Perceptron { classes, .. } => *classes,
            LossModel::Quadratic { .. } => 1,
        }
    }

    /// Class scores before the softmax.
    fn logits(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        match self {
            LossModel::Logistic { dim, classes } => {
                let mut z = vec![0.0; *classes];
                for (k, zk) in z.iter_mut().enumerate() {
                    let row = &params[k * (dim + 1)..(k + 1) * (dim + 1)];
                    *zk = row[*dim] + row[..*dim].iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
                }
                z
            }
            LossModel::Perceptron { .. } => {
                let (a, _) = self.hidden_activations(params, x);
                self.output_logits(params, &a)
            }
            LossModel::Quadratic { .. } => vec![0.0],
        }
    }

    fn hidden_activations(&self, params: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let LossModel::Perceptron { dim, hidden, .. } = self else {
            unreachable!("hidden layer exists only on the perceptron");
        };
        let (w1, b1) = (&params[..hidden * dim], &params[hidden * dim..hidden * (dim + 1)]);
        let mut pre = vec![0.0; *hidden];
        for (j, p) in pre.iter_mut().enumerate() {
            *p = b1[j]
                + w1[j * dim..(j + 1) * dim]
                    .iter()
                    .zip(x)
                    .map(|(w, xi)| w * xi)
                    .sum::<f64>();
        }
        let act = pre.iter().map(|p| p.tanh()).collect();
        (act, pre)
    }

    fn output_logits(&self, params: &[f64], act: &[f64]) -> Vec<f64> {
        let LossModel::Perceptron {
            dim,
            classes,
            hidden,
        } = self
        else {
            unreachable!();
        };
        let base = hidden * (dim + 1);
        let (w2, b2) = (
            &params[base..base + classes * hidden],
            &params[base + classes * hidden..],
        );
        let mut z = vec![0.0; *classes];
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = b2[k]
                + w2[k * hidden..(k + 1) * hidden]
                    .iter()
                    .zip(act)
                    .map(|(w, a)| w * a)
                    .sum::<f64>();
        }
        z
    }

    /// Mean per-sample loss over `data`. The quadratic bowl reads only the
    /// parameters.
    pub fn loss(&self, params: &[f64], data: &[Sample]) -> f64 {
        assert_eq!(params.len(), self.num_params(), "parameter layout mismatch");
        if let LossModel::Quadratic { target } = self {
            return 0.5
                * params
                    .iter()
                    .zip(target)
                    .map(|(w, a)| (w - a) * (w - a))
                    .sum::<f64>();
        }
        let mut total = 0.0;
        for (x, y) in data {
            let z = self.logits(params, x);
            total += log_sum_exp(&z) - z[*y];
        }
        total / data.len() as f64
    }

    /// Mean gradient of `loss` with respect to the parameters.
    pub fn grad(&self, params: &[f64], data: &[Sample]) -> Vec<f64> {
        assert_eq!(params.len(), self.num_params(), "parameter layout mismatch");
        let mut g = vec![0.0; params.len()];
        match self {
            LossModel::Quadratic { target } => {
                for (gi, (w, a)) in g.iter_mut().zip(params.iter().zip(target)) {
                    *gi = w - a;
                }
                return g;
            }
            LossModel::Logistic { dim, classes } => {
                for (x, y) in data {
                    let p = softmax(&self.logits(params, x));
                    for k in 0..*classes {
                        let d = p[k] - if k == *y { 1.0 } else { 0.0 };
                        let row = &mut g[k * (dim + 1)..(k + 1) * (dim + 1)];
                        for (ri, xi) in row[..*dim].iter_mut().zip(x) {
                            *ri += d * xi;
                        }
                        row[*dim] += d;
                    }
                }
            }
            LossModel::Perceptron {
                dim,
                classes,
                hidden,
            } => {
                let base = hidden * (dim + 1);
                for (x, y) in data {
                    let (act, _) = self.hidden_activations(params, x);
                    let p = softmax(&self.output_logits(params, &act));
                    let mut d_act = vec![0.0; *hidden];
                    for k in 0..*classes {
                        let d = p[k] - if k == *y { 1.0 } else { 0.0 };
                        for j in 0..*hidden {
                            g[base + k * hidden + j] += d * act[j];
                            d_act[j] += d * params[base + k * hidden + j];
                        }
                        g[base + classes * hidden + k] += d;
                    }
                    for j in 0..*hidden {
                        let d_pre = d_act[j] * (1.0 - act[j] * act[j]);
                        for (gi, xi) in g[j * dim..(j + 1) * dim].iter_mut().zip(x) {
                            *gi += d_pre * xi;
                        }
                        g[hidden * dim + j] += d_pre;
                    }
                }
            }
        }
        let inv = 1.0 / data.len() as f64;
        for gi in &mut g {
            *gi *= inv;
        }
        g
    }

    /// Highest-scoring class, lowest index on ties.
    pub fn predict(&self, params: &[f64], x: &[f64]) -> usize {
        let z = self.logits(params, x);
        let mut best = 0;
        for (k, zk) in z.iter().enumerate() {
            if *zk > z[best] {
                best = k;
            }
        }
        best
    }

    /// Fraction of `data` classified correctly.
    pub fn accuracy(&self, params: &[f64], data: &[Sample]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = data
            .iter()
            .filter(|(x, y)| self.predict(params, x) == *y)
            .count();
        hits as f64 / data.len() as f64
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|zk| (zk - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|zk| (zk - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn zero_parameters_score_every_class_equally() {
        let data = vec![(vec![0.3, -0.7], 4usize), (vec![1.0, 2.0], 0)];
        for model in [
            LossModel::Logistic {
                dim: 2,
                classes: 10,
            },
            LossModel::Perceptron {
                dim: 2,
                classes: 10,
                hidden: 5,
            },
        ] {
            let w = vec![0.0; model.num_params()];
            let loss = model.loss(&w, &data);
            assert!((loss - 10.0_f64.ln()).abs() < 1e-12, "{loss}");
        }
    }

    #[test]
    fn confident_correct_predictions_drive_the_loss_to_zero() {
        let model = LossModel::Logistic { dim: 1, classes: 2 };
        // Bias-only decision: class of each sample matches the sign margin.
        let mut w = vec![0.0; model.num_params()];
        w[1] = -50.0;
        w[3] = 50.0;
        let data = vec![(vec![0.0], 1usize)];
        assert!(model.loss(&w, &data) < 1e-12);
        assert_eq!(model.predict(&w, &[0.0]), 1);
    }

    #[test]
    fn loss_is_the_mean_over_samples() {
        // Logits [0, ln 3] from biases alone: label 1 costs ln(4/3),
        // label 0 costs ln 4.
        let model = LossModel::Logistic { dim: 1, classes: 2 };
        let mut w = vec![0.0; model.num_params()];
        w[3] = 3.0_f64.ln();
        let s1 = (vec![0.0], 1usize);
        let s0 = (vec![0.0], 0usize);
        let l1 = model.loss(&w, std::slice::from_ref(&s1));
        let l0 = model.loss(&w, std::slice::from_ref(&s0));
        assert!((l1 - (4.0_f64 / 3.0).ln()).abs() < 1e-12);
        assert!((l0 - 4.0_f64.ln()).abs() < 1e-12);
        let both = model.loss(&w, &[s1, s0]);
        assert!((both - 0.5 * (l0 + l1)).abs() < 1e-12);
    }

    #[test]
    fn quadratic_bowl_has_its_textbook_gradient() {
        let model = LossModel::Quadratic {
            target: vec![1.0, -2.0, 0.5],
        };
        let w = vec![2.0, 0.0, 0.5];
        assert!((model.loss(&w, &[]) - 0.5 * (1.0 + 4.0)).abs() < 1e-12);
        assert_eq!(model.grad(&w, &[]), vec![1.0, 2.0, 0.0]);
    }

    fn random_data(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let x = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                (x, rng.gen_range(0..classes))
            })
            .collect()
    }

    fn max_rel_grad_error(model: &LossModel, w: &[f64], data: &[Sample]) -> f64 {
        let g = model.grad(w, data);
        let eps = 1e-5;
        let mut worst = 0.0_f64;
        let mut wp = w.to_vec();
        for i in 0..w.len() {
            wp[i] = w[i] + eps;
            let up = model.loss(&wp, data);
            wp[i] = w[i] - eps;
            let down = model.loss(&wp, data);
            wp[i] = w[i];
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((fd - g[i]).abs() / g[i].abs().max(1.0));
        }
        worst
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let models = [
            LossModel::Logistic { dim: 3, classes: 3 },
            LossModel::Perceptron {
                dim: 3,
                classes: 3,
                hidden: 4,
            },
            LossModel::Quadratic {
                target: vec![0.3, -1.1, 2.0],
            },
        ];
        for model in &models {
            let data = random_data(&mut rng, 12, 3, model.num_classes().max(2));
            let data = if matches!(model, LossModel::Quadratic { .. }) {
                vec![]
            } else {
                data
            };
            for _ in 0..10 {
                let w: Vec<f64> = (0..model.num_params())
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5)
                    .collect();
                let err = max_rel_grad_error(model, &w, &data);
                assert!(err < 1e-4, "{model:?}: rel err {err}");
            }
        }
    }

    #[test]
    fn width_budget_hits_the_reference_parameter_count() {
        let h = perceptron_width_for_budget(16, 10, 9098);
        assert_eq!(h, 337);
        let model = LossModel::Perceptron {
            dim: 16,
            classes: 10,
            hidden: h,
        };
        // 337·17 + 10·338 = 9109, the closest width to the budget.
        assert!((model.num_params() as i64 - 9098).abs() < 27);
        assert_eq!(perceptron_width_for_budget(4, 100, 10), 1);
    }

    #[test]
    fn separable_clusters_are_learned_by_plain_gradient_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut data = Vec::new();
        for _ in 0..40 {
            let eps: f64 = rng.sample::<f64, _>(StandardNormal) * 0.1;
            let eps2: f64 = rng.sample::<f64, _>(StandardNormal) * 0.1;
            data.push((vec![2.0 + eps, eps2], 0usize));
            data.push((vec![-2.0 + eps2, eps], 1usize));
        }
        let model = LossModel::Logistic { dim: 2, classes: 2 };
        let mut w = vec![0.0; model.num_params()];
        for _ in 0..200 {
            let g = model.grad(&w, &data);
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= 0.5 * gi;
            }
        }
        assert_eq!(model.accuracy(&w, &data), 1.0);
    }
}
