//! Linear embedding model, its w-step objective, and the mean-teacher copy.
//!
//! The w-step minimizes `Σ_i v_i · KL(Q_i ‖ P_i)` where `P_i` is the cosine
//! classifier output on the student embedding `W x_i + b` against frozen
//! classifier weights. Gradients are propagated analytically through the
//! softmax and both L2 normalizations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::uncertainty::{check_epsilon, kl_to_logits, softmax, CosineClassifier};

/// Maximum number of step halvings tried before a gradient step is abandoned.
pub const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl EmbeddingModel {
    pub fn identity(d: usize) -> Self {
        Self {
            weights: Matrix::identity(d),
            bias: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    fn check(&self) -> Result<()> {
        let d = self.bias.len();
        if self.weights.rows() != d || self.weights.cols() != d {
            return Err(Error::Input(format!(
                "weights are {}x{}, bias has length {d}",
                self.weights.rows(),
                self.weights.cols()
            )));
        }
        self.weights.ensure_finite("model weights")?;
        if self.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Input("model bias is not finite".into()));
        }
        Ok(())
    }

    fn embed_one(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherState {
    pub model: EmbeddingModel,
    pub momentum: f64,
}

impl TeacherState {
    pub fn new(model: EmbeddingModel, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        Ok(Self { model, momentum })
    }
}

/// Row `i` of the output is `W · raw_i + b`.
pub fn embed(model: &EmbeddingModel, raw: &Matrix) -> Result<Matrix> {
    model.check()?;
    if raw.cols() != model.dim() {
        return Err(Error::Input(format!(
            "raw features have d={}, model expects d={}",
            raw.cols(),
            model.dim()
        )));
    }
    raw.ensure_finite("raw features")?;
    let rows: Vec<Vec<f64>> = (0..raw.rows())
        .into_par_iter()
        .map(|i| model.embed_one(raw.row(i)))
        .collect();
    let mut out = Matrix::zeros(raw.rows(), model.dim());
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&r);
    }
    Ok(out)
}

/// `p_t ← m · p_t + (1 − m) · p_student` for every parameter.
pub fn ema_update(teacher: &TeacherState, student: &EmbeddingModel) -> TeacherState {
    let m = teacher.momentum;
    let blend = |t: &f64, s: &f64| m * t + (1.0 - m) * s;
    let weights: Vec<f64> = teacher
        .model
        .weights
        .as_slice()
        .iter()
        .zip(student.weights.as_slice())
        .map(|(t, s)| blend(t, s))
        .collect();
    let bias = teacher.model.bias.iter().zip(&student.bias).map(|(t, s)| blend(t, s)).collect();
    let d = teacher.model.dim();
    TeacherState {
        model: EmbeddingModel {
            weights: Matrix::from_vec(d, d, weights).expect("teacher and student share shape"),
            bias,
        },
        momentum: m,
    }
}

/// Binary indicators as per-sample loss weights.
pub fn indicator_weights(indicators: &[bool]) -> Vec<f64> {
    indicators.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
}

/// Everything the w-step objective holds fixed.
#[derive(Debug, Clone, Copy)]
pub struct WStepProblem<'a> {
    pub raw: &'a Matrix,
    /// `c × d` classifier weights (the cluster centroids, or a trained
    /// internal classifier).
    pub classifier: &'a Matrix,
    pub pseudo_labels: &'a [usize],
    /// Per-sample weights: 0/1 indicators, or soft weights in (0, 1].
    pub weights: &'a [f64],
    pub alpha: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WStepLoss {
    pub value: f64,
    /// No sample carries positive weight.
    pub empty_selection: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WStepGradient {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    /// Gradient w.r.t. the classifier weights; only filled in on request.
    pub classifier: Option<Matrix>,
}

struct SampleTerm {
    loss: f64,
    grad_f: Vec<f64>,
    grad_cls: Option<Vec<f64>>,
}

impl<'a> WStepProblem<'a> {
    fn validate(&self, model: &EmbeddingModel) -> Result<CosineClassifier> {
        model.check()?;
        let n = self.raw.rows();
        let d = model.dim();
        if self.raw.cols() != d || self.classifier.cols() != d {
            return Err(Error::Input("raw features, classifier and model dimensions differ".into()));
        }
        if self.pseudo_labels.len() != n || self.weights.len() != n {
            return Err(Error::Input(format!(
                "{} samples but {} labels and {} weights",
                n,
                self.pseudo_labels.len(),
                self.weights.len()
            )));
        }
        if let Some(i) = self.weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Input(format!("sample weight {i} is {}", self.weights[i])));
        }
        let c = self.classifier.rows();
        if let Some(i) = self.pseudo_labels.iter().position(|&l| l >= c) {
            return Err(Error::Input(format!("pseudo label of sample {i} outside [0, {c})")));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "temperature must be finite and > 0"));
        }
        check_epsilon(c, self.epsilon)?;
        self.raw.ensure_finite("raw features")?;
        CosineClassifier::new(self.classifier)
    }

    fn active(&self) -> Vec<usize> {
        (0..self.raw.rows()).filter(|&i| self.weights[i] > 0.0).collect()
    }

    fn ideal(&self, label: usize, c: usize) -> Vec<f64> {
        let mut q = vec![(1.0 - self.epsilon) / (c - 1) as f64; c];
        q[label] = self.epsilon;
        q
    }

    fn sample_term(
        &self,
        model: &EmbeddingModel,
        clf: &CosineClassifier,
        i: usize,
        want_grad: bool,
        want_cls: bool,
    ) -> Result<SampleTerm> {
        let c = clf.classes();
        let f = model.embed_one(self.raw.row(i));
        let logits = clf.logits(&f, self.alpha, i)?;
        let q = self.ideal(self.pseudo_labels[i], c);
        let loss = kl_to_logits(&q, &logits);
        if !want_grad {
            return Ok(SampleTerm {
                loss,
                grad_f: Vec::new(),
                grad_cls: None,
            });
        }
        // dU/dz = p − q
        let p = softmax(&logits);
        let dz: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a - b).collect();
        let f_norm = norm(&f);
        let unit_f: Vec<f64> = f.iter().map(|x| x / f_norm).collect();
        let units = clf.unit_weights();
        let d = f.len();

        // dU/dn = α Σ_j dz_j m_j, then project out n and divide by ‖f‖
        let mut g = vec![0.0; d];
        for (j, dzj) in dz.iter().enumerate() {
            for (gk, mk) in g.iter_mut().zip(units.row(j)) {
                *gk += self.alpha * dzj * mk;
            }
        }
        let gn = dot(&g, &unit_f);
        let grad_f = g.iter().zip(&unit_f).map(|(gk, nk)| (gk - gn * nk) / f_norm).collect();

        let grad_cls = want_cls.then(|| {
            let mut out = vec![0.0; c * d];
            for (j, dzj) in dz.iter().enumerate() {
                let m = units.row(j);
                let gm: Vec<f64> = unit_f.iter().map(|nk| self.alpha * dzj * nk).collect();
                let proj = dot(&gm, m);
                let w_norm = clf.weight_norms()[j];
                for k in 0..d {
                    out[j * d + k] = (gm[k] - proj * m[k]) / w_norm;
                }
            }
            out
        });
        Ok(SampleTerm { loss, grad_f, grad_cls })
    }

    pub fn loss(&self, model: &EmbeddingModel) -> Result<WStepLoss> {
        let clf = self.validate(model)?;
        let active = self.active();
        let terms: Vec<f64> = active
            .par_iter()
            .map(|&i| Ok(self.weights[i] * self.sample_term(model, &clf, i, false, false)?.loss))
            .collect::<Result<_>>()?;
        Ok(WStepLoss {
            value: terms.iter().sum(),
            empty_selection: active.is_empty(),
        })
    }

    pub fn gradient(&self, model: &EmbeddingModel, with_classifier: bool) -> Result<WStepGradient> {
        let clf = self.validate(model)?;
        let d = model.dim();
        let c = clf.classes();
        let active = self.active();
        let terms: Vec<SampleTerm> = active
            .par_iter()
            .map(|&i| self.sample_term(model, &clf, i, true, with_classifier))
            .collect::<Result<_>>()?;

        let mut gw = Matrix::zeros(d, d);
        let mut gb = vec![0.0; d];
        let mut gc = with_classifier.then(|| Matrix::zeros(c, d));
        for (&i, term) in active.iter().zip(&terms) {
            let w = self.weights[i];
            let x = self.raw.row(i);
            for r in 0..d {
                let gr = w * term.grad_f[r];
                gb[r] += gr;
                for (slot, xc) in gw.row_mut(r).iter_mut().zip(x) {
                    *slot += gr * xc;
                }
            }
            if let (Some(acc), Some(g)) = (gc.as_mut(), term.grad_cls.as_ref()) {
                for (slot, v) in acc.as_mut_slice().iter_mut().zip(g) {
                    *slot += w * v;
                }
            }
        }
        Ok(WStepGradient {
            weights: gw,
            bias: gb,
            classifier: gc,
        })
    }
}

pub fn wstep_loss(model: &EmbeddingModel, problem: &WStepProblem<'_>) -> Result<WStepLoss> {
    problem.loss(model)
}

pub fn wstep_grad(model: &EmbeddingModel, problem: &WStepProblem<'_>) -> Result<(Matrix, Vec<f64>)> {
    let g = problem.gradient(model, false)?;
    Ok((g.weights, g.bias))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WStepOutcome {
    pub model: EmbeddingModel,
    /// Updated classifier when it was trained jointly.
    pub classifier: Option<Matrix>,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Loss after each accepted or abandoned step, starting with `loss_before`.
    pub trajectory: Vec<f64>,
    pub final_lr: f64,
}

fn step_model(model: &EmbeddingModel, g: &WStepGradient, lr: f64) -> EmbeddingModel {
    let weights = model
        .weights
        .as_slice()
        .iter()
        .zip(g.weights.as_slice())
        .map(|(w, gw)| w - lr * gw)
        .collect();
    let d = model.dim();
    EmbeddingModel {
        weights: Matrix::from_vec(d, d, weights).expect("same shape"),
        bias: model.bias.iter().zip(&g.bias).map(|(b, gb)| b - lr * gb).collect(),
    }
}

fn step_matrix(m: &Matrix, g: &Matrix, lr: f64) -> Matrix {
    let data = m.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a - lr * b).collect();
    Matrix::from_vec(m.rows(), m.cols(), data).expect("same shape")
}

/// Plain gradient descent on the w-step objective. A step that does not
/// strictly lower the loss is retried with half the learning rate, up to
/// [`MAX_HALVINGS`] times; the reduced rate carries over to later steps.
pub fn wstep_optimize(
    model: &EmbeddingModel,
    problem: &WStepProblem<'_>,
    lr: f64,
    n_grad_steps: usize,
) -> Result<WStepOutcome> {
    optimize(model, None, problem, lr, n_grad_steps)
}

/// Like [`wstep_optimize`] but also trains the classifier weights, which
/// start from `problem.classifier`.
pub fn wstep_optimize_joint(
    model: &EmbeddingModel,
    problem: &WStepProblem<'_>,
    lr: f64,
    n_grad_steps: usize,
) -> Result<WStepOutcome> {
    optimize(model, Some(problem.classifier.clone()), problem, lr, n_grad_steps)
}

fn optimize(
    model: &EmbeddingModel,
    mut classifier: Option<Matrix>,
    problem: &WStepProblem<'_>,
    lr: f64,
    n_grad_steps: usize,
) -> Result<WStepOutcome> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::config("lr", "must be finite and > 0"));
    }
    if n_grad_steps == 0 {
        return Err(Error::config("n_grad_steps", "must be at least 1"));
    }
    let joint = classifier.is_some();
    fn with_cls<'b>(problem: &WStepProblem<'b>, cls: &'b Option<Matrix>) -> WStepProblem<'b> {
        WStepProblem {
            classifier: cls.as_ref().unwrap_or(problem.classifier),
            ..*problem
        }
    }

    let mut current = model.clone();
    let mut loss = with_cls(problem, &classifier).loss(&current)?.value;
    let loss_before = loss;
    let mut trajectory = vec![loss];
    let mut lr = lr;
    for _ in 0..n_grad_steps {
        let g = with_cls(problem, &classifier).gradient(&current, joint)?;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = step_model(&current, &g, lr);
            let cand_cls = classifier
                .as_ref()
                .zip(g.classifier.as_ref())
                .map(|(c, gc)| step_matrix(c, gc, lr));
            // a candidate that breaks normalization counts as a failed step
            let cand_loss = with_cls(problem, &cand_cls).loss(&cand).map(|l| l.value);
            match cand_loss {
                Ok(v) if v < loss => {
                    current = cand;
                    classifier = cand_cls;
                    loss = v;
                    accepted = true;
                    break;
                }
                _ => lr *= 0.5,
            }
        }
        trajectory.push(loss);
        if !accepted {
            break;
        }
    }
    Ok(WStepOutcome {
        model: current,
        classifier,
        loss_before,
        loss_after: loss,
        trajectory,
        final_lr: lr,
    })
}

/// Serialized student and teacher parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub d: usize,
    #[serde(rename = "W")]
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(rename = "teacher_W")]
    pub teacher_weights: Vec<f64>,
    pub teacher_bias: Vec<f64>,
    pub momentum: f64,
}

impl Checkpoint {
    pub fn new(student: &EmbeddingModel, teacher: &TeacherState) -> Self {
        Self {
            d: student.dim(),
            weights: student.weights.as_slice().to_vec(),
            bias: student.bias.clone(),
            teacher_weights: teacher.model.weights.as_slice().to_vec(),
            teacher_bias: teacher.model.bias.clone(),
            momentum: teacher.momentum,
        }
    }

    pub fn restore(&self) -> Result<(EmbeddingModel, TeacherState)> {
        let d = self.d;
        let student = EmbeddingModel {
            weights: Matrix::from_vec(d, d, self.weights.clone())?,
            bias: self.bias.clone(),
        };
        let teacher = EmbeddingModel {
            weights: Matrix::from_vec(d, d, self.teacher_weights.clone())?,
            bias: self.teacher_bias.clone(),
        };
        student.check()?;
        teacher.check()?;
        Ok((student, TeacherState::new(teacher, self.momentum)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::rng_for;
    use crate::uncertainty::{centroid_classifier_probs, ideal_distribution, kl_uncertainty};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn random_model(d: usize, rng: &mut impl Rng) -> EmbeddingModel {
        let mut w = Matrix::identity(d);
        for v in w.as_mut_slice() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
        EmbeddingModel {
            weights: w,
            bias: (0..d).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect(),
        }
    }

    #[test]
    fn identity_and_scaling() {
        let raw = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.5, -2.0, 3.0]]).unwrap();
        assert_eq!(embed(&EmbeddingModel::identity(3), &raw).unwrap(), raw);
        let double = EmbeddingModel {
            weights: Matrix::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap(),
            bias: vec![0.0; 3],
        };
        assert_eq!(embed(&double, &raw).unwrap().row(0), &[2.0, 0.0, 0.0]);
    }

    #[test]
    fn embed_matches_triple_loop() {
        let mut rng = rng_for(3);
        let model = random_model(3, &mut rng);
        let raw = random_matrix(5, 3, &mut rng);
        let out = embed(&model, &raw).unwrap();
        for i in 0..5 {
            for r in 0..3 {
                let mut acc = model.bias[r];
                for c in 0..3 {
                    acc += model.weights[(r, c)] * raw[(i, c)];
                }
                assert!((out[(i, r)] - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn embed_rejects_non_finite_and_mismatch() {
        let mut raw = Matrix::zeros(2, 3);
        raw[(1, 2)] = f64::NAN;
        assert!(embed(&EmbeddingModel::identity(3), &raw).is_err());
        assert!(embed(&EmbeddingModel::identity(2), &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn loss_is_sum_of_selected_kl_terms() {
        let mut rng = rng_for(8);
        let (n, c, d) = (12, 4, 3);
        let model = random_model(d, &mut rng);
        let raw = random_matrix(n, d, &mut rng);
        let cls = random_matrix(c, d, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let ind: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
        let weights = indicator_weights(&ind);
        let problem = WStepProblem {
            raw: &raw,
            classifier: &cls,
            pseudo_labels: &labels,
            weights: &weights,
            alpha: 20.0,
            epsilon: 0.99,
        };
        let loss = wstep_loss(&model, &problem).unwrap();
        assert!(!loss.empty_selection);
        let emb = embed(&model, &raw).unwrap();
        let mut oracle = 0.0;
        for i in (0..n).filter(|&i| ind[i]) {
            let p = centroid_classifier_probs(emb.row(i), &cls, 20.0).unwrap();
            let q = ideal_distribution(c, labels[i], 0.99).unwrap();
            oracle += kl_uncertainty(&q, &p).unwrap();
        }
        assert!((loss.value - oracle).abs() <= 1e-10 * oracle.max(1.0));
    }

    #[test]
    fn empty_selection_is_zero_and_flagged() {
        let raw = Matrix::identity(3);
        let cls = Matrix::identity(3);
        let weights = vec![0.0; 3];
        let problem = WStepProblem {
            raw: &raw,
            classifier: &cls,
            pseudo_labels: &[0, 1, 2],
            weights: &weights,
            alpha: 20.0,
            epsilon: 0.99,
        };
        let model = EmbeddingModel::identity(3);
        let loss = wstep_loss(&model, &problem).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.empty_selection);
        let (gw, gb) = wstep_grad(&model, &problem).unwrap();
        assert!(gw.as_slice().iter().all(|&x| x == 0.0));
        assert!(gb.iter().all(|&x| x == 0.0));
        let out = wstep_optimize(&model, &problem, 0.1, 1).unwrap();
        assert_eq!(out.model, model);
    }

    #[test]
    fn sharp_single_sample_matches_kl_oracle() {
        // sample on its centroid, orthogonal centroids, α = 200
        let raw = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let cls = Matrix::identity(3);
        let weights = vec![1.0];
        let problem = WStepProblem {
            raw: &raw,
            classifier: &cls,
            pseudo_labels: &[0],
            weights: &weights,
            alpha: 200.0,
            epsilon: 0.99,
        };
        let loss = wstep_loss(&EmbeddingModel::identity(3), &problem).unwrap().value;
        // Q = (0.99, 0.005, 0.005), ln P = (−ln(1+2e^{−200}), −200 − ln(1+2e^{−200}), …)
        let oracle = 0.99 * 0.99f64.ln() + 2.0 * 0.005 * (0.005f64.ln() + 200.0);
        assert!((loss - oracle).abs() < 1e-12, "{loss} vs {oracle}");
    }

    #[test]
    fn singular_embedding_reports_index() {
        let raw = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let cls = Matrix::identity(2);
        let weights = vec![1.0, 1.0];
        let problem = WStepProblem {
            raw: &raw,
            classifier: &cls,
            pseudo_labels: &[0, 1],
            weights: &weights,
            alpha: 20.0,
            epsilon: 0.99,
        };
        let err = wstep_grad(&EmbeddingModel::identity(2), &problem).unwrap_err();
        assert!(matches!(err, Error::SingularNormalization { what: "feature", index: 1 }));
    }

    #[test]
    fn huge_learning_rate_never_increases_loss() {
        let mut rng = rng_for(12);
        let (n, c, d) = (20, 5, 4);
        let raw = random_matrix(n, d, &mut rng);
        let cls = random_matrix(c, d, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let weights = vec![1.0; n];
        let problem = WStepProblem {
            raw: &raw,
            classifier: &cls,
            pseudo_labels: &labels,
            weights: &weights,
            alpha: 20.0,
            epsilon: 0.99,
        };
        let model = random_model(d, &mut rng);
        let out = wstep_optimize(&model, &problem, 1e3, 10).unwrap();
        assert!(out.loss_after <= out.loss_before + 1e-9);
        assert!(out.trajectory.windows(2).all(|w| w[1] <= w[0]));
        let joint = wstep_optimize_joint(&model, &problem, 1e3, 10).unwrap();
        assert!(joint.loss_after <= joint.loss_before + 1e-9);
        assert!(joint.classifier.is_some());
    }

    #[test]
    fn ema_examples() {
        let student = EmbeddingModel {
            weights: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            bias: vec![1.0],
        };
        let zero = EmbeddingModel {
            weights: Matrix::zeros(1, 1),
            bias: vec![0.0],
        };
        let t = ema_update(&TeacherState::new(zero.clone(), 0.5).unwrap(), &student);
        assert_eq!(t.model.weights[(0, 0)], 0.5);
        assert_eq!(t.model.bias[0], 0.5);
        let copy = ema_update(&TeacherState::new(zero, 0.0).unwrap(), &student);
        assert_eq!(copy.model, student);
        assert!(TeacherState::new(student, 1.0).is_err());
    }

    #[test]
    fn ema_contracts_distance_by_momentum() {
        let mut rng = rng_for(4);
        let student = random_model(3, &mut rng);
        let mut teacher = TeacherState::new(random_model(3, &mut rng), 0.7).unwrap();
        let dist = |t: &TeacherState| t.model.weights.max_abs_diff(&student.weights);
        for _ in 0..5 {
            let before: Vec<f64> = teacher
                .model
                .weights
                .as_slice()
                .iter()
                .zip(student.weights.as_slice())
                .map(|(a, b)| a - b)
                .collect();
            let next = ema_update(&teacher, &student);
            for (k, (a, b)) in next.model.weights.as_slice().iter().zip(student.weights.as_slice()).enumerate() {
                assert!(((a - b) - 0.7 * before[k]).abs() <= 1e-12);
            }
            assert!(dist(&next) <= dist(&teacher));
            teacher = next;
        }
    }

    #[test]
    fn checkpoint_roundtrip_json() {
        let mut rng = rng_for(5);
        let student = random_model(3, &mut rng);
        let teacher = TeacherState::new(random_model(3, &mut rng), 0.9).unwrap();
        let ck = Checkpoint::new(&student, &teacher);
        let json = serde_json::to_string(&ck).unwrap();
        assert!(json.contains("\"teacher_W\""));
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        let (s, t) = back.restore().unwrap();
        assert_eq!(s, student);
        assert_eq!(t, teacher);
    }
}
