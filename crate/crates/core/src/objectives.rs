//! Training losses: the prototypical CVAE loss, the prototypical
//! hypersphere classification loss and embedding distillation.
//!
//! Each loss exists in two forms: a tape builder used for training and
//! gradient checks, and a plain function over values that builds a
//! throwaway tape and returns the scalar.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CvaeParams, CvaeVars, PrototypeTable};
use crate::rng::NormalSource;
use crate::tape::{Tape, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_reconst: f64,
    pub lambda_kd: f64,
}

impl LossWeights {
    pub fn new(lambda_reconst: f64, lambda_kd: f64) -> Result<Self> {
        let w = Self {
            lambda_reconst,
            lambda_kd,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_reconst", self.lambda_reconst), ("lambda_kd", self.lambda_kd)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Real,
    PseudoId,
    PseudoOod,
    Exemplar,
}

/// Training target of an embedding: a class, or the outlier sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    Class(i64),
    Ood,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbedding {
    pub z: Array1<f64>,
    target: Target,
    provenance: Provenance,
}

impl LabeledEmbedding {
    /// Fails unless `target` is [`Target::Ood`] exactly when `provenance`
    /// is [`Provenance::PseudoOod`].
    pub fn new(z: Array1<f64>, target: Target, provenance: Provenance) -> Result<Self> {
        if (target == Target::Ood) != (provenance == Provenance::PseudoOod) {
            return Err(Error::invalid(format!("{provenance:?} sample cannot carry target {target:?}")));
        }
        Ok(Self { z, target, provenance })
    }

    pub fn class(z: Array1<f64>, class: i64, provenance: Provenance) -> Result<Self> {
        Self::new(z, Target::Class(class), provenance)
    }

    pub fn ood(z: Array1<f64>) -> Self {
        Self {
            z,
            target: Target::Ood,
            provenance: Provenance::PseudoOod,
        }
    }

    pub fn target(&self) -> Target {
        self.target
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

/// Stacks embeddings into a matrix.
pub fn stack(batch: &[LabeledEmbedding]) -> Result<Array2<f64>> {
    let Some(first) = batch.first() else {
        return Err(Error::invalid("empty batch"));
    };
    let d = first.z.len();
    let mut out = Array2::zeros((batch.len(), d));
    for (i, e) in batch.iter().enumerate() {
        if e.z.len() != d {
            return Err(Error::shape("embeddings of different widths in one batch"));
        }
        out.row_mut(i).assign(&e.z);
    }
    Ok(out)
}

/// Row index into `classes` for each target; `None` for outliers.
pub fn target_rows(targets: &[Target], classes: &[i64]) -> Result<Vec<Option<usize>>> {
    targets
        .iter()
        .map(|t| match t {
            Target::Ood => Ok(None),
            Target::Class(c) => classes
                .binary_search(c)
                .map(Some)
                .map_err(|_| Error::UnknownClass(*c)),
        })
        .collect()
}

/// `KL(N(μ, diag σ²) ‖ N(p, I)) = ½ Σ (σ² + (μ − p)² − 1 − 2 ln σ)`.
pub fn kl_to_prototype(mu: &Array1<f64>, sigma: &Array1<f64>, p: &Array1<f64>) -> Result<f64> {
    if mu.len() != sigma.len() || mu.len() != p.len() {
        return Err(Error::shape("kl_to_prototype needs equal lengths"));
    }
    if let Some(s) = sigma.iter().find(|&&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {s}")));
    }
    Ok(0.5
        * mu.iter()
            .zip(sigma)
            .zip(p)
            .map(|((m, s), p)| s * s + (m - p) * (m - p) - 1.0 - 2.0 * s.ln())
            .sum::<f64>())
}

/// Per-row KL from a log-variance parameterized posterior to `N(protos, I)`.
pub fn kl_rows<'t>(mu: Var<'t>, logvar: Var<'t>, protos: Var<'t>) -> Var<'t> {
    let diff = mu.sub(protos).square();
    logvar
        .exp()
        .add(diff)
        .sub(logvar)
        .affine(1.0, -1.0)
        .row_sum()
        .scale(0.5)
}

/// Mean over rows of `λ_reconst ‖z − ẑ‖² + KL(q(h|z) ‖ N(p_c, I))` where
/// `ẑ` decodes `μ + σ ⊙ ε`. `class_rows[i]` indexes the row of `protos`
/// holding sample `i`'s prototype.
pub fn pcvae_on_tape<'t>(
    z: Var<'t>,
    class_rows: &[usize],
    cvae: &CvaeVars<'t>,
    protos: Var<'t>,
    eps: &Array2<f64>,
    lambda_reconst: f64,
) -> Var<'t> {
    let tape = z.tape();
    let (mu, logvar) = cvae.encode(z);
    let sigma = logvar.scale(0.5).exp();
    let h = mu.add(sigma.mul(tape.constant(eps.clone())));
    let recon = cvae.decode(h).sub(z).square().row_sum().scale(lambda_reconst);
    let kl = kl_rows(mu, logvar, protos.gather_rows(class_rows));
    recon.add(kl).mean()
}

/// Binary cross-entropy of every sample against every prototype, with
/// in-class probability `l = exp(−‖h(z) − p_c‖²)`. Outliers (`None`) are
/// negatives for all classes. Summed over classes, averaged over samples.
pub fn phsc_on_tape<'t>(z: Var<'t>, targets: &[Option<usize>], cvae: &CvaeVars<'t>, protos: Var<'t>) -> Var<'t> {
    let h = cvae.posterior_mean(z);
    bce_against_prototypes(h, targets, protos)
}

/// The hypersphere loss on already-encoded latents `h`.
pub fn bce_against_prototypes<'t>(h: Var<'t>, targets: &[Option<usize>], protos: Var<'t>) -> Var<'t> {
    let (n, c) = (h.shape().0, protos.shape().0);
    let mut positive = Array2::zeros((n, c));
    for (i, t) in targets.iter().enumerate() {
        if let Some(j) = t {
            positive[[i, *j]] = 1.0;
        }
    }
    let negative = positive.mapv(|y: f64| 1.0 - y);
    let l = h.pairwise_sq_dist(protos).scale(-1.0).exp().clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pos = l.ln().mul_const(Arc::new(positive));
    let neg = l.affine(-1.0, 1.0).ln().mul_const(Arc::new(negative));
    pos.add(neg).sum().scale(-1.0 / n as f64)
}

/// Mean over rows of `‖teacher − student‖²`.
pub fn kd_on_tape<'t>(student: Var<'t>, teacher: Var<'t>) -> Var<'t> {
    let n = student.shape().0;
    teacher.sub(student).square().sum().scale(1.0 / n as f64)
}

/// Cross-entropy over `−‖h − p‖²` logits with one extra prototype (the
/// last row of `protos`) that absorbs every outlier.
pub fn unknown_prototype_ce<'t>(h: Var<'t>, targets: &[Option<usize>], protos: Var<'t>) -> Var<'t> {
    let unknown = protos.shape().0 - 1;
    let rows: Vec<usize> = targets.iter().map(|t| t.unwrap_or(unknown)).collect();
    softmax_ce(h.pairwise_sq_dist(protos).scale(-1.0), &rows)
}

/// Mean negative log-likelihood of `rows` under row-wise softmax of `logits`.
pub fn softmax_ce<'t>(logits: Var<'t>, rows: &[usize]) -> Var<'t> {
    let (n, c) = logits.shape();
    let mut onehot = Array2::zeros((n, c));
    for (i, &r) in rows.iter().enumerate() {
        onehot[[i, r]] = 1.0;
    }
    logits.log_softmax().mul_const(Arc::new(onehot)).sum().scale(-1.0 / n as f64)
}

fn class_batch(batch: &[LabeledEmbedding], table: &PrototypeTable) -> Result<(Array2<f64>, Vec<usize>)> {
    let classes = table.classes();
    let mut rows = Vec::with_capacity(batch.len());
    for e in batch {
        match e.target {
            Target::Ood => return Err(Error::invalid("pcvae batch contains an outlier sample")),
            Target::Class(c) => rows.push(classes.binary_search(&c).map_err(|_| Error::UnknownClass(c))?),
        }
    }
    Ok((stack(batch)?, rows))
}

/// [`pcvae_loss`] with explicit noise: row `i` of `eps` drives sample `i`.
pub fn pcvae_loss_with_noise(
    batch: &[LabeledEmbedding],
    model: &CvaeParams,
    table: &PrototypeTable,
    weights: &LossWeights,
    eps: &Array2<f64>,
) -> Result<f64> {
    weights.validate()?;
    let (z, rows) = class_batch(batch, table)?;
    if eps.dim() != (z.nrows(), model.latent_dim()) {
        return Err(Error::shape("noise matrix shape"));
    }
    let tape = Tape::new();
    let cvae = model.on_tape_frozen(&tape);
    let protos = tape.constant(table.matrix(&table.classes())?);
    let zv = tape.constant(z);
    Ok(pcvae_on_tape(zv, &rows, &cvae, protos, eps, weights.lambda_reconst).scalar())
}

/// Prototypical CVAE loss with one latent draw per sample from `rng`.
pub fn pcvae_loss(
    batch: &[LabeledEmbedding],
    model: &CvaeParams,
    table: &PrototypeTable,
    weights: &LossWeights,
    rng: &mut impl NormalSource,
) -> Result<f64> {
    let mut eps = Array2::zeros((batch.len(), model.latent_dim()));
    rng.fill_normal(eps.as_slice_mut().expect("standard layout"));
    pcvae_loss_with_noise(batch, model, table, weights, &eps)
}

pub fn phsc_loss(batch: &[LabeledEmbedding], model: &CvaeParams, table: &PrototypeTable) -> Result<f64> {
    if table.is_empty() {
        return Err(Error::invalid("phsc_loss needs at least one prototype"));
    }
    let classes = table.classes();
    let targets: Vec<Target> = batch.iter().map(|e| e.target).collect();
    let rows = target_rows(&targets, &classes)?;
    let tape = Tape::new();
    let cvae = model.on_tape_frozen(&tape);
    let protos = tape.constant(table.matrix(&classes)?);
    let z = tape.constant(stack(batch)?);
    Ok(phsc_on_tape(z, &rows, &cvae, protos).scalar())
}

pub fn kd_loss(student: &Array2<f64>, teacher: &Array2<f64>) -> Result<f64> {
    if student.dim() != teacher.dim() {
        return Err(Error::shape(format!(
            "student {:?} vs teacher {:?}",
            student.dim(),
            teacher.dim()
        )));
    }
    if student.nrows() == 0 {
        return Ok(0.0);
    }
    let diff = teacher - student;
    Ok(diff.mapv(|x| x * x).sum_axis(Axis(1)).mean().unwrap())
}

/// Loss components of one step. `kd` is `None` when no teacher exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub phsc: f64,
    pub pcvae: f64,
    pub kd: Option<f64>,
}

/// `phsc + pcvae + λ_kd · kd`.
pub fn total_loss(c: &LossComponents, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    for (name, v) in [("phsc", Some(c.phsc)), ("pcvae", Some(c.pcvae)), ("kd", c.kd)] {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss term `{name}`")));
            }
        }
    }
    Ok(c.phsc + c.pcvae + c.kd.map_or(0.0, |kd| weights.lambda_kd * kd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one_class_table(p: Array1<f64>) -> PrototypeTable {
        let mut t = PrototypeTable::new(p.len());
        t.set(0, p).unwrap();
        t
    }

    #[test]
    fn kl_examples() {
        let p = array![0.3, -1.0];
        assert_eq!(kl_to_prototype(&p, &array![1.0, 1.0], &p).unwrap(), 0.0);
        assert!((kl_to_prototype(&array![1.0], &array![1.0], &array![0.0]).unwrap() - 0.5).abs() < 1e-15);
        let expected = 0.5 * (4.0 - 1.0 - 2.0 * 2f64.ln());
        assert!((kl_to_prototype(&array![0.0], &array![2.0], &array![0.0]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.8069).abs() < 1e-4);
        assert!(kl_to_prototype(&array![0.0], &array![0.0], &array![0.0]).is_err());
        assert!(kl_to_prototype(&array![0.0, 1.0], &array![1.0], &array![0.0]).is_err());
    }

    #[test]
    fn labeled_embedding_invariant() {
        assert!(LabeledEmbedding::new(array![0.0], Target::Ood, Provenance::Real).is_err());
        assert!(LabeledEmbedding::new(array![0.0], Target::Class(1), Provenance::PseudoOod).is_err());
        assert!(LabeledEmbedding::class(array![0.0], 1, Provenance::Exemplar).is_ok());
    }

    #[test]
    fn pcvae_vanishes_for_exact_reconstruction_at_prior() {
        // Zero encoder: μ = 0, σ = 1, matching a prototype at the origin.
        // Identity decoder with ε = 0 gives ẑ = μ = 0 = z.
        let model = CvaeParams::identity_decoder(2);
        let table = one_class_table(array![0.0, 0.0]);
        let batch = vec![LabeledEmbedding::class(array![0.0, 0.0], 0, Provenance::Real).unwrap()];
        let w = LossWeights::new(10.0, 1.0).unwrap();
        let loss = pcvae_loss_with_noise(&batch, &model, &table, &w, &Array2::zeros((1, 2))).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn pcvae_without_reconstruction_is_mean_kl() {
        let mut rng = crate::rng::stream(4, &[]);
        let model = CvaeParams::init(3, 4, 3, &mut rng);
        let table = PrototypeTable::new(3).register_classes(&[0, 1], 2).unwrap();
        let batch = vec![
            LabeledEmbedding::class(array![0.1, 0.2, -0.3], 0, Provenance::Real).unwrap(),
            LabeledEmbedding::class(array![1.0, -0.5, 0.7], 1, Provenance::PseudoId).unwrap(),
        ];
        let w = LossWeights::new(0.0, 0.0).unwrap();
        let loss = pcvae_loss(&batch, &model, &table, &w, &mut rng).unwrap();
        let mut kl = 0.0;
        for e in &batch {
            let (mu, sigma) = crate::model::cvae_encode(&e.z, &model).unwrap();
            let Target::Class(c) = e.target() else { unreachable!() };
            kl += kl_to_prototype(&mu, &sigma, table.get(c).unwrap()).unwrap();
        }
        assert!((loss - kl / 2.0).abs() < 1e-12);
    }

    /// Scalar trace of a two-sample batch through hand-set parameters.
    #[test]
    fn pcvae_matches_hand_trace() {
        // d = d_l = 1, hidden 1. Encoder: a = relu(2z + 0.5); μ = 0.5a − 0.25;
        // lv = −a + 0.1. Decoder: b = relu(1.5h + 0.2); ẑ = 0.8b − 0.1.
        let mut m = CvaeParams::zeros(1, 1, 1);
        m.enc_w = array![[2.0]];
        m.enc_b = array![[0.5]];
        m.mu_w = array![[0.5]];
        m.mu_b = array![[-0.25]];
        m.logvar_w = array![[-1.0]];
        m.logvar_b = array![[0.1]];
        m.dec_w = array![[1.5]];
        m.dec_b = array![[0.2]];
        m.out_w = array![[0.8]];
        m.out_b = array![[-0.1]];
        let mut table = PrototypeTable::new(1);
        table.set(0, array![0.3]).unwrap();
        table.set(1, array![-0.4]).unwrap();
        let batch = vec![
            LabeledEmbedding::class(array![0.6], 0, Provenance::Real).unwrap(),
            LabeledEmbedding::class(array![-1.0], 1, Provenance::Real).unwrap(),
        ];
        let eps = array![[0.7], [-1.2]];
        let lambda = 10.0;

        let trace = |z: f64, p: f64, e: f64| -> f64 {
            let a = (2.0 * z + 0.5f64).max(0.0);
            let mu = 0.5 * a - 0.25;
            let lv = -a + 0.1;
            let sigma = (0.5 * lv).exp();
            let h = mu + sigma * e;
            let b = (1.5 * h + 0.2f64).max(0.0);
            let zhat = 0.8 * b - 0.1;
            let kl = 0.5 * (sigma * sigma + (mu - p) * (mu - p) - 1.0 - 2.0 * sigma.ln());
            lambda * (z - zhat) * (z - zhat) + kl
        };
        let expected = (trace(0.6, 0.3, 0.7) + trace(-1.0, -0.4, -1.2)) / 2.0;
        let w = LossWeights::new(lambda, 0.0).unwrap();
        let got = pcvae_loss_with_noise(&batch, &m, &table, &w, &eps).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn pcvae_rejects_outliers() {
        let model = CvaeParams::zeros(1, 1, 1);
        let table = one_class_table(array![0.0]);
        let batch = vec![LabeledEmbedding::ood(array![0.0])];
        let w = LossWeights::new(1.0, 1.0).unwrap();
        assert!(pcvae_loss_with_noise(&batch, &model, &table, &w, &Array2::zeros((1, 1))).is_err());
    }

    /// Zero encoder weights with bias `b` give `h(z) = b` for every `z`.
    fn constant_encoder(h: Array1<f64>) -> CvaeParams {
        let mut m = CvaeParams::zeros(h.len(), 1, h.len());
        m.mu_b = h.insert_axis(Axis(0));
        m
    }

    #[test]
    fn phsc_examples() {
        let p = array![0.5, -0.5];
        let table = one_class_table(p.clone());
        let at_proto = constant_encoder(p.clone());
        let pos = vec![LabeledEmbedding::class(array![0.0, 0.0], 0, Provenance::Real).unwrap()];
        let loss = phsc_loss(&pos, &at_proto, &table).unwrap();
        assert!((loss + (1.0 - PROB_EPS).ln()).abs() < 1e-15);
        assert!(loss < 1e-6);

        let far = constant_encoder(array![1e3, 1e3]);
        let ood = vec![LabeledEmbedding::ood(array![0.0, 0.0])];
        assert!(phsc_loss(&ood, &far, &table).unwrap() < 1e-6);

        let r = 2f64.ln().sqrt();
        let half = constant_encoder(array![0.5 + r, -0.5]);
        let loss = phsc_loss(&ood, &half, &table).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert!((loss - 0.6931).abs() < 1e-4);

        assert!(phsc_loss(&ood, &half, &PrototypeTable::new(2)).is_err());
    }

    #[test]
    fn kd_examples() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(kd_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(kd_loss(&array![[1.0]], &array![[3.0]]).unwrap(), 4.0);
        assert!(kd_loss(&a, &array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn kd_matches_elementwise_sum() {
        let mut rng = crate::rng::stream(21, &[]);
        let mut s = Array2::zeros((5, 4));
        let mut t = Array2::zeros((5, 4));
        rng.fill_normal(s.as_slice_mut().unwrap());
        rng.fill_normal(t.as_slice_mut().unwrap());
        let mut acc = 0.0;
        for i in 0..5 {
            for j in 0..4 {
                acc += (t[[i, j]] - s[[i, j]]).powi(2);
            }
        }
        assert!((kd_loss(&s, &t).unwrap() - acc / 5.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::new(10.0, 100.0).unwrap();
        let c = LossComponents { phsc: 1.0, pcvae: 2.0, kd: Some(3.0) };
        assert_eq!(total_loss(&c, &w).unwrap(), 303.0);
        let first = LossComponents { kd: None, ..c };
        assert_eq!(total_loss(&first, &w).unwrap(), 3.0);
        let bad = LossComponents { pcvae: f64::NAN, ..c };
        let err = total_loss(&bad, &w).unwrap_err().to_string();
        assert!(err.contains("pcvae"), "{err}");
        assert!(LossWeights::new(-1.0, 0.0).is_err());
    }
}
