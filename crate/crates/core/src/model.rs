//! Prototypical conditional VAE over node embeddings and the class
//! prototype table.
//!
//! The posterior `q(h | z)` is a diagonal Gaussian produced by a two-layer
//! perceptron; the decoder maps a latent `h` back to an embedding with
//! another two-layer perceptron. Neither network sees the class: the class
//! enters only through the prior `N(p_c, I)` centred on its prototype.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{glorot, EncoderParams};
use crate::rng::{self, NormalSource, SeededRng};
use crate::tape::{Tape, Var};

/// Bounds applied to the posterior log-variance before exponentiation.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeParams {
    pub enc_w: Array2<f64>,
    pub enc_b: Array2<f64>,
    pub mu_w: Array2<f64>,
    pub mu_b: Array2<f64>,
    pub logvar_w: Array2<f64>,
    pub logvar_b: Array2<f64>,
    pub dec_w: Array2<f64>,
    pub dec_b: Array2<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
}

impl CvaeParams {
    /// Glorot-initialized weights, zero biases.
    pub fn init(embed_dim: usize, hidden: usize, latent: usize, rng: &mut SeededRng) -> Self {
        Self {
            enc_w: glorot(embed_dim, hidden, rng),
            enc_b: Array2::zeros((1, hidden)),
            mu_w: glorot(hidden, latent, rng),
            mu_b: Array2::zeros((1, latent)),
            logvar_w: glorot(hidden, latent, rng),
            logvar_b: Array2::zeros((1, latent)),
            dec_w: glorot(latent, hidden, rng),
            dec_b: Array2::zeros((1, hidden)),
            out_w: glorot(hidden, embed_dim, rng),
            out_b: Array2::zeros((1, embed_dim)),
        }
    }

    pub fn zeros(embed_dim: usize, hidden: usize, latent: usize) -> Self {
        Self {
            enc_w: Array2::zeros((embed_dim, hidden)),
            enc_b: Array2::zeros((1, hidden)),
            mu_w: Array2::zeros((hidden, latent)),
            mu_b: Array2::zeros((1, latent)),
            logvar_w: Array2::zeros((hidden, latent)),
            logvar_b: Array2::zeros((1, latent)),
            dec_w: Array2::zeros((latent, hidden)),
            dec_b: Array2::zeros((1, hidden)),
            out_w: Array2::zeros((hidden, embed_dim)),
            out_b: Array2::zeros((1, embed_dim)),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.enc_w.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_w.ncols()
    }

    pub fn tensors(&self) -> [&Array2<f64>; 10] {
        [
            &self.enc_w,
            &self.enc_b,
            &self.mu_w,
            &self.mu_b,
            &self.logvar_w,
            &self.logvar_b,
            &self.dec_w,
            &self.dec_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 10] {
        [
            &mut self.enc_w,
            &mut self.enc_b,
            &mut self.mu_w,
            &mut self.mu_b,
            &mut self.logvar_w,
            &mut self.logvar_b,
            &mut self.dec_w,
            &mut self.dec_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub const TENSOR_NAMES: [&'static str; 10] = [
        "cvae.enc_w",
        "cvae.enc_b",
        "cvae.mu_w",
        "cvae.mu_b",
        "cvae.logvar_w",
        "cvae.logvar_b",
        "cvae.dec_w",
        "cvae.dec_b",
        "cvae.out_w",
        "cvae.out_b",
    ];

    /// Checks that all tensors chain together.
    pub fn validate(&self) -> Result<()> {
        let (d, hid) = self.enc_w.dim();
        let lat = self.mu_w.ncols();
        let (dec_lat, dec_hid) = self.dec_w.dim();
        let expect = [
            (self.enc_b.dim(), (1, hid)),
            (self.mu_w.dim(), (hid, lat)),
            (self.mu_b.dim(), (1, lat)),
            (self.logvar_w.dim(), (hid, lat)),
            (self.logvar_b.dim(), (1, lat)),
            (self.dec_w.dim(), (lat, dec_hid)),
            (self.dec_b.dim(), (1, dec_hid)),
            (self.out_w.dim(), (dec_hid, d)),
            (self.out_b.dim(), (1, d)),
        ];
        if dec_lat != lat {
            return Err(Error::shape("decoder input width differs from latent width"));
        }
        for (i, (got, want)) in expect.iter().enumerate() {
            if got != want {
                return Err(Error::shape(format!(
                    "{} has shape {got:?}, expected {want:?}",
                    Self::TENSOR_NAMES[i + 1]
                )));
            }
        }
        if self.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("cvae parameters".into()));
        }
        Ok(())
    }

    /// Zero encoder and a decoder computing `relu(h) − relu(−h) = h`
    /// exactly, with hidden width `2·dim`.
    pub fn identity_decoder(dim: usize) -> Self {
        let mut p = Self::zeros(dim, 2 * dim, dim);
        let eye = Array2::<f64>::eye(dim);
        let neg = -&eye;
        p.dec_w = ndarray::concatenate(Axis(1), &[eye.view(), neg.view()]).expect("equal heights");
        p.out_w = ndarray::concatenate(Axis(0), &[eye.view(), neg.view()]).expect("equal widths");
        p
    }

    /// Posterior means and standard deviations for each row of `z`.
    pub fn encode_batch(&self, z: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        check_input(z, self.embed_dim(), "cvae_encode")?;
        let hidden = affine(z, &self.enc_w, &self.enc_b).mapv(|x| x.max(0.0));
        let mu = affine(&hidden, &self.mu_w, &self.mu_b);
        let sigma = affine(&hidden, &self.logvar_w, &self.logvar_b)
            .mapv(|lv| (0.5 * lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).exp());
        Ok((mu, sigma))
    }

    /// Posterior means `h(z) = μ(z)` for each row of `z`.
    pub fn posterior_mean(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        check_input(z, self.embed_dim(), "cvae_encode")?;
        let hidden = affine(z, &self.enc_w, &self.enc_b).mapv(|x| x.max(0.0));
        Ok(affine(&hidden, &self.mu_w, &self.mu_b))
    }

    pub fn decode_batch(&self, h: &Array2<f64>) -> Result<Array2<f64>> {
        check_input(h, self.latent_dim(), "cvae_decode")?;
        let hidden = affine(h, &self.dec_w, &self.dec_b).mapv(|x| x.max(0.0));
        Ok(affine(&hidden, &self.out_w, &self.out_b))
    }

    /// Registers every tensor as a parameter on `tape`.
    pub fn on_tape<'t>(&self, tape: &'t Tape) -> CvaeVars<'t> {
        self.vars_with(|a| tape.param(a.clone()))
    }

    /// Registers every tensor as a constant on `tape`.
    pub fn on_tape_frozen<'t>(&self, tape: &'t Tape) -> CvaeVars<'t> {
        self.vars_with(|a| tape.constant(a.clone()))
    }

    fn vars_with<'t>(&self, mut f: impl FnMut(&Array2<f64>) -> Var<'t>) -> CvaeVars<'t> {
        CvaeVars {
            enc_w: f(&self.enc_w),
            enc_b: f(&self.enc_b),
            mu_w: f(&self.mu_w),
            mu_b: f(&self.mu_b),
            logvar_w: f(&self.logvar_w),
            logvar_b: f(&self.logvar_b),
            dec_w: f(&self.dec_w),
            dec_b: f(&self.dec_b),
            out_w: f(&self.out_w),
            out_b: f(&self.out_b),
        }
    }
}

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + b
}

fn check_input(x: &Array2<f64>, width: usize, what: &str) -> Result<()> {
    if x.ncols() != width {
        return Err(Error::shape(format!("{what}: input width {} != {width}", x.ncols())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} input")));
    }
    Ok(())
}

/// CVAE tensors registered on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct CvaeVars<'t> {
    pub enc_w: Var<'t>,
    pub enc_b: Var<'t>,
    pub mu_w: Var<'t>,
    pub mu_b: Var<'t>,
    pub logvar_w: Var<'t>,
    pub logvar_b: Var<'t>,
    pub dec_w: Var<'t>,
    pub dec_b: Var<'t>,
    pub out_w: Var<'t>,
    pub out_b: Var<'t>,
}

impl<'t> CvaeVars<'t> {
    pub fn all(&self) -> [Var<'t>; 10] {
        [
            self.enc_w,
            self.enc_b,
            self.mu_w,
            self.mu_b,
            self.logvar_w,
            self.logvar_b,
            self.dec_w,
            self.dec_b,
            self.out_w,
            self.out_b,
        ]
    }

    /// Posterior mean and clamped log-variance.
    pub fn encode(&self, z: Var<'t>) -> (Var<'t>, Var<'t>) {
        let hidden = z.matmul(self.enc_w).add_row(self.enc_b).relu();
        let mu = hidden.matmul(self.mu_w).add_row(self.mu_b);
        let logvar = hidden
            .matmul(self.logvar_w)
            .add_row(self.logvar_b)
            .clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        (mu, logvar)
    }

    pub fn posterior_mean(&self, z: Var<'t>) -> Var<'t> {
        z.matmul(self.enc_w)
            .add_row(self.enc_b)
            .relu()
            .matmul(self.mu_w)
            .add_row(self.mu_b)
    }

    pub fn decode(&self, h: Var<'t>) -> Var<'t> {
        h.matmul(self.dec_w)
            .add_row(self.dec_b)
            .relu()
            .matmul(self.out_w)
            .add_row(self.out_b)
    }
}

/// `(μ(z), σ(z))` of the posterior for a single embedding.
pub fn cvae_encode(z: &Array1<f64>, params: &CvaeParams) -> Result<(Array1<f64>, Array1<f64>)> {
    let (mu, sigma) = params.encode_batch(&z.clone().insert_axis(Axis(0)))?;
    Ok((mu.row(0).to_owned(), sigma.row(0).to_owned()))
}

/// Reparameterized draw `μ + σ ⊙ ε`.
pub fn sample_latent(mu: &Array1<f64>, sigma: &Array1<f64>, eps: &Array1<f64>) -> Result<Array1<f64>> {
    if mu.len() != sigma.len() || mu.len() != eps.len() {
        return Err(Error::shape(format!(
            "sample_latent lengths {}, {}, {}",
            mu.len(),
            sigma.len(),
            eps.len()
        )));
    }
    Ok(mu + &(sigma * eps))
}

pub fn cvae_decode(h: &Array1<f64>, params: &CvaeParams) -> Result<Array1<f64>> {
    let out = params.decode_batch(&h.clone().insert_axis(Axis(0)))?;
    Ok(out.row(0).to_owned())
}

/// One learnable prototype per known class, in latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    dim: usize,
    entries: BTreeMap<i64, Array1<f64>>,
}

impl PrototypeTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, class: i64) -> bool {
        self.entries.contains_key(&class)
    }

    /// Class ids, ascending.
    pub fn classes(&self) -> Vec<i64> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, class: i64) -> Option<&Array1<f64>> {
        self.entries.get(&class)
    }

    /// Inserts or replaces a prototype.
    pub fn set(&mut self, class: i64, p: Array1<f64>) -> Result<()> {
        if p.len() != self.dim {
            return Err(Error::shape(format!("prototype of width {} in a {}-wide table", p.len(), self.dim)));
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("prototype of class {class}")));
        }
        self.entries.insert(class, p);
        Ok(())
    }

    /// A copy with `new_classes` added. Each new prototype is drawn from a
    /// standard normal scaled by `1/√dim`, keyed by `seed` and the class id.
    pub fn register_classes(&self, new_classes: &[i64], seed: u64) -> Result<PrototypeTable> {
        let mut out = self.clone();
        for &c in new_classes {
            if out.contains(c) {
                return Err(Error::DuplicateClass(c));
            }
            let mut rng = rng::stream(seed, &[rng::tag::PROTOTYPE, c as u64]);
            let scale = 1.0 / (self.dim as f64).sqrt();
            let mut v = vec![0.0; self.dim];
            rng.fill_normal(&mut v);
            out.entries.insert(c, Array1::from(v) * scale);
        }
        Ok(out)
    }

    /// Rows of `classes` stacked into a matrix.
    pub fn matrix(&self, classes: &[i64]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((classes.len(), self.dim));
        for (i, c) in classes.iter().enumerate() {
            let p = self.entries.get(c).ok_or(Error::UnknownClass(*c))?;
            out.row_mut(i).assign(p);
        }
        Ok(out)
    }

    /// Writes back rows produced by [`matrix`](Self::matrix).
    pub fn update_from(&mut self, classes: &[i64], rows: &Array2<f64>) -> Result<()> {
        if rows.nrows() != classes.len() {
            return Err(Error::shape("row count differs from class count"));
        }
        for (c, row) in classes.iter().zip(rows.outer_iter()) {
            if !self.contains(*c) {
                return Err(Error::UnknownClass(*c));
            }
            self.set(*c, row.to_owned())?;
        }
        Ok(())
    }
}

/// Free function form of [`PrototypeTable::register_classes`].
pub fn register_classes(table: &PrototypeTable, new_classes: &[i64], seed: u64) -> Result<PrototypeTable> {
    table.register_classes(new_classes, seed)
}

/// Frozen copy of the encoders at the end of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot {
    encoder: EncoderParams,
    cvae: CvaeParams,
    task_index: usize,
}

impl TeacherSnapshot {
    pub fn capture(encoder: &EncoderParams, cvae: &CvaeParams, task_index: usize) -> Self {
        Self {
            encoder: encoder.clone(),
            cvae: cvae.clone(),
            task_index,
        }
    }

    pub fn encoder(&self) -> &EncoderParams {
        &self.encoder
    }

    pub fn cvae(&self) -> &CvaeParams {
        &self.cvae
    }

    /// Task at whose end the snapshot was taken.
    pub fn task_index(&self) -> usize {
        self.task_index
    }
}
