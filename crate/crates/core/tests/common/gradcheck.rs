//! Central finite differences against the tape's reverse-mode gradients.
//!
//! Numerical gradients are taken through the value-level loss functions
//! (`kl_to_prototype`, `pcvae_loss_with_noise`, `phsc_loss`, `kd_loss`,
//! `encode_nodes`), never through the tape, so the two sides share no code
//! beyond the forward arithmetic of the network layers.

use ndarray::{Array1, Array2};
use opencil::graph::{encode_nodes, EncoderParams, Graph, PreparedGraph};
use opencil::model::{CvaeParams, PrototypeTable};
use opencil::objectives::{
    self, kd_loss, kl_to_prototype, pcvae_loss_with_noise, phsc_loss, LabeledEmbedding, LossComponents, LossWeights,
    Provenance, Target,
};
use opencil::rng::{stream, NormalSource, SeededRng};
use opencil::tape::{Tape, Var};
use rand::Rng;

pub const STEP: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both are negligible.
pub fn rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let norm = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        return 0.0;
    }
    norm(&(analytic - numeric)) / scale
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Array2<f64>, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + STEP;
        let up = f(&probe);
        probe[[r, c]] = orig - STEP;
        let down = f(&probe);
        probe[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * STEP);
    }
    g
}

fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Array2<f64> {
    let mut a = Array2::zeros((rows, cols));
    rng.fill_normal(a.as_slice_mut().unwrap());
    a * scale
}

pub const CLASSES: [i64; 3] = [0, 1, 2];

/// A small random problem: 12-node graph with 5 features, embedding and
/// latent width 8, three classes.
pub struct Fixture {
    pub graph: Graph,
    pub encoder: EncoderParams,
    pub cvae: CvaeParams,
    pub table: PrototypeTable,
    /// Labeled node ids and their classes.
    pub ids: Vec<usize>,
    pub labels: Vec<i64>,
    /// Embeddings standing in for pseudo outliers.
    pub ood: Array2<f64>,
    pub eps: Array2<f64>,
    pub teacher: Array2<f64>,
    pub weights: LossWeights,
}

impl Fixture {
    pub fn random(seed: u64) -> Self {
        let mut rng = stream(seed, &[0xF1]);
        let n = 12;
        let features = normal_matrix(n, 5, 1.0, &mut rng);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.gen_bool(0.25) {
                    edges.push((u, v));
                }
            }
        }
        let labels_all: Vec<i64> = (0..n).map(|v| (v % 3) as i64).collect();
        let graph = Graph::new(features, edges, labels_all.clone()).unwrap();
        let encoder = EncoderParams::init(5, 8, 8, &mut rng);
        let cvae = CvaeParams::init(8, 8, 8, &mut rng);
        let table = PrototypeTable::new(8).register_classes(&CLASSES, seed).unwrap();
        let ids: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.6)).collect();
        let ids = if ids.len() < 3 { vec![0, 1, 2] } else { ids };
        let labels = ids.iter().map(|&v| labels_all[v]).collect();
        let ood = normal_matrix(2, 8, 1.0, &mut rng);
        let eps = normal_matrix(ids.len(), 8, 1.0, &mut rng);
        let teacher = normal_matrix(ids.len(), 8, 0.5, &mut rng);
        Self {
            graph,
            encoder,
            cvae,
            table,
            ids,
            labels,
            ood,
            eps,
            teacher,
            weights: LossWeights::new(rng.gen_range(0.5..10.0), rng.gen_range(0.5..100.0)).unwrap(),
        }
    }

    pub fn class_rows(&self) -> Vec<usize> {
        self.labels.iter().map(|c| CLASSES.iter().position(|x| x == c).unwrap()).collect()
    }

    pub fn labeled(&self, z: &Array2<f64>) -> Vec<LabeledEmbedding> {
        z.outer_iter()
            .zip(&self.labels)
            .map(|(row, &c)| LabeledEmbedding::class(row.to_owned(), c, Provenance::Real).unwrap())
            .collect()
    }

    /// Labeled samples followed by the outliers.
    pub fn mixed(&self, z: &Array2<f64>) -> Vec<LabeledEmbedding> {
        let mut batch = self.labeled(z);
        batch.extend(self.ood.outer_iter().map(|r| LabeledEmbedding::ood(r.to_owned())));
        batch
    }

    pub fn embeddings(&self, encoder: &EncoderParams) -> Array2<f64> {
        encode_nodes(&self.graph, encoder, &self.ids).unwrap()
    }

    pub fn protos(&self) -> Array2<f64> {
        self.table.matrix(&CLASSES).unwrap()
    }
}

fn table_from(m: &Array2<f64>) -> PrototypeTable {
    let mut t = PrototypeTable::new(m.ncols());
    for (i, &c) in CLASSES.iter().enumerate() {
        t.set(c, m.row(i).to_owned()).unwrap();
    }
    t
}

fn with_tensor(cvae: &CvaeParams, k: usize, value: &Array2<f64>) -> CvaeParams {
    let mut out = cvae.clone();
    *out.tensors_mut()[k] = value.clone();
    out
}

/// Largest relative error over parameter groups, with the group name.
#[derive(Debug, Clone)]
pub struct GradResult {
    pub worst: f64,
    pub group: String,
}

impl GradResult {
    fn new() -> Self {
        Self {
            worst: 0.0,
            group: String::new(),
        }
    }

    fn record(&mut self, group: &str, analytic: &Array2<f64>, numeric: &Array2<f64>) {
        let e = rel_err(analytic, numeric);
        if e >= self.worst {
            self.worst = e;
            self.group = group.to_string();
        }
    }
}

/// KL of several rows against their prototypes, in `μ`, `log σ²` and `p`.
pub fn check_kl(seed: u64) -> GradResult {
    let mut rng = stream(seed, &[0xF2]);
    let mu = normal_matrix(4, 8, 1.0, &mut rng);
    let logvar = normal_matrix(4, 8, 0.7, &mut rng);
    let p = normal_matrix(4, 8, 1.0, &mut rng);
    let value = |mu: &Array2<f64>, lv: &Array2<f64>, p: &Array2<f64>| -> f64 {
        (0..mu.nrows())
            .map(|i| {
                let sigma: Array1<f64> = lv.row(i).mapv(|v| (0.5 * v).exp());
                kl_to_prototype(&mu.row(i).to_owned(), &sigma, &p.row(i).to_owned()).unwrap()
            })
            .sum()
    };
    let tape = Tape::new();
    let (vm, vl, vp) = (tape.param(mu.clone()), tape.param(logvar.clone()), tape.param(p.clone()));
    let grads = tape.gradients(objectives::kl_rows(vm, vl, vp).sum());
    let mut out = GradResult::new();
    out.record("mu", &grads.get_or_zeros(vm), &numeric_grad(&mu, |x| value(x, &logvar, &p)));
    out.record("logvar", &grads.get_or_zeros(vl), &numeric_grad(&logvar, |x| value(&mu, x, &p)));
    out.record("prototype", &grads.get_or_zeros(vp), &numeric_grad(&p, |x| value(&mu, &logvar, x)));
    out
}

pub fn check_pcvae(fx: &Fixture) -> GradResult {
    let z = fx.embeddings(&fx.encoder);
    let value = |z: &Array2<f64>, cvae: &CvaeParams, protos: &Array2<f64>| {
        pcvae_loss_with_noise(&fx.labeled(z), cvae, &table_from(protos), &fx.weights, &fx.eps).unwrap()
    };
    let tape = Tape::new();
    let vz = tape.param(z.clone());
    let cv = fx.cvae.on_tape(&tape);
    let vp = tape.param(fx.protos());
    let loss = objectives::pcvae_on_tape(vz, &fx.class_rows(), &cv, vp, &fx.eps, fx.weights.lambda_reconst);
    let grads = tape.gradients(loss);
    let mut out = GradResult::new();
    let protos = fx.protos();
    out.record("z", &grads.get_or_zeros(vz), &numeric_grad(&z, |x| value(x, &fx.cvae, &protos)));
    out.record("prototypes", &grads.get_or_zeros(vp), &numeric_grad(&protos, |x| value(&z, &fx.cvae, x)));
    for (k, (var, name)) in cv.all().iter().zip(CvaeParams::TENSOR_NAMES).enumerate() {
        let base = fx.cvae.tensors()[k].clone();
        let numeric = numeric_grad(&base, |x| value(&z, &with_tensor(&fx.cvae, k, x), &protos));
        out.record(name, &grads.get_or_zeros(*var), &numeric);
    }
    out
}

pub fn check_phsc(fx: &Fixture) -> GradResult {
    let z = fx.embeddings(&fx.encoder);
    let value = |z: &Array2<f64>, cvae: &CvaeParams, protos: &Array2<f64>| {
        phsc_loss(&fx.mixed(z), cvae, &table_from(protos)).unwrap()
    };
    let targets: Vec<Target> = fx.mixed(&z).iter().map(|e| e.target()).collect();
    let rows = objectives::target_rows(&targets, &CLASSES).unwrap();
    let tape = Tape::new();
    let vz = tape.param(z.clone());
    let cv = fx.cvae.on_tape(&tape);
    let vp = tape.param(fx.protos());
    let vz_all = Var::concat_rows(&[vz, tape.constant(fx.ood.clone())]);
    let grads = tape.gradients(objectives::phsc_on_tape(vz_all, &rows, &cv, vp));
    let mut out = GradResult::new();
    let protos = fx.protos();
    out.record("z", &grads.get_or_zeros(vz), &numeric_grad(&z, |x| value(x, &fx.cvae, &protos)));
    out.record("prototypes", &grads.get_or_zeros(vp), &numeric_grad(&protos, |x| value(&z, &fx.cvae, x)));
    for (k, (var, name)) in cv.all().iter().zip(CvaeParams::TENSOR_NAMES).enumerate() {
        let base = fx.cvae.tensors()[k].clone();
        let numeric = numeric_grad(&base, |x| value(&z, &with_tensor(&fx.cvae, k, x), &protos));
        out.record(name, &grads.get_or_zeros(*var), &numeric);
    }
    out
}

pub fn check_kd(fx: &Fixture) -> GradResult {
    let z = fx.embeddings(&fx.encoder);
    let tape = Tape::new();
    let (vs, vt) = (tape.param(z.clone()), tape.param(fx.teacher.clone()));
    let grads = tape.gradients(objectives::kd_on_tape(vs, vt));
    let mut out = GradResult::new();
    out.record("student", &grads.get_or_zeros(vs), &numeric_grad(&z, |x| kd_loss(x, &fx.teacher).unwrap()));
    out.record("teacher", &grads.get_or_zeros(vt), &numeric_grad(&fx.teacher, |x| kd_loss(&z, x).unwrap()));
    out
}

/// `phsc + pcvae + λ_kd · kd` with embeddings produced by the graph encoder,
/// in every parameter group including the encoder weights.
pub fn check_total(fx: &Fixture) -> GradResult {
    let value = |enc: &EncoderParams, cvae: &CvaeParams, protos: &Array2<f64>| {
        let z = fx.embeddings(enc);
        let table = table_from(protos);
        let c = LossComponents {
            phsc: phsc_loss(&fx.mixed(&z), cvae, &table).unwrap(),
            pcvae: pcvae_loss_with_noise(&fx.labeled(&z), cvae, &table, &fx.weights, &fx.eps).unwrap(),
            kd: Some(kd_loss(&z, &fx.teacher).unwrap()),
        };
        objectives::total_loss(&c, &fx.weights).unwrap()
    };
    let targets: Vec<Target> = fx.mixed(&fx.embeddings(&fx.encoder)).iter().map(|e| e.target()).collect();
    let rows = objectives::target_rows(&targets, &CLASSES).unwrap();

    let tape = Tape::new();
    let prepared = PreparedGraph::new(&fx.graph).unwrap();
    let w1 = tape.param(fx.encoder.w1.clone());
    let w2 = tape.param(fx.encoder.w2.clone());
    let cv = fx.cvae.on_tape(&tape);
    let vp = tape.param(fx.protos());
    let z = prepared.encode_all(&tape, w1, w2).gather_rows(&fx.ids);
    let z_all = Var::concat_rows(&[z, tape.constant(fx.ood.clone())]);
    let pcvae = objectives::pcvae_on_tape(z, &fx.class_rows(), &cv, vp, &fx.eps, fx.weights.lambda_reconst);
    let phsc = objectives::phsc_on_tape(z_all, &rows, &cv, vp);
    let kd = objectives::kd_on_tape(z, tape.constant(fx.teacher.clone()));
    let total = phsc.add(pcvae).add(kd.scale(fx.weights.lambda_kd));
    let grads = tape.gradients(total);

    let mut out = GradResult::new();
    let protos = fx.protos();
    let enc_with = |w1: &Array2<f64>, w2: &Array2<f64>| EncoderParams::new(w1.clone(), w2.clone()).unwrap();
    out.record(
        "encoder.w1",
        &grads.get_or_zeros(w1),
        &numeric_grad(&fx.encoder.w1, |x| value(&enc_with(x, &fx.encoder.w2), &fx.cvae, &protos)),
    );
    out.record(
        "encoder.w2",
        &grads.get_or_zeros(w2),
        &numeric_grad(&fx.encoder.w2, |x| value(&enc_with(&fx.encoder.w1, x), &fx.cvae, &protos)),
    );
    out.record(
        "prototypes",
        &grads.get_or_zeros(vp),
        &numeric_grad(&protos, |x| value(&fx.encoder, &fx.cvae, x)),
    );
    for (k, (var, name)) in cv.all().iter().zip(CvaeParams::TENSOR_NAMES).enumerate() {
        let base = fx.cvae.tensors()[k].clone();
        let numeric = numeric_grad(&base, |x| value(&fx.encoder, &with_tensor(&fx.cvae, k, x), &protos));
        out.record(name, &grads.get_or_zeros(*var), &numeric);
    }
    out
}
