//! Pseudo in-distribution samples decoded from class priors and pseudo
//! outliers mixed from pairs of differently labeled embeddings.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CvaeParams, PrototypeTable};
use crate::objectives::{LabeledEmbedding, Provenance, Target};
use crate::rng::{NormalSource, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    /// Shape of the symmetric `Beta(β, β)` mixing distribution.
    pub beta: f64,
    /// Pseudo-ID samples generated at the start of each task.
    pub count_id: usize,
    /// Pseudo-OOD samples per refresh.
    pub count_ood: usize,
    /// Epochs between pseudo-OOD refreshes.
    pub regen_interval: usize,
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if self.regen_interval == 0 {
            return Err(Error::invalid("regen interval must be at least 1"));
        }
        Ok(())
    }
}

/// Draws `h ~ N(p_c, I)` and decodes it, `total` samples spread as evenly as
/// possible over `old_classes`; leftover samples go to the lowest class ids.
pub fn generate_pseudo_id(
    table: &PrototypeTable,
    old_classes: &[i64],
    total: usize,
    model: &CvaeParams,
    rng: &mut impl NormalSource,
) -> Result<Vec<LabeledEmbedding>> {
    let classes: Vec<i64> = old_classes.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if let Some(&c) = classes.iter().find(|&&c| !table.contains(c)) {
        return Err(Error::UnknownClass(c));
    }
    if total == 0 {
        return Ok(Vec::new());
    }
    if classes.is_empty() {
        return Err(Error::invalid("pseudo-ID samples requested without old classes"));
    }
    let (base, extra) = (total / classes.len(), total % classes.len());
    let dim = table.dim();
    let mut out = Vec::with_capacity(total);
    for (i, &c) in classes.iter().enumerate() {
        let n = base + usize::from(i < extra);
        if n == 0 {
            continue;
        }
        let p = table.get(c).expect("checked above");
        let mut h = Array2::zeros((n, dim));
        rng.fill_normal(h.as_slice_mut().expect("standard layout"));
        h += p;
        let decoded = model.decode_batch(&h)?;
        for row in decoded.outer_iter() {
            out.push(LabeledEmbedding::class(row.to_owned(), c, Provenance::PseudoId)?);
        }
    }
    Ok(out)
}

/// `α · z1 + (1 − α) · z2`.
pub fn mix_pair(z1: &Array1<f64>, z2: &Array1<f64>, alpha: f64) -> Result<LabeledEmbedding> {
    if z1.len() != z2.len() {
        return Err(Error::shape("mix_pair needs equal lengths"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("mixing coefficient {alpha} outside [0, 1]")));
    }
    Ok(LabeledEmbedding::ood(z1 * alpha + z2 * (1.0 - alpha)))
}

/// Which pool members produced a mixed sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixRecord {
    pub first: usize,
    pub second: usize,
    pub alpha: f64,
}

/// Mixes `count` outliers from uniformly drawn pool pairs with different
/// class labels, `α ~ Beta(β, β)`.
pub fn generate_pseudo_ood(
    pool: &[LabeledEmbedding],
    count: usize,
    config: &MixConfig,
    rng: &mut SeededRng,
) -> Result<Vec<LabeledEmbedding>> {
    Ok(generate_pseudo_ood_traced(pool, count, config, rng)?
        .into_iter()
        .map(|(e, _)| e)
        .collect())
}

/// [`generate_pseudo_ood`], also returning the pair behind each sample.
pub fn generate_pseudo_ood_traced(
    pool: &[LabeledEmbedding],
    count: usize,
    config: &MixConfig,
    rng: &mut SeededRng,
) -> Result<Vec<(LabeledEmbedding, MixRecord)>> {
    config.validate()?;
    let labeled: Vec<(usize, i64)> = pool
        .iter()
        .enumerate()
        .filter_map(|(i, e)| match e.target() {
            Target::Class(c) => Some((i, c)),
            Target::Ood => None,
        })
        .collect();
    let distinct: BTreeSet<i64> = labeled.iter().map(|&(_, c)| c).collect();
    if distinct.len() < 2 {
        return Err(Error::invalid("mixing pool needs at least two distinct classes"));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let beta = Beta::new(config.beta, config.beta).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let (i, ci) = labeled[rng.gen_range(0..labeled.len())];
        let (j, cj) = labeled[rng.gen_range(0..labeled.len())];
        if ci == cj {
            continue;
        }
        let alpha: f64 = beta.sample(rng);
        let mixed = mix_pair(&pool[i].z, &pool[j].z, alpha)?;
        out.push((
            mixed,
            MixRecord {
                first: i,
                second: j,
                alpha,
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, ZeroNoise};
    use ndarray::array;

    fn table() -> PrototypeTable {
        let mut t = PrototypeTable::new(2);
        t.set(0, array![1.0, 2.0]).unwrap();
        t.set(1, array![-3.0, 0.5]).unwrap();
        t.set(2, array![0.0, 0.0]).unwrap();
        t
    }

    #[test]
    fn zero_total_is_empty() {
        let m = CvaeParams::identity_decoder(2);
        assert!(generate_pseudo_id(&table(), &[0, 1], 0, &m, &mut ZeroNoise).unwrap().is_empty());
    }

    #[test]
    fn zero_noise_with_identity_decoder_returns_prototypes() {
        let m = CvaeParams::identity_decoder(2);
        let t = table();
        let out = generate_pseudo_id(&t, &[1, 0], 4, &m, &mut ZeroNoise).unwrap();
        assert_eq!(out.len(), 4);
        for e in &out {
            let Target::Class(c) = e.target() else { panic!() };
            assert_eq!(&e.z, t.get(c).unwrap());
            assert_eq!(e.provenance(), Provenance::PseudoId);
        }
    }

    #[test]
    fn remainder_goes_to_lowest_ids() {
        let m = CvaeParams::identity_decoder(2);
        let out = generate_pseudo_id(&table(), &[2, 1, 0], 5, &m, &mut ZeroNoise).unwrap();
        let count = |c| out.iter().filter(|e| e.target() == Target::Class(c)).count();
        assert_eq!((count(0), count(1), count(2)), (2, 2, 1));
        assert!(matches!(
            generate_pseudo_id(&table(), &[9], 3, &m, &mut ZeroNoise),
            Err(Error::UnknownClass(9))
        ));
    }

    #[test]
    fn pseudo_id_is_seeded() {
        let mut rng = stream(3, &[]);
        let m = CvaeParams::init(2, 4, 2, &mut rng);
        let a = generate_pseudo_id(&table(), &[0, 1], 7, &m, &mut stream(5, &[])).unwrap();
        let b = generate_pseudo_id(&table(), &[0, 1], 7, &m, &mut stream(5, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mix_pair_examples() {
        let (a, b) = (array![0.0, 0.0], array![2.0, 4.0]);
        assert_eq!(mix_pair(&a, &b, 1.0).unwrap().z, a);
        assert_eq!(mix_pair(&a, &b, 0.0).unwrap().z, b);
        let m = mix_pair(&a, &b, 0.5).unwrap();
        assert_eq!(m.z, array![1.0, 2.0]);
        assert_eq!(m.target(), Target::Ood);
        assert!(mix_pair(&a, &b, 1.5).is_err());
        assert!(mix_pair(&a, &array![1.0], 0.5).is_err());
    }

    fn two_point_pool() -> Vec<LabeledEmbedding> {
        vec![
            LabeledEmbedding::class(array![0.0, 0.0], 0, Provenance::Real).unwrap(),
            LabeledEmbedding::class(array![1.0, 1.0], 1, Provenance::PseudoId).unwrap(),
        ]
    }

    #[test]
    fn ood_outputs_lie_on_the_segment() {
        let cfg = MixConfig { beta: 5.0, count_id: 0, count_ood: 50, regen_interval: 1 };
        let out = generate_pseudo_ood(&two_point_pool(), 50, &cfg, &mut stream(1, &[])).unwrap();
        assert_eq!(out.len(), 50);
        for e in out {
            assert_eq!(e.z[0], e.z[1]);
            assert!((0.0..=1.0).contains(&e.z[0]));
            assert_eq!(e.provenance(), Provenance::PseudoOod);
        }
        assert!(generate_pseudo_ood(&two_point_pool(), 0, &cfg, &mut stream(1, &[])).unwrap().is_empty());
    }

    #[test]
    fn single_class_pool_is_rejected() {
        let cfg = MixConfig { beta: 1.0, count_id: 0, count_ood: 1, regen_interval: 1 };
        let pool = vec![LabeledEmbedding::class(array![0.0], 3, Provenance::Real).unwrap(); 4];
        assert!(generate_pseudo_ood(&pool, 5, &cfg, &mut stream(1, &[])).is_err());
        let bad = MixConfig { beta: 0.0, ..cfg };
        assert!(bad.validate().is_err());
    }
}
