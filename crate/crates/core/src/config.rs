//! TOML run configuration.
//!
//! Every key that changes the science (layout, widths, loss weights, pseudo
//! sample counts, seeds, epochs) is required; only `output_dir` and
//! `min_class_size` have defaults. Unknown keys are rejected.
//!
//! ```toml
//! dataset_dir = "data/photo"   # or a [synthetic] table instead
//! min_class_size = 0
//! output_dir = "runs/photo"
//! seeds = [0, 1, 2, 3, 4]
//! knowns = [3, 2, 2]
//! unknowns = [1, 1, 1]
//! split = [0.4, 0.2, 0.4]
//! epochs = 200
//! learning_rate = 0.001
//! gnn_hidden = 256
//! embed_dim = 256
//! cvae_hidden = 256
//! latent_dim = 256
//! lambda_reconst = 10.0
//! lambda_kd = 100.0
//! beta = 5.0
//! count_id = 300
//! id_count_mode = "total"      # or "per-class"
//! count_ood = 100
//! regen_interval = 20
//! exemplar_method = "cm"       # or "mf"
//! exemplars_per_class = 5
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, retain_large_classes, synthetic_graph, SyntheticSpec};
use crate::engine::{Ablation, EngineConfig, IdCountMode, TaskLayout};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::objectives::LossWeights;
use crate::synth::MixConfig;
use crate::tasks::{ExemplarMethod, SplitFractions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    /// Directory holding `features.txt`, `edges.txt` and `labels.txt`,
    /// relative to the config file.
    #[serde(default)]
    pub dataset_dir: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Drop classes with fewer nodes before building tasks.
    #[serde(default)]
    pub min_class_size: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub knowns: Vec<usize>,
    pub unknowns: Vec<usize>,
    pub split: [f64; 3],
    pub epochs: usize,
    pub learning_rate: f64,
    pub gnn_hidden: usize,
    pub embed_dim: usize,
    pub cvae_hidden: usize,
    pub latent_dim: usize,
    pub lambda_reconst: f64,
    pub lambda_kd: f64,
    pub beta: f64,
    pub count_id: usize,
    pub id_count_mode: IdCountMode,
    pub count_ood: usize,
    pub regen_interval: usize,
    pub exemplar_method: ExemplarMethod,
    pub exemplars_per_class: usize,
}

/// Pulls the key name out of a serde message such as "missing field `x`".
fn key_of(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".into())
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            Error::config(key_of(&msg), msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn split_fractions(&self) -> SplitFractions {
        SplitFractions {
            train: self.split[0],
            val: self.split[1],
            test: self.split[2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset_dir, &self.synthetic) {
            (None, None) => return Err(Error::config("dataset_dir", "either dataset_dir or [synthetic] is required")),
            (Some(_), Some(_)) => return Err(Error::config("synthetic", "give dataset_dir or [synthetic], not both")),
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.knowns.is_empty() {
            return Err(Error::config("knowns", "at least one task is required"));
        }
        if self.knowns.len() != self.unknowns.len() {
            return Err(Error::config("unknowns", "must have one entry per task, like knowns"));
        }
        self.split_fractions()
            .validate()
            .map_err(|e| Error::config("split", e.to_string()))?;
        self.engine_config(self.seeds[0]).validate()
    }

    pub fn engine_config(&self, seed: u64) -> EngineConfig {
        EngineConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            gnn_hidden: self.gnn_hidden,
            embed_dim: self.embed_dim,
            cvae_hidden: self.cvae_hidden,
            latent_dim: self.latent_dim,
            weights: LossWeights {
                lambda_reconst: self.lambda_reconst,
                lambda_kd: self.lambda_kd,
            },
            mix: MixConfig {
                beta: self.beta,
                count_id: self.count_id,
                count_ood: self.count_ood,
                regen_interval: self.regen_interval,
            },
            id_count_mode: self.id_count_mode,
            exemplars_per_class: self.exemplars_per_class,
            exemplar_method: self.exemplar_method,
            seed,
            ablation: None::<Ablation>,
        }
    }

    pub fn layout(&self) -> TaskLayout {
        TaskLayout {
            knowns_per_task: self.knowns.clone(),
            unknowns_per_task: self.unknowns.clone(),
            split_fractions: self.split_fractions(),
        }
    }

    /// Loads or generates the graph; relative paths resolve against
    /// `base_dir`.
    pub fn load_graph(&self, base_dir: &Path) -> Result<Graph> {
        let graph = match (&self.dataset_dir, &self.synthetic) {
            (Some(dir), _) => load_dataset(&base_dir.join(dir))?,
            (None, Some(spec)) => synthetic_graph(spec)?,
            (None, None) => return Err(Error::config("dataset_dir", "no dataset configured")),
        };
        if self.min_class_size > 0 {
            retain_large_classes(&graph, self.min_class_size)
        } else {
            Ok(graph)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EXAMPLE: &str = r#"
seeds = [0, 1]
knowns = [3, 2, 2]
unknowns = [1, 1, 1]
split = [0.4, 0.2, 0.4]
epochs = 10
learning_rate = 0.001
gnn_hidden = 16
embed_dim = 8
cvae_hidden = 8
latent_dim = 8
lambda_reconst = 10.0
lambda_kd = 100.0
beta = 5.0
count_id = 30
id_count_mode = "total"
count_ood = 10
regen_interval = 5
exemplar_method = "cm"
exemplars_per_class = 5

[synthetic]
classes = 8
nodes_per_class = 20
feature_dim = 8
separation = 3.0
noise = 1.0
intra_edges = 2
inter_edges = 1
seed = 0
"#;

    fn key_error(text: &str) -> String {
        match RunConfigFile::parse(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn example_parses_and_round_trips() {
        let c = RunConfigFile::parse(EXAMPLE).unwrap();
        assert_eq!(c.engine_config(1).mix.count_id, 30);
        assert_eq!(RunConfigFile::parse(&c.to_toml()).unwrap(), c);
        let g = c.load_graph(Path::new(".")).unwrap();
        assert_eq!(g.num_nodes(), 160);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_error(&EXAMPLE.replace("learning_rate = 0.001", "learning_rate = -0.5")), "learning_rate");
        assert_eq!(key_error(&EXAMPLE.replace("epochs = 10\n", "")), "epochs");
        assert_eq!(key_error(&EXAMPLE.replace("beta = 5.0", "beta = 5.0\ncolour = 3")), "colour");
        assert_eq!(key_error(&EXAMPLE.replace("seeds = [0, 1]", "seeds = []")), "seeds");
        assert_eq!(key_error(&EXAMPLE.replace("unknowns = [1, 1, 1]", "unknowns = [1]")), "unknowns");
        assert_eq!(key_error(&EXAMPLE.replace("split = [0.4, 0.2, 0.4]", "split = [0.5, 0.5, 0.5]")), "split");
        assert_eq!(key_error(&EXAMPLE.replace("regen_interval = 5", "regen_interval = 0")), "regen_interval");
    }
}
