use std::io::{Cursor, Read};
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use opencil::dataset::{read_npz, retain_large_classes, synthetic_graph, write_dataset, SyntheticSpec};
use opencil::graph::Graph;

use crate::{Classify, CliResult};

/// Public benchmark archives in the compressed-sparse npz layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Public {
    Photo,
    Computers,
    CoraFull,
    CoauthorCs,
}

impl Public {
    pub fn url(self) -> &'static str {
        match self {
            Public::Photo => "https://github.com/shchur/gnn-benchmark/raw/master/data/npz/amazon_electronics_photo.npz",
            Public::Computers => {
                "https://github.com/shchur/gnn-benchmark/raw/master/data/npz/amazon_electronics_computers.npz"
            }
            Public::CoraFull => "https://github.com/shchur/gnn-benchmark/raw/master/data/npz/cora_full.npz",
            Public::CoauthorCs => "https://github.com/shchur/gnn-benchmark/raw/master/data/npz/ms_academic_cs.npz",
        }
    }
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false)]
pub struct Source {
    /// Download a public benchmark.
    #[arg(long, value_enum)]
    dataset: Option<Public>,
    /// Download an npz archive from this URL.
    #[arg(long)]
    url: Option<String>,
    /// Convert a local npz archive.
    #[arg(long)]
    npz: Option<PathBuf>,
    /// Generate a synthetic graph from a TOML file of generator settings.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Generate the 8-class Photo-shaped synthetic graph with this seed.
    #[arg(long)]
    photo_like: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    source: Source,
    /// Directory that receives features.txt, edges.txt and labels.txt.
    #[arg(long)]
    out: PathBuf,
    /// Drop classes with fewer nodes than this.
    #[arg(long, default_value_t = 0)]
    min_class_size: usize,
}

/// Downloads are refused beyond this size.
const MAX_DOWNLOAD: u64 = 1 << 30;

fn download(url: &str) -> CliResult<Graph> {
    let response = ureq::get(url)
        .call()
        .with_context(|| format!("downloading {url}"))
        .runtime()?;
    let mut bytes = Vec::new();
    response
        .into_reader()
        .take(MAX_DOWNLOAD)
        .read_to_end(&mut bytes)
        .with_context(|| format!("reading {url}"))
        .runtime()?;
    read_npz(Cursor::new(bytes)).context("decoding npz").runtime()
}

pub fn cmd_prepare(args: &PrepareArgs) -> CliResult<()> {
    let s = &args.source;
    let graph = if let Some(d) = s.dataset {
        download(d.url())?
    } else if let Some(url) = &s.url {
        download(url)?
    } else if let Some(path) = &s.npz {
        let file = std::fs::File::open(path)
            .with_context(|| format!("opening {}", path.display()))
            .validation()?;
        read_npz(std::io::BufReader::new(file))
            .with_context(|| format!("decoding {}", path.display()))
            .validation()?
    } else if let Some(path) = &s.synthetic {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .validation()?;
        let spec: SyntheticSpec = toml::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .validation()?;
        synthetic_graph(&spec).validation()?
    } else if let Some(seed) = s.photo_like {
        synthetic_graph(&SyntheticSpec::photo_like(seed)).validation()?
    } else {
        return Err(anyhow!("no data source given")).validation();
    };
    let graph = if args.min_class_size > 0 {
        retain_large_classes(&graph, args.min_class_size).runtime()?
    } else {
        graph
    };
    write_dataset(&graph, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))
        .runtime()?;
    println!(
        "wrote {} nodes, {} edges, {} features to {}",
        graph.num_nodes(),
        graph.edges().len(),
        graph.feature_dim(),
        args.out.display()
    );
    Ok(())
}
