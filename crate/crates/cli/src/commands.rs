use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use polybind::config::RunConfig;
use polybind::curation::{curate, read_manifest, write_manifest, MediaRecord, StopWordList};
use polybind::eval::{
    encode_dataset, encode_texts, fuse, generate_fixture_dataset, read_embeddings, similarity, write_embeddings,
    zero_shot_classify, EmbeddingDump, FixtureSpec, RetrievalReport, SimilarityMatrix, TemplateSet,
};
use polybind::preproc::Modality;
use polybind::tape::Mat;
use polybind::trainer::{load_checkpoint, train, PairedDataset, TrainOptions, TrainState};
use polybind::{Error, Result};

/// Environment override for the run seed; `--seed` wins over it.
pub const SEED_ENV: &str = "LB_SEED";

#[derive(Debug, Parser)]
#[command(name = "polybind", version, about = "Language-anchored multimodal embedding toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic aligned corpus: manifest plus .npy payloads.
    GenFixtures {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Comma-separated payload modalities.
        #[arg(long, value_delimiter = ',', default_value = "depth,infrared,audio,video")]
        modalities: Vec<Modality>,
        /// Seed; falls back to LB_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        /// Latent dimensionality.
        #[arg(long, default_value_t = 8)]
        latent_dim: usize,
        /// Payload noise std.
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        /// Distinct captions; defaults to one per sample.
        #[arg(long)]
        clusters: Option<usize>,
    },
    /// Filter a manifest and report rejection counts by reason.
    Curate {
        /// Input manifest (JSON lines).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output manifest of kept records.
        #[arg(long)]
        out: PathBuf,
        /// Stop-word list; the bundled list when omitted.
        #[arg(long)]
        stopwords: Option<PathBuf>,
        /// Rejection report path; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Run config supplying the filter rules; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Align one modality tower to the frozen language tower.
    Train {
        /// Run config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Modality name from the config.
        #[arg(long)]
        modality: String,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Seed; overrides LB_SEED and the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Manifest; overrides `paths.manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Checkpoint directory; overrides `paths.checkpoint_dir`.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Metrics log (JSON lines); overrides `paths.metrics`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Stop after this many total steps.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Export embeddings of a manifest's samples (or captions) to a dump.
    Embed {
        /// Checkpoint to encode with.
        #[arg(long)]
        ckpt: PathBuf,
        /// Manifest of samples.
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint modality, or `text` for the captions.
        #[arg(long)]
        modality: String,
        /// Output dump file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute retrieval or zero-shot metrics from embedding dumps.
    Eval {
        #[arg(long, value_enum)]
        mode: EvalMode,
        /// Query dump (retrieval, emergent, joint text side).
        #[arg(long)]
        query: Option<PathBuf>,
        /// Gallery dump (retrieval, emergent).
        #[arg(long)]
        gallery: Option<PathBuf>,
        /// NAME=DUMP gallery parts for joint mode; repeatable.
        #[arg(long = "part", value_parser = parse_pair)]
        parts: Vec<(String, String)>,
        /// NAME=WEIGHT fusion weights for joint mode; uniform when omitted.
        #[arg(long = "weight", value_parser = parse_pair)]
        weights: Vec<(String, String)>,
        /// Sample embeddings to classify (classify).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Manifest giving labels (classify).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Checkpoint providing the language tower and modality (classify).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Template set; the bundled 20 templates when omitted (classify).
        #[arg(long)]
        templates: Option<PathBuf>,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Retrieval,
    Classify,
    Joint,
    Emergent,
}

fn parse_pair(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .ok_or_else(|| format!("expected NAME=VALUE, got {s:?}"))
}

/// 2 config, 3 data, 4 numeric.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

/// `flag > LB_SEED > fallback`.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenFixtures {
            out,
            samples,
            modalities,
            seed,
            latent_dim,
            noise,
            clusters,
        } => {
            let mut spec = FixtureSpec::new(samples, 0, latent_dim, noise, resolve_seed(seed, 0)?);
            spec.modalities = modalities;
            spec.n_clusters = clusters.unwrap_or(samples);
            let f = generate_fixture_dataset(&spec, &out)?;
            println!("wrote {} samples to {}", f.records.len(), out.join("manifest.jsonl").display());
            Ok(())
        }
        Command::Curate {
            input,
            out,
            stopwords,
            report,
            config,
        } => {
            let stop = match stopwords {
                Some(p) => StopWordList::parse(&std::fs::read_to_string(&p)?),
                None => StopWordList::shipped(),
            };
            let rules = match config {
                Some(p) => RunConfig::load(&p)?.curation,
                None => Default::default(),
            };
            let read = read_manifest(&input)?;
            let rep = curate(&read, &rules, &stop);
            write_manifest(&rep.kept, &out)?;
            let json = serde_json::json!({
                "kept": rep.kept.len(),
                "rejected": rep.rejected,
                "reasons": rep.reasons_json(),
                "stopwords_version": stop.version,
            });
            let path = report.unwrap_or_else(|| out.with_extension("report.json"));
            std::fs::write(&path, serde_json::to_string_pretty(&json)?)?;
            println!("kept {} rejected {}", rep.kept.len(), rep.rejected);
            for (reason, n) in &rep.reasons {
                println!("  {reason:<16} {n}");
            }
            Ok(())
        }
        Command::Train {
            config,
            modality,
            resume,
            seed,
            manifest,
            checkpoint_dir,
            metrics,
            stop_at,
        } => {
            let mut run = RunConfig::load(&config)?;
            run.train.seed = resolve_seed(seed, run.train.seed)?;
            let mut state = match &resume {
                Some(ckpt) => {
                    let s = load_checkpoint(ckpt)?;
                    if s.modality != modality || s.run.train != run.train || s.run.modalities != run.modalities {
                        return Err(Error::Config(format!(
                            "{} was trained under a different config or modality",
                            ckpt.display()
                        )));
                    }
                    s
                }
                None => TrainState::new(run.clone(), &modality)?,
            };
            let manifest = manifest
                .or_else(|| run.paths.manifest.clone())
                .ok_or_else(|| Error::Config("no manifest: pass --manifest or set paths.manifest".into()))?;
            let data = load_dataset(&run, &modality, &manifest)?;
            let opts = TrainOptions {
                checkpoint_dir: checkpoint_dir.or_else(|| run.paths.checkpoint_dir.clone()),
                metrics_path: metrics.or_else(|| run.paths.metrics.clone()),
                stop_at,
            };
            let summary = train(&mut state, &data, &opts)?;
            if let Some(last) = summary.metrics.last() {
                println!(
                    "step {} loss {:.6} tau {:.5} lr {:.3e}",
                    state.step, last.loss, last.tau, last.lr
                );
            }
            if let Some(p) = summary.checkpoints.last() {
                println!("checkpoint {}", p.display());
            }
            Ok(())
        }
        Command::Embed {
            ckpt,
            manifest,
            modality,
            out,
        } => {
            let state = load_checkpoint(&ckpt)?;
            let records = read_manifest(&manifest)?.records;
            let dump = if modality == polybind::encoders::LANGUAGE {
                let (ids, texts): (Vec<String>, Vec<String>) = records
                    .iter()
                    .filter_map(|r| r.text(state.run.text_view).map(|t| (r.id.clone(), t)))
                    .unzip();
                EmbeddingDump {
                    embeddings: encode_texts(&state.registry, &texts)?,
                    ids,
                }
            } else {
                if modality != state.modality {
                    return Err(Error::Config(format!(
                        "checkpoint holds the {} tower, not {modality}",
                        state.modality
                    )));
                }
                let data = load_dataset(&state.run, &modality, &manifest)?;
                EmbeddingDump {
                    embeddings: encode_dataset(&state.registry, &modality, &data)?,
                    ids: data.pairs.iter().map(|p| p.id.clone()).collect(),
                }
            };
            write_embeddings(&out, &dump)?;
            println!("wrote {} embeddings to {}", dump.ids.len(), out.display());
            Ok(())
        }
        Command::Eval {
            mode,
            query,
            gallery,
            parts,
            weights,
            embeddings,
            manifest,
            ckpt,
            templates,
            out,
        } => {
            let need = |p: Option<PathBuf>, flag: &str| {
                p.ok_or_else(|| Error::Config(format!("--mode {mode:?} needs --{flag}")))
            };
            let (report, extra) = match mode {
                EvalMode::Retrieval | EvalMode::Emergent => {
                    let q = read_embeddings(&need(query, "query")?)?;
                    let g = read_embeddings(&need(gallery, "gallery")?)?;
                    (id_matched(&q, &g)?, serde_json::json!({}))
                }
                EvalMode::Joint => {
                    let q = read_embeddings(&need(query, "query")?)?;
                    if parts.is_empty() {
                        return Err(Error::Config("--mode joint needs at least one --part".into()));
                    }
                    let dumps = parts
                        .iter()
                        .map(|(n, p)| Ok((n.clone(), read_embeddings(Path::new(p))?)))
                        .collect::<Result<BTreeMap<_, _>>>()?;
                    let w = weights
                        .iter()
                        .map(|(n, v)| {
                            v.parse::<f64>()
                                .map(|x| (n.clone(), x))
                                .map_err(|_| Error::Config(format!("weight {v:?} for {n} is not a number")))
                        })
                        .collect::<Result<BTreeMap<_, _>>>()?;
                    let (report, n) = joint(&q, &dumps, &w)?;
                    (report, serde_json::json!({ "aligned_samples": n }))
                }
                EvalMode::Classify => {
                    let emb = read_embeddings(&need(embeddings, "embeddings")?)?;
                    let records = read_manifest(&need(manifest, "manifest")?)?.records;
                    let state = load_checkpoint(&need(ckpt, "ckpt")?)?;
                    let t = match templates {
                        Some(p) => TemplateSet::load(&p)?,
                        None => TemplateSet::shipped(),
                    };
                    let labels_by_id: BTreeMap<&str, &str> = records
                        .iter()
                        .filter_map(|r| r.label.as_deref().map(|l| (r.id.as_str(), l)))
                        .collect();
                    let labels = emb
                        .ids
                        .iter()
                        .map(|id| {
                            labels_by_id
                                .get(id.as_str())
                                .map(|l| l.to_string())
                                .ok_or_else(|| Error::Data(format!("no label for {id}")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let classes: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
                    let kind = state.run.kind_of(&state.modality)?;
                    let z = zero_shot_classify(&state.registry, &emb.embeddings, &labels, &classes, kind, &t)?;
                    (
                        z.report,
                        serde_json::json!({ "classes": classes, "templates_version": t.version, "config": state.run }),
                    )
                }
            };
            println!("{report}");
            if let Some(path) = out {
                let mut json: serde_json::Value = serde_json::from_str(&report.to_json())?;
                json["mode"] = format!("{mode:?}").to_lowercase().into();
                if let serde_json::Value::Object(m) = extra {
                    json.as_object_mut().expect("object").extend(m);
                }
                std::fs::write(&path, serde_json::to_string_pretty(&json)?)?;
            }
            Ok(())
        }
    }
}

fn load_dataset(run: &RunConfig, modality: &str, manifest: &Path) -> Result<PairedDataset> {
    let records: Vec<MediaRecord> = read_manifest(manifest)?.records;
    let kind = run.kind_of(modality)?;
    PairedDataset::from_records(&records, &base_dir(manifest), modality, kind, run.text_view)
}

/// Query `i` is correct on every gallery row with the same id.
fn id_matched(q: &EmbeddingDump, g: &EmbeddingDump) -> Result<RetrievalReport> {
    let positives = q
        .ids
        .iter()
        .map(|id| {
            let p: Vec<usize> = g.ids.iter().enumerate().filter(|(_, x)| *x == id).map(|(j, _)| j).collect();
            if p.is_empty() {
                Err(Error::Data(format!("query {id} has no match in the gallery")))
            } else {
                Ok(p)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let sim = SimilarityMatrix::new(similarity(&q.embeddings, &g.embeddings)?, positives)?;
    Ok(RetrievalReport::from_similarity(&sim))
}

/// Fuses the parts over the ids present in all of them and in the query.
fn joint(
    q: &EmbeddingDump,
    parts: &BTreeMap<String, EmbeddingDump>,
    weights: &BTreeMap<String, f64>,
) -> Result<(RetrievalReport, usize)> {
    let index = |d: &EmbeddingDump| -> BTreeMap<String, usize> {
        d.ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect()
    };
    let part_idx: BTreeMap<&String, BTreeMap<String, usize>> = parts.iter().map(|(n, d)| (n, index(d))).collect();
    let ids: Vec<String> = q
        .ids
        .iter()
        .filter(|id| part_idx.values().all(|ix| ix.contains_key(*id)))
        .cloned()
        .collect();
    if ids.is_empty() {
        return Err(Error::Data("no sample has every modality".into()));
    }
    let rows = |d: &EmbeddingDump, ix: &BTreeMap<String, usize>| -> Mat {
        d.embeddings.select(ndarray::Axis(0), &ids.iter().map(|id| ix[id]).collect::<Vec<_>>())
    };
    let aligned: BTreeMap<String, Mat> = parts.iter().map(|(n, d)| (n.clone(), rows(d, &part_idx[n]))).collect();
    let text = rows(q, &index(q));
    let fused = fuse(&aligned, weights)?;
    let sim = SimilarityMatrix::diagonal(similarity(&text, &fused)?)?;
    Ok((RetrievalReport::from_similarity(&sim), ids.len()))
}

