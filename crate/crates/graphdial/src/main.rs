//! Thin command-line front end; all logic lives in the library.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use graphdial::data::{
    generate_toy_dataset, prepare_dataset, Dataset, PreparedDataset, ToyConfig,
};
use graphdial::graph::{
    build_history_graph, build_image_graph, build_question_graph, graph_stats, read_graphs_jsonl,
    write_graphs_jsonl, BoundingBox, CoreferenceLink, DependencyEdge, DependencyLexicon, Graph,
    Modality,
};
use graphdial::model::{Model, ModelConfig, ModelSpec, Vocabulary};
use graphdial::params::RngState;
use graphdial::train::{
    apply_flat_config, cache_dir, check_config_compatibility, evaluate, evaluate_ensemble,
    load_model, run_ablation, save_model, train, write_loss_csv, write_ranks_jsonl,
    write_schedule_csv, AblationKind, Stage, StageConfig,
};

#[derive(Parser)]
#[command(
    name = "graphdial",
    about = "Visual dialog answer ranking with cascaded multi-modal graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dialog dataset (JSONL of dialog instances).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        dialogs: usize,
        #[arg(long, default_value_t = 3)]
        rounds: usize,
        #[arg(long, default_value_t = 6)]
        candidates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        min_regions: usize,
        #[arg(long, default_value_t = 5)]
        max_regions: usize,
        #[arg(long, default_value_t = 8)]
        feat_dim: usize,
        #[arg(long, default_value_t = 0.5)]
        dense_fraction: f64,
    },
    /// Build modality graphs from raw annotation files.
    BuildGraphs {
        /// JSONL: one `[[x1,y1,x2,y2], ...]` box list per instance.
        #[arg(long)]
        boxes: PathBuf,
        /// JSONL: one `[[head, dependent, "relation"], ...]` parse per question.
        #[arg(long)]
        parses: PathBuf,
        /// JSONL: one `[[from_round, to_round], ...]` link list per dialog.
        #[arg(long)]
        corefs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relation-class histogram over a graph corpus.
    Stats {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        modality: String,
    },
    /// Train one stage on a dataset.
    Train {
        #[arg(long)]
        stage: String,
        /// Flat key = value config overriding the stage/model defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to continue from; a fresh model otherwise.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output directory (checkpoint + logs). Defaults to the cache dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint and write the metric report and ranks file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset file (JSONL of dialog instances).
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        dump_attention: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional flat config; must hash-match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate the mean-score ensemble of several checkpoints.
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare the full model against one ablated variant.
    Ablate {
        /// lambda0 | no_warmup | no_sharing | no_hub
        #[arg(long)]
        name: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_lines_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {path:?}"))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing line in {path:?}")))
        .collect()
}

fn load_prepared(path: &Path, spec: &ModelSpec) -> Result<(PreparedDataset, usize)> {
    let dataset = Dataset::load_path(path)?;
    let expected_n = dataset
        .instances
        .first()
        .and_then(|i| i.rounds.first())
        .map(|r| r.candidates.len())
        .context("dataset has no rounds")?;
    let prepared = prepare_dataset(dataset, spec)?;
    Ok((prepared, expected_n))
}

fn out_dir(flag: Option<PathBuf>) -> Result<PathBuf> {
    let dir = flag.unwrap_or_else(cache_dir);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            out,
            dialogs,
            rounds,
            candidates,
            seed,
            min_regions,
            max_regions,
            feat_dim,
            dense_fraction,
        } => {
            let ds = generate_toy_dataset(&ToyConfig {
                dialogs,
                rounds,
                candidates,
                min_regions,
                max_regions,
                feat_dim,
                seed,
                dense_fraction,
            });
            ds.save_path(&out)?;
            println!(
                "wrote {} dialogs ({} rounds each, {} candidates) to {}",
                dialogs,
                rounds,
                candidates,
                out.display()
            );
        }

        Command::BuildGraphs {
            boxes,
            parses,
            corefs,
            out,
        } => {
            std::fs::create_dir_all(&out)?;
            let lexicon = DependencyLexicon::default();

            let box_lists: Vec<Vec<[f64; 4]>> = read_lines_json(&boxes)?;
            let image: Vec<Graph> = box_lists
                .iter()
                .map(|list| {
                    let bs = list
                        .iter()
                        .map(|b| BoundingBox::new(b[0], b[1], b[2], b[3]))
                        .collect::<graphdial::Result<Vec<_>>>()?;
                    Ok(build_image_graph(&bs)?)
                })
                .collect::<Result<_>>()?;

            let parse_lists: Vec<Vec<(usize, usize, String)>> = read_lines_json(&parses)?;
            let question: Vec<Graph> = parse_lists
                .iter()
                .map(|list| {
                    let edges: Vec<DependencyEdge> = list
                        .iter()
                        .map(|(h, d, rel)| DependencyEdge {
                            head: *h,
                            dependent: *d,
                            relation: rel.clone(),
                        })
                        .collect();
                    let num_tokens = list
                        .iter()
                        .map(|(h, d, _)| h.max(d) + 1)
                        .max()
                        .unwrap_or(1);
                    Ok(build_question_graph(&edges, num_tokens, &lexicon)?)
                })
                .collect::<Result<_>>()?;

            let link_lists: Vec<Vec<[usize; 2]>> = read_lines_json(&corefs)?;
            let history: Vec<Graph> = link_lists
                .iter()
                .map(|list| {
                    let links: Vec<CoreferenceLink> = list
                        .iter()
                        .map(|l| CoreferenceLink {
                            from_round: l[0],
                            to_round: l[1],
                        })
                        .collect();
                    let num_rounds = list.iter().map(|l| l[0].max(l[1]) + 1).max().unwrap_or(1);
                    Ok(build_history_graph(&links, num_rounds)?)
                })
                .collect::<Result<_>>()?;

            for (name, graphs) in [
                ("image", &image),
                ("question", &question),
                ("history", &history),
            ] {
                let path = out.join(format!("{name}.jsonl"));
                write_graphs_jsonl(std::fs::File::create(&path)?, graphs)?;
                println!("wrote {} graphs to {}", graphs.len(), path.display());
            }
        }

        Command::Stats { graphs, modality } => {
            let modality = match modality.as_str() {
                "image" => Modality::Image,
                "question" => Modality::Question,
                "history" => Modality::History,
                other => bail!("unknown modality {other:?}"),
            };
            let path = graphs.join(format!("{modality}.jsonl"));
            let corpus = read_graphs_jsonl(std::io::BufReader::new(
                std::fs::File::open(&path).with_context(|| format!("opening {path:?}"))?,
            ))?;
            let hist = graph_stats(&corpus, modality)?;
            println!("{}", serde_json::to_string_pretty(&hist)?);
        }

        Command::Train {
            stage,
            config,
            data,
            init,
            out,
            seed,
        } => {
            let stage: Stage = stage.parse()?;
            let mut stage_cfg = match stage {
                Stage::Warmup => StageConfig::warmup_defaults(),
                Stage::Sparse => StageConfig::sparse_defaults(),
                Stage::Dense => StageConfig::dense_defaults(),
            };
            stage_cfg.seed = seed;
            let mut model_cfg = ModelConfig::toy();
            if let Some(path) = &config {
                let text = std::fs::read_to_string(path)?;
                apply_flat_config(&text, &mut model_cfg, &mut stage_cfg)?;
            }

            let mut model = match &init {
                Some(path) => {
                    let (model, _) = load_model(path)?;
                    if config.is_some() {
                        let requested = ModelSpec {
                            config: model_cfg.clone(),
                            vocab: model.spec.vocab.clone(),
                        };
                        check_config_compatibility(&model.spec, &requested)?;
                    }
                    model
                }
                None => {
                    let dataset = Dataset::load_path(&data)?;
                    let vocab = Vocabulary::build(dataset.texts());
                    Model::new(
                        ModelSpec {
                            config: model_cfg,
                            vocab,
                        },
                        seed,
                    )?
                }
            };

            let (prepared, _) = load_prepared(&data, &model.spec)?;
            let log = train(&mut model, &prepared, &stage_cfg)?;

            let dir = out_dir(out)?;
            let ckpt = dir.join("checkpoint.json");
            let rng = ChaCha8Rng::seed_from_u64(seed);
            save_model(&model, RngState::capture(seed, &rng), &ckpt)?;
            write_loss_csv(std::fs::File::create(dir.join("loss.csv"))?, &log.losses)?;
            write_schedule_csv(
                std::fs::File::create(dir.join("schedule.csv"))?,
                &log.schedule,
            )?;
            println!(
                "trained {} steps; checkpoint at {}",
                log.losses.len(),
                ckpt.display()
            );
        }

        Command::Eval {
            ckpt,
            split,
            dump_attention,
            out,
            config,
        } => {
            let (model, _) = load_model(&ckpt)?;
            if let Some(path) = &config {
                let mut model_cfg = ModelConfig::toy();
                let mut stage_cfg = StageConfig::sparse_defaults();
                apply_flat_config(
                    &std::fs::read_to_string(path)?,
                    &mut model_cfg,
                    &mut stage_cfg,
                )?;
                let requested = ModelSpec {
                    config: model_cfg,
                    vocab: model.spec.vocab.clone(),
                };
                check_config_compatibility(&model.spec, &requested)?;
            }
            let (prepared, expected_n) = load_prepared(&split, &model.spec)?;
            let outcome = evaluate(&model, &prepared, expected_n, dump_attention)?;

            let dir = out_dir(out)?;
            std::fs::write(
                dir.join("report.json"),
                serde_json::to_vec_pretty(&outcome.report)?,
            )?;
            write_ranks_jsonl(
                std::fs::File::create(dir.join("ranks.jsonl"))?,
                &outcome.results,
            )?;
            if dump_attention {
                use std::io::Write;
                let mut w = std::fs::File::create(dir.join("attention.jsonl"))?;
                for (dialog, round, traces) in &outcome.traces {
                    let line = serde_json::json!({
                        "dialog": dialog,
                        "round": round,
                        "traces": traces,
                    });
                    serde_json::to_writer(&mut w, &line)?;
                    writeln!(w)?;
                }
            }
            println!("{}", serde_json::to_string_pretty(&outcome.report)?);
        }

        Command::Ensemble { ckpts, split, out } => {
            let mut models = Vec::new();
            for path in &ckpts {
                models.push(load_model(path)?.0);
            }
            let (prepared, expected_n) = load_prepared(&split, &models[0].spec)?;
            let outcome = evaluate_ensemble(&models, &prepared, expected_n)?;
            let dir = out_dir(out)?;
            std::fs::write(
                dir.join("ensemble-report.json"),
                serde_json::to_vec_pretty(&outcome.report)?,
            )?;
            println!("{}", serde_json::to_string_pretty(&outcome.report)?);
        }

        Command::Ablate {
            name,
            data,
            steps,
            seed,
            out,
        } => {
            let kind: AblationKind = name.parse()?;
            let dataset = Dataset::load_path(&data)?;
            let vocab = Vocabulary::build(dataset.texts());
            let spec = ModelSpec {
                config: ModelConfig::toy(),
                vocab,
            };
            let expected_n = dataset
                .instances
                .first()
                .and_then(|i| i.rounds.first())
                .map(|r| r.candidates.len())
                .context("dataset has no rounds")?;
            let prepared = prepare_dataset(dataset, &spec)?;

            let warmup_cfg = StageConfig {
                max_steps: Some(steps / 2),
                batch_size: 16,
                seed,
                backbone_lr_max: 1e-3,
                backbone_lr_min: 1e-4,
                gnn_lr_max: 1e-3,
                gnn_lr_min: 1e-4,
                ..StageConfig::warmup_defaults()
            };
            let sparse_cfg = StageConfig {
                max_steps: Some(steps),
                batch_size: 16,
                seed,
                backbone_lr_max: 3e-3,
                backbone_lr_min: 3e-4,
                gnn_lr_max: 3e-3,
                gnn_lr_min: 3e-4,
                ..StageConfig::sparse_defaults()
            };
            let report = run_ablation(
                kind,
                &spec,
                &prepared,
                &warmup_cfg,
                &sparse_cfg,
                seed,
                expected_n,
            )?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(out) = out {
                std::fs::write(&out, &json)?;
            }
            println!("{json}");
        }
    }
    Ok(())
}
