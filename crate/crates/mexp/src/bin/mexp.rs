//! Pipeline entry point: dataset generation, training, evaluation, and
//! mechanistic analysis as file-based subcommands.

use clap::{Parser, Subcommand, ValueEnum};
use mexp::analysis::{self, GrokParams};
use mexp::codec::{self, build_vocabulary};
use mexp::config::ConfigMap;
use mexp::dataset;
use mexp::interpret::{self, AblationMode, CircuitSpec, PairFilter};
use mexp::model::{load_checkpoint, AttnKind, Model, Side, SlotId};
use mexp::sampler::{
    self, chi_square_p, empirical_histogram, log_spaced_edges, reciprocal_bin_mass, Field,
    ModExpInstance, OperandLaw, OutcomeLaw, SamplerSpec,
};
use mexp::trainer::{self, TrainConfig};
use mexp::Error;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mexp", version, about = "modular exponentiation lab: train and dissect small seq2seq transformers")]
struct Cli {
    /// key = value config file; command-line flags override its entries
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// worker cap; 1 guarantees bit-reproducibility (the current
    /// implementation is single-threaded regardless)
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum OperandArg {
    Uniform,
    Reciprocal,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutcomeArg {
    Computed,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterArg {
    None,
    NoReduction,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Mean,
    Zero,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a JSONL dataset plus metadata sidecar
    Gen {
        #[arg(long)]
        operands: Option<OperandArg>,
        #[arg(long)]
        outcomes: Option<OutcomeArg>,
        #[arg(long)]
        count: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// maximum operand value M
        #[arg(long)]
        m: Option<u64>,
        #[arg(long)]
        c_max: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model into a run directory (metrics.csv, per_modulus.csv, checkpoints)
    Train {
        #[arg(long)]
        preset: Option<PresetArg>,
        #[arg(long)]
        operands: Option<OperandArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        base: Option<u64>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// checkpoint to resume from
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a JSONL dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
    },
    /// Detect per-modulus grokking events and prime-family synchronization
    Grok {
        /// run directory containing per_modulus.csv
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "valid")]
        split: String,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        sustain: Option<usize>,
        #[arg(long)]
        sync_window: Option<u64>,
    },
    /// Tally systematic mispredictions of a checkpoint on a dataset
    Census {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        min_support: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
    },
    /// Activation-patching KL map and final-layer circuit evaluation
    Patch {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: Option<u64>,
        #[arg(long)]
        filter: Option<FilterArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        m: Option<u64>,
        #[arg(long)]
        c_max: Option<u64>,
        #[arg(long)]
        ablation: Option<AblationArg>,
        #[arg(long)]
        include_encoder: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Embedding-space PCA of two checkpoints with number-theory labels
    Pca {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        /// modulus for the multiplicative-order label
        #[arg(long)]
        order_modulus: Option<u64>,
        /// comma-separated primes for multiple-of labels
        #[arg(long)]
        multiples: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Sampler distribution diagnostics: log-binned histogram and chi-square
    Stats {
        #[arg(long)]
        operands: Option<OperandArg>,
        #[arg(long)]
        outcomes: Option<OutcomeArg>,
        #[arg(long)]
        count: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        m: Option<u64>,
        #[arg(long)]
        c_max: Option<u64>,
        #[arg(long)]
        bins: Option<usize>,
    },
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) | Error::Domain(_) => ExitCode::from(1),
        Error::Divergence(_) => ExitCode::from(3),
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.exit_code() == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    let cfg = match &cli.config {
        Some(path) => match ConfigMap::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("mexp: {e}");
                return ExitCode::from(1);
            }
        },
        None => ConfigMap::default(),
    };
    match run(cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mexp: {e}");
            exit_code_for(&e)
        }
    }
}

fn pick<T: std::str::FromStr>(
    flag: Option<T>,
    cfg: &ConfigMap,
    section: &str,
    key: &str,
    default: T,
) -> mexp::Result<T> {
    match flag {
        Some(v) => Ok(v),
        None => Ok(cfg.lookup::<T>(section, key)?.unwrap_or(default)),
    }
}

fn operand_law(flag: Option<OperandArg>, cfg: &ConfigMap, section: &str) -> mexp::Result<OperandLaw> {
    match flag {
        Some(OperandArg::Uniform) => Ok(OperandLaw::Uniform),
        Some(OperandArg::Reciprocal) => Ok(OperandLaw::Reciprocal),
        None => match cfg.lookup::<String>(section, "operands")?.as_deref() {
            None | Some("reciprocal") => Ok(OperandLaw::Reciprocal),
            Some("uniform") => Ok(OperandLaw::Uniform),
            Some(other) => Err(Error::Config(format!("unknown operand law {other:?}"))),
        },
    }
}

fn outcome_law(flag: Option<OutcomeArg>, cfg: &ConfigMap, section: &str) -> mexp::Result<OutcomeLaw> {
    match flag {
        Some(OutcomeArg::Computed) => Ok(OutcomeLaw::Computed),
        Some(OutcomeArg::Uniform) => Ok(OutcomeLaw::Uniform),
        None => match cfg.lookup::<String>(section, "outcomes")?.as_deref() {
            None | Some("computed") => Ok(OutcomeLaw::Computed),
            Some("uniform") => Ok(OutcomeLaw::Uniform),
            Some(other) => Err(Error::Config(format!("unknown outcome law {other:?}"))),
        },
    }
}

fn load_model(path: &Path) -> mexp::Result<Model<f32>> {
    Ok(load_checkpoint(path)?.model)
}

fn vocab_for_model(model: &Model<f32>) -> mexp::Result<codec::Vocabulary> {
    build_vocabulary(model.config.vocab_size as u64 - 4)
}

fn run(cli: Cli, cfg: &ConfigMap) -> mexp::Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    match cli.command {
        Cmd::Gen { operands, outcomes, count, seed, m, c_max, out } => {
            let mut spec = SamplerSpec::new(
                operand_law(operands, cfg, "sampler")?,
                outcome_law(outcomes, cfg, "sampler")?,
                pick(seed, cfg, "sampler", "seed", 0)?,
            );
            spec.m = pick(m, cfg, "sampler", "m", spec.m)?;
            spec.c_max = pick(c_max, cfg, "sampler", "c_max", spec.c_max)?;
            let count = pick(count, cfg, "sampler", "count", 1000)?;
            let stats = dataset::write_dataset(&out, &spec, count)?;
            println!(
                "wrote {} rows to {} ({} rejected draws)",
                stats.emitted,
                out.display(),
                stats.rejections
            );
            Ok(())
        }
        Cmd::Train { preset, operands, seed, base, epochs, lr, out, resume } => {
            let seed = pick(seed, cfg, "train", "seed", 0)?;
            let law = operand_law(operands, cfg, "train")?;
            let preset_name = match preset {
                Some(PresetArg::Paper) => "paper".to_string(),
                Some(PresetArg::Desk) => "desk".to_string(),
                None => cfg
                    .lookup::<String>("train", "preset")?
                    .ok_or_else(|| Error::Config("train: --preset paper|desk required".into()))?,
            };
            let mut tc = match preset_name.as_str() {
                "paper" => TrainConfig::paper(law, out, seed),
                "desk" => TrainConfig::desk(law, out, seed),
                other => return Err(Error::Config(format!("unknown preset {other:?}"))),
            };
            if let Some(b) = base {
                tc = tc.with_base(b)?;
            } else if let Some(b) = cfg.lookup::<u64>("train", "base")? {
                tc = tc.with_base(b)?;
            }
            tc.epochs = pick(epochs, cfg, "train", "epochs", tc.epochs)?;
            tc.adam.lr = pick(lr, cfg, "train", "lr", tc.adam.lr)?;
            let summary = trainer::train(&tc, resume.as_deref())?;
            println!(
                "trained {} epochs: valid acc {:.4}, test acc {:.4}",
                summary.epochs_run, summary.final_valid_accuracy, summary.final_test_accuracy
            );
            Ok(())
        }
        Cmd::Eval { checkpoint, dataset: ds, batch_size } => {
            let model = load_model(&checkpoint)?;
            let vocab = vocab_for_model(&model)?;
            let data = dataset::read_dataset(&ds)?;
            let res = trainer::evaluate(&model, &data, &vocab, batch_size)?;
            println!(
                "loss {:.6} accuracy {:.6} ({}/{})",
                res.loss,
                res.accuracy(),
                res.correct,
                res.total
            );
            Ok(())
        }
        Cmd::Grok { run, split, threshold, window, sustain, sync_window } => {
            let defaults = GrokParams::default();
            let params = GrokParams {
                jump_threshold: pick(threshold, cfg, "grok", "threshold", defaults.jump_threshold)?,
                window: pick(window, cfg, "grok", "window", defaults.window)?,
                sustain: pick(sustain, cfg, "grok", "sustain", defaults.sustain)?,
            };
            let sync_window = pick(sync_window, cfg, "grok", "sync_window", 50)?;
            let series = analysis::read_per_modulus_csv(&trainer::per_modulus_path(&run), &split)?;
            let mut events = Vec::new();
            for s in &series {
                events.extend(detect_or_skip(s, &params)?);
            }
            let families = analysis::family_sync_report(&events, sync_window)?;
            analysis::write_grok_events_csv(&run.join("grok_events.csv"), &events)?;
            analysis::write_families_csv(&run.join("families.csv"), &families)?;
            println!("{} events, {} families", events.len(), families.len());
            Ok(())
        }
        Cmd::Census { checkpoint, dataset: ds, min_support, out, batch_size } => {
            let model = load_model(&checkpoint)?;
            let vocab = vocab_for_model(&model)?;
            let data = dataset::read_dataset(&ds)?;
            let min_support = pick(min_support, cfg, "census", "min_support", 10)?;
            let preds = predictions(&model, &data, &vocab, batch_size)?;
            let census = analysis::misprediction_census(&preds, min_support);
            analysis::write_confusions_csv(&out, &census)?;
            println!("{} confused targets written to {}", census.len(), out.display());
            Ok(())
        }
        Cmd::Patch {
            checkpoint,
            pairs,
            filter,
            seed,
            m,
            c_max,
            ablation,
            include_encoder,
            out_dir,
        } => {
            let n_pairs = pick(pairs, cfg, "patch", "pairs", 100)? as usize;
            if n_pairs == 0 {
                return Err(Error::Config("patch: --pairs must be >= 1".into()));
            }
            let model = load_model(&checkpoint)?;
            let vocab = vocab_for_model(&model)?;
            let filter = match filter {
                Some(FilterArg::None) => PairFilter::None,
                Some(FilterArg::NoReduction) | None => PairFilter::NoReduction,
            };
            let mut spec = SamplerSpec::new(
                OperandLaw::Reciprocal,
                OutcomeLaw::Computed,
                pick(seed, cfg, "patch", "seed", 0)?,
            );
            spec.m = pick(m, cfg, "patch", "m", 10_000)?;
            spec.c_max = pick(c_max, cfg, "patch", "c_max", 20)?;
            let pairs = interpret::build_prompt_pairs(&spec, n_pairs, filter, vocab.base())?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let report =
                interpret::patch_sweep(&model, &pairs, &vocab, include_encoder, &filter.to_string())?;
            interpret::write_kl_map_csv(&out_dir.join("kl_map.csv"), &report)?;

            let mode = match ablation {
                Some(AblationArg::Zero) => AblationMode::Zero,
                Some(AblationArg::Mean) | None => AblationMode::Mean,
            };
            let circuit = CircuitSpec {
                active_heads: final_decoder_layer_heads(&model),
                ablation_mode: mode,
            };
            let cleans: Vec<ModExpInstance> = pairs.iter().map(|p| p.clean).collect();
            let (circuit_acc, full_acc) =
                interpret::circuit_eval(&model, &circuit, &cleans, &cleans, &vocab, 256)?;
            interpret::write_circuit_csv(
                &out_dir.join("circuit.csv"),
                &circuit,
                circuit_acc,
                full_acc,
                &filter.to_string(),
            )?;
            println!(
                "kl_map.csv + circuit.csv written to {} (circuit acc {:.4}, full acc {:.4})",
                out_dir.display(),
                circuit_acc,
                full_acc
            );
            Ok(())
        }
        Cmd::Pca { before, after, order_modulus, multiples, out_dir } => {
            let before = load_model(&before)?;
            let after = load_model(&after)?;
            let vocab = vocab_for_model(&before)?;
            let order_modulus = pick(order_modulus, cfg, "pca", "order_modulus", 97)?;
            let multiples = match multiples.or(cfg.lookup::<String>("pca", "multiples")?) {
                Some(s) => s
                    .split(',')
                    .map(|p| {
                        p.trim()
                            .parse::<u64>()
                            .map_err(|_| Error::Config(format!("pca: bad prime list entry {p:?}")))
                    })
                    .collect::<mexp::Result<Vec<u64>>>()?,
                None => vec![2, 3, 5, 7, 23],
            };
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            interpret::embedding_report(
                &before,
                &after,
                &vocab,
                order_modulus,
                &multiples,
                &out_dir.join("pca_before.csv"),
                &out_dir.join("pca_after.csv"),
            )?;
            println!("pca_before.csv + pca_after.csv written to {}", out_dir.display());
            Ok(())
        }
        Cmd::Stats { operands, outcomes, count, seed, m, c_max, bins } => {
            let mut spec = SamplerSpec::new(
                operand_law(operands, cfg, "stats")?,
                outcome_law(outcomes, cfg, "stats")?,
                pick(seed, cfg, "stats", "seed", 0)?,
            );
            spec.m = pick(m, cfg, "stats", "m", spec.m)?;
            spec.c_max = pick(c_max, cfg, "stats", "c_max", spec.c_max)?;
            let count = pick(count, cfg, "stats", "count", 100_000)?;
            let bins = pick(bins, cfg, "stats", "bins", 40)?;
            let data: Vec<ModExpInstance> = (0..count)
                .map(|i| sampler::instance_at(&spec, i))
                .collect::<mexp::Result<_>>()?;
            let edges = log_spaced_edges(spec.m, bins);
            let observed = empirical_histogram(&data, Field::A, &edges)?;
            println!("bin_lo,bin_hi,observed,expected");
            match spec.operand_law {
                OperandLaw::Reciprocal => {
                    let expected: Vec<f64> = edges
                        .windows(2)
                        .map(|w| reciprocal_bin_mass(w[0], w[1], spec.m) * count as f64)
                        .collect();
                    for (w, (&o, &e)) in edges.windows(2).zip(observed.iter().zip(&expected)) {
                        println!("{},{},{o},{e:.2}", w[0], w[1]);
                    }
                    let p = chi_square_p(&observed, &expected)?;
                    println!("chi_square_p = {p:.6}");
                }
                OperandLaw::Uniform => {
                    for (w, &o) in edges.windows(2).zip(observed.iter()) {
                        let e = (w[1] - w[0]) as f64 / (spec.m + 1) as f64 * count as f64;
                        println!("{},{},{o},{e:.2}", w[0], w[1]);
                    }
                }
            }
            Ok(())
        }
    }
}

/// Series too short for the detector window are reported as event-free.
fn detect_or_skip(
    series: &analysis::AccuracySeries,
    params: &GrokParams,
) -> mexp::Result<Vec<analysis::GrokEvent>> {
    if series.points.len() < params.window + params.sustain {
        return Ok(Vec::new());
    }
    analysis::detect_grokking(series, params)
}

fn final_decoder_layer_heads(model: &Model<f32>) -> BTreeSet<SlotId> {
    let last = model.config.n_layers_dec - 1;
    let mut set = BTreeSet::new();
    for kind in [AttnKind::SelfAttn, AttnKind::Cross] {
        for h in 0..model.config.n_heads {
            set.insert((Side::Decoder, last, kind, h));
        }
    }
    set
}

fn predictions(
    model: &Model<f32>,
    data: &[ModExpInstance],
    vocab: &codec::Vocabulary,
    batch_size: usize,
) -> mexp::Result<Vec<(ModExpInstance, Option<u64>)>> {
    use mexp::model::{greedy_decode, pad_batch};
    let pad = vocab.pad_id();
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let srcs: Vec<Vec<codec::TokenId>> =
            chunk.iter().map(|i| codec::encode_instance(i, vocab).0.ids).collect();
        let src = pad_batch(&srcs, pad, None)?;
        let decoded = greedy_decode(
            model,
            &src,
            vocab.plus_id(),
            vocab.eos_id(),
            pad,
            model.config.max_tgt_len,
            None,
        )?;
        for (inst, seq) in chunk.iter().zip(decoded.iter()) {
            out.push((*inst, codec::decode_prediction(seq, vocab)));
        }
    }
    Ok(out)
}
