use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use convsink::analyzer::{analyze, AttnMap, ExportFormat};
use convsink::mask::{build_mask, MaskKind};
use convsink::tasks::{
    build_supervised_sample, gen_synthetic_dialogue, random_lmr_sample, random_smr_sample, write_samples, SampleConfig,
    SyntheticParams,
};
use convsink::{dialogue, layout_uniform, SegmentMap};
use convsink_workbench::experiment::{run_experiment, Experiment, ExperimentConfig};
use convsink_workbench::simulate::{parse_policy, scaling, simulate, simulate_layout};
use convsink_workbench::{exit_code, invalid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "convsink", version, about = "Conversational attention sinks: masks, cache simulation, toy training")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format for tabular results (train and analyze always write JSON).
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(clap::Args)]
struct Layout {
    /// Uniform layout `T:l` (T utterances of l tokens, EoU included).
    #[arg(long, conflicts_with_all = ["lengths", "segmap", "trace"])]
    uniform: Option<String>,
    /// Comma-separated utterance lengths, EoU included.
    #[arg(long)]
    lengths: Option<String>,
    /// Segment-map JSON: {"utterance_lengths": [...]}.
    #[arg(long)]
    segmap: Option<PathBuf>,
    /// Conversation JSONL; all conversations are streamed as one session.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Export an attention mask as CSV (query,key,allowed), JSON rows or a PGM image.
    Mask {
        /// dense, local:W, strllm:N:W, streaming, smr, smr-nosink or lmr.
        #[arg(long, default_value = "streaming")]
        kind: String,
        #[command(flatten)]
        layout: Layout,
        /// Write a PGM image instead of CSV/JSON.
        #[arg(long)]
        pgm: bool,
    },
    /// Generate synthetic conversations or training samples as JSONL.
    Datagen {
        /// dialogue, smr, lmr or supervised.
        #[arg(long, default_value = "dialogue")]
        task: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        vocab: usize,
        /// Query/response pairs per dialogue.
        #[arg(long, default_value_t = 24)]
        pairs: usize,
        #[arg(long, default_value_t = 2)]
        key_len: usize,
        #[arg(long, default_value_t = 2)]
        val_len: usize,
        /// Draw keys and values from disjoint halves of the payload vocabulary.
        #[arg(long)]
        split_vocab: bool,
        /// Responses restate their key before the value.
        #[arg(long)]
        echo_key: bool,
        /// Utterances per SMR sample.
        #[arg(long, default_value_t = 28)]
        utterances: usize,
        /// Payload length range of SMR utterances.
        #[arg(long, default_value_t = 1)]
        min_len: usize,
        #[arg(long, default_value_t = 8)]
        max_len: usize,
    },
    /// Stream a trace through a cache policy and report per-step occupancy.
    Simulate {
        /// convsink, dense, local:W or strllm:N:W.
        #[arg(long, default_value = "convsink")]
        policy: String,
        #[command(flatten)]
        layout: Layout,
    },
    /// Train the toy transformer on a synthetic task and write a JSON report.
    Train {
        /// smr-recon, ablate-sink or lmr-recall.
        #[arg(long, default_value = "smr-recon")]
        experiment: String,
        /// Full experiment config as JSON; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Print the effective config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Per-head sink aggregation statistics of attention maps.
    Analyze {
        /// Attention CSV: layer,head,query,key,weight.
        #[arg(long)]
        attn: PathBuf,
        #[arg(long)]
        segmap: PathBuf,
        #[arg(long, default_value_t = convsink::analyzer::DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Report path; falls back to --out, then standard output.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write one PGM heatmap per head with this path prefix.
        #[arg(long)]
        pgm_prefix: Option<PathBuf>,
    },
    /// Peak cache size against conversation length for uniform streams.
    Bench {
        /// Utterance length.
        #[arg(long, default_value_t = 16)]
        l: usize,
        /// Comma-separated utterance counts.
        #[arg(long, default_value = "8,16,32,64,128")]
        ts: String,
    },
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',').map(|p| p.trim().parse().with_context(|| format!("bad number {p:?}"))).collect::<Result<_>>().or_else(
        |e| invalid!("{e:#}"),
    )
}

fn load_layout(layout: &Layout) -> Result<SegmentMap> {
    if let Some(u) = &layout.uniform {
        let parts = parse_list(&u.replace(':', ","))?;
        let [t, l] = parts[..] else { invalid!("--uniform expects T:l, got {u:?}") };
        return Ok(layout_uniform(t, l)?);
    }
    if let Some(l) = &layout.lengths {
        return Ok(SegmentMap::from_lengths(&parse_list(l)?)?);
    }
    if let Some(p) = &layout.segmap {
        return read_segmap(p);
    }
    if let Some(p) = &layout.trace {
        let convs = dialogue::read_conversations(BufReader::new(open(p)?))?;
        return convsink_workbench::simulate::trace_layout(&convs);
    }
    invalid!("one of --uniform, --lengths, --segmap or --trace is required")
}

fn open(p: &Path) -> Result<File> {
    File::open(p).with_context(|| format!("opening {}", p.display()))
}

fn read_segmap(p: &Path) -> Result<SegmentMap> {
    Ok(serde_json::from_reader(BufReader::new(open(p)?))?)
}

fn output(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: serde::Serialize>(out: &Option<PathBuf>, value: &T) -> Result<()> {
    let mut w = output(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Mask { kind, layout, pgm } => {
            let kind: MaskKind = kind.parse()?;
            let mask = build_mask(kind, &load_layout(&layout)?)?;
            let mut w = output(&cli.out)?;
            if pgm {
                mask.write_pgm(&mut w)?;
            } else if cli.format == Format::Json {
                let rows: Vec<Vec<usize>> = (0..mask.n()).map(|i| mask.allowed(i)).collect();
                serde_json::to_writer(&mut w, &serde_json::json!({ "kind": kind, "n": mask.n(), "allowed": rows }))?;
                writeln!(w)?;
            } else {
                mask.write_csv(&mut w)?;
            }
            w.flush()?;
        }
        Command::Datagen { task, count, vocab, pairs, key_len, val_len, split_vocab, echo_key, utterances, min_len, max_len } => {
            let dialogue = SyntheticParams { n_pairs: pairs, key_len, val_len, vocab, split_vocab, echo_key };
            let cfg = SampleConfig {
                vocab,
                s: utterances,
                smr_min_len: min_len,
                smr_max_len: max_len,
                dialogue,
                ..SampleConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
            let mut w = output(&cli.out)?;
            match task.as_str() {
                "dialogue" => {
                    let convs = (0..count)
                        .map(|k| gen_synthetic_dialogue(cli.seed.wrapping_add(k as u64), dialogue))
                        .collect::<convsink::Result<Vec<_>>>()?;
                    dialogue::write_conversations(&mut w, &convs)?;
                }
                "smr" | "lmr" | "supervised" => {
                    let samples = (0..count)
                        .map(|k| match task.as_str() {
                            "smr" => random_smr_sample(&mut rng, &cfg),
                            "lmr" => random_lmr_sample(&mut rng, &cfg),
                            _ => gen_synthetic_dialogue(cli.seed.wrapping_add(k as u64), dialogue)
                                .and_then(|c| build_supervised_sample(&c, cfg.bos, cfg.eou)),
                        })
                        .collect::<convsink::Result<Vec<_>>>()?;
                    write_samples(&mut w, &samples)?;
                }
                other => invalid!("unknown task {other:?} (expected dialogue, smr, lmr or supervised)"),
            }
            w.flush()?;
        }
        Command::Simulate { policy, layout } => {
            let kind = parse_policy(&policy)?;
            let result = match &layout.trace {
                Some(p) => simulate(&dialogue::read_conversations(BufReader::new(open(p)?))?, kind)?,
                None => simulate_layout(&load_layout(&layout)?, kind)?,
            };
            log::info!("peak {} final {} dense ratio {:.2}", result.summary.peak, result.summary.final_resident, result.summary.dense_ratio);
            match cli.format {
                Format::Json => write_json(&cli.out, &result)?,
                Format::Csv => {
                    let mut w = output(&cli.out)?;
                    result.write_csv(&mut w)?;
                    w.flush()?;
                }
            }
        }
        Command::Train { experiment, config, steps, lr, batch_size, print_config } => {
            let experiment: Experiment = experiment.parse()?;
            let mut cfg = match config {
                Some(p) => serde_json::from_reader(BufReader::new(open(&p)?))?,
                None => ExperimentConfig::default_for(experiment),
            };
            cfg.seed = cli.seed;
            if let Some(s) = steps {
                cfg.schedule.steps = s;
            }
            if let Some(lr) = lr {
                cfg.schedule.lr = lr;
            }
            if let Some(b) = batch_size {
                cfg.schedule.batch_size = b;
            }
            if print_config {
                return write_json(&cli.out, &cfg);
            }
            let report = run_experiment(&cfg)?;
            for (k, v) in &report.metrics {
                log::info!("{k} = {v}");
            }
            write_json(&cli.out, &report)?;
        }
        Command::Analyze { attn, segmap, threshold, report, pgm_prefix } => {
            let seg = read_segmap(&segmap)?;
            let map = AttnMap::read_csv(BufReader::new(open(&attn)?), seg)?;
            if let Some(prefix) = pgm_prefix {
                if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                convsink::analyzer::export_map(&map, &prefix, ExportFormat::Pgm)?;
            }
            write_json(&report.or(cli.out), &analyze(&map, threshold)?)?;
        }
        Command::Bench { l, ts } => {
            let report = scaling(l, &parse_list(&ts)?)?;
            match cli.format {
                Format::Json => write_json(&cli.out, &report)?,
                Format::Csv => {
                    let mut w = output(&cli.out)?;
                    report.write_csv(&mut w)?;
                    w.flush()?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> Result<()> {
        run(Cli::try_parse_from(std::iter::once("convsink").chain(args.iter().copied()))?)
    }

    /// Runs with `--out` pointed at a scratch file and returns what was written.
    fn capture(args: &[&str]) -> String {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let mut full = args.to_vec();
        full.extend(["--out", out.to_str().unwrap()]);
        call(&full).unwrap();
        fs::read_to_string(&out).unwrap()
    }

    fn code(args: &[&str]) -> i32 {
        exit_code(&call(args).unwrap_err())
    }

    #[test]
    fn simulate_csv_matches_golden() {
        assert_eq!(capture(&["simulate", "--uniform", "3:3"]), include_str!("../tests/golden/convsink_t3_l3.csv"));
    }

    #[test]
    fn simulate_json_summary() {
        let v: serde_json::Value =
            serde_json::from_str(&capture(&["--format", "json", "simulate", "--uniform", "64:32"])).unwrap();
        assert_eq!(v["summary"]["peak"], 127);
        assert_eq!(v["summary"]["tokens"], 2049);
    }

    #[test]
    fn mask_csv_rows() {
        let text = capture(&["mask", "--kind", "streaming", "--uniform", "3:3"]);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("query,key,allowed"));
        assert_eq!(lines.count(), 100);
        assert!(text.contains("\n8,1,0\n") && text.contains("\n8,3,1\n"));
    }

    #[test]
    fn mask_pgm_header() {
        assert!(capture(&["mask", "--kind", "lmr", "--lengths", "2,2,2,2", "--pgm"]).starts_with("P2\n"));
    }

    #[test]
    fn datagen_is_seeded() {
        let args = ["--seed", "5", "datagen", "--task", "lmr", "--count", "3", "--pairs", "4"];
        let a = capture(&args);
        assert_eq!(a, capture(&args));
        assert_eq!(a.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(a.lines().next().unwrap()).unwrap();
        assert_eq!(first["task"], "lmr");
    }

    #[test]
    fn bench_header() {
        let text = capture(&["bench", "--l", "16", "--ts", "8,16,32"]);
        assert_eq!(text.lines().next(), Some("t,l,tokens,convsink_peak,dense_peak"));
    }

    #[test]
    fn short_training_run_writes_report() {
        let v: serde_json::Value =
            serde_json::from_str(&capture(&["train", "--experiment", "smr-recon", "--steps", "5"])).unwrap();
        assert_eq!(v["experiment"], "smr-recon");
        assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
    }

    #[test]
    fn validation_errors_exit_2() {
        assert_eq!(code(&["train", "--steps", "0"]), 2);
        assert_eq!(code(&["simulate", "--policy", "smr", "--uniform", "3:3"]), 2);
        assert_eq!(code(&["mask", "--kind", "bogus", "--uniform", "2:2"]), 2);
        assert_eq!(code(&["simulate"]), 2);
    }

    #[test]
    fn missing_input_file_exits_3() {
        assert_eq!(code(&["simulate", "--trace", "/nonexistent/trace.jsonl"]), 3);
    }
}
